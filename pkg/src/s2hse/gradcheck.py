"""Finite-difference verification of every analytic gradient.

Each check perturbs inputs (or parameters) entrywise by +-h, forms the
central difference of a scalar functional, and compares against the analytic
gradient. Relative error is |a - n| / max(|a|, |n|, 0.01); with double
precision and h = 1e-5 the discretization noise sits near 1e-9, so the 1e-5
acceptance threshold has four orders of headroom.

Inputs with kinks (ReLU at 0, pooling ties) are nudged away from the
non-differentiable set before checking.
"""

import numpy as np

from . import net, nn

STEP = 1e-5
THRESHOLD = 1e-5


def rel_err(a, n):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-2)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0


def _fd_grad(f, x, h=STEP):
    """Entrywise central difference of scalar f at x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f(x)
        flat[i] = keep - h
        fm = f(x)
        flat[i] = keep
        gf[i] = (fp - fm) / (2 * h)
    return g


def _away_from_kinks(x, gap=1e-2):
    """Push values within ``gap`` of zero outward so ReLU is smooth locally."""
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap + x, x)


def check_conv(rng, k):
    n, ci, co = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    h, w = int(rng.integers(2, 4)) * 2, int(rng.integers(2, 4)) * 2
    x = rng.normal(size=(n, ci, h, w))
    layer = nn.ConvLayer(rng.normal(size=(co, ci, k, k)), rng.normal(size=co))
    proj = rng.normal(size=(n, co, h, w))

    def loss_of(inp, kernel, bias):
        lay = nn.ConvLayer(kernel, bias)
        return float((nn.conv2d_forward(inp, lay) * proj).sum())

    gi, gk, gb = nn.conv2d_backward(x, layer, proj)
    errs = [
        rel_err(gi, _fd_grad(lambda v: loss_of(v, layer.kernel, layer.bias), x.copy())),
        rel_err(gk, _fd_grad(lambda v: loss_of(x, v, layer.bias), layer.kernel.copy())),
        rel_err(gb, _fd_grad(lambda v: loss_of(x, layer.kernel, v), layer.bias.copy())),
    ]
    return max(errs)


def check_pool(rng, kind):
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    h, w = int(rng.integers(2, 5)) * 2, int(rng.integers(2, 5)) * 2
    # pairwise-distinct values (gap 0.05 >> step) keep the max argmax stable
    size = n * c * h * w
    x = (rng.permutation(size).astype(np.float64) * 0.05 - 0.025 * size).reshape(n, c, h, w)
    proj = rng.normal(size=(n, c, h // 2, w // 2))

    def loss_of(inp):
        out, _ = nn.pool2_forward(inp, kind)
        return float((out * proj).sum())

    _, aux = nn.pool2_forward(x, kind)
    gi = nn.pool2_backward(aux, proj)
    return rel_err(gi, _fd_grad(loss_of, x.copy()))


def check_relu(rng):
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), 4, 4)
    x = _away_from_kinks(rng.normal(size=shape))
    proj = rng.normal(size=shape)
    ga = nn.relu_backward(proj, x)
    gn = _fd_grad(lambda v: float((nn.relu(v) * proj).sum()), x.copy())
    return rel_err(ga, gn)


def check_concat(rng):
    n, h, w = int(rng.integers(1, 3)), 4, 4
    ca, cb = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    a = rng.normal(size=(n, ca, h, w))
    b = rng.normal(size=(n, cb, h, w))
    proj = rng.normal(size=(n, ca + cb, h, w))
    ga, gb = nn.concat_channels_backward(proj, ca)
    na = _fd_grad(lambda v: float((nn.concat_channels(v, b) * proj).sum()), a.copy())
    nb = _fd_grad(lambda v: float((nn.concat_channels(a, v) * proj).sum()), b.copy())
    return max(rel_err(ga, na), rel_err(gb, nb))


def check_dropout(rng):
    shape = (1, int(rng.integers(1, 4)), 4, 4)
    x = rng.normal(size=shape)
    proj = rng.normal(size=shape)
    seed = int(rng.integers(0, 2**31))
    rate = float(rng.uniform(0.2, 0.7))
    _, mask = nn.dropout_train(x, rate, np.random.default_rng(seed))

    def loss_of(inp):
        out, _ = nn.dropout_train(inp, rate, np.random.default_rng(seed))
        return float((out * proj).sum())

    return rel_err(proj * mask, _fd_grad(loss_of, x.copy()))


def check_softmax_xent(rng):
    n, h, w = int(rng.integers(1, 3)), int(rng.integers(2, 5)), int(rng.integers(2, 5))
    logits = rng.normal(size=(n, 2, h, w))
    labels = rng.integers(0, 2, size=(n, h, w)).astype(np.uint8)
    labels[rng.random(size=labels.shape) < 0.2] = nn.IGNORE
    if (labels == nn.IGNORE).all():
        labels[0, 0, 0] = 0
    _, ga = nn.softmax2_xent(logits, labels)
    gn = _fd_grad(lambda v: nn.softmax2_xent(v, labels)[0], logits.copy())
    return rel_err(ga, gn)


def check_model(rng, n_entries=20):
    """End-to-end check of backward() on a tiny network, sampling parameter
    entries instead of sweeping all of them."""
    spec = net.ArchSpec(f=2, depth=1)
    model = net.build(spec, rng, dropout_rate=0.0)
    model.set_mode("train")
    x = rng.normal(size=(1, 10, 8, 8))
    labels = rng.integers(0, 2, size=(1, 4, 4)).astype(np.uint8)

    def loss():
        logits = net.forward(model, x, rng=np.random.default_rng(0))
        return nn.softmax2_xent(logits, labels)[0]

    logits, tape = net.forward_tape(model, x, np.random.default_rng(0))
    _, gl = nn.softmax2_xent(logits, labels)
    grads = net.backward(model, tape, gl)

    worst = 0.0
    params = model.parameters()
    for p, g in zip(params, grads):
        flat = p.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_entries, flat.size), replace=False)
        for i in picks:
            keep = flat[i]
            flat[i] = keep + STEP
            fp = loss()
            flat[i] = keep - STEP
            fm = loss()
            flat[i] = keep
            num = (fp - fm) / (2 * STEP)
            ana = g.reshape(-1)[i]
            worst = max(worst, rel_err(np.float64(ana), np.float64(num)))
    return worst


def run_suite(seed=0):
    """Run every registered check; returns [(name, max_rel_err)]."""
    rng = np.random.default_rng(seed)
    results = []
    for i in range(4):
        results.append((f"conv3x3[{i}]", check_conv(rng, 3)))
    for i in range(3):
        results.append((f"conv1x1[{i}]", check_conv(rng, 1)))
    for i in range(3):
        results.append((f"maxpool[{i}]", check_pool(rng, "max")))
        results.append((f"avgpool[{i}]", check_pool(rng, "avg")))
        results.append((f"relu[{i}]", check_relu(rng)))
        results.append((f"dropout[{i}]", check_dropout(rng)))
        results.append((f"softmax_xent[{i}]", check_softmax_xent(rng)))
    for i in range(2):
        results.append((f"concat[{i}]", check_concat(rng)))
    results.append(("model_end_to_end", check_model(rng)))
    return results
