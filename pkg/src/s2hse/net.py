"""Network assembly, parameter accounting, forward/backward, checkpoints.

Topology for first-layer width f and per-block depth d:

    d convs @f -> d convs @2f -> dropout -> [max pool2 || avg pool2] concat (4f)
    -> d convs @8f -> d convs @16f -> dropout -> 1x1 conv to 2 logit channels

Every 3x3 conv is zero same-padded and followed by ReLU; the final 1x1 conv
is linear. One 2x pooling stage makes the output grid exactly half the input
on any even input size.
"""

import io
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ContractError, DecodeError, InvalidConfigError

CKPT_MAGIC = b"S2HSE1\n"


@dataclass(frozen=True)
class ArchSpec:
    """Architecture descriptor: f = first-block width, depth = convs per block."""

    f: int = 16
    depth: int = 2
    in_channels: int = 10

    def __post_init__(self):
        if self.f < 1 or self.depth < 1 or self.in_channels < 1:
            raise InvalidConfigError(f"invalid ArchSpec: {self}")


def layer_shapes(spec):
    """(out_c, in_c, k) for every parameterized conv layer, in forward order."""
    f, d, cin = spec.f, spec.depth, spec.in_channels
    shapes = []
    prev = cin
    for width in (f, 2 * f):
        for _ in range(d):
            shapes.append((width, prev, 3))
            prev = width
    prev = 4 * f  # concat of max- and avg-pooled 2f maps
    for width in (8 * f, 16 * f):
        for _ in range(d):
            shapes.append((width, prev, 3))
            prev = width
    shapes.append((2, 16 * f, 1))
    return shapes


def param_count(spec):
    """Closed-form trainable-parameter count for an ArchSpec."""
    f, d = spec.f, spec.depth
    cin = spec.in_channels
    return ((9 * cin * f + f) + (d - 1) * (9 * f * f + f)
            + (18 * f * f + 2 * f) + (d - 1) * (36 * f * f + 2 * f)
            + (288 * f * f + 8 * f) + (d - 1) * (576 * f * f + 8 * f)
            + (1152 * f * f + 16 * f) + (d - 1) * (2304 * f * f + 16 * f)
            + (32 * f + 2))


@dataclass
class Model:
    spec: ArchSpec
    blocks: list              # 4 lists of ConvLayer
    final: nn.ConvLayer
    drop1: nn.DropoutLayer    # after the 2f block, before pooling
    drop2: nn.DropoutLayer    # after the 16f block, before the final conv
    mode: str = "eval"

    def set_mode(self, mode):
        if mode not in ("train", "eval"):
            raise InvalidConfigError(f"mode must be train|eval, got {mode!r}")
        self.mode = mode
        self.drop1.mode = mode
        self.drop2.mode = mode

    def conv_layers(self):
        layers = [c for block in self.blocks for c in block]
        layers.append(self.final)
        return layers

    def parameters(self):
        """Flat list of parameter arrays (kernel, bias per conv, forward order)."""
        params = []
        for layer in self.conv_layers():
            params.append(layer.kernel)
            params.append(layer.bias)
        return params

    def n_params(self):
        return sum(p.size for p in self.parameters())


def build(spec, rng, dropout_rate=0.5):
    """He-initialized model; biases zero; starts in eval mode."""
    shapes = layer_shapes(spec)
    convs = [nn.ConvLayer(nn.he_init(( oc, ic, k, k), rng), np.zeros(oc))
             for oc, ic, k in shapes]
    d = spec.depth
    blocks = [convs[i * d:(i + 1) * d] for i in range(4)]
    return Model(spec=spec, blocks=blocks, final=convs[4 * d],
                 drop1=nn.DropoutLayer(dropout_rate), drop2=nn.DropoutLayer(dropout_rate))


def _check_input(model, x):
    nn.check_tensor4(x, "batch")
    if x.shape[1] != model.spec.in_channels:
        raise ContractError(
            f"batch has {x.shape[1]} channels, model expects {model.spec.in_channels}")
    if x.shape[2] < 2 or x.shape[3] < 2 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ContractError(f"spatial dims must be even and >= 2, got {x.shape[2:]}")


def forward(model, x, rng=None):
    """Logits (n, 2, h/2, w/2). Train mode applies dropout from ``rng``."""
    if model.mode == "train" and rng is None:
        raise ContractError("train-mode forward requires an rng for dropout")
    logits, _ = _run(model, x, rng, with_tape=False)
    return logits


def forward_tape(model, x, rng):
    """Training forward that records everything backward() needs."""
    if model.mode != "train":
        raise ContractError("forward_tape requires train mode")
    return _run(model, x, rng, with_tape=True)


def _run(model, x, rng, with_tape):
    _check_input(model, x)
    tape = Tape() if with_tape else None
    h = x

    def conv_relu(layer, h):
        cols_out = [] if with_tape else None
        z = nn.conv2d_forward(h, layer, _cols_out=cols_out)
        a = nn.relu(z)
        if with_tape:
            tape.convs.append((h, cols_out[0], z))
        return a

    for layer in model.blocks[0]:
        h = conv_relu(layer, h)
    for layer in model.blocks[1]:
        h = conv_relu(layer, h)

    h = _apply_dropout(model.drop1, h, rng, tape)
    mx, aux_m = nn.pool2_forward(h, "max")
    av, aux_a = nn.pool2_forward(h, "avg")
    h = nn.concat_channels(mx, av)
    if with_tape:
        tape.pool = (aux_m, aux_a, mx.shape[1])

    for layer in model.blocks[2]:
        h = conv_relu(layer, h)
    for layer in model.blocks[3]:
        h = conv_relu(layer, h)

    h = _apply_dropout(model.drop2, h, rng, tape)
    cols_out = [] if with_tape else None
    logits = nn.conv2d_forward(h, model.final, _cols_out=cols_out)
    if with_tape:
        tape.convs.append((h, cols_out[0], logits))
    return logits, tape


def _apply_dropout(layer, h, rng, tape):
    if layer.mode == "train" and layer.rate > 0.0:
        out, mask = nn.dropout_train(h, layer.rate, rng)
    else:
        out, mask = h, None
    if tape is not None:
        tape.drop_masks.append(mask)
    return out


@dataclass
class Tape:
    convs: list = field(default_factory=list)   # (input, im2col, pre-activation)
    drop_masks: list = field(default_factory=list)
    pool: tuple = None


def backward(model, tape, grad_logits):
    """Gradients for every parameter, aligned with model.parameters()."""
    layers = model.conv_layers()
    d = model.spec.depth
    grads = [None] * (2 * len(layers))
    conv_recs = list(tape.convs)

    def conv_back(i, g, through_relu):
        xin, cols, z = conv_recs[i]
        if through_relu:
            g = nn.relu_backward(g, z)
        gi, gk, gb = nn.conv2d_backward(xin, layers[i], g, cols=cols)
        grads[2 * i] = gk
        grads[2 * i + 1] = gb
        conv_recs[i] = None  # release the im2col buffer
        return gi

    g = conv_back(4 * d, grad_logits, through_relu=False)
    if tape.drop_masks[1] is not None:
        g = g * tape.drop_masks[1]
    for i in range(4 * d - 1, 2 * d - 1, -1):
        g = conv_back(i, g, through_relu=True)

    aux_m, aux_a, c_max = tape.pool
    g_max, g_avg = nn.concat_channels_backward(g, c_max)
    g = nn.pool2_backward(aux_m, g_max) + nn.pool2_backward(aux_a, g_avg)
    if tape.drop_masks[0] is not None:
        g = g * tape.drop_masks[0]
    for i in range(2 * d - 1, -1, -1):
        g = conv_back(i, g, through_relu=True)
    return grads


def save_checkpoint(model, path):
    """Versioned text+binary format; weights as little-endian float64."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    layers = model.conv_layers()
    buf.write(f"f={model.spec.f}\n".encode())
    buf.write(f"d={model.spec.depth}\n".encode())
    buf.write(f"layers={len(layers)}\n".encode())
    for layer in layers:
        buf.write(f"conv {layer.out_c} {layer.in_c} {layer.k}\n".encode())
        buf.write(np.ascontiguousarray(layer.kernel, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Inverse of save_checkpoint; validates the layer chain against the spec."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CKPT_MAGIC):
        raise DecodeError(f"{path}: bad checkpoint magic")
    pos = len(CKPT_MAGIC)

    def read_line():
        nonlocal pos
        end = data.find(b"\n", pos)
        if end < 0:
            raise DecodeError(f"{path}: truncated header")
        line = data[pos:end].decode("ascii", errors="replace")
        pos = end + 1
        return line

    def kv_int(key):
        line = read_line()
        if not line.startswith(key + "="):
            raise DecodeError(f"{path}: expected {key}=, got {line!r}")
        try:
            return int(line.split("=", 1)[1])
        except ValueError as exc:
            raise DecodeError(f"{path}: bad integer in {line!r}") from exc

    f = kv_int("f")
    d = kv_int("d")
    n_layers = kv_int("layers")
    convs = []
    for i in range(n_layers):
        parts = read_line().split()
        if len(parts) != 4 or parts[0] != "conv":
            raise DecodeError(f"{path}: malformed layer header at index {i}")
        out_c, in_c, k = (int(p) for p in parts[1:])
        nk = out_c * in_c * k * k
        need = (nk + out_c) * 8
        if pos + need > len(data):
            raise DecodeError(f"{path}: truncated weights at layer {i}")
        kernel = np.frombuffer(data[pos:pos + nk * 8], dtype="<f8").reshape(out_c, in_c, k, k)
        pos += nk * 8
        bias = np.frombuffer(data[pos:pos + out_c * 8], dtype="<f8")
        pos += out_c * 8
        convs.append(nn.ConvLayer(kernel.copy(), bias.copy()))
    if pos != len(data):
        raise DecodeError(f"{path}: {len(data) - pos} trailing bytes")

    spec = ArchSpec(f=f, depth=d, in_channels=convs[0].in_c if convs else 10)
    expect = layer_shapes(spec)
    got = [(c.out_c, c.in_c, c.k) for c in convs]
    if got != expect:
        raise DecodeError(f"{path}: layer chain {got} does not match f={f}, d={d}")
    blocks = [convs[i * d:(i + 1) * d] for i in range(4)]
    return Model(spec=spec, blocks=blocks, final=convs[4 * d],
                 drop1=nn.DropoutLayer(0.5), drop2=nn.DropoutLayer(0.5))
