"""Seam-free tiled inference over large rasters.

Tiles overlap by a margin at least the network's receptive-field radius
(12 input px for depth 2); each tile's margin strip is discarded so the
retained windows partition the output grid exactly. Discard-margin stitching
makes tiled output equal whole-image output on interior pixels, rather than
approximating it by blending.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import net
from .errors import ContractError, InvalidInputError
from .raster import Raster


@dataclass(frozen=True)
class Tile:
    read: tuple   # ((r0, r1), (c0, c1)) input pixels
    out: tuple    # ((r0, r1), (c0, c1)) output (half-resolution) pixels


@dataclass
class TilePlan:
    width: int
    height: int
    tile: int
    margin: int
    tiles: list


def _axis_spans(length, tile, margin):
    """Per-axis (read_start, read_end, valid_start, valid_end) in input px.

    Interior valid spans keep ``margin`` px away from their tile's edges;
    the first/last tiles keep their outer borders so the spans cover
    [0, length) exactly once.
    """
    if length <= tile:
        return [(0, length, 0, length)]
    step = tile - 2 * margin
    starts = []
    k = 0
    while True:
        s = min(k * step, length - tile)
        starts.append(s)
        if s == length - tile:
            break
        k += 1
    bounds = [0] + [starts[i] + margin for i in range(1, len(starts))] + [length]
    return [(starts[i], starts[i] + tile, bounds[i], bounds[i + 1])
            for i in range(len(starts))]


def plan_tiles(width, height, tile=128, margin=16):
    """Row-major tiling whose valid output windows partition the output grid.

    Requires even ``tile`` and even ``margin`` (output pixels cover 2x2 input
    pixels, so an odd margin cannot land on an output-pixel boundary), and
    tile - 2*margin >= 2. A raster smaller than the tile yields a single
    degenerate tile covering everything.
    """
    if tile % 2 or tile < 2:
        raise InvalidInputError(f"tile must be even and >= 2, got {tile}")
    if margin % 2 or margin < 0:
        raise InvalidInputError(f"margin must be even and >= 0, got {margin}")
    if tile - 2 * margin < 2:
        raise InvalidInputError(f"tile {tile} minus twice margin {margin} must be >= 2")
    if width % 2 or height % 2:
        raise InvalidInputError(f"raster dims must be even, got {width}x{height}")
    rows = _axis_spans(height, tile, margin)
    cols = _axis_spans(width, tile, margin)
    tiles = [Tile(read=((r0, r1), (c0, c1)),
                  out=((v0 // 2, v1 // 2), (u0 // 2, u1 // 2)))
             for r0, r1, v0, v1 in rows
             for c0, c1, u0, u1 in cols]
    return TilePlan(width=width, height=height, tile=tile, margin=margin, tiles=tiles)


def predict_map(model, image, plan=None, threads=1):
    """Tiled forward pass producing (binary map u8, probability raster f32).

    The image must be normalized (scale=1) and the model in eval mode. The
    binary map applies prob >= 0.5, so an exact tie maps to settlement.
    Output cells touching any nodata input pixel become nodata (255 in the
    map, NaN in the probability raster). Tiles write disjoint output windows,
    so processing them in a thread pool changes nothing in the result.
    """
    if image.bands != 10:
        raise ContractError(f"expected a 10-band image, got {image.bands}")
    if model.mode != "eval":
        raise ContractError("predict_map requires the model in eval mode")
    if image.scale != 1.0:
        raise ContractError("image is not normalized (scale != 1)")
    if plan is None:
        plan = plan_tiles(image.width, image.height)
    if (plan.width, plan.height) != (image.width, image.height):
        raise ContractError("tile plan does not match the image dimensions")

    oh, ow = image.height // 2, image.width // 2
    prob = np.empty((oh, ow), dtype=np.float32)
    hse = np.empty((oh, ow), dtype=np.uint8)

    def run_tile(t):
        (r0, r1), (c0, c1) = t.read
        (vr0, vr1), (vc0, vc1) = t.out
        x = np.asarray(image.data[:, r0:r1, c0:c1], dtype=np.float64)
        bad = (x == image.nodata).any(axis=0)
        if bad.any():
            x = np.where(bad, 0.0, x)
        logits = net.forward(model, x[None])[0]
        z = logits - logits.max(axis=0, keepdims=True)
        e = np.exp(z)
        p = e[1] / (e[0] + e[1])
        pr = p[vr0 - r0 // 2:vr1 - r0 // 2, vc0 - c0 // 2:vc1 - c0 // 2]
        prob[vr0:vr1, vc0:vc1] = pr
        hse[vr0:vr1, vc0:vc1] = (pr >= 0.5).astype(np.uint8)
        if bad.any():
            cell_bad = bad.reshape((r1 - r0) // 2, 2, (c1 - c0) // 2, 2).any(axis=(1, 3))
            cb = cell_bad[vr0 - r0 // 2:vr1 - r0 // 2, vc0 - c0 // 2:vc1 - c0 // 2]
            hse[vr0:vr1, vc0:vc1][cb] = 255
            prob[vr0:vr1, vc0:vc1][cb] = np.nan

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_tile, plan.tiles))
    else:
        for t in plan.tiles:
            run_tile(t)

    hse_r = Raster(width=ow, height=oh, bands=1, gsd=image.gsd * 2,
                   origin_x=image.origin_x, origin_y=image.origin_y,
                   scale=1.0, nodata=255.0, dtype="u8", data=hse[None])
    prob_r = Raster(width=ow, height=oh, bands=1, gsd=image.gsd * 2,
                    origin_x=image.origin_x, origin_y=image.origin_y,
                    scale=1.0, nodata=float("nan"), dtype="f32", data=prob[None])
    return hse_r, prob_r


def save_pgm(raster, path, value_map=((0, 0), (1, 255), (255, 127))):
    """8-bit grayscale PGM export of a single-band u8 raster."""
    if raster.bands != 1 or raster.dtype != "u8":
        raise ContractError("PGM export needs a single-band u8 raster")
    img = raster.data[0]
    out = np.zeros_like(img)
    for src, dst in value_map:
        out[img == src] = dst
    with open(path, "wb") as fh:
        fh.write(f"P5\n{raster.width} {raster.height}\n255\n".encode())
        fh.write(out.tobytes())
