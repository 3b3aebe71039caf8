"""Accuracy assessment: confusion metrics, grid check points, agreement maps.

Metrics follow the usual binary-map battery: kappa, average accuracy (mean of
the two class recalls), commission error, recall and F1, all derived from one
confusion matrix. Building-mask evaluation deliberately reports recall only:
a settlement map is a superset of buildings, so its precision against a
building layer is meaningless.
"""

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, EmptyResultError, InvalidInputError, OutOfExtentError
from .raster import Raster


@dataclass
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise InvalidInputError("confusion counts must be non-negative")

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


@dataclass
class CheckPointSet:
    """Labeled map points; ``spacing`` is set when built on a regular grid."""

    points: list  # (x_m, y_m, label) with label in {0, 1}
    spacing: float | None = None

    def __len__(self):
        return len(self.points)


def mlgcp_grid(extent, spacing=2000.0):
    """Centers of the full spacing-cells inside ``extent`` (x0, y0, x1, y1).

    The grid starts half a spacing from the lower-left corner; an extent
    smaller than one spacing yields no points.
    """
    x0, y0, x1, y1 = extent
    if x1 <= x0 or y1 <= y0:
        raise InvalidInputError(f"degenerate extent {extent}")
    nx = int((x1 - x0) // spacing)
    ny = int((y1 - y0) // spacing)
    return [(x0 + spacing / 2 + i * spacing, y0 + spacing / 2 + j * spacing)
            for j in range(ny) for i in range(nx)]


def load_points_csv(path):
    """Read ``x_m,y_m,label`` lines (optional header) into a CheckPointSet."""
    points = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            if row[0].strip() == "x_m":
                continue
            if len(row) != 3:
                raise InvalidInputError(f"{path}: expected x_m,y_m,label rows, got {row}")
            x, y, lab = float(row[0]), float(row[1]), int(row[2])
            if lab not in (0, 1):
                raise InvalidInputError(f"{path}: label must be 0 or 1, got {lab}")
            points.append((x, y, lab))
    return CheckPointSet(points)


def save_points_csv(points, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x_m", "y_m", "label"])
        for x, y, lab in points.points:
            writer.writerow([repr(float(x)), repr(float(y)), int(lab)])


def confusion_from_points(hse_map, points):
    """Tally check points against the map cell containing each point.

    Points on nodata cells are excluded and returned alongside the counts as
    (ConfusionMatrix, n_excluded). Points outside the raster raise
    OutOfExtentError listing the offenders.
    """
    outside = []
    cm = ConfusionMatrix()
    excluded = 0
    grid = hse_map.data[0]
    for x, y, lab in points.points:
        pix = hse_map.pixel_of(x, y)
        if pix is None:
            outside.append((x, y))
            continue
        val = int(grid[pix])
        if val == 255:
            excluded += 1
            continue
        if lab == 1 and val == 1:
            cm.tp += 1
        elif lab == 0 and val == 1:
            cm.fp += 1
        elif lab == 1 and val == 0:
            cm.fn += 1
        else:
            cm.tn += 1
    if outside:
        raise OutOfExtentError(f"{len(outside)} check points outside the map: "
                               f"{outside[:5]}{'...' if len(outside) > 5 else ''}",
                               points=outside)
    return cm, excluded


def kappa(cm):
    """Chance-corrected agreement over the binary confusion matrix."""
    n = cm.total
    if n == 0:
        raise EmptyResultError("empty confusion matrix")
    po = (cm.tp + cm.tn) / n
    pe = ((cm.tp + cm.fp) * (cm.tp + cm.fn) + (cm.fn + cm.tn) * (cm.fp + cm.tn)) / n**2
    if pe == 1.0:
        raise EmptyResultError("kappa undefined: chance agreement is 1 (single-class data)")
    return (po - pe) / (1.0 - pe)


def aa(cm):
    """Average accuracy: mean of the two class-wise recalls."""
    if cm.tp + cm.fn == 0 or cm.tn + cm.fp == 0:
        raise EmptyResultError("average accuracy undefined: a class is absent")
    return 0.5 * (cm.tp / (cm.tp + cm.fn) + cm.tn / (cm.tn + cm.fp))


def cme(cm):
    """Commission error: share of predicted-positive cells that are wrong."""
    if cm.tp + cm.fp == 0:
        raise EmptyResultError("commission error undefined: no positive predictions")
    return cm.fp / (cm.tp + cm.fp)


def recall(cm):
    if cm.tp + cm.fn == 0:
        raise EmptyResultError("recall undefined: no positive truth")
    return cm.tp / (cm.tp + cm.fn)


def f1(cm):
    if cm.tp + cm.fp == 0 or cm.tp + cm.fn == 0:
        raise EmptyResultError("F1 undefined: missing predictions or truth")
    p = cm.tp / (cm.tp + cm.fp)
    r = cm.tp / (cm.tp + cm.fn)
    if p + r == 0:
        raise EmptyResultError("F1 undefined: precision and recall both zero")
    return 2.0 * p * r / (p + r)


def building_recall(hse_map, buildings):
    """Share of building cells also mapped as settlement (N1/N0).

    Precision is deliberately not computed: settlement extent legitimately
    covers far more than buildings.
    """
    _check_same_grid(hse_map, buildings, "building mask")
    b = buildings.data[0]
    h = hse_map.data[0]
    valid = (b != 255) & (h != 255)
    n0 = int(((b == 1) & valid).sum())
    if n0 == 0:
        raise EmptyResultError("building recall undefined: mask has no building cells")
    n1 = int(((b == 1) & (h == 1) & valid).sum())
    return n1 / n0


def _check_same_grid(a, b, what):
    if (a.width, a.height) != (b.width, b.height) or a.gsd != b.gsd \
            or (a.origin_x, a.origin_y) != (b.origin_x, b.origin_y):
        raise ContractError(f"{what} is not co-registered with the map")


# Agreement codes for (ours, guf, ghsl) triples, indexed by ours*4 + guf*2 + ghsl.
AGREEMENT_CODES = {
    "none": 0, "only_ours": 1, "only_guf": 2, "only_ghsl": 3,
    "all_three": 4, "all_but_ours": 5, "all_but_guf": 6, "all_but_ghsl": 7,
}
_AGREE_LUT = np.array([0, 3, 2, 5, 1, 6, 7, 4], dtype=np.uint8)

# code -> RGB; the named semantics follow the usual comparison-map palette:
# purple marks cells only we map, blue cells only we miss, red/cyan cells
# missed only by the first/second baseline.
AGREEMENT_PALETTE = {
    0: (255, 255, 255),   # none
    1: (128, 0, 128),     # only ours (purple)
    2: (0, 160, 0),       # only first baseline
    3: (255, 160, 0),     # only second baseline
    4: (0, 0, 0),         # all three
    5: (0, 0, 255),       # all but ours (blue)
    6: (255, 0, 0),       # all but first baseline (red)
    7: (0, 255, 255),     # all but second baseline (cyan)
    255: (128, 128, 128),  # nodata
}


def agreement_map(ours, guf, ghsl):
    """Per-pixel 3-product agreement code raster (see AGREEMENT_CODES)."""
    _check_same_grid(ours, guf, "first baseline")
    _check_same_grid(ours, ghsl, "second baseline")
    o, g, h = ours.data[0], guf.data[0], ghsl.data[0]
    bad = (o == 255) | (g == 255) | (h == 255)
    idx = (np.where(bad, 0, o).astype(np.intp) * 4
           + np.where(bad, 0, g) * 2 + np.where(bad, 0, h))
    codes = _AGREE_LUT[idx]
    codes[bad] = 255
    return Raster(width=ours.width, height=ours.height, bands=1, gsd=ours.gsd,
                  origin_x=ours.origin_x, origin_y=ours.origin_y,
                  scale=1.0, nodata=255.0, dtype="u8", data=codes[None])


def save_agreement_ppm(agree, path):
    """Color PPM export of an agreement raster using AGREEMENT_PALETTE."""
    if agree.bands != 1 or agree.dtype != "u8":
        raise ContractError("PPM export needs a single-band u8 raster")
    img = agree.data[0]
    rgb = np.zeros((agree.height, agree.width, 3), dtype=np.uint8)
    for code, color in AGREEMENT_PALETTE.items():
        rgb[img == code] = color
    with open(path, "wb") as fh:
        fh.write(f"P6\n{agree.width} {agree.height}\n255\n".encode())
        fh.write(rgb.tobytes())


_METRICS = (("kappa", kappa, 1.0), ("aa_pct", aa, 100.0), ("cme_pct", cme, 100.0),
            ("recall_pct", recall, 100.0), ("f1", f1, 1.0))


def metrics_dict(cm):
    """All five metrics; undefined ones come back as None."""
    out = {}
    for name, fn, scale in _METRICS:
        try:
            out[name] = fn(cm) * scale
        except EmptyResultError:
            out[name] = None
    return out


def report(products, fmt="json"):
    """Render per-product metrics; ``products`` is [(name, ConfusionMatrix)].

    fmt="json" returns a parseable document; fmt="text" an aligned table with
    percentages at one decimal.
    """
    if fmt == "json":
        doc = {"products": [
            {"name": name,
             "counts": {"tp": cm.tp, "fp": cm.fp, "fn": cm.fn, "tn": cm.tn},
             "metrics": metrics_dict(cm)}
            for name, cm in products]}
        return json.dumps(doc, indent=2)
    if fmt != "text":
        raise InvalidInputError(f"unknown report format {fmt!r}")

    headers = ["product", "kappa", "AA%", "CME%", "recall%", "F1", "tp", "fp", "fn", "tn"]
    rows = []
    for name, cm in products:
        md = metrics_dict(cm)

        def cell(key, nd):
            return "n/a" if md[key] is None else f"{md[key]:.{nd}f}"

        rows.append([name, cell("kappa", 4), cell("aa_pct", 1), cell("cme_pct", 1),
                     cell("recall_pct", 1), cell("f1", 4),
                     str(cm.tp), str(cm.fp), str(cm.fn), str(cm.tn)])
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    buf = io.StringIO()
    for row in [headers] + rows:
        buf.write("  ".join(c.rjust(w) for c, w in zip(row, widths)).rstrip() + "\n")
    return buf.getvalue()
