"""Raster I/O, resampling, normalization, patch extraction, synthetic scenes.

File format is BSQF: a short text header followed by a raw little-endian
band-sequential payload (see ``save_raster``). It is deliberately trivial so
any GIS stack can convert to/from it in a few lines (e.g. with gdal_translate
to ENVI BSQ plus a header rewrite).

Grid convention: ``origin`` is the map coordinate of the upper-left raster
corner; rows grow southward, so pixel (row, col) covers
x in [origin_x + col*gsd, origin_x + (col+1)*gsd] and
y in [origin_y - (row+1)*gsd, origin_y - row*gsd].
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import ContractError, DecodeError, InvalidInputError
from .nn import IGNORE

BSQF_MAGIC = b"BSQF1\n"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}

# 10-band stacking order: native 10 m bands first, then the upsampled 20 m set.
BAND_ORDER = ("B2", "B3", "B4", "B8", "B5", "B6", "B7", "B8a", "B11", "B12")


@dataclass
class Raster:
    """Georeferenced multi-band grid; data has shape (bands, height, width)."""

    width: int
    height: int
    bands: int
    gsd: float
    origin_x: float
    origin_y: float
    scale: float
    nodata: float
    dtype: str
    data: np.ndarray

    def __post_init__(self):
        if self.dtype not in _DTYPES:
            raise InvalidInputError(f"unsupported dtype {self.dtype!r}")
        if self.data.shape != (self.bands, self.height, self.width):
            raise ContractError(
                f"data shape {self.data.shape} does not match header "
                f"({self.bands}, {self.height}, {self.width})")

    @property
    def extent(self):
        """(x0, y0, x1, y1) in map units, y0 south edge, y1 north edge."""
        return (self.origin_x, self.origin_y - self.height * self.gsd,
                self.origin_x + self.width * self.gsd, self.origin_y)

    def pixel_of(self, x, y):
        """(row, col) of the pixel whose footprint contains map point (x, y).

        Points exactly on a shared edge snap to the smaller row/col index.
        Returns None if outside the raster.
        """
        tx = (x - self.origin_x) / self.gsd
        ty = (self.origin_y - y) / self.gsd
        if tx < 0 or ty < 0 or tx > self.width or ty > self.height:
            return None
        col = int(np.floor(tx))
        row = int(np.floor(ty))
        if col > 0 and col == tx:
            col -= 1
        if row > 0 and row == ty:
            row -= 1
        if col >= self.width or row >= self.height:
            return None
        return row, col


def save_raster(raster, path):
    head = (BSQF_MAGIC
            + f"width={raster.width}\n".encode()
            + f"height={raster.height}\n".encode()
            + f"bands={raster.bands}\n".encode()
            + f"gsd={float(raster.gsd)!r}\n".encode()
            + f"origin_x={float(raster.origin_x)!r}\n".encode()
            + f"origin_y={float(raster.origin_y)!r}\n".encode()
            + f"scale={float(raster.scale)!r}\n".encode()
            + f"nodata={float(raster.nodata)!r}\n".encode()
            + f"dtype={raster.dtype}\n".encode()
            + b"\n")
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.ascontiguousarray(raster.data, dtype=_DTYPES[raster.dtype]).tobytes())


def load_raster(path, mmap=False):
    """Read a BSQF file; ``mmap=True`` maps the payload read-only for
    bounded-memory access to large rasters."""
    with open(path, "rb") as fh:
        head = fh.read(len(BSQF_MAGIC))
        if head != BSQF_MAGIC:
            raise DecodeError(f"{path}: bad magic {head!r}")
        fields = {}
        while True:
            line = fh.readline()
            if line == b"\n":
                break
            if not line.endswith(b"\n"):
                raise DecodeError(f"{path}: truncated header")
            key, _, val = line[:-1].decode("ascii", errors="replace").partition("=")
            fields[key] = val
        payload_at = fh.tell()
        required = ("width", "height", "bands", "gsd", "origin_x", "origin_y",
                    "scale", "nodata", "dtype")
        missing = [k for k in required if k not in fields]
        if missing:
            raise DecodeError(f"{path}: missing header fields {missing}")
        try:
            width = int(fields["width"])
            height = int(fields["height"])
            bands = int(fields["bands"])
        except ValueError as exc:
            raise DecodeError(f"{path}: non-integer dimension") from exc
        dtype = fields["dtype"]
        if dtype not in _DTYPES:
            raise DecodeError(f"{path}: unsupported dtype {dtype!r}")
        np_dtype = _DTYPES[dtype]
        expect = width * height * bands * np_dtype.itemsize
        fh.seek(0, 2)
        actual = fh.tell() - payload_at
        if actual != expect:
            raise DecodeError(f"{path}: payload is {actual} bytes, header implies {expect}")
        if mmap:
            data = np.memmap(path, dtype=np_dtype, mode="r", offset=payload_at,
                             shape=(bands, height, width))
        else:
            fh.seek(payload_at)
            data = np.frombuffer(fh.read(expect), dtype=np_dtype).reshape(bands, height, width)
            data = data.copy()
    return Raster(width=width, height=height, bands=bands,
                  gsd=float(fields["gsd"]),
                  origin_x=float(fields["origin_x"]), origin_y=float(fields["origin_y"]),
                  scale=float(fields["scale"]), nodata=float(fields["nodata"]),
                  dtype=dtype, data=data)


# Catmull-Rom weights for the two phase offsets of an aligned 2x upsample.
# Output center j sits at input coordinate j/2 - 0.25, so fractional offsets
# alternate between 0.75 (even j) and 0.25 (odd j) over taps [i-1, i, i+1, i+2].
def _cr_kernel(t):
    t = abs(t)
    if t <= 1.0:
        return 1.5 * t**3 - 2.5 * t**2 + 1.0
    if t < 2.0:
        return -0.5 * (t**3 - 5.0 * t**2 + 8.0 * t - 4.0)
    return 0.0


# taps sit at floor(u)-1 .. floor(u)+2; weights are w(u - tap)
_W_EVEN = np.array([_cr_kernel(1 + 0.75), _cr_kernel(0.75),
                    _cr_kernel(1 - 0.75), _cr_kernel(2 - 0.75)])
_W_ODD = np.array([_cr_kernel(1 + 0.25), _cr_kernel(0.25),
                   _cr_kernel(1 - 0.25), _cr_kernel(2 - 0.25)])


def _upsample_axis(a, axis):
    a = np.moveaxis(a, axis, 0)
    n = a.shape[0]
    # Linear extrapolation border: keeps degree-1 fields exact to the edge.
    top = 2.0 * a[:1] - a[1:2]
    top2 = 2.0 * top - a[:1]
    bot = 2.0 * a[-1:] - a[-2:-1]
    bot2 = 2.0 * bot - a[-1:]
    ap = np.concatenate([top2, top, a, bot, bot2], axis=0)

    out = np.empty((2 * n,) + a.shape[1:], dtype=np.promote_types(a.dtype, np.float64))
    # even j: u = j/2 - 0.25, floor u = j/2 - 1 -> taps start at j/2 - 2 (+2 pad offset)
    i = np.arange(n)
    for tap in range(4):
        contrib_e = _W_EVEN[tap] * ap[i + tap]
        contrib_o = _W_ODD[tap] * ap[i + tap + 1]
        if tap == 0:
            out[0::2] = contrib_e
            out[1::2] = contrib_o
        else:
            out[0::2] += contrib_e
            out[1::2] += contrib_o
    return np.moveaxis(out, 0, axis)


def upsample_cubic(band):
    """2x Catmull-Rom upsampling with half-pixel-center alignment.

    Output pixel centers interleave around input centers (offsets -0.25 and
    +0.25 input pixels), which is the alignment of a 20 m grid refined to
    10 m over the same extent. Reproduces constant and linear fields exactly,
    including at the borders. Assumes no nodata inside the support.
    """
    band = np.asarray(band)
    if band.ndim != 2 or band.shape[0] < 2 or band.shape[1] < 2:
        raise InvalidInputError(f"upsample needs a 2-D grid of at least 2x2, got {band.shape}")
    return _upsample_axis(_upsample_axis(band, 0), 1)


def fill_nodata(band, nodata):
    """Replace nodata cells with the nearest valid value (edge replication)."""
    mask = band == nodata
    if not mask.any():
        return band, mask
    if mask.all():
        raise InvalidInputError("band is entirely nodata")
    _, idx = ndimage.distance_transform_edt(mask, return_indices=True)
    return band[tuple(idx)], mask


def stack_and_normalize(bands10m, bands20m, scale=10000.0, origin=(0.0, 0.0),
                        gsd=10.0, nodata=-9999.0):
    """Stack 4 native 10 m grids + 6 upsampled 20 m grids into a normalized
    10-band raster (order B2,B3,B4,B8,B5,B6,B7,B8a,B11,B12).

    Values are divided by ``scale`` and clamped to [0, 2]; the result header
    records scale=1. Nodata cells in any input are filled for interpolation
    but re-marked nodata in the output.
    """
    if len(bands10m) != 4 or len(bands20m) != 6:
        raise ContractError(f"need 4 + 6 bands, got {len(bands10m)} + {len(bands20m)}")
    h, w = np.asarray(bands10m[0]).shape
    out = np.empty((10, h, w), dtype=np.float64)
    bad = np.zeros((h, w), dtype=bool)
    for i, band in enumerate(bands10m):
        band = np.asarray(band, dtype=np.float64)
        if band.shape != (h, w):
            raise ContractError(f"10 m band {i} has shape {band.shape}, expected {(h, w)}")
        filled, mask = fill_nodata(band, nodata)
        out[i] = filled
        bad |= mask
    for i, band in enumerate(bands20m):
        band = np.asarray(band, dtype=np.float64)
        if band.shape != (h // 2, w // 2):
            raise ContractError(
                f"20 m band {i} has shape {band.shape}, expected {(h // 2, w // 2)}")
        filled, mask = fill_nodata(band, nodata)
        out[4 + i] = upsample_cubic(filled)
        if mask.any():
            bad |= np.repeat(np.repeat(mask, 2, axis=0), 2, axis=1)
    np.clip(out / scale, 0.0, 2.0, out=out)
    out[:, bad] = nodata
    return Raster(width=w, height=h, bands=10, gsd=gsd,
                  origin_x=origin[0], origin_y=origin[1],
                  scale=1.0, nodata=nodata, dtype="f32", data=out.astype(np.float32))


def normalize_reflectance(raster):
    """Divide by the header scale and clamp to [0, 2]; nodata passes through.

    Rejects rasters already at scale=1 so data cannot be normalized twice.
    """
    if raster.scale == 1.0:
        raise InvalidInputError("raster is already normalized (scale=1)")
    data = np.asarray(raster.data, dtype=np.float64)
    mask = data == raster.nodata
    data = np.clip(data / raster.scale, 0.0, 2.0)
    data[mask] = raster.nodata
    return replace(raster, scale=1.0, dtype="f32", data=data.astype(np.float32))


@dataclass
class SampleSet:
    """Paired input/label patches with geometric provenance.

    x: (N, 10, size, size) float64; y: (N, size/2, size/2) uint8 with IGNORE
    code 255; origin: (N, 2) patch upper-left (row, col) in image pixels.
    scene_shapes maps scene id to its image (height, width) for spatial splits.
    """

    x: np.ndarray
    y: np.ndarray
    scene: list
    origin: np.ndarray
    patch: int = 128
    scene_shapes: dict = field(default_factory=dict)

    def __len__(self):
        return self.x.shape[0]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return SampleSet(x=self.x[idx], y=self.y[idx],
                         scene=[self.scene[i] for i in idx],
                         origin=self.origin[idx], patch=self.patch,
                         scene_shapes=dict(self.scene_shapes))

    @staticmethod
    def merge(sets):
        sets = list(sets)
        if not sets:
            raise InvalidInputError("cannot merge zero sample sets")
        shapes = {}
        for s in sets:
            shapes.update(s.scene_shapes)
        return SampleSet(x=np.concatenate([s.x for s in sets]),
                         y=np.concatenate([s.y for s in sets]),
                         scene=[sid for s in sets for sid in s.scene],
                         origin=np.concatenate([s.origin for s in sets]),
                         patch=sets[0].patch, scene_shapes=shapes)


def patch_grid_count(length, size=128, stride=96):
    """Number of patch positions along one axis."""
    if length < size:
        return 0
    return (length - size) // stride + 1


def extract_patches(image, labels, size=128, stride=96, scene_id="scene"):
    """Cut co-registered (image @gsd, labels @2*gsd) into training samples.

    Patch origins step by ``stride`` from (0, 0); label windows are the
    matching half-resolution squares. Patches whose label window is entirely
    IGNORE are dropped. Label pixel (i, j) covers image rows 2i..2i+1 and
    cols 2j..2j+1, which requires identical origins and a gsd ratio of 2.
    """
    if labels.gsd != 2 * image.gsd or (labels.height, labels.width) != (image.height // 2, image.width // 2):
        raise ContractError("label grid is not the half-resolution partner of the image")
    if (labels.origin_x, labels.origin_y) != (image.origin_x, image.origin_y):
        raise ContractError("label grid origin differs from the image origin")
    if image.scale != 1.0:
        raise ContractError("extract_patches expects a normalized image (scale=1)")
    if size % 2 or stride % 2:
        raise InvalidInputError("patch size and stride must be even")
    lab = labels.data[0]
    xs, ys, scenes, origins = [], [], [], []
    for r in range(0, image.height - size + 1, stride):
        for c in range(0, image.width - size + 1, stride):
            ywin = lab[r // 2:(r + size) // 2, c // 2:(c + size) // 2]
            if (ywin == IGNORE).all():
                continue
            xs.append(np.asarray(image.data[:, r:r + size, c:c + size], dtype=np.float64))
            ys.append(ywin.astype(np.uint8))
            scenes.append(scene_id)
            origins.append((r, c))
    n = len(xs)
    return SampleSet(
        x=np.stack(xs) if n else np.zeros((0, image.bands, size, size)),
        y=np.stack(ys) if n else np.zeros((0, size // 2, size // 2), dtype=np.uint8),
        scene=scenes,
        origin=np.asarray(origins, dtype=np.intp).reshape(n, 2),
        patch=size,
        scene_shapes={scene_id: (image.height, image.width)})


# ---------------------------------------------------------------------------
# Synthetic desk-scale scenes

@dataclass(frozen=True)
class SynthSpec:
    width: int = 256
    height: int = 256
    seed: int = 0
    target_fraction: float = 0.15   # aimed share of settled label cells

    def __post_init__(self):
        if self.width % 2 or self.height % 2:
            raise InvalidInputError("scene dims must be multiples of 2")


# class codes in the synthetic class map
VEG, SOIL, WATER, SETTLEMENT, ROAD = 0, 1, 2, 3, 4

# Band means on the raw reflectance-x-10000 scale, order per BAND_ORDER.
_SIGNATURES = {
    VEG:        [400, 650, 500, 3200, 900, 1800, 2400, 2600, 1600, 800],
    SOIL:       [900, 1100, 1400, 2400, 1600, 1900, 2100, 2200, 2900, 2500],
    WATER:      [500, 450, 350, 150, 300, 250, 200, 180, 80, 50],
    SETTLEMENT: [1500, 1550, 1600, 1900, 1650, 1700, 1750, 1800, 2200, 2100],
    ROAD:       [950, 980, 1000, 1200, 1020, 1050, 1080, 1100, 1500, 1450],
}
_NOISE_STD = 110.0


def synth_class_map(spec):
    """Deterministic (height, width) uint8 class map for a SynthSpec.

    Vegetation background with soil patches and a water body; man-made cover
    is road strips plus rectangular settlement blocks added until the derived
    label fraction reaches the target.
    """
    rng = np.random.default_rng([spec.seed, 2718])
    h, w = spec.height, spec.width
    cmap = np.full((h, w), VEG, dtype=np.uint8)

    for _ in range(rng.integers(2, 5)):
        sh = int(rng.integers(h // 8, h // 3))
        sw = int(rng.integers(w // 8, w // 3))
        r0 = int(rng.integers(0, h - sh + 1))
        c0 = int(rng.integers(0, w - sw + 1))
        cmap[r0:r0 + sh, c0:c0 + sw] = SOIL

    wh = int(rng.integers(h // 8, h // 4))
    ww = int(rng.integers(w // 8, w // 4))
    r0 = int(rng.integers(0, h - wh + 1))
    c0 = int(rng.integers(0, w - ww + 1))
    cmap[r0:r0 + wh, c0:c0 + ww] = WATER

    built = np.zeros((h, w), dtype=bool)
    road_w = int(rng.integers(2, 4))
    for _ in range(2):
        if rng.random() < 0.5:
            r = int(rng.integers(0, h - road_w))
            cmap[r:r + road_w, :] = ROAD
            built[r:r + road_w, :] = True
        else:
            c = int(rng.integers(0, w - road_w))
            cmap[:, c:c + road_w] = ROAD
            built[:, c:c + road_w] = True

    def label_fraction():
        cells = built.reshape(h // 2, 2, w // 2, 2).any(axis=(1, 3))
        return cells.mean()

    side_lo = max(4, int(0.06 * min(h, w)))
    side_hi = max(side_lo + 1, int(0.16 * min(h, w)))
    for _ in range(1000):
        if label_fraction() >= spec.target_fraction:
            break
        bh = int(rng.integers(side_lo, side_hi + 1))
        bw = int(rng.integers(side_lo, side_hi + 1))
        r0 = int(rng.integers(0, h - bh + 1))
        c0 = int(rng.integers(0, w - bw + 1))
        cmap[r0:r0 + bh, c0:c0 + bw] = SETTLEMENT
        built[r0:r0 + bh, c0:c0 + bw] = True
    return cmap


def synth_scene(spec, origin=(0.0, None)):
    """Procedural 10-band image (raw scale 10000) and half-resolution labels.

    The label grid marks a 20 m cell as settled when any of its four 10 m
    pixels carries settlement or road cover. ``origin`` gives origin_x and
    origin_y; origin_y defaults to height*10 so the scene spans y in
    [0, height*10].
    """
    cmap = synth_class_map(spec)
    h, w = cmap.shape
    rng = np.random.default_rng([spec.seed, 31415])
    sig = np.zeros((10, h, w), dtype=np.float64)
    for code, means in _SIGNATURES.items():
        mask = cmap == code
        for b in range(10):
            sig[b][mask] = means[b]
    img = sig + rng.normal(0.0, _NOISE_STD, size=sig.shape)
    np.clip(img, 0.0, 10000.0, out=img)

    built = (cmap == SETTLEMENT) | (cmap == ROAD)
    lab = built.reshape(h // 2, 2, w // 2, 2).any(axis=(1, 3)).astype(np.uint8)

    origin_x = float(origin[0])
    origin_y = float(origin[1]) if origin[1] is not None else h * 10.0
    image = Raster(width=w, height=h, bands=10, gsd=10.0,
                   origin_x=origin_x, origin_y=origin_y,
                   scale=10000.0, nodata=-9999.0, dtype="f32",
                   data=img.astype(np.float32))
    labels = Raster(width=w // 2, height=h // 2, bands=1, gsd=20.0,
                    origin_x=origin_x, origin_y=origin_y,
                    scale=1.0, nodata=float(IGNORE), dtype="u8",
                    data=lab[None])
    return image, labels


def write_manifest(path, entries):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"scenes": entries}, fh, indent=2)
        fh.write("\n")


def read_manifest(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if "scenes" not in doc or not isinstance(doc["scenes"], list):
        raise DecodeError(f"{path}: manifest lacks a scenes list")
    return doc["scenes"]
