"""Image I/O, bicubic degradation, paired sampling and the fixed-layout scene generator.

Images are float64 arrays of shape (C, H, W) with values in [0, 1].
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage


class ImageFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# netpbm I/O

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_image(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    return decode_netpbm(buf)


def decode_netpbm(buf: bytes) -> np.ndarray:
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise ImageFormatError("malformed netpbm header")
        fields.append(m.group(1))
        pos = m.end()
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported netpbm magic {magic!r}; only P5/P6")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ImageFormatError("malformed netpbm header") from None
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval}; only 8-bit (255) files")
    if width < 1 or height < 1:
        raise ImageFormatError(f"bad extents {width}×{height}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError("missing whitespace after netpbm header")
    pos += 1
    channels = 1 if magic == b"P5" else 3
    n = width * height * channels
    payload = buf[pos:pos + n]
    if len(payload) < n:
        raise ImageFormatError(f"truncated payload: {len(payload)} of {n} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def encode_netpbm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c not in (1, 3):
        raise ImageFormatError(f"cannot write {c}-channel image")
    u8 = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    head = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode()
    return head + u8.transpose(1, 2, 0).tobytes()


def write_image(path: str | Path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_netpbm(img))


def to_rgb(img: np.ndarray) -> np.ndarray:
    """Replicate a single-channel image to three channels."""
    return np.repeat(img, 3, axis=0) if img.shape[0] == 1 else img


# ---------------------------------------------------------------------------
# bicubic

def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def cubic_weights(n_in: int, n_out: int, a: float = -0.5) -> np.ndarray:
    """(n_out, n_in) resampling matrix: half-pixel centres, edge-clamped taps."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(int)
    t = src - base
    for off in (-1, 0, 1, 2):
        wts = _cubic(t - off, a)
        idx = np.clip(base + off, 0, n_in - 1)
        np.add.at(m, (np.arange(n_out), idx), wts)
    return m


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output extents must be positive, got {out_h}×{out_w}")
    _, h, w = img.shape
    wy = cubic_weights(h, out_h)
    wx = cubic_weights(w, out_w)
    out = np.matmul(np.matmul(wy, img), wx.T)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# pairs

@dataclass
class ScenePair:
    hr: np.ndarray
    lr: np.ndarray
    scale: int


def sample_pair(hr_source: np.ndarray, patch: int, r: int, rng: np.random.Generator) -> ScenePair:
    if patch % r:
        raise ValueError(f"patch {patch} not divisible by scale {r}")
    _, h, w = hr_source.shape
    if h < patch or w < patch:
        raise ValueError(f"source {h}×{w} smaller than patch {patch}")
    y = int(rng.integers(0, h - patch + 1))
    x = int(rng.integers(0, w - patch + 1))
    crop = hr_source[:, y:y + patch, x:x + patch]
    return ScenePair(crop, bicubic_resize(crop, patch // r, patch // r), r)


def degrade(hr: np.ndarray, r: int) -> np.ndarray:
    _, h, w = hr.shape
    if h % r or w % r:
        raise ValueError(f"HR extents {h}×{w} not divisible by scale {r}")
    return bicubic_resize(hr, h // r, w // r)


class PairedDataset:
    """HR frames with matching LR inputs; full frames unless ``patch`` is set.

    Full-frame sampling keeps every pixel at its scene position, which is what
    lets position-anchored priors learn anything.
    """

    def __init__(self, hr: list[np.ndarray], scale: int, patch: int | None = None,
                 lr: list[np.ndarray] | None = None):
        if not hr:
            raise ValueError("empty dataset")
        self.hr = [to_rgb(h) for h in hr]
        self.scale = scale
        self.patch = patch
        if lr is None:
            lr = [degrade(h, scale) for h in self.hr]
        self.lr = [to_rgb(l) for l in lr]
        for h, l in zip(self.hr, self.lr):
            if h.shape[1] != l.shape[1] * scale or h.shape[2] != l.shape[2] * scale:
                raise ValueError(f"HR {h.shape} is not {scale}× LR {l.shape}")

    def __len__(self) -> int:
        return len(self.hr)

    def get(self, i: int, rng: np.random.Generator | None = None) -> ScenePair:
        if self.patch is None:
            return ScenePair(self.hr[i], self.lr[i], self.scale)
        return sample_pair(self.hr[i], self.patch, self.scale, rng)


class BatchSampler:
    """Cycles through seeded epoch permutations."""

    def __init__(self, ds: PairedDataset, batch: int, rng: np.random.Generator):
        self.ds, self.batch, self.rng = ds, batch, rng
        self._order: list[int] = []

    def next(self) -> tuple[np.ndarray, np.ndarray]:
        pairs = []
        for _ in range(self.batch):
            if not self._order:
                self._order = list(self.rng.permutation(len(self.ds)))
            pairs.append(self.ds.get(int(self._order.pop()), self.rng))
        return np.stack([p.lr for p in pairs]), np.stack([p.hr for p in pairs])


def load_dataset_dir(root: str | Path, scale: int, patch: int | None = None) -> PairedDataset:
    root = Path(root)
    hr_dir = root / "hr"
    if not hr_dir.is_dir():
        raise FileNotFoundError(f"dataset not found: {hr_dir}")
    names = sorted(p.name for p in hr_dir.iterdir() if p.suffix in (".pgm", ".ppm"))
    if not names:
        raise FileNotFoundError(f"dataset not found: no .pgm/.ppm files in {hr_dir}")
    hr = [read_image(hr_dir / n) for n in names]
    lr_dir = root / f"lrx{scale}"
    lr = None
    if lr_dir.is_dir():
        lr = [read_image(lr_dir / n) for n in names]
    return PairedDataset(hr, scale, patch, lr)


# ---------------------------------------------------------------------------
# synthetic fixed-viewpoint scenes

@dataclass(frozen=True)
class LayoutSpec:
    """Horizontal bands at fixed fractions of the frame height (the fixed viewpoint)."""

    boundaries: tuple[float, ...] = (0.35, 0.65)
    seed: int = 0
    laws: tuple[str, ...] = field(default=("gradient", "stripes", "texture"))

    def __post_init__(self):
        b = (0.0, *self.boundaries, 1.0)
        if any(lo >= hi for lo, hi in zip(b, b[1:])):
            raise ValueError(f"band boundaries must increase strictly inside (0, 1): {self.boundaries}")
        if len(self.laws) != len(self.boundaries) + 1:
            raise ValueError("need one texture law per band")

    def band_rows(self, h: int) -> list[tuple[int, int]]:
        cuts = [0] + [int(round(f * h)) for f in self.boundaries] + [h]
        return list(zip(cuts, cuts[1:]))


def band_mask(spec: LayoutSpec, h: int, w: int) -> np.ndarray:
    """Band index per pixel; depends only on the layout, never on the frame."""
    mask = np.zeros((h, w), dtype=int)
    for i, (lo, hi) in enumerate(spec.band_rows(h)):
        mask[lo:hi] = i
    return mask


def _gradient(rng, frame_rng, yy, xx, h, w):
    offset = frame_rng.uniform(-0.05, 0.05)
    return 0.85 - 0.35 * yy / max(h - 1, 1) + offset + 0.0 * xx


def _stripes(rng, frame_rng, yy, xx, h, w):
    # static structure (same every frame) plus frame-specific objects
    period = rng.uniform(3.0, 4.0)
    angle = rng.uniform(0.2, 0.5)
    base = 0.5 + 0.3 * np.sin(2 * np.pi * (xx * math.cos(angle) + yy * math.sin(angle)) / period)
    phase = frame_rng.uniform(0, 2 * np.pi)
    base += 0.12 * np.sin(2 * np.pi * xx / 2.5 + phase)
    for _ in range(frame_rng.integers(1, 4)):
        rh, rw = frame_rng.integers(2, max(3, h // 6)), frame_rng.integers(2, max(3, w // 4))
        y0, x0 = frame_rng.integers(0, max(1, h - rh)), frame_rng.integers(0, max(1, w - rw))
        base[y0:y0 + rh, x0:x0 + rw] = frame_rng.uniform(0.1, 0.9)
    return base


def _texture(rng, frame_rng, yy, xx, h, w):
    out = np.full(yy.shape, 0.35)
    for _ in range(4):
        fy, fx = frame_rng.uniform(0.08, 0.2, size=2)
        ph = frame_rng.uniform(0, 2 * np.pi, size=2)
        out += 0.06 * np.sin(2 * np.pi * fy * yy + ph[0]) * np.cos(2 * np.pi * fx * xx + ph[1])
    return out


_LAWS = {"gradient": _gradient, "stripes": _stripes, "texture": _texture}


def synth_scene(spec: LayoutSpec, frame_seed: int, h: int, w: int) -> np.ndarray:
    """One single-channel frame of the fixed-layout scene."""
    if h < 8 or w < 8:
        raise ValueError(f"synthetic frames need extents >= 8, got {h}×{w}")
    img = np.zeros((h, w))
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    for band, ((lo, hi), law) in enumerate(zip(spec.band_rows(h), spec.laws)):
        layout_rng = np.random.default_rng([spec.seed, band])
        frame_rng = np.random.default_rng([spec.seed, band, frame_seed, 1])
        sel = slice(lo, hi)
        img[sel] = _LAWS[law](layout_rng, frame_rng, yy[sel], xx[sel], hi - lo, w)
    return np.clip(img, 0.0, 1.0)[None]


def synth_dataset(n: int, h: int, w: int, spec: LayoutSpec | None = None, first_seed: int = 0) -> list[np.ndarray]:
    spec = spec or LayoutSpec()
    return [synth_scene(spec, first_seed + i, h, w) for i in range(n)]


# ---------------------------------------------------------------------------
# layout statistics

def local_variance(img: np.ndarray) -> np.ndarray:
    m = ndimage.uniform_filter(img, size=(1, 3, 3), mode="reflect")
    m2 = ndimage.uniform_filter(img * img, size=(1, 3, 3), mode="reflect")
    return np.maximum(m2 - m * m, 0.0).mean(axis=0)


def highpass_energy(img: np.ndarray) -> np.ndarray:
    blur = ndimage.uniform_filter(img, size=(1, 3, 3), mode="reflect")
    return ((img - blur) ** 2).mean(axis=0)


_STATS = {"local_variance": local_variance, "highpass": highpass_energy}


def layout_anisotropy(dataset: list[np.ndarray], stat: str = "local_variance") -> float:
    """Spatial variance of the per-pixel dataset mean of a local statistic."""
    if not dataset:
        raise ValueError("empty dataset")
    shape = dataset[0].shape
    if any(d.shape != shape for d in dataset):
        raise ValueError("all images must share extents")
    fn = _STATS[stat]
    mean_map = np.mean([fn(d) for d in dataset], axis=0)
    return float(mean_map.var())


def matched_noise(dataset: list[np.ndarray], rng: np.random.Generator) -> list[np.ndarray]:
    """White Gaussian frames with the dataset's global mean and standard deviation."""
    stack = np.stack(dataset)
    mu, sd = stack.mean(), stack.std()
    return [np.clip(rng.normal(mu, sd, size=d.shape), 0.0, 1.0) for d in dataset]


def row_highpass_profile(img: np.ndarray) -> np.ndarray:
    return highpass_energy(img).mean(axis=1)
