"""Synthetic dermoscopy-like samples, image/mask file I/O, resizing and splitting."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import FormatError, InvalidConfig, InvalidFractions, ShapeMismatch


@dataclass
class Sample:
    image: np.ndarray  # s x s x 3 in [0, 1]
    mask: np.ndarray  # s x s, values {0, 1}
    id: str

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise ShapeMismatch(f"image {self.image.shape} and mask {self.mask.shape} differ")


@dataclass
class SynthConfig:
    size: int = 64
    lesion_count_range: Sequence[int] = field(default_factory=lambda: (1, 3))
    contrast_range: Sequence[float] = field(default_factory=lambda: (0.35, 0.75))
    low_contrast_probability: float = 0.2
    hair_artifact_probability: float = 0.3
    noise_sigma: float = 0.03
    seed: int = 0

    def __post_init__(self):
        self.lesion_count_range = tuple(int(v) for v in self.lesion_count_range)
        self.contrast_range = tuple(float(v) for v in self.contrast_range)
        lo, hi = self.lesion_count_range
        if self.size < 16:
            raise InvalidConfig("size must be at least 16")
        if not 1 <= lo <= hi:
            raise InvalidConfig("lesion_count_range must satisfy 1 <= lo <= hi")
        clo, chi = self.contrast_range
        if not 0.0 < clo <= chi <= 1.0:
            raise InvalidConfig("contrast_range must lie in (0, 1]")
        for name in ("low_contrast_probability", "hair_artifact_probability"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidConfig(f"{name} must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise InvalidConfig("noise_sigma must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lesion_count_range"] = list(self.lesion_count_range)
        d["contrast_range"] = list(self.contrast_range)
        return d


# ---------------------------------------------------------------- synthesis

_SKIN = np.array([0.86, 0.66, 0.56])
_LESION = np.array([0.36, 0.20, 0.13])
_HAIR = np.array([0.10, 0.07, 0.05])
_FG_RANGE = (0.02, 0.6)


def _lesion_field(rng: np.random.Generator, s: int, center, yy, xx) -> np.ndarray:
    """Signed radial field: <= 0 inside a perturbed, rotated ellipse."""
    a = rng.uniform(0.12, 0.28) * s
    b = a * rng.uniform(0.6, 1.0)
    rot = rng.uniform(0, np.pi)
    dy, dx = yy - center[0], xx - center[1]
    u = dx * np.cos(rot) + dy * np.sin(rot)
    v = -dx * np.sin(rot) + dy * np.cos(rot)
    theta = np.arctan2(v, u)
    wobble = np.ones_like(theta)
    for k in range(2, 6):
        wobble += rng.uniform(0, 0.12 / (k - 1)) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    r = np.sqrt((u / a) ** 2 + (v / b) ** 2)
    # scaled to roughly pixel units so the rendered edge softness is resolution-aware
    return (r - wobble) * min(a, b)


def _smooth_noise(rng: np.random.Generator, s: int, cells: int) -> np.ndarray:
    coarse = rng.normal(size=(cells, cells))
    return resize_bilinear(coarse[..., None], s, s)[..., 0]


def _hair_layer(rng: np.random.Generator, s: int, yy, xx, lesion_center) -> np.ndarray:
    """Opacity map of dark curvilinear strokes, at least one through the lesion centre."""
    alpha = np.zeros((s, s))
    for k in range(int(rng.integers(3, 9))):
        if k == 0:
            mid = np.asarray(lesion_center) + rng.normal(0, 0.05 * s, 2)
        else:
            mid = rng.uniform(0, s, 2)
        ang = rng.uniform(0, np.pi)
        half = rng.uniform(0.4, 0.8) * s
        d = np.array([np.sin(ang), np.cos(ang)])
        p0, p2 = mid - half * d, mid + half * d
        p1 = mid + rng.normal(0, 0.15 * s, 2)
        t = np.linspace(0, 1, 4 * s)[:, None]
        pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2
        width = rng.uniform(0.5, 1.1)
        dist = np.full((s, s), np.inf)
        for chunk in np.array_split(pts, 8):
            dd = np.sqrt((yy[..., None] - chunk[:, 0]) ** 2 + (xx[..., None] - chunk[:, 1]) ** 2)
            dist = np.minimum(dist, dd.min(axis=-1))
        alpha = np.maximum(alpha, np.clip(1.0 - (dist - width) / 0.8, 0.0, 1.0) * rng.uniform(0.6, 0.95))
    return alpha


def render_sample(cfg: SynthConfig, index: int, hair: bool | None = None) -> Sample:
    """Render one sample; content depends only on ``(cfg, index)``.

    Shape, hair and noise draw from independent streams, so disabling hair
    leaves every other pixel contribution unchanged.
    """
    s = cfg.size
    shape_rng = np.random.default_rng([cfg.seed, index, 0])
    hair_rng = np.random.default_rng([cfg.seed, index, 1])
    noise_rng = np.random.default_rng([cfg.seed, index, 2])
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5

    lo, hi = cfg.lesion_count_range
    for _ in range(100):
        count = int(shape_rng.integers(lo, hi + 1))
        first = s / 2 + shape_rng.uniform(-0.2, 0.2, 2) * s
        fields = []
        for k in range(count):
            center = first if k == 0 else first + shape_rng.uniform(-0.3, 0.3, 2) * s
            fields.append(_lesion_field(shape_rng, s, center, yy, xx))
        sdf = np.min(fields, axis=0)
        mask = sdf <= 0
        frac = mask.mean()
        if _FG_RANGE[0] <= frac <= _FG_RANGE[1]:
            break
    else:  # pragma: no cover - the retry loop practically always succeeds
        raise InvalidConfig("could not place lesions within the foreground range")

    skin = _SKIN * shape_rng.uniform(0.85, 1.1, 3)
    ang = shape_rng.uniform(0, 2 * np.pi)
    ramp = ((np.cos(ang) * (xx - s / 2) + np.sin(ang) * (yy - s / 2)) / s)[..., None]
    image = skin * (1.0 + 0.15 * ramp)
    vignette = 1.0 - 0.12 * (((yy - s / 2) ** 2 + (xx - s / 2) ** 2) / (s / 2) ** 2)
    image = image * vignette[..., None]
    image = image * (1.0 + 0.04 * _smooth_noise(shape_rng, s, 6)[..., None])

    if shape_rng.random() < cfg.low_contrast_probability:
        contrast = cfg.contrast_range[0] * shape_rng.uniform(0.6, 1.0)
    else:
        contrast = shape_rng.uniform(*cfg.contrast_range)
    tone = _LESION * shape_rng.uniform(0.7, 1.3, 3)
    texture = 1.0 + 0.12 * _smooth_noise(shape_rng, s, 8)
    softness = shape_rng.uniform(0.5, 1.5)
    opacity = np.clip(0.5 - sdf / (2.0 * softness), 0.0, 1.0)
    opacity = np.where(mask, np.maximum(opacity, 0.5), np.minimum(opacity, 0.5))
    lesion_rgb = image * (1 - contrast) + contrast * tone * texture[..., None]
    image = image * (1 - opacity[..., None]) + lesion_rgb * opacity[..., None]

    if hair is None:
        hair = hair_rng.random() < cfg.hair_artifact_probability
    else:
        hair_rng.random()
    if hair:
        ha = _hair_layer(hair_rng, s, yy, xx, first)[..., None]
        image = image * (1 - ha) + _HAIR * ha

    if cfg.noise_sigma > 0:
        image = image + noise_rng.normal(0.0, cfg.noise_sigma, image.shape)
    image = np.clip(image, 0.0, 1.0)
    return Sample(image, mask.astype(np.uint8), f"synth-{cfg.seed}-{index:05d}")


def generate_synthetic_dataset(cfg: SynthConfig, n: int, start: int = 0) -> list[Sample]:
    if n < 1:
        raise InvalidConfig("n must be at least 1")
    return [render_sample(cfg, start + i) for i in range(n)]


# --------------------------------------------------------------- resampling


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of an ``h x w x c`` array."""
    h, w = image.shape[:2]

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = axis_weights(h, out_h)
    x0, x1, fx = axis_weights(w, out_w)
    rows = image[y0] * (1 - fy)[:, None, None] + image[y1] * fy[:, None, None]
    return rows[:, x0] * (1 - fx)[None, :, None] + rows[:, x1] * fx[None, :, None]


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = mask.shape[:2]
    yi = np.minimum(np.floor((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    xi = np.minimum(np.floor((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return mask[yi][:, xi]


def resize_to_input(sample: Sample, s: int) -> Sample:
    if s < 16:
        raise InvalidConfig("target size must be at least 16")
    h, w = sample.mask.shape
    if (h, w) == (s, s):
        return sample
    image = np.clip(resize_bilinear(sample.image, s, s), 0.0, 1.0)
    mask = (resize_nearest(sample.mask, s, s) > 0).astype(np.uint8)
    return Sample(image, mask, sample.id)


# ---------------------------------------------------------------- splitting


def split(samples: Sequence, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Seeded shuffled partition into train/val/test.

    Sizes are floored, then leftover items go to the parts with the largest
    fractional remainders (earlier parts win ties).
    """
    fr = [float(f) for f in fractions]
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(math.fsum(fr) - 1.0) > 1e-9:
        raise InvalidFractions(f"fractions must be three nonnegative values summing to 1, got {fractions}")
    n = len(samples)
    raw = [f * n for f in fr]
    sizes = [int(math.floor(r + 1e-9)) for r in raw]
    order = sorted(range(3), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    perm = np.random.default_rng(seed).permutation(n)
    parts, pos = [], 0
    for size in sizes:
        parts.append([samples[i] for i in perm[pos:pos + size]])
        pos += size
    return tuple(parts)


# --------------------------------------------------------------------- files


def write_pgm(path, plane: np.ndarray) -> None:
    plane = np.asarray(plane)
    if plane.ndim != 2 or plane.dtype != np.uint8:
        raise FormatError("PGM plane must be a 2-D uint8 array")
    h, w = plane.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + plane.tobytes())


def read_pgm(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError:
        raise
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(buf[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported")
    data = buf[pos:pos + w * h]
    if len(data) != w * h:
        raise FormatError(f"{path}: truncated PGM data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def _sidecar(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_image(path, image: np.ndarray) -> None:
    """RGB in [0, 1] as one P5 file holding three stacked planes plus a JSON descriptor."""
    path = Path(path)
    img8 = to_uint8(image)
    h, w, c = img8.shape
    write_pgm(path, np.concatenate([img8[..., k] for k in range(c)], axis=0))
    desc = {"format": "planar", "height": h, "width": w, "channels": c, "plane_order": "RGB"[:c]}
    _sidecar(path).write_text(json.dumps(desc, sort_keys=True) + "\n")


def save_mask(path, mask: np.ndarray) -> None:
    write_pgm(path, (np.asarray(mask) > 0).astype(np.uint8) * 255)


def read_raster(path: Path) -> np.ndarray:
    """Raw uint8 pixels (h x w or h x w x c) from PGM or, when Pillow exists, PNG."""
    if path.suffix.lower() == ".pgm":
        plane = read_pgm(path)
        side = _sidecar(path)
        if side.exists():
            desc = json.loads(side.read_text())
            h, w, c = desc["height"], desc["width"], desc["channels"]
            if plane.shape != (h * c, w):
                raise FormatError(f"{path}: plane stack does not match its descriptor")
            return np.stack([plane[k * h:(k + 1) * h] for k in range(c)], axis=-1)
        return plane
    try:
        from PIL import Image
    except ImportError:  # pragma: no cover
        raise FormatError(f"{path}: no decoder available for {path.suffix}") from None
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def load_pair(image_path, mask_path, sample_id: str | None = None) -> Sample:
    image_path, mask_path = Path(image_path), Path(mask_path)
    img = read_raster(image_path)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    if img.shape[-1] != 3:
        raise FormatError(f"{image_path}: expected 3 channels, got {img.shape[-1]}")
    m = read_raster(mask_path)
    if m.ndim == 3:
        m = m[..., 0]
    if img.shape[:2] != m.shape:
        raise ShapeMismatch(f"{image_path} is {img.shape[:2]} but {mask_path} is {m.shape}")
    return Sample(img.astype(np.float64) / 255.0, (m >= 128).astype(np.uint8),
                  sample_id or image_path.stem)


def write_dataset(samples: Sequence[Sample], out_dir) -> Path:
    """Write images, masks and ``manifest.json`` (paths relative to ``out_dir``)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for smp in samples:
        img_rel = f"images/{smp.id}.pgm"
        mask_rel = f"masks/{smp.id}.pgm"
        save_image(out / img_rel, smp.image)
        save_mask(out / mask_rel, smp.mask)
        entries.append({"id": smp.id, "image": img_rel, "mask": mask_rel})
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=1) + "\n")
    return manifest


def read_manifest(path) -> list[Sample]:
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    base = path.parent
    return [load_pair(base / e["image"], base / e["mask"], e.get("id")) for e in entries]


def stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([s.image for s in samples]), np.stack([s.mask for s in samples]))
