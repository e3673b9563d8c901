"""Synthetic paired images with known deformations, plus PNG/manifest I/O.

A pair emulates a surgical change: the reference is the source pulled
inward around a high-contrast "feature" region (structure) with an
intensity change applied inside that region (appearance). The inward pull
is scaled by the feature's visible radius, so it can be predicted from the
source; a smaller white-noise component (blurred, then scaled) cannot.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from . import autodiff as ad
from . import deformation as dfm

MANIFEST = "manifest.json"


class DataError(ValueError):
    """Unreadable or inconsistent dataset files."""


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    n_pairs: int = 64
    deform_amplitude: float = 3.0
    deform_smoothness: float = 6.0
    intensity_shift: float = 0.4
    intensity_gain: float = 1.0
    random_fraction: float = 0.25
    texture: float = 0.0
    texture_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size <= 0 or self.image_size % 32:
            raise ValueError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be >= 1")
        if self.deform_amplitude < 0:
            raise ValueError("deform_amplitude must be >= 0")
        if self.deform_smoothness <= 0:
            raise ValueError("deform_smoothness must be > 0")
        if not 0.0 <= self.random_fraction <= 1.0:
            raise ValueError("random_fraction must lie in [0, 1]")
        if self.texture < 0 or self.texture_scale <= 0:
            raise ValueError("texture must be >= 0 and texture_scale > 0")


@dataclass
class ImagePair:
    id: str
    source: np.ndarray                      # (1, H, W) in [-1, 1]
    reference: np.ndarray                   # (1, H, W) in [-1, 1]
    gt_displacement: Optional[np.ndarray] = None   # (2, H, W), pixels
    region: Optional[np.ndarray] = None     # (1, H, W) in [0, 1], reference frame

    def __post_init__(self):
        if self.source.shape != self.reference.shape:
            raise ValueError(f"{self.id}: source {self.source.shape} vs reference {self.reference.shape}")


# ---------------------------------------------------------------------------
# intensity scaling
# ---------------------------------------------------------------------------

def normalize(pixels: np.ndarray) -> np.ndarray:
    """[0, 255] -> [-1, 1]."""
    return np.asarray(pixels, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)


def denormalize(img: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 255] floats (unrounded)."""
    return (np.asarray(img, dtype=np.float64) + 1.0) * 127.5


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to the 256 levels an 8-bit PNG can hold."""
    return normalize(np.clip(np.rint(denormalize(img)), 0, 255))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _ellipse_mask(shape, center, radii, angle, edge=2.0):
    """Soft ellipse with a linear edge ramp of ``edge`` pixels; exactly 0 outside."""
    rows, cols = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    dr, dc = rows - center[0], cols - center[1]
    ca, sa = math.cos(angle), math.sin(angle)
    a = (ca * dr + sa * dc) / radii[0]
    b = (-sa * dr + ca * dc) / radii[1]
    rho = np.sqrt(a * a + b * b)
    signed = (1.0 - rho) * min(radii)
    return np.clip(signed / edge + 0.5, 0.0, 1.0)


def smooth_random_field(shape, amplitude: float, smoothness: float,
                        rng: np.random.Generator) -> np.ndarray:
    """White noise -> Gaussian blur -> rescale so the largest vector norm is ``amplitude``."""
    noise = rng.normal(size=(2,) + tuple(shape))
    field = np.stack([gaussian_filter(c, smoothness, mode="reflect") for c in noise])
    peak = np.hypot(field[0], field[1]).max()
    if amplitude == 0 or peak == 0:
        return np.zeros_like(field)
    return field * (amplitude / peak)


def _radial_pull(shape, center, amplitude, width):
    """Displacement pointing toward ``center``; peak norm ``amplitude`` at radius ``width``."""
    rows, cols = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    dr, dc = rows - center[0], cols - center[1]
    r2 = (dr * dr + dc * dc) / (width * width)
    gain = -amplitude * math.exp(0.5) / width * np.exp(-0.5 * r2)
    return np.stack([gain * dr, gain * dc])


def _min_jacobian(u: np.ndarray) -> float:
    with ad.precision(np.float64), ad.no_grad():
        phi = dfm.to_deformation(ad.Tensor(u[None]))
        return float(dfm.jacobian_determinant(phi).data.min())


def render_source(size: int, rng: np.random.Generator, texture: float = 0.0,
                  texture_scale: float = 1.0):
    """Return (image, feature_mask, feature_center, feature_radius).

    ``texture`` adds band-limited noise of that standard deviation inside the
    head, so fine detail moves with the deformation.
    """
    shape = (size, size)
    s = size / 64.0
    img = np.full(shape, -0.8)
    center = size / 2 + rng.uniform(-3, 3, size=2) * s
    head = _ellipse_mask(shape, center, rng.uniform(22, 27, size=2) * s, rng.uniform(0, np.pi))
    img = img * (1 - head) + rng.uniform(-0.3, 0.0) * head
    for _ in range(rng.integers(2, 5)):
        offset = rng.uniform(-12, 12, size=2) * s
        blob = _ellipse_mask(shape, center + offset, rng.uniform(3, 7, size=2) * s,
                             rng.uniform(0, np.pi))
        img = img * (1 - blob) + rng.uniform(-0.7, 0.1) * blob
    radius = rng.uniform(6, 10) * s
    angle = rng.uniform(0, 2 * np.pi)
    feat_center = center + rng.uniform(3, 8) * s * np.array([math.sin(angle), math.cos(angle)])
    feature = _ellipse_mask(shape, feat_center, (radius, radius * rng.uniform(0.8, 1.0)), angle)
    img = img * (1 - feature) + rng.uniform(0.35, 0.55) * feature
    if texture > 0:
        tex = gaussian_filter(rng.standard_normal(shape), texture_scale * s, mode="reflect")
        img = img + head * tex * (texture / tex.std())
    img = gaussian_filter(img, 0.6, mode="nearest")
    return np.clip(img, -1, 1), feature, feat_center, radius


def generate_pair(cfg: SynthConfig, rng: np.random.Generator, pair_id: str = "pair") -> ImagePair:
    size = cfg.image_size
    src, feature, feat_center, radius = render_source(size, rng, cfg.texture, cfg.texture_scale)
    s = size / 64.0
    pull = cfg.deform_amplitude * (1 - cfg.random_fraction) * radius / (10 * s)
    u = _radial_pull((size, size), feat_center, pull, 1.6 * radius)
    noise_amp = cfg.deform_amplitude * cfg.random_fraction
    for _ in range(20):
        candidate = u + smooth_random_field((size, size), noise_amp, cfg.deform_smoothness, rng)
        if _min_jacobian(candidate) > 0:
            u = candidate
            break
    else:
        raise RuntimeError(f"{pair_id}: could not draw a fold-free deformation")

    source = quantize(src)[None]
    if cfg.deform_amplitude > 0:
        with ad.precision(np.float64), ad.no_grad():
            phi = dfm.to_deformation(ad.Tensor(u[None]))
            moved = dfm.warp(ad.Tensor(np.stack([source[0], feature])[None]), phi).data[0]
        warped, region = moved[0], moved[1]
    else:
        warped, region = source[0].astype(np.float64), feature
    changed = warped + region * ((cfg.intensity_gain - 1) * warped + cfg.intensity_shift)
    reference = quantize(np.clip(changed, -1, 1))[None]
    return ImagePair(pair_id, source, reference, u.astype(np.float32),
                     region[None].astype(np.float32))


def pair_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def generate_dataset(cfg: SynthConfig) -> list[ImagePair]:
    return [generate_pair(cfg, pair_rng(cfg.seed, i), f"pair_{i:04d}") for i in range(cfg.n_pairs)]


def split(pairs: list, train_fraction: float = 0.7, seed: int = 0) -> tuple[list, list]:
    """Deterministic shuffled split; both halves keep the input order."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    order = np.random.default_rng(seed).permutation(len(pairs))
    n_train = int(round(len(pairs) * train_fraction))
    train = [pairs[i] for i in sorted(order[:n_train])]
    test = [pairs[i] for i in sorted(order[n_train:])]
    return train, test


def stack_batch(pairs: list) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([p.source for p in pairs]).astype(np.float32),
            np.stack([p.reference for p in pairs]).astype(np.float32))


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def save_png(img: np.ndarray, path: str | Path) -> None:
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[0]
    pixels = np.clip(np.rint(denormalize(arr)), 0, 255).astype(np.uint8)
    Image.fromarray(pixels, mode="L").save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    """Read an 8-bit grayscale PNG as a (1, H, W) float32 array in [-1, 1]."""
    try:
        with Image.open(path) as im:
            if im.mode != "L":
                raise DataError(f"{path}: expected 8-bit grayscale, found mode {im.mode}")
            pixels = np.asarray(im, dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return normalize(pixels)[None]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_dataset(pairs: list, out_dir: str | Path, cfg: Optional[SynthConfig] = None) -> dict:
    out = Path(out_dir)
    (out / "pairs").mkdir(parents=True, exist_ok=True)
    entries = []
    for pair in sorted(pairs, key=lambda p: p.id):
        files = {"src": f"pairs/{pair.id}_src.png", "ref": f"pairs/{pair.id}_ref.png"}
        save_png(pair.source, out / files["src"])
        save_png(pair.reference, out / files["ref"])
        if pair.gt_displacement is not None:
            files["gtu"] = f"pairs/{pair.id}_gtu.twf"
            dfm.save_field(out / files["gtu"], pair.gt_displacement)
        if pair.region is not None:
            files["mask"] = f"pairs/{pair.id}_mask.png"
            save_png(pair.region * 2 - 1, out / files["mask"])
        sums = {k: _sha256(out / v) for k, v in files.items()}
        entries.append({"id": pair.id, "files": files, "sha256": sums})
    digest = hashlib.sha256()
    for entry in entries:
        for key in sorted(entry["sha256"]):
            digest.update(entry["sha256"][key].encode())
    manifest = {"config": asdict(cfg) if cfg else None, "pairs": entries,
                "checksum": digest.hexdigest()}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(data_dir: str | Path, verify: bool = True) -> tuple[list[ImagePair], dict]:
    root = Path(data_dir)
    path = root / MANIFEST
    if not path.is_file():
        raise DataError(f"{root}: no {MANIFEST}")
    try:
        manifest = json.loads(path.read_text())
    except ValueError as exc:
        raise DataError(f"{path}: invalid JSON") from exc
    pairs = []
    for entry in sorted(manifest["pairs"], key=lambda e: e["id"]):
        files = entry["files"]
        if verify:
            for key, rel in files.items():
                if not (root / rel).is_file():
                    raise DataError(f"{entry['id']}: missing {rel}")
                if _sha256(root / rel) != entry["sha256"][key]:
                    raise DataError(f"{entry['id']}: checksum mismatch for {rel}")
        try:
            gtu = dfm.load_field(root / files["gtu"])[0] if "gtu" in files else None
        except (OSError, ValueError) as exc:
            raise DataError(f"{entry['id']}: {exc}") from exc
        region = (load_png(root / files["mask"]) + 1) / 2 if "mask" in files else None
        pairs.append(ImagePair(entry["id"], load_png(root / files["src"]),
                               load_png(root / files["ref"]), gtu, region))
    return pairs, manifest
