"""Stationary velocity fields, their integration, and image warping.

Coordinate convention (used everywhere in this package): fields are stored
as ``(N, 2, H, W)`` arrays, channel 0 is the row component and channel 1 the
column component, origin at the top-left pixel, units of pixels. A
deformation ``phi`` holds absolute sample positions, ``phi = grid + u``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ROW, COL = 0, 1
TWF_MAGIC = b"TWF1"


def identity_grid(n: int, h: int, w: int, dtype=None) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    grid = np.stack([rows, cols])[None].astype(dtype or ad.get_default_dtype())
    return np.ascontiguousarray(np.broadcast_to(grid, (n, 2, h, w)))


def _check_field(t: Tensor, what: str) -> None:
    if t.ndim != 4 or t.shape[1] != 2:
        raise ValueError(f"{what} must have shape (N, 2, H, W), got {t.shape}")


def to_deformation(u: Tensor) -> Tensor:
    _check_field(u, "displacement")
    n, _, h, w = u.shape
    return u + Tensor(identity_grid(n, h, w, u.dtype))


def to_displacement(phi: Tensor) -> Tensor:
    _check_field(phi, "deformation")
    n, _, h, w = phi.shape
    return phi - Tensor(identity_grid(n, h, w, phi.dtype))


def warp(m: Tensor, phi: Tensor) -> Tensor:
    """Resample ``m`` at ``phi`` with bilinear weights; out-of-range positions clamp to the border."""
    _check_field(phi, "deformation")
    if m.ndim != 4 or m.shape[0] != phi.shape[0] or m.shape[2:] != phi.shape[2:]:
        raise ValueError(f"warp: image {m.shape} and deformation {phi.shape} disagree")
    return ad.grid_sample(m, phi)


def integrate_velocity(v: Tensor, steps: int = 7) -> Tensor:
    """Scaling and squaring: exponentiate a stationary velocity field over unit time.

    Starts from ``v / 2**steps`` and self-composes ``u <- u(p + u(p)) + u(p)``
    ``steps`` times.
    """
    _check_field(v, "velocity")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not np.all(np.isfinite(v.data)):
        raise ValueError("velocity field contains non-finite values")
    u = v * (1.0 / 2 ** steps)
    for _ in range(steps):
        u = warp(u, to_deformation(u)) + u
    return u


def jacobian_determinant(phi: Tensor) -> Tensor:
    """Determinant of the forward-difference Jacobian of ``phi``, shape (N, 1, H-1, W-1)."""
    _check_field(phi, "deformation")
    if phi.shape[2] < 2 or phi.shape[3] < 2:
        raise ValueError("jacobian_determinant needs H, W >= 2")
    pr, pc = phi[:, 0:1], phi[:, 1:2]
    drr = pr[:, :, 1:, :-1] - pr[:, :, :-1, :-1]
    drc = pr[:, :, :-1, 1:] - pr[:, :, :-1, :-1]
    dcr = pc[:, :, 1:, :-1] - pc[:, :, :-1, :-1]
    dcc = pc[:, :, :-1, 1:] - pc[:, :, :-1, :-1]
    return drr * dcc - drc * dcr


def fold_fraction(phi: Tensor | np.ndarray) -> np.ndarray:
    """Per-sample fraction of non-positive Jacobian determinants."""
    if not isinstance(phi, Tensor):
        phi = Tensor(phi)
    with ad.no_grad():
        det = jacobian_determinant(phi).data
    return (det <= 0).reshape(det.shape[0], -1).mean(axis=1)


def smoothness_loss(v: Tensor) -> Tensor:
    """Squared forward differences of every channel, summed, averaged over pixels and batch."""
    n, _, h, w = v.shape
    dr = v[:, :, 1:, :] - v[:, :, :-1, :]
    dc = v[:, :, :, 1:] - v[:, :, :, :-1]
    return (dr.square().sum() + dc.square().sum()) * (1.0 / (n * h * w))


# ---------------------------------------------------------------------------
# TWF1 field files: magic, u32 N, C, H, W (little endian), float32 row-major
# ---------------------------------------------------------------------------

def save_field(path: str | Path, field: np.ndarray | Tensor) -> None:
    arr = field.data if isinstance(field, Tensor) else np.asarray(field)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 2:
        raise ValueError(f"field must be (N, 2, H, W), got {arr.shape}")
    header = TWF_MAGIC + struct.pack("<4I", *arr.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_field(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != TWF_MAGIC:
        raise ValueError(f"{path}: not a TWF1 field file")
    shape = struct.unpack("<4I", raw[4:20])
    if shape[1] != 2:
        raise ValueError(f"{path}: expected 2 channels, found {shape[1]}")
    count = int(np.prod(shape))
    body = raw[20:]
    if len(body) != 4 * count:
        raise ValueError(f"{path}: truncated field ({len(body)} bytes for shape {shape})")
    return np.frombuffer(body, dtype="<f4").reshape(shape).astype(np.float32)


def flow_to_rgb(u: np.ndarray, max_norm: float | None = None) -> np.ndarray:
    """HSV colour-wheel encoding of a (2, H, W) displacement as uint8 RGB."""
    dr, dc = u[ROW], u[COL]
    mag = np.hypot(dr, dc)
    max_norm = max_norm or max(float(mag.max()), 1e-6)
    hue = (np.arctan2(-dr, dc) / (2 * np.pi)) % 1.0
    sat = np.clip(mag / max_norm, 0, 1)
    val = np.ones_like(sat)
    i = np.floor(hue * 6).astype(int) % 6
    f = hue * 6 - np.floor(hue * 6)
    p, q, t = val * (1 - sat), val * (1 - f * sat), val * (1 - (1 - f) * sat)
    table = [(val, t, p), (q, val, p), (p, val, t), (p, q, val), (t, p, val), (val, p, q)]
    rgb = np.zeros(dr.shape + (3,))
    for k, chans in enumerate(table):
        sel = i == k
        for ch in range(3):
            rgb[..., ch][sel] = chans[ch][sel]
    return (rgb * 255 + 0.5).astype(np.uint8)
