"""Evaluation metrics and protocols.

Image metrics take 2-D float arrays on the 0-255 scale and run in float64.
Protocols forward a model without recording a graph and collect per-pair
values into a ``MetricReport``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from . import deformation as dfm
from . import model as M
from .data import ImagePair, denormalize, stack_batch

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
EDGE_QUANTILE = 0.9


def _as_image(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"{name}: expected a 2-D image, got shape {arr.shape}")
    return arr


def _pair(a, b):
    a, b = _as_image(a, "a"), _as_image(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"shapes {a.shape} and {b.shape} differ")
    return a, b


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def _local_mean(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable Gaussian average over every fully contained window."""
    r = len(g) // 2
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim(a, b, data_range: float = 255.0, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over all valid Gaussian windows."""
    a, b = _pair(a, b)
    if min(a.shape) < window:
        raise ValueError(f"ssim: image {a.shape} smaller than the {window}x{window} window")
    g = _gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = _local_mean(a, g), _local_mean(b, g)
    var_a = _local_mean(a * a, g) - mu_a * mu_a
    var_b = _local_mean(b * b, g) - mu_b * mu_b
    cov = _local_mean(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def mae(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def psnr(a, b, peak: float = 255.0) -> float:
    """10 log10(peak^2 / MSE); ``inf`` for identical images."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def nmi_hard(a, b, bins: int = 64, value_range=(0.0, 255.0)) -> float:
    """(H(A) + H(B)) / H(A, B) from hard-binned histograms.

    A joint entropy of zero (both images constant) returns 2.0, the value
    for perfectly dependent images.
    """
    a, b = _pair(a, b)
    lo, hi = value_range
    edges = np.linspace(lo, hi, bins + 1)
    joint, _, _ = np.histogram2d(a.ravel(), b.ravel(), bins=[edges, edges])
    joint /= joint.sum()
    h_ab = _entropy(joint)
    if h_ab == 0.0:
        return 2.0
    return (_entropy(joint.sum(axis=1)) + _entropy(joint.sum(axis=0))) / h_ab


# ---------------------------------------------------------------------------
# edges
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EdgeMap:
    mask: np.ndarray        # bool (H, W)
    threshold: float


def sobel_magnitude(img) -> np.ndarray:
    img = _as_image(img, "img")
    return np.hypot(ndimage.sobel(img, axis=0, mode="reflect"),
                    ndimage.sobel(img, axis=1, mode="reflect"))


def sobel_edges(img, threshold_quantile: float = EDGE_QUANTILE) -> EdgeMap:
    """Pixels whose Sobel magnitude reaches the given quantile (zero magnitude never counts)."""
    if not 0.0 <= threshold_quantile <= 1.0:
        raise ValueError("threshold_quantile must lie in [0, 1]")
    mag = sobel_magnitude(img)
    thr = float(np.quantile(mag, threshold_quantile))
    return EdgeMap((mag >= thr) & (mag > 0), thr)


def dice(a: EdgeMap | np.ndarray, b: EdgeMap | np.ndarray, mask=None) -> float:
    """2|A n B| / (|A| + |B|) over ``mask``; 1.0 when both are empty."""
    a = np.asarray(a.mask if isinstance(a, EdgeMap) else a, dtype=bool)
    b = np.asarray(b.mask if isinstance(b, EdgeMap) else b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"dice: shapes {a.shape} and {b.shape} differ")
    if mask is not None:
        m = _as_image(mask, "mask") > 0.5
        a, b = a & m, b & m
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    """Per-pair metric values; summaries skip non-finite entries and count them."""

    protocol: str
    ids: list = field(default_factory=list)
    values: dict = field(default_factory=dict)     # metric -> list[float]
    notes: dict = field(default_factory=dict)

    def add(self, pair_id: str, row: dict) -> None:
        if self.ids and set(row) != set(self.values):
            raise ValueError(f"row metrics {sorted(row)} differ from {sorted(self.values)}")
        self.ids.append(pair_id)
        for k, v in row.items():
            self.values.setdefault(k, []).append(float(v))

    @property
    def metrics(self) -> list[str]:
        return list(self.values)

    def finite(self, name: str) -> np.ndarray:
        v = np.asarray(self.values[name], dtype=np.float64)
        return v[np.isfinite(v)]

    def excluded(self, name: str) -> int:
        return len(self.values[name]) - len(self.finite(name))

    def mean(self, name: str) -> float:
        v = self.finite(name)
        return float(v.mean()) if len(v) else math.nan

    def std(self, name: str) -> float:
        v = self.finite(name)
        return float(v.std()) if len(v) else math.nan

    def summary(self) -> dict:
        return {k: (self.mean(k), self.std(k), self.excluded(k)) for k in self.values}

    def write_csv(self, path: str | Path) -> None:
        """Per-pair rows, then ``mean`` and ``std`` rows, then ``excluded`` counts."""
        names = self.metrics
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id"] + names)
            for i, pid in enumerate(self.ids):
                w.writerow([pid] + [_fmt(self.values[k][i]) for k in names])
            w.writerow(["mean"] + [_fmt(self.mean(k)) for k in names])
            w.writerow(["std"] + [_fmt(self.std(k)) for k in names])
            w.writerow(["excluded"] + [str(self.excluded(k)) for k in names])


def _fmt(v: float) -> str:
    # shortest round-trip repr keeps summaries recomputable from the file
    return repr(float(v))


def read_report_csv(path: str | Path) -> tuple[list[str], dict[str, list[float]], dict[str, list[float]]]:
    """Parse a report CSV back into (ids, per-pair columns, summary rows)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    ids, cols, summary = [], {k: [] for k in names}, {}
    for r in rows[1:]:
        if r[0] in ("mean", "std", "excluded"):
            summary[r[0]] = [float(x) for x in r[1:]]
            continue
        ids.append(r[0])
        for k, x in zip(names, r[1:]):
            cols[k].append(float(x))
    return ids, cols, summary


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

@dataclass
class Prediction:
    """Detached generator outputs for one pair, images in [-1, 1]."""

    y_trans: np.ndarray     # (H, W)
    y_warp: np.ndarray      # (H, W)
    u: np.ndarray           # (2, H, W)
    phi: np.ndarray         # (2, H, W)


Predictor = Callable[[np.ndarray], list]


def model_predictor(params: M.ModelParams, steps: int = 7, batch_size: int = 8) -> Predictor:
    """Wrap a model as ``x (N,1,H,W) -> [Prediction]``."""
    def predict(xb: np.ndarray) -> list[Prediction]:
        preds = []
        for lo in range(0, len(xb), batch_size):
            with ad.no_grad():
                out = M.forward(ad.Tensor(xb[lo:lo + batch_size]), params, steps)
            for i in range(out.y_trans.shape[0]):
                preds.append(Prediction(out.y_trans.data[i, 0], out.y_warp.data[i, 0],
                                        out.u.data[i], out.phi.data[i]))
        return preds
    return predict


def _predictions(predict, pairs: Sequence[ImagePair]):
    if not pairs:
        raise ValueError("no pairs to evaluate")
    xb, yb = stack_batch(pairs)
    return xb, yb, predict(xb)


def _resolve(model, steps: int) -> Predictor:
    return model_predictor(model, steps) if isinstance(model, M.ModelParams) else model


def standard_eval(model, pairs: Sequence[ImagePair], steps: int = 7) -> MetricReport:
    """Fidelity of the translated image to the reference: ssim (%), mae, psnr, nmi."""
    xb, yb, preds = _predictions(_resolve(model, steps), pairs)
    rep = MetricReport("standard")
    for pair, y, p in zip(pairs, yb, preds):
        a, b = denormalize(p.y_trans), denormalize(y[0])
        rep.add(pair.id, {"ssim": 100.0 * ssim(a, b), "mae": mae(a, b), "psnr": psnr(a, b),
                          "nmi": nmi_hard(a, b)})
    return rep


def _warp_source(x: np.ndarray, phi: np.ndarray) -> np.ndarray:
    with ad.precision(np.float64), ad.no_grad():
        out = dfm.warp(ad.Tensor(x[None].astype(np.float64)), ad.Tensor(phi[None].astype(np.float64)))
    return out.data[0, 0]


def correspondence_eval(model, pairs: Sequence[ImagePair], steps: int = 7) -> MetricReport:
    """Edge agreement between the source warped by the predicted field and the translation.

    ``edge_dice`` is a fraction in [0, 1]; ssim (%), psnr and nmi compare the
    two binary edge maps rendered at 0/255.
    """
    xb, _, preds = _predictions(_resolve(model, steps), pairs)
    rep = MetricReport("correspondence")
    for pair, x, p in zip(pairs, xb, preds):
        warped = denormalize(_warp_source(x, p.phi))
        ea, eb = sobel_edges(warped), sobel_edges(denormalize(p.y_trans))
        ia, ib = 255.0 * ea.mask, 255.0 * eb.mask
        rep.add(pair.id, {"edge_dice": dice(ea, eb), "ssim": 100.0 * ssim(ia, ib),
                          "psnr": psnr(ia, ib), "nmi": nmi_hard(ia, ib)})
    return rep


def traceability_eval(model, pairs: Sequence[ImagePair], steps: int = 7) -> MetricReport:
    """Agreement of the warped source with the translation, plus field diagnostics.

    ``epe`` (mean endpoint error against the ground-truth displacement, pixels)
    is only available on synthetic pairs and has no counterpart on real data;
    ``masked_edge_dice`` restricts the edge comparison to the changed region.
    """
    xb, _, preds = _predictions(_resolve(model, steps), pairs)
    rep = MetricReport("traceability", notes={
        "epe": "synthetic ground truth only; no real-data counterpart",
        "epe_zero": "endpoint error of the zero displacement, for reference"})
    for pair, x, p in zip(pairs, xb, preds):
        warped = denormalize(_warp_source(x, p.phi))
        trans = denormalize(p.y_trans)
        row = {"mae": mae(warped, trans), "ssim": 100.0 * ssim(warped, trans),
               "fold_fraction": float(dfm.fold_fraction(p.phi[None].astype(np.float64))[0])}
        if pair.region is not None:
            row["masked_edge_dice"] = dice(sobel_edges(warped), sobel_edges(trans), pair.region)
        if pair.gt_displacement is not None:
            gt = np.asarray(pair.gt_displacement, dtype=np.float64)
            row["epe"] = float(np.linalg.norm(p.u - gt, axis=0).mean())
            row["epe_zero"] = float(np.linalg.norm(gt, axis=0).mean())
        rep.add(pair.id, row)
    return rep


PROTOCOLS = {
    "standard": standard_eval,
    "correspondence": correspondence_eval,
    "traceability": traceability_eval,
}


def run_protocol(name: str, model, pairs: Sequence[ImagePair], steps: int = 7) -> MetricReport:
    if name not in PROTOCOLS:
        raise ValueError(f"unknown protocol {name!r}; choose from {sorted(PROTOCOLS)}")
    return PROTOCOLS[name](model, pairs, steps)


def cross_stream_ssim(model, pairs: Sequence[ImagePair], steps: int = 7) -> float:
    """Mean SSIM (%) between the translated and the warped image."""
    _, _, preds = _predictions(_resolve(model, steps), pairs)
    return float(np.mean([100.0 * ssim(denormalize(p.y_trans), denormalize(p.y_warp))
                          for p in preds]))
