"""Adversarial training: Adam, one discriminator step then one generator step per batch."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import deformation as dfm
from . import losses as L
from . import model as M
from .autodiff import Tensor
from .data import ImagePair, stack_batch

logger = logging.getLogger(__name__)

LOG_COLUMNS = (
    "epoch", "loss_g", "loss_d", "align", "l1_trans", "dnmi_warp", "dnmi_cross",
    "adv_g_trans", "adv_g_warp", "adv_d_trans", "adv_d_warp", "smooth", "mae_trans",
)


class NumericalError(RuntimeError):
    """A loss term became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.5
    gamma: float = 1.0
    lambda_adv: float = 0.01
    lambda_smooth: float = 0.2
    lr: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    epochs: int = 60
    integration_steps: int = 7
    dnmi_bins_warp: int = 16
    dnmi_bins_cross: int = 32
    dnmi_sigma: float = 0.5
    seed: int = 0
    width_factor: float = 0.125
    image_size: int = 64
    in_channels: int = 1
    shared_encoder: bool = True
    train_fraction: float = 0.7
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.lr > 0 or not math.isfinite(self.lr):
            raise ValueError("lr must be finite and > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.integration_steps < 1:
            raise ValueError("integration_steps must be >= 1")
        self.weights  # validates alpha and the lambdas
        self.model_config  # validates image size

    @property
    def weights(self) -> L.LossWeights:
        return L.LossWeights(self.alpha, self.gamma, self.lambda_adv, self.lambda_smooth)

    @property
    def dnmi_warp(self) -> L.DnmiConfig:
        return L.DnmiConfig(self.dnmi_bins_warp, self.dnmi_sigma)

    @property
    def dnmi_cross(self) -> L.DnmiConfig:
        return L.DnmiConfig(self.dnmi_bins_cross, self.dnmi_sigma)

    @property
    def model_config(self) -> M.ModelConfig:
        return M.ModelConfig(image_size=self.image_size, in_channels=self.in_channels,
                             width_factor=self.width_factor, shared_encoder=self.shared_encoder)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
                lr: float, betas=(0.5, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam step for a single array. ``step`` counts from 1.

    Returns the new (param, m, v).
    """
    b1, b2 = betas
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** step)
    v_hat = v / (1 - b2 ** step)
    param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param.astype(grad.dtype, copy=False), m.astype(grad.dtype, copy=False), \
        v.astype(grad.dtype, copy=False)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.5, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = AdamState({k: np.zeros_like(t.data) for k, t in params.items()},
                               {k: np.zeros_like(t.data) for k, t in params.items()}, 0)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self) -> None:
        self.state.step += 1
        for name, t in self.params.items():
            grad = t.grad if t.grad is not None else np.zeros_like(t.data)
            t.data, self.state.m[name], self.state.v[name] = adam_update(
                t.data, grad, self.state.m[name], self.state.v[name], self.state.step,
                self.lr, self.betas, self.eps)


def _discriminator_params(params: M.ModelParams) -> dict[str, Tensor]:
    out = {f"d_trans.{k}": t for k, t in params.d_trans.items()}
    out.update({f"d_warp.{k}": t for k, t in params.d_warp.items()})
    return out


def make_optimizers(params: M.ModelParams, cfg: TrainConfig) -> tuple[Adam, Adam]:
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    return (Adam(params.generator, cfg.lr, betas, cfg.adam_eps),
            Adam(_discriminator_params(params), cfg.lr, betas, cfg.adam_eps))


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------

def _check_finite(record: dict, cfg: TrainConfig, step: int) -> None:
    bad = [k for k, v in record.items() if not math.isfinite(v)]
    if bad:
        raise NumericalError(
            f"non-finite loss at step {step}: {', '.join(bad)}; "
            f"record={json.dumps(record)}; config={json.dumps(cfg.to_dict())}")


def generator_losses(x: Tensor, y: Tensor, out: M.GeneratorOutput, params: M.ModelParams,
                     cfg: TrainConfig) -> dict[str, Tensor]:
    """Every generator-side loss term as a tensor, plus the total under ``loss_g``."""
    w = cfg.weights
    terms = L.content_alignment_terms(out.y_trans, out.y_warp, y, w, cfg.dnmi_warp, cfg.dnmi_cross)
    terms["adv_g_trans"] = L.adv_g_loss(M.discriminate(x, out.y_trans, params.d_trans))
    terms["adv_g_warp"] = L.adv_g_loss(M.discriminate(x, out.y_warp, params.d_warp))
    terms["smooth"] = dfm.smoothness_loss(out.v)
    terms["loss_g"] = L.total_generator_loss(terms["align"], terms["adv_g_trans"],
                                             terms["adv_g_warp"], terms["smooth"], w)
    return terms


def _d_scores(x: Tensor, real: Tensor, fake: Tensor, d: dict) -> tuple[Tensor, Tensor]:
    n = x.shape[0]
    scores = M.discriminate(ad.concat([x, x], axis=0), ad.concat([real, fake], axis=0), d)
    return scores[:n], scores[n:]


def discriminator_losses(x: Tensor, y: Tensor, y_trans: Tensor, y_warp: Tensor,
                         params: M.ModelParams, cfg: TrainConfig) -> dict[str, Tensor]:
    real_t, fake_t = _d_scores(x, y, y_trans, params.d_trans)
    real_w, fake_w = _d_scores(x, y, y_warp, params.d_warp)
    terms = {"adv_d_trans": L.adv_d_loss(real_t, fake_t), "adv_d_warp": L.adv_d_loss(real_w, fake_w)}
    terms["loss_d"] = L.total_discriminator_loss(terms["adv_d_trans"], terms["adv_d_warp"],
                                                 cfg.weights)
    return terms


def train_step(xb: np.ndarray, yb: np.ndarray, params: M.ModelParams, opt_g: Adam, opt_d: Adam,
               cfg: TrainConfig) -> dict[str, float]:
    """Generator forward, then one D update on detached fakes, then one G update."""
    if len(xb) == 0:
        raise ValueError("empty batch")
    x, y = Tensor(xb), Tensor(yb)
    out = M.forward(x, params, cfg.integration_steps)

    opt_d.zero_grad()
    d_terms = discriminator_losses(x, y, out.y_trans.detach(), out.y_warp.detach(), params, cfg)
    _check_finite({k: t.item() for k, t in d_terms.items()}, cfg, opt_d.state.step + 1)
    ad.backward(d_terms["loss_d"])
    opt_d.step()

    opt_g.zero_grad()
    g_terms = generator_losses(x, y, out, params, cfg)
    record = {k: t.item() for k, t in g_terms.items()}
    record.update({k: t.item() for k, t in d_terms.items()})
    record["mae_trans"] = float(np.abs(out.y_trans.data - yb).mean() * 127.5)
    _check_finite(record, cfg, opt_g.state.step + 1)
    ad.backward(g_terms["loss_g"])
    opt_g.step()
    opt_d.zero_grad()
    return record


# ---------------------------------------------------------------------------
# epochs, logs, checkpoints
# ---------------------------------------------------------------------------

@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, record: dict) -> None:
        if self.records and record["epoch"] != self.records[-1]["epoch"] + 1:
            raise ValueError("TrainLog is append-only, one record per epoch")
        self.records.append(dict(record))

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> list:
        return [r[name] for r in self.records]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(LOG_COLUMNS)
            for r in self.records:
                writer.writerow([r["epoch"]] + [f"{r[c]:.9g}" for c in LOG_COLUMNS[1:]])

    def timing_to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("epoch", "wall_time_s"))
            for r in self.records:
                writer.writerow((r["epoch"], f"{r.get('wall_time', float('nan')):.3f}"))


def save_training_checkpoint(path: str | Path, params: M.ModelParams, opt_g: Adam, opt_d: Adam,
                             cfg: TrainConfig, epoch: int, rng: np.random.Generator,
                             log: TrainLog) -> None:
    tensors = M.params_to_arrays(params)
    for prefix, opt in (("opt_g", opt_g), ("opt_d", opt_d)):
        for name in opt.params:
            tensors[f"{prefix}.m.{name}"] = opt.state.m[name]
            tensors[f"{prefix}.v.{name}"] = opt.state.v[name]
    header = {
        "model": M.model_config_to_dict(params.config),
        "train_config": cfg.to_dict(),
        "epoch": epoch,
        "adam_steps": {"opt_g": opt_g.state.step, "opt_d": opt_d.state.step},
        "rng_state": rng.bit_generator.state,
        # wall times are left out so checkpoints are byte-reproducible
        "log": [{k: v for k, v in r.items() if k != "wall_time"} for r in log.records],
    }
    M.save_checkpoint(path, tensors, header)


def _restore(path: str | Path, cfg: TrainConfig):
    arrays, header = M.load_checkpoint(path)
    params = M.params_from_arrays(arrays, M.model_config_from_dict(header["model"]))
    opt_g, opt_d = make_optimizers(params, cfg)
    for prefix, opt in (("opt_g", opt_g), ("opt_d", opt_d)):
        for name in opt.params:
            opt.state.m[name] = arrays[f"{prefix}.m.{name}"].copy()
            opt.state.v[name] = arrays[f"{prefix}.v.{name}"].copy()
        opt.state.step = header["adam_steps"][prefix]
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    log = TrainLog([dict(r) for r in header["log"]])
    return params, opt_g, opt_d, rng, log, header["epoch"]


def fit(pairs: list[ImagePair], cfg: TrainConfig, out_dir: Optional[str | Path] = None,
        resume: Optional[str | Path] = None, params: Optional[M.ModelParams] = None,
        on_epoch: Optional[Callable[[dict], None]] = None) -> tuple[M.ModelParams, TrainLog]:
    """Train on ``pairs`` for ``cfg.epochs`` epochs.

    With ``out_dir`` set, a checkpoint is written every ``cfg.checkpoint_every``
    epochs (if > 0) and always at the end, as ``epoch_XXXX.ttck`` and
    ``final.ttck``.
    """
    if not pairs:
        raise ValueError("no training pairs")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        params, opt_g, opt_d, rng, log, start = _restore(resume, cfg)
    else:
        params = params or M.init_params(cfg.model_config, cfg.seed)
        opt_g, opt_d = make_optimizers(params, cfg)
        rng = np.random.default_rng([cfg.seed, 1])
        log, start = TrainLog(), 0

    for epoch in range(start + 1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(pairs))
        records = []
        for lo in range(0, len(order), cfg.batch_size):
            xb, yb = stack_batch([pairs[i] for i in order[lo:lo + cfg.batch_size]])
            records.append(train_step(xb, yb, params, opt_g, opt_d, cfg))
        summary = {"epoch": epoch}
        for key in LOG_COLUMNS[1:]:
            summary[key] = float(np.mean([r[key] for r in records]))
        summary["wall_time"] = time.perf_counter() - t0
        log.append(summary)
        logger.info("epoch %d  loss_g %.4f  loss_d %.4f  mae %.2f  (%.1fs)", epoch,
                    summary["loss_g"], summary["loss_d"], summary["mae_trans"], summary["wall_time"])
        if on_epoch is not None:
            on_epoch(summary)
        if out is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_training_checkpoint(out / f"epoch_{epoch:04d}.ttck", params, opt_g, opt_d, cfg,
                                     epoch, rng, log)
    if out is not None:
        save_training_checkpoint(out / "final.ttck", params, opt_g, opt_d, cfg, cfg.epochs, rng, log)
    return params, log


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

def read_config_file(path: str | Path) -> dict:
    """Parse a ``.toml`` or ``.json`` file into a dict."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        return json.loads(text)
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        return tomllib.loads(text)
    raise ValueError(f"{path}: config must be .toml or .json")


def config_section(doc: dict, section: str) -> dict:
    """The ``[section]`` table of a combined config, or the whole file if it has none."""
    if section in doc:
        if not isinstance(doc[section], dict):
            raise ValueError(f"config section [{section}] must be a table")
        return dict(doc[section])
    return {k: v for k, v in doc.items() if not isinstance(v, dict)}


def load_train_config(path: str | Path) -> TrainConfig:
    return TrainConfig.from_dict(config_section(read_config_file(path), "train"))
