"""Dual-stream generator (shared encoder, translation and velocity decoders)
and the two conditional patch discriminators.

Layers are 3x3 convolutions: stride 2 for every downsampling step, stride 1
after each nearest-neighbour 2x upsample. The decoders are U-Net shaped and
take a skip from every encoder stage plus the input image at full
resolution. No normalisation layers.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from . import deformation as dfm
from .autodiff import Tensor

FULL_ENCODER_CHANNELS = (64, 128, 256, 512, 512)
FULL_DISCRIMINATOR_CHANNELS = (64, 128, 256)
LEAKY_SLOPE = 0.2
CHECKPOINT_MAGIC = b"TTCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for unreadable or inconsistent checkpoint files."""


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    in_channels: int = 1
    width_factor: float = 0.125
    shared_encoder: bool = True
    encoder_channels: tuple = FULL_ENCODER_CHANNELS
    discriminator_channels: tuple = FULL_DISCRIMINATOR_CHANNELS
    velocity_init_std: float = 1e-5

    def __post_init__(self):
        stages = len(self.encoder_channels)
        if self.image_size % 2 ** stages:
            raise ValueError(f"image_size {self.image_size} must be divisible by {2 ** stages}")
        if self.width_factor <= 0:
            raise ValueError("width_factor must be > 0")

    def scaled(self, channels) -> list[int]:
        return [max(1, int(round(c * self.width_factor))) for c in channels]

    @property
    def enc_channels(self) -> list[int]:
        return self.scaled(self.encoder_channels)

    @property
    def disc_channels(self) -> list[int]:
        return self.scaled(self.discriminator_channels)


Params = dict  # name -> Tensor


@dataclass
class ModelParams:
    config: ModelConfig
    generator: Params = field(default_factory=dict)
    d_trans: Params = field(default_factory=dict)
    d_warp: Params = field(default_factory=dict)

    GROUPS = ("generator", "d_trans", "d_warp")

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for group in self.GROUPS:
            for name, t in getattr(self, group).items():
                out[f"{group}.{name}"] = t
        return out

    def num_parameters(self) -> int:
        return sum(t.size for t in self.named_tensors().values())

    def zero_grad(self) -> None:
        for t in self.named_tensors().values():
            t.grad = None

    def copy(self) -> "ModelParams":
        clone = ModelParams(self.config)
        for group in self.GROUPS:
            setattr(clone, group, {k: Tensor(v.data.copy(), requires_grad=True)
                                   for k, v in getattr(self, group).items()})
        return clone


class FeaturePyramid(NamedTuple):
    image: Tensor
    stages: list


class GeneratorOutput(NamedTuple):
    y_trans: Tensor
    y_warp: Tensor
    v: Tensor
    u: Tensor
    phi: Tensor


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

def _conv_params(rng, params: Params, name: str, cin: int, cout: int, std: float | None = None):
    fan_in = cin * 9
    if std is None:
        std = np.sqrt(2.0 / ((1 + LEAKY_SLOPE ** 2) * fan_in))
    w = rng.normal(0.0, std, size=(cout, cin, 3, 3))
    params[f"{name}.weight"] = Tensor(w, requires_grad=True)
    params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)


def _init_encoder(rng, params: Params, prefix: str, cfg: ModelConfig):
    cin = cfg.in_channels
    for i, cout in enumerate(cfg.enc_channels):
        _conv_params(rng, params, f"{prefix}.{i}", cin, cout)
        cin = cout


def _decoder_plan(cfg: ModelConfig) -> list[tuple[int, int]]:
    enc = cfg.enc_channels
    skips = list(reversed(enc[:-1])) + [cfg.in_channels]
    outs = list(reversed(enc[:-1])) + [enc[0]]
    plan, cin = [], enc[-1]
    for skip, cout in zip(skips, outs):
        plan.append((cin + skip, cout))
        cin = cout
    return plan


def _init_decoder(rng, params: Params, prefix: str, cfg: ModelConfig, out_channels: int,
                  head_std: float | None):
    plan = _decoder_plan(cfg)
    for i, (cin, cout) in enumerate(plan):
        _conv_params(rng, params, f"{prefix}.{i}", cin, cout)
    last = plan[-1][1]
    if head_std is None:
        head_std = np.sqrt(1.0 / (last * 9))
    _conv_params(rng, params, f"{prefix}.head", last, out_channels, std=head_std)


def init_discriminator(rng, cfg: ModelConfig) -> Params:
    params: Params = {}
    cin = 2 * cfg.in_channels
    for i, cout in enumerate(cfg.disc_channels):
        _conv_params(rng, params, f"block.{i}", cin, cout)
        cin = cout
    _conv_params(rng, params, "head", cin, 1, std=np.sqrt(1.0 / (cin * 9)))
    return params


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    gen: Params = {}
    _init_encoder(rng, gen, "enc", cfg)
    if not cfg.shared_encoder:
        _init_encoder(rng, gen, "enc_f", cfg)
    _init_decoder(rng, gen, "dec_g", cfg, cfg.in_channels, head_std=None)
    _init_decoder(rng, gen, "dec_f", cfg, 2, head_std=cfg.velocity_init_std)
    return ModelParams(cfg, gen, init_discriminator(rng, cfg), init_discriminator(rng, cfg))


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _conv(x, p: Params, name: str, stride: int = 1) -> Tensor:
    return ad.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=stride, padding=1)


def encode(x: Tensor, p: Params, prefix: str = "enc") -> FeaturePyramid:
    h, w = x.shape[2:]
    depth = sum(1 for k in p if k.startswith(f"{prefix}.") and k.endswith(".weight"))
    if h % 2 ** depth or w % 2 ** depth:
        raise ValueError(f"input {h}x{w} is not divisible by {2 ** depth}")
    stages, feat = [], x
    for i in range(depth):
        feat = ad.leaky_relu(_conv(feat, p, f"{prefix}.{i}", stride=2), LEAKY_SLOPE)
        stages.append(feat)
    return FeaturePyramid(x, stages)


def _decode(feats: FeaturePyramid, p: Params, prefix: str) -> Tensor:
    skips = list(reversed(feats.stages[:-1])) + [feats.image]
    d = feats.stages[-1]
    for i, skip in enumerate(skips):
        d = ad.concat([ad.upsample_nearest2x(d), skip], axis=1)
        d = ad.leaky_relu(_conv(d, p, f"{prefix}.{i}"), LEAKY_SLOPE)
    return _conv(d, p, f"{prefix}.head")


def decode_translate(feats: FeaturePyramid, p: Params) -> Tensor:
    return ad.tanh(_decode(feats, p, "dec_g"))


def decode_velocity(feats: FeaturePyramid, p: Params) -> Tensor:
    return _decode(feats, p, "dec_f")


def forward(x: Tensor, params: ModelParams, steps: int = 7) -> GeneratorOutput:
    p = params.generator
    feats = encode(x, p, "enc")
    feats_f = feats if params.config.shared_encoder else encode(x, p, "enc_f")
    y_trans = decode_translate(feats, p)
    v = decode_velocity(feats_f, p)
    u = dfm.integrate_velocity(v, steps)
    phi = dfm.to_deformation(u)
    y_warp = dfm.warp(x, phi)
    return GeneratorOutput(y_trans, y_warp, v, u, phi)


def discriminate(x_cond: Tensor, candidate: Tensor, d: Params) -> Tensor:
    if x_cond.shape[0] != candidate.shape[0] or x_cond.shape[2:] != candidate.shape[2:]:
        raise ValueError(f"discriminate: condition {x_cond.shape} vs candidate {candidate.shape}")
    h = ad.concat([x_cond, candidate], axis=1)
    depth = sum(1 for k in d if k.startswith("block.") and k.endswith(".weight"))
    for i in range(depth):
        h = ad.leaky_relu(_conv(h, d, f"block.{i}", stride=2), LEAKY_SLOPE)
    return _conv(h, d, "head")


def zero_velocity_head(params: ModelParams) -> None:
    for suffix in ("weight", "bias"):
        t = params.generator[f"dec_f.head.{suffix}"]
        t.data = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# checkpoints: magic, u32 version, u32 header length, JSON header, float32 payload
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], header: dict) -> None:
    """Write atomically (temp file + rename)."""
    manifest, offset, blobs = [], 0, []
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes
    meta = json.dumps(dict(header, tensors=manifest), sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(meta)))
        fh.write(meta)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, meta_len = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[12:12 + meta_len])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    body = raw[12 + meta_len:]
    tensors = {}
    for entry in header.pop("tensors"):
        count = int(np.prod(entry["shape"]))
        start = entry["offset"]
        if start + 4 * count > len(body):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past end of file")
        tensors[entry["name"]] = np.frombuffer(body, dtype="<f4", count=count, offset=start) \
            .reshape(entry["shape"]).astype(np.float32)
    return tensors, header


def params_to_arrays(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in params.named_tensors().items()}


def params_from_arrays(arrays: dict[str, np.ndarray], cfg: ModelConfig) -> ModelParams:
    params = ModelParams(cfg)
    for name, arr in arrays.items():
        group, _, key = name.partition(".")
        if group not in ModelParams.GROUPS:
            continue
        getattr(params, group)[key] = Tensor(arr, requires_grad=True)
    expected = init_params(cfg, seed=0).named_tensors()
    got = params.named_tensors()
    if set(expected) != set(got):
        missing = sorted(set(expected) - set(got))
        raise CheckpointError(f"checkpoint does not match model config; missing {missing[:3]}")
    for name, t in expected.items():
        if got[name].shape != t.shape:
            raise CheckpointError(f"{name}: shape {got[name].shape} != expected {t.shape}")
    return params


def model_config_to_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["encoder_channels"] = list(cfg.encoder_channels)
    d["discriminator_channels"] = list(cfg.discriminator_channels)
    return d


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    for key in ("encoder_channels", "discriminator_channels"):
        if key in d:
            d[key] = tuple(d[key])
    return ModelConfig(**d)


def save_model(path: str | Path, params: ModelParams, extra: dict | None = None) -> None:
    header = {"model": model_config_to_dict(params.config)}
    header.update(extra or {})
    save_checkpoint(path, params_to_arrays(params), header)


def load_model(path: str | Path) -> tuple[ModelParams, dict]:
    arrays, header = load_checkpoint(path)
    if "model" not in header:
        raise CheckpointError(f"{path}: header has no model config")
    try:
        cfg = model_config_from_dict(header["model"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid model config: {exc}") from exc
    return params_from_arrays(arrays, cfg), header
