"""Command-line entry point: synth, train, infer, eval, gradcheck, ablate.

Exit codes: 0 success, 2 usage or configuration error, 3 data or checkpoint
error, 4 numerical failure (non-finite loss, failed gradient check).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from . import data as D
from . import deformation as dfm
from . import gradcheck as G
from . import metrics as E
from . import model as M
from . import trainer as T

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

logger = logging.getLogger("tracewarp")


class UsageError(Exception):
    pass


ABLATION_PRESETS = (
    ("trans_only", {"alpha": 1.0}),
    ("two_stream_gamma0", {"gamma": 0.0}),
    ("full", {}),
)


def _write_run_json(path: Path, command: str, args: argparse.Namespace, config: dict) -> None:
    record = {
        "command": command,
        "version": __version__,
        "args": {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
                 if k != "func"},
        "config": config,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _synth_config(path) -> D.SynthConfig:
    if path is None:
        return D.SynthConfig()
    doc = T.config_section(T.read_config_file(path), "synth")
    known = {f.name for f in fields(D.SynthConfig)}
    if set(doc) - known:
        raise UsageError(f"unknown synth config keys: {sorted(set(doc) - known)}")
    return D.SynthConfig(**doc)


def _train_config(path, **overrides) -> T.TrainConfig:
    doc = {} if path is None else T.config_section(T.read_config_file(path), "train")
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return T.TrainConfig.from_dict(doc)


def _require_dir(path: Path, what: str) -> None:
    if not path.is_dir():
        raise UsageError(f"{what} directory not found: {path}")


def _checkpoint_train_config(header: dict) -> T.TrainConfig:
    return T.TrainConfig.from_dict(header["train_config"]) if "train_config" in header \
        else T.TrainConfig()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _synth_config(args.config)
    out = Path(args.out)
    pairs = D.generate_dataset(cfg)
    manifest = D.write_dataset(pairs, out, cfg)
    _write_run_json(out / "run.json", "synth", args, {"synth": asdict(cfg)})
    print(f"pairs {len(pairs)}  checksum {manifest['checksum']}")
    return EXIT_OK


def _split_pairs(data_dir: Path, cfg: T.TrainConfig, which: str):
    pairs, _ = D.load_dataset(data_dir)
    if which == "all":
        return pairs
    train, test = D.split(pairs, cfg.train_fraction, cfg.seed)
    return train if which == "train" else test


def cmd_train(args) -> int:
    cfg = _train_config(args.config, epochs=args.epochs, seed=args.seed)
    data_dir, out = Path(args.data), Path(args.out)
    _require_dir(data_dir, "data")
    train = _split_pairs(data_dir, cfg, "train")
    out.mkdir(parents=True, exist_ok=True)
    _write_run_json(out / "run.json", "train", args, {"train": cfg.to_dict()})
    params, log = T.fit(train, cfg, out_dir=out, resume=args.resume)
    log.to_csv(out / "train_log.csv")
    log.timing_to_csv(out / "timing.csv")
    first, last = log.records[0], log.records[-1]
    print(f"epochs {len(log)}  l1_trans {first['l1_trans']:.4f} -> {last['l1_trans']:.4f}  "
          f"checkpoint {out / 'final.ttck'}")
    return EXIT_OK


def _edge_overlay(y_trans: np.ndarray, y_warp: np.ndarray) -> np.ndarray:
    base = np.clip(np.rint(D.denormalize(y_trans)), 0, 255).astype(np.uint8)
    rgb = np.repeat(base[..., None], 3, axis=2)
    edges = E.sobel_edges(D.denormalize(y_warp)).mask
    rgb[edges] = (255, 0, 0)
    return rgb


def cmd_infer(args) -> int:
    params, header = M.load_model(args.ckpt)
    steps = args.steps or _checkpoint_train_config(header).integration_steps
    x = D.load_png(args.input)
    if x.shape[1:] != (params.config.image_size,) * 2:
        raise D.DataError(f"{args.input}: image {x.shape[1:]} does not match model size "
                          f"{params.config.image_size}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pred = E.model_predictor(params, steps)(x[None])[0]
    D.save_png(pred.y_trans, out / "y_trans.png")
    D.save_png(pred.y_warp, out / "y_warp.png")
    dfm.save_field(out / "field.twf", pred.u[None])
    Image.fromarray(dfm.flow_to_rgb(pred.u), mode="RGB").save(out / "flow.png")
    Image.fromarray(_edge_overlay(pred.y_trans, pred.y_warp), mode="RGB").save(out / "overlay.png")
    _write_run_json(out / "run.json", "infer", args, {"steps": steps,
                                                       "model": M.model_config_to_dict(params.config)})
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    data_dir = Path(args.data)
    _require_dir(data_dir, "data")
    params, header = M.load_model(args.ckpt)
    cfg = _checkpoint_train_config(header)
    pairs = _split_pairs(data_dir, cfg, args.split)
    report = E.run_protocol(args.protocol, params, pairs, cfg.integration_steps)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out)
    _write_run_json(out.with_suffix(".run.json"), "eval", args, {"train": cfg.to_dict()})
    for name, (mean, std, excluded) in report.summary().items():
        note = f"  ({excluded} excluded)" if excluded else ""
        print(f"{name:<18} {mean:10.4f} +- {std:.4f}{note}")
    if "epe" in report.values:
        print(f"note: epe uses synthetic ground truth ({report.notes['epe']})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = G.run_sweep(args.seed)
    table = G.format_table(results)
    print(table)
    failed = [r.name for r in results if not r.passed]
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.txt").write_text(table + "\n")
        _write_run_json(out / "run.json", "gradcheck", args, {"seed": args.seed,
                                                              "step": G.STEP, "tolerance": G.TOLERANCE})
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_NUMERIC
    return EXIT_OK


ABLATION_COLUMNS = (
    "preset", "alpha", "gamma",
    "std_ssim", "std_mae", "std_psnr", "std_nmi",
    "corr_edge_dice", "corr_ssim", "corr_psnr", "corr_nmi",
    "trace_mae", "trace_ssim", "trace_epe", "trace_fold_fraction",
    "cross_stream_ssim",
)


def ablation_row(name: str, cfg: T.TrainConfig, params: M.ModelParams, test) -> dict:
    steps = cfg.integration_steps
    std = E.standard_eval(params, test, steps)
    corr = E.correspondence_eval(params, test, steps)
    trace = E.traceability_eval(params, test, steps)
    row = {"preset": name, "alpha": cfg.alpha, "gamma": cfg.gamma}
    for prefix, rep in (("std", std), ("corr", corr), ("trace", trace)):
        for metric in rep.metrics:
            key = f"{prefix}_{metric}"
            if key in ABLATION_COLUMNS:
                row[key] = rep.mean(metric)
    row["cross_stream_ssim"] = E.cross_stream_ssim(params, test, steps)
    return row


def cmd_ablate(args) -> int:
    base = _train_config(args.config, epochs=args.epochs, seed=args.seed)
    data_dir, out = Path(args.data), Path(args.out)
    _require_dir(data_dir, "data")
    pairs, _ = D.load_dataset(data_dir)
    train, test = D.split(pairs, base.train_fraction, base.seed)
    out.mkdir(parents=True, exist_ok=True)
    configs = {name: T.TrainConfig.from_dict({**base.to_dict(), **over})
               for name, over in ABLATION_PRESETS}
    _write_run_json(out / "run.json", "ablate", args,
                    {name: cfg.to_dict() for name, cfg in configs.items()})
    rows = []
    for name, cfg in configs.items():
        logger.info("ablation preset %s", name)
        params, log = T.fit(train, cfg, out_dir=out / name)
        log.to_csv(out / name / "train_log.csv")
        log.timing_to_csv(out / name / "timing.csv")
        rows.append(ablation_row(name, cfg, params, test))
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for row in rows:
            w.writerow([row[c] if isinstance(row[c], str) else f"{row[c]:.9g}" for c in ABLATION_COLUMNS])
    for row in rows:
        print(f"{row['preset']:<18} mae {row['std_mae']:8.3f}  edge_dice {row['corr_edge_dice']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tracewarp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--log-level", default="WARNING",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic paired dataset")
    s.add_argument("--config", type=Path)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train on a dataset directory")
    s.add_argument("--config", type=Path)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--resume", type=Path)
    s.add_argument("--epochs", type=int, help="override the config's epoch count")
    s.add_argument("--seed", type=int, help="override the config's seed")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="run a checkpoint on one image")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--input", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--steps", type=int, help="integration steps (default: from checkpoint)")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--ckpt", type=Path, required=True)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--protocol", default="standard", choices=sorted(E.PROTOCOLS))
    s.add_argument("--split", default="test", choices=["test", "train", "all"])
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference sweep over every op and loss")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ablate", help="train and compare the ablation presets")
    s.add_argument("--config", type=Path)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    """Run one command; returns the process exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DataError, M.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except T.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
