"""Command-line entry point.

Exit codes: 0 success, 2 bad usage or missing/invalid input, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import SCHEMA, ConfigError, RunConfig
from .data import dataset_checksum, load_dataset, make_dataset
from .diffusion import NoiseKind, NoiseSpec, PlanMode, select_timesteps
from .errors import DomainError, FormatError, NonFiniteLoss
from .experiments import score, sweep
from .geometry import reports_to_csv, summarize
from .train import (
    evaluate_predictions, finetune_e2e, predict_ensemble, prepare, train_diffusion,
)

log = logging.getLogger("geodiff")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

# (T, k) -> (leading, trailing)
GOLDEN_TIMESTEPS = {
    (1000, 1): ([1], [1000]),
    (1000, 2): ([501, 1], [1000, 500]),
    (1000, 4): ([751, 501, 251, 1], [1000, 750, 500, 250]),
    (1000, 10): ([901, 801, 701, 601, 501, 401, 301, 201, 101, 1],
                 [1000, 900, 800, 700, 600, 500, 400, 300, 200, 100]),
}
REPRO_HEADER = ("mode", "steps", "ensemble", "absrel", "delta1")
REPRO_STEPS = (1, 2, 4, 10)
REPRO_ENSEMBLE = (1, 5)


class UsageError(Exception):
    pass


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"missing {what}: {path}")
    return path


def repro_stanza(cfg: RunConfig, command: str) -> dict:
    return {
        "command": command,
        "config_hash": cfg.hash(),
        "seeds": {k: cfg[k] for k in SCHEMA if k.endswith(".seed")},
        "version": __version__,
    }


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_report(cfg: RunConfig, command: str, payload: dict) -> Path:
    out = cfg.path("report_dir") / f"{command}.json"
    _write_json(out, {**payload, "repro": repro_stanza(cfg, command)})
    return out


def _dataset(cfg: RunConfig, split: str | None):
    root = cfg.path("dataset")
    _require(root / "manifest.json", "dataset manifest")
    man, samples, idx = load_dataset(root, split)
    return man, prepare(samples, cfg["data.task"], cfg["data.far_plane"]), idx


def _checkpoint(path: Path):
    _require(path, "checkpoint")
    return load_checkpoint(path)[0]


def cmd_timesteps(args) -> int:
    if args.golden:
        bad = 0
        for (T, k), (lead, trail) in GOLDEN_TIMESTEPS.items():
            for mode, want in (("leading", lead), ("trailing", trail)):
                got = list(select_timesteps(T, k, mode).steps)
                ok = got == want
                bad += not ok
                print(f"{'ok ' if ok else 'BAD'} T={T} k={k:<2d} {mode:<8s} {got}")
        return EXIT_OK if not bad else EXIT_NUMERIC
    plan = select_timesteps(args.T, args.k, args.mode)
    print(list(plan.steps))
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    root = cfg.path("dataset")
    man = make_dataset(root, cfg["data.n"], cfg["data.seed"], cfg["data.split"], cfg["data.H"], cfg["data.W"])
    checksum = dataset_checksum(root)
    _write_report(cfg, "synth", {"dataset": str(root), "n": man.n, "train": len(man.train),
                                 "test": len(man.test), "checksum": checksum})
    print(f"wrote {man.n} samples to {root} (sha256 {checksum[:16]})")
    return EXIT_OK


def _loss_csv(losses) -> str:
    return "iteration,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(losses))


def cmd_train(args, cfg: RunConfig) -> int:
    _, data, _ = _dataset(cfg, "train")
    res = train_diffusion(data, cfg.diffusion_train(), cfg.schedule(),
                          width=cfg["model.width"], embed_dim=cfg["model.embed_dim"])
    out = cfg.path("checkpoint")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, res.params, res.state)
    rep = cfg.path("report_dir")
    rep.mkdir(parents=True, exist_ok=True)
    (rep / "train_losses.csv").write_text(_loss_csv(res.losses))
    _write_report(cfg, "train", {"checkpoint": str(out), "iterations": len(res.losses),
                                 "final_loss": res.losses[-1] if res.losses else None})
    print(f"saved {out}")
    return EXIT_OK


def cmd_finetune(args, cfg: RunConfig) -> int:
    _, data, _ = _dataset(cfg, "train")
    params = None if cfg["finetune.init"] == "fresh" else _checkpoint(cfg.path("checkpoint"))
    res = finetune_e2e(params, data, cfg.finetune_train(), cfg.schedule(),
                       width=cfg["model.width"], embed_dim=cfg["model.embed_dim"])
    out = cfg.path("finetuned")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, res.params, res.state)
    rep = cfg.path("report_dir")
    rep.mkdir(parents=True, exist_ok=True)
    (rep / "finetune_losses.csv").write_text(_loss_csv(res.losses))
    _write_report(cfg, "finetune", {"checkpoint": str(out), "iterations": len(res.losses),
                                    "final_loss": res.losses[-1] if res.losses else None,
                                    "skipped": res.skipped})
    print(f"saved {out}")
    return EXIT_OK


def _which_checkpoint(cfg: RunConfig, which: str) -> Path:
    return cfg.path("finetuned" if which == "finetuned" else "checkpoint")


def cmd_infer(args, cfg: RunConfig) -> int:
    _, data, idx = _dataset(cfg, args.split)
    params = _checkpoint(_which_checkpoint(cfg, args.checkpoint))
    preds = predict_ensemble(params, data, cfg.plan(), cfg.noise(), cfg.schedule(), cfg["plan.ensemble"])
    rep = cfg.path("report_dir")
    rep.mkdir(parents=True, exist_ok=True)
    out = rep / "predictions.npy"
    np.save(out, preds)
    _write_report(cfg, "infer", {"predictions": str(out), "split": args.split, "indices": idx,
                                 "checkpoint": str(_which_checkpoint(cfg, args.checkpoint))})
    print(f"wrote {len(preds)} predictions to {out}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    _, data, idx = _dataset(cfg, args.split)
    path = Path(args.predictions) if args.predictions else cfg.path("report_dir") / "predictions.npy"
    _require(path, "predictions")
    preds = np.load(path)
    if preds.shape[0] != len(data) or preds.shape[1:] != data.target.shape[1:]:
        raise UsageError(f"predictions {preds.shape} do not match {args.split} split "
                         f"({len(data)} x {data.target.shape[1:]})")
    reports = evaluate_predictions(preds, data)
    summary = summarize(reports)
    rep = cfg.path("report_dir")
    rep.mkdir(parents=True, exist_ok=True)
    ids = [f"{i:06d}" for i in idx]
    (rep / "metrics.csv").write_text(reports_to_csv(reports, ids))
    _write_report(cfg, "eval", {"summary": summary.as_dict(), "split": args.split,
                                "per_sample": {i: r.as_dict() for i, r in zip(ids, reports)}})
    print(json.dumps(summary.as_dict(), sort_keys=True))
    return EXIT_OK


def repro_rows(params, data, cfg: RunConfig, e2e_params=None) -> list[tuple]:
    sched = cfg.schedule()
    rows = sweep(params, data, sched, cfg.noise(), REPRO_STEPS, REPRO_ENSEMBLE)
    if e2e_params is not None:
        s = score(e2e_params, data, sched, "trailing", 1, NoiseSpec(NoiseKind.ZEROS))
        rows.append(("e2e", 1, 1, s.absrel, s.delta1))
    return rows


def rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def cmd_repro_bug(args, cfg: RunConfig) -> int:
    if cfg["data.task"] != "depth":
        raise UsageError("repro-bug reports depth metrics; set data.task = depth")
    _, data, _ = _dataset(cfg, "test")
    params = _checkpoint(cfg.path("checkpoint"))
    e2e = cfg.path("finetuned")
    e2e_params = load_checkpoint(e2e)[0] if e2e.exists() else None
    if e2e_params is None:
        log.warning("no fine-tuned checkpoint at %s; omitting the e2e reference row", e2e)
    rows = repro_rows(params, data, cfg, e2e_params)
    text = rows_to_csv(REPRO_HEADER, rows)
    rep = cfg.path("report_dir")
    rep.mkdir(parents=True, exist_ok=True)
    (rep / "repro_bug.csv").write_text(text)
    _write_report(cfg, "repro_bug", {"rows": len(rows)})
    sys.stdout.write(text)
    return EXIT_OK


def ablation_rows(params, train_data, test_data, cfg: RunConfig, kinds=None) -> list[tuple]:
    sched = cfg.schedule()
    rows = []
    for kind in kinds or [k.value for k in NoiseKind]:
        res = finetune_e2e(None if params is None else params.copy(), train_data,
                           cfg.finetune_train(kind), sched,
                           width=cfg["model.width"], embed_dim=cfg["model.embed_dim"])
        preds = predict_ensemble(res.params, test_data, cfg.plan(1, "trailing"), cfg.noise(kind), sched, 1)
        reports = evaluate_predictions(preds, test_data)
        s = summarize(reports)
        if test_data.task == "depth":
            rows.append((kind, s.absrel, s.delta1))
        else:
            rows.append((kind, s.mean_angular_deg, s.pct_below_11_25))
    return rows


def cmd_ablation(args, cfg: RunConfig) -> int:
    _, train_data, _ = _dataset(cfg, "train")
    _, test_data, _ = _dataset(cfg, "test")
    params = None if cfg["finetune.init"] == "fresh" else _checkpoint(cfg.path("checkpoint"))
    rows = ablation_rows(params, train_data, test_data, cfg)
    header = ("noise", "absrel", "delta1") if cfg["data.task"] == "depth" else ("noise", "mean_angular_deg", "pct_below_11_25")
    text = rows_to_csv(header, rows)
    rep = cfg.path("report_dir")
    rep.mkdir(parents=True, exist_ok=True)
    (rep / "noise_ablation.csv").write_text(text)
    _write_report(cfg, "ablation", {"rows": len(rows)})
    sys.stdout.write(text)
    return EXIT_OK


def cmd_config(args, cfg: RunConfig) -> int:
    sys.stdout.write(cfg.dump())
    print(f"# hash = {cfg.hash()}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geodiff", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("timesteps", help="print an inference timestep plan")
    t.add_argument("--T", type=int, default=1000)
    t.add_argument("--k", type=int, default=1)
    t.add_argument("--mode", choices=[m.value for m in PlanMode], default="trailing")
    t.add_argument("--golden", action="store_true", help="check the reference leading/trailing tables")

    def with_config(name, help):
        s = sub.add_parser(name, help=help)
        s.add_argument("-c", "--config", help="key = value config file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        return s

    with_config("synth", "generate the synthetic dataset")
    with_config("train", "diffusion (v-matching) training")
    with_config("finetune", "single-step end-to-end fine-tuning")
    for name, help in (("infer", "write predictions for a split"), ("eval", "score predictions")):
        s = with_config(name, help)
        s.add_argument("--split", choices=["train", "test"], default="test")
        if name == "infer":
            s.add_argument("--checkpoint", choices=["diffusion", "finetuned"], default="diffusion")
        else:
            s.add_argument("--predictions", help="npy file (default: <report_dir>/predictions.npy)")
    with_config("repro-bug", "leading vs trailing sweep over steps and ensemble size")
    with_config("ablation", "fine-tune with each noise kind and score single-step inference")
    with_config("config", "print the resolved configuration and its hash")
    return p


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "finetune": cmd_finetune, "infer": cmd_infer,
    "eval": cmd_eval, "repro-bug": cmd_repro_bug, "ablation": cmd_ablation, "config": cmd_config,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "timesteps":
            return cmd_timesteps(args)
        cfg = RunConfig.load(args.config, args.set)
        return COMMANDS[args.command](args, cfg)
    except NonFiniteLoss as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, FormatError, DomainError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
