"""Leading vs trailing timestep sweep on the toy benchmark.

Trains the diffusion model, scores every (mode, steps, ensemble) cell on the
test split, fine-tunes end to end for the single-step reference row, and
writes ``repro_bug.csv`` plus ``repro_bug.json`` to the output directory.

    python3 scripts/repro_bug.py --out reports/repro
"""
import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

from geodiff import __version__
from geodiff.checkpoint import load_checkpoint, save_checkpoint
from geodiff.cli import REPRO_HEADER, rows_to_csv
from geodiff.experiments import (
    BenchmarkConfig, Timer, finetune, inference_noise, load_benchmark, single_step, sweep, train_base,
)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="reports/repro")
    ap.add_argument("--checkpoint", help="reuse a trained diffusion checkpoint")
    ap.add_argument("--diffusion-iterations", type=int)
    ap.add_argument("--finetune-iterations", type=int)
    ap.add_argument("--no-e2e", action="store_true", help="skip the fine-tuned reference row")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = BenchmarkConfig()
    if args.diffusion_iterations is not None:
        cfg = replace(cfg, diffusion_iterations=args.diffusion_iterations)
    if args.finetune_iterations is not None:
        cfg = replace(cfg, finetune_iterations=args.finetune_iterations)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    bench = load_benchmark(cfg)
    timings = {}
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint)[0]
    else:
        with Timer() as t:
            base = train_base(bench)
        timings["diffusion_train_s"] = round(t.seconds, 1)
        save_checkpoint(out / "diffusion.gdk", base.params, base.state)
        params = base.params

    with Timer() as t:
        rows = sweep(params, bench.test, bench.sched, inference_noise(bench), cfg.steps, cfg.ensemble_sizes)
    timings["sweep_s"] = round(t.seconds, 1)
    if not args.no_e2e:
        with Timer() as t:
            ft = finetune(bench, params, "zeros")
        timings["finetune_s"] = round(t.seconds, 1)
        save_checkpoint(out / "e2e.gdk", ft.params, ft.state)
        r = single_step(bench, ft.params)
        rows.append(("e2e", 1, 1, r.absrel, r.delta1))

    text = rows_to_csv(REPRO_HEADER, rows)
    (out / "repro_bug.csv").write_text(text)
    (out / "repro_bug.json").write_text(json.dumps(
        {"config": cfg.as_dict(), "timings": timings, "version": __version__}, indent=2) + "\n")
    print(text, end="")


if __name__ == "__main__":
    main()
