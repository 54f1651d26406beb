"""Input-noise ablation for end-to-end fine-tuning.

Fine-tunes the diffusion checkpoint once per noise kind (gaussian, pyramid,
zeros), runs single-step trailing inference with the same kind of noise, and
writes ``noise_ablation.csv`` (noise, absrel, delta1).

    python3 scripts/noise_ablation.py --checkpoint reports/repro/diffusion.gdk
"""
import argparse
import logging
from pathlib import Path

from geodiff.checkpoint import load_checkpoint
from geodiff.cli import rows_to_csv
from geodiff.experiments import BenchmarkConfig, finetune, load_benchmark, single_step, train_base


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="reports/ablation")
    ap.add_argument("--checkpoint", help="diffusion checkpoint; trained from scratch when omitted")
    ap.add_argument("--kinds", default="gaussian,pyramid,zeros")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    bench = load_benchmark(BenchmarkConfig())
    params = load_checkpoint(args.checkpoint)[0] if args.checkpoint else train_base(bench).params
    rows = []
    for kind in args.kinds.split(","):
        ft = finetune(bench, params, kind)
        r = single_step(bench, ft.params, kind)
        rows.append((kind, r.absrel, r.delta1))
        logging.info("%s: absrel %.5f delta1 %.2f", kind, r.absrel, r.delta1)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = rows_to_csv(("noise", "absrel", "delta1"), rows)
    (out / "noise_ablation.csv").write_text(text)
    print(text, end="")


if __name__ == "__main__":
    main()
