"""End-to-end experiment: synthesize data, train, hash, index, evaluate.

Writes everything under --workdir and prints the benchmark table. The
--ablation flag also trains the classification-only variant so the two
can be compared like-for-like.

    python3 scripts/run_pipeline.py --workdir /tmp/exp --epochs 50 --ablation
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from ynet.checkpoint import save_checkpoint
from ynet.data import load_dataset, synth_generate
from ynet.evaluation import run_benchmark
from ynet.model import YNetConfig, build_model
from ynet.trainer import TrainConfig, classification_accuracy, pixel_accuracy, train


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--scenario", default="dpsd", choices=["dpsd", "spdd"])
    ap.add_argument("--n-train", type=int, default=200)
    ap.add_argument("--n-test", type=int, default=20)
    ap.add_argument("--image-size", type=int, default=64)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--lr", type=float, default=0.015)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--code-lengths", default="36,64,128,256")
    ap.add_argument("--cutoffs", default="5,10,20,50")
    ap.add_argument("--ablation", action="store_true", help="also train without the segmentation branch")
    args = ap.parse_args()

    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    synth_generate(args.scenario, args.n_train, args.image_size, args.seed * 2, work / "train")
    synth_generate(args.scenario, args.n_test, args.image_size, args.seed * 2 + 1, work / "test")
    gallery = load_dataset(work / "train")
    queries = load_dataset(work / "test")
    cfg = YNetConfig(num_classes=max(s.label for s in gallery) + 1, input_size=args.image_size)
    tcfg = TrainConfig(epochs=args.epochs, seed=args.seed, batch_size=min(32, len(gallery)), lr=args.lr)
    ks = [int(x) for x in args.code_lengths.split(",")]
    cuts = [int(x) for x in args.cutoffs.split(",")]

    def run(branches: str, tag: str):
        import dataclasses

        params = build_model(cfg, seed=args.seed)
        t0 = time.time()
        train(params, gallery, dataclasses.replace(tcfg, branches=branches))
        print(f"[{tag}] trained in {time.time() - t0:.0f}s; "
              f"test cls acc {classification_accuracy(params, queries):.3f}, "
              f"test pixel acc {pixel_accuracy(params, queries):.3f}")
        save_checkpoint(params, work / f"{tag}.ynck")
        report = run_benchmark(params, gallery, queries, ks, cuts)
        (work / f"report_{tag}.csv").write_text(report.to_csv())
        print(report.to_csv())
        return report

    full = run("both", "full")
    if args.ablation:
        cls = run("rmac_only", "rmac_only")
        pick = lambda rep: next(r for r in rep.rows if r.cutoff == 10 and r.code_length == 64)
        f, c = pick(full), pick(cls)
        print(f"mAP@10 k=64: full {f.map:.4f} vs rmac-only {c.map:.4f}; "
              f"stage gap {f.stage_gap:.4f} vs {c.stage_gap:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
