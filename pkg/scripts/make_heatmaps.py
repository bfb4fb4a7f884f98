"""Render channel-mean heatmap overlays for a trained checkpoint.

For each image in a dataset directory, writes <out>/<id>_core.png with the
core-node activation map resized to the image and alpha-blended over it.

    python3 scripts/make_heatmaps.py --checkpoint m.ynck --data data/test --out heatmaps/
"""

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from ynet.checkpoint import load_checkpoint
from ynet.data import load_dataset
from ynet.model import feature_heatmap, forward_backbone
from ynet.nn import Tensor


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--data", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--alpha", type=float, default=0.55)
    args = ap.parse_args()

    params = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    size = params.config.input_size

    for sample in load_dataset(args.data):
        core = forward_backbone(params, Tensor(sample.image.astype(params.stem_conv.dtype)), "eval").core
        heat = feature_heatmap(core, size)
        base = (sample.image.transpose(1, 2, 0) * 255).astype(np.uint8)
        overlay = np.zeros_like(base)
        overlay[..., 0] = np.round(255 * heat)
        overlay[..., 1] = np.round(120 * heat)
        blended = np.round((1 - args.alpha * heat[..., None]) * base + args.alpha * heat[..., None] * overlay)
        Image.fromarray(blended.astype(np.uint8)).save(out / f"{sample.id}_core.png")
        print(f"{sample.id}: activation mass at "
              f"({heat.argmax() // size}, {heat.argmax() % size}), peak {heat.max():.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
