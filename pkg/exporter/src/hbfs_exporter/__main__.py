"""CLI: hbfs-export --dataset DIR --out FILE [options]."""

import argparse
import sys
from pathlib import Path

from .config import AugmentParams, ExportConfig
from .export import export_features


def main() -> None:
    parser = argparse.ArgumentParser(
        prog="hbfs-export",
        description="Encode an images/annotations folder into an HBFS feature set.")
    parser.add_argument("--dataset", required=True, type=Path,
                        help="folder with images/ and annotations/ subdirs")
    parser.add_argument("--out", required=True, type=Path)
    parser.add_argument("--encoder", default="linear16-d64",
                        help="linear16-d<D>[-s<seed>] or an .npz checkpoint")
    parser.add_argument("--image-size", type=int, default=64)
    parser.add_argument("--epochs", type=int, default=1,
                        help="augmentation epochs; epoch 1 is unaugmented")
    parser.add_argument("--num-classes", type=int, default=0,
                        help="0 infers from the annotations")
    parser.add_argument("--min-scale", type=float, default=0.5)
    parser.add_argument("--max-scale", type=float, default=2.0)
    parser.add_argument("--jitter-probability", type=float, default=0.5)
    parser.add_argument("--jitter-max", type=float, default=0.1)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    augment = AugmentParams(
        min_scale=args.min_scale, max_scale=args.max_scale,
        brightness_probability=args.jitter_probability,
        contrast_probability=args.jitter_probability,
        saturation_probability=args.jitter_probability,
        hue_probability=args.jitter_probability,
        brightness_max=args.jitter_max, contrast_max=args.jitter_max,
        saturation_max=args.jitter_max, hue_max=args.jitter_max)
    cfg = ExportConfig(dataset=args.dataset, output=args.out,
                       encoder=args.encoder, image_size=args.image_size,
                       epochs=args.epochs, num_classes=args.num_classes,
                       seed=args.seed, augment=augment)
    try:
        path = export_features(cfg)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(1)
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
