"""The binary containers and the command-line surface.

Three little-endian containers carry everything between stages:

  HBFS  feature sets   magic "HBFS0001"  features + pixel labels, per epoch
  HBMB  memory banks   magic "HBMB0001"  keys, values, provenance
                                         (+ optional "HBIX0001" index tail)
  HBPR  predictions    magic "HBPR0001"  class maps or depth rasters

The same flow is scriptable through the `patchbank` CLI; this demo drives
both and shows they agree byte for byte.
"""

import tempfile
from pathlib import Path

import numpy as np

from patchbank import (DecodeConfig, SamplerConfig, build_bank, build_exact,
                       generate_synthetic_scene_set, predict_image, read_bank,
                       read_feature_set, write_bank, write_feature_set)
from patchbank.cli import run_cli
from patchbank.decoder import read_predictions, write_predictions

work = Path(tempfile.mkdtemp(prefix="patchbank-demo-"))
print(f"working in {work}\n")

# --- library route ----------------------------------------------------------
fset = generate_synthetic_scene_set(6, 4, 4, 16, 4, 0.1, seed=21)
write_feature_set(fset, work / "lib.hbfs")
back = read_feature_set(work / "lib.hbfs")
grid0 = fset.epochs[0][0][0]
print(f"HBFS round-trip bit-exact: "
      f"{np.array_equal(back.epochs[0][0][0].features, grid0.features)}")

bank = build_bank(fset, SamplerConfig(capacity=10_000, downsample=False))
write_bank(bank, work / "lib.hbmb")
bank2, tail = read_bank(work / "lib.hbmb")
print(f"HBMB round-trip: {np.array_equal(bank2.keys, bank.keys)} "
      f"(rows {len(bank2)}, index tail {len(tail)} bytes)")

index = build_exact(bank)
preds = [predict_image(g, index, bank, DecodeConfig(k=1))
         for g, _ in fset.epochs[0]]
write_predictions(preds, work / "lib.hbpr", with_distributions=True)
loaded = read_predictions(work / "lib.hbpr")
print(f"HBPR round-trip: {np.array_equal(loaded[0].class_map, preds[0].class_map)}")

# --- CLI route --------------------------------------------------------------
print("\nsame flow through the CLI:")
for argv in (
    ["synth", "--out", str(work / "cli.hbfs"), "--images", "6", "--height",
     "4", "--width", "4", "--dim", "16", "--classes", "4", "--seed", "21"],
    ["build-bank", "--features", str(work / "cli.hbfs"), "--out",
     str(work / "cli.hbmb"), "--memory-size", "10000", "--no-downsample",
     "--aug-epochs", "1"],
    ["decode", "--features", str(work / "cli.hbfs"), "--bank",
     str(work / "cli.hbmb"), "--out", str(work / "cli.hbpr"), "--k", "1",
     "--emit-distributions"],
    ["eval", "--features", str(work / "cli.hbfs"), "--bank",
     str(work / "cli.hbmb"), "--k", "1"],
):
    print(f"$ patchbank {' '.join(argv[:2])} ...")
    code = run_cli(argv)
    assert code == 0, code

print(f"\nCLI artifacts match the library's:")
print(f"  HBFS identical: {(work / 'cli.hbfs').read_bytes() == (work / 'lib.hbfs').read_bytes()}")
print(f"  HBMB identical: {(work / 'cli.hbmb').read_bytes() == (work / 'lib.hbmb').read_bytes()}")
print(f"  HBPR identical: {(work / 'cli.hbpr').read_bytes() == (work / 'lib.hbpr').read_bytes()}")
