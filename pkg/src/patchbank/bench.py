"""Latency and recall sweeps over bank sizes, with CSV and SVG output.

Measures the search-plus-decode path for one dense image (a grid of queries
batched through the decoder), excluding bank and index construction.  Recall
of the quantized index is measured against the exact oracle up to a size
ceiling; beyond it only latency is reported.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .bank import PROVENANCE_DTYPE, MemoryBank
from .decoder import DecodeConfig, decode_features
from .features import SEGMENTATION
from .index import (IndexParams, build_exact, build_quantized, recall_at_k,
                    scaled_params, search_batch)
from .synthetic import synthetic_factors, synthetic_prototypes

RECALL_SIZE_CEILING = 10 ** 6
_BYTES_PER_ROW_FACTOR = 8  # rough float32 keys + codes + scratch per dim


@dataclass
class BenchRow:
    bank_size: int
    index_mode: str
    k: int
    leaves_to_search: int
    reorder_n: int
    mean_latency_us: float
    p50_us: float
    p95_us: float
    recall_at_k: float  # nan when not measured
    seed: int


CSV_FIELDS = [f.name for f in fields(BenchRow)]


def synthetic_bank(size: int, dim: int, num_classes: int, noise: float,
                   seed: int, noise_rank: int = 12,
                   factor_scale: float = 0.3) -> MemoryBank:
    """Class-structured unit keys at scale, built directly in chunks.

    Noise follows the generator's low-rank model (shared factors plus a
    small isotropic residual) so the bench substrate matches the regime the
    quantized index targets; pass noise_rank=0 for isotropic keys.
    """
    protos = synthetic_prototypes(dim, num_classes, seed)
    factors = synthetic_factors(dim, noise_rank, seed) if noise_rank else None
    rng = np.random.default_rng([seed, 0xBE7C])
    keys = np.empty((size, dim), dtype=np.float32)
    values = np.zeros((size, num_classes + 1), dtype=np.float32)
    chunk = 1 << 16
    for start in range(0, size, chunk):
        n = min(chunk, size - start)
        cls = rng.integers(0, num_classes, size=n)
        vec = protos[cls] + noise * rng.standard_normal((n, dim))
        if factors is not None:
            vec += factor_scale * rng.standard_normal((n, noise_rank)) @ factors
        vec /= np.linalg.norm(vec, axis=1, keepdims=True)
        keys[start:start + n] = vec
        values[np.arange(start, start + n), cls] = 1.0
    return MemoryBank(SEGMENTATION, num_classes, keys, values,
                      np.zeros(size, PROVENANCE_DTYPE))


def synthetic_queries(count: int, dim: int, num_classes: int, noise: float,
                      seed: int, noise_rank: int = 12,
                      factor_scale: float = 0.3) -> np.ndarray:
    protos = synthetic_prototypes(dim, num_classes, seed)
    factors = synthetic_factors(dim, noise_rank, seed) if noise_rank else None
    rng = np.random.default_rng([seed, 0x9E77])
    cls = rng.integers(0, num_classes, size=count)
    q = protos[cls] + noise * rng.standard_normal((count, dim))
    if factors is not None:
        q += factor_scale * rng.standard_normal((count, noise_rank)) @ factors
    return (q / np.linalg.norm(q, axis=1, keepdims=True)).astype(np.float32)


def _time_decode(features, index, bank, cfg, repetitions: int) -> list[float]:
    times = []
    for _ in range(repetitions):
        start = time.perf_counter()
        decode_features(features, index, bank, cfg)
        times.append(time.perf_counter() - start)
    return times


def run_latency_sweep(sizes, index_params: IndexParams | None = None,
                      queries_per_size: int = 1024, seed: int = 0,
                      dim: int = 64, num_classes: int = 4, k: int = 30,
                      index_modes: tuple[str, ...] = ("exact", "quantized"),
                      memory_budget_bytes: int = 6 * 10 ** 9,
                      min_measure_seconds: float = 0.1,
                      max_repetitions: int = 16,
                      recall_queries: int = 64) -> list[BenchRow]:
    """One dense-image lookup per bank size and index mode.

    Sizes must be ascending.  Each measurement excludes build time, runs one
    warm-up decode, and repeats until ``min_measure_seconds`` of samples are
    collected (bounded by ``max_repetitions``) so timer resolution never
    dominates.  Recall against the exact oracle is reported for sizes up to
    RECALL_SIZE_CEILING.
    """
    sizes = [int(s) for s in sizes]
    if sizes != sorted(sizes) or any(s < 1 for s in sizes):
        raise ValueError("sizes must be ascending positive integers")
    for size in sizes:
        if size * dim * _BYTES_PER_ROW_FACTOR > memory_budget_bytes:
            raise ValueError(
                f"bank of {size} rows x {dim} dims exceeds the "
                f"{memory_budget_bytes / 1e9:.1f} GB memory budget")

    rows = []
    for size in sizes:
        bank = synthetic_bank(size, dim, num_classes, 0.1, seed)
        # Same seed so queries share the bank's prototypes and noise factors;
        # the internal stream salts differ, so the draws do not overlap.
        queries = synthetic_queries(queries_per_size, dim, num_classes, 0.1,
                                    seed)
        params = index_params if index_params is not None else \
            scaled_params(size, k=k, seed=seed)
        exact_index = build_exact(bank) if (
            "exact" in index_modes or size <= RECALL_SIZE_CEILING) else None
        for mode in index_modes:
            if mode == "exact":
                index, lts, ron = exact_index, 0, 0
            else:
                index = build_quantized(bank, params)
                lts, ron = params.leaves_to_search, params.reorder_n
            cfg = DecodeConfig(k=k, temperature=0.02)
            decode_features(queries[:32], index, bank, cfg)  # warm-up
            reps = 2
            times = _time_decode(queries, index, bank, cfg, reps)
            while sum(times) < min_measure_seconds and len(times) < max_repetitions:
                times += _time_decode(queries, index, bank, cfg, reps)
            lat = np.array(times) * 1e6

            recall = np.nan
            if mode == "quantized" and size <= RECALL_SIZE_CEILING:
                sample = queries[:recall_queries]
                exact_ids, _ = search_batch(exact_index, sample, k)
                approx_ids, _ = search_batch(index, sample, k)
                recall = float(np.mean([
                    recall_at_k(list(a), list(e))
                    for a, e in zip(approx_ids, exact_ids)]))
            elif mode == "exact":
                recall = 1.0

            rows.append(BenchRow(size, mode, k, lts, ron,
                                 float(lat.mean()),
                                 float(np.percentile(lat, 50)),
                                 float(np.percentile(lat, 95)),
                                 recall, seed))
    return rows


def emit_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for row in rows:
        writer.writerow([
            row.bank_size, row.index_mode, row.k, row.leaves_to_search,
            row.reorder_n, f"{row.mean_latency_us:.3f}", f"{row.p50_us:.3f}",
            f"{row.p95_us:.3f}",
            "" if np.isnan(row.recall_at_k) else f"{row.recall_at_k:.6f}",
            row.seed])
    return buf.getvalue()


def write_csv(rows: list[BenchRow], path: str | Path) -> None:
    Path(path).write_text(emit_csv(rows))


def parse_csv(text: str) -> list[BenchRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header != CSV_FIELDS:
        raise ValueError(f"unexpected CSV header {header}")
    rows = []
    for rec in reader:
        rows.append(BenchRow(
            int(rec[0]), rec[1], int(rec[2]), int(rec[3]), int(rec[4]),
            float(rec[5]), float(rec[6]), float(rec[7]),
            float(rec[8]) if rec[8] else np.nan, int(rec[9])))
    return rows


def emit_plot(rows: list[BenchRow], path: str | Path) -> None:
    """Latency-vs-size curves (log-x) as a byte-deterministic SVG, with the
    CSV written alongside."""
    if not rows:
        raise ValueError("no rows to plot")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "patchbank"
    fig, ax = plt.subplots(figsize=(7, 4.5))
    modes = sorted({r.index_mode for r in rows})
    for mode in modes:
        pts = sorted((r.bank_size, r.mean_latency_us / 1000.0)
                     for r in rows if r.index_mode == mode)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=mode)
    ax.set_xscale("log")
    ax.set_xlabel("memory bank length")
    ax.set_ylabel("dense-image lookup latency (ms)")
    ax.set_title("Nearest-neighbor lookup cost vs memory length")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    write_csv(rows, Path(path).with_suffix(".csv"))
