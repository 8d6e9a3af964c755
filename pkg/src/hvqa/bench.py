"""Timing harness for the selection + aggregation stage.

For each aggregator and each k, a random ``[w, h, d]`` map goes through
presence, top-k selection, gathering and aggregation, then the backward
pass of a scalar readout. That is the per-step cost hard attention is
meant to reduce. A ``none`` row per aggregator aggregates all ``n`` cells
with no selection step as the no-attention reference.
"""

from __future__ import annotations

import csv
import math
import time
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr
from threadpoolctl import threadpool_limits

from . import tensor as T
from .aggregation import NonLocalPairwise, RelationNetwork, count_pair_flops, sum_pool
from .attention import select_han
from .errors import FormatError
from .tensor import Tensor

AGGREGATOR_NAMES = ("sum", "pairwise", "rn")
BENCH_COLUMNS = (
    "aggregator", "selection", "k", "n", "d", "heads", "reps",
    "median_ms", "p10_ms", "p90_ms", "predicted_flops",
)


@dataclass
class BenchRow:
    aggregator: str
    selection: str
    k: int
    n: int
    d: int
    heads: int
    reps: int
    median_ms: float
    p10_ms: float
    p90_ms: float
    predicted_flops: int

    def values(self):
        return [getattr(self, c) for c in BENCH_COLUMNS]


def grid_for(n: int) -> tuple[int, int]:
    """Most nearly square ``w x h = n`` factorization."""
    w = int(math.isqrt(n))
    while n % w:
        w -= 1
    return w, n // w


def predicted_flops(aggregator: str, k: int, d: int, heads: int, rn_hidden: int, rn_layers: int) -> int:
    if aggregator == "sum":
        return k * d
    f = count_pair_flops(k, d, heads, q_dim=d, rn_hidden=rn_hidden, rn_layers=rn_layers)
    return f["pairwise_flops"] if aggregator == "pairwise" else f["relation_flops"]


def _timed(fn, reps: int, warmup: int) -> np.ndarray:
    for _ in range(warmup):
        fn()
    out = np.empty(reps)
    for i in range(reps):
        t0 = time.perf_counter()
        fn()
        out[i] = time.perf_counter() - t0
    return out * 1000


def run_bench(
    k_list,
    n: int = 64,
    d: int = 512,
    heads: int = 2,
    reps: int = 20,
    warmup: int = 3,
    aggregators=AGGREGATOR_NAMES,
    seed: int = 0,
    rn_hidden: int = 256,
    rn_layers: int = 4,
    threads: int | None = 1,
) -> list[BenchRow]:
    """Time every aggregator at every ``k`` plus one unselected ``k = n`` reference."""
    k_list = [int(k) for k in k_list]
    if any(k < 1 or k > n for k in k_list):
        raise ValueError(f"every k must lie in [1, {n}], got {k_list}")
    unknown = set(aggregators) - set(AGGREGATOR_NAMES)
    if unknown:
        raise ValueError(f"unknown aggregators {sorted(unknown)}")
    w, h = grid_for(n)
    rng = np.random.default_rng(seed)
    m = Tensor(rng.standard_normal((w, h, d)).astype(np.float32), requires_grad=True)
    q = Tensor(rng.standard_normal(d).astype(np.float32))
    mods = {
        "pairwise": NonLocalPairwise(d, heads, max(d // heads, 1), rng),
        "rn": RelationNetwork(d, d, rn_hidden, rn_layers, d, rng),
    }

    def aggregate(name, rows):
        if name == "sum":
            return sum_pool(rows)
        if name == "pairwise":
            return mods["pairwise"](rows)
        return mods["rn"](rows, q)

    def step(name, k):
        m.grad = None
        rows = select_han(m, k)[1] if k is not None else m.reshape(n, d)
        T.backward(aggregate(name, rows).sum())

    rows = []
    with threadpool_limits(threads) if threads else nullcontext():
        for name in aggregators:
            for k in [*k_list, None]:
                ms = _timed(lambda: step(name, k), reps, warmup)
                kk = n if k is None else k
                rows.append(BenchRow(
                    name, "none" if k is None else "han", kk, n, d, heads, reps,
                    float(np.median(ms)), float(np.percentile(ms, 10)), float(np.percentile(ms, 90)),
                    int(predicted_flops(name, kk, d, heads, rn_hidden, rn_layers)),
                ))
    return rows


def speedup(rows, aggregator: str, k_small: int, k_large: int) -> float:
    """Median-time ratio between two selected sizes of one aggregator."""
    t = {r.k: r.median_ms for r in rows if r.aggregator == aggregator and r.selection == "han"}
    return t[k_large] / t[k_small]


def rank_agreement(rows, aggregator: str) -> float:
    """Spearman correlation between predicted flops and median time over the selected rows."""
    sel = sorted((r for r in rows if r.aggregator == aggregator and r.selection == "han"), key=lambda r: r.k)
    if len(sel) < 2:
        return float("nan")
    rho = spearmanr([r.predicted_flops for r in sel], [r.median_ms for r in sel]).statistic
    return float(rho)


def format_table(rows) -> str:
    head = f"{'aggregator':<10} {'sel':<5} {'k':>4} {'n':>4} {'median ms':>10} {'p10':>9} {'p90':>9} {'pred GFLOP':>11}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r.aggregator:<10} {r.selection:<5} {r.k:>4} {r.n:>4} {r.median_ms:>10.3f} "
            f"{r.p10_ms:>9.3f} {r.p90_ms:>9.3f} {r.predicted_flops / 1e9:>11.4f}"
        )
    lines.append("")
    for name in dict.fromkeys(r.aggregator for r in rows):
        ks = sorted(r.k for r in rows if r.aggregator == name and r.selection == "han")
        line = f"{name}: spearman(flops, time) = {rank_agreement(rows, name):.3f}"
        if len(ks) >= 2:
            line += f"; speedup k={ks[0]} vs k={ks[-1]}: {speedup(rows, name, ks[0], ks[-1]):.2f}x"
        lines.append(line)
    return "\n".join(lines) + "\n"


def write_csv(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r.values()])


def read_csv(path) -> list[BenchRow]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != BENCH_COLUMNS:
            raise FormatError(f"unexpected bench columns {reader.fieldnames}", 0)
        out = []
        for r in reader:
            out.append(BenchRow(
                r["aggregator"], r["selection"], int(r["k"]), int(r["n"]), int(r["d"]), int(r["heads"]),
                int(r["reps"]), float(r["median_ms"]), float(r["p10_ms"]), float(r["p90_ms"]),
                int(r["predicted_flops"]),
            ))
    return out


def save_report(rows, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, txt_path = out / "bench.csv", out / "bench.txt"
    write_csv(rows, csv_path)
    txt_path.write_text(format_table(rows))
    return csv_path, txt_path
