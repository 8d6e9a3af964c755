import numpy as np
import pytest

from hvqa.bench import (
    BENCH_COLUMNS,
    format_table,
    grid_for,
    predicted_flops,
    rank_agreement,
    read_csv,
    run_bench,
    save_report,
    speedup,
)


@pytest.fixture(scope="module")
def rows():
    return run_bench([2, 4, 8], n=16, d=32, heads=2, reps=3, warmup=1, rn_hidden=16, rn_layers=2)


def test_grid_for():
    assert grid_for(64) == (8, 8) and grid_for(16) == (4, 4) and grid_for(12) == (3, 4)


def test_rows_cover_every_aggregator(rows):
    assert len(rows) == 3 * 4
    for name in ("sum", "pairwise", "rn"):
        ks = [(r.selection, r.k) for r in rows if r.aggregator == name]
        assert ks == [("han", 2), ("han", 4), ("han", 8), ("none", 16)]
    assert all(r.p10_ms <= r.median_ms <= r.p90_ms for r in rows)


def test_csv_round_trip(rows, tmp_path):
    csv_path, txt_path = save_report(rows, tmp_path)
    assert read_csv(csv_path) == rows
    assert csv_path.read_text().splitlines()[0] == ",".join(BENCH_COLUMNS)
    assert txt_path.read_text() == format_table(rows)


def test_predicted_flops_monotone():
    for name in ("sum", "pairwise", "rn"):
        vals = [predicted_flops(name, k, 512, 2, 256, 4) for k in (8, 16, 32, 64)]
        assert vals == sorted(vals)


def test_speedup_and_rank(rows):
    assert speedup(rows, "rn", 2, 8) > 0
    rho = rank_agreement(rows, "rn")
    assert -1 <= rho <= 1


def test_invalid_k():
    with pytest.raises(ValueError):
        run_bench([0], n=16, d=8)
    with pytest.raises(ValueError):
        run_bench([17], n=16, d=8)


def test_full_selection_close_to_reference():
    rows = run_bench([16], n=16, d=64, heads=2, reps=15, warmup=3, aggregators=("pairwise",))
    han, ref = rows
    # the han row also pays for presence and top-k on 16 cells
    assert han.predicted_flops == ref.predicted_flops
    assert 0.5 < han.median_ms / ref.median_ms < 3
