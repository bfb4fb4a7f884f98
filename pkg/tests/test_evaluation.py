"""AP / mAP / stage gap against a brute-force oracle, benchmark plumbing."""

import numpy as np
import pytest

from ynet.errors import YNetError
from ynet.evaluation import average_precision, mean_ap, run_benchmark, stage_gap
from ynet.model import YNetConfig, build_model


def ap_oracle(rel, r_total):
    """Second independent implementation, cumulative-sum style."""
    rel = np.asarray(rel, dtype=float)
    n = len(rel)
    r = min(r_total, n)
    if r == 0:
        return 0.0
    precision_at = np.cumsum(rel) / np.arange(1, n + 1)
    return float((precision_at * rel).sum() / r)


def test_perfect_ranking():
    assert average_precision([1, 1, 1], 3) == 1.0


def test_interleaved_ranking():
    assert abs(average_precision([1, 0, 1], 2) - (1 + 2 / 3) / 2) < 1e-12


def test_late_hit():
    assert abs(average_precision([0, 1], 1) - 0.5) < 1e-12


def test_no_relevant_in_gallery():
    assert average_precision([0, 0, 0], 0) == 0.0


def test_r_capped_at_list_length():
    # 10 relevant in the gallery but only 3 positions: perfect prefix is 1.0
    assert average_precision([1, 1, 1], 10) == 1.0


def test_matches_oracle_random(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        rel = (rng.random(n) > 0.6).astype(int).tolist()
        r_total = int(rng.integers(0, 40))
        assert abs(average_precision(rel, r_total) - ap_oracle(rel, r_total)) < 1e-12


def test_tail_permutation_invariance(rng):
    for _ in range(100):
        n = int(rng.integers(2, 20))
        rel = (rng.random(n) > 0.5).astype(int).tolist()
        if 1 not in rel:
            continue
        last = max(i for i, r in enumerate(rel) if r)
        tail = rel[last + 1 :]
        rng.shuffle(tail)
        permuted = rel[: last + 1] + list(tail)
        r_total = int(rng.integers(1, 25))
        assert average_precision(permuted, r_total) == average_precision(rel, r_total)


def test_prefix_monotonicity(rng):
    for _ in range(200):
        n = int(rng.integers(1, 15))
        rel = (rng.random(n) > 0.5).astype(int).tolist()
        r_total = int(rng.integers(1, 20))
        with_rel = average_precision([1] + rel, r_total)
        with_irr = average_precision([0] + rel, r_total)
        base = average_precision(rel, r_total)
        assert with_rel >= base - 1e-12
        assert with_irr <= base + 1e-12


def test_mean_ap():
    assert mean_ap([([1, 1], 2), ([0, 1], 1)], 2) == pytest.approx(0.75)
    assert mean_ap([([0, 0], 5), ([0], 1)], 2) == 0.0


def test_mean_ap_empty_rejected():
    with pytest.raises(YNetError):
        mean_ap([], 10)


def test_stage_gap():
    assert stage_gap(0.6, [0.5, 0.7]) == pytest.approx(0.1)
    assert stage_gap(0.4, [0.4, 0.4]) == 0.0
    with pytest.raises(YNetError):
        stage_gap(0.5, [])


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_model():
    return build_model(YNetConfig.tiny(num_classes=2), seed=9)


def test_benchmark_table_shape(tiny_model, dpsd_samples):
    gallery, queries = dpsd_samples[:12], dpsd_samples[12:]
    report = run_benchmark(tiny_model, gallery, queries, [36, 64], [5, 10])
    assert len(report.rows) == 4
    keys = {(r.code_length, r.cutoff) for r in report.rows}
    assert keys == {(36, 5), (36, 10), (64, 5), (64, 10)}
    for r in report.rows:
        assert 0.0 <= r.map <= 1.0
        assert np.isfinite(r.stage_gap)


def test_benchmark_full_grid_is_16_cells(tiny_model, dpsd_samples):
    report = run_benchmark(tiny_model, dpsd_samples[:12], dpsd_samples[12:], [36, 64, 128, 256], [5, 10, 20, 50])
    assert len(report.rows) == 16
    assert len(report.to_csv().strip().splitlines()) == 17


def test_benchmark_csv_fixed_format(tiny_model, dpsd_samples):
    report = run_benchmark(tiny_model, dpsd_samples[:12], dpsd_samples[12:], [64], [5])
    lines = report.to_csv().strip().splitlines()
    assert lines[0] == "code_length,cutoff,map,stage_gap"
    fields = lines[1].split(",")
    assert fields[0] == "64" and fields[1] == "5"
    assert len(fields[2].split(".")[1]) == 6  # six decimals


def test_benchmark_deterministic(tiny_model, dpsd_samples):
    a = run_benchmark(tiny_model, dpsd_samples[:12], dpsd_samples[12:], [64], [10]).to_csv()
    b = run_benchmark(tiny_model, dpsd_samples[:12], dpsd_samples[12:], [64], [10]).to_csv()
    assert a == b


def test_query_identical_to_gallery_item_ap1(tiny_model, dpsd_samples):
    gallery = dpsd_samples[:12]
    queries = [gallery[3]]  # same image appears in gallery -> distance 0 hit
    report = run_benchmark(tiny_model, gallery, queries, [64], [1])
    assert report.rows[0].map == 1.0
