from fractions import Fraction

import numpy as np
import pytest

from crossprune.cost_model import (
    flops_cross,
    flops_prune,
    flops_self,
    heatmap,
    heatmap_csv,
    reduction_ratio,
    verify_counter,
)
from crossprune.model import ModelConfig, PruneConfig, build_model, generate, make_inputs
from crossprune.trimming import baseline_spatial

R_GRID = [round(0.1 * i, 1) for i in range(1, 11)]
N_GRID = [16 * 2**i for i in range(9)]  # 16 .. 4096


def test_flops_self_example():
    assert flops_self(8, 4, 8) == 1536
    assert flops_self(0, 4, 8) == 0


def test_flops_self_score_term_linear_in_d():
    # isolate 2n^2d by differencing out the other terms
    n, m = 64, 1
    term = lambda d: flops_self(n, d, m) - 4 * n * d * d - 2 * n * d * m
    assert term(8) == 2 * term(4)


def test_flops_cross_examples():
    assert flops_cross(8, 16, 4, 8) == 2304
    assert flops_cross(8, 0, 4, 8) == 2 * 8 * 16 + 2 * 8 * 4 * 8
    assert flops_cross(8, 16, 4, 8) == flops_prune(8, 16, 1, 4, 8)


def test_flops_prune_examples():
    assert flops_prune(8, 16, Fraction(1, 2), 4, 8) == 1536
    assert flops_prune(8, 16, 0.5, 4, 8) == 1536
    values = [flops_prune(8, 16, Fraction(k, 16), 4, 8) for k in range(1, 17)]
    assert all(a < b for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        flops_prune(8, 16, 0, 4, 8)


def test_flops_are_exact_wide_integers():
    big = flops_self(10**6, 10**5, 10**6)
    assert isinstance(big, int) and big == 4 * 10**16 + 2 * 10**17 + 2 * 10**17


def test_reduction_ratio_edge_cases():
    assert reduction_ratio(8, 4, 128, 1601, 1, 256, 512) == 0.0
    assert reduction_ratio(8, 4, 128, 1601, 1.0, 256, 512) == 0.0
    for R in (0.1, 0.5, 0.9):
        assert reduction_ratio(8, 1, 128, 1601, R, 256, 512) == 0.0


def test_reduction_ratio_decreases_in_n():
    # sweep oracle: evaluate the closed form directly in floats
    S, C, n_k, d, m, R = 32, 8, 1601, 4096, 14336, 0.5
    def direct(n):
        fs = 4*n*d*d + 2*n*n*d + 2*n*d*m
        fc = 2*n*d*d + 2*n_k*d*d + 2*n*n_k*d + 2*n*d*m
        fp = 2*n*d*d + 2*n_k*R*d*d + 2*n*n_k*R*d + 2*n*d*m
        return 1 - (S*fs + fc + (C-1)*fp) / (S*fs + C*fc)
    ns = list(range(16, 4097, 16))
    vals = [reduction_ratio(S, C, n, n_k, R, d, m) for n in ns]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert np.allclose(vals, [direct(n) for n in ns], rtol=1e-12)


def test_heatmap_shape_and_monotonicity():
    rows = heatmap(R_GRID, N_GRID, S=8, C=4, n_k=1601, d=256, m=512)
    grid = np.array([r["reduction_ratio"] for r in rows]).reshape(len(R_GRID), len(N_GRID))
    assert np.all(grid[-1] == 0.0)
    assert np.all(np.diff(grid, axis=1) <= 0)
    assert np.all(np.diff(grid, axis=0) <= 0)
    assert np.all((grid >= 0) & (grid < 1))


def test_heatmap_csv_order():
    text = heatmap_csv(heatmap([0.5, 1.0], [16, 32], S=2, C=2, n_k=10, d=4, m=8))
    lines = text.strip().split("\n")
    assert lines[0] == "R,n,reduction_ratio"
    assert [l.split(",")[:2] for l in lines[1:]] == [["0.5", "16"], ["0.5", "32"], ["1.0", "16"], ["1.0", "32"]]


TOY = ModelConfig(d=8, m=16, n_heads=2, n_kv_heads=2, S=2, C=2)


def _toy_report(prune=PruneConfig(), selection=None, steps=0):
    model = build_model(TOY)
    text, img = make_inputs(TOY, 4, 8, seed=3)
    return generate(model, text, img, prune, steps=steps, selection=selection)[1]


def test_verify_counter_unpruned():
    rep = _toy_report()
    v = verify_counter(rep)
    assert v.ok
    assert v.measured_total == 2 * flops_self(4, 8, 16) + 2 * flops_cross(4, 8, 8, 16)


def test_verify_counter_lossless_trim_identical():
    a = _toy_report().measured
    b = _toy_report(PruneConfig("trimmed", 1.0)).measured
    assert a == b


def test_verify_counter_half_kept():
    rep = _toy_report(selection=baseline_spatial(8, 0.5, 2))
    v = verify_counter(rep)
    expected = 2 * flops_self(4, 8, 16) + flops_cross(4, 8, 8, 16) + flops_prune(4, 8, Fraction(4, 8), 8, 16)
    assert v.ok and v.measured_total == expected


def test_verify_counter_covers_decode_steps():
    rep = _toy_report(PruneConfig("trimmed", 0.25), steps=3)
    assert verify_counter(rep).ok
    assert rep.measured["decode_total"] == rep.analytic["decode_total"]


def test_generate_without_steps_has_no_decode_flops():
    rep = _toy_report()
    assert rep.measured["decode_total"] == 0 and rep.analytic["decode_total"] == 0


def test_verify_counter_detects_mismatch():
    rep = _toy_report()
    rep.counter.add(("prefill", 0, "self", "ffn"), 1)
    v = verify_counter(rep)
    assert not v.ok and v.mismatches[0]["layer"] == 0
