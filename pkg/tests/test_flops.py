import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfgr.flops import (
    CSV_COLUMNS,
    FORMULAS,
    LAYER_FORMULA,
    CostModel,
    inference_length,
    layer_flops,
    layer_terms,
    measure_runtime,
    paradigm_flops,
    ratio_grid,
    grid_csv,
)

GRID = [256, 512, 1024, 2048, 4096, 8192, 16384, 32768]


def brute_layer(T, B, D, H, d):
    return 2 * (4 * B * T * D * D + 2 * B * H * T * T * d + B * T * D * D)


def test_unit_plug_in():
    assert layer_flops(1, CostModel(B=1, N=1, K=1, D=1, H=1, L=1)) == 14


def test_attention_term_quadruples():
    m = CostModel(D=2, H=1)
    a1 = layer_terms(100, m)["attention"]
    a2 = layer_terms(200, m)["attention"]
    assert a2 == 4 * a1
    assert layer_flops(200, m) / layer_flops(100, m) == pytest.approx(4, rel=0.05)


def test_formula_strings():
    assert LAYER_FORMULA == "2*O(4*B*N*D^2 + 2*B*H*N^2*d + B*N*D^2)*L"
    assert FORMULAS["METAGR"]["infer"] == "2*O(4*B*2N*D^2 + 2*B*H*(2N)^2*d + B*2N*D^2) * L"
    assert FORMULAS["DFGR"]["train"] == "2*2*O(4*B*N*D^2 + 2*B*H*N^2*d + B*N*D^2)*L"
    assert FORMULAS["SFGR"]["train"].startswith("\\sum_{i=1}^{N/K}2*O(4*B*i*K*D^2")


def test_cost_model_validation():
    with pytest.raises(ValueError):
        CostModel(D=10, H=4)
    with pytest.raises(ValueError):
        CostModel(N=16, K=32)
    with pytest.raises(ValueError):
        CostModel(B=0)
    with pytest.raises(ValueError):
        layer_terms(0, CostModel())


def test_closed_forms_match_brute_force():
    m = CostModel(B=2, N=64, K=8, D=16, H=2, L=3, m=4)
    r = paradigm_flops(m)
    assert r.costs["METAGR"].forward_flops == 3 * brute_layer(128, 2, 16, 2, 8)
    assert r.costs["DFGR"].forward_flops == 2 * 3 * brute_layer(64, 2, 16, 2, 8)
    assert r.costs["SFGR"].forward_flops == 3 * sum(brute_layer(8 * i, 2, 16, 2, 8) for i in range(1, 9))
    assert r.costs["DFGR"].inference_flops == 3 * brute_layer(68, 2, 16, 2, 8)
    assert r.costs["METAGR"].inference_flops == 3 * brute_layer(132, 2, 16, 2, 8)
    for c in r.costs.values():
        assert c.training_flops == 3 * c.forward_flops


def test_itemization_sums_exactly():
    r = paradigm_flops(CostModel(N=1000, K=10, D=48, H=3, L=2))
    for c in r.costs.values():
        assert sum(c.forward_terms.values()) == c.forward_flops
        assert sum(c.inference_terms.values()) == c.inference_flops


def test_headline_ratios():
    r = paradigm_flops(CostModel(N=4096, K=32, D=64))
    assert 0.45 <= r.train_ratio("DFGR") <= 0.55
    assert 0.23 <= r.infer_ratio("DFGR") <= 0.27
    s = paradigm_flops(CostModel(N=8192, K=32, D=32))
    assert abs(s.train_ratio("SFGR") / s.sfgr_asymptote() - 1) < 0.25


def test_monotone_convergence():
    rows = ratio_grid(GRID, K=32, D=64)
    for key, limit in (("dfgr_train", 0.5), ("dfgr_infer", 0.25), ("sfgr_train_over_asymptote", 1.0)):
        gaps = [abs(r[key] - limit) for r in rows]
        assert all(b < a for a, b in zip(gaps, gaps[1:])), key
        assert gaps[-1] < 0.05


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.sampled_from([1, 2, 4]), st.integers(1, 8), st.integers(1, 64), st.integers(1, 4))
def test_ratios_bounded_property(B, H, dh, K, sessions):
    m = CostModel(B=B, N=K * sessions, K=K, D=H * dh, H=H)
    r = paradigm_flops(m)
    assert r.train_ratio("DFGR") < 1.0
    assert r.infer_ratio("DFGR") < 1.0
    assert r.train_ratio("METAGR") == 1.0


def test_csv_columns():
    text = grid_csv([CostModel(N=256, K=32, D=64)])
    lines = text.strip().splitlines()
    assert lines[0].split(",") == CSV_COLUMNS
    assert [l.split(",")[0] for l in lines[1:]] == ["METAGR", "SFGR", "DFGR"]


def test_report_dict():
    d = paradigm_flops(CostModel()).to_dict()
    assert d["layer_formula"] == LAYER_FORMULA
    assert set(d["paradigms"]) == {"METAGR", "SFGR", "DFGR"}


class TestRuntime:
    def test_zero_trials(self):
        r = measure_runtime(CostModel(N=32, K=8, D=8, H=2), "DFGR", 0)
        assert r.times == [] and r.median is None

    def test_lengths(self):
        m = CostModel(N=100, K=10, m=3)
        assert inference_length(m, "METAGR") == 204
        assert inference_length(m, "DFGR") == 104

    def test_report_carries_analytic_ratio(self):
        m = CostModel(N=64, K=8, D=8, H=2)
        r = measure_runtime(m, "DFGR", 2)
        assert len(r.times) == 2 and r.median > 0
        assert r.analytic_ratio_vs_metagr == paradigm_flops(m).infer_ratio("DFGR")

    def test_shorter_sequence_is_faster(self):
        m = CostModel(N=512, K=32, D=32, H=2, L=2)
        d = measure_runtime(m, "DFGR", 5).median
        g = measure_runtime(m, "METAGR", 5).median
        assert d < g
