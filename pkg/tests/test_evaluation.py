import numpy as np
import pytest
from hypothesis import given, strategies as st

from promptseg.errors import ContractError, DimensionError
from promptseg.evaluation import (
    GAP,
    STRATEGY_ORDER,
    ComparisonMatrix,
    DiceReport,
    FoldReport,
    aggregate_folds,
    build_comparison_matrix,
    class_means,
    dice,
    evaluate,
    fold_detail_table,
    pooled_mean,
    predict_mask,
)
from promptseg.synthcenters import Sample


def set_dice(pred, truth, label):
    """Oracle: Dice from explicit voxel-coordinate sets."""
    P = {tuple(i) for i in np.argwhere(np.asarray(pred) == label)}
    T = {tuple(i) for i in np.argwhere(np.asarray(truth) == label)}
    if not P and not T:
        return 1.0
    return 2 * len(P & T) / (len(P) + len(T))


def test_dice_examples():
    m = np.zeros((4, 4), np.uint8)
    m[0] = 1
    assert dice(m, m, 1) == 1.0
    other = np.zeros_like(m)
    other[3] = 1
    assert dice(m, other, 1) == 0.0
    pred = np.zeros(10, np.uint8)
    truth = np.zeros(10, np.uint8)
    pred[[0, 1, 2, 3]] = 1
    truth[[1, 2, 3, 4, 5, 6]] = 1
    assert dice(pred, truth, 1) == pytest.approx(0.6, abs=1e-15) == set_dice(pred, truth, 1)
    assert dice(np.zeros(3), np.zeros(3), 2) == 1.0
    assert dice(np.zeros(3), np.zeros(3), 2, empty_value=0.0) == 0.0
    with pytest.raises(DimensionError):
        dice(np.zeros(3), np.zeros(4), 1)


def test_dice_random_pairs_match_set_oracle_and_are_bounded_and_symmetric():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        shape = tuple(rng.integers(1, 5, 3))
        a = rng.integers(0, 3, shape)
        b = rng.integers(0, 3, shape)
        for label in (1, 2):
            s = dice(a, b, label)
            assert 0.0 <= s <= 1.0
            assert s == dice(b, a, label)
            assert s == pytest.approx(set_dice(a, b, label), abs=1e-15)


class Oracle:
    """Stand-in model whose logits are fixed arrays."""

    def __init__(self, fn):
        self.fn = fn

    def predict_logits(self, volume):
        return self.fn(volume)


def sample_with_mask(seed=0):
    rng = np.random.default_rng(seed)
    mask = rng.choice(3, size=(6, 6, 6), p=[0.7, 0.2, 0.1]).astype(np.uint8)
    return Sample(rng.standard_normal((2, 6, 6, 6)).astype(np.float32), mask, "c", f"s{seed}")


def test_evaluate_background_model_and_truth_oracle():
    samples = [sample_with_mask(i) for i in range(3)]
    bg = Oracle(lambda v: np.stack([np.ones(v.shape[1:]), np.zeros(v.shape[1:]), np.zeros(v.shape[1:])]))
    assert all(r.scores["GTVp"] == 0.0 for r in evaluate(bg, samples))
    truth = {id(s.volume): s.mask for s in samples}
    perfect = Oracle(lambda v: np.stack([(truth[id(v)] == k).astype(float) for k in range(3)]))
    reports = evaluate(perfect, samples)
    assert all(r.scores == {"GTVp": 1.0, "GTVn": 1.0} for r in reports)
    assert [r.sample_id for r in reports] == ["s0", "s1", "s2"]


def test_report_mean_and_pooling():
    r = DiceReport({"GTVp": 0.2, "GTVn": 0.6})
    assert r.mean == pytest.approx(0.4)
    reports = [r, DiceReport({"GTVp": 1.0, "GTVn": 0.0})]
    assert pooled_mean(reports) == pytest.approx(0.45)
    assert class_means(reports) == {"GTVp": pytest.approx(0.6), "GTVn": pytest.approx(0.3)}
    with pytest.raises(ContractError):
        pooled_mean([])


def test_argmax_ties_go_to_lowest_class():
    logits = np.zeros((3, 2, 2, 2))
    logits[2, 0, 0, 0] = 1
    m = predict_mask(logits)
    assert m[0, 0, 0] == 2 and m[1, 1, 1] == 0


def test_evaluate_is_reproducible():
    samples = [sample_with_mask(4)]
    model = Oracle(lambda v: np.concatenate([v, v[:1] * 0.5]))
    a, b = evaluate(model, samples), evaluate(model, samples)
    assert a[0].scores == b[0].scores


# -- fold aggregation ----------------------------------------------------------------


def test_published_five_fold_row_fixes_sample_std():
    folds = [0.6112, 0.7442, 0.6399, 0.6919, 0.6663]
    mu, sd = aggregate_folds(folds)
    assert abs(mu - 0.6708) < 1e-3
    assert abs(sd - 0.0509) < 1e-3
    _, pop = aggregate_folds(folds, ddof=0)
    assert abs(pop - 0.0509) > 1e-3


def test_aggregation_edges():
    assert aggregate_folds([0.5, 0.5, 0.5]) == (0.5, 0.0)
    assert aggregate_folds([0.25, 0.75])[0] == 0.5
    assert aggregate_folds([0.3]) == (0.3, 0.0)
    with pytest.raises(ContractError):
        aggregate_folds([])


@given(
    st.lists(st.floats(0, 1), min_size=2, max_size=8),
    st.floats(-10, 10).filter(lambda v: abs(v) > 1e-3),
)
def test_aggregation_is_linear(values, lam):
    mu, sd = aggregate_folds(values)
    mu2, sd2 = aggregate_folds([lam * v for v in values])
    assert mu2 == pytest.approx(lam * mu, rel=1e-9, abs=1e-12)
    assert sd2 == pytest.approx(abs(lam) * sd, rel=1e-9, abs=1e-12)


# -- comparison matrix ---------------------------------------------------------------


def fold_report(center, strategy, fold, old, new):
    return FoldReport(center, strategy, fold, old, new, {"GTVp": new, "GTVn": new}, ["a"], ["b"], 10)


def full_reports():
    rng = np.random.default_rng(0)
    return [
        fold_report(c, s, f, float(rng.random()), float(rng.random()))
        for c in ("center7", "center3")
        for s in reversed(STRATEGY_ORDER)
        for f in range(5)
    ]


def test_single_strategy_single_fold_echoes_means():
    m = build_comparison_matrix([fold_report("c", "deep_prompt", 0, 0.61, 0.42)])
    assert m.header() == ["center", "deep_prompt_old", "deep_prompt_new_mean", "deep_prompt_new_std"]
    assert m.cell("c", "deep_prompt") == (0.61, 0.42, 0.0, 1)


def test_columns_follow_table_order():
    m = build_comparison_matrix(full_reports(), centers=["center7", "center3"])
    assert m.strategies == list(STRATEGY_ORDER)
    assert m.complete


def test_cells_aggregate_exactly_k_folds():
    reports = full_reports()
    m = build_comparison_matrix(reports, expected_folds=5)
    sel = [r.new_center_mean for r in reports if r.center == "center3" and r.strategy == "full"]
    assert m.cell("center3", "full")[1:] == (pytest.approx(np.mean(sel)), pytest.approx(np.std(sel, ddof=1)), 5)


def test_missing_fold_is_a_gap_not_an_omission():
    reports = [r for r in full_reports() if not (r.strategy == "partial" and r.fold == 2 and r.center == "center7")]
    m = build_comparison_matrix(reports, expected_folds=5)
    assert m.cell("center7", "partial") is None
    assert not m.complete
    row = next(r for r in m.rows() if r[0] == "center7")
    assert row[4:7] == [GAP] * 3
    table = fold_detail_table(reports, "center7")
    assert table[3][table[0].index("partial")] == GAP


def test_csv_round_trip(tmp_path):
    m = build_comparison_matrix(full_reports(), expected_folds=5)
    again = ComparisonMatrix.from_csv(m.to_csv())
    assert again.same_values(m)
    path = tmp_path / "m.csv"
    m.to_csv(path)
    assert ComparisonMatrix.from_csv(str(path)).to_csv() == m.to_csv()
    gap = build_comparison_matrix(full_reports()[:-1], expected_folds=5)
    assert ComparisonMatrix.from_csv(gap.to_csv()).same_values(gap)


def test_fold_detail_layout():
    table = fold_detail_table(full_reports(), "center7")
    assert table[0] == ["fold"] + list(STRATEGY_ORDER)
    assert [r[0] for r in table[1:]] == ["1", "2", "3", "4", "5", "mean+-std"]
    assert "+-" in table[-1][1]


def test_fold_report_json_round_trip(tmp_path):
    r = fold_report("c", "full", 3, 0.5, 0.25)
    r.to_json(tmp_path / "r.json")
    assert FoldReport.from_json(tmp_path / "r.json") == r
