import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from earlypred import evaluation as E
from earlypred.data import Dataset, FeatureSequence, SynthSpec, expand_views, synthesize
from earlypred.model import ModelBundle, ModelDims, predict


def _ds(labels, K=4, d=2, C=3, ids=None, seed=0):
    rng = np.random.default_rng(seed)
    ids = range(len(labels)) if ids is None else ids
    return Dataset([FeatureSequence(i, int(y), rng.normal(size=(K, d))) for i, y in zip(ids, labels)], C, K, d)


def _perfect(ds):
    labels = ds.labels()

    def scorer(raw):
        # labels recovered from a tag smuggled into the data by the caller
        K, N = raw.shape[1], raw.shape[0]
        return np.broadcast_to(np.eye(ds.n_classes)[labels][None], (K, N, ds.n_classes)).copy()

    return scorer


def test_ratio_to_level():
    assert [E.ratio_to_level(r, 10) for r in (0.1, 0.3, 0.5, 1.0)] == [1, 3, 5, 10]
    assert E.ratio_to_level(0.01, 10) == 1
    assert E.ratio_to_level(0.5, 3) == 2  # round half to even: 1.5 -> 2
    with pytest.raises(E.EvaluationError):
        E.ratio_to_level(0.0, 10)


def test_perfect_predictor():
    ds = _ds([0, 1, 2, 1, 0, 2], K=5)
    rep = E.evaluate(_perfect(ds), ds)
    assert np.all(rep.accuracy == 1.0) and rep.average == 1.0
    for k in range(5):
        assert np.array_equal(rep.confusion[k], np.diag([2, 2, 2]))


def test_uniform_random_predictor_binomial():
    rng = np.random.default_rng(0)
    labels = np.arange(800) % 8
    ds = _ds(labels, K=3, C=8)
    rep = E.evaluate(lambda raw: rng.random((3, raw.shape[0], 8)), ds)
    for a in rep.accuracy:
        assert abs(a - 0.125) <= 0.035


def test_hand_built_fixture():
    # 4 sequences, K=2, C=3 with hand-picked predictions
    labels = np.array([0, 1, 2, 1])
    preds = np.array([[0, 2, 2, 1],
                      [0, 1, 2, 0]])
    rep = E.evaluate_predictions(preds, labels, 3)
    assert rep.accuracy.tolist() == [0.75, 0.75]
    assert rep.confusion[0].tolist() == [[1, 0, 0], [0, 1, 1], [0, 0, 1]]
    assert rep.confusion[1].tolist() == [[1, 0, 0], [1, 1, 0], [0, 0, 1]]
    assert rep.class_accuracy[:, 0].tolist() == [1.0, 0.5, 1.0]
    np.testing.assert_allclose(rep.class_mean_accuracy, [5 / 6, 5 / 6])


def test_ties_go_to_lowest_index():
    scores = np.array([[[0.4, 0.4, 0.2]]])
    assert E.evaluate_scores(scores, np.array([0]), 3).accuracy[0] == 1.0
    assert E.evaluate_scores(scores, np.array([1]), 3).accuracy[0] == 0.0


def test_empty_set_rejected():
    with pytest.raises(E.EvaluationError):
        E.evaluate(lambda raw: raw, Dataset([], 3, 4, 2))


def test_dimension_mismatch_rejected():
    b = ModelBundle.create(ModelDims(d_raw=3, n_classes=3, n_segments=4), "scp")
    with pytest.raises(E.EvaluationError, match="d_raw"):
        E.evaluate(b, _ds([0, 1], d=2))


def test_evaluate_agrees_with_predict_per_view():
    spec = SynthSpec(n_classes=3, n_segments=4, d_raw=5, n_train=0, n_test=9, seed=1)
    _, te = synthesize(spec)
    b = ModelBundle.create(ModelDims(d_raw=5, n_classes=3, n_segments=4, zero_residual=False), "full", seed=3)
    rep = E.evaluate(b, te)
    preds = np.zeros((4, 9), dtype=int)
    for v in expand_views(te):
        preds[v.k - 1, v.source_id] = predict(v, b)[0]
    ref = E.evaluate_predictions(preds, te.labels(), 3, te.ids())
    assert rep.to_dict() == ref.to_dict()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(2, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_report_invariants(N, C, K, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, C, N)
    preds = rng.integers(0, C, (K, N))
    rep = E.evaluate_predictions(preds, labels, C)
    counts = np.bincount(labels, minlength=C)
    assert np.all((rep.accuracy >= 0) & (rep.accuracy <= 1))
    for k in range(K):
        assert rep.confusion[k].sum(axis=1).tolist() == counts.tolist()
        present = counts > 0
        weighted = (rep.class_accuracy[present, k] * counts[present]).sum() / N
        assert abs(weighted - rep.accuracy[k]) <= 1e-12
    table = E.threshold_table(rep, ratios=(1.0,))
    assert np.all(np.diff(table.percent[:, 0]) <= 0)
    assert np.all((table.percent >= 0) & (table.percent <= 100))
    # ordering of the test set does not matter
    perm = rng.permutation(N)
    rep2 = E.evaluate_predictions(preds[:, perm], labels[perm], C, np.arange(N)[perm])
    assert rep2.to_dict() == rep.to_dict()


def test_threshold_table_examples():
    labels = np.repeat(np.arange(4), 20)
    preds = np.tile(labels, (10, 1))
    rep = E.evaluate_predictions(preds, labels, 4)
    t = E.threshold_table(rep)
    assert np.all(t.percent == 100.0)
    # classes 0, 1 at 0.85 and classes 2, 3 at 0.5
    preds = preds.copy()
    for c, wrong in ((0, 3), (1, 3), (2, 10), (3, 10)):
        idx = np.flatnonzero(labels == c)[:wrong]
        preds[:, idx] = (c + 1) % 4
    t = E.threshold_table(E.evaluate_predictions(preds, labels, 4))
    for r in (0.1, 0.5, 1.0):
        assert (t.value(r, 0.6), t.value(r, 0.8), t.value(r, 0.9)) == (50.0, 50.0, 0.0)
    assert "50.00" in t.format()


def test_top_classes_tie_break():
    labels = np.array([0, 1, 2, 2])
    preds = np.array([[0, 1, 2, 0]])
    rep = E.evaluate_predictions(preds, labels, 4)
    assert rep.top_classes(1.0, 5) == [(0, 1.0), (1, 1.0), (2, 0.5)]


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------


def _rep(acc_per_level, N=10):
    K = len(acc_per_level)
    labels = np.zeros(N, dtype=int)
    preds = np.ones((K, N), dtype=int)
    for k, a in enumerate(acc_per_level):
        preds[k, : int(round(a * N))] = 0
    return E.evaluate_predictions(preds, labels, 2)


def test_identical_reports_zero_deltas():
    r = _rep([0.1 * i for i in range(1, 11)])
    t = E.compare_ablations({"a": r, "b": r})
    assert np.all(t.delta == 0)


def test_hand_computed_deltas():
    a = _rep([0.2, 0, 0.4, 0, 0.6, 0, 0, 0, 0, 1])
    b = _rep([0.5, 0, 0.7, 0, 0.9, 0, 0, 0, 0, 1])
    t = E.compare_ablations({"scp": a, "full": b}, baseline="scp")
    assert t.row("scp")["mean"] == pytest.approx(0.4)
    assert t.row("full")["mean"] == pytest.approx(0.7)
    assert t.row("full")["delta"] == pytest.approx(0.3)
    assert t.row("full")["r=0.3"] == pytest.approx(0.7)
    assert "+30.00" in t.format()


def test_mismatched_test_sets_rejected():
    a = _rep([0.5] * 10, N=10)
    b = _rep([0.5] * 10, N=12)
    with pytest.raises(E.EvaluationError):
        E.compare_ablations({"a": a, "b": b})
    with pytest.raises(E.EvaluationError):
        E.compare_ablations({"a": a}, baseline="zzz")


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------


def test_fused_identical_models_equals_single():
    spec = SynthSpec(n_classes=3, n_segments=4, d_raw=5, n_train=0, n_test=12, seed=2)
    _, te = synthesize(spec)
    b = ModelBundle.create(ModelDims(d_raw=5, n_classes=3, n_segments=4, zero_residual=False), "full", seed=1)
    assert E.evaluate_fused(b, b, te, te).to_dict() == E.evaluate(b, te).to_dict()


def test_fused_with_random_stream_at_least_random():
    rng = np.random.default_rng(0)
    labels = np.arange(60) % 3
    ds = _ds(labels, K=3, C=3)
    noise = rng.random((3, 60, 3))
    rand = lambda raw: noise  # noqa: E731
    fused = E.evaluate_fused(_perfect(ds), rand, ds, ds)
    assert np.all(fused.accuracy >= E.evaluate(rand, ds).accuracy)


def test_fused_hand_fixture():
    # two sequences, K=1, C=2; stream b lists the ids in reverse order
    a = _ds([0, 1], K=1, C=2)
    b = Dataset(list(reversed(_ds([0, 1], K=1, C=2, seed=1).sequences)), 2, 1, 2)
    sa = np.array([[[0.6, 0.4], [0.7, 0.3]]])  # rows follow id order
    sb_rev = np.array([[[0.1, 0.9], [0.1, 0.9]]])  # rows follow b's order: id 1, id 0
    rep = E.evaluate_fused(lambda raw: sa, lambda raw: sb_rev, a, b)
    # id 0: [0.7, 1.3] -> 1 (wrong); id 1: [0.8, 1.2] -> 1 (right)
    assert rep.confusion[0].tolist() == [[0, 1], [0, 1]]


def test_fused_unpaired_rejected():
    a = _ds([0, 1], K=2, C=2)
    b = _ds([0, 1], K=2, C=2, ids=[0, 5])
    with pytest.raises(E.EvaluationError, match="paired"):
        E.evaluate_fused(lambda r: r, lambda r: r, a, b)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def test_report_files(tmp_path):
    labels = np.array([0, 1, 2, 1, 0])
    preds = np.array([[0, 1, 1, 1, 2]] * 10)
    rep = E.evaluate_predictions(preds, labels, 3)
    paths = E.write_report(rep, tmp_path, "x")
    curve = paths["curve"].read_text().splitlines()
    assert curve[0] == "ratio,accuracy" and len(curve) == 11
    assert curve[1] == "0.1,0.6" and curve[-1] == "1.0,0.6"
    text = paths["text"].read_text()
    assert "classes reaching accuracy thresholds" in text and "top-5 classes" in text
    blocks = paths["confusion"].read_text().strip().split("\n\n")
    assert len(blocks) == 10 and blocks[0].splitlines()[0] == "# ratio=0.1"
    back = E.load_report(paths["json"])
    assert back.to_dict() == rep.to_dict()
    assert json.loads(paths["json"].read_text())["average"] == pytest.approx(0.6)


def test_load_report_rejects_garbage(tmp_path):
    (tmp_path / "r.json").write_text("{}")
    with pytest.raises(E.EvaluationError):
        E.load_report(tmp_path / "r.json")
