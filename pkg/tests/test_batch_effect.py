import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvclip.batch_effect import (
    MODES,
    SplitSpec,
    detail_csv,
    evaluate_batch_effect,
    fit_logreg,
    group_keys,
    knn_classify,
    logreg_objective,
    make_split,
    report_csv,
    report_table,
    synthetic_labeled,
)
from mvclip.errors import InfeasibleSplitError, RatioUndefinedError
from mvclip.gradcheck import central_difference, max_relative_error
from mvclip.tables import LabeledEmbeddings, read_labeled_csv, write_labeled_csv


def _labeled(n, source, batch=None, plate=None, labels=None, d=4, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledEmbeddings(
        [str(i) for i in range(n)],
        rng.normal(size=(n, d)),
        np.asarray(labels if labels is not None else np.arange(n) % 3),
        np.asarray(source),
        np.asarray(batch if batch is not None else ["b"] * n),
        np.asarray(plate if plate is not None else ["p"] * n),
    )


def _blobs(n=400, seed=0):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    X = rng.normal(size=(n, 2)) * 0.5 + np.where(y[:, None] == 0, -3.0, 3.0)
    return X, y


def _orthogonal(d, seed):
    q, r = np.linalg.qr(np.random.default_rng(seed).normal(size=(d, d)))
    return q * np.sign(np.diag(r))


@pytest.fixture(scope="module")
def clean():
    return synthetic_labeled(seed=1)


@pytest.fixture(scope="module")
def shifted():
    return synthetic_labeled(source_offset=6.0, seed=1)


# -- splits --------------------------------------------------------------------


def test_two_sources_half_split():
    data = _labeled(40, ["A"] * 20 + ["B"] * 20)
    train, test = make_split(data, SplitSpec("NSS", test_fraction=0.5))
    assert len(test) == 20
    assert len(set(data.source[test])) == 1 and len(set(data.source[train])) == 1
    assert set(data.source[test]) != set(data.source[train])


def test_ten_equal_plates_two_in_test():
    plates = np.repeat([f"P{i}" for i in range(10)], 12)
    data = _labeled(120, ["S"] * 120, plate=plates)
    for rep in range(5):
        _, test = make_split(data, SplitSpec("NSP", seed=4), rep)
        assert len(set(data.plate[test])) == 2


def test_random_split_stratified_and_distinct():
    labels = np.repeat(np.arange(5), 100)
    data = _labeled(500, ["S"] * 500, labels=labels)
    seen = set()
    for rep in range(5):
        train, test = make_split(data, SplitSpec("Random"), rep)
        assert len(np.intersect1d(train, test)) == 0 and len(train) + len(test) == 500
        for c in range(5):
            assert np.sum(labels[test] == c) / 100 == pytest.approx(0.2, abs=0.02)
        seen.add(tuple(test))
    assert len(seen) == 5


def test_single_group_is_infeasible():
    data = _labeled(30, ["A"] * 30)
    with pytest.raises(InfeasibleSplitError):
        make_split(data, SplitSpec("NSS"))


def test_unreachable_fraction_is_infeasible():
    # one huge source and one tiny one: neither is within 0.1 of 0.2
    data = _labeled(100, ["A"] * 97 + ["B"] * 3)
    with pytest.raises(InfeasibleSplitError, match="closest"):
        make_split(data, SplitSpec("NSS"))


def test_split_spec_validation():
    with pytest.raises(ValueError):
        SplitSpec("NSX")
    with pytest.raises(ValueError):
        SplitSpec(test_fraction=1.0)


def test_nested_group_keys_do_not_collide():
    # batch "B0" under two different sources must be two different batches
    data = _labeled(4, ["S0", "S0", "S1", "S1"], batch=["B0", "B1", "B0", "B1"])
    assert len(set(group_keys(data, "NSB"))) == 4


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), rep=st.integers(0, 4), mode=st.sampled_from(["NSS", "NSB", "NSP"]))
def test_group_disjointness(clean, seed, rep, mode):
    train, test = make_split(clean, SplitSpec(mode, seed=seed), rep)
    keys = group_keys(clean, mode)
    assert not set(keys[train]) & set(keys[test])
    assert len(train) + len(test) == len(clean)
    assert abs(len(test) / len(clean) - 0.2) <= 0.1


# -- logistic regression -------------------------------------------------------


def test_logreg_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(20, 5))
    Y = np.eye(3)[rng.integers(0, 3, size=20)]
    W, b = rng.normal(size=(5, 3)), rng.normal(size=3)
    _, gW, gb = logreg_objective(W, b, X, Y, 1e-4)
    nW = central_difference(lambda w: logreg_objective(w, b, X, Y, 1e-4)[0], W)
    nb = central_difference(lambda v: logreg_objective(W, v, X, Y, 1e-4)[0], b)
    assert max_relative_error(gW, nW) < 1e-5
    assert max_relative_error(gb, nb) < 1e-5


def test_logreg_separable_blobs():
    X, y = _blobs()
    Xt, yt = _blobs(seed=1)
    model = fit_logreg(X, y)
    assert np.mean(model.predict(Xt) == yt) >= 0.99
    assert model.loss_curve[-1] < model.loss_curve[0]


def test_logreg_shuffled_labels_chance():
    rng = np.random.default_rng(3)
    n_classes = 4
    X = rng.normal(size=(4000, 8))
    y = rng.integers(0, n_classes, size=4000)
    model = fit_logreg(X[:2000], y[:2000])
    acc = np.mean(model.predict(X[2000:]) == y[2000:])
    assert abs(acc - 1 / n_classes) <= 0.05


def test_logreg_single_class_rejected():
    with pytest.raises(ValueError, match="2 classes"):
        fit_logreg(np.ones((5, 2)), np.zeros(5))


def test_logreg_deterministic():
    X, y = _blobs()
    a, b = fit_logreg(X, y), fit_logreg(X, y)
    assert np.array_equal(a.W, b.W) and np.array_equal(a.b, b.b)


def test_logreg_string_labels():
    X, y = _blobs()
    names = np.array(["ctrl", "drug"])[y]
    assert set(fit_logreg(X, names).predict(X)) <= {"ctrl", "drug"}


# -- knn -----------------------------------------------------------------------


def test_knn_exact_match_k1():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 6))
    y = np.arange(30)
    assert np.array_equal(knn_classify(X, y, X[[4, 17]], k=1), [4, 17])


def test_knn_separable_blobs():
    X, y = _blobs()
    Xt, yt = _blobs(seed=1)
    assert np.mean(knn_classify(X, y, Xt) == yt) >= 0.99


def test_knn_full_k_predicts_majority():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(25, 3))
    y = np.array([0] * 9 + [1] * 10 + [2] * 6)
    assert np.all(knn_classify(X, y, rng.normal(size=(40, 3)), k=25) == 1)


def test_knn_tie_goes_to_nearest():
    X = np.array([[1.0, 0.0], [0.0, 1.0]])
    q = np.array([[1.0, 0.2], [0.2, 1.0]])
    assert list(knn_classify(X, np.array(["a", "b"]), q, k=2)) == ["a", "b"]


def test_knn_errors():
    with pytest.raises(ValueError):
        knn_classify(np.empty((0, 2)), np.empty(0), np.ones((1, 2)))
    with pytest.raises(ValueError):
        knn_classify(np.ones((3, 2)), np.zeros(3), np.ones((1, 2)), k=4)


def test_knn_orthogonal_invariance(shifted):
    q = _orthogonal(shifted.vectors.shape[1], 0)
    train, test = make_split(shifted, SplitSpec("NSS"))
    X = shifted.vectors
    a = knn_classify(X[train], shifted.labels[train], X[test])
    b = knn_classify(X[train] @ q, shifted.labels[train], X[test] @ q)
    assert np.array_equal(a, b)


# -- evaluation ----------------------------------------------------------------


@pytest.mark.parametrize("probe", ["logreg", "knn"])
def test_batch_free_ratios_near_one(clean, probe):
    rep = evaluate_batch_effect(clean, probe=probe)
    for g in (rep.g_nss, rep.g_nsb, rep.g_nsp):
        assert 0.95 <= g <= 1.05
    assert all(len(v) == 5 for v in rep.per_repetition.values())


@pytest.mark.parametrize("probe", ["logreg", "knn"])
def test_source_offset_lowers_g_nss(shifted, probe):
    rep = evaluate_batch_effect(shifted, probe=probe)
    assert rep.g_nss < 0.8
    # plates and batches never separate a source, so the offset is seen in training
    assert rep.g_nsp > rep.g_nss


def test_relabeling_invariance(shifted):
    perm = {f"T{i}": f"T{(i * 4 + 7) % 9}" for i in range(9)}
    relabeled = LabeledEmbeddings(
        shifted.ids, shifted.vectors, np.array([perm[l] for l in shifted.labels]),
        shifted.source, shifted.batch, shifted.plate,
    )
    for probe in ("logreg", "knn"):
        a = evaluate_batch_effect(shifted, probe=probe)
        b = evaluate_batch_effect(relabeled, probe=probe)
        assert (a.g_nss, a.g_nsb, a.g_nsp) == pytest.approx((b.g_nss, b.g_nsb, b.g_nsp), abs=1e-12)


def test_logreg_orthogonal_reparameterisation(shifted):
    q = _orthogonal(shifted.vectors.shape[1], 1)
    rotated = LabeledEmbeddings(
        shifted.ids, shifted.vectors @ q, shifted.labels, shifted.source, shifted.batch, shifted.plate
    )
    a = evaluate_batch_effect(shifted, SplitSpec(repetitions=2))
    b = evaluate_batch_effect(rotated, SplitSpec(repetitions=2))
    for mode in MODES:
        assert np.allclose(a.per_repetition[mode], b.per_repetition[mode], atol=0.01)


def test_workers_do_not_change_report(clean):
    a = evaluate_batch_effect(clean, SplitSpec(repetitions=2), probe="knn")
    b = evaluate_batch_effect(clean, SplitSpec(repetitions=2), probe="knn", workers=4)
    assert a.per_repetition == b.per_repetition


def test_zero_random_accuracy_is_error(clean, monkeypatch):
    import mvclip.batch_effect as be

    monkeypatch.setattr(be, "_accuracy", lambda data, spec, *a: 0.0 if spec.mode == "Random" else 0.5)
    with pytest.raises(RatioUndefinedError, match="undefined"):
        evaluate_batch_effect(clean, SplitSpec(repetitions=1))


def test_reports(clean):
    rep = evaluate_batch_effect(clean, SplitSpec(repetitions=2), probe="knn")
    lines = report_csv(rep, "IMM").splitlines()
    assert lines[0] == "experiment,probe,Acc_Rand,G_NSP,G_NSB,G_NSS"
    assert lines[1].startswith("IMM,knn,")
    assert len(detail_csv(rep).splitlines()) == 1 + 4 * 2
    assert "G_NSS" in report_table(rep)
    assert rep.std("NSS") >= 0


def test_labeled_csv_roundtrip(tmp_path, clean):
    write_labeled_csv(tmp_path / "l.csv", clean)
    back = read_labeled_csv(tmp_path / "l.csv")
    assert np.array_equal(back.vectors, clean.vectors)
    assert np.array_equal(back.labels, clean.labels)
    assert np.array_equal(back.plate, clean.plate)
