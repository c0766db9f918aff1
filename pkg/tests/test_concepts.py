import json
from itertools import product

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conceptmed.concepts import (
    DEFAULT_LAMBDA_GRID,
    ConceptModel,
    UnitSet,
    activation_mask,
    auc,
    concept_logit,
    eval_probe,
    fit_concept,
    lambda_max,
    predict_proba,
    probe_indices,
    random_units,
    select_lambda,
    stratified_folds,
    vectorize,
)
from conceptmed.errors import ConfigError, DegenerateLabelsError, ModeError, ShapeError, SplitError
from conceptmed.net import Activation, default_network, forward_split


def noisy_logistic(seed, n=300, d=4, scale=1.0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    w = rng.normal(size=d) * scale
    y = (rng.random(n) < 1 / (1 + np.exp(-(X @ w + 0.3)))).astype(float)
    return X, y


def plain_gd_logistic(X, y, iters=200_000, tol=1e-13):
    """Unregularized logistic regression by fixed-step gradient descent."""
    n, d = X.shape
    A = np.column_stack([X, np.ones(n)])
    step = 4.0 * n / np.linalg.norm(A, 2) ** 2
    theta = np.zeros(d + 1)
    for _ in range(iters):
        p = 1 / (1 + np.exp(-(A @ theta)))
        g = A.T @ (p - y) / n
        theta -= step * g
        if np.max(np.abs(g)) < tol:
            break
    return theta[:-1], theta[-1]


# -- vectorize -----------------------------------------------------------------

def test_maxpool_of_plane():
    plane = np.array([[1.0, 3.0], [2.0, 0.0]])[..., None]
    assert vectorize(Activation(plane, 2, True), "maxpool").tolist() == [3.0]


def test_degenerate_spatial_flatten_equals_maxpool():
    a = Activation(np.random.default_rng(0).random((1, 1, 5)), 2, True)
    assert np.array_equal(vectorize(a, "flatten"), vectorize(a, "maxpool"))


def test_flatten_is_row_major_and_sized():
    net = default_network()
    a = forward_split(net, np.random.default_rng(0).random((16, 16, 1)), net.split_candidates[1])
    v = vectorize(a, "flatten")
    assert v.shape == (8 * 8 * 16,)
    assert np.array_equal(v, a.tensor.reshape(-1))


def test_maxpool_on_flat_is_mode_error():
    with pytest.raises(ModeError):
        vectorize(Activation(np.zeros(4), 8, False), "maxpool")


def test_vectorize_batches():
    t = np.random.default_rng(1).random((3, 2, 2, 4))
    assert vectorize(Activation(t, 2, True), "maxpool").shape == (3, 4)
    assert vectorize(t, "flatten", spatial=True).shape == (3, 16)


# -- lasso solver --------------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_lambda_zero_matches_plain_gradient_descent(seed):
    X, y = noisy_logistic(seed)
    m = fit_concept(X, y, 0.0)
    w, b = plain_gd_logistic(X, y)
    assert np.max(np.abs(m.beta - w)) <= 1e-3
    assert abs(m.intercept - b) <= 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_at_lambda_max_only_the_intercept_survives(seed):
    X, y = noisy_logistic(seed)
    lam = lambda_max(X, y)
    for mult in (1.0, 1.5, 100.0):
        m = fit_concept(X, y, lam * mult)
        assert not m.beta.any()
        p = y.mean()
        assert m.intercept == pytest.approx(np.log(p / (1 - p)), abs=1e-9)
        assert len(m.units) == 0


def test_just_below_lambda_max_selects_something():
    X, y = noisy_logistic(0)
    assert np.count_nonzero(fit_concept(X, y, 0.9 * lambda_max(X, y)).beta) >= 1


def test_separable_1d():
    x = np.concatenate([np.linspace(-2, -0.5, 20), np.linspace(0.5, 2, 20)])[:, None]
    y = (x[:, 0] > 0).astype(float)
    m = fit_concept(x, y, 0.01)
    assert m.beta[0] > 0
    assert ((concept_logit(m, x) > 0) == (y == 1)).all()


@pytest.mark.parametrize("seed", range(4))
def test_sparsity_non_increasing_along_grid(seed):
    X, y = noisy_logistic(seed, n=200, d=12, scale=0.5)
    counts = [np.count_nonzero(fit_concept(X, y, lam).beta) for lam in sorted(DEFAULT_LAMBDA_GRID)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_units_follow_nonzero_pattern():
    X, y = noisy_logistic(5, d=10)
    m = fit_concept(X, y, 0.02, split=3)
    assert m.units.indices == tuple(np.flatnonzero(m.beta))
    assert m.units.granularity == "scalar" and m.units.split == 3
    mp = fit_concept(X, y, 0.02, mode="maxpool")
    assert mp.units.granularity == "channel"


def test_fit_is_deterministic():
    X, y = noisy_logistic(6, d=10)
    assert fit_concept(X, y, 0.01).beta.tobytes() == fit_concept(X, y, 0.01).beta.tobytes()


def test_single_class_is_degenerate():
    with pytest.raises(DegenerateLabelsError):
        fit_concept(np.zeros((5, 2)), np.ones(5), 0.1)
    with pytest.raises(DegenerateLabelsError):
        fit_concept(np.zeros((5, 2)), np.array([1, 0, 0, 0, 0]), 0.1)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        fit_concept(np.zeros((5, 2)), np.array([1, 1, 0, 0]), 0.1)


# -- lambda selection ----------------------------------------------------------

def test_single_value_grid():
    X, y = noisy_logistic(0)
    assert select_lambda(X, y, [0.05]).lam == 0.05


def test_duplicates_do_not_change_selection():
    X, y = noisy_logistic(1, d=8)
    grid = [1e-3, 1e-2, 1e-1]
    a = select_lambda(X, y, grid, seed=3)
    b = select_lambda(X, y, grid + grid[::-1] + [1e-2], seed=3)
    assert a.lam == b.lam and a.cv_loss == b.cv_loss


def test_empty_grid_is_config_error():
    with pytest.raises(ConfigError):
        select_lambda(np.zeros((10, 2)), np.array([0, 1] * 5), [])


def test_fold_count_drops_to_minority_size():
    X, y = noisy_logistic(2, n=40)
    y[:] = 0
    y[:4] = 1
    assert select_lambda(X, y, [0.01, 0.1]).folds == 4


def test_stratified_folds_partition():
    y = np.array([0] * 23 + [1] * 17)
    folds = stratified_folds(y, 10, seed=0)
    assert sorted(np.concatenate(folds).tolist()) == list(range(40))
    assert all(1 <= y[f].sum() <= 2 for f in folds)


def test_pure_noise_selects_the_largest_lambda():
    hits = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(120, 15))
        y = np.array([0, 1] * 60)[rng.permutation(120)].astype(float)
        hits += select_lambda(X, y, DEFAULT_LAMBDA_GRID, seed=seed).lam == max(DEFAULT_LAMBDA_GRID)
    assert hits >= 8


def test_informative_data_selects_small_lambda():
    X, y = noisy_logistic(3, n=400, d=5, scale=3.0)
    assert select_lambda(X, y, DEFAULT_LAMBDA_GRID).lam < 0.1


# -- logits and evaluation -----------------------------------------------------

def test_logit_of_zero_beta_is_intercept():
    m = ConceptModel(0, np.zeros(4), -0.7, 1.0, "flatten", 1)
    assert concept_logit(m, np.random.default_rng(0).random(4)) == -0.7


def test_sigmoid_of_logit_is_probability_and_linear_in_parameters():
    rng = np.random.default_rng(0)
    beta, v = rng.normal(size=6), rng.normal(size=6)
    m = ConceptModel(0, beta, 0.4, 0.1, "flatten", 1)
    m2 = ConceptModel(0, 2 * beta, 0.8, 0.1, "flatten", 1)
    z = concept_logit(m, v)
    assert predict_proba(m, v) == pytest.approx(1 / (1 + np.exp(-z)), rel=1e-15)
    assert concept_logit(m2, v) == pytest.approx(2 * z, rel=1e-14)


def test_logit_checks_split_and_shape():
    m = ConceptModel(0, np.zeros(4), 0.0, 1.0, "flatten", 1)
    with pytest.raises(SplitError):
        concept_logit(m, Activation(np.zeros(4), 2, False))
    with pytest.raises(ShapeError):
        concept_logit(m, np.zeros(5))


def test_model_json_roundtrip():
    beta = np.array([0.0, 1.5, 0.0, -2.0])
    m = ConceptModel(3, beta, 0.25, 0.01, "maxpool", 5)
    d = json.loads(m.to_json())
    assert d["indices"] == [1, 3] and d["values"] == [1.5, -2.0]
    back = ConceptModel.from_dict(d)
    assert np.array_equal(back.beta, beta) and back.units == m.units


def pairwise_auc(pos, neg):
    total = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in product(pos, neg))
    return total / (len(pos) * len(neg))


def test_auc_examples():
    assert auc([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]) == 0.75
    assert auc([3, 4, 1, 2], [1, 1, 0, 0]) == 1.0
    assert auc([0.5] * 6, [1, 0, 1, 0, 1, 0]) == 0.5


@given(st.lists(st.integers(-5, 5), min_size=2, max_size=40), st.integers(0, 1000))
def test_auc_matches_pairwise_oracle(scores, seed):
    labels = np.random.default_rng(seed).integers(0, 2, len(scores))
    labels[0], labels[1] = 0, 1
    s = np.asarray(scores, float)
    assert auc(s, labels) == pytest.approx(pairwise_auc(s[labels == 1], s[labels == 0]), abs=1e-12)


@given(st.lists(st.integers(-40, 40), min_size=4, max_size=30), st.integers(0, 1000))
def test_auc_invariant_to_increasing_transform(scores, seed):
    labels = np.random.default_rng(seed).integers(0, 2, len(scores))
    labels[:2] = [0, 1]
    s = np.asarray(scores) / 4.0
    assert auc(s, labels) == auc(np.exp(s / 3) * 2 + 1, labels)


def test_auc_needs_both_classes():
    with pytest.raises(DegenerateLabelsError):
        auc([0.1, 0.2], [1, 1])


def test_eval_probe_recall_at_half():
    m = ConceptModel(0, np.array([1.0]), 0.0, 0.1, "flatten", 1)
    out = eval_probe(m, np.array([[2.0], [-1.0], [0.5], [-3.0]]), np.array([1, 1, 0, 0]))
    assert out["recall"] == 0.5
    assert out["auc"] == 0.75


# -- sampling helpers ----------------------------------------------------------

def test_probe_indices_balanced_and_exclude_missing():
    c = np.array([1, 1, 1, 0, 0, 0, 0, 0, -1, -1, 1])
    idx = probe_indices(c, seed=0)
    assert (c[idx] != -1).all()
    assert (c[idx] == 1).sum() == (c[idx] == 0).sum() == 4
    assert np.array_equal(idx, probe_indices(c, seed=0))
    assert len(probe_indices(c, seed=0, max_per_class=2)) == 4


def test_random_units():
    assert random_units(10, 10, 2, "scalar", 0).indices == tuple(range(10))
    assert len(random_units(0, 10, 2, "scalar", 0)) == 0
    assert random_units(4, 50, 2, "scalar", 7) == random_units(4, 50, 2, "scalar", 7)
    with pytest.raises(ValueError):
        random_units(11, 10, 2, "scalar", 0)


@given(st.integers(0, 60), st.integers(0, 1000))
def test_random_units_size_and_range(size, seed):
    u = random_units(size, 60, 5, "channel", seed)
    assert len(u) == size and all(0 <= i < 60 for i in u.indices)


def test_unitset_normalizes_and_complements():
    u = UnitSet((3, 1, 3), "scalar", 2)
    assert u.indices == (1, 3)
    assert u.complement(5).indices == (0, 2, 4)


# -- activation masks ----------------------------------------------------------

def test_constant_channel_has_empty_masks():
    acts = np.ones((5, 4, 4, 2))
    thr, masks = activation_mask(1, acts)
    assert thr == 1.0 and not masks.any()


def test_mask_keeps_about_one_percent():
    acts = np.random.default_rng(0).random((50, 16, 16, 3))
    thr, masks = activation_mask(2, acts)
    frac = masks.mean()
    assert abs(frac - 0.01) <= 1 / (16 * 16)
    assert masks.shape == (50, 16, 16)


def test_mask_on_flat_split_is_mode_error():
    with pytest.raises(ModeError):
        activation_mask(0, Activation(np.zeros((3, 8)), 8, False))
