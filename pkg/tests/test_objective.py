import math

import numpy as np
import pytest

from peav.errors import ConfigurationError, DomainError, NumericError, ParameterError
from peav.numeric import finite_diff_grad, l2_normalize, log_sigmoid
from peav.objective import (PRETRAIN_8, LossPairSpec, PairRegistry, multi_pair_loss, registry_grads,
                            registry_params, sgd_step, sigmoid_pair_loss)


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


def brute_pair_loss(hl, hr, alpha, beta):
    B = hl.shape[0]
    total = 0.0
    for b in range(B):
        for c in range(B):
            z = 1.0 if b == c else -1.0
            total -= math.log(1.0 / (1.0 + math.exp(-z * (alpha * float(hl[b] @ hr[c]) + beta))))
    return total / B


def random_bundle(tags, B, C, seed):
    r = np.random.default_rng(seed)
    return {t: l2_normalize(r.normal(size=(B, C))) for t in tags}


def test_registry_presets():
    assert [(p.left, p.right) for p in PairRegistry.pretrain()] == list(PRETRAIN_8)
    assert set(map(frozenset, PRETRAIN_8)) == {
        frozenset(p) for p in [("A", "AT"), ("A", "V"), ("A", "AVT"), ("AV", "AT"), ("AV", "AVT"),
                               ("V", "AT"), ("V", "VT"), ("V", "AVT")]}
    ft = PairRegistry.finetune()
    assert len(ft) == 10
    assert [(p.left, p.right) for p in ft][8:] == [("A+VT", "V"), ("V+AT", "A")]
    assert all(p.alpha == 10 and p.beta == -10 and p.weight == 1 for p in ft)


def test_registry_rejects_duplicates_and_bad_alpha():
    with pytest.raises(ConfigurationError):
        PairRegistry([LossPairSpec("A", "AT"), LossPairSpec("AT", "A")])
    with pytest.raises((ParameterError, ConfigurationError)):
        LossPairSpec("A", "AT", alpha=0.0)


def test_registry_from_names_roundtrip():
    reg = PairRegistry.from_names(["A-AT", "V+AT-A", "A+VT-V"])
    assert [(p.left, p.right) for p in reg] == [("A", "AT"), ("V+AT", "A"), ("A+VT", "V")]
    back = PairRegistry.from_json(reg.to_json())
    assert [p.name for p in back] == [p.name for p in reg]


def test_pair_loss_examples():
    e = np.eye(2)
    assert sigmoid_pair_loss(e[:1], e[1:], 1.0, 0.0).loss == pytest.approx(math.log(2), abs=1e-12)
    res = sigmoid_pair_loss(e, e, 10.0, 0.0)
    expected = (2 * -log_sigmoid(10.0) + 2 * -log_sigmoid(0.0)) / 2
    assert res.loss == pytest.approx(expected, abs=1e-12)
    assert res.loss == pytest.approx(0.693192, abs=1e-6)


def test_pair_loss_grad_at_zero():
    # d loss / d s for a single positive at s = 0: -sigma(0) = -0.5; with h_right = e1, that is d/dh_left[0]
    h = np.array([[0.0, 1.0]])
    res = sigmoid_pair_loss(h, np.array([[1.0, 0.0]]), 1.0, 0.0)
    assert res.grad_left[0, 0] == pytest.approx(-0.5, abs=1e-12)
    assert res.grad_beta == pytest.approx(-0.5, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_pair_loss_matches_double_sum_oracle(seed):
    r = np.random.default_rng(seed)
    hl, hr = l2_normalize(r.normal(size=(5, 6))), l2_normalize(r.normal(size=(5, 6)))
    a, b = float(r.uniform(1, 20)), float(r.uniform(-12, 2))
    assert sigmoid_pair_loss(hl, hr, a, b).loss == pytest.approx(brute_pair_loss(hl, hr, a, b), abs=1e-10)


def test_pair_loss_errors():
    with pytest.raises(DomainError):
        sigmoid_pair_loss(np.zeros((0, 3)), np.zeros((0, 3)), 1.0, 0.0)
    with pytest.raises(DomainError):
        sigmoid_pair_loss(np.array([[np.nan, 0.0]]), np.array([[1.0, 0.0]]), 1.0, 0.0)
    with pytest.raises(DomainError):
        sigmoid_pair_loss(np.zeros((2, 3)), np.zeros((3, 3)), 1.0, 0.0)


def test_pair_loss_swap_symmetry():
    r = np.random.default_rng(3)
    hl, hr = l2_normalize(r.normal(size=(4, 8))), l2_normalize(r.normal(size=(4, 8)))
    assert sigmoid_pair_loss(hl, hr, 7.0, -3.0).loss == pytest.approx(
        sigmoid_pair_loss(hr, hl, 7.0, -3.0).loss, abs=1e-12)


def test_pair_loss_lower_bound_at_large_alpha():
    B = 4
    e = np.eye(B)
    loss = sigmoid_pair_loss(e, e, 50.0, -10.0).loss
    assert loss >= 0
    assert loss < 1e-3 + (B - 1) * -log_sigmoid(10.0)


def test_literal_sign_flips_similarity():
    e = np.eye(3)
    normal = sigmoid_pair_loss(e, e, 10.0, -10.0).loss
    literal = sigmoid_pair_loss(e, e, 10.0, -10.0, literal_sign=True).loss
    assert literal > normal
    assert literal == pytest.approx(brute_pair_loss(e, -e, 10.0, -10.0), abs=1e-10)


@pytest.mark.parametrize("seed", range(4))
def test_pair_loss_gradients_fd(seed):
    r = np.random.default_rng(seed)
    hl, hr = r.normal(size=(4, 8)), r.normal(size=(4, 8))
    a, b = 6.0, -4.0
    res = sigmoid_pair_loss(hl, hr, a, b)
    assert rel_err(res.grad_left, finite_diff_grad(lambda x: sigmoid_pair_loss(x, hr, a, b).loss, hl)) < 1e-5
    assert rel_err(res.grad_right, finite_diff_grad(lambda x: sigmoid_pair_loss(hl, x, a, b).loss, hr)) < 1e-5
    ga = finite_diff_grad(lambda x: sigmoid_pair_loss(hl, hr, float(x[0]), b).loss, np.array([a]))[0]
    gb = finite_diff_grad(lambda x: sigmoid_pair_loss(hl, hr, a, float(x[0])).loss, np.array([b]))[0]
    assert res.grad_alpha == pytest.approx(ga, rel=1e-5)
    assert res.grad_beta == pytest.approx(gb, rel=1e-5)


def test_multi_pair_single_and_zero_weight():
    bundle = random_bundle(["A", "AT", "V"], 3, 8, 0)
    one = PairRegistry([LossPairSpec("A", "AT")])
    assert multi_pair_loss(bundle, one).total == sigmoid_pair_loss(bundle["A"], bundle["AT"], 10, -10).loss
    two = PairRegistry([LossPairSpec("A", "AT", weight=1.0), LossPairSpec("A", "V", weight=0.0)])
    res = multi_pair_loss(bundle, two)
    assert res.total == res.per_pair[0]


def test_multi_pair_missing_stream_names_pair():
    with pytest.raises(ConfigurationError, match="A-AVT"):
        multi_pair_loss(random_bundle(["A", "AT"], 2, 4, 0), PairRegistry([LossPairSpec("A", "AVT")]))


@pytest.mark.parametrize("preset", ["PRETRAIN_8", "FINETUNE_10"])
def test_multi_pair_gradients_fd(preset):
    reg = PairRegistry.from_preset(preset)
    bundle = random_bundle(reg.streams(), 3, 8, 11)
    res = multi_pair_loss(bundle, reg)
    for tag in reg.streams():
        def f(x, tag=tag):
            return multi_pair_loss({**bundle, tag: x}, reg).total
        assert rel_err(res.stream_grads[tag], finite_diff_grad(f, bundle[tag])) < 1e-5, tag


def test_registry_grads_in_log_space():
    reg = PairRegistry.pretrain()
    bundle = random_bundle(reg.streams(), 4, 8, 5)
    res = multi_pair_loss(bundle, reg)
    grads = registry_grads(reg, res)
    params = registry_params(reg)
    name = "pair/V-VT/log_alpha"

    def f(x):
        for p in reg:
            if p.name == "V-VT":
                p.alpha = math.exp(float(x[0]))
        return multi_pair_loss(bundle, reg).total
    num = finite_diff_grad(f, np.array([float(params[name])]))[0]
    assert float(grads[name]) == pytest.approx(num, rel=1e-5)


def test_dropping_pair_keeps_untouched_gradients():
    reg = PairRegistry.pretrain()
    bundle = random_bundle(reg.streams(), 4, 8, 2)
    full = multi_pair_loss(bundle, reg)
    reduced = PairRegistry([p for p in reg if p.name != "V-VT"])
    part = multi_pair_loss(bundle, reduced)
    # streams untouched by the dropped pair keep exactly the same gradient
    for tag in ("A", "AV", "AT", "AVT"):
        np.testing.assert_array_equal(full.stream_grads[tag], part.stream_grads[tag])


def test_sgd_step():
    p = {"w": np.array([1.0, 2.0])}
    out = sgd_step(p, {"w": np.zeros(2)}, 0.1)
    np.testing.assert_array_equal(out["w"], p["w"])
    out = sgd_step(p, {"w": np.ones(2)}, 0.5)
    np.testing.assert_allclose(out["w"], [0.5, 1.5])
    state = {}
    sgd_step(p, {"w": np.ones(2)}, 0.1, 0.9, state)
    out = sgd_step(p, {"w": np.ones(2)}, 0.1, 0.9, state)
    np.testing.assert_allclose(out["w"], p["w"] - 0.1 * 1.9)
    with pytest.raises(NumericError):
        sgd_step(p, {"w": np.array([np.inf, 0.0])}, 0.1)
    with pytest.raises(ParameterError):
        sgd_step(p, {"w": np.ones(2)}, 0.0)
