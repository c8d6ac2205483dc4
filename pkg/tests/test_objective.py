import math

import numpy as np
import pytest

from eksft import model as mdl
from eksft import numerics as nk
from eksft import objective as obj
from eksft import selection as sel
from eksft.errors import ConfigError, DegenerateInputError, InputError
from eksft.selection import MaskSet, TokenRef

from conftest import conditioned_point, random_batch


def _mask_from(refs, n_valid):
    s = frozenset(TokenRef(*r) for r in refs)
    return MaskSet(s, s, s, len(s), n_valid)


def _logits_from_probs(rows):
    """Logit rows whose log-softmax reproduces log(p) to float precision."""
    return np.log(np.asarray(rows, dtype=np.float64))


def test_sft_loss_perfect_model_is_zero():
    logits = np.zeros((1, 3, 6))
    targets = np.array([[1, 2, 3]])
    logits[0, np.arange(3), targets[0]] = 60.0  # probability ~1 on each target
    loss, d = obj.sft_loss(logits, targets, np.ones((1, 3), bool))
    assert loss <= 1e-12
    assert np.max(np.abs(d)) <= 1e-12


def test_sft_loss_uniform_is_log_v():
    logits = np.zeros((2, 4, 32))
    targets = np.zeros((2, 4), dtype=int)
    loss, _ = obj.sft_loss(logits, targets, np.ones((2, 4), bool))
    assert loss == pytest.approx(math.log(32), abs=1e-12)


def test_sft_rejects_zero_valid():
    with pytest.raises(DegenerateInputError):
        obj.sft_loss(np.zeros((1, 2, 4)), np.zeros((1, 2), int), np.zeros((1, 2), bool))


def test_sft_logit_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(0)
    logits = rng.normal(0, 2, size=(1, 1, 9))
    targets = np.array([[4]])
    valid = np.ones((1, 1), bool)
    _, d = obj.sft_loss(logits, targets, valid)
    p = np.exp(nk.log_softmax(logits))[0, 0]
    e = np.zeros(9)
    e[4] = 1.0
    assert np.allclose(d[0, 0], p - e, atol=1e-15)

    def f(flat):
        z = flat.reshape(1, 1, 9)
        loss, dz = obj.sft_loss(z, targets, valid)
        return loss, dz.reshape(-1)

    assert nk.grad_check(f, logits.reshape(-1)) <= 1e-5


def test_masked_ce_hand_case():
    # two valid tokens with log-probs -1 and -2; masking the second leaves 1.0
    rows = np.zeros((1, 2, 4))
    p1 = np.full(4, (1 - math.exp(-1)) / 3.0)
    p1[0] = math.exp(-1)
    p2 = np.full(4, (1 - math.exp(-2)) / 3.0)
    p2[0] = math.exp(-2)
    rows[0, 0] = np.log(p1)
    rows[0, 1] = np.log(p2)
    targets = np.zeros((1, 2), dtype=int)
    valid = np.ones((1, 2), bool)
    loss, _ = obj.masked_ce(rows, targets, _mask_from([(0, 1)], 2), valid)
    assert loss == pytest.approx(1.0, abs=1e-12)


def test_masked_ce_empty_mask_equals_sft():
    rng = np.random.default_rng(1)
    logits = rng.normal(0, 2, size=(2, 5, 7))
    targets = rng.integers(0, 7, size=(2, 5))
    valid = rng.random((2, 5)) < 0.7
    valid[0, 0] = True
    ref_loss, ref_d = obj.sft_loss(logits, targets, valid)
    loss, d = obj.masked_ce(logits, targets, MaskSet.empty(int(valid.sum())), valid)
    assert loss == ref_loss
    assert np.array_equal(d, ref_d)


def test_masked_ce_full_mask_returns_zero_with_warning(caplog):
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(1, 3, 5))
    targets = rng.integers(0, 5, size=(1, 3))
    valid = np.ones((1, 3), bool)
    mask = _mask_from([(0, 0), (0, 1), (0, 2)], 3)
    with caplog.at_level("WARNING"):
        loss, d = obj.masked_ce(logits, targets, mask, valid)
    assert loss == 0.0
    assert np.all(d == 0.0)
    assert any("every valid token" in r.message for r in caplog.records)


def test_masked_ce_rejects_mask_outside_valid():
    logits = np.zeros((1, 3, 5))
    targets = np.zeros((1, 3), int)
    valid = np.array([[True, True, False]])
    with pytest.raises(InputError):
        obj.masked_ce(logits, targets, _mask_from([(0, 2)], 2), valid)


def test_entropy_reg_uniform_rows():
    logits = np.zeros((1, 2, 16))
    mask = _mask_from([(0, 0), (0, 1)], 2)
    val, _ = obj.entropy_reg(logits, mask)
    assert val == pytest.approx(math.log(16), abs=1e-12)


def test_entropy_reg_peaked_rows_near_zero():
    logits = np.zeros((1, 2, 16))
    logits[:, :, 0] = 80.0
    val, _ = obj.entropy_reg(logits, _mask_from([(0, 0), (0, 1)], 2))
    assert val <= 1e-12


def test_entropy_reg_gradient_formula_and_fd():
    rng = np.random.default_rng(3)
    logits = rng.normal(0, 2, size=(1, 3, 8))
    mask = _mask_from([(0, 0), (0, 2)], 3)
    val, d = obj.entropy_reg(logits, mask)
    lp = nk.log_softmax(logits)
    p = np.exp(lp)
    for (b, t) in [(0, 0), (0, 2)]:
        h = -(p[b, t] * lp[b, t]).sum()
        expected = -p[b, t] * (lp[b, t] + h) / 2.0  # mean over the 2 masked rows
        assert np.allclose(d[b, t], expected, atol=1e-14)
    assert np.all(d[0, 1] == 0.0)

    def f(flat):
        v, dz = obj.entropy_reg(flat.reshape(1, 3, 8), mask)
        return v, dz.reshape(-1)

    assert nk.grad_check(f, logits.reshape(-1)) <= 1e-5


def test_kl_reg_zero_at_identity_with_zero_gradient():
    rng = np.random.default_rng(4)
    logits = rng.normal(0, 2, size=(1, 2, 6))
    mask = _mask_from([(0, 0), (0, 1)], 2)
    val, d = obj.kl_reg(logits, logits.copy(), mask)
    assert val == 0.0
    assert np.max(np.abs(d)) <= 1e-15


def test_kl_reg_gradient_fd():
    rng = np.random.default_rng(5)
    logits = rng.normal(0, 2, size=(2, 3, 6))
    ref = rng.normal(0, 2, size=(2, 3, 6))
    mask = _mask_from([(0, 1), (1, 0), (1, 2)], 6)

    def f(flat):
        v, dz = obj.kl_reg(flat.reshape(2, 3, 6), ref, mask)
        return v, dz.reshape(-1)

    assert nk.grad_check(f, logits.reshape(-1)) <= 1e-5


def test_kl_reg_shape_mismatch():
    with pytest.raises(InputError):
        obj.kl_reg(np.zeros((1, 2, 6)), np.zeros((1, 2, 7)), MaskSet.empty(0))


def test_eksft_reduces_to_sft():
    rng = np.random.default_rng(6)
    logits = rng.normal(0, 2, size=(2, 4, 9))
    ref = rng.normal(0, 2, size=(2, 4, 9))
    targets = rng.integers(0, 9, size=(2, 4))
    valid = np.ones((2, 4), bool)
    sft_val, sft_d = obj.sft_loss(logits, targets, valid)
    bd, d, mask = obj.eksft_loss(logits, ref, targets, 0.0, 0.0, 0.0, valid)
    assert abs(bd.total - sft_val) <= 1e-12
    assert np.array_equal(d, sft_d)
    assert mask.k == 0


def test_eksft_rejects_negative_weights():
    z = np.zeros((1, 2, 6))
    with pytest.raises(ConfigError):
        obj.eksft_loss(z, z, np.zeros((1, 2), int), 0.2, -0.1, 0.0, np.ones((1, 2), bool))


def test_eksft_breakdown_recomposes():
    rng = np.random.default_rng(7)
    for _ in range(20):
        logits = rng.normal(0, 2, size=(2, 5, 8))
        ref = rng.normal(0, 2, size=(2, 5, 8))
        targets = rng.integers(0, 8, size=(2, 5))
        valid = rng.random((2, 5)) < 0.8
        valid[:, 0] = True
        bd, _, mask = obj.eksft_loss(logits, ref, targets, 0.3, 0.05, 0.07, valid)
        recomposed = bd.ce_masked - bd.lambda_h * bd.entropy_reg + bd.lambda_kl * bd.kl_reg
        assert abs(bd.total - recomposed) <= 1e-12
        assert bd.n_supervised + bd.n_masked == int(valid.sum())
        assert bd.n_masked == len(mask.m_union)


def test_eksft_masked_gradient_is_label_free():
    rng = np.random.default_rng(8)
    for trial in range(10):
        logits = rng.normal(0, 2, size=(2, 6, 9))
        ref = rng.normal(0, 2, size=(2, 6, 9))
        targets = rng.integers(0, 9, size=(2, 6))
        valid = rng.random((2, 6)) < 0.9
        valid[:, 0] = True
        _, _, mask = obj.eksft_loss(logits, ref, targets, 0.3, 0.05, 0.05, valid)
        if not mask.m_union:
            continue
        bd1, d1 = obj.eksft_loss_given_mask(logits, ref, targets, mask, 0.05, 0.05, valid)
        permuted = targets.copy()
        for r in mask.m_union:
            permuted[r.sequence_index, r.token_position] = int(
                rng.integers(0, 9)
            )
        bd2, d2 = obj.eksft_loss_given_mask(logits, ref, permuted, mask, 0.05, 0.05, valid)
        assert np.array_equal(d1, d2)
        assert bd1.total == bd2.total


def test_eksft_full_model_fd(tiny_config):
    worst = 0.0
    for seed in range(5):
        params = conditioned_point(tiny_config, seed)
        rng = np.random.default_rng([seed, 7])
        ids, targets, valid = random_batch(rng, tiny_config)
        ref_params = conditioned_point(tiny_config, seed)
        for name in ref_params.tensors:
            ref_params.tensors[name] = ref_params.tensors[name] + rng.normal(
                0, 0.02, ref_params.tensors[name].shape
            )
        ref_logits = mdl.forward(ref_params, ids, want_cache=False)[0]
        logits0 = mdl.forward(params, ids, want_cache=False)[0]
        _, _, mask = obj.eksft_loss(logits0, ref_logits, targets, 0.2, 0.05, 0.05, valid)

        def f(flat):
            p = mdl.unflatten_params(tiny_config, flat)
            logits, cache = mdl.forward(p, ids)
            bd, d = obj.eksft_loss_given_mask(logits, ref_logits, targets, mask, 0.05, 0.05, valid)
            return bd.total, mdl.flatten_grads(p, mdl.backward(p, cache, d))

        x0 = mdl.flatten_params(params)
        _, g = f(x0)
        coords = nk.informative_coords(g, 40, np.random.default_rng([seed, 8]))
        worst = max(worst, nk.grad_check(f, x0, coords=coords))
    assert worst <= 1e-5


def test_dft_perfect_model_is_zero():
    logits = np.zeros((1, 2, 6))
    targets = np.array([[1, 2]])
    logits[0, [0, 1], targets[0]] = 60.0
    loss, _ = obj.dft_loss(logits, targets, np.ones((1, 2), bool))
    assert loss <= 1e-12


def test_dft_weight_vanishes_for_hard_tokens():
    # target probability 1e-6: the gradient row scales by ~1e-6
    p = np.full(5, (1 - 1e-6) / 4.0)
    p[0] = 1e-6
    logits = _logits_from_probs([[p]])
    targets = np.zeros((1, 1), int)
    valid = np.ones((1, 1), bool)
    loss, d = obj.dft_loss(logits, targets, valid)
    assert loss == pytest.approx(1e-6 * -math.log(1e-6), rel=1e-9)
    assert np.max(np.abs(d)) <= 2e-6


def test_dft_fd_with_frozen_weights():
    rng = np.random.default_rng(9)
    logits = rng.normal(0, 2, size=(2, 4, 7))
    targets = rng.integers(0, 7, size=(2, 4))
    valid = np.ones((2, 4), bool)
    lp = nk.log_softmax(logits)
    bi, li = np.nonzero(valid)
    w0 = np.exp(lp[bi, li, targets[bi, li]])

    def f(flat):
        loss, d = obj.dft_loss(flat.reshape(2, 4, 7), targets, valid, frozen_weights=w0)
        return loss, d.reshape(-1)

    assert nk.grad_check(f, logits.reshape(-1)) <= 1e-5


def test_random_mask_zero_drop_is_plain_ce():
    rng = np.random.default_rng(10)
    logits = rng.normal(0, 2, size=(2, 4, 6))
    ref = rng.normal(0, 2, size=(2, 4, 6))
    targets = rng.integers(0, 6, size=(2, 4))
    valid = np.ones((2, 4), bool)
    bd, d, mask = obj.random_mask_loss(
        logits, ref, targets, 0.0, 0.05, 0.05, valid, np.random.default_rng(0)
    )
    sft_val, sft_d = obj.sft_loss(logits, targets, valid)
    assert bd.total == sft_val
    assert np.array_equal(d, sft_d)
    assert mask.k == 0


def test_random_mask_size_and_determinism():
    rng = np.random.default_rng(11)
    logits = rng.normal(0, 2, size=(3, 10, 6))
    ref = rng.normal(0, 2, size=(3, 10, 6))
    targets = rng.integers(0, 6, size=(3, 10))
    valid = np.ones((3, 10), bool)  # |T| = 30
    masks = []
    for seed in range(10):
        _, _, mask = obj.random_mask_loss(
            logits, ref, targets, 0.10, 0.05, 0.05, valid, np.random.default_rng(seed)
        )
        assert len(mask.m_union) == math.ceil(0.10 * 30) == 3
        masks.append(mask.m_union)
    again = obj.random_mask_loss(
        logits, ref, targets, 0.10, 0.05, 0.05, valid, np.random.default_rng(4)
    )[2]
    assert again.m_union == masks[4]


def test_random_mask_rejects_bad_fraction():
    z = np.zeros((1, 2, 6))
    with pytest.raises(ConfigError):
        obj.random_mask_loss(
            z, z, np.zeros((1, 2), int), 1.0, 0.0, 0.0, np.ones((1, 2), bool),
            np.random.default_rng(0),
        )


def test_global_reg_reduces_to_sft():
    rng = np.random.default_rng(12)
    logits = rng.normal(0, 2, size=(2, 4, 6))
    ref = rng.normal(0, 2, size=(2, 4, 6))
    targets = rng.integers(0, 6, size=(2, 4))
    valid = np.ones((2, 4), bool)
    bd, d = obj.global_reg_loss(logits, ref, targets, 0.0, 0.0, valid)
    sft_val, sft_d = obj.sft_loss(logits, targets, valid)
    assert bd.total == sft_val
    assert np.array_equal(d, sft_d)


def test_global_reg_kl_zero_at_identity():
    rng = np.random.default_rng(13)
    logits = rng.normal(0, 2, size=(1, 3, 6))
    targets = rng.integers(0, 6, size=(1, 3))
    bd, _ = obj.global_reg_loss(logits, logits.copy(), targets, 0.05, 0.05, np.ones((1, 3), bool))
    assert bd.kl_reg == 0.0


def test_global_reg_fd():
    rng = np.random.default_rng(14)
    logits = rng.normal(0, 2, size=(2, 3, 6))
    ref = rng.normal(0, 2, size=(2, 3, 6))
    targets = rng.integers(0, 6, size=(2, 3))
    valid = np.ones((2, 3), bool)

    def f(flat):
        bd, d = obj.global_reg_loss(flat.reshape(2, 3, 6), ref, targets, 0.05, 0.05, valid)
        return bd.total, d.reshape(-1)

    assert nk.grad_check(f, logits.reshape(-1)) <= 1e-5


def test_ce_grad_norm_bound_and_limits():
    rng = np.random.default_rng(15)
    v = 11
    # bound holds for random distributions
    alphas = rng.uniform(0.1, 3.0, size=(100_000, v))
    p = rng.dirichlet(np.ones(v), size=1)  # warm up
    p = np.stack([rng.dirichlet(a) for a in alphas[:2000]])  # sampled subset per-row alphas
    y = rng.integers(0, v, size=p.shape[0])
    sq = (p * p).sum(axis=1) + 1.0 - 2.0 * p[np.arange(p.shape[0]), y]
    assert np.all(sq <= 2.0 * (1.0 - p[np.arange(p.shape[0]), y]) + 1e-15)
    # near-uniform limit
    u = np.full(v, 1.0 / v)
    assert obj.ce_grad_sq_norm(u, 3) == pytest.approx(1.0 - 1.0 / v, abs=1e-12)
    # high-confidence limit with the leftover mass on one competitor
    for eps in (1e-2, 1e-3):
        row = np.zeros(v)
        row[0] = 1.0 - eps
        row[1] = eps
        assert obj.ce_grad_sq_norm(row, 0) == pytest.approx(2.0 * eps**2, abs=10 * eps**3)
