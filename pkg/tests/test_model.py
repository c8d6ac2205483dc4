import json
import math

import numpy as np
import pytest

from eksft import model as mdl
from eksft import numerics as nk
from eksft import objective as obj
from eksft import train as tr
from eksft.errors import (
    ConfigError,
    InputError,
    LengthError,
    ManifestError,
    ShapeMismatchError,
    TruncatedBlobError,
)

from conftest import conditioned_point, random_batch


def test_init_deterministic(tiny_config):
    a = mdl.init(tiny_config)
    b = mdl.init(tiny_config)
    for name in a.tensors:
        assert np.array_equal(a.tensors[name], b.tensors[name])


def test_init_rejects_indivisible_heads():
    with pytest.raises(ConfigError):
        mdl.ModelConfig(d_model=63, n_heads=2)


def test_init_rejects_tiny_vocab():
    with pytest.raises(ConfigError):
        mdl.ModelConfig(vocab_size=4)


def test_init_weight_scale_matches_seeded_normal():
    cfg = mdl.ModelConfig(vocab_size=16, d_model=32, n_layers=2, n_heads=2, context_len=32, seed=11)
    params = mdl.init(cfg)
    weights = np.concatenate(
        [t.reshape(-1) for name, t in params.tensors.items() if t.ndim == 2]
    )
    # |N(0, s)| has mean s*sqrt(2/pi) and std s*sqrt(1 - 2/pi)
    s = mdl.INIT_STD
    expected = s * math.sqrt(2.0 / math.pi)
    tol = 3.0 * s * math.sqrt(1.0 - 2.0 / math.pi) / math.sqrt(weights.size)
    assert abs(np.abs(weights).mean() - expected) <= tol


def test_forward_causality(tiny_config):
    params = mdl.init(tiny_config)
    rng = np.random.default_rng(0)
    ids = rng.integers(0, tiny_config.vocab_size, size=(1, 7))
    base, _ = mdl.forward(params, ids, want_cache=False)
    for t in range(1, 7):
        perturbed = ids.copy()
        perturbed[0, t] = (perturbed[0, t] + 1) % tiny_config.vocab_size
        out, _ = mdl.forward(params, perturbed, want_cache=False)
        assert np.array_equal(out[0, :t], base[0, :t])


def test_forward_batch_purity(tiny_config):
    params = mdl.init(tiny_config)
    ids = np.array([[1, 4, 5, 6], [1, 4, 5, 6], [1, 4, 5, 6]])
    out, _ = mdl.forward(params, ids, want_cache=False)
    assert np.array_equal(out[0], out[1])
    assert np.array_equal(out[1], out[2])


def test_forward_rejects_bad_ids(tiny_config):
    params = mdl.init(tiny_config)
    with pytest.raises(InputError):
        mdl.forward(params, np.array([[0, 99]]))
    with pytest.raises(LengthError):
        mdl.forward(params, np.zeros((1, tiny_config.context_len + 1), dtype=int))


def test_full_nll_gradient_matches_fd(tiny_config):
    worst = 0.0
    for seed in range(5):
        params = conditioned_point(tiny_config, seed)
        rng = np.random.default_rng(seed)
        ids, targets, valid = random_batch(rng, tiny_config)

        def f(flat):
            p = mdl.unflatten_params(tiny_config, flat)
            logits, cache = mdl.forward(p, ids)
            loss, d = obj.sft_loss(logits, targets, valid)
            return loss, mdl.flatten_grads(p, mdl.backward(p, cache, d))

        x0 = mdl.flatten_params(params)
        _, g = f(x0)
        coords = nk.informative_coords(g, 40, np.random.default_rng([seed, 1]))
        worst = max(worst, nk.grad_check(f, x0, coords=coords))
    assert worst <= 1e-5


def test_reference_snapshot_kl_zero(tiny_config):
    from eksft.selection import batch_kl

    params = mdl.init(tiny_config)
    ref = mdl.snapshot_reference(params)
    ids = np.array([[1, 4, 5, 6, 7]])
    logits, _ = mdl.forward(params, ids, want_cache=False)
    lp = nk.log_softmax(logits)
    assert np.allclose(batch_kl(lp, nk.log_softmax(ref.logits(ids))), 0.0)


def test_reference_immutable_after_update(tiny_config):
    params = mdl.init(tiny_config)
    ref = mdl.snapshot_reference(params)
    ids = np.array([[1, 4, 5, 6, 7]])
    before = ref.logits(ids)

    targets = np.array([[4, 5, 6, 7, 2]])
    valid = np.ones((1, 5), dtype=bool)
    logits, cache = mdl.forward(params, ids)
    _, d = obj.sft_loss(logits, targets, valid)
    grads = mdl.backward(params, cache, d)
    tr.adamw_step(params, grads, tr.adamw_init(params), lr=1e-2)

    assert np.array_equal(ref.logits(ids), before)
    with pytest.raises(ValueError):
        ref.tensors["tok_emb"][0, 0] = 1.0  # read-only arrays


def test_checkpoint_round_trip(tmp_path, tiny_config):
    params = mdl.init(tiny_config)
    mdl.save_checkpoint(params, tmp_path / "ckpt")
    loaded = mdl.load_checkpoint(tmp_path / "ckpt")
    for name in params.tensors:
        assert np.array_equal(
            loaded.tensors[name], params.tensors[name].astype(np.float32).astype(np.float64)
        )


def test_checkpoint_round_trip_is_idempotent(tmp_path, tiny_config):
    params = mdl.init(tiny_config)
    mdl.save_checkpoint(params, tmp_path / "a")
    once = mdl.load_checkpoint(tmp_path / "a")
    mdl.save_checkpoint(once, tmp_path / "b")
    twice = mdl.load_checkpoint(tmp_path / "b")
    for name in once.tensors:
        assert np.array_equal(once.tensors[name], twice.tensors[name])


def test_checkpoint_hash_mismatch(tmp_path, tiny_config):
    params = mdl.init(tiny_config)
    manifest_path, _ = mdl.save_checkpoint(params, tmp_path / "ckpt")
    manifest = json.loads(manifest_path.read_text())
    manifest["config_hash"] = "0" * 64
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(ManifestError):
        mdl.load_checkpoint(tmp_path / "ckpt")


def test_checkpoint_corrupt_manifest(tmp_path, tiny_config):
    params = mdl.init(tiny_config)
    manifest_path, _ = mdl.save_checkpoint(params, tmp_path / "ckpt")
    manifest_path.write_text("{not json")
    with pytest.raises(ManifestError):
        mdl.load_checkpoint(tmp_path / "ckpt")


def test_checkpoint_truncated_blob(tmp_path, tiny_config):
    params = mdl.init(tiny_config)
    _, weights_path = mdl.save_checkpoint(params, tmp_path / "ckpt")
    data = weights_path.read_bytes()
    weights_path.write_bytes(data[: len(data) // 2])
    with pytest.raises(TruncatedBlobError):
        mdl.load_checkpoint(tmp_path / "ckpt")


def test_checkpoint_shape_mismatch(tmp_path, tiny_config):
    params = mdl.init(tiny_config)
    manifest_path, _ = mdl.save_checkpoint(params, tmp_path / "ckpt")
    manifest = json.loads(manifest_path.read_text())
    manifest["tensors"][0]["shape"] = [1, 1]
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(ShapeMismatchError):
        mdl.load_checkpoint(tmp_path / "ckpt")


def test_checkpoint_round_trip_drift_below_threshold(tmp_path, tiny_config):
    from eksft.analyze import parameter_drift

    params = mdl.init(tiny_config)
    mdl.save_checkpoint(params, tmp_path / "ckpt")
    loaded = mdl.load_checkpoint(tmp_path / "ckpt")
    report = parameter_drift(params, loaded, thresholds=(1e-3,))
    assert report.global_frac_exceeding[1e-3] == 0.0


def test_reference_survives_round_trip_bit_exact(tmp_path, tiny_config):
    params = mdl.init(tiny_config)
    ref = mdl.snapshot_reference(params)
    mdl.save_checkpoint(ref.as_params(), tmp_path / "ref")
    loaded = mdl.load_checkpoint(tmp_path / "ref")
    for name in ref.tensors:
        assert np.array_equal(
            loaded.tensors[name].astype(np.float32), ref.tensors[name].astype(np.float32)
        )
