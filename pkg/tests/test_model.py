import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.special import expit

from cmcm import autodiff as ad
from cmcm.autodiff import Tape, finite_diff_check
from cmcm.errors import DimMismatch, MissingGmm
from cmcm.gmm import GmmMarginal
from cmcm.model import (ModelConfig, MultimodalBatch, classify, encode, fuse, init_params,
                        lstm_cell, model_forward)


def _setup(n=6, dims=(3, 4), hidden=5, latent=4, seed=0):
    cfg = ModelConfig(dims, hidden=hidden, latent=latent)
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    params["clf.w"] = rng.normal(size=latent)
    x = [rng.normal(size=(n, d)) for d in dims]
    mask = np.ones((n, len(dims)), dtype=bool)
    y = (rng.random(n) < 0.5).astype(float)
    return cfg, params, MultimodalBatch(x, mask, y)


def _on_tape(params):
    tape = Tape()
    return tape, {k: tape.constant(v) for k, v in params.items()}


def test_zero_encoder_gives_zero_embedding():
    cfg, params, batch = _setup()
    zero = {k: np.zeros_like(v) for k, v in params.items()}
    _, p = _on_tape(zero)
    z = encode(p["enc0.W1"].tape.constant(batch.x[0]), 0, p)
    assert np.all(z.value == 0)


def test_embedding_dims_match_latent():
    cfg, params, batch = _setup()
    _, p = _on_tape(params)
    tape = p["enc0.W1"].tape
    for m in range(2):
        assert encode(tape.constant(batch.x[m]), m, p).shape == (6, cfg.latent)


def test_encoder_dim_mismatch():
    cfg, params, batch = _setup()
    _, p = _on_tape(params)
    with pytest.raises(DimMismatch):
        encode(p["enc0.W1"].tape.constant(batch.x[1]), 0, p)


def test_encoder_first_layer_gradient():
    cfg, params, batch = _setup()

    def fn(w1):
        p = {k: w1.tape.constant(v) for k, v in params.items()}
        p["enc0.W1"] = w1
        return (encode(w1.tape.constant(batch.x[0]), 0, p) ** 2).sum()

    assert finite_diff_check(fn, params["enc0.W1"]) < 1e-4


def test_fuse_zero_weights_stays_zero():
    cfg, params, _ = _setup()
    zero = {k: np.zeros_like(v) for k, v in params.items()}
    _, p = _on_tape(zero)
    tape = p["lstm0.W"].tape
    h = fuse([tape.constant(np.zeros((2, 4))), tape.constant(np.zeros((2, 4)))], p)
    assert np.all(h.value == 0)


def test_fuse_single_step_hand_unrolled():
    cfg, params, _ = _setup()
    x = np.random.default_rng(3).normal(size=(2, 4))
    _, p = _on_tape(params)
    out = fuse([p["lstm0.W"].tape.constant(x)], p).value

    def cell(inp, W, b):
        d = 4
        g = inp @ W + b                  # h = c = 0, so U drops out
        i, o = expit(g[:, :d]), expit(g[:, 3 * d:])
        c = i * np.tanh(g[:, 2 * d:3 * d])
        return o * np.tanh(c)

    h1 = cell(x, params["lstm0.W"], params["lstm0.b"])
    h2 = cell(h1, params["lstm1.W"], params["lstm1.b"])
    assert_allclose(out, h2, rtol=1e-14)


def test_fuse_is_order_sensitive():
    cfg, params, _ = _setup()
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    _, p = _on_tape(params)
    tape = p["lstm0.W"].tape
    ab = fuse([tape.constant(a), tape.constant(b)], p).value
    ba = fuse([tape.constant(b), tape.constant(a)], p).value
    assert not np.allclose(ab, ba)


def test_fuse_dim_mismatch():
    cfg, params, _ = _setup()
    _, p = _on_tape(params)
    with pytest.raises(DimMismatch):
        fuse([p["lstm0.W"].tape.constant(np.zeros((2, 5)))], p)


def test_lstm_forget_bias_initialized_to_one():
    cfg, params, _ = _setup()
    for layer in range(2):
        assert_array_equal(params[f"lstm{layer}.b"][4:8], 1.0)
        assert np.abs(params[f"lstm{layer}.W"]).max() <= 0.5


def test_classifier_zero_weights():
    cfg, params, _ = _setup()
    _, p = _on_tape({**params, "clf.w": np.zeros(4)})
    y = classify(p["clf.w"].tape.constant(np.ones((3, 4))), p)
    assert_array_equal(y.value, 0.5)


def test_classifier_monotone_in_logit():
    tape = Tape()
    p = {"clf.w": tape.constant(np.ones(1)), "clf.b": tape.constant(0.0)}
    y = classify(tape.constant(np.linspace(0, 40, 50).reshape(-1, 1)), p).value
    assert np.all(np.diff(y) >= 0)
    assert y[-1] < 1.0 and y[-1] > 1 - 1e-11


def test_classifier_gradient():
    rng = np.random.default_rng(1)
    h = rng.normal(size=(5, 3))

    def fn(w):
        return classify(w.tape.constant(h), {"clf.w": w, "clf.b": w.tape.constant(0.2)}).sum()

    assert finite_diff_check(fn, rng.normal(size=3)) < 1e-4
    with pytest.raises(DimMismatch):
        tape = Tape()
        classify(tape.constant(h), {"clf.w": tape.constant(np.ones(4)), "clf.b": tape.constant(0.0)})


def test_forward_all_present_is_deterministic():
    cfg, params, batch = _setup()
    a, _ = model_forward(batch, params, cfg, seed=1)
    b, _ = model_forward(batch, params, cfg, seed=2)
    assert_array_equal(a.value, b.value)


def test_eval_with_full_mask_consumes_no_randomness():
    cfg, params, batch = _setup()
    rng = np.random.default_rng(5)
    before = rng.bit_generator.state
    model_forward(batch, params, cfg, mode="eval", seed=rng)
    assert rng.bit_generator.state == before


def test_degenerate_mixture_imputes_the_mean():
    cfg, params, batch = _setup()
    batch.mask[::2, 1] = False
    mean = np.arange(4.0)
    g = GmmMarginal(mean.reshape(1, 4), np.full((1, 4), -60.0))
    for mode in ("eval", "train"):
        _, z = model_forward(batch, params, cfg, gmms={1: g}, mode=mode, seed=0)
        assert_allclose(z[1].value[::2], np.tile(mean, (3, 1)), atol=1e-20)
        assert not np.allclose(z[1].value[1::2], mean)


def test_missing_mixture_raises():
    cfg, params, batch = _setup()
    batch.mask[0, 1] = False
    with pytest.raises(MissingGmm):
        model_forward(batch, params, cfg, gmms={}, seed=0)


def test_forward_with_imputation_is_seeded():
    cfg, params, batch = _setup()
    batch.mask[:3, 0] = False
    g = {0: GmmMarginal.init(2, 4, np.random.default_rng(0))}
    a, _ = model_forward(batch, params, cfg, gmms=g, mode="train", seed=9)
    b, _ = model_forward(batch, params, cfg, gmms=g, mode="train", seed=9)
    c, _ = model_forward(batch, params, cfg, gmms=g, mode="train", seed=10)
    assert_array_equal(a.value, b.value)
    assert not np.array_equal(a.value, c.value)


def test_predictions_strictly_inside_unit_interval():
    cfg, params, batch = _setup()
    params = {k: v * 50 for k, v in params.items()}
    y, _ = model_forward(batch, params, cfg)
    assert np.all((y.value > 0) & (y.value < 1))


def test_end_to_end_gradient():
    cfg, params, batch = _setup(n=4)
    batch.mask[1, 1] = False
    g = {1: GmmMarginal.init(2, 4, np.random.default_rng(0))}
    names = sorted(params)
    sizes = [params[k].size for k in names]
    theta0 = np.concatenate([params[k].ravel() for k in names])

    def fn(theta):
        p, k = {}, 0
        for name, s in zip(names, sizes):
            p[name] = theta[k:k + s].reshape(params[name].shape)
            k += s
        y, _ = model_forward(batch, p, cfg, gmms=g, mode="train", seed=3)
        return y.mean()

    assert finite_diff_check(fn, theta0, eps=1e-6) < 1e-3


def test_batch_validation():
    with pytest.raises(DimMismatch):
        MultimodalBatch([np.zeros((3, 2))], np.ones((2, 1), bool), np.zeros(3))
    with pytest.raises(ValueError):
        ModelConfig([2, 2], order=[0, 0])


def test_batches_cover_rows_once():
    _, _, batch = _setup(n=10)
    batch.ids = np.arange(10)
    seen = np.concatenate([b.ids for b in batch.batches(3, seed=0)])
    assert sorted(seen) == list(range(10))
    assert not np.array_equal(seen, np.arange(10))
