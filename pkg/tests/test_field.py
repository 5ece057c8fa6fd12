import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nbmf.field import (CheckpointError, EncodingConfig, Layer, NeuralField, StaleCacheError,
                        encode, field_eval, init_field, load_checkpoint, mlp_backward, mlp_forward,
                        read_checkpoint_header, save_checkpoint)


def test_encode_zero():
    f = encode([[0.0, 0.0]], EncodingConfig(d_freq=3))
    np.testing.assert_allclose(f[0], [0, 1] * 6, atol=1e-15)


def test_encode_half():
    f = encode([[0.5, 0.0]], EncodingConfig(d_freq=1))
    np.testing.assert_allclose(f[0, :2], [1.0, 0.0], atol=1e-15)


def test_encode_quarter_two_octaves():
    f = encode([[0.25, 0.0]], EncodingConfig(d_freq=2))
    r = math.sqrt(2) / 2
    np.testing.assert_allclose(f[0, :4], [r, r, 1.0, 0.0], atol=1e-15)


def test_encode_raw_first():
    cfg = EncodingConfig(d_freq=2, include_raw=True)
    f = encode([[0.3, -0.7]], cfg)
    assert f.shape == (1, cfg.width) == (1, 10)
    np.testing.assert_allclose(f[0, :2], [0.3, -0.7])


def test_encode_rejects_unnormalised():
    with pytest.raises(ValueError):
        encode([[1.5, 0.0]], EncodingConfig())


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 10), st.booleans(), st.sampled_from([2, 3]),
       st.lists(st.floats(-1, 1), min_size=3, max_size=3))
@pytest.mark.property
def test_encode_range_and_width(d, raw, n, x):
    cfg = EncodingConfig(d, raw, n)
    f = encode(np.array([x[:n]]), cfg)
    assert f.shape == (1, n * 2 * d + (n if raw else 0))
    assert np.all(np.abs(f) <= 1.0)


def linear_field(W, b, enc=EncodingConfig(d_freq=1, n_coords=2)):
    W = np.asarray(W, dtype=float)
    return NeuralField(enc, [Layer(W, np.asarray(b, dtype=float), "linear")], (), W.shape[1], 1.0)


def test_zero_parameters_give_zero():
    fld = init_field(EncodingConfig(4), (16, 16), (1,), 2, 100.0)
    for p in fld.params():
        p[...] = 0
    out, _ = mlp_forward(fld, np.random.default_rng(0).uniform(-1, 1, (5, 16)))
    np.testing.assert_array_equal(out, 0)
    np.testing.assert_array_equal(field_eval(fld, [[10.0, -20.0, 0.0]]), [[0, 0]])


def test_single_linear_layer_hand_product():
    enc = EncodingConfig(d_freq=1, include_raw=False, n_coords=2)   # width 4
    W = np.array([[1.0, 2.0, 0.0],
                  [0.0, 1.0, 3.0],
                  [4.0, 0.0, 1.0],
                  [0.0, 0.0, 0.0]])
    fld = linear_field(W, [0.5, -1.0, 0.0], enc)
    out, _ = mlp_forward(fld, [[1.0, 0.0, 0.0, 0.0], [0.0, 2.0, 1.0, 0.0]])
    # rows: e1 -> first row of W plus bias; second input 2*row2 + row3
    np.testing.assert_allclose(out, [[1.5, 1.0, 0.0], [4.5, 1.0, 7.0]])


def test_batch_equals_per_sample():
    fld = init_field(EncodingConfig(3), (8, 8), (1,), 2, 50.0, seed=3)
    x = np.random.default_rng(1).uniform(-1, 1, (7, 12))
    batch, _ = mlp_forward(fld, x)
    single = np.vstack([mlp_forward(fld, x[i:i + 1])[0] for i in range(7)])
    np.testing.assert_allclose(batch, single, rtol=1e-13, atol=1e-15)


def test_shape_mismatch_rejected():
    fld = init_field(EncodingConfig(3), (8,), (), 2, 1.0)
    with pytest.raises(ValueError):
        mlp_forward(fld, np.zeros((2, 5)))


def test_backward_zero_upstream():
    fld = init_field(EncodingConfig(3), (8, 8), (1,), 2, 1.0, seed=2)
    out, cache = mlp_forward(fld, np.random.default_rng(0).uniform(-1, 1, (4, 12)))
    gb = mlp_backward(fld, cache, np.zeros_like(out))
    assert all(np.all(a == 0) for a in gb.params())


def test_backward_linear_layer():
    fld = linear_field(np.random.default_rng(0).normal(size=(4, 3)), np.zeros(3))
    f = np.array([[0.1, -0.4, 0.7, 0.2]])
    u = np.array([[1.0, -2.0, 0.5]])
    _, cache = mlp_forward(fld, f)
    (dW, db), = mlp_backward(fld, cache, u).grads
    np.testing.assert_allclose(dW, f.T @ u)
    np.testing.assert_allclose(db, u[0])


def objective(fld, x, u):
    return float(np.sum(mlp_forward(fld, x)[0] * u))


@pytest.mark.property
@pytest.mark.parametrize("skip", [(), (1,)])
def test_backward_matches_finite_differences(skip):
    rng = np.random.default_rng(11)
    fld = init_field(EncodingConfig(2), (6, 5), skip, 2, 1.0, seed=5)
    for p in fld.params():
        p += rng.normal(scale=0.1, size=p.shape)      # nonzero biases
    x = encode(rng.uniform(-1, 1, (9, 2)), fld.enc)
    u = rng.normal(size=(9, 2))
    _, cache = mlp_forward(fld, x)
    analytic = mlp_backward(fld, cache, u).flat()
    numeric = []
    h = 1e-5
    for p in fld.params():
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            fp = objective(fld, x, u)
            p[idx] = old - h
            fm = objective(fld, x, u)
            p[idx] = old
            numeric.append((fp - fm) / (2 * h))
    numeric = np.array(numeric)
    rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
    assert rel < 1e-6


@pytest.mark.property
def test_relu_tie_has_zero_derivative():
    enc = EncodingConfig(d_freq=1, n_coords=2)
    W0 = np.zeros((4, 1))
    W0[0, 0] = 1.0
    fld = NeuralField(enc, [Layer(W0, np.zeros(1), "relu"), Layer(np.ones((1, 1)), np.zeros(1), "linear")],
                      (), 1, 1.0)
    _, cache = mlp_forward(fld, [[0.0, 1.0, 0.0, 1.0]])   # pre-activation exactly 0
    gb = mlp_backward(fld, cache, [[1.0]])
    assert np.all(gb.grads[0][0] == 0) and np.all(gb.grads[0][1] == 0)


def test_stale_cache_rejected():
    fld = init_field(EncodingConfig(2), (4,), (), 2, 1.0)
    out, cache = mlp_forward(fld, np.zeros((1, 8)))
    fld.bump()
    with pytest.raises(StaleCacheError):
        mlp_backward(fld, cache, np.ones_like(out))
    other = fld.copy()
    with pytest.raises(StaleCacheError):
        mlp_backward(other, mlp_forward(fld, np.zeros((1, 8)))[1], np.ones_like(out))


def test_field_eval_normalisation():
    R = 132.0
    enc = EncodingConfig(d_freq=1, n_coords=2)
    W = np.array([[1.0], [2.0], [3.0], [4.0]])
    fld = NeuralField(enc, [Layer(W, np.zeros(1), "linear")], (), 1, R)
    out = field_eval(fld, [[0.0, 0.0, 0.0], [R, 0.0, 0.0]])
    # features at the origin: sin0, cos0 for x and y -> (0, 1, 0, 1)
    assert out[0, 0] == pytest.approx(2.0 + 4.0)
    # at x = R: sin(pi) = 0, cos(pi) = -1 for x; y still (0, 1)
    assert out[1, 0] == pytest.approx(-2.0 + 4.0, abs=1e-12)


def test_field_eval_deterministic():
    fld = init_field(EncodingConfig(8), (32, 32), (1,), 2, 100.0, seed=9)
    pts = np.random.default_rng(0).uniform(-100, 100, (50, 3))
    np.testing.assert_array_equal(field_eval(fld, pts), field_eval(fld, pts))


def test_out_of_fov_points_are_clipped():
    fld = init_field(EncodingConfig(4), (8,), (), 2, 10.0, seed=1)
    np.testing.assert_array_equal(field_eval(fld, [[25.0, 3.0]]), field_eval(fld, [[10.0, 3.0]]))


@pytest.mark.property
def test_he_initialisation_preserves_signal():
    fld = init_field(EncodingConfig(8), (256,) * 8, (4,), 2, 1.0, seed=0)
    x = np.random.default_rng(0).normal(size=(4096, fld.enc.width))
    _, cache = mlp_forward(fld, x)
    for i, h in enumerate(cache.outputs[:-1]):
        if i + 1 in fld.skip_at:
            continue
        ms = float(np.mean(h ** 2))
        assert 0.5 <= ms <= 2.0, (i, ms)


def test_checkpoint_roundtrip(tmp_path):
    fld = init_field(EncodingConfig(5, True), (16, 16, 16), (2,), 2, 123.4, seed=4)
    save_checkpoint(fld, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt", expected_hash=fld.architecture_hash())
    for p, q in zip(fld.params(), back.params()):
        np.testing.assert_array_equal(p, q)
    assert back.fov_radius == 123.4 and back.skip_at == (2,) and back.enc == fld.enc
    hdr = read_checkpoint_header(tmp_path / "a.ckpt")
    assert hdr["arch_hash"] == fld.architecture_hash()


def test_checkpoint_hash_validation(tmp_path):
    fld = init_field(EncodingConfig(3), (8,), (), 2, 1.0)
    save_checkpoint(fld, tmp_path / "a.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "a.ckpt", expected_hash="0" * 16)
    raw = (tmp_path / "a.ckpt").read_bytes()
    tampered = raw.replace(fld.architecture_hash().encode(), b"f" * 16)
    (tmp_path / "b.ckpt").write_bytes(tampered)
    with pytest.raises(CheckpointError, match="hash"):
        load_checkpoint(tmp_path / "b.ckpt")
    (tmp_path / "c.ckpt").write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c.ckpt")


def test_checkpoint_parameter_blocks_are_float64_le(tmp_path):
    fld = init_field(EncodingConfig(2), (3,), (), 2, 1.0, seed=0, dtype=np.float32)
    save_checkpoint(fld, tmp_path / "a.ckpt")
    raw = (tmp_path / "a.ckpt").read_bytes()
    n = fld.n_params()
    tail = np.frombuffer(raw[-8 * n:], dtype="<f8")
    np.testing.assert_array_equal(tail, np.concatenate([p.ravel() for p in fld.params()]).astype(np.float64))
    assert load_checkpoint(tmp_path / "a.ckpt").dtype == np.float32


def test_bad_architecture_rejected():
    enc = EncodingConfig(2)
    with pytest.raises(ValueError):
        NeuralField(enc, [Layer(np.zeros((3, 2)), np.zeros(2), "linear")], (), 2, 1.0)
    with pytest.raises(ValueError):
        NeuralField(enc, [Layer(np.zeros((8, 3)), np.zeros(3), "linear")], (), 2, 1.0)
