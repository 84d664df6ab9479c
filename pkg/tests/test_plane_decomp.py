from __future__ import annotations

import numpy as np
import pytest

from app.exception_handlers import DimensionMismatchError
from app.exception_handlers import InvalidParameterError
from app.exception_handlers import TensorFileError
from app.modules.plane_decomp import PlaneDecoderWeights
from app.modules.plane_decomp import PlaneFeatures
from app.modules.plane_decomp import combine_planes
from app.modules.plane_decomp import cross_attn
from app.modules.plane_decomp import cross_attn_grad_u
from app.modules.plane_decomp import cross_attn_probabilities
from app.modules.plane_decomp import read_tensor
from app.modules.plane_decomp import read_tensors
from app.modules.plane_decomp import write_tensor
from app.modules.plane_decomp import write_tensors

D = 8


@pytest.fixture
def weights():
    return PlaneDecoderWeights.random(D, 4, seed=3)


@pytest.fixture
def latent():
    return np.random.default_rng(5).normal(size=(6, D))


def _softmax_rows(x):
    out = np.empty_like(x)
    for i, row in enumerate(x):
        e = np.exp(row - row.max())
        out[i] = e / e.sum()
    return out


def dense_cross_attn(u, h, w):
    scale = 1.0 / np.sqrt(D)
    p1 = _softmax_rows((u @ w.sa_wq.T) @ (u @ w.sa_wk.T).T * scale)
    s = p1 @ (u @ w.sa_wv.T)
    p2 = _softmax_rows((s @ w.wq.T) @ (h @ w.wk.T).T * scale)
    return p2 @ (h @ w.wv.T)


def test_single_key_returns_its_value(weights):
    h = np.random.default_rng(1).normal(size=(1, D))
    out = cross_attn(weights.u, h, weights)
    np.testing.assert_allclose(out, np.tile(h @ weights.wv.T, (4, 1)), atol=1e-12)


def test_probabilities_rows_sum_to_one(weights, latent):
    p = cross_attn_probabilities(weights.u, latent, weights)
    assert p.shape == (4, 6)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p >= 0.0)


def test_matches_dense_oracle(weights, latent):
    np.testing.assert_allclose(
        cross_attn(weights.u, latent, weights), dense_cross_attn(weights.u, latent, weights), atol=1e-12
    )


def test_output_in_convex_hull_of_values(weights, latent):
    values = latent @ weights.wv.T
    out = cross_attn(weights.u, latent, weights)
    assert np.all(out >= values.min(axis=0) - 1e-12)
    assert np.all(out <= values.max(axis=0) + 1e-12)


@pytest.mark.parametrize("seed", range(100))
def test_convex_hull_random_cases(seed):
    rng = np.random.default_rng(seed)
    weights = PlaneDecoderWeights.random(D, int(rng.integers(1, 6)), seed=seed)
    h = rng.normal(scale=rng.uniform(0.5, 3.0), size=(int(rng.integers(1, 10)), D))
    values = h @ weights.wv.T
    out = cross_attn(weights.u, h, weights)
    assert np.all(out >= values.min(axis=0) - 1e-12)
    assert np.all(out <= values.max(axis=0) + 1e-12)


def test_invariant_to_latent_row_order(weights, latent):
    permuted = latent[np.random.default_rng(2).permutation(len(latent))]
    np.testing.assert_allclose(
        cross_attn(weights.u, permuted, weights), cross_attn(weights.u, latent, weights), atol=1e-12
    )


def test_grad_u_matches_finite_differences(weights, latent):
    rng = np.random.default_rng(9)
    grad_out = rng.normal(size=(4, D))
    analytic = cross_attn_grad_u(weights.u, latent, weights, grad_out)
    numeric = np.zeros_like(weights.u)
    h = 1e-6
    for index in np.ndindex(weights.u.shape):
        plus, minus = weights.u.copy(), weights.u.copy()
        plus[index] += h
        minus[index] -= h
        numeric[index] = (
            np.sum(grad_out * cross_attn(plus, latent, weights))
            - np.sum(grad_out * cross_attn(minus, latent, weights))
        ) / (2 * h)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-5, atol=1e-8)


@pytest.mark.parametrize(
    "u_shape, h_shape",
    [
        ((4, D + 1), (6, D)),
        ((4, D), (6, D - 1)),
        ((4, D), (0, D)),
    ],
)
def test_dimension_mismatch(weights, u_shape, h_shape):
    with pytest.raises(DimensionMismatchError):
        cross_attn(np.zeros(u_shape), np.zeros(h_shape), weights)


def test_random_weights_are_seeded():
    a = PlaneDecoderWeights.random(D, 4, seed=11)
    b = PlaneDecoderWeights.random(D, 4, seed=11)
    c = PlaneDecoderWeights.random(D, 4, seed=12)
    np.testing.assert_array_equal(a.wq, b.wq)
    assert not np.array_equal(a.wq, c.wq)
    assert np.all(np.abs(a.u) <= 1.0 / np.sqrt(D))


def test_weights_validate_shapes():
    good = PlaneDecoderWeights.random(D, 4)
    with pytest.raises(DimensionMismatchError):
        PlaneDecoderWeights(
            wq=np.zeros((D, D + 1)),
            wk=good.wk,
            wv=good.wv,
            u=good.u,
            sa_wq=good.sa_wq,
            sa_wk=good.sa_wk,
            sa_wv=good.sa_wv,
        )
    with pytest.raises(InvalidParameterError):
        PlaneDecoderWeights.random(0, 4)


def test_combine_planes_channels():
    rng = np.random.default_rng(4)
    f_xy = rng.normal(size=(8, 8, 64))
    f_xz = rng.normal(size=(8, 8, 64))
    combined = combine_planes(f_xy, -f_xz, f_xz)
    assert combined.shape == (8, 8, 128)
    np.testing.assert_array_equal(combined[..., :64], f_xy)
    np.testing.assert_array_equal(combined[..., 64:], 0.0)
    features = PlaneFeatures(f_xy=f_xy, f_yz=f_xz, f_xz=f_xz)
    np.testing.assert_allclose(features.combine()[..., 64:], 2.0 * f_xz)


@pytest.mark.parametrize(
    "shapes",
    [
        ((8, 8, 4), (8, 7, 4), (8, 8, 4)),
        ((8, 8, 4), (8, 8, 4), (8, 8, 5)),
        ((8, 8), (8, 8, 4), (8, 8, 4)),
    ],
)
def test_combine_planes_mismatch(shapes):
    with pytest.raises(DimensionMismatchError):
        combine_planes(*(np.zeros(s) for s in shapes))


def test_tensor_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = [rng.normal(size=(3, 4)).astype(np.float32), np.arange(5, dtype=np.float32), np.float32(2.5)]
    path = tmp_path / "t.fdgt"
    write_tensors(path, tensors)
    loaded = read_tensors(path)
    assert [t.shape for t in loaded] == [(3, 4), (5,), ()]
    for original, value in zip(tensors, loaded):
        assert value.dtype == np.float64
        np.testing.assert_array_equal(value, original)
    header = path.read_bytes()[:16]
    assert header[:4] == b"FDGT"
    assert int.from_bytes(header[4:8], "little") == 2


def test_decoder_weights_save_load(tmp_path, weights):
    path = tmp_path / "weights" / "decoder.fdgt"
    weights.save(path)
    loaded = PlaneDecoderWeights.load(path)
    np.testing.assert_array_equal(loaded.u, weights.u.astype(np.float32))
    assert loaded.d == D


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.fdgt"
    path.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(TensorFileError):
        read_tensor(path)


@pytest.mark.parametrize("cut", [2, 6, 12, 20])
def test_truncated_file(tmp_path, cut):
    path = tmp_path / "t.fdgt"
    write_tensor(path, np.ones((2, 3)))
    data = path.read_bytes()
    path.write_bytes(data[:cut])
    with pytest.raises(TensorFileError):
        read_tensor(path)


def test_load_wrong_tensor_count(tmp_path):
    path = tmp_path / "one.fdgt"
    write_tensor(path, np.ones((2, 2)))
    with pytest.raises(TensorFileError):
        PlaneDecoderWeights.load(path)
