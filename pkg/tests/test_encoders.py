import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scriptmot.encoders import (
    BadDimensions,
    patchify,
    unpatchify,
    vae_basis,
    vae_stub_decode,
    vae_stub_encode,
    vit_stub_encode,
)


def test_basis_orthonormal():
    B = vae_basis()
    assert B.shape == (192, 16)
    assert np.allclose(B.T @ B, np.eye(16), atol=1e-12)


def test_encode_decode_encode_exact():
    z = np.random.default_rng(0).standard_normal((16, 8, 8))
    assert np.allclose(vae_stub_encode(vae_stub_decode(z)), z, atol=1e-12)


def test_block_constant_image_round_trips():
    rng = np.random.default_rng(1)
    img = np.kron(rng.uniform(size=(8, 8, 3)), np.ones((8, 8, 1)))
    assert img.shape == (64, 64, 3)
    assert np.allclose(vae_stub_decode(vae_stub_encode(img)), img, atol=1e-12)


def test_latent_shape_and_bad_dims():
    assert vae_stub_encode(np.zeros((32, 64, 3))).shape == (16, 4, 8)
    with pytest.raises(BadDimensions):
        vae_stub_encode(np.zeros((30, 64, 3)))
    with pytest.raises(BadDimensions):
        vae_stub_decode(np.zeros((3, 4, 4)))


def test_vit_stub_deterministic_and_shaped():
    img = np.random.default_rng(2).uniform(size=(64, 64, 3))
    a = vit_stub_encode(img)
    assert a.shape == (64, 32)
    assert a.tobytes() == vit_stub_encode(img.copy()).tobytes()
    # Row-major slots: the top-left patch only sees the top-left pixels.
    img2 = img.copy()
    img2[8:, 8:] = 0
    assert np.array_equal(vit_stub_encode(img2)[0], a[0])


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([(16, 4, 4), (16, 8, 8), (4, 2, 6)]), st.integers(0, 1000))
def test_patchify_round_trip(shape, seed):
    z = np.random.default_rng(seed).standard_normal(shape)
    tok = patchify(z, 2)
    assert tok.shape == (shape[1] * shape[2] // 4, 4 * shape[0])
    assert np.array_equal(unpatchify(tok, *shape, patch=2), z)


def test_patchify_groups_neighbours():
    z = np.arange(16.0).reshape(1, 4, 4)
    assert patchify(z, 2)[0].tolist() == [0, 1, 4, 5]
