import numpy as np
import pytest

from mld import autoencoder as ae
from mld.errors import ConfigError, NumericError, ShapeError
from mld.latent import ModalitySpec
from mld.nn import mlp_forward


def test_memorizes_a_single_point():
    spec = ModalitySpec("p", 3, 2)
    x = np.tile([[0.5, -1.0, 2.0]], (64, 1))
    pair = ae.train_autoencoder(spec, x, epochs=400, lr=1e-2, seed=0, batch_size=64, hidden=(8,))
    assert pair.mse(x) < 1e-6


def subspace_data(n, d=6, k=2, seed=0):
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((d, k)))
    return rng.standard_normal((n, k)) @ basis.T * 2.0, basis


def test_linear_pair_reaches_projection_residual():
    x, basis = subspace_data(512)
    spec = ModalitySpec("lin", 6, 2)
    pair = ae.train_autoencoder(spec, x, epochs=300, lr=1e-2, seed=1, batch_size=64, linear=True)
    # the least-squares rank-2 reconstruction is exact on this data
    residual = np.mean((x - x @ basis @ basis.T) ** 2)
    assert residual < 1e-20
    assert pair.mse(x) < 1e-4
    held, _ = subspace_data(256, seed=0)
    assert pair.mse(held) < 2 * pair.mse(x) + 1e-8


def test_latent_dim_zero_rejected():
    with pytest.raises(ConfigError):
        ModalitySpec("z", 4, 0)


def test_shape_checks():
    spec = ModalitySpec("a", 4, 2)
    with pytest.raises(ShapeError):
        ae.train_autoencoder(spec, np.zeros((10, 3)), epochs=1)
    pair = ae.init_autoencoder(spec, np.random.default_rng(0))
    norm = ae.LatentNormalizer(np.zeros(2), np.ones(2))
    with pytest.raises(ShapeError):
        ae.decode(pair, norm, np.zeros((1, 3)))
    with pytest.raises(ShapeError):
        ae.AutoencoderPair(ModalitySpec("b", 5, 2), pair.encoder, pair.decoder)


def test_non_finite_loss_aborts():
    spec = ModalitySpec("a", 2, 1)
    x = np.array([[np.inf, 0.0], [1.0, 2.0]])
    with pytest.raises(NumericError, match="a"):
        ae.train_autoencoder(spec, x, epochs=1)


def test_normalizer_identities():
    rng = np.random.default_rng(0)
    spec = ModalitySpec("a", 5, 3)
    pair = ae.init_autoencoder(spec, rng)
    batch = rng.normal(size=(128, 5)) * 4 + 1
    norm = ae.fit_normalizer(pair.encoder, batch)
    zn = ae.encode(pair, norm, batch)
    assert np.all(np.abs(zn.mean(axis=0)) < 1e-10)
    assert np.all(np.abs(zn.std(axis=0) - 1) < 1e-10)
    z = rng.normal(size=(7, 3))
    assert np.allclose(norm.denormalize(norm.normalize(z)), z, rtol=0, atol=1e-12)


def test_normalizer_stores_batch_moments():
    spec = ModalitySpec("id", 1, 1)
    pair = ae.init_autoencoder(spec, np.random.default_rng(0), linear=True)
    pair.encoder.weights[0][:] = 1.0
    pair.encoder.biases[0][:] = 0.0
    batch = np.array([[-1.0], [5.0]])  # mean 2, std 3
    norm = ae.fit_normalizer(pair.encoder, batch)
    assert norm.mean.tolist() == [2.0] and norm.std.tolist() == [3.0]


def test_constant_batch_hits_std_floor():
    spec = ModalitySpec("a", 2, 2)
    pair = ae.init_autoencoder(spec, np.random.default_rng(0))
    norm = ae.fit_normalizer(pair.encoder, np.ones((16, 2)))
    assert np.all(norm.std == ae.STD_FLOOR)
    assert np.all(np.isfinite(ae.encode(pair, norm, np.ones((3, 2)))))
    with pytest.raises(ShapeError):
        ae.fit_normalizer(pair.encoder, np.ones((1, 2)))


def test_decode_denormalizes_before_decoder():
    rng = np.random.default_rng(3)
    spec = ModalitySpec("a", 4, 2)
    pair = ae.init_autoencoder(spec, rng)
    norm = ae.LatentNormalizer(np.array([1.0, -2.0]), np.array([0.5, 3.0]))
    zn = rng.normal(size=(5, 2))
    assert np.array_equal(ae.decode(pair, norm, zn), mlp_forward(pair.decoder, zn * norm.std + norm.mean))
    x = rng.normal(size=(5, 4))
    assert ae.encode(pair, norm, x).tobytes() == ae.encode(pair, norm, x).tobytes()


def test_round_trip_close_to_final_training_loss():
    rng = np.random.default_rng(0)
    centers = rng.normal(size=(4, 6)) * 2
    x = centers[rng.integers(0, 4, 600)] + 0.05 * rng.normal(size=(600, 6))
    losses = []
    spec = ModalitySpec("m", 6, 3)
    pair = ae.train_autoencoder(spec, x, epochs=60, lr=3e-3, seed=0, batch_size=600, log_fn=lambda e, l: losses.append(l))
    assert losses[-1] < losses[0]
    # the logged loss was taken before the last update, so the trained pair should not be worse
    assert pair.mse(x) < 1.1 * losses[-1]


def test_modalities_train_independently():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(100, 4))
    spec = ModalitySpec("a", 4, 2)
    first = ae.train_autoencoder(spec, a, epochs=3, seed=5)
    # training another modality in between must not perturb this one
    ae.train_autoencoder(ModalitySpec("b", 3, 1), rng.normal(size=(50, 3)), epochs=3, seed=5)
    again = ae.train_autoencoder(spec, a, epochs=3, seed=5)
    for p, q in zip(first.arrays(), again.arrays()):
        assert p.tobytes() == q.tobytes()
    loss, grads = ae.ae_loss_and_grads(first, a[:10])
    assert len(grads) == len(first.arrays())
    assert all(g.shape == p.shape for g, p in zip(grads, first.arrays()))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    spec = ModalitySpec("m", 4, 2)
    x = rng.normal(size=(40, 4))
    pair = ae.train_autoencoder(spec, x, epochs=2, seed=0)
    norm = ae.fit_normalizer(pair.encoder, x[:16])
    path = tmp_path / "m.mmld"
    ae.save_autoencoder(path, pair, norm)
    pair2, norm2 = ae.load_autoencoder(path, "m")
    assert pair2.mse(x) == pair.mse(x)
    assert ae.encode(pair2, norm2, x).tobytes() == ae.encode(pair, norm, x).tobytes()
    ae.save_autoencoder(tmp_path / "again.mmld", pair2, norm2)
    assert (tmp_path / "again.mmld").read_bytes() == path.read_bytes()


def test_joint_encoder_concatenates_blocks():
    rng = np.random.default_rng(1)
    specs = [ModalitySpec("a", 3, 2), ModalitySpec("b", 2, 1)]
    pairs = [ae.init_autoencoder(s, rng) for s in specs]
    norms = [ae.LatentNormalizer(np.zeros(s.latent_dim), np.ones(s.latent_dim)) for s in specs]
    enc = ae.JointEncoder(pairs, norms)
    xs = [rng.normal(size=(4, 3)), rng.normal(size=(4, 2))]
    z = enc.encode(xs)
    assert z.shape == (4, 3)
    assert np.array_equal(z[:, :2], enc.encode_one(0, xs[0]))
    assert np.array_equal(enc.decode_one(1, z[:, 2:]), ae.decode(pairs[1], norms[1], z[:, 2:]))
