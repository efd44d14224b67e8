import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from etvae import autodiff as ad
from etvae.autodiff import Tensor, no_grad
from etvae.errors import CheckpointError, ShapeError
from etvae.geometry import TWO_PI, disc_mask, relative_l2, rotate_image
from etvae.gradcheck import check_gradients
from etvae.optim import AdamState, adam_step
from etvae.vae import (ModelConfig, VaeModel, elbo_from_terms, gaussian_expected_log_likelihood, gaussian_kl,
                       importance_log_evidence, load_checkpoint, read_checkpoint, reparameterize, sample_latent,
                       save_checkpoint)

TINY = ModelConfig(image_size=16, radial_bins=8, angular_bins=16, latent_dim=3, pose_channels=(2, 2),
                   encoder_channels=(2, 3), classifier_hidden=4)


def tiny_images(n, seed=0, size=16):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] - (size - 1) / 2
    out = []
    for _ in range(n):
        cx, cy = rng.uniform(-2, 2, size=2)
        s = rng.uniform(1.5, 3.5)
        img = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
        img += 0.4 * np.exp(-((xx - cx - 3) ** 2 + (yy - cy) ** 2) / 2.0)
        out.append(np.clip(img, 0, 1))
    return np.stack(out)[:, None]


def log_normal(x, var):
    return -0.5 * (np.log(2 * np.pi * var) + x * x / var)


# -- encode ----------------------------------------------------------------------


def test_encode_shapes_and_determinism(galaxy_corpus):
    model = VaeModel(ModelConfig(), seed=0)
    x = Tensor(galaxy_corpus[:4])
    with no_grad():
        m1, lv1, a1, _ = model.encode(x)
        m2, lv2, a2, _ = model.encode(x)
    assert m1.shape == (4, 16) and lv1.shape == (4, 16) and a1.shape == (4,)
    assert m1.data.tobytes() == m2.data.tobytes() and lv1.data.tobytes() == lv2.data.tobytes()


def test_encode_size_mismatch():
    with pytest.raises(ShapeError):
        VaeModel(ModelConfig(), seed=0).encode(Tensor(np.zeros((1, 1, 32, 32))))


def test_encode_mean_is_rotation_invariant(galaxy_corpus):
    model = VaeModel(ModelConfig(), seed=1)
    x = Tensor(galaxy_corpus)
    with no_grad():
        base = model.encode(x)[0].data
        for k in (5, 21, 40):
            rot = model.encode(rotate_image(x, TWO_PI * k / 64))[0].data
            errs = [relative_l2(rot[i], base[i]) for i in range(len(base))]
            assert np.mean(errs) <= 0.15


# -- reparameterize ----------------------------------------------------------------


def test_zero_variance_limit():
    mean_ = Tensor(np.array([[0.3, -1.2, 5.0]]))
    z = reparameterize(mean_, Tensor(np.full((1, 3), -60.0)), np.random.default_rng(0).standard_normal((1, 3)))
    np.testing.assert_allclose(z.data, mean_.data, rtol=0, atol=1e-12)


def test_monte_carlo_mean_and_variance():
    n = 100_000
    mean_ = Tensor(np.tile([1.0, -2.0], (n, 1)))
    z, eps = sample_latent(mean_, Tensor(np.zeros((n, 2))), 0)
    np.testing.assert_array_equal(z.data, mean_.data + eps)
    assert np.all(np.abs(z.data.mean(axis=0) - [1.0, -2.0]) <= 0.02)
    z4, _ = sample_latent(Tensor(np.zeros((n, 1))), Tensor(np.full((n, 1), np.log(4.0))), 1)
    assert abs(z4.data.var() - 4.0) <= 0.05 * 4.0


def test_reparameterize_gradients():
    rng = np.random.default_rng(2)
    for _ in range(10):
        mean_ = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        logvar = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        eps = rng.normal(size=(2, 3))
        w = rng.normal(size=(2, 3))
        fn = lambda: ad.sum(ad.mul(reparameterize(mean_, logvar, eps), w))
        assert check_gradients(fn, [mean_, logvar]) <= 1e-6


def test_reparameterize_shape_error():
    with pytest.raises(ShapeError):
        reparameterize(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))), np.zeros((1, 3)))


# -- KL ------------------------------------------------------------------------------


def test_kl_zero_at_prior():
    assert gaussian_kl(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4)))).item() == 0.0


def test_kl_closed_form_example():
    expected = 0.5 * (1.0**2 + np.exp(0.0) - 1.0 - 0.0)
    assert abs(gaussian_kl(Tensor([1.0]), Tensor([0.0])).item() - expected) <= 1e-12


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(3)
    mu, lv = np.array([0.7, -0.4]), np.array([-0.5, 0.3])
    std = np.exp(0.5 * lv)
    z = mu + std * rng.standard_normal((100_000, 2))
    log_q = log_normal(z - mu, np.exp(lv)).sum(axis=1)
    log_p = log_normal(z, 1.0).sum(axis=1)
    mc = np.mean(log_q - log_p)
    analytic = gaussian_kl(Tensor(mu), Tensor(lv)).item()
    assert abs(mc - analytic) <= 0.01 * analytic


def test_kl_gradients():
    rng = np.random.default_rng(4)
    for _ in range(10):
        mean_ = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        logvar = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        assert check_gradients(lambda: gaussian_kl(mean_, logvar), [mean_, logvar]) <= 1e-6


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6), st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_kl_non_negative(mu, lv):
    n = min(len(mu), len(lv))
    kl = gaussian_kl(Tensor(mu[:n]), Tensor(lv[:n])).item()
    assert kl >= 0.0
    if kl == 0.0:
        assert np.allclose(mu[:n], 0.0, atol=1e-7) and np.allclose(lv[:n], 0.0, atol=1e-3)


# -- ELBO -------------------------------------------------------------------------


@pytest.mark.parametrize("x", [-1.3, 0.0, 0.4, 2.5])
def test_elbo_tight_at_exact_posterior(x):
    # p(z) = N(0, 1), p(x|z) = N(z, 1): posterior N(x/2, 1/2), evidence N(x; 0, 2)
    mean_ = Tensor([x / 2])
    logvar = Tensor([np.log(0.5)])
    elbo = elbo_from_terms(gaussian_expected_log_likelihood(np.array([x]), mean_, logvar), mean_, logvar).item()
    assert abs(elbo - log_normal(x, 2.0)) <= 1e-10
    for dm, dlv in ((0.1, 0.0), (0.0, 0.2), (-0.3, -0.1)):
        m2, lv2 = Tensor([x / 2 + dm]), Tensor([np.log(0.5) + dlv])
        worse = elbo_from_terms(gaussian_expected_log_likelihood(np.array([x]), m2, lv2), m2, lv2).item()
        assert worse < elbo


def test_elbo_finite_and_connected():
    model = VaeModel(TINY, seed=0)
    loss = model.elbo(Tensor(tiny_images(4)), np.random.default_rng(0))
    assert np.isfinite(loss.item())
    ad.backward(loss)
    for name in model.params.names("encoder.") + model.params.names("decoder."):
        g = model.params[name].grad
        assert g is not None and np.any(g != 0), name
    # the pose is a transformation, not a latent: the bound does not train it
    for name in model.params.names("pose."):
        assert model.params[name].grad is None


def test_elbo_parameter_gradients():
    for seed in range(10):
        model = VaeModel(TINY, seed=seed)
        # zero biases on a blank sky put relu inputs exactly on the kink; use random biases
        rng = np.random.default_rng(seed)
        for name in model.params.names():
            if name.endswith(".bias"):
                model.params[name].data = rng.normal(scale=0.1, size=model.params[name].shape)
        x = Tensor(tiny_images(2, seed=seed))
        params = [model.params[n] for n in model.params.names("encoder.") + model.params.names("decoder.")]
        fn = lambda: model.elbo(x, np.random.default_rng(seed))
        assert check_gradients(fn, params) <= 1e-6


def test_reparameterization_gradient_through_decoder():
    model = VaeModel(TINY, seed=5)
    rng = np.random.default_rng(5)
    target = rng.uniform(size=(2, 1, 8, 16))
    for _ in range(10):
        mean_ = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        logvar = Tensor(rng.normal(size=(2, 3)) - 1, requires_grad=True)
        eps = rng.standard_normal((2, 3))

        def fn():
            z = reparameterize(mean_, logvar, eps)
            ll = ad.sum(ad.bernoulli_log_likelihood(model.decoder_logits(z), target, axis=(1, 2, 3)))
            return ad.sub(ll, gaussian_kl(mean_, logvar))

        assert check_gradients(fn, [mean_, logvar]) <= 1e-6


def _train_tiny(model, images, steps, seed=0):
    opt = AdamState(lr=5e-3)
    names = model.params.names("encoder.") + model.params.names("decoder.")
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        idx = rng.choice(len(images), size=8, replace=False)
        model.params.zero_grad()
        loss = ad.neg(model.elbo(Tensor(images[idx]), rng))
        ad.backward(loss)
        adam_step(model.params, opt, names)
    model.params.zero_grad()


def test_elbo_below_importance_sampled_evidence():
    model = VaeModel(TINY, seed=6)
    images = tiny_images(32, seed=6)
    _train_tiny(model, images, 150)
    rng = np.random.default_rng(7)
    for i in range(3):
        x = Tensor(images[i : i + 1])
        with no_grad():
            mean_, logvar, _, _ = model.encode(x)
            # averaged bound over many noise draws, independent of the importance samples
            reps = 10_000
            eps = rng.standard_normal((reps, 3))
            z = mean_.data + np.exp(0.5 * logvar.data) * eps
            polar = model.encode(x)[3].data
            ll = ad.bernoulli_log_likelihood(model.decoder_logits(Tensor(z)),
                                             np.broadcast_to(polar, (reps,) + polar.shape[1:]), axis=(1, 2, 3)).data
        elbo = ll.mean() - gaussian_kl(mean_, logvar).item()
        log_px = importance_log_evidence(model, x, 10_000, rng)
        assert log_px - elbo >= -0.01


# -- decode ------------------------------------------------------------------------


def test_decode_shape_range_and_disc():
    model = VaeModel(ModelConfig(), seed=8)
    z = Tensor(np.random.default_rng(8).normal(size=(3, 16)))
    with no_grad():
        out = model.decode(z, Tensor(np.array([0.0, 1.0, 4.0]))).data
    assert out.shape == (3, 1, 64, 64)
    inside = disc_mask(64, 32.0)
    assert np.all(out[:, 0][:, inside] > 0) and np.all(out[:, 0][:, inside] < 1)
    assert np.all(out[:, 0][:, ~inside] == 0)


def test_decode_pose_consistency():
    model = VaeModel(ModelConfig(), seed=9)
    rng = np.random.default_rng(9)
    mask = disc_mask(64, 0.9 * 32)
    with no_grad():
        for _ in range(5):
            z = Tensor(rng.normal(size=(1, 16)))
            delta = rng.uniform(0, TWO_PI)
            posed = model.decode(z, Tensor([delta])).data[0, 0]
            rotated = rotate_image(model.decode(z, Tensor([0.0])), delta).data[0, 0]
            assert relative_l2(posed, rotated, mask) <= 0.1


def test_reconstruction_gradient_reaches_decoder():
    model = VaeModel(ModelConfig(), seed=10)
    z = Tensor(np.random.default_rng(10).normal(size=(4, 16)))
    target = np.random.default_rng(11).uniform(size=(4, 1, 32, 64))
    ad.backward(ad.sum(ad.bernoulli_log_likelihood(model.decoder_logits(z), target, axis=(1, 2, 3))))
    for name in model.params.names("decoder."):
        assert np.any(model.params[name].grad != 0), name


# -- checkpoints -----------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = VaeModel(TINY, seed=12)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model.params, path, config=TINY.to_dict(), extra={"note": 1})
    other = VaeModel(TINY, seed=99)
    manifest = load_checkpoint(other.params, path)
    assert manifest["config"] == TINY.to_dict() and manifest["extra"] == {"note": 1}
    for name in model.params.names():
        assert model.params[name].data.tobytes() == other.params[name].data.tobytes()


def test_checkpoint_bytes_reproducible(tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(VaeModel(TINY, seed=13).params, a, config=TINY.to_dict())
    save_checkpoint(VaeModel(TINY, seed=13).params, b, config=TINY.to_dict())
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_layout_is_documented(tmp_path):
    model = VaeModel(TINY, seed=14)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model.params, path)
    raw = path.read_bytes()
    assert raw[:8] == b"ETVAECK1"
    manifest, values = read_checkpoint(path)
    names = [e["name"] for e in manifest["parameters"]]
    assert names == sorted(names) == model.params.names()
    first = manifest["parameters"][0]
    mlen = int.from_bytes(raw[8:16], "little")
    start = 16 + mlen + first["offset"]
    arr = np.frombuffer(raw[start : start + 8 * values[first["name"]].size], dtype="<f8")
    np.testing.assert_array_equal(arr.reshape(first["shape"]), model.params[first["name"]].data)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "missing.ckpt")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        read_checkpoint(bad)
    path = tmp_path / "tiny.ckpt"
    save_checkpoint(VaeModel(TINY, seed=0).params, path)
    with pytest.raises(CheckpointError):
        load_checkpoint(VaeModel(ModelConfig(), seed=0).params, path)
