"""Unit tests for the siamese model: shapes, correlation, checkpoints."""

import numpy as np
import pytest

from metatrack import autodiff as ad
from metatrack.autodiff import Tensor
from metatrack.gradcheck import model_checks
from metatrack.nets import (NetConfig, backbone_forward, channel_correlation,
                            generator_forward, heads_forward, init_model,
                            load_checkpoint, save_checkpoint)


@pytest.fixture(scope="module")
def model():
    return init_model(NetConfig(), seed=0)


def test_feature_and_head_shapes(model):
    cfg = model.cfg
    z = backbone_forward(model.theta, Tensor(np.zeros((1, 32, 32))))
    x = backbone_forward(model.theta, Tensor(np.zeros((1, 64, 64))))
    assert z.shape == (16, 8, 8)
    assert x.shape == (16, 16, 16)
    r = channel_correlation(z, x)
    assert r.shape == (16, 9, 9)
    score, box, mask = heads_forward(model.heads(), r)
    assert score.shape == (cfg.anchors, 9, 9)
    assert box.shape == (4 * cfg.anchors, 9, 9)
    assert mask.shape == (cfg.mask_grid ** 2, 9, 9)


def test_batched_forward_matches_single(model):
    rng = np.random.default_rng(1)
    imgs = rng.standard_normal((3, 1, 64, 64))
    batch = backbone_forward(model.theta, Tensor(imgs)).data
    for k in range(3):
        single = backbone_forward(model.theta, Tensor(imgs[k])).data
        np.testing.assert_allclose(batch[k], single, rtol=1e-12)


def test_correlation_with_delta_template_selects_search_patch():
    # a one-hot "template" turns correlation into a shifted copy of the search
    z = np.zeros((2, 3, 3))
    z[:, 1, 1] = 1.0
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 6, 6))
    r = channel_correlation(Tensor(z), Tensor(x)).data
    np.testing.assert_allclose(r, x[:, 1:5, 1:5], rtol=1e-12)


def test_correlation_is_siamese_in_the_template(model):
    # same template against shifted search content moves the response peak
    rng = np.random.default_rng(3)
    z = rng.standard_normal((16, 8, 8))
    x = np.zeros((16, 16, 16))
    x[:, 2:10, 2:10] = z
    r = channel_correlation(Tensor(z), Tensor(x)).data.sum(axis=0)
    assert np.unravel_index(np.argmax(r), r.shape) == (2, 2)


def test_generator_output_range_and_shape(model):
    rng = np.random.default_rng(4)
    prior = rng.standard_normal((3, 16, 16))
    out = generator_forward(model.zeta, Tensor(prior)).data
    assert out.shape == (16, 16)
    assert np.all((out > 0.0) & (out < 1.0))


def test_generator_rejects_wrong_channels(model):
    with pytest.raises(ValueError, match="generator_forward"):
        generator_forward(model.zeta, Tensor(np.zeros((2, 16, 16))))


def test_backbone_rejects_multichannel_input(model):
    with pytest.raises(ValueError, match="backbone_forward"):
        backbone_forward(model.theta, Tensor(np.zeros((2, 3, 64, 64))))


def test_head_and_generator_gradients_match_finite_differences():
    for r in model_checks(seeds=3):
        assert r.ok, f"{r.name}: {r.max_rel_err:.3e} > {r.tol:.0e}"


def test_checkpoint_roundtrip_is_exact(tmp_path, model):
    path = tmp_path / "model.mtck"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    a = model.named_params()
    b = back.named_params()
    assert set(a) == set(b)
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)


def test_checkpoint_bytes_are_deterministic(tmp_path, model):
    p1, p2 = tmp_path / "a.mtck", tmp_path / "b.mtck"
    save_checkpoint(model, p1)
    save_checkpoint(model, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.mtck"
    path.write_bytes(b"NOPE" + bytes(10))
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(path)


def test_init_is_seed_deterministic():
    a = init_model(NetConfig(), seed=7).named_params()
    b = init_model(NetConfig(), seed=7).named_params()
    c = init_model(NetConfig(), seed=8).named_params()
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)
    assert any(not np.array_equal(a[n].data, c[n].data) for n in a)


def test_affine_parameters_exist_instead_of_batch_norm(model):
    # evaluation-mode normalization: per-channel scale/shift, no statistics
    for i in range(1, 5):
        assert f"aff{i}.s" in model.theta and f"aff{i}.t" in model.theta
    scaled = {k: Tensor(v.data.copy(), requires_grad=True)
              for k, v in model.theta.items()}
    scaled["aff1.s"].data = scaled["aff1.s"].data * 2.0
    x = np.ones((1, 16, 16))
    a = backbone_forward(model.theta, Tensor(x)).data
    b = backbone_forward(scaled, Tensor(x)).data
    assert not np.allclose(a, b)
