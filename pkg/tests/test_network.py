import numpy as np
import pytest

from utopic import diffmath as dm
from utopic.diffmath import DimensionError, Tensor
from utopic.geom3d import random_transform
from utopic.network import (AttentionBlock, AttentionWeights, CheckpointError, EdgeLayer, ModelConfig,
                            UTOPICNet, feature_cross_attention, geometry_self_attention,
                            load_checkpoint, local_descriptors, minmax_normalize, overlap_distribution,
                            prepare_cloud, random_mask, read_checkpoint_header, sample_variance,
                            save_checkpoint, self_attention_logits, uncertainty_weighting)

from conftest import tiny_model_config
from oracles import fd_relative_error

TOL = 1e-4


def _probe(rng, shape):
    return Tensor(rng.normal(size=shape))


def test_edge_layer_gradients(rng):
    layer = EdgeLayer(3, 4, rng)
    f = dm.parameter(rng.normal(size=(6, 3)))
    nbr = np.array([[1, 2], [0, 3], [4, 5], [2, 1], [0, 5], [3, 4]])
    w = _probe(rng, (6, 4))
    fn = lambda: dm.tsum(layer(f, nbr) * w)
    assert fd_relative_error(fn, [f, layer.edge.W, layer.edge.b]) < TOL


def test_edge_layer_matches_explicit_edge_max(rng):
    layer = EdgeLayer(3, 4, rng)
    f = rng.normal(size=(5, 3))
    nbr = np.array([[1, 2], [0, 3], [4, 1], [2, 4], [0, 3]])
    out = layer(Tensor(f), nbr).data
    w, b = layer.edge.W.data, layer.edge.b.data
    for i in range(5):
        edges = [np.concatenate([f[i], f[j] - f[i]]) @ w + b for j in nbr[i]]
        ref = np.max(np.where(np.array(edges) > 0, edges, 0.01 * np.array(edges)), axis=0)
        assert np.allclose(out[i], ref)


def test_self_attention_gradients(rng):
    w = AttentionWeights(4, rng, geometric=True)
    f = dm.parameter(rng.normal(size=(5, 4)))
    g = rng.normal(size=(25, 3))
    probe = _probe(rng, (5, 4))
    fn = lambda: dm.tsum(geometry_self_attention(f, g, w) * probe)
    assert fd_relative_error(fn, [f, w.WQ, w.WK, w.WV, w.WG]) < TOL


def test_cross_attention_gradients(rng):
    w = AttentionWeights(4, rng, geometric=False)
    fp, fq = dm.parameter(rng.normal(size=(5, 4))), dm.parameter(rng.normal(size=(3, 4)))
    probe = _probe(rng, (5, 4))
    fn = lambda: dm.tsum(feature_cross_attention(fp, fq, w) * probe)
    assert fd_relative_error(fn, [fp, fq, w.WQ, w.WK, w.WV]) < TOL


def test_attention_block_gradients(rng):
    for pre in (False, True):
        blk = AttentionBlock(4, 2, rng, True, 1e-2, pre)
        f = dm.parameter(rng.normal(size=(5, 4)))
        g = rng.normal(size=(25, 3))
        probe = _probe(rng, (5, 4))
        params = [f] + list(blk.named_parameters("b").values())
        assert fd_relative_error(lambda: dm.tsum(blk.self_block(f, g) * probe), params) < TOL


def test_attention_logits_formula(rng):
    w = AttentionWeights(4, rng, geometric=True)
    f = rng.normal(size=(3, 4))
    g = rng.normal(size=(3, 3, 3))
    e = self_attention_logits(f, g.reshape(9, 3), w).data
    q, k, wg = f @ w.WQ.data, f @ w.WK.data, w.WG.data[:, 0]
    for i in range(3):
        for j in range(3):
            assert e[i, j] == pytest.approx((q[i] @ k[j] + g[i, j] @ wg) / 2.0)


def test_attention_dimension_checks(rng):
    w = AttentionWeights(4, rng, geometric=True)
    with pytest.raises(DimensionError):
        self_attention_logits(rng.normal(size=(3, 5)), None, w)
    with pytest.raises(DimensionError):
        self_attention_logits(rng.normal(size=(3, 4)), rng.normal(size=(8, 3)), w)


def test_uncertainty_head_gradients(rng):
    model = UTOPICNet(tiny_model_config(), seed=1)
    f = dm.parameter(rng.normal(size=(6, 8)))
    probe = _probe(rng, (6, 4))
    params = [f] + list(model.mean_head.named_parameters("m").values()) + \
        list(model.std_head.named_parameters("s").values())

    def fn():
        d = model.predict_overlap_distribution(f, np.random.default_rng(5))
        return dm.tsum(d.samples * probe) + dm.tsum(d.uncertainty * d.uncertainty)
    assert fd_relative_error(fn, params) < TOL


def test_weighting_mlp_gradients(rng):
    model = UTOPICNet(tiny_model_config(), seed=2)
    fp, fq = dm.parameter(rng.normal(size=(4, 8))), dm.parameter(rng.normal(size=(5, 8)))
    c = dm.parameter(rng.uniform(size=(5, 6)))
    u = dm.parameter(rng.uniform(size=(4, 1)))
    probe = _probe(rng, (4, 8))
    params = [fp, fq, c, u] + list(model.weighting.named_parameters("w").values())
    fn = lambda: dm.tsum(uncertainty_weighting(fp, fq, c, u, model.weighting) * probe)
    assert fd_relative_error(fn, params) < TOL


def test_overlap_head_gradients(rng):
    model = UTOPICNet(tiny_model_config(), seed=3)
    fp, fq = dm.parameter(rng.normal(size=(4, 8))), dm.parameter(rng.normal(size=(5, 8)))
    gp, gq = rng.normal(size=(16, 3)), rng.normal(size=(25, 3))
    params = [fp, fq] + list(model.overlap_head.named_parameters("o").values()) + \
        list(model.transformer2.named_parameters("t").values())

    def fn():
        op, oq, _, _ = model.predict_overlap_scores(fp, fq, gp, gq)
        return dm.tsum(op * op) + dm.tsum(oq)
    assert fd_relative_error(fn, params) < TOL


def test_sample_variance_and_minmax(rng):
    s = rng.normal(size=(5, 7))
    assert np.allclose(sample_variance(s).data.ravel(), s.var(axis=1, ddof=1))
    v = minmax_normalize(np.array([[2.0], [4.0], [3.0]])).data.ravel()
    assert v.tolist() == [0.0, 1.0, 0.5]
    assert np.all(minmax_normalize(np.ones((3, 1))).data == 0)


def test_overlap_distribution_uses_reparameterisation(rng):
    mu, sigma = np.zeros((4, 1)), np.full((4, 1), 2.0)
    d = overlap_distribution(mu, sigma, np.random.default_rng(3), 6)
    eps = np.random.default_rng(3).standard_normal((4, 6))
    assert np.allclose(d.samples.data, 2.0 * eps)


def test_random_mask_identity_at_inference(rng):
    f = Tensor(rng.normal(size=(4, 3)))
    assert random_mask(f, np.ones(4), None, training=False) is f
    out = random_mask(f, np.array([0.0, 1.0, 0.0, 1.0]), rng, training=True).data
    assert np.all(out[[1, 3]] == 0) and np.array_equal(out[[0, 2]], f.data[[0, 2]])


def test_descriptors_rigid_invariant(rng):
    pts = rng.normal(size=(60, 3))
    t = random_transform(rng, 180.0, 3.0)
    a = local_descriptors(pts, standardize=True)
    b = local_descriptors(pts @ t.rotation.T + t.translation, standardize=True)
    assert np.allclose(a, b, atol=1e-8)


def test_forward_shapes_and_determinism(rng):
    cfg = tiny_model_config()
    model = UTOPICNet(cfg, seed=0)
    xp, xq = prepare_cloud(rng.normal(size=(12, 3)), cfg), prepare_cloud(rng.normal(size=(10, 3)), cfg)
    out = model.forward(xp, xq)
    assert out["c_bar"].shape == (13, 11) and out["overlap_p"].shape == (12, 1)
    assert np.all((out["overlap_q"].data > 0) & (out["overlap_q"].data < 1))
    again = model.forward(xp, xq)
    assert np.array_equal(out["c_bar"].data, again["c_bar"].data)
    train = model.forward(xp, xq, rng=np.random.default_rng(1), training=True)
    assert train["completion_p"].shape == (cfg.n_completion, 3)


def test_invariant_model_is_rigid_invariant(rng):
    cfg = tiny_model_config()
    model = UTOPICNet(cfg, seed=0)
    p, q = rng.normal(size=(12, 3)), rng.normal(size=(10, 3))
    t = random_transform(rng, 180.0, 2.0)
    a = model.forward(prepare_cloud(p, cfg), prepare_cloud(q, cfg))["c_bar"].data
    b = model.forward(prepare_cloud(p @ t.rotation.T + t.translation, cfg), prepare_cloud(q, cfg))["c_bar"].data
    assert np.allclose(a, b, atol=1e-9)


def test_checkpoint_round_trip(tmp_path, rng):
    cfg = tiny_model_config(coord_gain=1.0)
    model = UTOPICNet(cfg, seed=4)
    save_checkpoint(tmp_path / "m.ckpt", model, {"note": "x"})
    back = load_checkpoint(tmp_path / "m.ckpt", cfg)
    for (k, a), (k2, b) in zip(model.named_parameters().items(), back.named_parameters().items()):
        assert k == k2 and np.array_equal(a.data, b.data)
    hdr = read_checkpoint_header(tmp_path / "m.ckpt")
    assert hdr["extra"] == {"note": "x"} and hdr["model_config"]["coord_gain"] == 1.0


def test_checkpoint_rejects_mismatch_and_corruption(tmp_path):
    cfg = tiny_model_config()
    save_checkpoint(tmp_path / "m.ckpt", UTOPICNet(cfg), {})
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.ckpt", tiny_model_config(feat_dim=16, d_t=16))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m.ckpt", tiny_model_config(use_geometry=False))
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"garbage" + raw[7:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.ckpt")


def test_geometry_ablation_has_no_wg():
    model = UTOPICNet(tiny_model_config(use_geometry=False))
    assert not any(k.endswith(".WG") for k in model.named_parameters())
    assert any(k.endswith(".WG") for k in UTOPICNet(tiny_model_config()).named_parameters())


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"width": 3})
    with pytest.raises(ValueError):
        ModelConfig(k_samples=1)
