import numpy as np
import pytest

from obclip.autodiff import Graph, Tensor, backward, finite_diff_gradient, ops, relative_error
from obclip.distance import distance_matrix, neg_trace
from obclip.encoder import (
    MLPEncoderConfig,
    MiniTransformerConfig,
    TowerSpec,
    TwoTower,
    constant_params,
    encode_mlp,
    encode_transformer,
    head_multi,
    head_single,
    init_mlp,
    init_transformer,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
    to_oblique_point,
)
from obclip.geometry import ShapeMismatch, project_sphere, validate


def test_mlp_without_hidden_layers_is_affine():
    cfg = MLPEncoderConfig(input_dim=5, hidden_dims=[], output_dim=5)
    params = {"W0": np.eye(5), "b0": np.zeros(5)}
    x = np.random.default_rng(0).standard_normal(5)
    np.testing.assert_array_equal(encode_mlp(cfg, params, x).data, x)


def test_mlp_is_deterministic():
    cfg = MLPEncoderConfig(input_dim=6, hidden_dims=[8, 8], output_dim=4, seed=3)
    x = np.random.default_rng(1).standard_normal((2, 6))
    a = encode_mlp(cfg, constant_params(init_mlp(cfg)), x).data
    b = encode_mlp(cfg, constant_params(init_mlp(cfg)), x).data
    assert np.array_equal(a, b)


def test_mlp_gradcheck_wrt_input():
    cfg = MLPEncoderConfig(input_dim=4, hidden_dims=[6], output_dim=3)
    params = constant_params(init_mlp(cfg))
    x = np.random.default_rng(2).standard_normal((2, 4))
    g = Graph()
    xl = g.leaf(x)
    backward(g, ops.sum(encode_mlp(cfg, params, xl)))
    numeric = finite_diff_gradient(lambda z: encode_mlp(cfg, params, z).data.sum(), x)
    assert relative_error(g.grad(xl), numeric) < 1e-5


def test_mlp_shape_errors():
    cfg = MLPEncoderConfig(input_dim=4)
    with pytest.raises(ShapeMismatch):
        encode_mlp(cfg, constant_params(init_mlp(cfg)), np.ones(5))
    with pytest.raises(ValueError):
        MLPEncoderConfig(input_dim=0)


def _tcfg(**kw):
    base = dict(token_dim=3, layers=2, heads=2, model_dim=8, feedforward_dim=16, sequence_length=5)
    base.update(kw)
    return MiniTransformerConfig(**base)


@pytest.mark.parametrize("m", [1, 3])
@pytest.mark.parametrize("modality", ["visual", "textual"])
def test_transformer_output_shape(m, modality):
    cfg = _tcfg(cls_count=m, modality=modality)
    params = constant_params(init_transformer(cfg))
    tokens = np.random.default_rng(0).standard_normal((5, 3))
    assert encode_transformer(cfg, params, tokens).shape == (m, 8)
    assert encode_transformer(cfg, params, np.stack([tokens] * 2)).shape == (2, m, 8)
    with pytest.raises(ShapeMismatch):
        encode_transformer(cfg, params, np.ones((4, 3)))


def _zero_blocks(params):
    out = dict(params)
    for k in out:
        if k.startswith("block") and (k.split(".")[-1] in ("Wq", "Wk", "Wv", "Wo", "W1", "W2", "b1", "b2")):
            out[k] = np.zeros_like(out[k])
    return out


def _ln(x):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5)


def test_zeroed_blocks_pass_cls_embeddings_through():
    cfg = _tcfg(cls_count=3, modality="visual")
    raw = _zero_blocks(init_transformer(cfg))
    out = encode_transformer(cfg, constant_params(raw), np.random.default_rng(0).standard_normal((5, 3))).data
    np.testing.assert_allclose(out, _ln(raw["cls"]), atol=1e-12)
    assert len({tuple(np.round(r, 12)) for r in out}) == 3

    cfg = _tcfg(cls_count=3, modality="textual")
    raw = _zero_blocks(init_transformer(cfg))
    out = encode_transformer(cfg, constant_params(raw), np.zeros((5, 3))).data
    np.testing.assert_allclose(out, _ln(raw["cls"] + raw["cls_pos"]), atol=1e-12)


def test_visual_cls_states_distinct_at_init():
    cfg = _tcfg(cls_count=4)
    out = encode_transformer(cfg, constant_params(init_transformer(cfg)),
                             np.random.default_rng(1).standard_normal((5, 3))).data
    unit = out / np.linalg.norm(out, axis=1, keepdims=True)
    cos = unit @ unit.T
    assert np.max(cos[~np.eye(4, dtype=bool)]) < 1 - 1e-6


def test_every_cls_token_gets_gradient():
    spec = TowerSpec(kind="oblique_neg_trace", head="multi", encoder="transformer", n=4, m=3,
                     image_dim=16, text_dim=16, model_dim=8, feedforward_dim=16, sequence_length=4)
    model = TwoTower(spec)
    g = Graph()
    leaves = {k: g.leaf(v) for k, v in model.init_params(0).items()}
    rng = np.random.default_rng(2)
    u, v = model.embed(leaves, rng.standard_normal((6, 16)), rng.standard_normal((6, 16)))
    backward(g, ops.sum(distance_matrix(spec.kind, u, v)))
    for name in ("img.enc.cls", "txt.enc.cls_pos"):
        grad = g.grad(leaves[name])
        assert np.all(np.linalg.norm(grad, axis=1) > 0), name


def test_cls_parameter_accounting():
    d, m = 8, 4
    multi = init_transformer(_tcfg(cls_count=m))
    single = init_transformer(_tcfg(cls_count=1))
    assert multi["cls"].size == m * d
    assert parameter_count(multi) - parameter_count(single) == (m - 1) * d


def test_head_single_identity_example():
    out = head_single(np.array([3.0, 4.0, 0.0, 1.0]), np.eye(4), 2, 2)
    p = to_oblique_point(out)
    np.testing.assert_allclose(p.mat, [[0.6, 0.0], [0.8, 1.0]], atol=1e-12)
    validate(p, 1e-8)
    with pytest.raises(ShapeMismatch):
        head_single(np.ones(4), np.eye(4), 3, 2)


def test_head_gradchecks():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((6, 6))
    s = rng.standard_normal((2, 6))
    c = Tensor(rng.standard_normal((2, 3, 2)))

    def f(x):
        return ops.sum(ops.mul(head_single(x, w, 2, 3), c))

    g = Graph()
    sl = g.leaf(s)
    backward(g, f(sl))
    assert relative_error(g.grad(sl), finite_diff_gradient(lambda z: f(Tensor(z)).item(), s)) < 1e-5

    wm = rng.standard_normal((3, 5, 4))
    st = rng.standard_normal((2, 3, 5))
    cm = Tensor(rng.standard_normal((2, 3, 4)))
    g = Graph()
    wl = g.leaf(wm)
    backward(g, ops.sum(ops.mul(head_multi(st, wl, 4), cm)))
    num = finite_diff_gradient(lambda z: ops.sum(ops.mul(head_multi(st, Tensor(z), 4), cm)).item(), wm)
    assert relative_error(g.grad(wl), num) < 1e-5


def test_head_multi_examples():
    rng = np.random.default_rng(4)
    w = rng.standard_normal((1, 5, 3))
    s = rng.standard_normal((1, 5))
    out = head_multi(s, w, 3)
    np.testing.assert_allclose(out.data[0], project_sphere(s[0] @ w[0]).vec, atol=1e-12)

    ws = rng.standard_normal((4, 5, 3))
    states = rng.standard_normal((4, 5))
    p = to_oblique_point(head_multi(states, ws, 3))
    validate(p, 1e-8)
    q = to_oblique_point(head_multi(states, ws, 3))
    assert neg_trace(p, q) == pytest.approx(-4.0, abs=1e-12)
    shared = head_multi(states, rng.standard_normal((5, 3)), 3)
    assert shared.shape == (4, 3)


def test_towers_land_on_their_topology():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 64))
    for kind, n, m in [("sphere_neg_inner", 32, 1), ("euclidean_l2", 32, 1), ("oblique_geodesic", 8, 4)]:
        model = TwoTower(TowerSpec(kind=kind, n=n, m=m))
        u, _ = model.embed(constant_params(model.init_params(0)), x, x)
        if kind == "sphere_neg_inner":
            np.testing.assert_allclose(np.linalg.norm(u.data, axis=1), 1.0)
        elif kind == "oblique_geodesic":
            assert u.shape == (3, 4, 8)
            np.testing.assert_allclose(np.linalg.norm(u.data, axis=2), 1.0)
    with pytest.raises(ValueError):
        TowerSpec(kind="sphere_neg_inner", head="multi", encoder="transformer")


def test_init_is_deterministic():
    model = TwoTower(TowerSpec(encoder="transformer"))
    a, b = model.init_params(7), model.init_params(7)
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    c = model.init_params(8)
    assert not np.array_equal(a["img.head.W"], c["img.head.W"])


def test_checkpoint_round_trip(tmp_path):
    model = TwoTower(TowerSpec(encoder="transformer", head="multi"))
    params = model.init_params(1)
    params["t"] = np.array(2.64)
    path = tmp_path / "ckpt.npz"
    save_checkpoint(path, params, {"note": "x"})
    loaded, meta = load_checkpoint(path)
    assert meta == {"note": "x"}
    assert loaded.keys() == params.keys()
    for k in params:
        assert loaded[k].shape == np.shape(params[k])
        assert loaded[k].tobytes() == np.asarray(params[k]).tobytes()


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "other.npz"
    np.savez(path, a=np.ones(3))
    with pytest.raises(ValueError):
        load_checkpoint(path)
