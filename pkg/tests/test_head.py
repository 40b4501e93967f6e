import math

import numpy as np
import pytest

from cca import head as hd
from cca import tensor as T
from cca.config import TINY, ConfigError, EncoderConfig
from cca.model import CCAModel
from cca.tensor import Tensor


def cfg(embed_type="type2", **kw):
    return EncoderConfig(**{**TINY.__dict__, "embed_type": embed_type, **kw})


def imgs(n, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, size=(n, 3, 8, 8))


# -- condition embedding ----------------------------------------------------------
def test_type1_onehot_selects_row():
    k, d = 3, 4
    w = np.random.default_rng(0).normal(size=(k, d))
    p = {"head.cond.fc.w": Tensor(w), "head.cond.fc.b": Tensor(np.zeros(d))}
    for c in range(k):
        np.testing.assert_array_equal(hd.embed_condition_type1([c], p, k).data[0], w[c])


def test_type1_distinct_conditions():
    m = CCAModel(cfg("type1"), seed=1)
    q = hd.embed_condition([0, 1], m.params, m.config).data
    assert not np.allclose(q[0], q[1])


def test_type2_relu_kill_gives_bias():
    d = TINY.dim
    r = np.random.default_rng(0)
    b = r.normal(size=d)
    p = {
        "head.cond.mask": Tensor(-np.abs(r.normal(size=(2, d))) - 0.1),
        "head.cond.fc.w": Tensor(r.normal(size=(d, d))),
        "head.cond.fc.b": Tensor(b),
    }
    np.testing.assert_array_equal(hd.embed_condition_type2([1], p, 2).data[0], b)


def test_type2_basis_row_identity_fc():
    d = 4
    mask = np.zeros((2, d))
    mask[1, 2] = 1.0
    p = {"head.cond.mask": Tensor(mask), "head.cond.fc.w": Tensor(np.eye(d)), "head.cond.fc.b": Tensor(np.zeros(d))}
    np.testing.assert_array_equal(hd.embed_condition_type2([1], p, 2).data[0], np.eye(d)[2])


@pytest.mark.parametrize("fn", [hd.embed_condition_type1, hd.embed_condition_type2])
def test_condition_out_of_range(fn):
    m = CCAModel(cfg("type1" if fn is hd.embed_condition_type1 else "type2"))
    with pytest.raises(hd.ConditionError):
        fn([2], m.params, 2)
    with pytest.raises(hd.ConditionError):
        fn([-1], m.params, 2)


def _grad_for(model, cond, name):
    model.zero_grad()
    emb = model(imgs(3, 1), cond)
    T.tsum(T.mul(emb, Tensor(np.random.default_rng(2).normal(size=emb.shape)))).backward()
    return model.params[name].grad


def test_type1_gradient_only_on_selected_row():
    m = CCAModel(cfg("type1", num_conditions=3), seed=2)
    g = _grad_for(m, 1, "head.cond.fc.w")
    assert np.all(g[[0, 2]] == 0) and np.any(g[1] != 0)


def test_type2_gradient_isolation_exact():
    m = CCAModel(cfg("type2", num_conditions=4), seed=2)
    g = _grad_for(m, 2, "head.cond.mask")
    assert np.all(g[[0, 1, 3]] == 0) and np.any(g[2] != 0)


def test_type2_gradient_isolation_finite_difference():
    m = CCAModel(cfg("type2", num_conditions=3), seed=5)
    x = imgs(2, 4)
    r = np.random.default_rng(3).normal(size=(2, TINY.dim))
    mask = m.params["head.cond.mask"].data
    h = 1e-6
    for c_other in (0, 2):
        for j in range(TINY.dim):
            orig = mask[c_other, j]
            mask[c_other, j] = orig + h
            up = (m.embed(x, 1) * r).sum()
            mask[c_other, j] = orig - h
            down = (m.embed(x, 1) * r).sum()
            mask[c_other, j] = orig
            assert up == down


# -- tiling -------------------------------------------------------------------------
def test_tile_one_is_identity():
    q = Tensor([[1.0, 2.0]])
    np.testing.assert_array_equal(hd.tile_query(q, 1).data, [[[1.0, 2.0]]])


def test_tile_three_rows():
    np.testing.assert_array_equal(hd.tile_query(Tensor([[1.0, 2.0]]), 3).data[0], [[1, 2], [1, 2], [1, 2]])


def test_tile_zero_is_error():
    with pytest.raises(ValueError):
        hd.tile_query(Tensor([[1.0]]), 0)


def test_tiled_rows_identical_downstream():
    m = CCAModel(cfg(), seed=3)
    tokens = m.backbone(imgs(2))
    q = hd.tile_query(hd.embed_condition([0, 1], m.params, m.config), 3)
    out = hd.conditional_cross_attention(q, tokens, m.params, 2).data
    assert np.array_equal(out[:, 0], out[:, 1]) and np.array_equal(out[:, 1], out[:, 2])


def test_tiled_gradients_and_weights_match_single_row():
    m = CCAModel(cfg(), seed=3)
    x = imgs(2)
    probe = np.random.default_rng(1).normal(size=(2, m.config.out_dim or m.config.dim))
    grads, weights = {}, {}
    for t in (1, 3):
        m.zero_grad()
        w = []
        out = m.head(m.backbone(x), [0, 1], tile=t, weights_out=w)
        T.tsum(T.mul(out, Tensor(probe))).backward()
        grads[t] = {n: p.grad.copy() for n, p in m.params.items()}
        weights[t] = w[0]
    assert weights[3].shape[2] == 3 and np.array_equal(weights[3][:, :, 2:], weights[1])
    for n in grads[1]:
        np.testing.assert_array_equal(grads[3][n], grads[1][n])


# -- cross attention ----------------------------------------------------------------
def test_single_token_gets_full_weight():
    m = CCAModel(cfg(), seed=4)
    tokens = Tensor(np.random.default_rng(0).normal(size=(1, 1, 8)))
    q = hd.tile_query(hd.embed_condition([0], m.params, m.config), 1)
    w = []
    hd.conditional_cross_attention(q, tokens, m.params, 2, weights_out=w)
    np.testing.assert_array_equal(w[0], np.ones((1, 2, 1, 1)))
    cache = hd.project_kv(tokens, m.params)
    merged = hd.attend(Tensor(np.zeros((1, 1, 8))), cache.keys, cache.values, 2).data
    np.testing.assert_array_equal(merged, cache.values.data)


def test_zero_logits_give_uniform_attention():
    m = CCAModel(cfg(), seed=4)
    m.params["head.cca.attn.q.w"] = Tensor(np.zeros((8, 8)))
    m.params["head.cca.attn.q.b"] = Tensor(np.zeros(8))
    tokens = m.backbone(imgs(2))
    w = []
    q = hd.tile_query(hd.embed_condition([0, 1], m.params, m.config), 1)
    hd.conditional_cross_attention(q, tokens, m.params, 2, weights_out=w)
    np.testing.assert_array_equal(w[0], np.full((2, 2, 1, 5), 1 / 5))


def _ln(x, g, b, eps=1e-6):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / math.sqrt(var + eps) * g + b


def test_cross_attention_dense_oracle_three_tokens():
    d, heads = 8, 2
    m = CCAModel(cfg(), seed=6)
    p = {k: v.data for k, v in m.params.items()}
    r = np.random.default_rng(9)
    for k in p:
        if k.startswith("head.cca"):
            p[k] = p[k] + 0.3 * r.normal(size=p[k].shape)
    tokens = r.normal(size=(3, d))
    qc = r.normal(size=d)
    got = hd.conditional_cross_attention(
        Tensor(qc[None, None]), Tensor(tokens[None]), {k: Tensor(v) for k, v in p.items()}, heads
    ).data[0, 0]

    pre = "head.cca"
    lin = lambda x, n: x @ p[f"{pre}.{n}.w"] + p[f"{pre}.{n}.b"]  # noqa: E731
    kv_in = [_ln(t, p[f"{pre}.ln_kv.gamma"], p[f"{pre}.ln_kv.beta"]) for t in tokens]
    q = lin(_ln(qc, p[f"{pre}.ln_q.gamma"], p[f"{pre}.ln_q.beta"]), "attn.q")
    ks = [lin(t, "attn.k") for t in kv_in]
    vs = [lin(t, "attn.v") for t in kv_in]
    hd_ = d // heads
    merged = np.zeros(d)
    for h in range(heads):
        s = slice(h * hd_, (h + 1) * hd_)
        logits = [float(q[s] @ k[s]) / math.sqrt(hd_) for k in ks]
        e = np.exp(np.array(logits) - max(logits))
        a = e / e.sum()
        merged[s] = sum(a[j] * vs[j][s] for j in range(3))
    x = qc + lin(merged, "attn.o")
    f = lin(_ln(x, p[f"{pre}.ln2.gamma"], p[f"{pre}.ln2.beta"]), "ffn.fc1")
    f = np.array([v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in f])
    want = x + lin(f, "ffn.fc2")
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_cross_attention_shape_errors():
    m = CCAModel(cfg(), seed=0)
    with pytest.raises(ConfigError):
        hd.conditional_cross_attention(Tensor(np.zeros((1, 1, 4))), Tensor(np.zeros((1, 5, 8))), m.params, 2)
    with pytest.raises(ConfigError):
        hd.conditional_cross_attention(Tensor(np.zeros((2, 1, 8))), Tensor(np.zeros((1, 5, 8))), m.params, 2)


# -- final embedding -----------------------------------------------------------------
def test_final_embedding_identity_fc():
    x = np.random.default_rng(0).normal(size=(2, 8))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    p = {"head.out.w": Tensor(np.eye(8)), "head.out.b": Tensor(np.zeros(8))}
    np.testing.assert_allclose(hd.final_embedding(Tensor(x), p).data, x, atol=1e-15)


def test_final_embedding_matches_fc_then_normalize():
    r = np.random.default_rng(1)
    x = r.normal(size=(3, 2, 8))
    w, b = r.normal(size=(8, 5)), r.normal(size=5)
    out = hd.final_embedding(Tensor(x), {"head.out.w": Tensor(w), "head.out.b": Tensor(b)}).data
    y = x[:, 0] @ w + b
    np.testing.assert_allclose(out, y / np.linalg.norm(y, axis=1, keepdims=True), atol=1e-15)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)


# -- mask baseline ----------------------------------------------------------------
def _mask_model(mask_value):
    m = CCAModel(cfg("mask-baseline"), seed=0)
    m.params["head.cond.mask"] = Tensor(np.full((2, 8), mask_value))
    m.params["head.out.w"] = Tensor(np.eye(8))
    return m


def test_mask_baseline_runs_all_layers_on_cls():
    m = CCAModel(cfg("mask-baseline"), seed=0)
    assert m.backbone_layers == TINY.depth
    assert not m.conditioned


def test_mask_all_ones_gives_normalized_cls():
    m = _mask_model(1.0)
    m.params["head.out.b"] = Tensor(np.zeros(8))
    x = imgs(2)
    cls = m.backbone(x).data[:, 0]
    np.testing.assert_allclose(m.embed(x, 0), cls / np.linalg.norm(cls, axis=1, keepdims=True), atol=1e-15)


def test_mask_all_zeros_gives_normalized_bias():
    m = _mask_model(0.0)
    b = np.random.default_rng(1).normal(size=8)
    m.params["head.out.b"] = Tensor(b)
    np.testing.assert_allclose(m.embed(imgs(2), 1), np.tile(b / np.linalg.norm(b), (2, 1)), atol=1e-15)


def test_mask_distinct_conditions_distinct_embeddings():
    m = CCAModel(cfg("mask-baseline"), seed=3)
    e = m.embed_all_conditions(imgs(2))
    assert np.all((e[0] * e[1]).sum(-1) < 1 - 1e-6)


# -- model-level properties ---------------------------------------------------------
@pytest.mark.parametrize("et", ["type1", "type2"])
def test_condition_separation_and_unit_norm(et):
    for seed in range(3):
        m = CCAModel(cfg(et, num_conditions=4), seed=seed)
        e = m.embed_all_conditions(imgs(3, seed))
        np.testing.assert_allclose(np.linalg.norm(e, axis=-1), 1.0, atol=1e-9)
        for a in range(4):
            for b in range(a + 1, 4):
                assert np.all((e[a] * e[b]).sum(-1) < 1 - 1e-6)


def test_embed_all_conditions_k1_equals_forward():
    m = CCAModel(cfg(num_conditions=1), seed=1)
    x = imgs(2)
    assert np.array_equal(m.embed_all_conditions(x)[0], m.embed(x, 0))


def test_attention_export_shape_and_rows():
    m = CCAModel(cfg(num_conditions=3), seed=1)
    e, w = m.embed_all_conditions(imgs(4), attention=True)
    assert e.shape == (3, 4, 8) and w.shape == (3, 4, 5)
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)


@pytest.mark.parametrize("et,k,d", [("type1", 3, 8), ("type2", 3, 8), ("type2", 5, 16)])
def test_parameter_accounting(et, k, d):
    m = CCAModel(cfg(et, num_conditions=k, dim=d))
    assert m.conditional_parameters() == hd.conditional_param_formula(et, k, d)


def test_model_rejects_wrong_parameter_names():
    p = CCAModel.init_params(cfg(), np.random.default_rng(0))
    del p["head.cca.ln_q.gamma"]
    with pytest.raises(ConfigError):
        CCAModel(cfg(), p)
