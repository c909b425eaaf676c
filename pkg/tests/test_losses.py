import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import _reference as ref
from mmloss import losses as L
from mmloss.numerics import FiniteDiffConfig, check_gradients, make_rng, softmax

FD = FiniteDiffConfig()


def random_instance(seed, B=2, C=3, K=2, M=2, simplex=False):
    rng = make_rng(seed)
    x = rng.dirichlet(np.ones(C), size=(M, B)) if simplex else rng.normal(size=(M, B, C))
    w = rng.normal(0, 0.5, size=(C, K, M, C))
    y = rng.integers(0, C, size=B)
    return x, y, w


# --- similarity ------------------------------------------------------------

def test_similarity_one_hot():
    x = np.array([[[1.0, 0.0]]])
    w = np.zeros((2, 1, 1, 2))
    w[0, 0, 0] = [1.0, 0.0]
    assert L.mm_similarity(x, w)[0, 0, 0] == 1.0


def test_similarity_zero_proxies():
    x, _, _ = random_instance(0)
    assert np.all(L.mm_similarity(x, np.zeros((3, 2, 2, 3))) == 0)


@pytest.mark.parametrize("seed", range(3))
def test_similarity_matches_loops(seed):
    x, _, w = random_instance(seed)
    np.testing.assert_allclose(L.mm_similarity(x, w), ref.similarity(x, w), atol=1e-13)


@pytest.mark.parametrize("bad_w, axis", [((4, 2, 2, 3), "class"), ((3, 2, 1, 3), "modality"),
                                         ((3, 2, 2, 4), "dim")])
def test_similarity_shape_errors_name_axis(bad_w, axis):
    x = np.zeros((2, 1, 3))
    with pytest.raises(L.LossError, match=axis):
        L.mm_similarity(x, np.zeros(bad_w))


# --- attention -------------------------------------------------------------

def test_attention_uniform():
    att = L.mm_attention(np.full((1, 2, 3), 0.7), 0.1, "soft")
    np.testing.assert_allclose(att, 1 / 6, atol=1e-15)


def test_attention_hard_one_hot():
    sim = np.zeros((1, 2, 3))
    sim[0, 1, 0] = 2.0
    att = L.mm_attention(sim, 0.1, "hard")
    expected = np.zeros_like(sim)
    expected[0, 1, 0] = 1.0
    np.testing.assert_array_equal(att, expected)


def test_attention_hard_ties_lowest_index():
    sim = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    att = L.mm_attention(sim, 0.1, "hard")
    assert att[0, 0, 1] == 1.0 and att.sum() == 1.0


def test_attention_soft_peaked_row():
    sim = np.array([[[1.0, 0.0], [0.0, 0.0]]])
    att = L.mm_attention(sim, 0.1, "soft").reshape(-1)
    np.testing.assert_allclose(att, softmax([10.0, 0.0, 0.0, 0.0]), atol=1e-15)
    assert att[0] == pytest.approx(0.99986, abs=1e-5)
    assert att[1] == pytest.approx(4.54e-5, rel=1e-2)


def test_attention_none_is_zero():
    assert np.all(L.mm_attention(np.ones((2, 3, 2)), 0.1, "none") == 0)


def test_attention_rejects_non_finite():
    with pytest.raises(L.LossError):
        L.mm_attention(np.array([[[np.inf, 0.0]]]), 0.1)


# --- attended output -------------------------------------------------------

def test_attended_output_ones_term_only():
    x = np.array([[[0.4, 0.6]], [[0.7, 0.3]]])
    w = np.random.default_rng(0).normal(size=(2, 3, 2, 2))
    A = L.mm_attended_output(x, w, np.zeros((1, 2, 3)))
    np.testing.assert_allclose(A, [[1.1, 0.9]], atol=1e-15)


def test_attended_output_zero_proxies():
    x, _, _ = random_instance(1)
    att = L.mm_attention(np.random.default_rng(1).normal(size=(2, 3, 2)), 0.1)
    np.testing.assert_allclose(L.mm_attended_output(x, np.zeros((3, 2, 2, 3)), att), x.sum(axis=0))


@pytest.mark.parametrize("seed", range(3))
def test_attended_output_matches_loops(seed):
    x, _, w = random_instance(seed)
    att = L.mm_attention(L.mm_similarity(x, w), 0.3)
    np.testing.assert_allclose(L.mm_attended_output(x, w, att), ref.attended_output(x, w, att), atol=1e-13)


# --- class similarity ------------------------------------------------------

def test_class_similarity_single_proxy():
    sim = np.array([[[2.0], [0.0]]])
    S = L.mm_class_similarity(sim, 1.0, "class")
    e2 = math.exp(2)
    np.testing.assert_allclose(S, [[2 * e2 / (e2 + 1), 0.0]], atol=1e-15)
    assert S[0, 0] == pytest.approx(1.7616, abs=1e-4)


@pytest.mark.parametrize("axis", ["class", "proxy"])
def test_class_similarity_zero(axis):
    assert np.all(L.mm_class_similarity(np.zeros((2, 3, 4)), 0.1, axis) == 0)


def test_proxy_axis_single_class_equals_class_axis_single_proxy():
    rng = make_rng(2)
    v = rng.normal(size=(3, 1, 5))  # C=1, K=5
    S_proxy = L.mm_class_similarity(v, 0.5, "proxy")
    S_class = L.mm_class_similarity(np.transpose(v, (0, 2, 1)), 0.5, "class")  # C=5, K=1
    np.testing.assert_allclose(S_proxy[:, 0], S_class.sum(axis=1), atol=1e-14)


# --- loss forward ----------------------------------------------------------

def test_loss_uniform_logits_is_log_c():
    C = 4
    x = np.full((2, 3, C), 1 / C)
    w = np.ones((C, 2, 2, C))
    loss, _ = L.mm_loss_forward(x, [0, 1, 3], w)
    assert abs(loss - math.log(C)) < 1e-12


def test_loss_one_hot_zero_proxies():
    x = np.array([[[1.0, 0.0]]])
    loss, _ = L.mm_loss_forward(x, [0], np.zeros((2, 1, 1, 2)))
    assert abs(loss - math.log1p(math.exp(-1))) < 1e-12
    assert loss == pytest.approx(0.31326, abs=1e-5)


def test_simplified_loss_one_hot_zero_proxies():
    x = np.array([[[1.0, 0.0]]])
    loss, _ = L.mm_simplified_forward(x, [0], np.zeros((2, 1, 1, 2)))
    assert abs(loss - math.log1p(math.exp(-1))) < 1e-12


def test_label_out_of_range_names_index():
    x, _, w = random_instance(0)
    with pytest.raises(L.LossError, match="index 1"):
        L.mm_loss_forward(x, [0, 3], w)


VARIANTS = [("soft", "class", True), ("soft", "proxy", True), ("none", "class", True),
            ("hard", "class", True), ("soft", "class", False), ("none", "proxy", False)]


@pytest.mark.parametrize("attention, axis, use_a", VARIANTS)
@pytest.mark.parametrize("seed", range(4))
def test_loss_matches_straight_line_reference(attention, axis, use_a, seed):
    x, y, w = random_instance(seed, B=3, C=3, K=2, M=2, simplex=bool(seed % 2))
    cfg = L.MultiModalConfig(attention=attention, norm_axis=axis, gamma=0.2, use_attended_output=use_a)
    got, _ = L.mm_loss_forward(x, y, w, cfg)
    want = ref.mm_loss(x, y, w, 0.2, attention, axis, use_a)
    assert abs(got - want) < 1e-12


def test_predict_is_argmax_of_logits():
    x, _, w = random_instance(3, B=6)
    z, _ = L.mm_logits(x, w)
    np.testing.assert_array_equal(L.mm_predict(x, w), z.argmax(axis=1))


# --- loss backward ---------------------------------------------------------

@pytest.mark.parametrize("cfg", [L.MultiModalConfig(), L.MultiModalConfig(norm_axis="proxy"),
                                 L.MultiModalConfig(attention="none"),
                                 L.MultiModalConfig(use_attended_output=False)])
def test_backward_matches_finite_differences(cfg):
    x, y, w = random_instance(7)
    g = L.mm_loss_and_grad(x, y, w, cfg)
    err = check_gradients(lambda p: L.mm_loss_forward(p[0], y, p[1], cfg)[0], [x, w],
                          [g.d_outputs, g.d_proxies], FD)
    assert err < 1e-6


def test_backward_saturated_logits_vanish():
    x = np.array([[[60.0, 0.0]]])
    w = np.zeros((2, 1, 1, 2))
    g = L.mm_loss_and_grad(x, [0], w)
    assert g.loss < 1e-20
    assert np.max(np.abs(g.d_outputs)) < 1e-20


def test_backward_symmetric_instance():
    C = 4
    x = np.full((1, 1, C), 1 / C)
    w = np.ones((C, 2, 1, C))
    g = L.mm_loss_and_grad(x, [1], w)
    d = g.d_outputs[0, 0]
    others = np.delete(d, 1)
    np.testing.assert_allclose(others, others[0], atol=1e-15)


def test_hard_attention_is_straight_through():
    x, y, w = random_instance(11)
    cfg = L.MultiModalConfig(attention="hard")
    g = L.mm_loss_and_grad(x, y, w, cfg)
    err = check_gradients(lambda p: L.mm_loss_forward(p[0], y, p[1], cfg)[0], [x, w],
                          [g.d_outputs, g.d_proxies], FD)
    assert err < 1e-6


def test_simplified_zero_proxy_gradient():
    x, y, _ = random_instance(4)
    g = L.mm_simplified_grads(x, y, np.zeros((3, 2, 2, 3)))
    # only the att * x path survives at w = 0 and att = sim = 0 there
    assert np.all(g.d_proxies == 0)


@pytest.mark.parametrize("seed", range(3))
def test_simplified_grads_match_finite_differences(seed):
    x, y, w = random_instance(seed, simplex=True)
    g = L.mm_simplified_grads(x, y, w)
    err = check_gradients(lambda p: L.mm_simplified_forward(p[0], y, p[1])[0], [x, w],
                          [g.d_outputs, g.d_proxies], FD)
    assert err < 1e-6


# --- invariants --------------------------------------------------------------

shapes = st.tuples(st.integers(1, 4), st.sampled_from([2, 3, 5]), st.sampled_from([1, 2, 4]),
                   st.integers(1, 3))


@settings(max_examples=40, deadline=None)
@given(shapes, st.integers(0, 2 ** 31), st.floats(0.05, 2.0))
def test_soft_attention_rows_sum_to_one(shape, seed, gamma):
    B, C, K, M = shape
    x, _, w = random_instance(seed, B, C, K, M)
    sim = L.mm_similarity(x, w)
    att = L.mm_attention(sim, gamma, "soft")
    np.testing.assert_allclose(att.sum(axis=(1, 2)), 1.0, atol=1e-12)
    q = softmax(sim, gamma, axis=1)
    np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(shapes, st.integers(0, 2 ** 31), st.sampled_from(VARIANTS))
def test_proxy_permutation_invariance(shape, seed, variant):
    B, C, K, M = shape
    x, y, w = random_instance(seed, B, C, K, M)
    cfg = L.MultiModalConfig(attention=variant[0], norm_axis=variant[1], use_attended_output=variant[2])
    perm = make_rng(seed + 1).permutation(K)
    base, _ = L.mm_loss_forward(x, y, w, cfg)
    permuted, _ = L.mm_loss_forward(x, y, w[:, perm], cfg)
    if variant[0] == "hard":
        # tie order changes with the permutation; only compare generic instances
        sim = L.mm_similarity(x, w).reshape(B, -1)
        top = np.sort(sim, axis=1)
        if top.shape[1] > 1 and np.min(top[:, -1] - top[:, -2]) < 1e-9:
            return
    assert abs(base - permuted) < 1e-12


@settings(max_examples=40, deadline=None)
@given(shapes, st.integers(0, 2 ** 31), st.sampled_from(VARIANTS))
def test_class_relabeling_equivariance(shape, seed, variant):
    B, C, K, M = shape
    x, y, w = random_instance(seed, B, C, K, M)
    cfg = L.MultiModalConfig(attention=variant[0], norm_axis=variant[1], use_attended_output=variant[2])
    pi = make_rng(seed + 2).permutation(C)
    inv = np.argsort(pi)  # new class j is old class pi[j]
    x2 = x[:, :, pi]
    w2 = w[pi][:, :, :, pi]
    y2 = inv[y]
    if variant[0] == "hard":
        sim = L.mm_similarity(x, w).reshape(B, -1)
        top = np.sort(sim, axis=1)
        if top.shape[1] > 1 and np.min(top[:, -1] - top[:, -2]) < 1e-9:
            return
    a, _ = L.mm_loss_forward(x, y, w, cfg)
    b, _ = L.mm_loss_forward(x2, y2, w2, cfg)
    assert abs(a - b) < 1e-12


def _reduction_pair(seed):
    rng = make_rng(seed)
    C = int(rng.choice([2, 3, 5]))
    K = int(rng.choice([1, 2, 4]))
    B = int(rng.integers(1, 5))
    gamma = float(rng.uniform(0.05, 1.0))
    x = rng.normal(size=(1, B, C))
    w = rng.normal(0, 0.5, size=(C, K, 1, C))
    y = rng.integers(0, C, size=B)
    mm_cfg = L.MultiModalConfig(attention="none", norm_axis="proxy", gamma=gamma, use_attended_output=False)
    st_cfg = L.SoftTripleConfig(lam=1.0, delta=0.0, gamma=gamma, K=K)
    mm_loss, _ = L.mm_loss_forward(x, y, w, mm_cfg)
    st_loss = L.softtriple_forward_backward(x[0], y, w[:, :, 0, :], st_cfg).loss
    return mm_loss, st_loss


@pytest.mark.parametrize("seed", range(100))
def test_softtriple_reduction(seed):
    a, b = _reduction_pair(seed)
    assert abs(a - b) < 1e-10


# --- SoftTriple --------------------------------------------------------------

def test_softtriple_equal_proxies():
    x = np.array([[0.3, -0.2]])
    P = np.ones((2, 3, 2))
    for lam, delta in [(1.0, 0.0), (2.0, 0.1)]:
        g = L.softtriple_forward_backward(x, [0], P, L.SoftTripleConfig(lam=lam, delta=delta, K=3))
        S = 0.1  # x . 1
        want = -math.log(math.exp(lam * (S - delta)) / (math.exp(lam * (S - delta)) + math.exp(lam * S)))
        assert abs(g.loss - want) < 1e-12
    g = L.softtriple_forward_backward(x, [1], P, L.SoftTripleConfig(lam=1.0, delta=0.0, K=3))
    assert abs(g.loss - math.log(2)) < 1e-12


def test_softtriple_single_proxy_is_dot_product():
    rng = make_rng(3)
    x = rng.normal(size=(4, 6))
    P = rng.normal(size=(3, 1, 6))
    S, _, _ = L.softtriple_similarity(x, P, 1e-3)
    np.testing.assert_allclose(S, x @ P[:, 0].T, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_softtriple_matches_reference(seed):
    rng = make_rng(seed)
    x = rng.normal(size=(3, 4))
    P = rng.normal(size=(3, 2, 4))
    y = rng.integers(0, 3, size=3)
    cfg = L.SoftTripleConfig(lam=3.0, delta=0.1, gamma=0.4, K=2)
    got = L.softtriple_forward_backward(x, y, P, cfg).loss
    assert abs(got - ref.softtriple_loss(x, y, P, 3.0, 0.1, 0.4)) < 1e-12


def test_softtriple_gradients():
    rng = make_rng(8)
    x = rng.normal(size=(3, 6))
    P = rng.normal(0, 0.5, size=(2, 4, 6))
    y = rng.integers(0, 2, size=3)
    cfg = L.SoftTripleConfig(lam=2.0, delta=0.05, gamma=0.3, K=4)
    g = L.softtriple_forward_backward(x, y, P, cfg)
    err = check_gradients(lambda p: L.softtriple_forward_backward(p[0], y, p[1], cfg).loss, [x, P],
                          [g.d_outputs, g.d_proxies], FD)
    assert err < 1e-6


def test_softtriple_config_validation():
    with pytest.raises(L.LossError):
        L.SoftTripleConfig(lam=0.0)
    with pytest.raises(L.LossError):
        L.SoftTripleConfig(delta=-0.1)


def test_concat_split_round_trip():
    x = np.arange(24.0).reshape(2, 3, 4)
    flat = L.concat_modalities(x)
    assert flat.shape == (3, 8)
    np.testing.assert_array_equal(flat[1], np.r_[x[0, 1], x[1, 1]])
    np.testing.assert_array_equal(L.split_modalities(flat, 2), x)


# --- fusion heads ------------------------------------------------------------

def _ce(z, y):
    z = np.asarray(z)
    return float(np.mean([math.log(np.sum(np.exp(r))) - r[t] for r, t in zip(z, y)]))


def test_sum_head_single_modality_is_plain_ce():
    x, y, _ = random_instance(5, B=4, M=1)
    g = L.fusion_ce_forward_backward(x, y, L.FusionHead("sum"))
    assert abs(g.loss - _ce(x[0], y)) < 1e-12


def test_weighted_head_one_hot_weights_is_unimodal_ce():
    x, y, _ = random_instance(5, B=4, M=3)
    g = L.fusion_ce_forward_backward(x, y, L.FusionHead("weighted_sum", (1.0, 0.0, 0.0)))
    assert abs(g.loss - _ce(x[0], y)) < 1e-12
    assert np.all(g.d_outputs[1:] == 0)


@pytest.mark.parametrize("kind", ["sum", "weighted_sum", "nn"])
def test_fusion_gradients(kind):
    rng = make_rng(12)
    x, y, _ = random_instance(12, B=3, M=3)
    if kind == "nn":
        head, params = L.FusionHead("nn"), L.init_nn_head(rng, 3, 3)
        g = L.fusion_ce_forward_backward(x, y, head, params)
        err = check_gradients(lambda p: L.fusion_ce_forward_backward(p[0], y, head, {"W": p[1], "b": p[2]}).loss,
                              [x, params["W"], params["b"]], [g.d_outputs, g.d_params["W"], g.d_params["b"]])
    else:
        head = L.FusionHead(kind, (0.2, 0.5, 0.3) if kind == "weighted_sum" else None)
        g = L.fusion_ce_forward_backward(x, y, head)
        err = check_gradients(lambda p: L.fusion_ce_forward_backward(p[0], y, head).loss, [x], [g.d_outputs])
    assert err < 1e-6


def test_fusion_shape_errors():
    x = np.zeros((2, 1, 3))
    with pytest.raises(L.LossError):
        L.fusion_ce_forward_backward(x, [0], L.FusionHead("weighted_sum", (1.0,)))
    with pytest.raises(L.LossError):
        L.fusion_ce_forward_backward(x, [0], L.FusionHead("nn"), {"W": np.zeros((3, 3)), "b": np.zeros(3)})


def test_effective_proxy_counts_bounds():
    x, _, w = random_instance(2, B=4, C=3, K=4, M=2)
    counts = L.effective_proxy_counts(x, w)
    assert counts.shape == (3,)
    assert np.all((counts >= 0) & (counts <= 4))
    # with near-zero proxies every slot carries 1/(CK) of the mass
    counts0 = L.effective_proxy_counts(x, w * 1e-6)
    np.testing.assert_array_equal(counts0, 4)
