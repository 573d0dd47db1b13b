from pathlib import Path

import numpy as np
import pytest

from congrobust import predictor, tensorio
from congrobust.features import FeatureEngine
from congrobust.layout import synth_layout
from congrobust.predictor import FCN, GCN, GraphCache, Objective, input_gradient

from fdcheck import central_diff, rel_err

GOLDEN = Path(__file__).parent / "golden"


def conv_direct(a, w, b, stride, pad):
    # textbook loop convolution, channels-last input, (O, C, k, k) weight
    n, X, Y, C = a.shape
    O, _, k, _ = w.shape
    ap = np.pad(a, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    xo, yo = (X + 2 * pad - k) // stride + 1, (Y + 2 * pad - k) // stride + 1
    out = np.zeros((n, xo, yo, O))
    for i in range(xo):
        for j in range(yo):
            patch = ap[:, i * stride:i * stride + k, j * stride:j * stride + k, :]
            out[:, i, j, :] = np.einsum("nabc,ocab->no", patch, w) + b
    return out


def convT_direct(a, w, b, stride, pad):
    # scatter form of a transposed conv whose adjoint conv has weight w (O=a's channels... stored (C_in, C_out, k, k))
    n, X, Y, C = a.shape
    Cin, Cout, k, _ = w.shape
    full = np.zeros((n, (X - 1) * stride + k, (Y - 1) * stride + k, Cout))
    for i in range(X):
        for j in range(Y):
            full[:, i * stride:i * stride + k, j * stride:j * stride + k, :] += np.einsum("nc,cdab->nabd", a[:, i, j, :], w)
    return full[:, pad:full.shape[1] - pad, pad:full.shape[2] - pad, :] + b


def fcn_direct(m, params):
    a = m[None]
    for name, kind, cin, cout, k, s, p in predictor.FCN_LAYERS:
        w, b = params[f"{name}.w"], params[f"{name}.b"]
        z = conv_direct(a, w, b, s, p) if kind == "conv" else convT_direct(a, w, b, s, p)
        a = np.maximum(z, 0.0) if name != "out" else z
    return 1.0 / (1.0 + np.exp(-np.clip(a[0, ..., 0], -30, 30)))


@pytest.fixture(scope="module")
def m16():
    return tensorio.load(GOLDEN / "fcn_input.ten")


def test_fcn_matches_direct_convolution(m16):
    model = FCN.init(3)
    np.testing.assert_allclose(model.forward(m16)[0], fcn_direct(m16, model.params), rtol=1e-11, atol=1e-13)


def test_fcn_zero_model_gives_half(m16):
    assert np.all(FCN.zeros().forward(np.zeros((8, 8, 3)))[0] == 0.5)
    assert np.all(FCN.zeros().forward(m16)[0] == 0.5)


def test_fcn_golden(m16):
    np.testing.assert_array_equal(FCN.init(0).forward(m16)[0], tensorio.load(GOLDEN / "fcn_seed0.ten"))


def test_fcn_output_range_and_shape(m16):
    p = FCN.init(1).forward(np.stack([m16, 2 * m16]))[0]
    assert p.shape == (2, 16, 16)
    assert np.all((p > 0) & (p < 1))


def test_fcn_batch_equals_single(m16):
    model = FCN.init(2)
    batch = model.forward(np.stack([m16, m16[::-1]]))[0]
    np.testing.assert_allclose(batch[1], model.forward(m16[::-1])[0], rtol=1e-13)


def test_fcn_bias_monotone(m16):
    model = FCN.init(4)
    lo = model.forward(m16)[0]
    model.params["out.b"] = model.params["out.b"] + 0.5
    assert np.all(model.forward(m16)[0] > lo)


def test_fcn_rejects_bad_shape():
    with pytest.raises(ValueError):
        FCN.init(0).forward(np.zeros((7, 8, 3)))
    with pytest.raises(ValueError):
        FCN.init(0).forward(np.zeros((8, 8, 2)))


def test_fcn_zero_cotangent(m16):
    model = FCN.init(0)
    _, cache = model.forward(m16)
    grads, gin = model.backward(cache, out_grad=np.zeros((16, 16)))
    assert not gin.any()
    assert all(not g.any() for g in grads.values())


def fcn_fd_errors(model, m, r, n_dirs=2, n_coords=12):
    """Relative errors of analytic vs central-difference gradients (directional and coordinate samples)."""
    gout = r.normal(size=m.shape[:2])
    _, cache = model.forward(m)
    grads, gin = model.backward(cache, out_grad=gout)
    errs = []

    def f_in(x):
        return float(np.sum(gout * model.forward(x)[0]))

    for _ in range(n_dirs):
        v = r.normal(size=m.shape)
        v /= np.linalg.norm(v)
        num = central_diff(lambda t: f_in(m + t[0] * v), np.zeros(1))[0]
        errs.append(rel_err(np.sum(gin * v), num))
    idx = [tuple(r.integers(0, s) for s in m.shape) for _ in range(n_coords)]
    for i in idx:
        def f1(t, i=i):
            x = m.copy()
            x[i] += t[0]
            return f_in(x)
        # single entries can be ~0, so measure against the size of the whole gradient
        errs.append(abs(gin[i] - central_diff(f1, np.zeros(1))[0]) / np.abs(gin).max())

    for name in model.params:
        w = model.params[name]
        v = r.normal(size=w.shape)
        v /= np.linalg.norm(v)

        def f_p(t, name=name, w=w, v=v):
            model.params[name] = w + t[0] * v
            try:
                return float(np.sum(gout * model.forward(m)[0]))
            finally:
                model.params[name] = w
        errs.append(rel_err(np.sum(grads[name] * v), central_diff(f_p, np.zeros(1))[0]))
    return errs


def kink_free_fcn(r):
    # zero biases on sparse maps put many pre-activations exactly on the ReLU kink
    model = FCN.init(int(r.integers(1 << 30)))
    for k in model.params:
        if k.endswith(".b"):
            model.params[k] = 0.1 * r.normal(size=model.params[k].shape)
    return model


def test_fcn_finite_difference(smooth_layouts):
    r = np.random.default_rng(0)
    errs = []
    for lay in smooth_layouts[:8]:
        m = FeatureEngine(lay).maps(lay.coords)
        errs += fcn_fd_errors(kink_free_fcn(r), m, r)
    assert max(errs) < 1e-5


def test_fused_logit_gradient_matches_chain(m16):
    model = FCN.init(5)
    p, cache = model.forward(m16)
    label = (np.arange(256).reshape(16, 16) % 3 == 0).astype(float)
    _, gp = predictor.bce_from_probs(p, label)
    _, lg = predictor.bce_from_logits(cache["logits"][0], label)
    a = model.backward(cache, out_grad=gp)[1]
    b = model.backward(cache, logit_grad=lg)[1]
    np.testing.assert_allclose(a, b, rtol=1e-7, atol=1e-14)


def test_param_grads_flag(m16):
    model = FCN.init(0)
    _, cache = model.forward(m16)
    g = np.ones((16, 16))
    full, gin = model.backward(cache, out_grad=g)
    none, gin2 = model.backward(cache, out_grad=g, param_grads=False)
    assert none is None and np.array_equal(gin, gin2)


def test_bce_gradient_vanishes_at_label():
    # logit 0 gives p = 0.5, which matches a 0.5 label exactly
    loss, grad = predictor.bce_from_logits(np.zeros((2, 2)), np.full((2, 2), 0.5))
    assert loss == pytest.approx(np.log(2.0))
    assert not grad.any()
    # saturated logits against hard labels: gradient is sigmoid(+-30) - label, tiny but of the right sign
    _, g = predictor.bce_from_logits(np.array([[30.0, -30.0]]), np.array([[1.0, 0.0]]))
    assert abs(g).max() < 1e-13
    _, gp = predictor.bce_from_probs(np.array([0.25, 0.75]), np.array([0.25, 0.75]))
    assert not gp.any()


def test_constant_model_has_zero_input_gradient(m16):
    for obj in (Objective("score"), Objective("bce", np.full((16, 16), 0.3))):
        _, g = input_gradient(FCN.zeros(), m16, obj)
        assert not g.any()


def test_score_objective_value(m16):
    model = FCN.init(0)
    val, _ = input_gradient(model, m16, Objective("score"))
    p = model.forward(m16)[0]
    assert val == pytest.approx(np.mean(p ** 2), rel=1e-14)


def test_objective_validation():
    with pytest.raises(ValueError):
        Objective("bce")
    with pytest.raises(ValueError):
        Objective("hinge")


# -- GCN -----------------------------------------------------------------

@pytest.fixture(scope="module")
def gcn_layout():
    return synth_layout(1, n_cells=120, n_nets=160, W=8, H=8)


def test_gcn_golden(gcn_layout):
    out = predictor.gcn_forward(gcn_layout, GCN.init(0))
    np.testing.assert_array_equal(out, tensorio.load(GOLDEN / "gcn_seed0.ten"))


def test_gcn_zero_weights(gcn_layout):
    out = predictor.gcn_forward(gcn_layout, GCN.zeros())
    occupied = GraphCache(gcn_layout).bin_count.reshape(8, 8) > 0
    assert np.all(out[occupied] == 0.5)
    assert np.all(out[~occupied] == 0.0)


def test_gcn_adjacency_is_normalized(gcn_layout):
    g = GraphCache(gcn_layout)
    a = g.a_hat.toarray()
    assert np.allclose(a, a.T)
    # the top eigenvalue of D^-1/2 (A+I) D^-1/2 is 1
    assert np.max(np.linalg.eigvalsh(a)) == pytest.approx(1.0, abs=1e-10)


def test_gcn_permutation_invariant():
    from conftest import make_layout
    coords = [[0.1, 0.1], [0.6, 0.2], [0.3, 0.8], [0.9, 0.7]]
    nets = [[(0, 0, 0), (1, 0, 0)], [(1, 0, 0), (2, 0, 0), (3, 0, 0)], [(0, 0, 0), (3, 0, 0)]]
    a = make_layout(2, 2, coords, nets)
    perm = [2, 0, 3, 1]  # new index of old cell i
    inv = np.argsort(perm)
    b = make_layout(2, 2, np.asarray(coords)[inv], [[(perm[c], x, y) for c, x, y in net] for net in nets[::-1]])
    model = GCN.init(3)
    np.testing.assert_allclose(predictor.gcn_forward(a, model), predictor.gcn_forward(b, model), rtol=1e-12)


def test_gcn_finite_difference(smooth_layouts):
    r = np.random.default_rng(1)
    errs = []
    for lay in smooth_layouts[:8]:
        model = GCN.init(int(r.integers(1 << 30)))
        g = GraphCache(lay)
        gout = r.normal(size=(lay.grid.W, lay.grid.H))
        _, cache = model.forward(g, lay.coords)
        grads, gc = model.backward(g, cache, gout)

        def f_c(c):
            return float(np.sum(gout * model.forward(g, c)[0]))
        errs.append(rel_err(gc, central_diff(f_c, lay.coords)))
        for name, w in list(model.params.items()):
            def f_p(x, name=name):
                model.params[name] = x
                return float(np.sum(gout * model.forward(g, lay.coords)[0]))
            errs.append(rel_err(grads[name], central_diff(f_p, w)))
            model.params[name] = w
    assert max(errs) < 1e-5


def test_gcn_input_gradient_score(gcn_layout):
    model = GCN.init(0)
    val, g = input_gradient(model, gcn_layout, Objective("score"))
    assert g.shape == gcn_layout.coords.shape
    assert val == pytest.approx(np.mean(predictor.gcn_forward(gcn_layout, model) ** 2))


# -- checkpoints -----------------------------------------------------------

@pytest.mark.parametrize("cls", [FCN, GCN])
def test_save_load_roundtrip(tmp_path, cls):
    model = cls.init(9)
    predictor.save_model(model, tmp_path / "m")
    back = predictor.load_model(tmp_path / "m")
    assert type(back) is cls
    for k, v in model.params.items():
        assert np.array_equal(back.params[k], v)


def test_load_rejects_wrong_shape(tmp_path):
    predictor.save_model(FCN.init(0), tmp_path)
    tensorio.save(tmp_path / "out.b.ten", np.zeros(2))
    with pytest.raises(ValueError):
        predictor.load_model(tmp_path)


def test_deterministic(m16):
    a = FCN.init(0).forward(m16)[0]
    b = FCN.init(0).forward(m16)[0]
    assert np.array_equal(a, b)
