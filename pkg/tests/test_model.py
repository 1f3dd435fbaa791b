import json

import numpy as np
import pytest

from qmann.fxp import QFormat
from qmann.model import PARAM_NAMES, MannModel, QuantConfig
from qmann.similarity import SimilarityRecord

Q25, Q52 = QFormat(2, 5), QFormat(5, 2)


def batch(rng, B=4, I=9, L=5, p=0.3):
    V = (rng.random((B, I, L)) < p).astype(np.int64)
    q = (rng.random((B, I)) < p).astype(np.int64)
    mask = np.ones((B, L), bool)
    mask[0, -2:] = False
    V[0, :, -2:] = 0
    a = rng.integers(0, I, B)
    return V, q, mask, a


def model(quant=None, I=9, E=6, L=5, R=3, seed=0, std=0.3):
    return MannModel(I, E=E, L=L, R=R, quant=quant, seed=seed, init_std=std)


# --- configuration ---------------------------------------------------------


def test_quant_config_validation():
    with pytest.raises(ValueError):
        QuantConfig(Q25, None, Q25)
    with pytest.raises(ValueError):
        QuantConfig(similarity="hamming")
    with pytest.raises(ValueError):
        QuantConfig(binary_act=True)
    with pytest.raises(ValueError):
        QuantConfig.uniform(Q25, similarity="cosine")
    q = QuantConfig.uniform(Q25, similarity="hamming", mq=True)
    assert QuantConfig.from_json(q.to_json()) == q


def test_param_shapes():
    m = model(I=11, E=7)
    shapes = {k: v.shape for k, v in m.params.as_dict().items()}
    assert shapes == {"W_a": (7, 11), "W_r": (7, 11), "W_q": (7, 11), "W_key": (7, 7), "W_o": (11, 7)}


# --- memory write ----------------------------------------------------------


@pytest.mark.parametrize("quant", [None, QuantConfig.uniform(Q52)])
def test_zero_input_zero_memory(quant):
    st = model(quant).write_memory(np.zeros((9, 4), np.int64))
    assert not st.M_a.any() and not st.M_r.any()


def test_one_hot_sentence_copies_weight_column():
    m = model(I=5, E=5)
    m.params.W_a = np.eye(5)
    V = np.zeros((5, 2), np.int64)
    V[3, 1] = 1
    st = m.write_memory(V)
    assert np.array_equal(st.M_a[:, 1], m.params.W_a[:, 3])


def test_quantized_memory_close_to_float():
    rng = np.random.default_rng(1)
    V = (rng.random((9, 5)) < 0.3).astype(np.int64)
    fm = model()
    qm = model(QuantConfig.uniform(QFormat(3, 4)))
    a, b = fm.write_memory(V), qm.write_memory(V)
    # each column sums a few quantized weights: per-word rounding is half a
    # step and the sum itself is exact
    words = V.sum(axis=0)
    assert np.all(np.abs(a.M_a - b.M_a) <= words * 2.0**-5 + 1e-12)
    assert np.all(np.abs(b.M_a * 16 - np.round(b.M_a * 16)) == 0)


def test_too_many_sentences():
    with pytest.raises(ValueError):
        model(L=3).write_memory(np.zeros((9, 4), np.int64))


# --- reads -----------------------------------------------------------------


def test_single_nonzero_slot_attracts_weight():
    m = model(E=4, R=2)
    m.params.W_q = np.zeros_like(m.params.W_q)
    m.params.W_q[:, 0] = 1.0
    m.params.W_key = np.eye(4)
    m.params.W_a = np.zeros_like(m.params.W_a)
    m.params.W_a[:, 1] = 3.0
    V = np.zeros((9, 4), np.int64)
    V[1, 2] = 1
    q = np.zeros(9, np.int64)
    q[0] = 1
    tr = m.read_hops(m.write_memory(V), q)
    for w in tr.weights:
        assert w[2] == w.max() and w[2] > 1 / 4
    assert tr.weights[0][2] > 0.99


def test_trace_shape_and_weight_invariants():
    rng = np.random.default_rng(2)
    m = model()
    V, q, _, _ = batch(rng, B=1)
    tr = m.read_hops(m.write_memory(V[0]), q[0])
    assert len(tr.keys) == len(tr.weights) == len(tr.reads) == 3
    for w in tr.weights:
        assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-6


def test_single_hop_uses_only_first_key():
    # R=1: the output depends on q only through k_1 = W_q q
    rng = np.random.default_rng(3)
    m = model(R=1)
    V, q, mask, _ = batch(rng, B=1)
    st = m.write_memory(V[0])
    tr = m.read_hops(st, q[0])
    k1 = m.params.W_q @ q[0]
    assert np.allclose(tr.keys[0], k1)
    w = np.exp(st.M_a.T @ k1)
    w /= w.sum()
    assert np.allclose(tr.final_key, m.params.W_key @ k1 + st.M_r @ w)


def test_float_and_fixed_agree_until_first_rounding():
    # weights on the Q5.2 grid: memories and the first key are then exact in
    # both modes; the first divergence is the re-quantized attention weights
    rng = np.random.default_rng(4)
    fm = model()
    for k in PARAM_NAMES:
        setattr(fm.params, k, np.round(getattr(fm.params, k) * 8) / 4)
    qm = model(QuantConfig.uniform(Q52))
    qm.params = fm.params.copy()
    V, q, _, _ = batch(rng, B=1)
    a, b = fm.write_memory(V[0]), qm.write_memory(V[0])
    assert np.array_equal(a.M_a, b.M_a) and np.array_equal(a.M_r, b.M_r)
    ta, tb = fm.read_hops(a, q[0]), qm.read_hops(b, q[0])
    assert np.array_equal(ta.keys[0], tb.keys[0])
    assert not np.array_equal(ta.weights[0], tb.weights[0])
    assert np.all(tb.weights[0] * 4 == np.round(tb.weights[0] * 4))


# --- output ----------------------------------------------------------------


def test_zero_output_weights_uniform():
    rng = np.random.default_rng(5)
    m = model()
    m.params.W_o[...] = 0
    V, q, _, _ = batch(rng, B=1)
    o = m.output(m.read_hops(m.write_memory(V[0]), q[0]))
    assert np.allclose(o, 1 / 9)


@pytest.mark.parametrize("quant", [None, QuantConfig.uniform(Q25, similarity="hamming")])
def test_output_normalized(quant):
    rng = np.random.default_rng(6)
    m = model(quant)
    V, q, mask, _ = batch(rng)
    c = m.forward(V, q, mask)
    assert np.allclose(c.o.sum(-1), 1, atol=1e-6)


def test_memorizes_single_example():
    rng = np.random.default_rng(7)
    m = model()
    V, q, mask, a = batch(rng, B=1)
    for _ in range(200):
        _, g, _ = m.loss_and_grads(V, q, mask, a)
        for k, v in g.items():
            getattr(m.params, k)[...] -= 0.3 * v
    assert m.predict(V, q, mask)[0] == a[0]


# --- gradients -------------------------------------------------------------


def _loss(m, V, q, mask, a):
    return m.loss_and_grads(V, q, mask, a)[0]


@pytest.mark.parametrize("R", [1, 3])
def test_float_gradients_match_finite_differences(R):
    rng = np.random.default_rng(8)
    m = model(R=R)
    V, q, mask, a = batch(rng)
    _, g, _ = m.loss_and_grads(V, q, mask, a)
    h = 1e-6
    for name in PARAM_NAMES:
        W = getattr(m.params, name)
        for idx in [tuple(rng.integers(0, s) for s in W.shape) for _ in range(12)]:
            old = W[idx]
            W[idx] = old + h
            lp = _loss(m, V, q, mask, a)
            W[idx] = old - h
            lm = _loss(m, V, q, mask, a)
            W[idx] = old
            fd = (lp - lm) / (2 * h)
            assert abs(g[name][idx] - fd) <= 1e-4 * max(abs(fd), 1e-3), (name, idx)


def test_padded_slots_get_no_gradient_and_no_weight():
    rng = np.random.default_rng(9)
    m = model()
    V, q, mask, a = batch(rng)
    c = m.forward(V, q, mask)
    for p in c.p:
        assert np.all(p[~mask] == 0)


def test_straight_through_blocks_saturated_weights():
    rng = np.random.default_rng(10)
    m = model(QuantConfig.uniform(Q25))
    m.params.W_o[...] = 0.5
    m.params.W_q[0, :] = 10.0  # far beyond Q2.5
    V, q, mask, a = batch(rng)
    _, g, _ = m.loss_and_grads(V, q, mask, a)
    assert np.all(g["W_q"][0] == 0)


# --- quantized modes -------------------------------------------------------


def test_hamming_forward_never_overflows_similarity():
    rng = np.random.default_rng(11)
    m = model(QuantConfig.uniform(Q25, similarity="hamming"), E=60, std=2.0)
    V, q, mask, _ = batch(rng, B=8, p=0.6)
    rec = SimilarityRecord()
    c = m.forward(V, q, mask, record=rec)
    assert c.overflow["similarity"] == 0
    assert np.abs(rec.values).max() <= 60 * 127 / 2048


def test_dot_forward_can_overflow_similarity():
    rng = np.random.default_rng(11)
    m = model(QuantConfig.uniform(Q25), E=60, std=2.0)
    V, q, mask, _ = batch(rng, B=8, p=0.6)
    assert m.forward(V, q, mask).overflow["similarity"] > 0


def test_binary_keys_and_reads():
    rng = np.random.default_rng(12)
    m = model(QuantConfig.uniform(Q25, binary_act=True))
    V, q, mask, a = batch(rng)
    c = m.forward(V, q, mask)
    for k in c.k + c.r:
        assert set(np.unique(k)) <= {-1.0, 1.0}
    _, g, _ = m.loss_and_grads(V, q, mask, a)
    assert all(np.isfinite(v).all() for v in g.values())


def test_mq_runs_and_keeps_keys_on_their_grids():
    rng = np.random.default_rng(13)
    m = model(QuantConfig.uniform(Q25, mq=True))
    V, q, mask, a = batch(rng)
    c = m.forward(V, q, mask)
    for h, k in enumerate(c.k):
        frac = 5 + (0, 1, -1)[h % 3]
        assert np.all(k * 2**frac == np.round(k * 2**frac))
    m.loss_and_grads(V, q, mask, a)


def test_fixed_memory_on_grid():
    rng = np.random.default_rng(14)
    m = model(QuantConfig.uniform(Q52))
    V, q, mask, _ = batch(rng)
    c = m.forward(V, q, mask)
    for arr in (c.Ma, c.Mr, *c.k, *c.r, *c.s):
        assert np.all(arr * 4 == np.round(arr * 4))


def test_forward_deterministic():
    rng = np.random.default_rng(15)
    V, q, mask, _ = batch(rng)
    for quant in (None, QuantConfig.uniform(Q25, similarity="hamming")):
        a = model(quant).forward(V, q, mask).logits
        b = model(quant).forward(V, q, mask).logits
        assert np.array_equal(a, b)


# --- checkpoints -----------------------------------------------------------


@pytest.mark.parametrize("quant", [None, QuantConfig.uniform(Q25, similarity="hamming", mq=True)])
def test_checkpoint_round_trip(tmp_path, quant):
    rng = np.random.default_rng(16)
    m = model(quant)
    p = tmp_path / "ck.json"
    m.save(str(p))
    m2 = MannModel.load(str(p))
    V, q, mask, _ = batch(rng)
    assert np.array_equal(m.forward(V, q, mask).logits, m2.forward(V, q, mask).logits)
    ck = json.loads(p.read_text())
    assert ck["version"] == 1
    if quant is not None:
        assert ck["quantized"]["W_a"]["format"] == "Q2.5"
        assert all(isinstance(x, int) for x in ck["quantized"]["W_a"]["data"])


def test_checkpoint_rejects_bad_version_and_tampering():
    ck = model(QuantConfig.uniform(Q25)).to_checkpoint()
    with pytest.raises(ValueError):
        MannModel.from_checkpoint({**ck, "version": 99})
    ck["quantized"]["W_o"]["data"][0] += 1
    with pytest.raises(ValueError):
        MannModel.from_checkpoint(ck)
