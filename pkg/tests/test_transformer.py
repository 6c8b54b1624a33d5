"""Toy MGT forward pass: positions, conditioning bias, trace capture, weights I/O."""

import math

import numpy as np
import pytest

from mgtedit import transformer as tr
from mgtedit.codec import MaskedGrid, TokenGrid
from mgtedit.consolidation import normalize_cross_attention
from mgtedit.errors import DomainError, ShapeError, ValidationError
from mgtedit.tensor import GradTape, Tensor
from mgtedit.transformer import (ModelConfig, apply_rope, attention_bias_matrix, encode_condition, forward,
                                 init_weights, rope_positions, text_positions, timestep_embed)

from conftest import instruction, random_grid, tiny_config


@pytest.fixture
def case(rng):
    src = random_grid(rng, 3, 4, 8)
    tokens = src.tokens.copy()
    tokens[rng.choice(12, 5, replace=False)] = 8
    return MaskedGrid(3, 4, tokens, 8), src, instruction([1, 4, 7, 2])


# --------------------------------------------------------------------------
# config and weights


def test_config_validation():
    with pytest.raises(ValidationError):
        ModelConfig(d=18, heads=2)  # 18 is not divisible by 4
    with pytest.raises(ValidationError):
        ModelConfig(d=24, heads=4)  # head width 6 has no 2-D rotary split
    with pytest.raises(ValidationError):
        ModelConfig(mm_blocks=0)
    assert ModelConfig().n_layers == 12 and ModelConfig().mask_id == 16


def test_param_names_have_no_condition_copies():
    names = tr.param_shapes(ModelConfig())
    assert not any("cond" in n for n in names)
    assert names["tok_emb"] == (17, 64)  # K codebook rows plus MASK


def test_weights_json_roundtrip(tiny_weights, tmp_path):
    text = tr.weights_to_json(tiny_weights)
    back = tr.weights_from_json(text)
    assert tr.weights_to_json(back) == text
    for name, t in tiny_weights.tensors.items():
        assert back.tensors[name].data.tobytes() == t.data.tobytes()


def test_weights_loader_rejects_unknown_and_missing(tiny_weights):
    import json

    obj = json.loads(tr.weights_to_json(tiny_weights))
    obj["tensors"]["extra"] = {"shape": [1], "data": [0.0]}
    with pytest.raises(ValidationError, match="extra"):
        tr.weights_from_json(json.dumps(obj))
    del obj["tensors"]["extra"]
    del obj["tensors"]["out_b"]
    with pytest.raises(ValidationError, match="out_b"):
        tr.weights_from_json(json.dumps(obj))


def test_weights_audit_catches_bad_shape(tiny_weights):
    w = tiny_weights.copy()
    w.tensors["out_w"] = Tensor(np.zeros((3, 3)))
    with pytest.raises(ValidationError, match="out_w"):
        w.audit()


# --------------------------------------------------------------------------
# rotary positions


def test_rope_positions_small():
    assert rope_positions(1, 1).tolist() == [[0, 0]]
    assert rope_positions(2, 2).tolist() == [[0, 0], [0, 1], [1, 0], [1, 1]]


def test_rope_condition_positions_equal_image_positions(monkeypatch, tiny_weights, case):
    calls = []
    real = tr.rope_positions

    def spy(h, w):
        calls.append((h, w))
        return real(h, w)

    monkeypatch.setattr(tr, "rope_positions", spy)
    masked, src, instr = case
    forward(tiny_weights, masked, instr, src, 0.5)
    # one call for the condition stream, one for the image stream, same grid
    assert calls == [(3, 4), (3, 4)]


def test_text_positions_disjoint_from_image():
    img = {tuple(p) for p in rope_positions(3, 5)}
    txt = {tuple(p) for p in text_positions(3, 5, 4)}
    assert not img & txt and len(txt) == 4


def test_rope_origin_is_identity(rng):
    x = rng.standard_normal((1, 8))
    np.testing.assert_array_equal(apply_rope(Tensor(x), [[0, 0]]).data, x)


def test_rope_preserves_pair_norms(rng):
    x = rng.standard_normal((6, 16))
    y = apply_rope(Tensor(x), rng.integers(0, 40, (6, 2))).data
    nx = np.hypot(x[:, 0::2], x[:, 1::2])
    ny = np.hypot(y[:, 0::2], y[:, 1::2])
    np.testing.assert_allclose(ny, nx, rtol=0, atol=1e-12)


def test_rope_relative_position_probe(rng):
    q, k = rng.standard_normal((1, 16)), rng.standard_normal((1, 16))

    def dot(pq, pk):
        return float((apply_rope(Tensor(q), [pq]).data * apply_rope(Tensor(k), [pk]).data).sum())

    assert abs(dot((2, 3), (5, 7)) - dot((0, 0), (3, 4))) < 1e-9
    # and the dependence on the offset is real
    assert abs(dot((0, 0), (3, 4)) - dot((0, 0), (4, 3))) > 1e-6


def test_rope_indivisible_width():
    with pytest.raises(ShapeError):
        apply_rope(Tensor(np.ones((1, 6))), [[0, 0]])


# --------------------------------------------------------------------------
# conditioning bias


def test_bias_matrix_values():
    b1 = attention_bias_matrix(1.0, 2, 1, 2)
    assert np.all(b1 == 0.0)
    b0 = attention_bias_matrix(0.0, 2, 1, 2)
    assert np.all(np.isneginf(b0[:3, 3:])) and np.all(b0[3:, :] == 0) and np.all(b0[:3, :3] == 0)
    b2 = attention_bias_matrix(2.0, 2, 1, 2)
    assert np.all(b2[:3, 3:] == math.log(2.0))
    with pytest.raises(DomainError):
        attention_bias_matrix(-0.1, 1, 1, 1)


def test_bias_zero_gamma_removes_condition_mass(rng):
    scores = rng.standard_normal((3, 5)) + attention_bias_matrix(0.0, 2, 1, 2)[:3]
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    assert np.all(p[:, 3:] == 0.0)


@pytest.mark.parametrize("gamma", [0.3, 1.0, 2.0, 7.5])
@pytest.mark.parametrize("kernel", ["fused", "taped"])
def test_two_key_condition_mass_closed_form(rng, gamma, kernel):
    dh = 4
    q = rng.standard_normal((1, 1, dh))
    k_own, k_cond = rng.standard_normal((1, 1, dh)), rng.standard_normal((1, 1, dh))
    v_own, v_cond = rng.standard_normal((1, 1, dh)), rng.standard_normal((1, 1, dh))
    s_o = float(q[0, 0] @ k_own[0, 0]) / math.sqrt(dh)
    s_v = float(q[0, 0] @ k_cond[0, 0]) / math.sqrt(dh)
    expected = gamma * math.exp(s_v) / (gamma * math.exp(s_v) + math.exp(s_o))
    if kernel == "fused":
        _, cap = tr._fused_attention(q, k_own, v_own, k_cond, v_cond, math.log(gamma), 0)
    else:
        _, cap = tr._taped_attention(Tensor(q), Tensor(k_own), Tensor(v_own), Tensor(k_cond), Tensor(v_cond),
                                     math.log(gamma), 0, GradTape())
    assert abs(cap[0, 1] - expected) < 1e-12
    assert abs(cap.sum() - 1.0) < 1e-12


def test_fused_kernel_underflow_fallback():
    # orthogonal large vectors push every shifted score below exp's range
    dh = 4
    q = np.zeros((1, 1, dh))
    q[0, 0, 0] = 60.0
    k = np.zeros((1, 3, dh))
    k[0, 0, 1], k[0, 1, 1], k[0, 2, 0] = 60.0, -60.0, 0.5
    v = np.arange(12, dtype=float).reshape(1, 3, 4)
    out, cap = tr._fused_attention(q, k, v, None, None, 0.0, 0)
    s = (q[0] @ k[0].T)[0] / 2.0
    p = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
    np.testing.assert_allclose(cap[0], p, rtol=1e-12, atol=1e-300)
    np.testing.assert_allclose(out[0, 0], p @ v[0], rtol=1e-12)


def test_gamma_zero_equals_no_condition_bitwise(tiny_weights, case):
    masked, src, instr = case
    a = forward(tiny_weights, masked, instr, src, 0.6, gamma=0.0, capture=True)
    b = forward(tiny_weights, masked, instr, None, 0.6, capture=True)
    assert a.logits.data.tobytes() == b.logits.data.tobytes()
    for x, y in zip(a.trace.matrices, b.trace.matrices):
        assert x.tobytes() == y.tobytes()


def test_gamma_one_equals_bias_free_path_bitwise(tiny_weights, case):
    masked, src, instr = case
    a = forward(tiny_weights, masked, instr, src, 0.6, gamma=1.0)
    b = tr._forward(tiny_weights, masked, instr, src, 0.6, None, False, None, None)
    assert a.logits.data.tobytes() == b.logits.data.tobytes()


def test_gamma_changes_output(tiny_weights, case):
    masked, src, instr = case
    a = forward(tiny_weights, masked, instr, src, 0.6, gamma=1.0).logits.data
    b = forward(tiny_weights, masked, instr, src, 0.6, gamma=3.0).logits.data
    c = forward(tiny_weights, masked, instr, None, 0.6).logits.data
    assert np.abs(a - b).max() > 1e-6 and np.abs(a - c).max() > 1e-6


# --------------------------------------------------------------------------
# forward


def test_forward_shapes_and_determinism(tiny_weights, case):
    masked, src, instr = case
    a = forward(tiny_weights, masked, instr, src, 0.4, 1.5, capture=True)
    b = forward(tiny_weights, masked, instr, src, 0.4, 1.5, capture=True)
    assert a.logits.shape == (12, 8)
    assert a.logits.data.tobytes() == b.logits.data.tobytes()
    assert a.trace.labels == ["mm0", "sm0", "sm1"]
    assert all(m.shape == (4, 12) and np.all(m >= 0) for m in a.trace.matrices)


def test_trace_rows_sum_to_one(tiny_weights, case):
    masked, src, instr = case
    res = forward(tiny_weights, masked, instr, src, 0.4, 2.0, capture=True)
    for tot in res.trace.row_totals:
        np.testing.assert_allclose(tot, 1.0, rtol=0, atol=1e-12)
    for w in normalize_cross_attention(res.trace):
        np.testing.assert_allclose(w.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_taped_and_fused_forward_agree(tiny_weights, case):
    masked, src, instr = case
    a = forward(tiny_weights, masked, instr, src, 0.4, 2.0, capture=True)
    b = forward(tiny_weights, masked, instr, src, 0.4, 2.0, capture=True, tape=GradTape())
    np.testing.assert_allclose(a.logits.data, b.logits.data, rtol=0, atol=1e-12)
    for x, y in zip(a.trace.matrices, b.trace.matrices):
        np.testing.assert_allclose(x, y, rtol=0, atol=1e-12)


def test_sm_text_switch_off_drops_sm_layers(rng):
    w = init_weights(tiny_config(sm_text=False), rng)
    src = random_grid(rng, 2, 2, 8)
    res = forward(w, src, instruction([1, 2]), src, 0.5, capture=True)
    assert res.trace.labels == ["mm0"]


def test_condition_cache_reuse_is_exact(tiny_weights, case):
    masked, src, instr = case
    cache = encode_condition(tiny_weights, src)
    for t in (0.0, 0.5, 1.0):
        a = forward(tiny_weights, masked, instr, src, t, 1.7).logits.data
        b = forward(tiny_weights, masked, instr, src, t, 1.7, cond_cache=cache).logits.data
        assert a.tobytes() == b.tobytes()


def test_condition_stream_uses_timestep_zero(monkeypatch, tiny_weights, case):
    seen = []
    real = tr.timestep_embed

    def spy(weights, t, tape=None):
        seen.append(t)
        return real(weights, t, tape)

    monkeypatch.setattr(tr, "timestep_embed", spy)
    masked, src, instr = case
    forward(tiny_weights, masked, instr, src, 0.8)
    assert seen == [0.0, 0.8]


def test_timestep_embed_properties(tiny_weights):
    a, b = timestep_embed(tiny_weights, 0.0), timestep_embed(tiny_weights, 1.0)
    again = timestep_embed(tiny_weights, 0.0)
    for p in a:
        assert a[p].data.tobytes() == again[p].data.tobytes()
        assert np.abs(a[p].data - b[p].data).max() > 1e-8
    with pytest.raises(DomainError):
        timestep_embed(tiny_weights, 1.01)
    with pytest.raises(DomainError):
        timestep_embed(tiny_weights, -0.01)


def test_forward_errors(tiny_weights, case, rng):
    masked, src, instr = case
    with pytest.raises(ShapeError):
        forward(tiny_weights, masked, instr, random_grid(rng, 4, 3, 8), 0.5)
    bad = TokenGrid(3, 4, src.tokens.copy(), 8)
    bad.tokens[0] = 8  # MASK smuggled into the condition
    with pytest.raises(ValidationError):
        forward(tiny_weights, masked, instr, bad, 0.5)
    with pytest.raises(DomainError):
        forward(tiny_weights, masked, instr, src, 1.5)
    with pytest.raises(DomainError):
        forward(tiny_weights, masked, instr, src, 0.5, gamma=-1.0)
    with pytest.raises(ValidationError):
        forward(tiny_weights, masked, instruction(np.ones(9, dtype=int)), src, 0.5)
    with pytest.raises(ValidationError):
        forward(tiny_weights, masked, instruction([12]), src, 0.5)
