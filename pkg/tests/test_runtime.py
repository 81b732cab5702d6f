import json
from pathlib import Path

import numpy as np
import pytest

from oracles import forward_ref, layer_ref
from viti.errors import ConfigError, FormatError, GenerationError, InputError
from viti.linalg import make_rng
from viti.runtime import (
    KVCache, LayerWeights, ModelConfig, VisualSpan, attend, decode_greedy, dump_checkpoint, embed, forward,
    head_forward, init_model, layer_forward, load_model, model_from_arrays, parse_checkpoint, save_model,
)

FIXTURES = Path(__file__).parent / "fixtures"
TINY = ModelConfig(n_layers=2, n_heads=2, head_dim=4, vocab_size=11, max_seq=24)


def tiny_model(seed=0, std=0.3):
    return init_model(TINY, seed, std=std)


def test_config_shape_rules():
    cfg = ModelConfig(n_layers=3, n_heads=4, head_dim=5, vocab_size=9, max_seq=8)
    assert cfg.hidden == 20 and cfg.ffn_width == 80
    with pytest.raises(ConfigError) as e:
        ModelConfig(n_layers=0, n_heads=1, head_dim=1, vocab_size=1, max_seq=1)
    assert e.value.key == "n_layers"


def test_visual_span_validation():
    VisualSpan(0, 3).validate(3)
    for bad in (VisualSpan(2, 2), VisualSpan(-1, 2), VisualSpan(1, 5)):
        with pytest.raises(ConfigError):
            bad.validate(4)


def test_attend_examples():
    np.testing.assert_allclose(attend([0.5, 0.5], [[1.0, 3.0], [3.0, 5.0]]), [2.0, 4.0])
    np.testing.assert_allclose(attend([1.0], [[7.0, -1.0]]), [7.0, -1.0])
    np.testing.assert_allclose(attend([0.2, 0.3, 0.5], [[1, 0], [0, 1], [10, 10]]), [5.2, 5.3], rtol=1e-12)


def test_single_token_head_forward():
    m = tiny_model()
    X = embed(m, [3])
    recs = head_forward(X, m.layers[0], 1, VisualSpan(0, 1))
    assert len(recs) == 1
    np.testing.assert_array_equal(recs[0].attn_row, [1.0])
    # o is the single value row, and mu equals it when all attention is visual
    np.testing.assert_allclose(recs[0].mu, recs[0].o, rtol=1e-7)


def test_head_forward_records_match_layer_taps():
    m = tiny_model(1)
    tokens = [1, 4, 5, 6, 2, 7]
    X = embed(m, tokens)
    span = VisualSpan(1, 4)
    taps = []
    layer_forward(X, m.layers[0], 0, taps=taps)
    for h in range(TINY.n_heads):
        recs = head_forward(X, m.layers[0], h, span)
        for i, r in enumerate(recs):
            np.testing.assert_allclose(r.attn_row, taps[0].attn[h, i], rtol=1e-12)
            np.testing.assert_allclose(r.o, taps[0].o[h, i], rtol=1e-12)
            assert abs(r.attn_row.sum() - 1) < 1e-6


def test_head_forward_span_out_of_range():
    m = tiny_model()
    with pytest.raises(ConfigError):
        head_forward(embed(m, [1, 2]), m.layers[0], 0, VisualSpan(1, 5))


def test_layer_matches_loop_reference():
    m = tiny_model(2)
    X = make_rng(0).standard_normal((7, TINY.hidden))
    np.testing.assert_allclose(layer_forward(X, m.layers[0]), layer_ref(X, m.layers[0]), rtol=1e-10, atol=1e-12)


def test_forward_matches_loop_reference():
    m = tiny_model(3)
    tokens = [1, 3, 3, 8, 2, 10, 0]
    np.testing.assert_allclose(forward(m, tokens), forward_ref(m, tokens), rtol=1e-9, atol=1e-11)


def test_causality_per_head_per_layer():
    m = tiny_model(4)
    taps = []
    forward(m, [1, 2, 3, 4, 5, 6], taps=taps)
    for t in taps:
        assert np.all(np.triu(t.attn, 1) == 0)


def test_future_tokens_do_not_change_past_logits():
    m = tiny_model(4)
    a = forward(m, [1, 2, 3, 4])
    b = forward(m, [1, 2, 3, 4, 9, 9])
    np.testing.assert_allclose(a, b[:4], rtol=1e-12)


def test_head_activation_in_convex_hull_of_values():
    m = tiny_model(5)
    taps = []
    forward(m, [1, 5, 2, 8, 3, 4, 6], taps=taps)
    for t in taps:
        for h in range(TINY.n_heads):
            for i in range(t.attn.shape[1]):
                vals = t.values[h, : i + 1]
                o = t.o[h, i]
                assert np.all(o <= vals.max(axis=0) + 1e-12)
                assert np.all(o >= vals.min(axis=0) - 1e-12)


def test_identity_intervenor_is_bitwise_noop():
    m = tiny_model(6)
    X = make_rng(1).standard_normal((5, TINY.hidden))
    plain = layer_forward(X, m.layers[1], 1)
    same = layer_forward(X, m.layers[1], 1, intervenor=lambda l, a, v, o: o)
    assert np.array_equal(plain, same)


def test_zero_ffn_leaves_attention_residual():
    m = tiny_model(7)
    lw = m.layers[0]
    zero = LayerWeights(**{k: (np.zeros_like(getattr(lw, k)) if k in ("w_1", "w_2") else getattr(lw, k))
                           for k in LayerWeights.FIELDS})
    X = make_rng(2).standard_normal((4, TINY.hidden))
    taps = []
    out = layer_forward(X, zero, 0, taps=taps)
    H, n, D = taps[0].o.shape
    attn_out = taps[0].o.transpose(1, 0, 2).reshape(n, H * D) @ lw.w_o.astype(np.float64)
    np.testing.assert_allclose(out, X + attn_out, rtol=1e-12)


def test_raising_intervenor_aborts_generation():
    m = tiny_model()

    def boom(layer, attn, values, o):
        raise RuntimeError("bad hook")

    with pytest.raises(GenerationError, match="layer 0"):
        decode_greedy(m, [1, 2, 3], VisualSpan(0, 2), 2, boom)


def test_wrong_shape_from_intervenor():
    m = tiny_model()
    with pytest.raises(GenerationError):
        decode_greedy(m, [1, 2, 3], VisualSpan(0, 2), 1, lambda l, a, v, o: o[:, :, :1])


def test_kv_cache_decode_matches_full_forward():
    m = tiny_model(8)
    prompt = [1, 4, 4, 7, 2]
    trace = decode_greedy(m, prompt, VisualSpan(1, 3), 6)
    seq = list(prompt)
    for tok, logits in zip(trace.tokens, trace.logits):
        full = forward(m, seq)[-1]
        np.testing.assert_allclose(logits, full, rtol=1e-9, atol=1e-12)
        assert tok == int(np.argmax(full))
        seq.append(tok)


def test_kv_cache_grows_per_layer():
    cache = KVCache(TINY)
    k = np.ones((TINY.n_heads, 3, TINY.head_dim))
    keys, values = cache.append(0, k, 2 * k)
    assert keys.shape == (TINY.n_heads, 3, TINY.head_dim) and len(cache) == 3
    keys, values = cache.append(0, k[:, :1], k[:, :1])
    assert keys.shape[1] == 4 and np.all(values[:, 3] == 1) and np.all(values[:, 0] == 2)


def test_decode_greedy_contracts():
    m = tiny_model()
    assert decode_greedy(m, [1, 2], None, 0).tokens == []
    with pytest.raises(InputError):
        decode_greedy(m, [], None, 1)
    with pytest.raises(InputError):
        decode_greedy(m, [1] * 20, None, 5)
    a = decode_greedy(m, [1, 2, 3], VisualSpan(0, 2), 5)
    b = decode_greedy(m, [1, 2, 3], VisualSpan(0, 2), 5)
    assert a.tokens == b.tokens
    assert all(np.array_equal(x, y) for x, y in zip(a.logits, b.logits))
    assert all(0.0 <= s.visual_mass <= 1.0 for s in a.steps)


def test_decode_stops_at_eos():
    m = tiny_model()
    first = decode_greedy(m, [1, 2, 3], None, 1).tokens[0]
    assert decode_greedy(m, [1, 2, 3], None, 5, eos=first).tokens == [first]


def test_content_override_feeds_embeddings():
    m = tiny_model(9)
    tokens = [1, 2, 3, 4]
    content = m.tok_emb.astype(np.float64)[tokens]
    assert np.array_equal(forward(m, tokens), forward(m, tokens, content=content))
    content[1] += make_rng(0).standard_normal(TINY.hidden)
    assert not np.allclose(forward(m, tokens), forward(m, tokens, content=content))


def test_checkpoint_round_trip(tmp_path):
    m = tiny_model(10)
    path = tmp_path / "m.bin"
    save_model(m, path)
    data = path.read_bytes()
    assert data[:4] == b"VITI"
    back = load_model(path)
    assert back.equals(m)
    assert dump_checkpoint(back) == data


def test_checkpoint_rejects_bad_files():
    data = dump_checkpoint(tiny_model())
    with pytest.raises(FormatError):
        parse_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        parse_checkpoint(data[:4] + b"\x09\x00" + data[6:])
    with pytest.raises(FormatError):
        parse_checkpoint(data[:-4])
    with pytest.raises(FormatError):
        parse_checkpoint(data + b"\x00")


def test_model_from_arrays_rejects_wrong_count():
    with pytest.raises(FormatError):
        model_from_arrays(TINY, tiny_model().arrays()[:-1])


def test_golden_layer_output():
    """Regression fixture: seed-7 tiny model, fixed input, recorded layer-0 output."""
    golden = json.loads((FIXTURES / "golden_layer.json").read_text())
    m = init_model(TINY, 7, std=0.3)
    X = make_rng(7).standard_normal((golden["rows"], TINY.hidden))
    out = layer_forward(X, m.layers[0], 0)
    np.testing.assert_allclose(out.ravel(), golden["output"], rtol=1e-5, atol=1e-7)
