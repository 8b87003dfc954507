import numpy as np
import pytest

from unitstream import decoder as D
from unitstream import nn
from unitstream.ctc import best_path, collapse
from unitstream.tensor import Tensor

from conftest import assert_close


def toy_decoder(rng, lam=3, k=5, layers=2, dim=16):
    cfg = D.DecoderConfig(
        unit_vocab_k=k,
        transformer=nn.TransformerConfig(
            layers=layers, model_dim=dim, heads=2, ffn_dim=24, max_seq_len=256, causal=True
        ),
        upsample_lambda=lam,
    )
    return D.Decoder(cfg, params=D.init_decoder_params(cfg, rng))


def test_upsample_definition(rng):
    c = rng.normal(size=(2, 4))
    up = D.upsample(c, 2)
    assert_close(up, np.stack([c[0], c[0], c[1], c[1]]))
    assert_close(D.upsample(c, 1), c)
    assert D.upsample(np.zeros((0, 4)), 3).shape == (0, 4)


def test_decode_full_shapes(rng):
    dec = toy_decoder(rng, lam=4, k=5)
    out = dec.decode_full(rng.normal(size=(1, 16)))
    assert out.data.shape == (4, 6)


def test_decode_full_zero_head_gives_bias(rng):
    dec = toy_decoder(rng, lam=2, k=3)
    dec.params["ctc_head.weight"].data[:] = 0.0
    dec.params["ctc_head.bias"].data[:] = np.arange(4, dtype=float)
    out = dec.decode_full(rng.normal(size=(3, 16))).data
    assert_close(out, np.tile(np.arange(4.0), (6, 1)))


def test_decode_full_matches_manual_composition(rng):
    dec = toy_decoder(rng, lam=3, k=4)
    hidden = rng.normal(size=(2, 16))
    got = dec.decode_full(hidden).data

    from unitstream import tensor as tz

    x = Tensor(D.upsample(hidden, 3))
    h = nn.transformer_forward(x, dec.cfg.transformer, dec.params)
    h = tz.rms_norm(h, dec.params["final_norm.gamma"])
    manual = h.data @ dec.params["ctc_head.weight"].data.T + dec.params["ctc_head.bias"].data
    assert_close(got, manual, rtol=1e-12)


def test_decode_full_length_error(rng):
    dec = toy_decoder(rng, lam=100, k=3)
    with pytest.raises(nn.SequenceTooLongError):
        dec.decode_full(rng.normal(size=(3, 16)))


def test_extend_equals_full(rng):
    dec = toy_decoder(rng, lam=3, k=4)
    hidden = rng.normal(size=(2, 16))
    session = dec.start_session()
    rows = [session.extend(hidden[0]), session.extend(hidden[1])]
    assert_close(np.concatenate(rows), dec.decode_full(hidden).data, rtol=1e-9, atol=1e-12)


def test_extend_never_mutates_previous_rows(rng):
    dec = toy_decoder(rng, lam=2, k=4)
    session = dec.start_session()
    first = session.extend(rng.normal(size=16)).copy()
    for _ in range(5):
        session.extend(rng.normal(size=16))
    assert np.array_equal(session.logits()[:2], first)


def test_empty_state_plus_one_row_equals_full_m1(rng):
    dec = toy_decoder(rng)
    row = rng.normal(size=(1, 16))
    session = dec.start_session()
    assert_close(session.extend(row[0]), dec.decode_full(row).data, rtol=1e-9, atol=1e-12)


def test_streaming_consistency_random_splits(rng):
    for trial in range(10):
        lam = int(rng.integers(1, 5))
        dec = toy_decoder(rng, lam=lam, k=int(rng.integers(2, 6)), layers=int(rng.integers(1, 3)))
        m = int(rng.integers(1, 6))
        hidden = rng.normal(size=(m, 16))
        full = dec.decode_full(hidden).data
        session = dec.start_session()
        parts = [session.extend(hidden[i]) for i in range(m)]
        assert_close(np.concatenate(parts), full, rtol=1e-9, atol=1e-12)


def test_extend_rejects_bad_width(rng):
    dec = toy_decoder(rng)
    with pytest.raises(D.StateError):
        dec.start_session().extend(np.zeros(7))


def test_units_for_prefix_examples():
    k = 5  # blank = 5
    rows = np.zeros((4, 6))
    for t, sym in enumerate([5, 4, 4, 5]):
        rows[t, sym] = 9.0
    assert D.units_for_prefix(rows, k) == [4]
    assert D.units_for_prefix(np.zeros((0, 6)), k) == []
    all_blank = np.zeros((3, 6))
    all_blank[:, 5] = 9.0
    assert D.units_for_prefix(all_blank, k) == []


def test_unit_prefix_extension_property(rng):
    # units of a prefix are a prefix of the full units, except the final unit
    # may absorb continuing repeats; counts never decrease
    k = 4
    for _ in range(50):
        t = int(rng.integers(1, 30))
        align = rng.integers(0, k + 1, size=t)
        logits = np.zeros((t, k + 1))
        logits[np.arange(t), align] = 7.0
        full = collapse(best_path(logits), blank=k)
        prev_units: list[int] = []
        for cut in range(1, t + 1):
            units = collapse(best_path(logits[:cut]), blank=k)
            assert len(units) >= len(prev_units)
            assert units[: len(prev_units)] == prev_units  # never splits or reorders
            prev_units = units
        assert prev_units == full


def test_unit_count_bounded_by_rows(rng):
    dec = toy_decoder(rng, lam=3, k=4)
    session = dec.start_session()
    m = 4
    for i in range(m):
        session.extend(rng.normal(size=16))
    assert len(session.units()) <= 3 * m


def test_decode_full_empty_hidden(rng):
    dec = toy_decoder(rng, lam=3, k=4)
    out = dec.decode_full(np.zeros((0, 16)))
    assert out.data.shape == (0, 5)
