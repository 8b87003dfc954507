import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unitstream import data as D
from unitstream.units import Codebook, kmeans_fit


def test_rewrite_prompt_splices_instruction_once():
    out = D.render_rewrite_prompt("What is 2+2?")
    assert out.count("What is 2+2?") == 1
    assert "{instruction}" not in out


def test_rewrite_prompt_contains_rules_verbatim():
    out = D.render_rewrite_prompt("x")
    assert "adding fillers as appropriate" in out
    assert "Numbers should be written in English words rather than Arabic numerals." in out
    assert "relatively brief without excessive verbiage" in out
    assert 'Please output in JSON format as follows: {"question": {question}}.' in out


def test_response_prompt_contains_rules_verbatim():
    out = D.render_response_prompt("why is the sky blue")
    assert "such as parentheses, ordered lists, etc." in out
    assert "very concise and to the point, avoiding lengthy explanations" in out
    assert 'Please output in JSON format as follows: {"response": {response}}.' in out
    assert "{instruction}" not in out and out.count("why is the sky blue") == 1


def test_scoring_template_documented():
    assert "content and style" in D.SCORING_PROMPT_TEMPLATE
    assert "scale of 1 to 5" in D.SCORING_PROMPT_TEMPLATE


def test_empty_instruction_rejected():
    with pytest.raises(D.ValidationError):
        D.render_rewrite_prompt("")


# -------------------------------------------------------------- json parsing


def test_parse_model_json_plain():
    assert (
        D.parse_model_json('{"question": "hey, what is two plus two?"}', "question")
        == "hey, what is two plus two?"
    )


def test_parse_model_json_wrong_key():
    with pytest.raises(D.ValidationError) as err:
        D.parse_model_json('{"answer": "4"}', "question")
    assert err.value.raw


def test_parse_model_json_no_object():
    with pytest.raises(D.ValidationError):
        D.parse_model_json("no json here", "question")


def test_parse_model_json_non_string_value():
    with pytest.raises(D.ValidationError):
        D.parse_model_json('{"question": 4}', "question")


@given(
    st.text(alphabet="abc {}[]:,\"'\n", max_size=30),
    st.text(alphabet="abc {}[]:,\"'\n", max_size=30),
    st.text(
        alphabet=st.characters(blacklist_categories=("Cs",), blacklist_characters='"\\'),
        max_size=40,
    ),
)
@settings(max_examples=150)
def test_parse_model_json_fuzzed_wrappers(prefix, suffix, value):
    payload = json.dumps({"question": value})
    raw = prefix + payload + suffix
    try:
        got = D.parse_model_json(raw, "question")
    except D.ValidationError:
        # acceptable only when the wrapper text itself forms an earlier JSON
        # object; the embedded payload must then have been shadowed
        assert "{" in prefix
        return
    if got != value:
        # a JSON object inside the prefix may legitimately win the scan
        assert "{" in prefix


def test_parse_model_json_prose_wrapper():
    raw = 'Sure! Here you go: {"question": "hi there"} hope that helps'
    assert D.parse_model_json(raw, "question") == "hi there"


# ------------------------------------------------------------------- records


def test_triplet_record_round_trip(tmp_path, rng):
    rec = D.TripletRecord(
        id="abc",
        instruction_text="say hi",
        instruction_features_path="features/abc.fmat",
        response_text="hi",
        response_units=[3, 1, 2],
        provenance={"source_dataset": "x", "rewrite_model": "m", "tts_voice": "male"},
    )
    path = tmp_path / "r.jsonl"
    D.save_records_jsonl([rec], path)
    loaded = D.load_records_jsonl(path)
    assert len(loaded) == 1
    assert loaded[0] == rec


# ------------------------------------------------------------- build_dataset


def fixture_codebook(dim=8):
    rng = np.random.default_rng(0)
    return kmeans_fit(rng.normal(size=(64, dim)), 8, seed=0)


def stub_clients(seed=0):
    return D.DatasetClients(
        rewrite=D.StubRewriteClient(),
        respond=D.StubResponseClient(),
        tts=D.StubTtsClient(seed=seed, dim=8),
    )


INSTRUCTIONS = [f"please describe item number {i}" for i in range(10)]


def test_build_dataset_ten_records(tmp_path):
    manifest = D.build_dataset(
        INSTRUCTIONS, stub_clients(), tmp_path, fixture_codebook(), source_name="fixture"
    )
    assert manifest["count"] == 10 and manifest["skipped"] == 0
    records = D.load_records_jsonl(tmp_path / "triplets.jsonl")
    assert len(records) == 10
    for r in records:
        assert (tmp_path / r.instruction_features_path).exists()
        feats = r.load_features(tmp_path)
        assert feats.ndim == 2
        assert r.provenance["source_dataset"] == "fixture"
        assert r.provenance["tts_voice"] in ("male", "female")
        assert all(a != b for a, b in zip(r.response_units, r.response_units[1:]))


def test_build_dataset_idempotent_rerun(tmp_path):
    D.build_dataset(INSTRUCTIONS, stub_clients(), tmp_path, fixture_codebook())
    before = (tmp_path / "triplets.jsonl").read_text()
    manifest = D.build_dataset(INSTRUCTIONS, stub_clients(), tmp_path, fixture_codebook())
    assert manifest["new_records"] == 0
    assert (tmp_path / "triplets.jsonl").read_text() == before


def test_build_dataset_skips_failing_client(tmp_path):
    class FailOnce:
        name = "flaky"

        def __init__(self):
            self.calls = 0

        def rewrite_instruction(self, instruction):
            self.calls += 1
            if "number 3" in instruction:
                raise RuntimeError("boom")
            return instruction

    clients = D.DatasetClients(
        rewrite=FailOnce(), respond=D.StubResponseClient(), tts=D.StubTtsClient(dim=8)
    )
    manifest = D.build_dataset(INSTRUCTIONS, clients, tmp_path, fixture_codebook(), retries=1)
    assert manifest["count"] == 9
    assert manifest["skipped"] == 1
    assert len(D.load_records_jsonl(tmp_path / "triplets.jsonl")) == 9


def test_build_dataset_concurrent_preserves_order(tmp_path):
    manifest = D.build_dataset(
        INSTRUCTIONS, stub_clients(), tmp_path, fixture_codebook(), max_workers=4
    )
    assert manifest["count"] == 10
    records = D.load_records_jsonl(tmp_path / "triplets.jsonl")
    assert [r.id for r in records] == [D.record_id(i) for i in INSTRUCTIONS]


def test_http_clients_with_injected_transport():
    def rewrite_transport(prompt):
        assert "rewrite my instruction data" in prompt
        return 'here: {"question": "hey what is it"}'

    def respond_transport(prompt):
        assert "converted to speech using TTS" in prompt
        return '{"response": "it is a thing"}'

    rw = D.HttpRewriteClient("http://example/complete", transport=rewrite_transport)
    assert rw.rewrite_instruction("what is it") == "hey what is it"
    rp = D.HttpResponseClient("http://example/complete", transport=respond_transport)
    assert rp.respond("hey what is it") == "it is a thing"


# ------------------------------------------------------------------- loaders


def test_load_alpaca(tmp_path):
    entries = [
        {"instruction": f"instr {i}", "input": "ctx" if i % 2 else "", "output": "o"}
        for i in range(5)
    ]
    path = tmp_path / "alpaca.json"
    path.write_text(json.dumps(entries))
    got = D.load_alpaca(path)
    assert len(got) == 5
    assert got[0] == "instr 0"
    assert got[1] == "instr 1\nctx"


def test_load_ultrachat(tmp_path):
    lines = [
        json.dumps({"id": i, "data": [f"question {i}", f"answer {i}", "follow", "up"]})
        for i in range(5)
    ]
    path = tmp_path / "uc.jsonl"
    path.write_text("\n".join(lines))
    got = D.load_ultrachat(path, limit=3)
    assert got == ["question 0", "question 1", "question 2"]


# ---------------------------------------------------------------- toy dataset


def test_synth_toy_dataset_deterministic():
    a, lex_a = D.synth_toy_dataset(seed=5, n=8, vocab=6, unit_vocab_k=10)
    b, lex_b = D.synth_toy_dataset(seed=5, n=8, vocab=6, unit_vocab_k=10)
    assert [r.to_json() for r in a] == [r.to_json() for r in b]
    assert lex_a.patterns == lex_b.patterns
    assert all(np.array_equal(a[i].features, b[i].features) for i in range(8))


def test_synth_toy_dataset_single_word_pattern():
    _, lex = D.synth_toy_dataset(seed=1, n=1, vocab=4, unit_vocab_k=8)
    w = lex.words[0]
    assert lex.units_for_text(w) == lex.patterns[w]


def test_synth_toy_units_merge_at_boundaries():
    # hand-built lexicon where word boundaries do collide: ab + bc merges
    lex = D.ToyLexicon(
        words=["ab", "bc"],
        patterns={"ab": [1, 2], "bc": [2, 3]},
        raw_rows={"ab": np.zeros(4), "bc": np.ones(4)},
        unit_vocab_k=4,
        raw_dim=4,
    )
    assert lex.units_for_text("ab bc") == [1, 2, 3]
    assert lex.decode_units([1, 2, 3]) == ["ab", "bc"]


def test_generated_lexicon_never_merges_at_boundaries():
    # the filler opener never appears twice in a row in synthesized text, so
    # every pair that can actually occur concatenates without merging
    lex = D.toy_lexicon(seed=0, vocab=8, unit_vocab_k=8)
    intro = lex.words[0]
    for w1 in lex.words:
        for w2 in lex.words:
            if (w1, w2) == (intro, intro):
                continue
            assert lex.patterns[w1][-1] != lex.patterns[w2][0]
            assert lex.units_for_text(f"{w1} {w2}") == lex.patterns[w1] + lex.patterns[w2]


def test_toy_lexicon_decode_inverts(rng):
    _, lex = D.synth_toy_dataset(seed=3, n=0, vocab=12, unit_vocab_k=16)
    for _ in range(40):
        words = [lex.words[int(i)] for i in rng.integers(0, 12, size=rng.integers(1, 7))]
        text = " ".join(words)
        decoded = lex.decode_units(lex.units_for_text(text))
        assert decoded == words


def test_synth_toy_dataset_persists(tmp_path):
    records, _ = D.synth_toy_dataset(seed=2, n=4, vocab=5, unit_vocab_k=8, out_dir=tmp_path)
    loaded = D.load_records_jsonl(tmp_path / "triplets.jsonl")
    assert [r.id for r in loaded] == [r.id for r in records]
    feats = loaded[0].load_features(tmp_path)
    assert feats.shape == records[0].features.shape
