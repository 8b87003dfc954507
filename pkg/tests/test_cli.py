import csv
import json
from pathlib import Path

import numpy as np
import pytest

from unitstream.cli import main
from unitstream.vocoder import read_wav


def write_script(path, with_alignments=True, delays=(40, 40, 40, 0)):
    line = {
        "tokens": ["hello", "there", "friend", "<eos>"],
        "delays_ms": list(delays),
    }
    if with_alignments:
        line["alignments"] = [
            [-1, 1, 1, -1],
            [2, 2, -1, 3],
            [4, -1, 5, -1],
            [-1, -1, -1, -1],
        ]
    path.write_text(json.dumps(line) + "\n")
    return path


def test_run_writes_three_artifacts(tmp_path):
    script = write_script(tmp_path / "demo.jsonl")
    out = tmp_path / "out"
    code = main(["run", "--scripted", str(script), "--omega", "2", "--out-dir", str(out)])
    assert code == 0
    assert (out / "response.wav").exists()
    assert (out / "events.jsonl").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["text"] == "hello there friend"
    assert summary["n_units"] == 5
    wave = read_wav(out / "response.wav")
    assert len(wave.samples) == 5 * 320


def test_run_invalid_omega_usage_error(tmp_path, capsys):
    script = write_script(tmp_path / "demo.jsonl")
    code = main(["run", "--scripted", str(script), "--omega", "0"])
    assert code == 2


def test_run_unknown_flag_usage_error():
    assert main(["run", "--nonsense"]) == 2


def test_run_missing_script_runtime_error(tmp_path, capsys):
    code = main(["run", "--scripted", str(tmp_path / "nope.jsonl"), "--omega", "2"])
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_run_same_seed_byte_identical(tmp_path):
    script = write_script(tmp_path / "demo.jsonl", with_alignments=False)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert (
            main(
                ["run", "--scripted", str(script), "--omega", "2",
                 "--out-dir", str(out), "--seed", "7"]
            )
            == 0
        )
        outs.append((out / "events.jsonl").read_bytes())
    assert outs[0] == outs[1]


def test_help_exits_zero_everywhere(capsys):
    assert main(["--help"]) == 0
    for cmd in ("run", "sweep", "train", "score", "build-data", "quantize"):
        assert main([cmd, "--help"]) == 0
        help_text = capsys.readouterr().out
        assert "--" in help_text


def test_sweep_csv_and_monotonicity(tmp_path):
    script = write_script(tmp_path / "demo.jsonl")
    out = tmp_path / "sweep.csv"
    config = tmp_path / "cfg.json"
    config.write_text(json.dumps({"timing": {"t_token_ms": 40.0, "t_voc_fixed_ms": 5.0}}))
    code = main(
        ["sweep", "--scripted", str(script), "--omega", "1,2,4,inf",
         "--config", str(config), "--out", str(out)]
    )
    assert code == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 4
    assert [r["omega"] for r in rows] == ["1", "2", "4", "inf"]
    lat = [float(r["latency_ms"]) for r in rows]
    lag = [int(r["lagging_words"]) for r in rows]
    assert lat == sorted(lat)
    assert lag == sorted(lag)


def test_sweep_wer_proxy_with_lexicon(tmp_path):
    script = tmp_path / "s.jsonl"
    script.write_text(
        json.dumps(
            {
                "tokens": ["hello", "there", "<eos>"],
                "alignments": [[1, 1, 2, -1], [0, -1, 3, -1], [-1, -1, -1, -1]],
            }
        )
        + "\n"
    )
    lexicon = tmp_path / "lex.json"
    lexicon.write_text(json.dumps({"words": {"hello": [1, 2], "there": [0, 3]}, "k": 8}))
    out = tmp_path / "sweep.csv"
    code = main(
        ["sweep", "--scripted", str(script), "--omega", "2,inf",
         "--lexicon", str(lexicon), "--out", str(out)]
    )
    assert code == 0
    rows = list(csv.DictReader(out.open()))
    # units decode back to the exact text at every omega: proxy WER is zero
    assert all(float(r["asr_wer_proxy"]) == 0.0 for r in rows)


def test_train_stage2_artifacts(tmp_path):
    config = tmp_path / "train.json"
    config.write_text(
        json.dumps(
            {
                "dataset": {"seed": 3, "n": 24, "vocab": 8, "unit_vocab_k": 8, "max_words": 3},
                "model": {"model_dim": 32, "ffn_dim": 64, "heads": 2},
                "train": {"batch_size": 4, "epochs": 1, "peak_lr": 0.003},
            }
        )
    )
    out = tmp_path / "ckpt"
    code = main(["train", "--stage", "2", "--config", str(config), "--out-dir", str(out)])
    assert code == 0
    rows = list(csv.reader((out / "loss.csv").open()))
    assert rows[0] == ["step", "loss", "lr"]
    assert len(rows) > 1
    assert (out / "checkpoint" / "manifest.json").exists()
    summary = json.loads((out / "train_summary.json").read_text())
    assert summary["stage"] == 2


def test_train_stage1_artifacts(tmp_path):
    config = tmp_path / "train.json"
    config.write_text(
        json.dumps(
            {
                "dataset": {"seed": 3, "n": 12, "vocab": 6, "unit_vocab_k": 8, "max_words": 3},
                "model": {"model_dim": 32, "ffn_dim": 64, "heads": 2},
                "train": {"batch_size": 4, "epochs": 1, "peak_lr": 0.005},
            }
        )
    )
    out = tmp_path / "ckpt1"
    assert main(["train", "--stage", "1", "--config", str(config), "--out-dir", str(out)]) == 0
    assert (out / "checkpoint" / "manifest.json").exists()


def test_score_fixture_pair(tmp_path, capsys):
    pairs = tmp_path / "pairs.jsonl"
    pairs.write_text(
        json.dumps({"reference": "a b c", "hypothesis": "a x c"})
        + "\n"
        + json.dumps({"reference": "hello world", "hypothesis": "hello world"})
        + "\n"
    )
    out = tmp_path / "report.json"
    assert main(["score", "--pairs", str(pairs), "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["count"] == 2
    assert report["items"][0]["wer"] == pytest.approx(1 / 3)
    assert report["wer"] == pytest.approx(1 / 5)  # pooled: 1 error over 5 ref words


def test_build_data_stub_clients(tmp_path):
    source = tmp_path / "alpaca.json"
    source.write_text(
        json.dumps(
            [{"instruction": f"tell me about thing {i}", "input": "", "output": "x"}
             for i in range(5)]
        )
    )
    out = tmp_path / "dataset"
    code = main(
        ["build-data", "--source", str(source), "--source-type", "alpaca",
         "--stub-clients", "--out-dir", str(out), "--k", "8"]
    )
    assert code == 0
    lines = (out / "triplets.jsonl").read_text().splitlines()
    assert len(lines) == 5
    assert (out / "codebook" / "manifest.json").exists()


def test_quantize_fixture(tmp_path, capsys, rng):
    from unitstream.fmat import write_fmat
    from unitstream.units import kmeans_fit, save_codebook

    pts = rng.normal(size=(40, 4))
    cb = kmeans_fit(pts, 4, seed=0)
    save_codebook(cb, tmp_path / "cb")
    write_fmat(tmp_path / "f.fmat", np.repeat(cb.centroids[[1, 1, 2]], 2, axis=0))
    out = tmp_path / "units.json"
    assert (
        main(["quantize", "--features", str(tmp_path / "f.fmat"),
              "--codebook", str(tmp_path / "cb"), "--out", str(out)]) == 0
    )
    payload = json.loads(out.read_text())
    assert payload["units"] == [1, 2]  # deduped
    assert payload["k"] == 4
