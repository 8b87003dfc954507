"""Command-line drivers: run, sweep, train, score, build-data, quantize.

Experiment configuration comes from a JSON file (--config) with flag
overrides winning. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import pipeline as pl
from . import train as train_mod
from .decoder import Decoder, DecoderConfig
from .fmat import read_fmat
from .llm import ScriptedSource, Tokenizer, load_scripted_jsonl, token_hidden_map
from .metrics import aggregate, cer, wer
from .nn import TransformerConfig, params_hash, save_checkpoint
from .system import scripted_backend, toy_system
from .units import load_codebook, merge_consecutive, quantize
from .vocoder import MockVocoderConfig, write_wav

log = logging.getLogger("unitstream")


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _parse_omega(text: str):
    if text.strip().lower() in ("inf", "+inf", "infinity"):
        return pl.INFINITY
    value = int(text)
    if value < 1:
        raise ValueError(f"omega must be >= 1 or 'inf', got {value}")
    return value


def _omega_flag(text: str):
    try:
        return _parse_omega(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _omega_list_flag(text: str):
    try:
        return [_parse_omega(tok) for tok in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _timing_from(config: dict) -> pl.TimingModel:
    fields = {}
    for name in (
        "t_encode_ms",
        "t_prefill_ms",
        "t_token_ms",
        "t_voc_fixed_ms",
        "t_voc_per_unit_ms",
    ):
        if name in config:
            fields[name] = float(config[name])
    return pl.TimingModel(**fields)


def _scripted_parts(script_path: str, seed: int, config: dict):
    """Token source + decoder from one JSONL script line.

    Lines may carry "alignments" (per-token unit blocks, -1 = blank) for a
    scripted decoder; otherwise a seeded random decoder produces the units.
    """
    tokenizer = Tokenizer()
    raw_lines = [
        json.loads(line)
        for line in Path(script_path).read_text().splitlines()
        if line.strip()
    ]
    if not raw_lines:
        raise ValueError(f"{script_path}: empty script")
    line = raw_lines[0]
    k = int(config.get("unit_vocab_k", 8))
    model_dim = int(config.get("model_dim", 32))
    sources = load_scripted_jsonl(script_path, dim=model_dim, tokenizer=tokenizer, hidden_seed=seed)
    source = sources[0]
    if "alignments" in line:
        decoder = pl.ScriptedAlignmentDecoder(line["alignments"], unit_vocab_k=k)
    else:
        dec_cfg = DecoderConfig(
            unit_vocab_k=k,
            transformer=TransformerConfig(
                layers=1, model_dim=model_dim, heads=2, ffn_dim=48, causal=True
            ),
            upsample_lambda=int(config.get("upsample_lambda", 4)),
        )
        decoder = Decoder(dec_cfg, seed=seed)
    return source, decoder, tokenizer


def _stream_result_outputs(result: pl.StreamResult, out_dir: Path, voc_cfg: MockVocoderConfig):
    out_dir.mkdir(parents=True, exist_ok=True)
    write_wav(result.waveform, out_dir / "response.wav")
    with open(out_dir / "events.jsonl", "w") as fh:
        for ev in result.events:
            fh.write(json.dumps(ev.to_json(), sort_keys=True) + "\n")
    summary = {
        "latency_ms": result.latency_ms,
        "lagging_words": result.lagging_words,
        "n_units": len(result.units),
        "n_chunks": len(result.chunks),
        "text": result.text.text,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def cmd_run(args) -> int:
    config = _load_config(args.config)
    omega = args.omega if args.omega is not None else config.get("omega", "inf")
    if isinstance(omega, str):
        omega = _parse_omega(omega)
    timing = _timing_from(config.get("timing", {}))
    stream_cfg = pl.StreamConfig(omega=omega, timing=timing)
    source, decoder, tokenizer = _scripted_parts(args.scripted, args.seed, config)
    backend = scripted_backend(source, decoder, tokenizer)
    result = pl.run_stream(None, backend, stream_cfg)
    summary = _stream_result_outputs(result, Path(args.out_dir), backend.vocoder_cfg)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _lexicon_from_file(path: str | None):
    if not path:
        return None
    spec = json.loads(Path(path).read_text())
    words = list(spec["words"])
    return data_mod.ToyLexicon(
        words=words,
        patterns={w: [int(u) for u in p] for w, p in spec["words"].items()},
        raw_rows={w: np.zeros(1) for w in words},
        unit_vocab_k=int(spec["k"]),
        raw_dim=1,
    )


def cmd_sweep(args) -> int:
    config = _load_config(args.config)
    omegas = args.omega
    timing = _timing_from(config.get("timing", {}))
    lexicon = _lexicon_from_file(args.lexicon)
    rows = []
    for omega in omegas:
        source, decoder, tokenizer = _scripted_parts(args.scripted, args.seed, config)
        backend = scripted_backend(source, decoder, tokenizer)
        result = pl.run_stream(None, backend, pl.StreamConfig(omega=omega, timing=timing))
        proxy = ""
        if lexicon is not None:
            decoded = lexicon.decode_units(result.units)
            hyp = " ".join(decoded) if decoded else ""
            try:
                proxy = f"{wer(result.text.text, hyp).rate:.6f}"
            except Exception:
                proxy = ""
        rows.append(
            {
                "omega": "inf" if omega == pl.INFINITY else int(omega),
                "latency_ms": result.latency_ms,
                "lagging_words": result.lagging_words,
                "asr_wer_proxy": proxy,
                "n_chunks": len(result.chunks),
            }
        )
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["omega", "latency_ms", "lagging_words", "asr_wer_proxy", "n_chunks"]
        )
        writer.writeheader()
        writer.writerows(rows)
    if args.plot:
        _plot_sweep(rows, args.plot)
    print(f"wrote {out_path} ({len(rows)} rows)")
    return 0


def _plot_sweep(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [r["omega"] if r["omega"] != "inf" else None for r in rows]
    finite = [(x, r) for x, r in zip(xs, rows) if x is not None]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    if finite:
        ax1.plot([x for x, _ in finite], [r["latency_ms"] for _, r in finite], "o-")
    ax1.set_xlabel("chunk size")
    ax1.set_ylabel("latency (ms)")
    ax2 = ax1.twinx()
    if finite:
        ax2.plot(
            [x for x, _ in finite], [r["lagging_words"] for _, r in finite], "s--", color="gray"
        )
    ax2.set_ylabel("lagging words")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_train(args) -> int:
    config = _load_config(args.config)
    ds_cfg = config.get("dataset", {})
    records, lexicon = data_mod.synth_toy_dataset(
        seed=int(ds_cfg.get("seed", args.seed)),
        n=int(ds_cfg.get("n", 100)),
        vocab=int(ds_cfg.get("vocab", 12)),
        unit_vocab_k=int(ds_cfg.get("unit_vocab_k", 16)),
        max_words=int(ds_cfg.get("max_words", 4)),
    )
    model_cfg = config.get("model", {})
    model = toy_system(
        seed=int(model_cfg.get("seed", args.seed)),
        vocab_words=lexicon.words,
        unit_vocab_k=int(ds_cfg.get("unit_vocab_k", 16)),
        upsample_lambda=int(model_cfg.get("upsample_lambda", 4)),
        model_dim=int(model_cfg.get("model_dim", 64)),
        heads=int(model_cfg.get("heads", 4)),
        ffn_dim=int(model_cfg.get("ffn_dim", 176)),
    )
    t_cfg = config.get("train", {})
    train_cfg = train_mod.TrainConfig(
        stage=args.stage,
        batch_size=int(t_cfg.get("batch_size", 4)),
        epochs=int(t_cfg.get("epochs", 3)),
        peak_lr=float(t_cfg["peak_lr"]) if "peak_lr" in t_cfg else None,
        warmup_fraction=float(t_cfg.get("warmup_fraction", 0.03)),
        seed=int(t_cfg.get("seed", args.seed)),
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.stage == 1:
        result = train_mod.train_stage1(records, model, train_cfg)
        save_checkpoint(out_dir / "checkpoint", {**model.adaptor_params, **model.lm.params},
                        {"stage": 1})
    else:
        hidden_map = token_hidden_map(
            model.lm.tokenizer.vocab_size, model.lm.cfg.model_dim,
            seed=int(config.get("hidden_seed", args.seed)),
        )
        provider = lambda r: train_mod.hidden_rows_from_map(hidden_map, model.lm.tokenizer, r)
        result = train_mod.train_stage2(records, model, train_cfg, hidden_provider=provider)
        save_checkpoint(out_dir / "checkpoint", model.decoder.params, {"stage": 2})
    with open(out_dir / "loss.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr"])
        writer.writerows(result.loss_curve)
    summary = {
        "stage": args.stage,
        "initial_loss": result.initial_loss,
        "final_loss": result.final_loss,
        "epoch_means": result.epoch_means,
        "params_hash": params_hash(
            model.decoder.params if args.stage == 2
            else {**model.adaptor_params, **model.lm.params}
        ),
    }
    (out_dir / "train_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps({k: summary[k] for k in ("stage", "initial_loss", "final_loss")}))
    return 0


def cmd_score(args) -> int:
    reports_w, reports_c, items = [], [], []
    for line in Path(args.pairs).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        rep_w = wer(rec["reference"], rec["hypothesis"])
        rep_c = cer(rec["reference"], rec["hypothesis"])
        reports_w.append(rep_w)
        reports_c.append(rep_c)
        items.append({"wer": rep_w.rate, "cer": rep_c.rate})
    if not items:
        raise ValueError(f"{args.pairs}: no pairs found")
    pooled_w = aggregate(reports_w)
    pooled_c = aggregate(reports_c)
    report = {
        "count": len(items),
        "wer": pooled_w.rate,
        "cer": pooled_c.rate,
        "wer_counts": {
            "substitutions": pooled_w.substitutions,
            "insertions": pooled_w.insertions,
            "deletions": pooled_w.deletions,
            "reference_len": pooled_w.reference_len,
        },
        "items": items,
    }
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_build_data(args) -> int:
    if not args.stub_clients:
        raise ValueError("only --stub-clients builds are supported offline")
    if args.source_type == "alpaca":
        instructions = data_mod.load_alpaca(args.source, limit=args.limit)
    elif args.source_type == "ultrachat":
        instructions = data_mod.load_ultrachat(args.source, limit=args.limit)
    else:
        instructions = [
            line.strip()
            for line in Path(args.source).read_text().splitlines()
            if line.strip()
        ][: args.limit or None]
    clients = data_mod.DatasetClients(
        rewrite=data_mod.StubRewriteClient(),
        respond=data_mod.StubResponseClient(),
        tts=data_mod.StubTtsClient(seed=args.seed, dim=8),
    )
    if args.codebook:
        codebook = load_codebook(args.codebook)
    else:
        from .units import kmeans_fit, save_codebook

        rng = np.random.default_rng(args.seed)
        samples = [clients.tts.synthesize_features(i)[0] for i in instructions[:50]] or [
            rng.normal(size=(8, 8))
        ]
        codebook = kmeans_fit(np.concatenate(samples), k=args.k, seed=args.seed)
        save_codebook(codebook, Path(args.out_dir) / "codebook")
    manifest = data_mod.build_dataset(
        instructions,
        clients,
        args.out_dir,
        codebook,
        source_name=args.source_type,
        max_workers=args.workers,
    )
    print(json.dumps(manifest, sort_keys=True))
    return 0


def cmd_quantize(args) -> int:
    features = read_fmat(args.features)
    codebook = load_codebook(args.codebook)
    units = merge_consecutive(quantize(features, codebook))
    payload = {"units": units, "k": codebook.k, "n_frames": features.shape[0]}
    text = json.dumps(payload, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unitstream",
        description="Streaming speech interaction at desk scale: chunked unit "
        "synthesis over a CTC decoder.",
    )
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("run", help="run one stream, write wav + events + summary")
    p.add_argument("--scripted", required=True, help="JSONL token script")
    p.add_argument("--omega", type=_omega_flag, default=None, help="chunk size (int or 'inf')")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--out-dir", default="out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="latency/lagging sweep over chunk sizes")
    p.add_argument("--scripted", required=True)
    p.add_argument("--omega", type=_omega_list_flag, required=True, help="comma list, e.g. 1,2,4,inf")
    p.add_argument("--config", default=None)
    p.add_argument("--lexicon", default=None, help="unit lexicon JSON for the WER proxy")
    p.add_argument("--out", default="sweep.csv")
    p.add_argument("--plot", default=None, help="optional PNG path")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("train", help="toy two-stage training")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out-dir", default="ckpt")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="WER/CER over a JSONL of reference/hypothesis pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("build-data", help="construct triplet records from instructions")
    p.add_argument("--source", required=True)
    p.add_argument("--source-type", choices=("alpaca", "ultrachat", "lines"), default="alpaca")
    p.add_argument("--stub-clients", action="store_true")
    p.add_argument("--out-dir", default="dataset")
    p.add_argument("--codebook", default=None, help="existing codebook directory")
    p.add_argument("--k", type=int, default=32, help="codebook size when fitting")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_build_data)

    p = sub.add_parser("quantize", help="FMAT features + codebook -> deduped units")
    p.add_argument("--features", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_quantize)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the message
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
