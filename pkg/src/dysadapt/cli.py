"""Command-line entry point: generate, pretrain, extract, finetune, score, sweep-blocks.

Every option can also come from an INI file passed with ``--config``. Keys
live in per-module sections (``[corpus]``, ``[encoder]``, ``[adapter]``,
``[trainer]``, ``[speaker]``, ``[run]``); flags given on the command line
win over file values.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from dysadapt.corpus.manifest import load_manifest, load_profiles, write_corpus
from dysadapt.corpus.synth import SynthConfig, UtteranceRecord, generate_corpus
from dysadapt.corpus.vocab import Vocabulary, merge_vocabularies, phone_names
from dysadapt.corpus.wer import SEVERITIES, WerResult
from dysadapt.encoder import EncoderConfig, EncoderModel, load_checkpoint, save_checkpoint
from dysadapt.errors import ConfigurationError, DataError, DysAdaptError
from dysadapt.experiment import (
    AUX_CHOICES,
    AdapterSettings,
    ExtractSettings,
    TrainSettings,
    adapter_specs,
    extract_fmllr,
    extract_xvectors,
    finetune,
    pretrain,
    score,
)
from dysadapt.speaker.io import (
    load_external_embeddings,
    read_feature_archive,
    write_embeddings,
    write_feature_archive,
    write_transforms,
)
from dysadapt.trainer.finetune import AuxFeatures, write_log

log = logging.getLogger("dysadapt")

# encoder frames stand for 20 ms of audio each
FRAME_SECONDS = 0.02

# option dest -> config section; only these keys are accepted in a config file
SECTIONS = {
    "run": ("seed", "out"),
    "corpus": ("tiers", "speakers_per_tier", "utts", "tokens", "language", "scale", "prefix", "corpus", "split"),
    "encoder": ("hidden_size", "blocks", "heads", "subsample"),
    "adapter": ("aux", "bottleneck", "aux_proj_dim", "xvector_block", "fmllr_block", "relu_after_up", "blocks_to_sweep"),
    "trainer": ("epochs", "batch_size", "lr", "warmup", "stage1_fraction", "patience", "no_early_stopping"),
    "speaker": ("kind", "fmllr_dim", "gmm_components", "gmm_iters", "fmllr_iters", "xvector_dim", "xvector_steps", "fmllr", "xvectors"),
}
LIST_KEYS = {"corpus", "fmllr", "xvectors"}
BOOL_KEYS = {"relu_after_up", "no_early_stopping"}


# -- argument parsing ----------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with per-module sections")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def _trainer_opts(p: argparse.ArgumentParser, epochs: int) -> None:
    g = p.add_argument_group("trainer")
    g.add_argument("--epochs", type=int, default=epochs)
    g.add_argument("--batch-size", type=int, default=16)
    g.add_argument("--lr", type=float, default=2e-3, help="peak learning rate")
    g.add_argument("--warmup", type=int, default=50, help="warmup steps")
    g.add_argument("--stage1-fraction", type=float, default=0.1)
    g.add_argument("--patience", type=int, default=3)
    g.add_argument("--no-early-stopping", action="store_true")


def _aux_file_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--fmllr", nargs="+", default=[], help="fMLLR feature archive(s) from 'extract --kind fmllr'")
    p.add_argument("--xvectors", nargs="+", default=[], help="embedding file(s) from 'extract --kind xvector'")


def _adapter_opts(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("adapter")
    g.add_argument("--bottleneck", type=int, help="adapter width d (default hidden/16)")
    g.add_argument("--aux-proj-dim", type=int, default=64)
    g.add_argument("--xvector-block", type=int, default=2)
    g.add_argument("--fmllr-block", type=int, help="default: last block")
    g.add_argument("--relu-after-up", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dysadapt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic corpus")
    _common(p)
    p.add_argument("--out", required=True, help="corpus directory")
    p.add_argument("--tiers", default="VL,L,M,H", help="comma-separated severity tiers")
    p.add_argument("--speakers-per-tier", type=int, default=2)
    p.add_argument("--utts", type=int, default=150, help="utterances per speaker")
    p.add_argument("--tokens", type=int, default=12, help="token inventory size")
    p.add_argument("--language", default="EN")
    p.add_argument("--scale", type=float, help="override every speaker's distortion scale")
    p.add_argument("--prefix", default="S", help="speaker id prefix")

    p = sub.add_parser("pretrain", help="plain CTC training of a fresh encoder")
    _common(p)
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--out", required=True, help="output directory for model.ckpt and metrics.tsv")
    g = p.add_argument_group("encoder")
    g.add_argument("--hidden-size", type=int, default=64)
    g.add_argument("--blocks", type=int, default=6)
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--subsample", type=int, default=4)
    _trainer_opts(p, epochs=6)

    p = sub.add_parser("extract", help="write fMLLR archives or x-vector embeddings")
    _common(p)
    p.add_argument("--kind", choices=("fmllr", "xvector"), required=True)
    p.add_argument("--model", help="checkpoint (required for fmllr)")
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--out", required=True)
    g = p.add_argument_group("speaker")
    g.add_argument("--fmllr-dim", type=int, default=8)
    g.add_argument("--gmm-components", type=int, default=24)
    g.add_argument("--gmm-iters", type=int, default=20)
    g.add_argument("--fmllr-iters", type=int, default=10)
    g.add_argument("--xvector-dim", type=int, default=32)
    g.add_argument("--xvector-steps", type=int, default=300)

    p = sub.add_parser("finetune", help="mount adapters and run two-stage finetuning")
    _common(p)
    p.add_argument("--model", required=True, help="pretrained checkpoint")
    p.add_argument("--corpus", nargs="+", required=True, help="one or more corpora; several are merged")
    p.add_argument("--out", required=True)
    p.add_argument("--aux", choices=AUX_CHOICES, default="none")
    _aux_file_opts(p)
    _adapter_opts(p)
    _trainer_opts(p, epochs=8)

    p = sub.add_parser("score", help="WER per severity tier")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--compare", help="second checkpoint; prints deltas against --model")
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="also write the table here (TSV)")
    _aux_file_opts(p)

    p = sub.add_parser("sweep-blocks", help="x-vector adapter at each block; CSV of block vs WER")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--out", required=True, help="output directory for sweep.csv")
    p.add_argument("--blocks-to-sweep", default=None, help="comma-separated blocks (default: all)")
    _aux_file_opts(p)
    _adapter_opts(p)
    _trainer_opts(p, epochs=4)
    return parser


def read_config(path: str | Path) -> dict[str, str]:
    """Flatten an INI file into option dests, rejecting unknown sections and keys."""
    cp = configparser.ConfigParser(interpolation=None)
    if not cp.read(path, encoding="utf-8"):
        raise ConfigurationError(f"cannot read config file {path}")
    values: dict[str, str] = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigurationError(f"{path}: unknown section [{section}] (expected one of {', '.join(SECTIONS)})")
        for key, value in cp.items(section):
            dest = key.replace("-", "_")
            if dest not in SECTIONS[section]:
                raise ConfigurationError(f"{path}: key {key!r} does not belong in [{section}]")
            values[dest] = value
    return values


def _config_defaults(sub: argparse.ArgumentParser, values: dict[str, str]) -> dict:
    known = {a.dest for a in sub._actions}
    out = {}
    for dest, raw in values.items():
        if dest not in known:
            continue
        if dest in LIST_KEYS:
            out[dest] = raw.replace(",", " ").split()
        elif dest in BOOL_KEYS:
            out[dest] = raw.strip().lower() in ("1", "true", "yes", "on")
        else:
            # argparse converts string defaults with the option's type
            out[dest] = raw
    return out


def parse_args(argv: Sequence[str] | None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        sub = subparsers.choices[args.command]
        sub.set_defaults(**_config_defaults(sub, read_config(args.config)))
        # file values only fill what the command line left at its default
        for action in sub._actions:
            if action.required and action.dest in read_config(args.config):
                action.required = False
        args = parser.parse_args(argv)
    return args


# -- helpers -------------------------------------------------------------------


def load_records(corpora: Sequence[str], split: str | None = None) -> tuple[list[UtteranceRecord], Vocabulary]:
    """Load one or more corpora; several corpora share a merged, language-tagged vocabulary."""
    vocabs = []
    for c in corpora:
        path = Path(c) / "vocab.txt"
        if not path.exists():
            raise DataError(f"corpus {c} has no vocab.txt")
        vocabs.append(Vocabulary.load(path))
    vocab = vocabs[0] if len(vocabs) == 1 else merge_vocabularies(*vocabs)
    records: list[UtteranceRecord] = []
    for c in corpora:
        for name in ("train", "test") if split is None else (split,):
            manifest = Path(c) / f"{name}.tsv"
            if manifest.exists():
                records.extend(load_manifest(manifest, vocab, name))
    if not records:
        raise DataError(f"no utterances found in {', '.join(corpora)}")
    return records, vocab


def load_aux(fmllr_paths: Sequence[str], xvector_paths: Sequence[str]) -> AuxFeatures:
    aux = AuxFeatures()
    for p in fmllr_paths:
        if not Path(p).exists():
            raise DataError(f"fMLLR archive {p} does not exist")
        aux.fmllr.update(read_feature_archive(p))
    for p in xvector_paths:
        if not Path(p).exists():
            raise DataError(f"x-vector file {p} does not exist")
        aux.xvector.update({k: e.vector for k, e in load_external_embeddings(p).items()})
    return aux


def _aux_widths(aux: AuxFeatures) -> tuple[int, int]:
    f = next(iter(aux.fmllr.values())).shape[1] if aux.fmllr else 0
    x = next(iter(aux.xvector.values())).shape[0] if aux.xvector else 0
    return f, x


def _require_aux(kind: str, aux: AuxFeatures) -> None:
    if kind in ("fmllr", "both") and not aux.fmllr:
        raise DataError(f"aux '{kind}' needs an fMLLR archive (--fmllr)")
    if kind in ("xvector", "both") and not aux.xvector:
        raise DataError(f"aux '{kind}' needs x-vector embeddings (--xvectors)")


def train_settings(args: argparse.Namespace) -> TrainSettings:
    return TrainSettings(
        epochs=args.epochs,
        batch_size=args.batch_size,
        peak_lr=args.lr,
        warmup_steps=args.warmup,
        stage1_fraction=args.stage1_fraction,
        early_stopping=not args.no_early_stopping,
    )


def adapter_settings(args: argparse.Namespace) -> AdapterSettings:
    return AdapterSettings(
        bottleneck_dim=args.bottleneck,
        aux_proj_dim=args.aux_proj_dim,
        xvector_block=args.xvector_block,
        fmllr_block=args.fmllr_block,
        relu_after_up=args.relu_after_up,
    )


def _split(records: Sequence[UtteranceRecord], name: str) -> list[UtteranceRecord]:
    return [r for r in records if r.split == name]


def _fmt_wer(value: float | None) -> str:
    return "absent" if value is None else f"{100 * value:.2f}"


def format_table(rows: dict[str, WerResult], deltas: bool = False) -> str:
    """Report rows with columns VL L M H Avg (percent WER)."""
    width = max(8, *(len(k) for k in rows))
    lines = [f"{'system':<{width}}  " + "  ".join(f"{c:>7}" for c in (*SEVERITIES, "Avg"))]
    for name, res in rows.items():
        cells = [_fmt_wer(res.severity_wer(t)) for t in SEVERITIES] + [_fmt_wer(res.wer)]
        lines.append(f"{name:<{width}}  " + "  ".join(f"{c:>7}" for c in cells))
    if deltas and len(rows) == 2:
        (_, a), (_, b) = rows.items()
        cells = []
        for tier in (*SEVERITIES, None):
            va = a.wer if tier is None else a.severity_wer(tier)
            vb = b.wer if tier is None else b.severity_wer(tier)
            cells.append("absent" if va is None or vb is None else f"{100 * (vb - va):+.2f}")
        lines.append(f"{'delta':<{width}}  " + "  ".join(f"{c:>7}" for c in cells))
    return "\n".join(lines)


# -- commands ------------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    tiers = [t.strip() for t in args.tiers.split(",") if t.strip()]
    if args.utts < 1 or args.speakers_per_tier < 1 or not tiers:
        raise ConfigurationError("refusing to write an empty corpus: need at least one tier, speaker and utterance")
    vocab = Vocabulary.from_names(phone_names(args.tokens), args.language)
    counts = {t: args.speakers_per_tier for t in tiers}
    records, profiles = generate_corpus(
        counts, vocab, args.utts, seed=args.seed, language=args.language, speaker_prefix=args.prefix, scale_override=args.scale
    )
    write_corpus(args.out, records, vocab, profiles)
    print(f"{'Severity':<9}{'Speakers':>9}{'Utts':>7}{'Frames':>9}{'Minutes':>9}")
    for tier in SEVERITIES:
        recs = [r for r in records if r.severity == tier]
        if not recs:
            continue
        frames = sum(r.n_frames for r in recs)
        n_spk = len({r.speaker for r in recs})
        print(f"{tier:<9}{n_spk:>9}{len(recs):>7}{frames:>9}{frames * FRAME_SECONDS / 60:>9.2f}")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    records, vocab = load_records(args.corpus)
    enc_cfg = EncoderConfig(
        hidden_size=args.hidden_size,
        n_blocks=args.blocks,
        n_heads=args.heads,
        subsample_factor=args.subsample,
        input_channels=records[0].features.shape[1],
    )
    model, result = pretrain(_split(records, "train"), _split(records, "test"), vocab, enc_cfg, train_settings(args), args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.ckpt")
    write_log(out / "metrics.tsv", result.log)
    print(f"pretrained {result.steps} steps; checkpoint {out / 'model.ckpt'}")
    return 0


def cmd_extract(args: argparse.Namespace) -> int:
    records, _ = load_records(args.corpus)
    settings = ExtractSettings(
        fmllr_dim=args.fmllr_dim,
        gmm_components=args.gmm_components,
        gmm_iters=args.gmm_iters,
        fmllr_iters=args.fmllr_iters,
        xvector_dim=args.xvector_dim,
        xvector_steps=args.xvector_steps,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "fmllr":
        if not args.model:
            raise ConfigurationError("extract --kind fmllr needs --model")
        pipeline = extract_fmllr(load_checkpoint(args.model), records, settings, args.seed)
        write_feature_archive(out / "fmllr.ark", {r.utt_id: pipeline.features[r.utt_id] for r in records})
        write_transforms(out / "transforms.txt", [pipeline.transforms[s] for s in sorted(pipeline.transforms)])
        print(f"wrote {len(records)} fMLLR sequences ({settings.fmllr_dim} dims) to {out / 'fmllr.ark'}")
    else:
        _, embeddings = extract_xvectors(records, settings, args.seed)
        write_embeddings(out / "xvectors.txt", {r.utt_id: embeddings[r.utt_id] for r in records})
        print(f"wrote {len(records)} x-vectors ({settings.xvector_dim} dims) to {out / 'xvectors.txt'}")
    return 0


def cmd_finetune(args: argparse.Namespace) -> int:
    records, vocab = load_records(args.corpus)
    aux = load_aux(args.fmllr, args.xvectors)
    _require_aux(args.aux, aux)
    base = load_checkpoint(args.model)
    f_dim, x_dim = _aux_widths(aux)
    specs = adapter_specs(args.aux, base.config, adapter_settings(args), f_dim, x_dim)
    settings = replace(train_settings(args))
    model, result = finetune(base, _split(records, "train"), _split(records, "test"), vocab, specs, aux, settings, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.ckpt")
    write_log(out / "metrics.tsv", result.log)
    print(f"finetuned {result.steps} steps ({result.stage1_steps_run} in stage 1); checkpoint {out / 'model.ckpt'}")
    return 0


def _model_vocab(model: EncoderModel, fallback: Vocabulary) -> Vocabulary:
    tokens = model.metadata.get("vocab")
    return Vocabulary(tuple(tuple(t) for t in tokens)) if tokens else fallback


def cmd_score(args: argparse.Namespace) -> int:
    records, vocab = load_records(args.corpus, args.split)
    aux = load_aux(args.fmllr, args.xvectors)
    rows: dict[str, WerResult] = {}
    for path in [args.model] + ([args.compare] if args.compare else []):
        model = load_checkpoint(path)
        model_vocab = _model_vocab(model, vocab)
        if model_vocab != vocab:
            records_m, _ = load_records(args.corpus, args.split)
            records_m = [replace(r, transcript=model_vocab.encode(r.words, r.language)) for r in records_m]
        else:
            records_m = records
        name = Path(path).parent.name or Path(path).stem
        if name in rows:
            name = str(path)
        rows[name] = score(model, records_m, model_vocab, aux).wer
    table = format_table(rows, deltas=bool(args.compare))
    print(table)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(table.replace("  ", "\t") + "\n", encoding="utf-8")
    return 0


def cmd_sweep_blocks(args: argparse.Namespace) -> int:
    records, vocab = load_records(args.corpus)
    aux = load_aux([], args.xvectors)
    _require_aux("xvector", aux)
    base = load_checkpoint(args.model)
    n_blocks = base.config.n_blocks
    if args.blocks_to_sweep:
        blocks = [int(b) for b in str(args.blocks_to_sweep).split(",") if b.strip()]
    else:
        blocks = list(range(1, n_blocks + 1))
    bad = [b for b in blocks if not 1 <= b <= n_blocks]
    if bad:
        raise ConfigurationError(f"blocks {bad} outside 1..{n_blocks}")
    _, x_dim = _aux_widths(aux)
    train_recs, test_recs = _split(records, "train"), _split(records, "test")
    lines = ["block,avg_wer"]
    for b in blocks:
        specs = adapter_specs("xvector", base.config, adapter_settings(args), 0, x_dim, xvector_block=b)
        model, _ = finetune(base, train_recs, [], vocab, specs, aux, replace(train_settings(args), early_stopping=False), args.seed)
        wer = score(model, test_recs, vocab, aux).wer.wer
        lines.append(f"{b},{wer:.6f}")
        log.info("block %d: WER %.4f", b, wer)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "extract": cmd_extract,
    "finetune": cmd_finetune,
    "score": cmd_score,
    "sweep-blocks": cmd_sweep_blocks,
}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except DysAdaptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    np.seterr(over="raise", invalid="raise")
    try:
        return COMMANDS[args.command](args)
    except (DysAdaptError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        np.seterr(all="warn")


if __name__ == "__main__":
    sys.exit(main())
