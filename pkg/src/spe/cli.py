"""Command-line pipeline: prep, pretrain, train-bilm, train-nce, gen-questions, evaluate, score.

Every stage reads only files written by earlier stages plus the config, writes
its resolved config next to its outputs, and writes files atomically.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import cloze
from .config import ConfigError, RunConfig, load_config, override, write_resolved
from .corpus import (
    DataError,
    SentencePair,
    Vocabulary,
    build_vocabulary,
    encode_documents,
    load_pairs,
    make_pairs,
    read_abc_corpus,
    read_text_corpus,
    save_pairs,
    split_documents,
    split_pretokenized,
    tokenize,
)
from .lm import LanguageModel, LmConfig, load_model
from .losses import LossWeights
from .noise import BatchNceSampler, BiLmConfig, ResamplingSampler, jsonl_audit, train_bilm
from .scoring import criterion_score, select_answer
from .serialize import atomic_write_text, dump_json, load_manifest
from .training import (
    Checkpoint,
    NumericError,
    TrainConfig,
    list_checkpoints,
    pretrain,
    select_checkpoint,
    stream,
    train_nce,
)

log = logging.getLogger("spe")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# shared helpers


def bundled_corpus() -> Path:
    return Path(str(resources.files("spe") / "data" / "toy_abc.txt"))


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"missing {what}: {path}")
    return path


def _prep_dir(cfg: RunConfig) -> Path:
    return cfg.work / "prep"


def _load_vocab(cfg: RunConfig) -> Vocabulary:
    return Vocabulary.load(_require(cfg.location("vocab"), "vocabulary (run prep first)"))


def _read_sentences(path: Path) -> list[tuple[int, ...]]:
    _require(path, "sentence file (run prep first)")
    with open(path, encoding="utf-8") as fh:
        return [tuple(json.loads(line)) for line in fh if line.strip()]


def _load_split_pairs(cfg: RunConfig, split: str) -> list[SentencePair]:
    return load_pairs(_require(_prep_dir(cfg) / f"{split}_pairs.jsonl", f"{split} pairs (run prep first)"))


def _check_vocab(manifest: dict, vocab_hash: str, what: str) -> None:
    found = manifest.get("vocab_hash")
    if found != vocab_hash:
        raise DataError(f"{what} was built for vocabulary {found}, expected {vocab_hash}")


def _lm_config(cfg: RunConfig, vocab_size: int) -> LmConfig:
    m = cfg.model
    return LmConfig(vocab_size, emb_dim=m.emb_dim, hidden=m.hidden, layers=m.layers, relaxed=m.relaxed,
                    dropout=m.dropout, dtype=m.dtype)


def _weights_label(w: LossWeights) -> str:
    return "-".join(f"{x:g}" for x in w.as_tuple())


def run_name(cfg: RunConfig) -> str:
    return f"{cfg.train.sampler}_w{_weights_label(cfg.weights)}"


def _tokenizer(vocab: Vocabulary):
    return split_pretokenized if vocab.kind == "abc" else tokenize


def _write_jsonl(path: Path, rows) -> None:
    atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def _read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# stages


def cmd_prep(cfg: RunConfig, args) -> int:
    """Split the corpus by document, build the vocabulary, write encoded pairs."""
    if cfg.paths.corpus:
        corpus = _require(Path(cfg.paths.corpus), "corpus")
    elif cfg.paths.corpus_format == "abc":
        corpus = bundled_corpus()
    else:
        raise DataError("paths.corpus is required for text corpora")
    if cfg.paths.corpus_format == "abc":
        docs = read_abc_corpus(corpus, cfg.data.bars_per_sentence)
    else:
        docs = read_text_corpus(corpus)
    if not docs:
        raise DataError(f"{corpus}: no documents")
    split = split_documents(docs, cfg.seed, cfg.data.split)
    if not split.train:
        raise DataError("the training split is empty")
    vocab = build_vocabulary((s for d in split.train for s in d.sentences), cfg.data.vocab_cutoff,
                             cfg.paths.corpus_format)
    out = _prep_dir(cfg)
    vocab.save(cfg.location("vocab"))
    counts = {}
    for name, part in split.parts().items():
        enc = encode_documents(part, vocab)
        pairs = make_pairs(enc)
        save_pairs(out / f"{name}_pairs.jsonl", pairs)
        _write_jsonl(out / f"{name}_sentences.jsonl", [list(s) for d in enc for s in d.sentences if s])
        counts[name] = {"documents": len(part), "pairs": len(pairs)}
    manifest = {
        "seed": cfg.seed,
        "ratios": list(cfg.data.split),
        "vocab_hash": vocab.hash,
        "vocab_size": len(vocab),
        "counts": counts,
        "documents": {name: [d.doc_id for d in part] for name, part in split.parts().items()},
    }
    atomic_write_text(out / "splits.json", dump_json(manifest))
    write_resolved(cfg, out)
    print(f"prep: vocabulary {len(vocab)} ({vocab.hash}); pairs " +
          ", ".join(f"{k}={v['pairs']}" for k, v in counts.items()))
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, args) -> int:
    """Pre-train the language model on word-level cross-entropy."""
    vocab = _load_vocab(cfg)
    train = _read_sentences(_prep_dir(cfg) / "train_sentences.jsonl")
    valid = _read_sentences(_prep_dir(cfg) / "valid_sentences.jsonl")
    model = LanguageModel(_lm_config(cfg, len(vocab)), seed=cfg.seed)
    p = cfg.pretrain
    out = cfg.work / "pretrain"
    rows = []

    def on_epoch(stats):
        rows.append(stats.to_json())
        log.info("pretrain epoch %d: L_w=%.4f valid=%s", stats.epoch, stats.mean_l_w, stats.valid_l_w)

    result = pretrain(train, model, p.epochs, p.batch_size, p.lr, cfg.seed, p.clip_ratio, valid or None, on_epoch)
    model.save(out / "model", vocab_hash=vocab.hash, stage="pretrain", seed=cfg.seed)
    _write_jsonl(out / "train_log.jsonl", rows)
    write_resolved(cfg, out)
    print(f"pretrain: {len(result.epochs)} epochs, final L_w {result.epochs[-1].mean_l_w:.4f}")
    return EXIT_OK


def cmd_train_bilm(cfg: RunConfig, args) -> int:
    """Train the bidirectional masked model used for resampled negatives."""
    vocab = _load_vocab(cfg)
    train = _read_sentences(_prep_dir(cfg) / "train_sentences.jsonl")
    b = cfg.bilm
    config = BiLmConfig(len(vocab), emb_dim=b.emb_dim, hidden=b.hidden, layers=b.layers, dropout=b.dropout,
                        dtype=b.dtype)
    out = cfg.work / "bilm"
    rows = []

    def on_epoch(epoch, loss):
        rows.append({"epoch": epoch, "masked_ce": loss})
        log.info("bilm epoch %d: masked CE %.4f", epoch, loss)

    model = train_bilm(train, config, b.epochs, b.batch_size, b.lr, cfg.seed, b.mask_rate, on_epoch)
    model.save(out / "model", vocab_hash=vocab.hash, stage="bilm", seed=cfg.seed)
    _write_jsonl(out / "train_log.jsonl", rows)
    write_resolved(cfg, out)
    print(f"train-bilm: {b.epochs} epochs, final masked CE {rows[-1]['masked_ce']:.4f}" if rows else "train-bilm: done")
    return EXIT_OK


def _load_bilm(cfg: RunConfig, vocab: Vocabulary):
    path = _require(cfg.work / "bilm" / "model", "bidirectional model (run train-bilm first)")
    bilm, manifest = load_model(path)
    _check_vocab(manifest, vocab.hash, str(path))
    return bilm


def cmd_train_nce(cfg: RunConfig, args) -> int:
    """Train with the weighted word/sentence/classification loss, saving checkpoints."""
    vocab = _load_vocab(cfg)
    pairs = _load_split_pairs(cfg, "train")
    if args.cold_start:
        model = LanguageModel(_lm_config(cfg, len(vocab)), seed=cfg.seed)
        origin = "cold-start"
    else:
        init = Path(args.checkpoint) if args.checkpoint else cfg.work / "pretrain" / "model"
        _require(init, "initial model (run pretrain, or pass --cold-start)")
        model, manifest = load_model(init)
        _check_vocab(manifest, vocab.hash, str(init))
        if not isinstance(model, LanguageModel):
            raise DataError(f"{init} is not a language model")
        origin = "pretrained"
    t = cfg.train
    tc = TrainConfig(batch_size=t.batch_size, nu=t.nu, epochs=t.epochs, lr=t.lr, seed=cfg.seed, sampler=t.sampler,
                     checkpoint_interval=t.checkpoint_interval, clip_ratio=t.clip_ratio, detach_noise=t.detach_noise)
    out = cfg.location("checkpoints") / run_name(cfg)
    weights = cfg.weights
    if t.sampler == "batch-nce":
        sampler = BatchNceSampler()
    elif weights.sentence_terms:
        sampler = ResamplingSampler(_load_bilm(cfg, vocab), nu=tc.nu, mask_rate=cfg.bilm.mask_rate,
                                    audit=jsonl_audit(out / "resampling_audit.jsonl"))
    else:
        sampler = None
    write_resolved(cfg, out)
    result = train_nce(pairs, model, sampler, tc, weights, out_dir=out,
                       checkpoint_meta={"vocab_hash": vocab.hash, "seed": cfg.seed, "init": origin,
                                        "run": run_name(cfg)})
    last = result.epochs[-1]
    print(f"train-nce: {run_name(cfg)} {len(result.epochs)} epochs, {len(result.checkpoints)} checkpoints, "
          f"final L {last.mean_l:.4f}")
    return EXIT_OK


def cmd_gen_questions(cfg: RunConfig, args) -> int:
    """Generate validation and holdout cloze question sets."""
    vocab = _load_vocab(cfg)
    q = cfg.questions
    out = cfg.location("questions")
    bilm = _load_bilm(cfg, vocab) if "resampled" in q.modes else None
    for split in ("valid", "holdout"):
        pairs = _load_split_pairs(cfg, split)
        for mode in q.modes:
            rng = stream(cfg.seed, f"questions/{split}/{mode}")
            questions, dropped = cloze.generate_questions(pairs, vocab, mode, q.k, rng, bilm, q.mask_rate, q.count)
            meta = {"vocab_hash": vocab.hash, "split": split, "mode": mode, "k": q.k, "seed": cfg.seed,
                    "count": len(questions), "dropped": dropped}
            cloze.save_questions(out / f"{split}-{mode}.jsonl", questions, meta)
            print(f"gen-questions: {split}-{mode} {len(questions)} questions ({dropped} dropped)")
    write_resolved(cfg, out)
    return EXIT_OK


def _question_sets(cfg: RunConfig, vocab_hash: str) -> dict[str, dict]:
    """Question sets by mode, each with ``valid`` and ``holdout`` parts."""
    qdir = cfg.location("questions")
    sets: dict[str, dict] = {}
    for mode in cfg.questions.modes:
        entry = {}
        for split in ("valid", "holdout"):
            path = _require(qdir / f"{split}-{mode}.jsonl", "question set (run gen-questions first)")
            meta = cloze.load_question_meta(path)
            if meta is None:
                raise DataError(f"{path}: missing metadata sidecar")
            if meta.get("vocab_hash") != vocab_hash:
                raise DataError(f"{path}: questions were built for vocabulary {meta.get('vocab_hash')}, "
                                f"model uses {vocab_hash}")
            entry[split] = cloze.load_questions(path)
            entry[f"{split}_dropped"] = int(meta.get("dropped", 0))
        sets[mode] = entry
    return sets


def _rel(path: Path, root: Path) -> str:
    try:
        return Path(path).resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        return Path(path).as_posix()


def cmd_evaluate(cfg: RunConfig, args) -> int:
    """Select checkpoints on validation questions and report holdout accuracy."""
    from .plotting import plot_accuracy_bars, plot_training_curves

    vocab = _load_vocab(cfg)
    root = cfg.work
    runs: dict[str, list[Checkpoint]] = {}
    if args.checkpoint:
        ck_path = _require(Path(args.checkpoint), "checkpoint")
        man = load_manifest(ck_path)
        runs[ck_path.parent.name] = [Checkpoint(str(ck_path), int(man.get("epoch", 0)), man.get("config_hash", ""))]
    else:
        ck_root = _require(cfg.location("checkpoints"), "checkpoint directory (run train-nce first)")
        for sub in sorted(p for p in ck_root.iterdir() if p.is_dir()):
            cks = list_checkpoints(sub)
            if cks:
                runs[sub.name] = cks
        if not runs:
            raise DataError(f"no checkpoints under {ck_root}")
    # every guard runs before anything is written
    manifests = {}
    for cks in runs.values():
        for ck in cks:
            manifests[ck.path] = load_manifest(ck.path)
            _check_vocab(manifests[ck.path], vocab.hash, ck.path)
    sets = _question_sets(cfg, vocab.hash)

    out = cfg.location("reports")
    dumps: dict[str, dict[str, Path]] = {}
    for name, cks in runs.items():
        for ck in cks:
            model, _ = load_model(ck.path)
            scorer = cloze.ModelScorer(model, vocab)
            dumps[ck.path] = {}
            for mode, entry in sets.items():
                for split in ("valid", "holdout"):
                    qs = entry[split]
                    target = out / "scores" / name / Path(ck.path).name / f"{split}-{mode}.jsonl"
                    cloze.write_score_dump(target, qs, scorer.scores(qs))
                    dumps[ck.path][cloze.question_key(qs)] = target

    rows, details = [], []
    for name, cks in runs.items():
        man = manifests[cks[0].path]
        row = {"label": name, "weights": tuple(man.get("weights", ())) or None, "acc": {}}
        for mode, entry in sets.items():
            for c in (1, 2):
                sel = select_checkpoint(cks, entry["valid"], entry["holdout"], c,
                                        lambda ck: cloze.DumpScorer(dumps[ck.path]))
                row["acc"][(mode, c)] = sel.holdout_accuracy
                details.append({
                    "run": name, "question_set": mode, "criterion": c,
                    "selected_epoch": sel.checkpoint.epoch,
                    "selected_checkpoint": _rel(Path(sel.checkpoint.path), root),
                    "validation_accuracy": sel.validation,
                    "holdout_accuracy": sel.holdout_accuracy,
                    "holdout_correct": sel.holdout_report.correct,
                    "holdout_count": sel.holdout_report.count,
                    "holdout_dropped": entry["holdout_dropped"],
                    "score_dump": _rel(dumps[sel.checkpoint.path][cloze.question_key(entry["holdout"])], root),
                })
        rows.append(row)

    k = cfg.questions.k
    table = cloze.render_table(rows, tuple(sets), k)
    report = {
        "k": k,
        "random_baseline": 1.0 / k,
        "vocab_hash": vocab.hash,
        "seed": cfg.seed,
        "criterion": cfg.criterion,
        "rows": [{"label": r["label"], "weights": list(r["weights"]) if r["weights"] else None,
                  "accuracy": {f"{m} c{c}": a for (m, c), a in sorted(r["acc"].items())}} for r in rows],
        "selections": details,
    }
    atomic_write_text(out / "report.json", dump_json(report))
    atomic_write_text(out / "report.txt", table)
    logs = {}
    for name, cks in runs.items():
        log_file = Path(cks[0].path).parent / "train_log.jsonl"
        if log_file.exists():
            logs[name] = _read_jsonl(log_file)
    plot_training_curves(logs, out / "training_curves.png")
    plot_accuracy_bars([{"label": r["label"], "acc": {f"{m} c{c}": a for (m, c), a in r["acc"].items()}}
                        for r in rows], out / "accuracy.png", k)
    write_resolved(cfg, out)
    sys.stdout.write(table)
    return EXIT_OK


def cmd_score(cfg: RunConfig, args) -> int:
    """Score candidate following sentences for a context."""
    if not args.checkpoint:
        raise UsageError("score needs --checkpoint")
    vocab = _load_vocab(cfg)
    ck = _require(Path(args.checkpoint), "checkpoint")
    model, manifest = load_model(ck)
    _check_vocab(manifest, vocab.hash, str(ck))
    if args.context is not None:
        if not args.sentences:
            raise UsageError("score needs at least one candidate sentence after the context")
        items = [(args.context, list(args.sentences))]
    else:
        items = []
        for lineno, line in enumerate(sys.stdin, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 2:
                raise DataError(f"<stdin>:{lineno}: expected context<TAB>sentence[<TAB>sentence...]")
            items.append((parts[0], parts[1:]))
    tok = _tokenizer(vocab)
    from .scoring import choice_log_probs

    print("item\tchoice\tlog_cond\tlog_uncond\tscore\tselected")
    for i, (context, sentences) in enumerate(items):
        ctx = vocab.encode(tok(context))
        cands = [vocab.encode(tok(s)) for s in sentences]
        if any(len(c) == 0 for c in cands):
            raise DataError(f"item {i}: empty candidate sentence")
        lc, lu = choice_log_probs(model, ctx, cands)
        vals = criterion_score(lc, lu, cfg.criterion)
        best = select_answer(vals) if len(cands) > 1 else 0
        for j in range(len(cands)):
            print(f"{i}\t{j}\t{lc[j]:.6f}\t{lu[j]:.6f}\t{vals[j]:.6f}\t{int(j == best)}")
    return EXIT_OK


COMMANDS = {
    "prep": cmd_prep,
    "pretrain": cmd_pretrain,
    "train-bilm": cmd_train_bilm,
    "train-nce": cmd_train_nce,
    "gen-questions": cmd_gen_questions,
    "evaluate": cmd_evaluate,
    "score": cmd_score,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run configuration")
    common.add_argument("--seed", type=int, help="global seed for every random stream")
    common.add_argument("--checkpoint", help="model directory to start from or evaluate")
    common.add_argument("--criterion", type=int, choices=(1, 2), help="1: log P(b|a); 2: log P(b|a) - log P(b)")
    common.add_argument("--sampler", choices=("batch-nce", "resampling"), help="negative sampler for train-nce")
    common.add_argument("--weights", help="loss weights alpha,beta,gamma")
    common.add_argument("--out", help="working directory for all stage outputs")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="spe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=COMMANDS[name].__doc__)
        if name == "train-nce":
            p.add_argument("--cold-start", action="store_true", help="train from random weights")
        if name == "score":
            p.add_argument("context", nargs="?", help="context sentence (omit to read TSV from stdin)")
            p.add_argument("sentences", nargs="*", help="candidate following sentences")
    return parser


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config)
    weights = None
    if args.weights is not None:
        try:
            weights = LossWeights.parse(args.weights).as_tuple()
        except ValueError as exc:
            raise UsageError(f"--weights: {exc}") from exc
    return override(cfg, **{"seed": args.seed, "criterion": args.criterion, "train.sampler": args.sampler,
                            "train.weights": weights, "paths.work": args.out})


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required (one of: " + ", ".join(COMMANDS) + ")")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
        cfg = _resolve(args)
        with np.errstate(over="ignore", under="ignore"):
            return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"spe: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"spe: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError) as exc:
        print(f"spe: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError, KeyError) as exc:
        print(f"spe: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
