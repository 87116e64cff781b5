"""Command-line entry point: ``guidedmt <command> [flags]``.

Exit codes: 0 success, 2 usage, 3 I/O, 4 validation, 5 divergence.
Set GUIDEDMT_LOG_LEVEL (DEBUG, INFO, WARNING, ...) for log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (SyntheticSpec, Vocabulary, build_input, detokenize, generate_synthetic_corpus, load_dataset)
from .evaluation import contrastive_evaluate, corpus_bleu, normalized_attention_scores
from .guidance import ValidationError
from .model import ModelConfig, MultimodalTransformer, load_checkpoint, save_checkpoint
from .training import (ABLATION_PRESETS, DivergenceError, TrainConfig, _inputs, adapt_backbone, prepare,
                       preset_config, pretrain_backbone, train)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_VALIDATION, EXIT_DIVERGENCE = 0, 2, 3, 4, 5
LOG_ENV = "GUIDEDMT_LOG_LEVEL"

log = logging.getLogger("guidedmt")

# Config file: one JSON object with optional sections; unknown keys are rejected.
CONFIG_SECTIONS = ("data", "model", "backbone", "train")
BACKBONE_DEFAULTS = {"steps": 1500, "batch_size": 32, "lr": 1e-3}


class UsageError(Exception):
    pass


def load_config(path: str | None) -> dict:
    cfg = {s: {} for s in CONFIG_SECTIONS}
    if path is None:
        return cfg
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    for section, body in raw.items():
        if section not in CONFIG_SECTIONS:
            raise ValidationError(f"{path}: unknown config section {section!r}; expected {CONFIG_SECTIONS}")
        if not isinstance(body, dict):
            raise ValidationError(f"{path}: section {section!r} must be an object")
        cfg[section] = body
    _check_keys(cfg["data"], {f.name for f in fields(SyntheticSpec)}, "data")
    _check_keys(cfg["model"], {f.name for f in fields(ModelConfig)}, "model")
    _check_keys(cfg["backbone"], set(BACKBONE_DEFAULTS), "backbone")
    _check_keys(cfg["train"], {f.name for f in fields(TrainConfig)}, "train")
    return cfg


def _check_keys(body: dict, known: set, section: str) -> None:
    unknown = set(body) - known
    if unknown:
        raise ValidationError(f"unknown keys in config section {section!r}: {sorted(unknown)}")


def synthetic_spec(cfg: dict) -> SyntheticSpec:
    body = dict(cfg["data"])
    if "context_len" in body:
        body["context_len"] = tuple(body["context_len"])
    return SyntheticSpec(**body)


# ---------------------------------------------------------------------------
# Pipeline pieces shared by the subcommands
# ---------------------------------------------------------------------------

def read_corpus_dir(path: str | Path) -> dict:
    d = Path(path)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {d}")
    vocab = Vocabulary.load(d / "vocab.json")
    return {"vocab": vocab,
            "parallel": load_dataset(d / "parallel.jsonl", "parallel"),
            "monolingual": load_dataset(d / "monolingual.jsonl", "monolingual"),
            "dev": load_dataset(d / "dev.jsonl", "parallel") if (d / "dev.jsonl").exists() else None,
            "contrastive": load_dataset(d / "contrastive.jsonl", "contrastive"),
            "text": load_dataset(d / "text.jsonl", "text")}


def model_config_for(corpus: dict, cfg: dict) -> ModelConfig:
    first = corpus["parallel"][0]
    body = {"vocab_size": len(corpus["vocab"]), "d_local_in": first.local.shape[1],
            "d_global_in": first.global_.shape[0],
            "n_local_features": max(len(ex.local) for ex in corpus["parallel"] + corpus["monolingual"])}
    body.update(cfg["model"])
    return ModelConfig.from_dict(body)


def build_backbone(corpus: dict, cfg: dict, seed: int) -> MultimodalTransformer:
    bb = {**BACKBONE_DEFAULTS, **cfg["backbone"]}
    return pretrain_backbone(model_config_for(corpus, cfg), corpus["text"], corpus["vocab"],
                             steps=bb["steps"], batch_size=bb["batch_size"], lr=bb["lr"], seed=seed)


def train_preset(corpus: dict, cfg: dict, backbone: MultimodalTransformer, preset: str, seed: int):
    tc = preset_config(preset, TrainConfig.from_dict({**cfg["train"], "seed": seed}))
    model = adapt_backbone(backbone, tc.freeze_policy, seed)
    result = train(tc, corpus["parallel"], corpus["monolingual"], model, corpus["vocab"], corpus["dev"])
    return tc, result


def train_meta(tc: TrainConfig, vocab: Vocabulary, preset: str, result=None) -> dict:
    meta = {"vocab": vocab.to_list(), "train": asdict(tc), "preset": preset}
    if result is not None:
        meta.update(best_bleu=result.best_bleu, best_step=result.best_step)
    return meta


def _open_checkpoint(path: str):
    model, header = load_checkpoint(path)
    meta = header.get("meta", {})
    if "vocab" not in meta:
        raise ValidationError(f"{path}: checkpoint carries no vocabulary")
    tc = TrainConfig.from_dict(meta.get("train", {}))
    return model, Vocabulary.from_list(meta["vocab"]), tc


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg) -> int:
    spec = synthetic_spec(cfg)
    corpus = generate_synthetic_corpus(spec, np.random.default_rng(args.seed))
    paths = corpus.write(args.out)
    for kind, p in paths.items():
        log.info("wrote %s", p)
    print(f"wrote {len(corpus.parallel)} parallel, {len(corpus.monolingual)} monolingual, "
          f"{len(corpus.contrastive)} contrastive items to {args.out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    corpus = read_corpus_dir(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.checkpoint:
        backbone, _ = load_checkpoint(args.checkpoint)
    else:
        backbone = build_backbone(corpus, cfg, args.seed)
        save_checkpoint(out / "backbone.ckpt", backbone, "fully-unfrozen-no-adapters",
                        {"vocab": corpus["vocab"].to_list()})
    tc, result = train_preset(corpus, cfg, backbone, args.preset, args.seed)
    save_checkpoint(out / "model.ckpt", result.model, tc.freeze_policy,
                    train_meta(tc, corpus["vocab"], args.preset, result))
    (out / "metrics.jsonl").write_text(result.log_jsonl(), encoding="utf-8")
    print(f"best dev BLEU {result.best_bleu:.2f} at step {result.best_step}; checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def _dataset_kind(path: str) -> str:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if not first.strip():
        raise ValidationError(f"{path}: empty dataset")
    return "parallel" if "target" in json.loads(first) else "monolingual"


def cmd_translate(args, cfg) -> int:
    model, vocab, tc = _open_checkpoint(args.checkpoint)
    examples = load_dataset(args.dataset, _dataset_kind(args.dataset))
    prepared = prepare([replace(ex, target=None) for ex in examples], vocab)
    lines = []
    for i in range(0, len(prepared), 64):
        chunk = prepared[i:i + 64]
        hyps = model.greedy_translate(_inputs(model, chunk, tc.guidance_mode, tc.guided_attention),
                                      tc.max_decode_len)
        lines += [detokenize(h, vocab) for h in hyps]
    _emit("".join(line + "\n" for line in lines), args.out)
    return EXIT_OK


def cmd_eval_contrastive(args, cfg) -> int:
    model, vocab, tc = _open_checkpoint(args.checkpoint)
    items = load_dataset(args.dataset, "contrastive")
    report = contrastive_evaluate(items, model, vocab, tc.guidance_mode, not tc.guided_attention)
    _emit(report.to_jsonl(), args.out)
    print(report.summary(), file=sys.stderr if args.out is None else sys.stdout)
    if report.failed:
        for f in report.failed:
            log.error("failed to score %s", f)
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_eval_bleu(args, cfg) -> int:
    model, vocab, tc = _open_checkpoint(args.checkpoint)
    examples = prepare(load_dataset(args.dataset, "parallel"), vocab)
    hyps, refs = [], []
    for i in range(0, len(examples), 64):
        chunk = examples[i:i + 64]
        hyps += model.greedy_translate(_inputs(model, chunk, tc.guidance_mode, tc.guided_attention),
                                       tc.max_decode_len)
        refs += [list(p.target_ids[1:-1]) for p in chunk]
    score = corpus_bleu(hyps, refs, smooth=args.smooth)
    _emit(json.dumps({"bleu": score, "sentences": len(hyps)}, sort_keys=True) + "\n", args.out)
    return EXIT_OK


def cmd_inspect_attention(args, cfg) -> int:
    model, vocab, tc = _open_checkpoint(args.checkpoint)
    kind = _dataset_kind(args.dataset)
    examples = load_dataset(args.dataset, kind)
    if not 0 <= args.example < len(examples):
        raise ValidationError(f"--example {args.example} out of range (dataset has {len(examples)} records)")
    ex = examples[args.example]
    x = build_input(ex.source, ex.image if model.has_visual else None, vocab, tc.guidance_mode,
                    not tc.guided_attention)
    enc = model.encode(x, record=True)
    scores = normalized_attention_scores(enc, args.layer)
    lay = x.layout
    labels = ([vocab.token(int(t)) for t in x.text_ids] + [f"<box{j}>" for j in range(lay.n_local)]
              + (["<global>"] if lay.has_global else []))
    _emit(json.dumps({"example": ex.example_id, "layer": args.layer, "labels": labels,
                      "scores": scores.tolist()}, sort_keys=True) + "\n", args.out)
    return EXIT_OK


def cmd_ablate(args, cfg) -> int:
    corpus = read_corpus_dir(args.dataset)
    presets = args.preset.split(",") if args.preset else list(ABLATION_PRESETS)
    for p in presets:
        if p not in ABLATION_PRESETS:
            raise ValidationError(f"unknown preset {p!r}; expected one of {sorted(ABLATION_PRESETS)}")
    backbone = (load_checkpoint(args.checkpoint)[0] if args.checkpoint
                else build_backbone(corpus, cfg, args.seed))
    rows = []
    for p in presets:
        tc, result = train_preset(corpus, cfg, backbone, p, args.seed)
        report = contrastive_evaluate(corpus["contrastive"], result.model, corpus["vocab"],
                                      tc.guidance_mode, not tc.guided_attention)
        rows.append({"preset": p, "contrastive_accuracy": report.accuracy, "ties": report.ties,
                     "dev_bleu": result.best_bleu, "best_step": result.best_step})
        log.info("%s: %s", p, report.summary())
    table = ["preset                   accuracy   ties   dev BLEU",
             *(f"{r['preset']:<24} {100 * r['contrastive_accuracy']:7.1f}%  {r['ties']:5d}  {r['dev_bleu']:8.2f}"
               for r in rows)]
    print("\n".join(table))
    if args.out:
        _emit("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="guidedmt", description="Guided-attention multimodal MT at desk scale.",
                     epilog=f"Log verbosity: set {LOG_ENV}=DEBUG|INFO|WARNING|ERROR (default WARNING).")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def command(name, help_, func):
        p = sub.add_parser(name, help=help_, description=help_)
        p.set_defaults(func=func)
        p.add_argument("--config", help="JSON config file with optional sections data/model/backbone/train")
        p.add_argument("--seed", type=int, default=1, help="random seed (default 1)")
        return p

    p = command("gen-data", "generate the synthetic parallel, monolingual and contrastive datasets plus key",
                cmd_gen_data)
    p.add_argument("--out", required=True, help="output directory")

    p = command("train", "pre-train a text backbone (unless given), then adapt and train it jointly", cmd_train)
    p.add_argument("--dataset", required=True, help="dataset directory written by gen-data")
    p.add_argument("--out", required=True, help="output directory for model.ckpt and metrics.jsonl")
    p.add_argument("--checkpoint", help="backbone checkpoint to adapt instead of pre-training one")
    p.add_argument("--preset", default="default", choices=sorted(ABLATION_PRESETS),
                   help="ablation preset applied on top of the train config (default: default)")

    p = command("translate", "greedy-translate a parallel or monolingual dataset file", cmd_translate)
    p.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    p.add_argument("--dataset", required=True, help="JSONL dataset file to translate")
    p.add_argument("--out", help="output text file, one translation per line (default stdout)")

    p = command("eval-contrastive", "rank both translations under each image by perplexity",
                cmd_eval_contrastive)
    p.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    p.add_argument("--dataset", required=True, help="contrastive JSONL file")
    p.add_argument("--out", help="report file, JSON lines (default stdout)")

    p = command("eval-bleu", "corpus BLEU of greedy translations on a parallel dataset file", cmd_eval_bleu)
    p.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    p.add_argument("--dataset", required=True, help="parallel JSONL file")
    p.add_argument("--out", help="result file (default stdout)")
    p.add_argument("--smooth", action="store_true", help="add-one smoothing for n-gram orders 2..4")

    p = command("inspect-attention", "normalised attention scores ||alpha f|| for one example",
                cmd_inspect_attention)
    p.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    p.add_argument("--dataset", required=True, help="parallel or monolingual JSONL file")
    p.add_argument("--example", type=int, default=0, help="record index in the dataset (default 0)")
    p.add_argument("--layer", type=int, help="encoder layer (default: average over layers)")
    p.add_argument("--out", help="output JSON file (default stdout)")

    p = command("ablate", "train several presets on one backbone and compare contrastive accuracy", cmd_ablate)
    p.add_argument("--dataset", required=True, help="dataset directory written by gen-data")
    p.add_argument("--preset", help=f"comma-separated presets (default all: {','.join(ABLATION_PRESETS)})")
    p.add_argument("--checkpoint", help="backbone checkpoint to share instead of pre-training one")
    p.add_argument("--out", help="write the comparison as JSON lines to this file")
    return parser


def _configure_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", force=True)


def run(argv: Sequence[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:          # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as exc:   # ValidationError and JSON errors included
        print(f"error: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
