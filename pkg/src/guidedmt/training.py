"""Joint MMT + VMLM training of the adapted model, plus the backbone pre-training stage."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numerics as nx
from .adapters import partition_parameters
from .data import (MMT, VMLM, MultimodalExample, Vocabulary, build_input, encode_source, encode_target,
                   mask_tokens, sample_objective)
from .evaluation import corpus_bleu
from .model import ModelConfig, MultimodalTransformer, init_parameters, pad_targets

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    p_vmlm: float = 0.5
    mask_rate: float = 0.25
    batch_size: int = 16
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    label_smoothing: float = 0.1
    max_steps: int = 1000
    eval_every: int = 250
    seed: int = 1
    guided_attention: bool = True
    use_local: bool = True
    use_global: bool = True
    freeze_policy: str = "frozen-with-adapters"
    vmlm: bool = True
    schedule: str = "joint"          # "joint" or "sequential" (VMLM phase, then MMT)
    mask_corruption: tuple[float, float, float] | None = None
    dev_size: int = 64
    max_decode_len: int = 16

    def __post_init__(self):
        for name in ("p_vmlm", "mask_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.max_steps <= 0 or self.batch_size <= 0 or self.eval_every <= 0:
            raise ValueError("max_steps, batch_size and eval_every must be positive")
        if self.schedule not in ("joint", "sequential"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    @property
    def guidance_mode(self) -> str | None:
        if not self.use_local and not self.use_global:
            return "text-only"
        if not self.use_local:
            return "drop-local"
        if not self.use_global:
            return "drop-global"
        return None

    @property
    def effective_p_vmlm(self) -> float:
        return self.p_vmlm if self.vmlm else 0.0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("mask_corruption") is not None:
            d["mask_corruption"] = tuple(d["mask_corruption"])
        return cls(**d)


# Ablation presets, named after the rows of the ablation table they mirror.
ABLATION_PRESETS: dict[str, dict] = {
    "default": {},
    "no-vmlm": {"vmlm": False},
    "full-attention": {"guided_attention": False},
    "no-local": {"use_local": False},
    "no-global": {"use_global": False},
    "unfrozen": {"freeze_policy": "fully-unfrozen-no-adapters"},
    "pretrain-then-finetune": {"schedule": "sequential"},
    "text-only": {"use_local": False, "use_global": False, "freeze_policy": "text-only-no-visual"},
}


def preset_config(name: str, base: TrainConfig | None = None) -> TrainConfig:
    if name not in ABLATION_PRESETS:
        raise ValueError(f"unknown ablation preset {name!r}; expected one of {sorted(ABLATION_PRESETS)}")
    return replace(base or TrainConfig(), **ABLATION_PRESETS[name])


# ---------------------------------------------------------------------------
# Batches and losses
# ---------------------------------------------------------------------------

@dataclass
class Prepared:
    example: MultimodalExample
    source_ids: np.ndarray
    target_ids: np.ndarray | None


def prepare(examples: Sequence[MultimodalExample], vocab: Vocabulary) -> list[Prepared]:
    return [Prepared(ex, encode_source(ex.source, vocab),
                     encode_target(ex.target, vocab) if ex.target is not None else None)
            for ex in examples]


def _inputs(model: MultimodalTransformer, items: Sequence[Prepared], mode: str | None,
            guided: bool, source_ids: Sequence[np.ndarray] | None = None):
    visual = model.has_visual and mode != "text-only"
    xs = [build_input(p.source_ids if source_ids is None else source_ids[i],
                      p.example.image if visual else None, mode=mode, full_attention=not guided)
          for i, p in enumerate(items)]
    return model.collate(xs)


def mmt_loss(model: MultimodalTransformer, batch: Sequence[Prepared], smoothing: float = 0.1,
             mode: str | None = None, guided: bool = True, rng=None) -> nx.Tensor:
    """Mean label-smoothed cross-entropy of the gold target tokens under teacher forcing."""
    if not batch:
        raise ValueError("mmt_loss needs a non-empty batch")
    enc_batch = _inputs(model, batch, mode, guided)
    dec_in, gold, tmask = pad_targets([p.target_ids for p in batch])
    enc = model.encode(enc_batch, rng=rng)
    logits = model.decode(enc, dec_in, rng=rng)
    return nx.label_smoothed_ce(logits, gold, smoothing, tmask)


def vmlm_loss(model: MultimodalTransformer, batch: Sequence[Prepared], masked_ids: Sequence[np.ndarray],
              positions: Sequence[np.ndarray], smoothing: float = 0.1, mode: str | None = None,
              guided: bool = True, rng=None) -> nx.Tensor:
    """Cross-entropy of the original tokens at masked positions, read off encoder states.

    The prediction head is the tied output embedding applied to the encoder
    state at each masked position.
    """
    rows = np.concatenate([np.full(len(p), b) for b, p in enumerate(positions)]).astype(np.int64)
    cols = np.concatenate(positions).astype(np.int64) if len(positions) else np.zeros(0, np.int64)
    if rows.size == 0:
        raise ValueError("vmlm_loss needs at least one masked position")
    gold = np.array([batch[b].source_ids[c] for b, c in zip(rows, cols)], dtype=np.int64)
    enc = model.encode(_inputs(model, batch, mode, guided, masked_ids), rng=rng)
    h = nx.getitem(enc.states, (rows, cols))
    return nx.label_smoothed_ce(model.output_logits(h), gold, smoothing)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: MultimodalTransformer
    log: list[dict]
    best_bleu: float
    best_step: int

    def log_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.log)


def adapt_backbone(backbone: MultimodalTransformer, policy: str, seed: int) -> MultimodalTransformer:
    """Attach freshly initialised adapters and visual projections under ``policy``."""
    fresh = init_parameters(backbone.config, np.random.default_rng(seed))
    raw = {n: fresh[n] for n in fresh}
    for name, t in backbone.params.items():
        raw[name] = t.data.copy()
    return MultimodalTransformer(backbone.config, partition_parameters(raw, policy))


def evaluate_bleu(model: MultimodalTransformer, examples: Sequence[Prepared], cfg: TrainConfig,
                  batch_size: int = 64) -> float:
    hyps, refs = [], []
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        hyps += model.greedy_translate(_inputs(model, chunk, cfg.guidance_mode, cfg.guided_attention),
                                       cfg.max_decode_len)
        refs += [list(p.target_ids[1:-1]) for p in chunk]
    return corpus_bleu(hyps, refs)


def train(config: TrainConfig, parallel: Sequence[MultimodalExample], monolingual: Sequence[MultimodalExample],
          model: MultimodalTransformer, vocab: Vocabulary, dev: Sequence[MultimodalExample] | None = None
          ) -> TrainResult:
    """Train ``model`` in place; returns it loaded with the best-dev-BLEU parameters.

    Without a dev set, BLEU is measured on the first ``config.dev_size``
    parallel examples.
    """
    rng = np.random.default_rng(config.seed)
    par = prepare(parallel, vocab)
    mono = prepare(monolingual, vocab)
    dev_set = prepare(dev, vocab) if dev else par[:config.dev_size]
    p_vmlm = config.effective_p_vmlm
    if p_vmlm > 0 and not mono:
        raise ValueError("VMLM objective enabled but the monolingual set is empty")
    if p_vmlm < 1 and not par:
        raise ValueError("MMT objective enabled but the parallel set is empty")
    opt = nx.Adam(model.params, config.lr, config.beta1, config.beta2, config.eps)
    mode, guided = config.guidance_mode, config.guided_attention
    drop_rng = rng if model.config.dropout > 0 else None
    n_vmlm_phase = round(config.max_steps * p_vmlm) if config.schedule == "sequential" else 0

    history: list[dict] = []
    best_bleu, best_step = -1.0, 0
    best_state = {n: t.data.copy() for n, t in model.params.trainable().items()}
    for step in range(1, config.max_steps + 1):
        if config.schedule == "sequential":
            objective = VMLM if step <= n_vmlm_phase else MMT
        else:
            objective = sample_objective(p_vmlm, rng)
        source = mono if objective == VMLM else par
        idx = rng.choice(len(source), size=min(config.batch_size, len(source)), replace=False)
        batch = [source[i] for i in idx]
        model.params.zero_grad()
        with nx.Tape() as tape:
            if objective == VMLM:
                masked, positions = [], []
                for p in batch:
                    m, pos = mask_tokens(p.source_ids, config.mask_rate, rng, config.mask_corruption,
                                         model.config.vocab_size)
                    masked.append(m)
                    positions.append(pos)
                loss = vmlm_loss(model, batch, masked, positions, config.label_smoothing, mode, guided, drop_rng)
            else:
                loss = mmt_loss(model, batch, config.label_smoothing, mode, guided, drop_rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss at step {step}")
            tape.backward(loss)
        opt.step()
        record = {"step": step, "objective": objective, "loss": value}
        if step % config.eval_every == 0 or step == config.max_steps:
            bleu = evaluate_bleu(model, dev_set, config)
            record["dev_bleu"] = bleu
            if bleu > best_bleu:
                best_bleu, best_step = bleu, step
                best_state = {n: t.data.copy() for n, t in model.params.trainable().items()}
                record["best"] = True
            log.info("step %d %s loss %.4f dev BLEU %.2f", step, objective, value, bleu)
        history.append(record)
    model.params.load(best_state)
    return TrainResult(model, history, best_bleu, best_step)


def pretrain_backbone(config: ModelConfig, pairs: Sequence[dict], vocab: Vocabulary, steps: int = 2000,
                      batch_size: int = 32, lr: float = 1e-3, seed: int = 0,
                      smoothing: float = 0.1) -> MultimodalTransformer:
    """Text-only MT training of the full backbone (no adapters, no visual inputs).

    Stands in for the strong pretrained text MT model that gets frozen.
    """
    raw = init_parameters(config, np.random.default_rng(seed), adapters=False, visual=False)
    model = MultimodalTransformer(config, partition_parameters(raw, "fully-unfrozen-no-adapters"))
    examples = [MultimodalExample(str(p["id"]), p["source"], np.zeros((0, 0)), np.zeros(0), (), p["target"])
                for p in pairs]
    data = prepare(examples, vocab)
    rng = np.random.default_rng(seed + 1)
    opt = nx.Adam(model.params, lr, 0.9, 0.99)
    for step in range(1, steps + 1):
        idx = rng.choice(len(data), size=min(batch_size, len(data)), replace=False)
        model.params.zero_grad()
        with nx.Tape() as tape:
            loss = mmt_loss(model, [data[i] for i in idx], smoothing, "text-only")
            if not math.isfinite(float(loss.data)):
                raise DivergenceError(f"non-finite backbone loss at step {step}")
            tape.backward(loss)
        opt.step()
        if step % 500 == 0:
            log.info("backbone step %d loss %.4f", step, float(loss.data))
    return model
