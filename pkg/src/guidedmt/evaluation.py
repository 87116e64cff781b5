"""Perplexity, contrastive ranking, corpus BLEU and norm-based attention maps."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import ContrastiveItem, ImageBundle, Vocabulary, build_input, encode_target, split_tokens
from .model import EncoderOutput, MultimodalTransformer

TIE_TOLERANCE = 1e-12


def perplexity(log_probs: Sequence[float]) -> float:
    """``exp(-mean(log q(y_i)))``, the geometric-mean inverse probability."""
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.size == 0:
        raise ValueError("perplexity of an empty sequence is undefined")
    if not np.isfinite(lp).all():
        raise ValueError("log-probabilities must be finite")
    return float(np.exp(-lp.mean()))


# ---------------------------------------------------------------------------
# Contrastive evaluation
# ---------------------------------------------------------------------------

# (source, translation, image) -> per-token log-probabilities
Scorer = Callable[[str, str, ImageBundle], Sequence[float]]


@dataclass
class PairOutcome:
    example_id: str
    image: str
    correct: str
    ppl_a: float
    ppl_b: float
    verdict: bool
    tie: bool


@dataclass
class ContrastiveReport:
    outcomes: list[PairOutcome] = field(default_factory=list)
    failed: list[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return len(self.outcomes)

    @property
    def n_correct(self) -> int:
        return sum(o.verdict for o in self.outcomes)

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.total if self.total else float("nan")

    @property
    def ties(self) -> int:
        return sum(o.tie for o in self.outcomes)

    def to_jsonl(self) -> str:
        lines = [json.dumps(asdict(o), sort_keys=True) for o in self.outcomes]
        lines.append(json.dumps({"summary": {"accuracy": self.accuracy, "correct": self.n_correct,
                                             "total": self.total, "ties": self.ties,
                                             "failed": self.failed}}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def summary(self) -> str:
        return (f"contrastive accuracy {100 * self.accuracy:.1f}% "
                f"({self.n_correct}/{self.total} comparisons, {self.ties} ties, {len(self.failed)} failed)")


def contrastive_evaluate(items: Iterable[ContrastiveItem], scorer: Scorer | MultimodalTransformer,
                         vocab: Vocabulary | None = None, mode: str | None = None,
                         full_attention: bool = False) -> ContrastiveReport:
    """Rank both translations under each image; correct iff PPL(correct) <= PPL(incorrect).

    ``scorer`` is either a model (then ``vocab`` is required) or any callable
    returning per-token log-probabilities.  Near-ties still count as correct
    but are reported separately.
    """
    if isinstance(scorer, MultimodalTransformer):
        if vocab is None:
            raise ValueError("scoring with a model needs the vocabulary")
        scorer = model_scorer(scorer, vocab, mode, full_attention)
    report = ContrastiveReport()
    for item in items:
        try:
            rows = []
            for image in ("image_1", "image_2"):
                bundle = item.image(image)
                ppl_a = perplexity(scorer(item.source, item.translation_a, bundle))
                ppl_b = perplexity(scorer(item.source, item.translation_b, bundle))
                good, bad = (ppl_a, ppl_b) if item.pairing[image] == "a" else (ppl_b, ppl_a)
                tie = abs(good - bad) < TIE_TOLERANCE
                rows.append(PairOutcome(item.example_id, image, item.pairing[image], ppl_a, ppl_b,
                                        good <= bad or tie, tie))
        except (ValueError, KeyError) as exc:
            report.failed.append(f"{item.example_id}: {exc}")
            continue
        report.outcomes.extend(rows)
    return report


def model_scorer(model: MultimodalTransformer, vocab: Vocabulary, mode: str | None = None,
                 full_attention: bool = False) -> Scorer:
    """Teacher-forced log-probs from ``model``; ``mode`` as in :func:`guidedmt.data.build_input`."""
    visual = model.has_visual

    def score(source: str, translation: str, image: ImageBundle):
        x = build_input(source, image if visual else None, vocab, mode, full_attention)
        return model.sequence_log_prob(x, encode_target(translation, vocab))[0]

    return score


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_statistics(hypotheses: Sequence, references: Sequence, max_n: int = 4):
    """Clipped n-gram matches, hypothesis n-gram totals, hyp length, ref length."""
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h = split_tokens(hyp) if isinstance(hyp, str) else list(hyp)
        r = split_tokens(ref) if isinstance(ref, str) else list(ref)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    return matches, totals, hyp_len, ref_len


def corpus_bleu(hypotheses: Sequence, references: Sequence, smooth: bool = False, max_n: int = 4) -> float:
    """Corpus BLEU in [0, 100] with the exponential brevity penalty.

    Without smoothing any zero n-gram precision gives 0.  With ``smooth``
    the orders n >= 2 use add-one counts ``(m + 1) / (t + 1)``.
    """
    matches, totals, c, r = bleu_statistics(hypotheses, references, max_n)
    if c == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_n):
        m, t = matches[n], totals[n]
        if smooth and n > 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_p += math.log(m / t)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_p / max_n)


# ---------------------------------------------------------------------------
# Norm-based attention analysis
# ---------------------------------------------------------------------------

def normalized_attention_scores(enc: EncoderOutput, layer: int | None = None, example: int = 0) -> np.ndarray:
    """``||alpha_ij f(x_j)||`` averaged over heads (and over layers if ``layer`` is None).

    ``f(x_j)`` is the value vector of position j pushed through the head's
    slice of the output projection.  Needs ``model.encode(..., record=True)``.
    """
    if enc.attention is None:
        raise RuntimeError("attention recording was not enabled for this forward pass")
    layers = range(len(enc.attention)) if layer is None else [layer]
    maps = []
    for li in layers:
        rec = enc.attention[li]
        alpha = rec.weights[example]               # (H, S, S)
        values = rec.values[example]               # (H, S, dk)
        H, _, dk = values.shape
        wo = rec.out_proj.reshape(H, dk, -1)       # head h owns rows h*dk:(h+1)*dk
        f = np.einsum("hsk,hkd->hsd", values, wo)
        fnorm = np.linalg.norm(f, axis=-1)         # (H, S)
        maps.append((alpha * fnorm[:, None, :]).mean(axis=0))
    return np.mean(maps, axis=0)
