"""Tokenisation, dataset files, VMLM masking and the synthetic disambiguation corpus.

Dataset files are JSON lines.  Float arrays are stored as
``{"shape": [...], "f64le": "<base64 of little-endian float64 bytes>"}`` so a
write/read round trip is bit exact.  Record schemas::

    parallel      {"id", "source", "target", "local", "global", "alignments"}
    monolingual   {"id", "source", "local", "global", "alignments"}
    contrastive   {"id", "source", "translation_a", "translation_b",
                   "image_1": bundle, "image_2": bundle,
                   "pairing": {"image_1": "a"|"b", "image_2": "a"|"b"}}
    text          {"id", "source", "target"}
    key           {"id", "lexeme", "senses": {"image_1": s, "image_2": s}, ...}

where ``bundle = {"local", "global", "alignments"}`` and ``alignments`` is a
list of ``[token_start, token_end, box_index]`` over source-token positions.
"""

from __future__ import annotations

import base64
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .guidance import AlignmentRecord, GuidanceMatrix, ValidationError, build_guidance, degrade_guidance, sever_visual
from .model import BOS, EOS, MASK, PAD, UNK, MultimodalInput

RESERVED = ("<pad>", "<s>", "</s>", "<unk>", "<mask>")
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


# ---------------------------------------------------------------------------
# Vocabulary and tokenisation
# ---------------------------------------------------------------------------

class Vocabulary:
    """Token/id bijection with PAD, BOS, EOS, UNK, MASK fixed at ids 0-4."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        vocab = cls()
        for text in texts:
            for tok in split_tokens(text):
                vocab.add(tok)
        return vocab

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, tokens: Sequence[str]) -> "Vocabulary":
        if tuple(tokens[:len(RESERVED)]) != RESERVED:
            raise ValidationError("vocabulary must start with the reserved tokens")
        vocab = cls(tokens[len(RESERVED):])
        if len(vocab) != len(tokens):
            raise ValidationError("vocabulary contains duplicate tokens")
        return vocab

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.itos, indent=0) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_list(json.loads(Path(path).read_text(encoding="utf-8")))


def split_tokens(text: str) -> list[str]:
    """Lowercased word / punctuation split."""
    return _TOKEN_RE.findall(text.lower())


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.id(t) for t in split_tokens(text)]


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    words = [vocab.token(i) for i in ids if i not in (PAD, BOS, EOS)]
    return re.sub(r" ([^\w\s])", r"\1", " ".join(words))


def encode_source(text: str, vocab: Vocabulary) -> np.ndarray:
    return np.array(tokenize(text, vocab) + [EOS], dtype=np.int64)


def encode_target(text: str, vocab: Vocabulary) -> np.ndarray:
    return np.array([BOS] + tokenize(text, vocab) + [EOS], dtype=np.int64)


# ---------------------------------------------------------------------------
# VMLM masking and objective sampling
# ---------------------------------------------------------------------------

NEVER_MASKED = (PAD, BOS, EOS)


def mask_tokens(ids, rate: float, rng: np.random.Generator,
                corruption: tuple[float, float, float] | None = None,
                vocab_size: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Select each maskable position with probability ``rate``.

    Returns the corrupted ids and the selected positions (their original ids
    are the prediction targets).  When ``rate > 0`` and anything is maskable,
    at least one position is selected.  ``corruption`` is an optional
    (mask, random, keep) mix; by default every selected token becomes MASK.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"mask rate must lie in [0, 1], got {rate}")
    ids = np.asarray(ids, dtype=np.int64)
    maskable = ~np.isin(ids, NEVER_MASKED)
    picked = maskable & (rng.random(ids.shape) < rate)
    if rate > 0 and maskable.any() and not picked.any():
        picked[rng.choice(np.flatnonzero(maskable))] = True
    out = ids.copy()
    positions = np.flatnonzero(picked)
    if corruption is None:
        out[positions] = MASK
    else:
        if vocab_size is None:
            raise ValueError("corruption mix needs vocab_size")
        p_mask, p_rand, p_keep = corruption
        u = rng.random(len(positions))
        for pos, r in zip(positions, u):
            if r < p_mask:
                out[pos] = MASK
            elif r < p_mask + p_rand:
                out[pos] = rng.integers(len(RESERVED), vocab_size)
    return out, positions


VMLM, MMT = "vmlm", "mmt"


def sample_objective(p_vmlm: float, rng: np.random.Generator) -> str:
    if not 0.0 <= p_vmlm <= 1.0:
        raise ValueError(f"p_vmlm must lie in [0, 1], got {p_vmlm}")
    return VMLM if rng.random() < p_vmlm else MMT


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

@dataclass
class ImageBundle:
    local: np.ndarray                 # (N, d_local)
    global_: np.ndarray               # (d_global,)
    alignments: tuple[AlignmentRecord, ...] = ()


@dataclass
class MultimodalExample:
    example_id: str
    source: str
    local: np.ndarray
    global_: np.ndarray
    alignments: tuple[AlignmentRecord, ...] = ()
    target: str | None = None

    @property
    def image(self) -> ImageBundle:
        return ImageBundle(self.local, self.global_, self.alignments)


@dataclass
class ContrastiveItem:
    example_id: str
    source: str
    translation_a: str
    translation_b: str
    image_1: ImageBundle
    image_2: ImageBundle
    pairing: dict[str, str] = field(default_factory=lambda: {"image_1": "a", "image_2": "b"})

    def __post_init__(self):
        if sorted(self.pairing) != ["image_1", "image_2"] or sorted(self.pairing.values()) != ["a", "b"]:
            raise ValidationError(f"{self.example_id}: pairing must be a bijection images->translations")

    def translation(self, label: str) -> str:
        return self.translation_a if label == "a" else self.translation_b

    def image(self, name: str) -> ImageBundle:
        return self.image_1 if name == "image_1" else self.image_2


def build_input(source: str | np.ndarray, image: ImageBundle | None, vocab: Vocabulary | None = None,
                mode: str | None = None, full_attention: bool = False) -> MultimodalInput:
    """Encoder input for a source sentence and an image.

    ``mode`` is ``None`` (guided), one of the ``degrade_guidance`` modes, or
    ``"severed"`` (layout kept, every text<->visual link removed).
    ``full_attention`` then lifts every remaining mask entry.
    """
    ids = encode_source(source, vocab) if isinstance(source, str) else np.asarray(source, dtype=np.int64)
    T = len(ids)
    if image is None:
        C = build_guidance(T, 0, (), has_global=False)
        return MultimodalInput(ids, np.zeros((0, 0)), np.zeros(0), C)
    C = build_guidance(T, len(image.local), image.alignments)
    if mode == "severed":
        C = sever_visual(C)
    elif mode is not None:
        C = degrade_guidance(C, mode)
    if full_attention:
        C = degrade_guidance(C, "full")
    return MultimodalInput(ids, image.local, image.global_, C)


# ---------------------------------------------------------------------------
# File IO
# ---------------------------------------------------------------------------

KINDS = ("parallel", "monolingual", "contrastive", "text", "key")


def _encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "f64le": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["f64le"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(d["shape"])


def _bundle_to_json(b: ImageBundle) -> dict:
    return {"local": _encode_array(b.local), "global": _encode_array(b.global_),
            "alignments": [[r.token_start, r.token_end, r.box_index] for r in b.alignments]}


def _bundle_from_json(d: dict) -> ImageBundle:
    return ImageBundle(_decode_array(d["local"]), _decode_array(d["global"]),
                       tuple(AlignmentRecord(*map(int, r)) for r in d["alignments"]))


def to_record(obj, kind: str) -> dict:
    if kind in ("parallel", "monolingual"):
        rec = {"id": obj.example_id, "source": obj.source}
        if kind == "parallel":
            rec["target"] = obj.target
        rec.update(_bundle_to_json(obj.image))
        return rec
    if kind == "contrastive":
        return {"id": obj.example_id, "source": obj.source, "translation_a": obj.translation_a,
                "translation_b": obj.translation_b, "image_1": _bundle_to_json(obj.image_1),
                "image_2": _bundle_to_json(obj.image_2), "pairing": dict(obj.pairing)}
    if kind in ("text", "key"):
        return dict(obj)
    raise ValueError(f"unknown dataset kind {kind!r}")


def from_record(rec: dict, kind: str):
    if kind in ("parallel", "monolingual"):
        b = _bundle_from_json(rec)
        target = rec["target"] if kind == "parallel" else None
        if kind == "parallel" and not isinstance(target, str):
            raise ValidationError("parallel record needs a string 'target'")
        return MultimodalExample(str(rec["id"]), rec["source"], b.local, b.global_, b.alignments, target)
    if kind == "contrastive":
        return ContrastiveItem(str(rec["id"]), rec["source"], rec["translation_a"], rec["translation_b"],
                               _bundle_from_json(rec["image_1"]), _bundle_from_json(rec["image_2"]),
                               dict(rec["pairing"]))
    if kind == "text":
        if not isinstance(rec.get("source"), str) or not isinstance(rec.get("target"), str):
            raise ValidationError("text record needs string 'source' and 'target'")
        return rec
    if kind == "key":
        return rec
    raise ValueError(f"unknown dataset kind {kind!r}")


def save_dataset(path: str | Path, examples: Iterable, kind: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(to_record(ex, kind), sort_keys=True) + "\n")


def _check_bundle(b: ImageBundle, n_tokens: int, d_local: int | None, d_global: int | None,
                  max_local: int | None) -> None:
    if b.local.ndim != 2:
        raise ValidationError(f"local features must be 2-D, got shape {b.local.shape}")
    if d_local is not None and len(b.local) and b.local.shape[1] != d_local:
        raise ValidationError(f"local feature dim {b.local.shape[1]} != expected {d_local}")
    if d_global is not None and b.global_.shape != (d_global,):
        raise ValidationError(f"global feature shape {b.global_.shape} != expected ({d_global},)")
    if max_local is not None and len(b.local) > max_local:
        raise ValidationError(f"{len(b.local)} local features exceed the maximum of {max_local}")
    if not (np.isfinite(b.local).all() and np.isfinite(b.global_).all()):
        raise ValidationError("non-finite visual feature value")
    for r in b.alignments:
        r.validate(n_tokens, len(b.local))


def load_dataset(path: str | Path, kind: str, d_local: int | None = None, d_global: int | None = None,
                 max_local: int | None = None) -> list:
    """Parse and validate a dataset file; fails on the first bad record with its line number."""
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = from_record(json.loads(line), kind)
                if kind in ("parallel", "monolingual"):
                    _check_bundle(obj.image, len(split_tokens(obj.source)), d_local, d_global, max_local)
                elif kind == "contrastive":
                    n = len(split_tokens(obj.source))
                    _check_bundle(obj.image_1, n, d_local, d_global, max_local)
                    _check_bundle(obj.image_2, n, d_local, d_global, max_local)
            except (ValidationError, KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
            out.append(obj)
    return out


# ---------------------------------------------------------------------------
# Synthetic disambiguation corpus
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Shape of the synthetic corpus.

    Every ambiguous source word ``amb<k>`` has two translations
    ``sens<k>a`` / ``sens<k>b``; which one is right is decided only by a
    concept vector planted in the image (always in the global feature, and
    in the linked box when the box "detects" it).  Monolingual captions name
    the sense with an unambiguous source synonym ``syn<k>a`` / ``syn<k>b``.
    """

    n_lexemes: int = 155
    n_parallel: int = 1240
    n_monolingual: int = 2480
    n_contrastive: int = 155
    n_dev: int = 64                  # 0: no dev split
    n_text: int = 4000
    n_context_words: int = 16
    context_len: tuple[int, int] = (2, 4)
    n_boxes: int = 3
    d_local: int = 64
    d_global: int = 512
    signal_dims_local: int = 16
    signal_dims_global: int = 32
    signal_strength: float = 3.0
    noise: float = 1.0
    detection_rate: float = 0.5
    ambiguous_fraction: float = 1.0
    dev_ambiguous_fraction: float = 1.0
    mono_synonym_fraction: float = 1.0
    paired_senses: bool = True       # each ambiguous parallel sentence appears once per sense
    contrastive_images: str = "fresh"   # or "training": reuse the two training images of the sentence

    def validate(self) -> None:
        if self.n_lexemes < 1:
            raise ValidationError("n_lexemes must be positive")
        for name in ("n_parallel", "n_monolingual", "n_contrastive"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if self.n_dev < 0:
            raise ValidationError("n_dev must be non-negative")
        if self.n_boxes < 1 or self.n_context_words < 1:
            raise ValidationError("n_boxes and n_context_words must be positive")
        if self.signal_dims_local > self.d_local or self.signal_dims_global > self.d_global:
            raise ValidationError("signal dimensions exceed feature dimensions")
        lo, hi = self.context_len
        if not 0 <= lo <= hi:
            raise ValidationError("context_len must satisfy 0 <= lo <= hi")
        if self.contrastive_images not in ("fresh", "training"):
            raise ValidationError(f"contrastive_images must be 'fresh' or 'training', got {self.contrastive_images!r}")
        if self.contrastive_images == "training" and not self.paired_senses:
            raise ValidationError("contrastive_images='training' needs paired_senses")
        for name in ("ambiguous_fraction", "dev_ambiguous_fraction", "mono_synonym_fraction", "detection_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")


@dataclass
class SyntheticCorpus:
    parallel: list[MultimodalExample]
    monolingual: list[MultimodalExample]
    dev: list[MultimodalExample]
    contrastive: list[ContrastiveItem]
    key: list[dict]
    text: list[dict]
    vocab: Vocabulary

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "parallel": out / "parallel.jsonl",
            "monolingual": out / "monolingual.jsonl",
            "contrastive": out / "contrastive.jsonl",
            "key": out / "key.jsonl",
            "text": out / "text.jsonl",
            "vocab": out / "vocab.json",
        }
        save_dataset(paths["parallel"], self.parallel, "parallel")
        save_dataset(paths["monolingual"], self.monolingual, "monolingual")
        if self.dev:        # no dev split: selection falls back to a slice of the training data
            paths["dev"] = out / "dev.jsonl"
            save_dataset(paths["dev"], self.dev, "parallel")
        save_dataset(paths["contrastive"], self.contrastive, "contrastive")
        save_dataset(paths["key"], self.key, "key")
        save_dataset(paths["text"], self.text, "text")
        self.vocab.save(paths["vocab"])
        return paths


def _words(spec: SyntheticSpec):
    src_ctx = [f"w{i}" for i in range(spec.n_context_words)]
    tgt_ctx = [f"mot{i}" for i in range(spec.n_context_words)]
    amb = [f"amb{k}" for k in range(spec.n_lexemes)]
    syn = [(f"syn{k}a", f"syn{k}b") for k in range(spec.n_lexemes)]
    sens = [(f"sens{k}a", f"sens{k}b") for k in range(spec.n_lexemes)]
    return src_ctx, tgt_ctx, amb, syn, sens


class _ImageSampler:
    def __init__(self, spec: SyntheticSpec, rng: np.random.Generator):
        self.spec, self.rng = spec, rng

        def unit(n, d):
            v = rng.normal(size=(n, 2, d))
            return v / np.linalg.norm(v, axis=-1, keepdims=True)

        self.concept_global = unit(spec.n_lexemes, spec.signal_dims_global) * spec.signal_strength
        self.concept_local = unit(spec.n_lexemes, spec.signal_dims_local) * spec.signal_strength

    def base(self):
        s = self.spec
        return (self.rng.normal(0.0, s.noise, (s.n_boxes, s.d_local)),
                self.rng.normal(0.0, s.noise, s.d_global),
                int(self.rng.integers(s.n_boxes)))

    def plant(self, base, lexeme: int, sense: int, detected: bool):
        local, glob, box = base[0].copy(), base[1].copy(), base[2]
        s = self.spec
        glob[:s.signal_dims_global] += self.concept_global[lexeme, sense]
        if detected:
            local[box, :s.signal_dims_local] += self.concept_local[lexeme, sense]
        return local, glob, box

    def detected(self) -> bool:
        return bool(self.rng.random() < self.spec.detection_rate)


def _sentence(rng, spec, src_ctx, head: str | None):
    """Context words with ``head`` inserted at a random slot, plus a full stop."""
    lo, hi = spec.context_len
    ctx = list(rng.integers(spec.n_context_words, size=int(rng.integers(lo, hi + 1))))
    pos = int(rng.integers(len(ctx) + 1)) if head is not None else -1
    return ctx, pos


def _render(ctx, pos, words, head):
    toks = [words[i] for i in ctx]
    if head is not None:
        toks.insert(pos, head)
    return toks + ["."]


def generate_synthetic_corpus(spec: SyntheticSpec, rng: np.random.Generator) -> SyntheticCorpus:
    spec.validate()
    src_ctx, tgt_ctx, amb, syn, sens = _words(spec)
    images = _ImageSampler(spec, rng)

    def links(head_pos, box):
        return (AlignmentRecord(head_pos, head_pos + 1, box),)

    def parallel_split(n, prefix, fraction):
        out, sentences, i = [], [], 0
        while len(out) < n:
            k = i % spec.n_lexemes
            i += 1
            ambiguous = rng.random() < fraction
            ctx, pos = _sentence(rng, spec, src_ctx, "x")
            senses = [0, 1] if ambiguous and spec.paired_senses else [int(rng.integers(2))]
            shown = {}
            for s in senses[:n - len(out)]:
                src = _render(ctx, pos, src_ctx, amb[k] if ambiguous else syn[k][s])
                tgt = _render(ctx, pos, tgt_ctx, sens[k][s])
                local, glob, box = images.plant(images.base(), k, s, images.detected())
                shown[s] = ImageBundle(local, glob, links(pos, box))
                out.append(MultimodalExample(f"{prefix}{len(out)}", " ".join(src), local, glob,
                                             links(pos, box), " ".join(tgt)))
            if ambiguous:
                sentences.append((ctx, pos, k, shown))
        return out, sentences

    parallel, sentences = parallel_split(spec.n_parallel, "par", spec.ambiguous_fraction)
    dev, _ = parallel_split(spec.n_dev, "dev", spec.dev_ambiguous_fraction)

    monolingual: list[MultimodalExample] = []
    for i in range(spec.n_monolingual):
        k = i % spec.n_lexemes
        s = int(rng.integers(2))
        ctx, pos = _sentence(rng, spec, src_ctx, "x")
        head = syn[k][s] if rng.random() < spec.mono_synonym_fraction else amb[k]
        src = _render(ctx, pos, src_ctx, head)
        local, glob, box = images.plant(images.base(), k, s, images.detected())
        monolingual.append(MultimodalExample(f"mono{i}", " ".join(src), local, glob,
                                             links(pos, box)))

    # contrastive items reuse held-in parallel sentences, one per lexeme first
    by_lexeme: dict[int, list] = {}
    for sent in sentences:
        if spec.contrastive_images == "fresh" or len(sent[3]) == 2:
            by_lexeme.setdefault(sent[2], []).append(sent)
    contrastive: list[ContrastiveItem] = []
    key: list[dict] = []
    for j in range(spec.n_contrastive):
        k = j % spec.n_lexemes
        pool = by_lexeme.get(k)
        if pool:
            ctx, pos, _, shown = pool[(j // spec.n_lexemes) % len(pool)]
        elif spec.contrastive_images == "training":
            raise ValidationError(f"no ambiguous training sentence for lexeme {k}; raise n_parallel")
        else:
            ctx, pos = _sentence(rng, spec, src_ctx, "x")
        src = " ".join(_render(ctx, pos, src_ctx, amb[k]))
        tr = [" ".join(_render(ctx, pos, tgt_ctx, sens[k][s])) for s in (0, 1)]
        first = int(rng.integers(2))
        if spec.contrastive_images == "training":
            im1, im2 = shown[first], shown[1 - first]
        else:
            base = images.base()
            det1, det2 = images.detected(), images.detected()
            l1, g1, box = images.plant(base, k, first, det1)
            l2, g2, _ = images.plant(base, k, 1 - first, det2)
            im1, im2 = ImageBundle(l1, g1, links(pos, box)), ImageBundle(l2, g2, links(pos, box))
        pairing = {"image_1": "a" if first == 0 else "b", "image_2": "b" if first == 0 else "a"}
        contrastive.append(ContrastiveItem(f"com{j}", src, tr[0], tr[1], im1, im2, pairing))
        key.append({"id": f"com{j}", "lexeme": amb[k], "senses": {"image_1": first, "image_2": 1 - first},
                    "correct": pairing, "signal_box": {"image_1": im1.alignments[0].box_index,
                                                       "image_2": im2.alignments[0].box_index}})

    text: list[dict] = []
    for i in range(spec.n_text):
        ctx, pos = _sentence(rng, spec, src_ctx, "x")
        k = int(rng.integers(spec.n_lexemes))
        s = int(rng.integers(2))
        head = amb[k] if rng.random() < 0.5 else syn[k][s]
        text.append({"id": f"txt{i}", "source": " ".join(_render(ctx, pos, src_ctx, head)),
                     "target": " ".join(_render(ctx, pos, tgt_ctx, sens[k][s]))})

    vocab = Vocabulary(["."] + src_ctx + tgt_ctx + amb + [w for p in syn for w in p] + [w for p in sens for w in p])
    return SyntheticCorpus(parallel, monolingual, dev, contrastive, key, text, vocab)
