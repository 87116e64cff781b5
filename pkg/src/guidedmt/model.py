"""Encoder-decoder transformer over text plus projected image features.

The encoder sees ``[text | local boxes | global]`` and runs guided
self-attention under a binary guidance matrix; the decoder is a standard
causal transformer whose cross-attention reads the text span only.  All
computation is batched; single examples go through a batch of one.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .adapters import ParameterRegistry, adapter_forward, adapter_width, partition_parameters
from .guidance import GuidanceMatrix, Layout, ValidationError
from .numerics import Tensor

PAD, BOS, EOS, UNK, MASK = 0, 1, 2, 3, 4


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_encoder_layers: int = 2
    n_decoder_layers: int = 2
    d_ffn: int = 128
    max_text_len: int = 64
    n_local_features: int = 8
    d_local_in: int = 64
    d_global_in: int = 512
    adapter_reduction: int = 8
    dropout: float = 0.0
    decoder_adapters: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        adapter_width(self.d_model, self.adapter_reduction)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class MultimodalInput:
    """One encoder input.  ``text_ids`` already ends with EOS."""

    text_ids: np.ndarray
    local_features: np.ndarray
    global_feature: np.ndarray
    guidance: GuidanceMatrix

    def __post_init__(self):
        self.text_ids = np.asarray(self.text_ids, dtype=np.int64)
        local = np.asarray(self.local_features, dtype=np.float64)
        if local.ndim != 2:
            if local.size:
                raise ValidationError(f"local features must be (N, d), got shape {local.shape}")
            local = local.reshape(0, 0)
        self.local_features = local
        self.global_feature = np.asarray(self.global_feature, dtype=np.float64)
        lay = self.guidance.layout
        if lay.n_text != len(self.text_ids):
            raise ValidationError(f"guidance covers {lay.n_text} text positions, input has {len(self.text_ids)}")
        if lay.n_local > len(self.local_features):
            raise ValidationError(f"guidance covers {lay.n_local} boxes, input has {len(self.local_features)}")

    @property
    def layout(self) -> Layout:
        return self.guidance.layout


@dataclass
class EncoderBatch:
    text_ids: np.ndarray        # (B, T) padded with PAD
    text_mask: np.ndarray       # (B, T) bool
    local: np.ndarray           # (B, N, d_local_in)
    global_: np.ndarray | None  # (B, d_global_in)
    attn_mask: np.ndarray       # (B, S, S) bool
    layouts: list[Layout]

    @property
    def n_text(self) -> int:
        return self.text_ids.shape[1]

    @property
    def n_local(self) -> int:
        return self.local.shape[1]

    @property
    def size(self) -> int:
        return self.attn_mask.shape[1]


def collate(inputs: Sequence[MultimodalInput], config: ModelConfig) -> EncoderBatch:
    """Pad a list of inputs into one batch and lift each C into the padded layout."""
    if not inputs:
        raise ValueError("cannot collate an empty batch")
    layouts = [x.layout for x in inputs]
    globals_ = {lay.has_global for lay in layouts}
    if len(globals_) != 1:
        raise ValidationError("a batch must either all use or all drop the global feature")
    has_global = globals_.pop()
    B = len(inputs)
    T = max(lay.n_text for lay in layouts)
    N = max(lay.n_local for lay in layouts)
    if T > config.max_text_len:
        raise ValidationError(f"text length {T} exceeds max_text_len={config.max_text_len}")
    if min(lay.n_text for lay in layouts) < 1:
        raise ValidationError("every input needs at least one text position")
    S = T + N + int(has_global)
    ids = np.full((B, T), PAD, dtype=np.int64)
    tmask = np.zeros((B, T), dtype=bool)
    local = np.zeros((B, N, config.d_local_in))
    glob = np.zeros((B, config.d_global_in)) if has_global else None
    mask = np.zeros((B, S, S), dtype=bool)
    for b, x in enumerate(inputs):
        lay = x.layout
        ids[b, :lay.n_text] = x.text_ids
        tmask[b, :lay.n_text] = True
        if lay.n_local:
            feats = x.local_features[:lay.n_local]
            if feats.shape[1] != config.d_local_in:
                raise ValidationError(f"local features have dim {feats.shape[1]}, config expects {config.d_local_in}")
            local[b, :lay.n_local] = feats
        if has_global:
            if x.global_feature.shape != (config.d_global_in,):
                raise ValidationError(f"global feature shape {x.global_feature.shape}, config expects ({config.d_global_in},)")
            glob[b] = x.global_feature
        pos = np.concatenate([np.arange(lay.n_text), T + np.arange(lay.n_local),
                              [S - 1] if has_global else []]).astype(np.int64)
        mask[b] = np.eye(S, dtype=bool)
        mask[b][np.ix_(pos, pos)] = x.guidance.matrix
    return EncoderBatch(ids, tmask, local, glob, mask, layouts)


@dataclass
class AttentionRecord:
    weights: np.ndarray   # (B, H, Lq, Lk)
    values: np.ndarray    # (B, H, Lk, d_head)
    out_proj: np.ndarray  # (d_model, d_model)


@dataclass
class EncoderOutput:
    states: Tensor                  # (B, S, d_model)
    batch: EncoderBatch
    attention: list[AttentionRecord] | None = None

    @property
    def text_states(self) -> Tensor:
        """Decoder-visible slice: the text span only."""
        return nx.getitem(self.states, (slice(None), slice(0, self.batch.n_text)))


def sinusoidal_positions(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def init_parameters(config: ModelConfig, rng: np.random.Generator, adapters: bool = True,
                    visual: bool = True) -> dict[str, np.ndarray]:
    """Raw parameter arrays for the whole model (backbone, adapters, visual projections)."""
    d, f = config.d_model, config.d_ffn
    p: dict[str, np.ndarray] = {}

    def lin(name, n_in, n_out):
        p[f"{name}.w"] = rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_in, n_out))
        p[f"{name}.b"] = np.zeros(n_out)

    def ln(name):
        p[f"{name}.g"] = np.ones(d)
        p[f"{name}.b"] = np.zeros(d)

    def adapter(name):
        w = adapter_width(d, config.adapter_reduction)
        p[f"{name}.down.w"] = rng.normal(0.0, 0.02, (d, w))
        p[f"{name}.down.b"] = np.zeros(w)
        p[f"{name}.up.w"] = np.zeros((w, d))
        p[f"{name}.up.b"] = np.zeros(d)

    def attention(name):
        for part in "qkvo":
            lin(f"{name}.{part}", d, d)

    p["embed.tokens"] = rng.normal(0.0, 1.0 / math.sqrt(d), (config.vocab_size, d))
    p["out.bias"] = np.zeros(config.vocab_size)
    for i in range(config.n_encoder_layers):
        attention(f"enc.{i}.attn")
        ln(f"enc.{i}.ln1")
        lin(f"enc.{i}.ffn1", d, f)
        lin(f"enc.{i}.ffn2", f, d)
        ln(f"enc.{i}.ln2")
        if adapters:
            adapter(f"enc.{i}.adapter_attn")
            adapter(f"enc.{i}.adapter_ffn")
    for i in range(config.n_decoder_layers):
        attention(f"dec.{i}.self")
        ln(f"dec.{i}.ln1")
        attention(f"dec.{i}.cross")
        ln(f"dec.{i}.ln2")
        lin(f"dec.{i}.ffn1", d, f)
        lin(f"dec.{i}.ffn2", f, d)
        ln(f"dec.{i}.ln3")
        if adapters and config.decoder_adapters:
            adapter(f"dec.{i}.adapter_self")
            adapter(f"dec.{i}.adapter_cross")
            adapter(f"dec.{i}.adapter_ffn")
    if visual:
        lin("visual.local", config.d_local_in, d)
        lin("visual.global", config.d_global_in, d)
    return p


def multi_head_attention(xq: Tensor, xkv: Tensor, params: Mapping[str, Tensor], prefix: str,
                         mask: np.ndarray, n_heads: int, record: list | None = None) -> Tensor:
    """Scaled dot-product attention with a binary mask broadcast to ``(B, H, Lq, Lk)``.

    ``mask`` has shape ``(B, Lq, Lk)`` or anything broadcastable to it; the
    same mask applies to every head.
    """
    B, Lq, d = xq.shape
    Lk = xkv.shape[1]
    dk = d // n_heads

    def heads(x, part, L):
        y = nx.linear(x, params[f"{prefix}.{part}.w"], params[f"{prefix}.{part}.b"])
        return nx.swapaxes(nx.reshape(y, (B, L, n_heads, dk)), 1, 2)

    q, k, v = heads(xq, "q", Lq), heads(xkv, "k", Lk), heads(xkv, "v", Lk)
    scores = nx.mul(nx.matmul(q, nx.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dk))
    mask = np.asarray(mask, dtype=bool)
    a = nx.masked_softmax(scores, mask[:, None] if mask.ndim == 3 else mask)
    ctx = nx.reshape(nx.swapaxes(nx.matmul(a, v), 1, 2), (B, Lq, d))
    if record is not None:
        record.append(AttentionRecord(a.data, v.data, params[f"{prefix}.o.w"].data))
    return nx.linear(ctx, params[f"{prefix}.o.w"], params[f"{prefix}.o.b"])


def guided_self_attention(h: Tensor, guidance: np.ndarray, params: Mapping[str, Tensor], prefix: str,
                          n_heads: int, record: list | None = None) -> Tensor:
    """Self-attention where position i may attend to j only if ``guidance[..., i, j]``."""
    return multi_head_attention(h, h, params, prefix, guidance, n_heads, record)


class MultimodalTransformer:
    """Model wrapper binding a config to a parameter registry.

    Adapters run wherever their parameters are registered; a registry
    without adapter entries is the plain backbone.
    """

    def __init__(self, config: ModelConfig, params: ParameterRegistry):
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0,
                   policy: str = "frozen-with-adapters") -> "MultimodalTransformer":
        raw = init_parameters(config, np.random.default_rng(seed))
        return cls(config, partition_parameters(raw, policy))

    @property
    def has_visual(self) -> bool:
        return "visual.local.w" in self.params

    def _adapt(self, x: Tensor, prefix: str) -> Tensor:
        ad = self.params.adapter(prefix)
        return x if ad is None else adapter_forward(x, ad)

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        return nx.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"], self.config.ln_eps)

    def _ffn(self, x: Tensor, prefix: str, rng) -> Tensor:
        p = self.params
        h = nx.gelu(nx.linear(x, p[f"{prefix}1.w"], p[f"{prefix}1.b"]))
        return nx.dropout(nx.linear(h, p[f"{prefix}2.w"], p[f"{prefix}2.b"]), self.config.dropout, rng)

    def _text_embed(self, ids: np.ndarray) -> Tensor:
        d = self.config.d_model
        L = ids.shape[1]
        if L > self.config.max_text_len:
            raise ValidationError(f"text length {L} exceeds max_text_len={self.config.max_text_len}")
        e = nx.mul(nx.embedding(self.params["embed.tokens"], ids), math.sqrt(d))
        return nx.add(e, sinusoidal_positions(L, d))

    # -- encoder -----------------------------------------------------------

    def collate(self, inputs: Sequence[MultimodalInput]) -> EncoderBatch:
        return collate(inputs, self.config)

    def embed_inputs(self, batch: EncoderBatch | MultimodalInput) -> Tensor:
        """``(B, S, d_model)``: text embeddings with positions, then projected boxes, then global."""
        if isinstance(batch, MultimodalInput):
            batch = self.collate([batch])
        parts = [self._text_embed(batch.text_ids)]
        visual = batch.n_local > 0 or batch.global_ is not None
        if visual and not self.has_visual:
            raise ValidationError("input carries visual positions but the model has no visual projections")
        p = self.params
        if batch.n_local:
            parts.append(nx.linear(Tensor(batch.local), p["visual.local.w"], p["visual.local.b"]))
        if batch.global_ is not None:
            g = nx.linear(Tensor(batch.global_[:, None, :]), p["visual.global.w"], p["visual.global.b"])
            parts.append(g)
        return parts[0] if len(parts) == 1 else nx.concat(parts, axis=1)

    def encode(self, batch: EncoderBatch | MultimodalInput, record: bool = False,
               rng: np.random.Generator | None = None) -> EncoderOutput:
        if isinstance(batch, MultimodalInput):
            batch = self.collate([batch])
        cfg = self.config
        h = nx.dropout(self.embed_inputs(batch), cfg.dropout, rng)
        rec = [] if record else None
        for i in range(cfg.n_encoder_layers):
            a = guided_self_attention(h, batch.attn_mask, self.params, f"enc.{i}.attn", cfg.n_heads, rec)
            a = self._adapt(nx.dropout(a, cfg.dropout, rng), f"enc.{i}.adapter_attn")
            h = self._ln(nx.add(h, a), f"enc.{i}.ln1")
            f = self._adapt(self._ffn(h, f"enc.{i}.ffn", rng), f"enc.{i}.adapter_ffn")
            h = self._ln(nx.add(h, f), f"enc.{i}.ln2")
        return EncoderOutput(h, batch, rec)

    # -- decoder -----------------------------------------------------------

    def decode(self, enc: EncoderOutput, prefix_ids: np.ndarray,
               rng: np.random.Generator | None = None) -> Tensor:
        """Logits ``(B, L, V)`` for every prefix position (teacher forcing)."""
        prefix_ids = np.atleast_2d(np.asarray(prefix_ids, dtype=np.int64))
        if prefix_ids.shape[1] < 1:
            raise ValueError("decoder prefix must contain at least BOS")
        cfg = self.config
        B, L = prefix_ids.shape
        memory = enc.text_states
        causal = np.tril(np.ones((L, L), dtype=bool))[None]
        cross = enc.batch.text_mask[:, None, :]
        y = nx.dropout(self._text_embed(prefix_ids), cfg.dropout, rng)
        for i in range(cfg.n_decoder_layers):
            a = multi_head_attention(y, y, self.params, f"dec.{i}.self", causal, cfg.n_heads)
            a = self._adapt(nx.dropout(a, cfg.dropout, rng), f"dec.{i}.adapter_self")
            y = self._ln(nx.add(y, a), f"dec.{i}.ln1")
            c = multi_head_attention(y, memory, self.params, f"dec.{i}.cross", cross, cfg.n_heads)
            c = self._adapt(nx.dropout(c, cfg.dropout, rng), f"dec.{i}.adapter_cross")
            y = self._ln(nx.add(y, c), f"dec.{i}.ln2")
            f = self._adapt(self._ffn(y, f"dec.{i}.ffn", rng), f"dec.{i}.adapter_ffn")
            y = self._ln(nx.add(y, f), f"dec.{i}.ln3")
        return self.output_logits(y)

    def output_logits(self, h: Tensor) -> Tensor:
        """Tied output head: ``h @ E^T + bias``."""
        E = self.params["embed.tokens"]
        return nx.add(nx.matmul(h, nx.swapaxes(E, 0, 1)), self.params["out.bias"])

    def decode_step(self, enc: EncoderOutput, prefix_ids) -> np.ndarray:
        """Next-token logits after ``prefix_ids`` (which begins with BOS)."""
        prefix_ids = np.atleast_2d(np.asarray(prefix_ids, dtype=np.int64))
        return self.decode(enc, prefix_ids).data[:, -1, :]

    def sequence_log_prob(self, inputs: MultimodalInput | EncoderBatch | Sequence[MultimodalInput],
                          targets) -> list[np.ndarray]:
        """Teacher-forced log-probability of every gold token after BOS."""
        batch = self._as_batch(inputs)
        targets = [np.asarray(t, dtype=np.int64) for t in
                   ([targets] if np.ndim(targets[0]) == 0 else targets)]
        for t in targets:
            if len(t) < 2 or t[0] != BOS or t[-1] != EOS:
                raise ValueError("target sequences must start with BOS and end with EOS")
        dec_in, gold, tmask = pad_targets(targets)
        enc = self.encode(batch)
        logp = nx.log_softmax(self.decode(enc, dec_in)).data
        picked = np.take_along_axis(logp, gold[..., None], axis=-1)[..., 0]
        return [picked[b, tmask[b]] for b in range(len(targets))]

    def greedy_translate(self, inputs: MultimodalInput | EncoderBatch | Sequence[MultimodalInput],
                         max_len: int = 32) -> list[list[int]]:
        """Argmax decoding from BOS; ties go to the lowest id.  EOS is not returned."""
        batch = self._as_batch(inputs)
        enc = self.encode(batch)
        B = batch.text_ids.shape[0]
        seqs = np.full((B, 1), BOS, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        out: list[list[int]] = [[] for _ in range(B)]
        for _ in range(max_len):
            nxt = np.argmax(self.decode_step(enc, seqs), axis=-1)
            for b in range(B):
                if not done[b]:
                    if nxt[b] == EOS:
                        done[b] = True
                    else:
                        out[b].append(int(nxt[b]))
            if done.all():
                break
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
        return out

    def _as_batch(self, inputs) -> EncoderBatch:
        if isinstance(inputs, EncoderBatch):
            return inputs
        if isinstance(inputs, MultimodalInput):
            return self.collate([inputs])
        return self.collate(list(inputs))


def pad_targets(targets: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split BOS..EOS targets into padded decoder inputs, gold ids and a validity mask."""
    L = max(len(t) for t in targets) - 1
    B = len(targets)
    dec_in = np.full((B, L), PAD, dtype=np.int64)
    gold = np.full((B, L), PAD, dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    for b, t in enumerate(targets):
        n = len(t) - 1
        dec_in[b, :n] = t[:-1]
        gold[b, :n] = t[1:]
        mask[b, :n] = True
    return dec_in, gold, mask


# ---------------------------------------------------------------------------
# Checkpoint container
#
#   magic    8 bytes   b"GMTCKPT\0"
#   version  uint32 LE
#   hlen     uint64 LE  length of the JSON header
#   header   UTF-8 JSON (sorted keys): config, policy, meta, parameters
#            [{name, shape, frozen, offset, count}]
#   payload  float64 little-endian arrays, row-major, in header order
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"GMTCKPT\0"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, model: MultimodalTransformer, policy: str = "frozen-with-adapters",
                    meta: Mapping | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, t in model.params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "frozen": model.params.is_frozen(name),
                        "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"format": "guidedmt-checkpoint", "version": CHECKPOINT_VERSION,
                         "config": asdict(model.config), "policy": policy, "meta": dict(meta or {}),
                         "parameters": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: str | Path) -> tuple[MultimodalTransformer, dict]:
    """Returns the model and the header (which carries ``policy`` and ``meta``)."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not a guidedmt checkpoint")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    payload = np.frombuffer(raw[20 + hlen:], dtype="<f8")
    reg = ParameterRegistry()
    for e in header["parameters"]:
        arr = payload[e["offset"]:e["offset"] + e["count"]].astype(np.float64).reshape(e["shape"])
        reg.add(e["name"], arr, frozen=e["frozen"])
    return MultimodalTransformer(ModelConfig.from_dict(header["config"]), reg), header
