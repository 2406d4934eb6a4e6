"""Residual hierarchical interactive scoring network.

Pipeline per batch::

    X       = Encoder(proj(gop) + phone_emb + pos_emb)
    H       = InteractiveAttention(X)          -> h_phn, h_word, h_utt
    s_phn   = Heads(Conv(X + h_phn))
    s_word  = span_mean(Heads(Conv(AspectAttn(X + s_phn + h_word))))
    s_utt   = Heads(Conv(Decoder(queries, X + proj(s_word) + h_utt)))

The ablation flags remove terms from these sums but never remove
parameters, so a checkpoint loads under any flag combination.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as tn
from .data import Batch
from .gop import GOP_DIM, N_PHONES
from .tensor import Tensor

CHECKPOINT_FORMAT = "hia-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    embed_dim: int = 48
    enc_layers: int = 3
    dec_layers: int = 3
    n_heads: int = 1
    conv_kernel: int = 5
    conv_layers: int = 1
    dropout: float = 0.1
    max_len: int = 50
    n_phones: int = N_PHONES
    word_aspects: int = 3
    utt_aspects: int = 5
    ffn_mult: int = 4
    use_iam_phn: bool = True
    use_iam_word: bool = True
    use_iam_utt: bool = True
    use_residual: bool = True
    use_hierarchy: bool = True
    # learned 1 -> D map for the phoneme score instead of broadcasting it
    phone_score_proj: bool = False

    def validate(self) -> "ModelConfig":
        if self.conv_kernel % 2 == 0 or self.conv_kernel < 1:
            raise ValueError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.embed_dim < 1 or self.embed_dim % self.n_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if self.enc_layers < 0 or self.dec_layers < 0 or self.conv_layers < 0:
            raise ValueError("layer counts must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.n_phones != N_PHONES:
            raise ValueError(f"the GOP layout fixes n_phones at {N_PHONES}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class InteractionHeads:
    h_phn: Tensor
    h_word: Tensor
    h_utt: Tensor
    joint: Tensor  # (B, 3, D) feed-forward output before the per-level projections


@dataclass
class ScoreSet:
    s_phn: Tensor   # (B, T)
    s_word: Tensor  # (B, W, 3)
    s_utt: Tensor   # (B, 5)


# ---------------------------------------------------------------------------
# layers


class Module:
    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")


def _param(data) -> Tensor:
    return Tensor(np.ascontiguousarray(data, dtype=np.float64), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / math.sqrt(d_in)
        self.W = _param(rng.uniform(-bound, bound, (d_in, d_out)))
        self.b = _param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return tn.linear(x, self.W, self.b)


class LayerNorm(Module):
    def __init__(self, *shape: int):
        self.gamma = _param(np.ones(shape))
        self.beta = _param(np.zeros(shape))

    def __call__(self, x: Tensor) -> Tensor:
        return tn.layer_norm(x, self.gamma, self.beta, 1e-5)


class Conv1d(Module):
    def __init__(self, k: int, d_in: int, d_out: int, rng: np.random.Generator):
        bound = 1.0 / math.sqrt(k * d_in)
        self.kernels = _param(rng.uniform(-bound, bound, (k, d_in, d_out)))
        self.bias = _param(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return tn.conv1d_same(x, self.kernels, self.bias)


class RegressionHeads(Module):
    """``n`` independent layer-norm + D->1 linear heads over a (..., n, D) input."""

    def __init__(self, n: int, d: int, rng: np.random.Generator):
        self.norm = LayerNorm(n, d)
        bound = 1.0 / math.sqrt(d)
        self.W = _param(rng.uniform(-bound, bound, (n, d)))
        self.b = _param(np.zeros(n))

    def __call__(self, x: Tensor) -> Tensor:
        return tn.tsum(tn.mul(self.norm(x), self.W), axis=-1) + self.b


class Attention(Module):
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        self.n_heads = n_heads
        self.q = Linear(d, d, rng)
        # a key bias only shifts every score of a query equally, which softmax ignores
        self.k = Linear(d, d, rng, bias=False)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)

    def _split(self, x: Tensor) -> Tensor:
        *lead, t, d = x.shape
        h = self.n_heads
        return tn.swapaxes(tn.reshape(x, (*lead, t, h, d // h)), -2, -3)

    def __call__(self, query: Tensor, context: Tensor, additive_mask: np.ndarray | None = None) -> Tensor:
        q, k, v = self.q(query), self.k(context), self.v(context)
        if self.n_heads == 1:
            out = tn.attention(q, k, v, additive_mask)
        else:
            mask = None if additive_mask is None else additive_mask[..., None, :, :]
            out = tn.attention(self._split(q), self._split(k), self._split(v), mask)
            out = tn.swapaxes(out, -2, -3)
            out = tn.reshape(out, query.shape)
        return self.o(out)


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d, rng)

    def __call__(self, x: Tensor, drop) -> Tensor:
        return self.fc2(drop(tn.relu(self.fc1(x))))


class EncoderLayer(Module):
    def __init__(self, d: int, n_heads: int, hidden: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(d)
        self.attn = Attention(d, n_heads, rng)
        self.norm2 = LayerNorm(d)
        self.ffn = FeedForward(d, hidden, rng)

    def __call__(self, x: Tensor, additive_mask, drop) -> Tensor:
        h = self.norm1(x)
        x = x + drop(self.attn(h, h, additive_mask))
        return x + drop(self.ffn(self.norm2(x), drop))


class DecoderLayer(Module):
    def __init__(self, d: int, n_heads: int, hidden: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(d)
        self.self_attn = Attention(d, n_heads, rng)
        self.norm2 = LayerNorm(d)
        self.cross_attn = Attention(d, n_heads, rng)
        self.norm3 = LayerNorm(d)
        self.ffn = FeedForward(d, hidden, rng)

    def __call__(self, q: Tensor, memory: Tensor, memory_mask, drop) -> Tensor:
        h = self.norm1(q)
        q = q + drop(self.self_attn(h, h))
        q = q + drop(self.cross_attn(self.norm2(q), memory, memory_mask))
        return q + drop(self.ffn(self.norm3(q), drop))


# ---------------------------------------------------------------------------
# the network


class InteractiveAttention(Module):
    """Per-level queries from pooled X, mixed by self-attention, then read from X."""

    LEVELS = ("phn", "word", "utt")

    def __init__(self, d: int, n_heads: int, hidden: int, rng: np.random.Generator):
        self.query_phn = Linear(d, d, rng)
        self.query_word = Linear(d, d, rng)
        self.query_utt = Linear(d, d, rng)
        self.norm1 = LayerNorm(d)
        self.self_attn = Attention(d, n_heads, rng)
        self.norm2 = LayerNorm(d)
        self.cross_attn = Attention(d, n_heads, rng)
        self.norm3 = LayerNorm(d)
        self.ffn = FeedForward(d, hidden, rng)
        self.out_phn = Linear(d, d, rng)
        self.out_word = Linear(d, d, rng)
        self.out_utt = Linear(d, d, rng)

    def __call__(self, x: Tensor, mask: np.ndarray, drop) -> InteractionHeads:
        pooled = tn.masked_mean(x, mask)
        q = tn.stack([self.query_phn(pooled), self.query_word(pooled), self.query_utt(pooled)], axis=1)
        h = self.norm1(q)
        q = q + drop(self.self_attn(h, h))
        q = q + drop(self.cross_attn(self.norm2(q), x, tn.key_mask(mask)))
        joint = q + drop(self.ffn(self.norm3(q), drop))
        return InteractionHeads(
            h_phn=self.out_phn(joint[:, 0]),
            h_word=self.out_word(joint[:, 1]),
            h_utt=self.out_utt(joint[:, 2]),
            joint=joint,
        )


class HIAModel(Module):
    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        cfg = (cfg or ModelConfig()).validate()
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0x5EED])
        D, k = cfg.embed_dim, cfg.conv_kernel
        hidden = cfg.ffn_mult * D

        self.gop_proj = Linear(GOP_DIM, D, rng)
        self.phone_emb = _param(rng.normal(0.0, 1.0 / math.sqrt(D), (cfg.n_phones + 1, D)))
        self.pos_emb = _param(rng.normal(0.0, 0.02, (cfg.max_len, D)))
        self.encoder = [EncoderLayer(D, cfg.n_heads, hidden, rng) for _ in range(cfg.enc_layers)]
        self.enc_norm = LayerNorm(D)

        self.iam = InteractiveAttention(D, cfg.n_heads, hidden, rng)

        self.phn_conv = [Conv1d(k, D, D, rng) for _ in range(cfg.conv_layers)]
        self.phn_head = RegressionHeads(1, D, rng)

        if cfg.phone_score_proj:
            self.phn_score_proj = Linear(1, D, rng)
        self.aspect_proj = Linear(D, cfg.word_aspects * D, rng)
        self.aspect_norm = LayerNorm(D)
        self.aspect_attn = Attention(D, cfg.n_heads, rng)
        self.word_conv = [Conv1d(k, D, D, rng)
                          for _ in range(cfg.conv_layers * cfg.word_aspects)]
        self.word_head = RegressionHeads(cfg.word_aspects, D, rng)

        self.word_score_proj = Linear(cfg.word_aspects, D, rng)
        self.utt_queries = _param(rng.normal(0.0, 1.0, (cfg.utt_aspects, D)))
        self.decoder = [DecoderLayer(D, cfg.n_heads, hidden, rng) for _ in range(cfg.dec_layers)]
        self.dec_norm = LayerNorm(D)
        self.utt_conv = [Conv1d(k, D, D, rng) for _ in range(cfg.conv_layers)]
        self.utt_head = RegressionHeads(cfg.utt_aspects, D, rng)

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    # -- forward pieces -----------------------------------------------------

    @staticmethod
    def _dropper(rate: float, training: bool, rng: np.random.Generator | None):
        if not training or rate == 0.0:
            return lambda t: t
        return lambda t: tn.dropout(t, rate, rng, True)

    def encode(self, batch: Batch, drop=None) -> Tensor:
        drop = drop or (lambda t: t)
        B, T = batch.phones.shape
        if T > self.cfg.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len {self.cfg.max_len}")
        x = self.gop_proj(Tensor(batch.gop))
        x = x + tn.embedding(self.phone_emb, batch.phones) + self.pos_emb[:T]
        x = drop(x)
        amask = tn.key_mask(batch.phone_mask)
        for layer in self.encoder:
            x = layer(x, amask, drop)
        return self.enc_norm(x)

    def interactive_attention(self, x: Tensor, mask: np.ndarray, drop=None) -> InteractionHeads:
        return self.iam(x, mask, drop or (lambda t: t))

    @staticmethod
    def _masked(x: Tensor, mask: np.ndarray) -> Tensor:
        return tn.mul(x, Tensor(mask[..., None]))

    def _conv_stack(self, x: Tensor, convs, mask: np.ndarray | None) -> Tensor:
        for conv in convs:
            if mask is not None:
                x = self._masked(x, mask)
            x = conv(x)
        return x

    def score_phoneme(self, x: Tensor, heads: InteractionHeads, batch: Batch) -> Tensor:
        f = x
        if self.cfg.use_iam_phn:
            f = f + heads.h_phn[:, None, :]
        f = self._conv_stack(f, self.phn_conv, batch.phone_mask)
        B, T, D = f.shape
        return tn.reshape(self.phn_head(tn.reshape(f, (B, T, 1, D))), (B, T))

    def score_word(self, x: Tensor, s_phn: Tensor, heads: InteractionHeads, batch: Batch,
                   drop=None) -> Tensor:
        drop = drop or (lambda t: t)
        cfg = self.cfg
        B, T, D = x.shape
        terms = []
        if cfg.use_residual:
            terms.append(x)
        if cfg.use_hierarchy:
            s = tn.reshape(s_phn, (B, T, 1))
            terms.append(self.phn_score_proj(s) if cfg.phone_score_proj else s)
        if cfg.use_iam_word:
            terms.append(heads.h_word[:, None, :])
        x_word = _sum_terms(terms, (B, T, D))

        A = cfg.word_aspects
        a = tn.reshape(self.aspect_proj(x_word), (B, T, A, D))
        h = self.aspect_norm(a)
        a = a + drop(self.aspect_attn(h, h))
        per_aspect = []
        for i in range(A):
            convs = self.word_conv[i * cfg.conv_layers:(i + 1) * cfg.conv_layers]
            per_aspect.append(self._conv_stack(a[:, :, i], convs, batch.phone_mask))
        pos_scores = self.word_head(tn.stack(per_aspect, axis=2))  # (B, T, A)
        return tn.matmul(Tensor(batch.word_pool), pos_scores)

    def score_utterance(self, x: Tensor, s_word: Tensor, heads: InteractionHeads, batch: Batch,
                        drop=None) -> Tensor:
        drop = drop or (lambda t: t)
        cfg = self.cfg
        B, T, D = x.shape
        terms = []
        if cfg.use_residual:
            terms.append(x)
        if cfg.use_hierarchy:
            expanded = tn.matmul(Tensor(batch.word_expand), s_word)  # (B, T, 3)
            terms.append(self._masked(self.word_score_proj(expanded), batch.phone_mask))
        if cfg.use_iam_utt:
            terms.append(heads.h_utt[:, None, :])
        x_utt = _sum_terms(terms, (B, T, D))

        q = tn.add(Tensor(np.zeros((B, 1, 1))), self.utt_queries)
        amask = tn.key_mask(batch.phone_mask)
        for layer in self.decoder:
            q = layer(q, x_utt, amask, drop)
        q = self.dec_norm(q)
        q = self._conv_stack(q, self.utt_conv, None)
        return self.utt_head(q)

    def forward(self, batch: Batch, training: bool = False,
                rng: np.random.Generator | None = None) -> ScoreSet:
        drop = self._dropper(self.cfg.dropout, training, rng)
        x = self.encode(batch, drop)
        heads = self.interactive_attention(x, batch.phone_mask, drop)
        s_phn = self.score_phoneme(x, heads, batch)
        s_word = self.score_word(x, s_phn, heads, batch, drop)
        s_utt = self.score_utterance(x, s_word, heads, batch, drop)
        return ScoreSet(s_phn, s_word, s_utt)

    __call__ = forward

    # -- checkpoints --------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"checkpoint shape for {name}: {arr.shape} != {p.shape}")
            p.data[...] = arr


def _sum_terms(terms: list[Tensor], shape) -> Tensor:
    if not terms:
        return Tensor(np.zeros(shape))
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    if out.shape != tuple(shape):
        out = tn.add(out, Tensor(np.zeros(shape)))
    return out


def save_checkpoint(path, model: HIAModel, epoch: int = 0, best_metric: float | None = None,
                    extra: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "epoch": epoch,
        "best_metric": best_metric,
        "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                   for k, v in model.state_dict().items()},
    }
    if extra:
        payload["extra"] = extra
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path, **overrides) -> tuple[HIAModel, dict]:
    """Rebuild a model from a checkpoint; ``overrides`` may change ablation flags."""
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not a checkpoint ({exc})") from None
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    cfg = ModelConfig.from_dict({**payload["config"], **overrides})
    model = HIAModel(cfg)
    state = {}
    for name, rec in payload["params"].items():
        arr = np.asarray(rec["data"], dtype=np.float64)
        if arr.size != math.prod(rec["shape"]):
            raise ValueError(f"{path}: {name} has {arr.size} values for shape {rec['shape']}")
        state[name] = arr.reshape(rec["shape"])
    model.load_state_dict(state)
    meta = {k: payload.get(k) for k in ("epoch", "best_metric", "extra")}
    return model, meta
