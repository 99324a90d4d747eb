"""Attention stacks: the plain multi-head layer and its relation-aware variant.

One layer is: per-head scaled dot-product attention, head concatenation, an
output projection, then post-norm residuals around attention and a two-linear
ReLU feed-forward. The relation-aware variant adds a learned per-pair bias
vector to the key and value terms, shared across heads. The same building
blocks serve the bidirectional encoder, the autoregressive decoder, and the
causal language models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class AttentionConfig:
    num_heads: int = 4
    hidden_dim: int = 64
    num_layers: int = 2
    ffn_dim: int = 128
    max_positions: int = 128

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


@dataclass(frozen=True)
class RelationVocabulary:
    """Relation-type ids; id 0 is the reserved ZERO type (zero bias, untrained)."""

    names: tuple[str, ...]

    def __post_init__(self):
        if not self.names or self.names[0] != "ZERO":
            raise ValueError("relation id 0 must be the reserved ZERO type")
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate relation names")

    def __len__(self) -> int:
        return len(self.names)

    def id_of(self, name: str) -> int:
        return self.names.index(name)


def register(params: dict[str, Tensor], name: str, tensor: Tensor) -> Tensor:
    """Add a named tensor to a registry; names must be unique."""
    if name in params:
        raise ValueError(f"tensor {name!r} registered twice")
    tensor.name = name
    params[name] = tensor
    return tensor


def _init_matrix(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    return nm.param(rng.normal(0.0, INIT_STD, size=(rows, cols)))


def init_attention_layer(params: dict[str, Tensor], prefix: str, cfg: AttentionConfig,
                         rng: np.random.Generator, num_relations: int = 0) -> None:
    d, f = cfg.hidden_dim, cfg.ffn_dim
    for w in ("wq", "wk", "wv", "wo"):
        register(params, f"{prefix}.{w}", _init_matrix(rng, d, d))
    register(params, f"{prefix}.ln1.g", nm.param(np.ones(d)))
    register(params, f"{prefix}.ln1.b", nm.param(np.zeros(d)))
    register(params, f"{prefix}.ffn.w1", _init_matrix(rng, d, f))
    register(params, f"{prefix}.ffn.b1", nm.param(np.zeros(f)))
    register(params, f"{prefix}.ffn.w2", _init_matrix(rng, f, d))
    register(params, f"{prefix}.ffn.b2", nm.param(np.zeros(d)))
    register(params, f"{prefix}.ln2.g", nm.param(np.ones(d)))
    register(params, f"{prefix}.ln2.b", nm.param(np.zeros(d)))
    if num_relations:
        table = rng.normal(0.0, INIT_STD, size=(num_relations, cfg.head_dim))
        table[0] = 0.0
        register(params, f"{prefix}.rel", nm.param(table))


def init_cross_attention(params: dict[str, Tensor], prefix: str, cfg: AttentionConfig,
                         rng: np.random.Generator) -> None:
    d = cfg.hidden_dim
    for w in ("wq", "wk", "wv", "wo"):
        register(params, f"{prefix}.{w}", _init_matrix(rng, d, d))
    register(params, f"{prefix}.ln.g", nm.param(np.ones(d)))
    register(params, f"{prefix}.ln.b", nm.param(np.zeros(d)))


def init_encoder(params: dict[str, Tensor], prefix: str, cfg: AttentionConfig,
                 rng: np.random.Generator, num_relations: int = 0) -> None:
    for layer in range(cfg.num_layers):
        init_attention_layer(params, f"{prefix}.l{layer}", cfg, rng, num_relations)


def init_decoder(params: dict[str, Tensor], prefix: str, cfg: AttentionConfig,
                 rng: np.random.Generator) -> None:
    for layer in range(cfg.num_layers):
        init_attention_layer(params, f"{prefix}.l{layer}.sa", cfg, rng)
        init_cross_attention(params, f"{prefix}.l{layer}.ca", cfg, rng)


def _relation_biases(params: dict[str, Tensor], prefix: str, rel_ids: np.ndarray,
                     head_dim: int) -> Tensor:
    """Look up r_ij vectors [n, n, head_dim]; id 0 is pinned to the zero vector."""
    table = params[f"{prefix}.rel"]
    rel_ids = np.asarray(rel_ids, dtype=np.intp)
    if rel_ids.ndim != 2 or rel_ids.shape[0] != rel_ids.shape[1]:
        raise ValueError(f"relation matrix must be square, got {rel_ids.shape}")
    if rel_ids.min() < 0 or rel_ids.max() >= table.shape[0]:
        raise ValueError(
            f"unknown relation id {int(rel_ids.max())} (table has {table.shape[0]} types)")
    row_mask = np.ones((table.shape[0], 1))
    row_mask[0] = 0.0
    return nm.embedding(nm.mul(table, row_mask), rel_ids)


def attention_sublayer(x: Tensor, params: dict[str, Tensor], prefix: str, cfg: AttentionConfig,
                       mask: np.ndarray | None = None,
                       rel_ids: np.ndarray | None = None,
                       kv: Tensor | None = None) -> Tensor:
    """Multi-head attention + residual + LN. `kv` switches to cross-attention."""
    source = x if kv is None else kv
    q_all = nm.matmul(x, params[f"{prefix}.wq"])
    k_all = nm.matmul(source, params[f"{prefix}.wk"])
    v_all = nm.matmul(source, params[f"{prefix}.wv"])
    rel = None
    if rel_ids is not None:
        if kv is not None:
            raise ValueError("relation biases apply to self-attention only")
        rel = _relation_biases(params, prefix, rel_ids, cfg.head_dim)

    inv_sqrt = 1.0 / math.sqrt(cfg.head_dim)
    heads = []
    for h in range(cfg.num_heads):
        lo = h * cfg.head_dim
        q = nm.narrow(q_all, 1, lo, cfg.head_dim)
        k = nm.narrow(k_all, 1, lo, cfg.head_dim)
        v = nm.narrow(v_all, 1, lo, cfg.head_dim)
        scores = nm.matmul(q, nm.transpose(k))
        if rel is not None:
            scores = nm.add(scores, nm.pair_bias_scores(q, rel))
        attn = nm.softmax(nm.scale(scores, inv_sqrt), mask=mask)
        out = nm.matmul(attn, v)
        if rel is not None:
            out = nm.add(out, nm.pair_bias_values(attn, rel))
        heads.append(out)
    z = nm.matmul(nm.concat(heads, axis=1), params[f"{prefix}.wo"])
    ln_g = params.get(f"{prefix}.ln.g", params.get(f"{prefix}.ln1.g"))
    ln_b = params.get(f"{prefix}.ln.b", params.get(f"{prefix}.ln1.b"))
    return nm.layer_norm(nm.add(x, z), ln_g, ln_b)


def _ffn_sublayer(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    hidden = nm.relu(nm.add(nm.matmul(x, params[f"{prefix}.ffn.w1"]), params[f"{prefix}.ffn.b1"]))
    out = nm.add(nm.matmul(hidden, params[f"{prefix}.ffn.w2"]), params[f"{prefix}.ffn.b2"])
    return nm.layer_norm(nm.add(x, out), params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])


def self_attention_layer(x: Tensor, params: dict[str, Tensor], prefix: str, cfg: AttentionConfig,
                         mask: np.ndarray | None = None) -> Tensor:
    """One full encoder layer over a non-empty [n, d] sequence."""
    if x.shape[0] == 0:
        raise ValueError("empty sequence")
    x1 = attention_sublayer(x, params, prefix, cfg, mask=mask)
    return _ffn_sublayer(x1, params, prefix)


def relation_aware_layer(x: Tensor, rel_ids: np.ndarray, params: dict[str, Tensor], prefix: str,
                         cfg: AttentionConfig, mask: np.ndarray | None = None) -> Tensor:
    """Encoder layer with per-pair bias vectors added to key and value terms."""
    if x.shape[0] == 0:
        raise ValueError("empty sequence")
    rel_ids = np.asarray(rel_ids)
    if rel_ids.shape != (x.shape[0], x.shape[0]):
        raise ValueError(f"relation matrix {rel_ids.shape} must cover all {x.shape[0]}^2 pairs")
    x1 = attention_sublayer(x, params, prefix, cfg, mask=mask, rel_ids=rel_ids)
    return _ffn_sublayer(x1, params, prefix)


def run_encoder_stack(x: Tensor, params: dict[str, Tensor], prefix: str, cfg: AttentionConfig,
                      relations: np.ndarray | None = None,
                      mask: np.ndarray | None = None) -> Tensor:
    for layer in range(cfg.num_layers):
        lp = f"{prefix}.l{layer}"
        if relations is None:
            x = self_attention_layer(x, params, lp, cfg, mask=mask)
        else:
            x = relation_aware_layer(x, relations, params, lp, cfg, mask=mask)
    return x


def embed_sequence(token_ids, params: dict[str, Tensor], cfg: AttentionConfig) -> Tensor:
    """Token embedding + learned absolute position embedding."""
    token_ids = np.asarray(token_ids, dtype=np.intp)
    n = token_ids.shape[0]
    if n > cfg.max_positions:
        raise ValueError(f"sequence length {n} exceeds max positions {cfg.max_positions}")
    tok = nm.embedding(params["embed"], token_ids)
    pos = nm.embedding(params["pos"], np.arange(n))
    return nm.add(tok, pos)


def encode(token_ids, params: dict[str, Tensor], cfg: AttentionConfig,
           relations: np.ndarray | None = None, prefix: str = "enc") -> Tensor:
    """Bidirectional encoding of a token id sequence (no causal mask)."""
    x = embed_sequence(token_ids, params, cfg)
    return run_encoder_stack(x, params, prefix, cfg, relations=relations)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def decoder_hidden(prefix_ids, enc_out: Tensor | None, params: dict[str, Tensor],
                   cfg: AttentionConfig, prefix: str = "dec") -> Tensor:
    """Causal decoder states over the whole prefix; cross-attends when enc_out given."""
    prefix_ids = np.asarray(prefix_ids, dtype=np.intp)
    if prefix_ids.shape[0] == 0:
        raise ValueError("empty decoder prefix")
    x = embed_sequence(prefix_ids, params, cfg)
    mask = causal_mask(prefix_ids.shape[0])
    for layer in range(cfg.num_layers):
        if enc_out is None:
            x = self_attention_layer(x, params, f"{prefix}.l{layer}", cfg, mask=mask)
        else:
            x = attention_sublayer(x, params, f"{prefix}.l{layer}.sa", cfg, mask=mask)
            x = attention_sublayer(x, params, f"{prefix}.l{layer}.ca", cfg, kv=enc_out)
            x = _ffn_sublayer(x, params, f"{prefix}.l{layer}.sa")
    return x


def decoder_logits(prefix_ids, enc_out: Tensor | None, params: dict[str, Tensor],
                   cfg: AttentionConfig, prefix: str = "dec") -> Tensor:
    h = decoder_hidden(prefix_ids, enc_out, params, cfg, prefix=prefix)
    return nm.add(nm.matmul(h, params["out.w"]), params["out.b"])


def decode_step(prefix_ids, enc_out: Tensor | None, params: dict[str, Tensor],
                cfg: AttentionConfig, start_id: int | None = None,
                prefix: str = "dec") -> Tensor:
    """Next-token distribution after the given prefix (sums to 1)."""
    prefix_ids = np.asarray(prefix_ids, dtype=np.intp)
    if prefix_ids.shape[0] == 0:
        raise ValueError("empty decoder prefix")
    if start_id is not None and prefix_ids[0] != start_id:
        raise ValueError("decoder prefix must begin with the start token")
    logits = decoder_logits(prefix_ids, enc_out, params, cfg, prefix=prefix)
    last = nm.narrow(logits, 0, prefix_ids.shape[0] - 1, 1)
    return nm.softmax(last)
