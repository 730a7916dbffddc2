"""A small decoder-only transformer whose linear layers are the unit of gating.

Each block carries seven named linear layers (W_q, W_k, W_v, W_o for
attention; W_up, W_gate, W_down for the SwiGLU feed-forward), plus a single
untied output head W_head, for 7 * blocks + 1 layers total. Norm gains and
the embedding table are parameters but never gated or ranked.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, constant
from .errors import ConfigError, ContractError, DimensionError

BLOCK_ROLES = ("W_q", "W_k", "W_v", "W_o", "W_up", "W_gate", "W_down")
HEAD_ROLE = "W_head"
HEAD_BLOCK = -1  # sentinel block index for the output head


@dataclass(frozen=True)
class LayerId:
    """Identity of one named linear layer: block index plus role name."""

    block: int
    role: str

    @property
    def is_head(self) -> bool:
        return self.block == HEAD_BLOCK

    def label(self) -> str:
        return HEAD_ROLE if self.is_head else f"block{self.block}.{self.role}"

    def __str__(self) -> str:
        return self.label()


HEAD_LAYER = LayerId(HEAD_BLOCK, HEAD_ROLE)


def tie_key(lid: LayerId) -> tuple:
    """Deterministic tie-break order: (block, role) lexicographic, head last."""
    return (1, 0, lid.role) if lid.is_head else (0, lid.block, lid.role)


@dataclass(frozen=True)
class ModelConfig:
    blocks: int = 4
    d_model: int = 64
    heads: int = 4
    d_ffn: int = 128
    vocab: int = 260
    seq_len: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("blocks", "d_model", "heads", "d_ffn", "vocab", "seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by heads={self.heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    @property
    def n_layers(self) -> int:
        return 7 * self.blocks + 1


def layer_ids(config: ModelConfig) -> list[LayerId]:
    """All linear layers in architectural order: blocks ascending, head last."""
    out = [LayerId(b, role) for b in range(config.blocks) for role in BLOCK_ROLES]
    out.append(HEAD_LAYER)
    return out


def layer_shape(config: ModelConfig, lid: LayerId) -> tuple[int, int]:
    d, f, v = config.d_model, config.d_ffn, config.vocab
    if lid.is_head:
        return (d, v)
    return {
        "W_q": (d, d),
        "W_k": (d, d),
        "W_v": (d, d),
        "W_o": (d, d),
        "W_up": (d, f),
        "W_gate": (d, f),
        "W_down": (f, d),
    }[lid.role]


def gain_keys(config: ModelConfig) -> list[str]:
    keys = []
    for b in range(config.blocks):
        keys.append(f"block{b}.attn_norm")
        keys.append(f"block{b}.ffn_norm")
    keys.append("final_norm")
    return keys


def fingerprint(config: ModelConfig) -> str:
    """Stable hash of the architecture; rankings are only comparable within it."""
    payload = json.dumps(
        {k: getattr(config, k) for k in ("blocks", "d_model", "heads", "d_ffn", "vocab", "seq_len", "seed")},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class ModelParams:
    config: ModelConfig
    weights: dict[LayerId, np.ndarray]
    embedding: np.ndarray
    gains: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {lid: w.copy() for lid, w in self.weights.items()},
            self.embedding.copy(),
            {k: g.copy() for k, g in self.gains.items()},
        )


def init_model(config: ModelConfig) -> ModelParams:
    """Scaled-Gaussian init (std 0.02; residual output projections scaled down)."""
    rng = np.random.default_rng(config.seed)
    std = 0.02
    out_std = std / math.sqrt(2 * config.blocks)
    embedding = rng.normal(0.0, std, size=(config.vocab, config.d_model))
    weights = {}
    for lid in layer_ids(config):
        s = out_std if lid.role in ("W_o", "W_down") else std
        weights[lid] = rng.normal(0.0, s, size=layer_shape(config, lid))
    gains = {k: np.ones(config.d_model) for k in gain_keys(config)}
    return ModelParams(config, weights, embedding, gains)


def _positions(t: int, d: int) -> np.ndarray:
    # fixed sinusoidal encodings; never trained, never ranked
    pos = np.arange(t)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d)
    out = np.zeros((t, d))
    out[:, 0::2] = np.sin(angle)
    out[:, 1::2] = np.cos(angle)
    return out


_POS_CACHE: dict[tuple[int, int, int], np.ndarray] = {}
_MASK_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def _positions_bc(b: int, t: int, d: int) -> np.ndarray:
    key = (b, t, d)
    if key not in _POS_CACHE:
        _POS_CACHE[key] = np.broadcast_to(_positions(t, d), (b, t, d)).copy()
    return _POS_CACHE[key]


def _causal_mask_bc(b: int, h: int, t: int) -> np.ndarray:
    key = (b, h, t)
    if key not in _MASK_CACHE:
        m = np.where(np.arange(t)[None, :] <= np.arange(t)[:, None], 0.0, -1e9)
        _MASK_CACHE[key] = np.broadcast_to(m, (b, h, t, t)).copy()
    return _MASK_CACHE[key]


def forward_logits(
    tokens: np.ndarray,
    params: ModelParams,
    weights: Optional[Mapping[LayerId, Tensor]] = None,
    embedding: Optional[Tensor] = None,
    gains: Optional[Mapping[str, Tensor]] = None,
) -> Tensor:
    """Causal forward pass producing logits [batch, time, vocab].

    ``weights``/``embedding``/``gains`` override individual parameters with
    (possibly tape-tracked) tensors; anything absent falls back to the stored
    arrays as constants. This one entry point serves plain evaluation,
    adapter training, and gate learning.
    """
    cfg = params.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise DimensionError(f"tokens must be [batch, time], got {tokens.shape}")
    b, t = tokens.shape
    if t > cfg.seq_len:
        raise DimensionError(f"sequence length {t} exceeds seq_len={cfg.seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise IndexError(f"token index out of range for vocab={cfg.vocab}")

    def w(lid: LayerId) -> Tensor:
        if weights is not None and lid in weights:
            val = weights[lid]
            return val if isinstance(val, Tensor) else constant(val)
        return constant(params.weights[lid])

    def g(key: str) -> Tensor:
        if gains is not None and key in gains:
            val = gains[key]
            return val if isinstance(val, Tensor) else constant(val)
        return constant(params.gains[key])

    emb = embedding if embedding is not None else constant(params.embedding)
    h_dim, n_heads = cfg.head_dim, cfg.heads

    def project(x3: Tensor, weight: Tensor) -> Tensor:
        # [b, t, d_in] @ [d_in, d_out] via a flat 2-d matmul
        d_in, d_out = weight.shape
        return ad.reshape(ad.matmul(ad.reshape(x3, (b * t, d_in)), weight), (b, t, d_out))

    x = ad.add(ad.gather_rows(emb, tokens), constant(_positions_bc(b, t, cfg.d_model)))
    mask = constant(_causal_mask_bc(b, n_heads, t))
    inv_sqrt = 1.0 / math.sqrt(h_dim)

    for blk in range(cfg.blocks):
        xn = ad.rmsnorm(x, g(f"block{blk}.attn_norm"))

        def heads_view(m: Tensor) -> Tensor:
            return ad.transpose(ad.reshape(m, (b, t, n_heads, h_dim)), (0, 2, 1, 3))

        q = heads_view(project(xn, w(LayerId(blk, "W_q"))))
        k = heads_view(project(xn, w(LayerId(blk, "W_k"))))
        v = heads_view(project(xn, w(LayerId(blk, "W_v"))))

        att = ad.add(ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), inv_sqrt), mask)
        att = ad.softmax_lastdim(att)
        ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, t, cfg.d_model))
        x = ad.add(x, project(ctx, w(LayerId(blk, "W_o"))))

        xn2 = ad.rmsnorm(x, g(f"block{blk}.ffn_norm"))
        up = project(xn2, w(LayerId(blk, "W_up")))
        gate = ad.silu(project(xn2, w(LayerId(blk, "W_gate"))))
        x = ad.add(x, project(ad.mul(up, gate), w(LayerId(blk, "W_down"))))

    xn = ad.rmsnorm(x, g("final_norm"))
    return project(xn, w(HEAD_LAYER))


def sequence_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean cross-entropy over masked target positions only."""
    b, t, v = logits.shape
    idx = np.flatnonzero(np.asarray(mask))
    if idx.size == 0:
        raise ContractError("sequence_loss: mask selects no positions")
    rows = ad.gather_rows(ad.reshape(logits, (b * t, v)), idx)
    return ad.softmax_cross_entropy(rows, np.asarray(targets).ravel()[idx])


def token_accuracy(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> float:
    """Fraction of masked positions whose argmax matches the target."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    pred = np.argmax(logits, axis=-1)
    return float(np.mean(pred[mask] == np.asarray(targets)[mask]))
