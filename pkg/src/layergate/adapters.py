"""Per-layer delta parameterizations and their gated composition.

Two interchangeable modes cover the same surface: low-rank pairs
(delta = beta * B @ A, with A Gaussian and B zero at init so every initial
delta is exactly zero) and dense deltas (one full-shape matrix per layer,
zero at init). Dense mode may also carry un-gated deltas for the embedding
table and norm gains; those extras are never ranked.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

from .errors import ConfigError, ContractError
from .model import LayerId, ModelParams, layer_ids, layer_shape

LORA = "lora"
FFT = "fft"

EXTRA_EMBEDDING = "embedding"


@dataclass
class LoraPair:
    B: np.ndarray  # (d_in, r)
    A: np.ndarray  # (r, d_out)


@dataclass
class AdapterSet:
    mode: str  # LORA or FFT
    entries: dict[LayerId, LoraPair] | dict[LayerId, np.ndarray]
    rank: Optional[int] = None
    beta: float = 1.0
    extras: dict[str, np.ndarray] = field(default_factory=dict)  # FFT only

    @property
    def layers(self) -> list[LayerId]:
        return list(self.entries.keys())

    def copy(self) -> "AdapterSet":
        if self.mode == LORA:
            entries = {lid: LoraPair(p.B.copy(), p.A.copy()) for lid, p in self.entries.items()}
        else:
            entries = {lid: d.copy() for lid, d in self.entries.items()}
        return AdapterSet(self.mode, entries, self.rank, self.beta,
                          {k: v.copy() for k, v in self.extras.items()})


def init_lora(
    params: ModelParams,
    rank: int,
    beta: Optional[float] = None,
    seed: int = 0,
    layers: Optional[Iterable[LayerId]] = None,
) -> AdapterSet:
    """Low-rank adapters on the given layers (default: every linear layer)."""
    if rank < 1:
        raise ConfigError(f"rank must be >= 1, got {rank}")
    chosen = list(layers) if layers is not None else layer_ids(params.config)
    for lid in chosen:
        d_in, d_out = layer_shape(params.config, lid)
        if rank > min(d_in, d_out):
            raise ConfigError(f"rank {rank} exceeds min dimension of {lid} with shape {(d_in, d_out)}")
    if beta is None:
        beta = 2.0 / rank
    if beta <= 0:
        raise ConfigError(f"beta must be positive, got {beta}")
    rng = np.random.default_rng(seed)
    entries = {}
    for lid in chosen:
        d_in, d_out = layer_shape(params.config, lid)
        entries[lid] = LoraPair(
            B=np.zeros((d_in, rank)),
            A=rng.normal(0.0, 0.02, size=(rank, d_out)),
        )
    return AdapterSet(LORA, entries, rank=rank, beta=beta)


def init_fft(
    params: ModelParams,
    layers: Optional[Iterable[LayerId]] = None,
    train_extras: bool = True,
) -> AdapterSet:
    """Dense zero deltas on the given layers; optionally also embedding/gains."""
    chosen = list(layers) if layers is not None else layer_ids(params.config)
    entries = {lid: np.zeros(layer_shape(params.config, lid)) for lid in chosen}
    extras = {}
    if train_extras:
        extras[EXTRA_EMBEDDING] = np.zeros_like(params.embedding)
        for key, gain in params.gains.items():
            extras[key] = np.zeros_like(gain)
    return AdapterSet(FFT, entries, extras=extras)


def materialize_delta(adapters: AdapterSet, layer: LayerId) -> np.ndarray:
    """Dense delta for one layer: beta * B @ A, or the stored dense matrix."""
    if layer not in adapters.entries:
        raise KeyError(f"no adapter for layer {layer}")
    if adapters.mode == LORA:
        pair = adapters.entries[layer]
        return adapters.beta * (pair.B @ pair.A)
    return adapters.entries[layer]


def materialize_all(adapters: AdapterSet) -> dict[LayerId, np.ndarray]:
    return {lid: materialize_delta(adapters, lid) for lid in adapters.entries}


def _with_extras(params: ModelParams, adapters: AdapterSet) -> ModelParams:
    out = ModelParams(params.config, dict(params.weights), params.embedding, dict(params.gains))
    if adapters.extras:
        if EXTRA_EMBEDDING in adapters.extras:
            out.embedding = params.embedding + adapters.extras[EXTRA_EMBEDDING]
        for key in params.gains:
            if key in adapters.extras:
                out.gains[key] = params.gains[key] + adapters.extras[key]
    return out


def apply_masked(
    params: ModelParams,
    adapters: AdapterSet,
    gates: Mapping[LayerId, float],
) -> ModelParams:
    """Effective parameters theta0 + gate * delta per layer.

    Gates must cover every adapted layer and lie in [0, 1]. Extras (dense
    mode) are applied at full strength; they are outside the gated set.
    """
    for lid in adapters.entries:
        if lid not in gates:
            raise ContractError(f"missing gate for adapted layer {lid}")
    for lid, gamma in gates.items():
        if not (0.0 <= gamma <= 1.0):
            raise ContractError(f"gate for {lid} is {gamma}, outside [0, 1]")
    out = _with_extras(params, adapters)
    for lid in adapters.entries:
        out.weights[lid] = params.weights[lid] + gates[lid] * materialize_delta(adapters, lid)
    return out


def merge(params: ModelParams, adapters: AdapterSet, keep: Iterable[LayerId]) -> ModelParams:
    """Hard-mask composition: add deltas only for layers in ``keep``."""
    keep = set(keep)
    unknown = keep - set(adapters.entries)
    if unknown:
        raise KeyError(f"layers not present in adapter set: {sorted(map(str, unknown))}")
    out = _with_extras(params, adapters)
    for lid in keep:
        out.weights[lid] = params.weights[lid] + materialize_delta(adapters, lid)
    return out
