"""Two-stage training: adapter fine-tuning to stability, then gate learning.

Stage 1 runs AdamW on the per-layer deltas until a probe-loss monitor
declares the run stable (W consecutive probe evaluations whose loss moved
less than epsilon). Stage 2 freezes everything, attaches one sigmoid gate
per layer to the frozen deltas, and runs plain gradient descent on the
underlying scores; a layer whose delta the loss cannot do without keeps a
high score.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import math

import numpy as np

from . import autodiff as ad
from .adapters import EXTRA_EMBEDDING, FFT, LORA, AdapterSet, materialize_all
from .autodiff import Tensor, constant
from .data import Batch, Batches
from .errors import ConfigError, NotStableError, NumericError
from .model import LayerId, ModelParams, forward_logits, sequence_loss


@dataclass
class StageOneConfig:
    lr: float = 5e-3
    max_steps: int = 1500
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.1
    warmup_ratio: float = 0.01
    adam_eps: float = 1e-8
    epsilon_rel: float = 1e-3   # stability threshold relative to the first probe loss
    window: int = 20            # consecutive in-threshold probe evaluations required
    probe_every: int = 5

    def __post_init__(self):
        for name in ("max_steps", "epsilon_rel", "window", "probe_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")


@dataclass
class StageTwoConfig:
    s0: float = 4.0
    batches: int = 128
    step_size: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.batches <= 0 or self.step_size < 0:
            raise ConfigError("stage-two batches must be positive and step_size non-negative")


@dataclass
class ImportanceScores:
    scores: dict[LayerId, float]
    s0: float
    step_size: float
    steps: int

    def gates(self) -> dict[LayerId, float]:
        return {lid: float(1.0 / (1.0 + math.exp(-s))) for lid, s in self.scores.items()}


class StabilityMonitor:
    """Declares stability after ``window`` consecutive probe losses whose
    change stays below epsilon.

    Epsilon may be given as an absolute threshold or resolved on the first
    observation as ``epsilon_rel`` times that loss. The first observation
    has no predecessor and counts as in-threshold.
    """

    def __init__(self, window: int, epsilon: Optional[float] = None, epsilon_rel: Optional[float] = None):
        if (epsilon is None) == (epsilon_rel is None):
            raise ConfigError("provide exactly one of epsilon or epsilon_rel")
        if window <= 0:
            raise ConfigError("window must be positive")
        self.window = window
        self.epsilon = epsilon
        self.epsilon_rel = epsilon_rel
        self.history: list[float] = []
        self.consecutive = 0

    def observe(self, probe_loss: float) -> bool:
        if not np.isfinite(probe_loss):
            raise NumericError(f"probe loss is {probe_loss}")
        if self.epsilon is None:
            self.epsilon = self.epsilon_rel * abs(probe_loss)
        delta = 0.0 if not self.history else abs(probe_loss - self.history[-1])
        self.history.append(probe_loss)
        if delta < self.epsilon:
            self.consecutive += 1
        else:
            self.consecutive = 0
        return self.consecutive >= self.window


def _worker_count() -> int:
    raw = os.environ.get("ILA_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def evaluate_probe_loss(params: ModelParams, probe: list[Batch]) -> float:
    """Mean held-out loss over the fixed probe batches.

    Batches may be evaluated on worker threads (ILA_THREADS); results are
    reduced in batch order so the value never depends on thread count.
    """

    def one(batch: Batch) -> float:
        logits = forward_logits(batch.inputs, params)
        return sequence_loss(logits, batch.targets, batch.mask).item()

    workers = _worker_count()
    if workers > 1 and len(probe) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            losses = list(pool.map(one, probe))
    else:
        losses = [one(b) for b in probe]
    return float(np.mean(losses))


class _AdamW:
    def __init__(self, arrays: list[np.ndarray], cfg: StageOneConfig):
        self.arrays = arrays
        self.cfg = cfg
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def lr_at(self, step: int) -> float:
        cfg = self.cfg
        warmup = max(1, int(round(cfg.warmup_ratio * cfg.max_steps)))
        if step < warmup:
            return cfg.lr * (step + 1) / warmup
        progress = (step - warmup) / max(1, cfg.max_steps - warmup)
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))

    def step(self, grads: list[np.ndarray]) -> None:
        cfg = self.cfg
        lr = self.lr_at(self.t)
        self.t += 1
        b1c = 1.0 - cfg.beta1 ** self.t
        b2c = 1.0 - cfg.beta2 ** self.t
        for arr, g, m, v in zip(self.arrays, grads, self.m, self.v):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            arr -= lr * ((m / b1c) / (np.sqrt(v / b2c) + cfg.adam_eps) + cfg.weight_decay * arr)


@dataclass
class _TrainableState:
    """Adapter arrays registered as tape leaves each step."""

    adapters: AdapterSet
    names: list[tuple]          # addressing keys, aligned with arrays
    arrays: list[np.ndarray]


def _collect_trainables(adapters: AdapterSet) -> _TrainableState:
    names, arrays = [], []
    if adapters.mode == LORA:
        for lid, pair in adapters.entries.items():
            names.append(("B", lid))
            arrays.append(pair.B)
            names.append(("A", lid))
            arrays.append(pair.A)
    else:
        for lid, delta in adapters.entries.items():
            names.append(("delta", lid))
            arrays.append(delta)
        for key, delta in adapters.extras.items():
            names.append(("extra", key))
            arrays.append(delta)
    return _TrainableState(adapters, names, arrays)


def _adapted_forward_loss(
    params: ModelParams, state: _TrainableState, batch: Batch
) -> tuple[Tensor, list[Tensor]]:
    """Loss with adapter arrays as tracked leaves; returns (loss, leaves)."""
    tape = ad.Tape()
    leaves = [tape.leaf(arr) for arr in state.arrays]
    by_name = dict(zip(state.names, leaves))
    adapters = state.adapters

    weights: dict[LayerId, Tensor] = {}
    for lid in adapters.entries:
        base = constant(params.weights[lid])
        if adapters.mode == LORA:
            delta = ad.scale(ad.matmul(by_name[("B", lid)], by_name[("A", lid)]), adapters.beta)
        else:
            delta = by_name[("delta", lid)]
        weights[lid] = ad.add(base, delta)

    embedding = None
    gains = None
    if adapters.mode == FFT and adapters.extras:
        if EXTRA_EMBEDDING in adapters.extras:
            embedding = ad.add(constant(params.embedding), by_name[("extra", EXTRA_EMBEDDING)])
        gains = {}
        for key in params.gains:
            if key in adapters.extras:
                gains[key] = ad.add(constant(params.gains[key]), by_name[("extra", key)])

    logits = forward_logits(batch.inputs, params, weights=weights, embedding=embedding, gains=gains)
    return sequence_loss(logits, batch.targets, batch.mask), leaves


def _effective_params(params: ModelParams, adapters: AdapterSet) -> ModelParams:
    from .adapters import merge

    return merge(params, adapters, adapters.layers)


@dataclass
class TrainResult:
    adapters: AdapterSet
    stop_step: int
    trace: list[tuple[int, float]]                  # (step, probe loss)
    snapshots: dict[int, AdapterSet] = field(default_factory=dict)


def run_training(
    params: ModelParams,
    adapters: AdapterSet,
    data: Batches,
    cfg: StageOneConfig,
    monitor: Optional[StabilityMonitor] = None,
    snapshot_every: Optional[int] = None,
    post_stable_steps: int = 0,
    on_post_stable: Optional[Callable[[int, AdapterSet], None]] = None,
) -> TrainResult:
    """Optimize adapter deltas; stop when the monitor fires (or after
    max_steps when no monitor is given).

    With a monitor, failing to stabilize raises :class:`NotStableError`
    carrying the probe trace. ``post_stable_steps`` continues past the
    declared stop point, handing each extra state to ``on_post_stable``.
    """
    adapters = adapters.copy()
    state = _collect_trainables(adapters)
    if not state.arrays:
        return TrainResult(adapters, 0, [])
    opt = _AdamW(state.arrays, cfg)
    trace: list[tuple[int, float]] = []
    snapshots: dict[int, AdapterSet] = {}
    stop_step = None

    step = 0
    while step < cfg.max_steps:
        batch = data.train_batch(step)
        loss, leaves = _adapted_forward_loss(params, state, batch)
        if not np.isfinite(loss.item()):
            raise NumericError("training loss is not finite", step=step, batch_id=batch.batch_id)
        grads = ad.backward(loss)
        opt.step([ad.grad_for(grads, leaf) for leaf in leaves])
        step += 1

        if snapshot_every and (step % snapshot_every == 0 or step == 1):
            snapshots[step] = adapters.copy()
        if monitor is not None and step % cfg.probe_every == 0:
            probe_loss = evaluate_probe_loss(_effective_params(params, adapters), data.probe)
            trace.append((step, probe_loss))
            if monitor.observe(probe_loss):
                stop_step = step
                break

    if monitor is not None and stop_step is None:
        raise NotStableError(
            f"no stability after {cfg.max_steps} steps (epsilon={monitor.epsilon}, window={monitor.window})",
            trace=trace,
        )
    if monitor is None:
        stop_step = step
        trace.append((step, evaluate_probe_loss(_effective_params(params, adapters), data.probe)))

    for extra in range(post_stable_steps):
        batch = data.train_batch(stop_step + extra)
        loss, leaves = _adapted_forward_loss(params, state, batch)
        if not np.isfinite(loss.item()):
            raise NumericError("training loss is not finite", step=stop_step + extra, batch_id=batch.batch_id)
        grads = ad.backward(loss)
        opt.step([ad.grad_for(grads, leaf) for leaf in leaves])
        probe_loss = evaluate_probe_loss(_effective_params(params, adapters), data.probe)
        trace.append((stop_step + extra + 1, probe_loss))
        if on_post_stable is not None:
            on_post_stable(stop_step + extra + 1, adapters.copy())

    return TrainResult(adapters, stop_step, trace, snapshots)


def train_until_stable(
    params: ModelParams,
    adapters: AdapterSet,
    data: Batches,
    monitor: StabilityMonitor,
    cfg: StageOneConfig,
    **kwargs,
) -> TrainResult:
    return run_training(params, adapters, data, cfg, monitor=monitor, **kwargs)


def _frozen_inputs(params: ModelParams, adapters: AdapterSet):
    """Constants reused across every gate step: base weights, dense deltas,
    and the (un-gated) effective extras."""
    base = {lid: constant(params.weights[lid]) for lid in adapters.entries}
    deltas = {lid: constant(d) for lid, d in materialize_all(adapters).items()}
    eff = _effective_params(params, adapters)
    embedding = constant(eff.embedding)
    gains = {key: constant(g) for key, g in eff.gains.items()}
    return base, deltas, embedding, gains


def _gate_step(
    scores: dict[LayerId, float],
    params: ModelParams,
    base: dict[LayerId, Tensor],
    deltas: dict[LayerId, Tensor],
    embedding: Tensor,
    gains: dict[str, Tensor],
    batch: Batch,
    step_size: float,
) -> tuple[dict[LayerId, float], float]:
    tape = ad.Tape()
    leaves = {lid: tape.leaf(s) for lid, s in scores.items()}
    weights = {
        lid: ad.add(base[lid], ad.mul(ad.sigmoid(leaves[lid]), deltas[lid]))
        for lid in scores
    }
    logits = forward_logits(batch.inputs, params, weights=weights, embedding=embedding, gains=gains)
    loss = sequence_loss(logits, batch.targets, batch.mask)
    value = loss.item()
    grads = ad.backward(loss)
    new_scores = {
        lid: float(scores[lid] - step_size * ad.grad_for(grads, leaf)) for lid, leaf in leaves.items()
    }
    return new_scores, value


def gate_gradient_step(
    scores: dict[LayerId, float],
    params: ModelParams,
    adapters: AdapterSet,
    batch: Batch,
    step_size: float,
) -> dict[LayerId, float]:
    """One gradient-descent step on the gate scores for a single batch."""
    base, deltas, embedding, gains = _frozen_inputs(params, adapters)
    new_scores, value = _gate_step(scores, params, base, deltas, embedding, gains, batch, step_size)
    if not np.isfinite(value):
        raise NumericError("gate-step loss is not finite", batch_id=batch.batch_id)
    return new_scores


def learn_importance(
    params: ModelParams,
    adapters: AdapterSet,
    data: Batches,
    cfg: StageTwoConfig,
) -> ImportanceScores:
    """Learn one importance score per adapted layer with everything frozen.

    Scores start at ``s0`` and take one plain gradient step per batch; the
    backbone and adapter matrices receive no gradient at any point.
    """
    base, deltas, embedding, gains = _frozen_inputs(params, adapters)
    scores = {lid: float(cfg.s0) for lid in adapters.entries}
    for i, batch in enumerate(data.sample_batches(cfg.batches, cfg.seed)):
        scores, value = _gate_step(scores, params, base, deltas, embedding, gains, batch, cfg.step_size)
        if not np.isfinite(value):
            raise NumericError("gate-learning loss is not finite", step=i, batch_id=batch.batch_id)
    return ImportanceScores(scores, cfg.s0, cfg.step_size, cfg.batches)
