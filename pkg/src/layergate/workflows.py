"""Fine-tuning presets that consume layer rankings.

A selector resolves to the set of trainable layers; everything else stays
frozen (no adapter is ever attached, so frozen weights are bit-identical to
the base model by construction). Selector spellings accepted on the command
line mirror the kinds here, e.g. ``all``, ``ila-top:0.30``,
``freeze-bottom:0.25``, ``freeze-top:0.25``, ``freeze-random:0.25@7``,
``freeze-first:7``, ``freeze-last:7``, ``group:ffn``, ``intersection:7``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from . import adapters as adp
from . import training as tr
from .data import Batches
from .errors import ConfigError, ContractError
from .model import LayerId, ModelConfig, ModelParams, fingerprint, forward_logits, layer_ids, sequence_loss, token_accuracy
from .ranking import LayerRanking, intersect_unimportant, select_top_fraction

GROUP_PRESETS = {
    "att": ("W_q", "W_k", "W_v", "W_o"),
    "att2": ("W_q", "W_k", "W_v"),
    "ffn": ("W_up", "W_down", "W_gate"),
    "all": None,  # every linear layer including the head
}


class SelectorKind(Enum):
    ALL = "all"
    RANKED_TOP = "ila-top"                 # train the top fraction by score
    RANKED_BOTTOM_FROZEN = "freeze-bottom"  # freeze the lowest-scoring fraction
    RANKED_TOP_FROZEN = "freeze-top"       # freeze the highest-scoring fraction
    RANDOM_FROZEN = "freeze-random"
    FIRST_FROZEN = "freeze-first"
    LAST_FROZEN = "freeze-last"
    GROUP = "group"
    INTERSECTION = "intersection"


@dataclass
class LayerSelector:
    kind: SelectorKind
    fraction: Optional[float] = None
    count: Optional[int] = None
    seed: Optional[int] = None
    group: Optional[str] = None
    ranking: Optional[LayerRanking] = None
    rankings: Optional[list[LayerRanking]] = None  # INTERSECTION only

    def label(self) -> str:
        k = self.kind.value
        if self.kind in (SelectorKind.RANKED_TOP, SelectorKind.RANKED_BOTTOM_FROZEN, SelectorKind.RANKED_TOP_FROZEN):
            return f"{k}:{self.fraction}"
        if self.kind == SelectorKind.RANDOM_FROZEN:
            amount = self.count if self.count is not None else self.fraction
            return f"{k}:{amount}@{self.seed}"
        if self.kind in (SelectorKind.FIRST_FROZEN, SelectorKind.LAST_FROZEN, SelectorKind.INTERSECTION):
            return f"{k}:{self.count if self.count is not None else self.fraction}"
        if self.kind == SelectorKind.GROUP:
            return f"{k}:{self.group}"
        return k


def parse_selector(spec: str, ranking: Optional[LayerRanking] = None,
                   rankings: Optional[list[LayerRanking]] = None) -> LayerSelector:
    """Parse a command-line selector spelling."""
    name, _, arg = spec.partition(":")
    try:
        kind = SelectorKind(name)
    except ValueError:
        raise ConfigError(f"unknown selector {name!r}") from None
    sel = LayerSelector(kind, ranking=ranking, rankings=rankings)
    if kind == SelectorKind.ALL:
        return sel
    if kind == SelectorKind.GROUP:
        if arg not in GROUP_PRESETS:
            raise ConfigError(f"unknown group preset {arg!r}; choose from {sorted(GROUP_PRESETS)}")
        sel.group = arg
        return sel
    if not arg:
        raise ConfigError(f"selector {name} needs an argument, e.g. {name}:0.25")
    seed = None
    if "@" in arg:
        arg, _, seed_str = arg.partition("@")
        seed = int(seed_str)
    sel.seed = seed
    if "." in arg:
        sel.fraction = float(arg)
    else:
        sel.count = int(arg)
    return sel


def _frozen_count(n: int, fraction: float) -> int:
    """Freeze the complement of the top (1 - fraction) selection.

    Freezing 25% of 29 layers keeps ceil(0.75 * 29) = 22 trainable, so 7
    freeze; the same count is used for random/positional baselines so every
    freezing strategy removes identical capacity.
    """
    if not (0.0 < fraction < 1.0):
        raise ConfigError(f"freeze fraction must be in (0, 1), got {fraction}")
    return n - math.ceil((1.0 - fraction) * n)


def resolve(selector: LayerSelector, config: ModelConfig) -> frozenset[LayerId]:
    """Trainable layer set for a selector; the frozen set is the complement."""
    ids = layer_ids(config)
    n = len(ids)
    kind = selector.kind

    def need_ranking() -> LayerRanking:
        if selector.ranking is None:
            raise ContractError(f"selector {kind.value} requires a ranking")
        if selector.ranking.fingerprint != fingerprint(config):
            raise ContractError("ranking fingerprint does not match the model configuration")
        return selector.ranking

    if kind == SelectorKind.ALL:
        return frozenset(ids)
    if kind == SelectorKind.RANKED_TOP:
        if selector.fraction is None:
            raise ConfigError("ila-top needs a fraction")
        return select_top_fraction(need_ranking(), selector.fraction)
    if kind == SelectorKind.RANKED_BOTTOM_FROZEN:
        if selector.fraction is None:
            raise ConfigError("freeze-bottom needs a fraction")
        return select_top_fraction(need_ranking(), 1.0 - _frozen_count(n, selector.fraction) / n)
    if kind == SelectorKind.RANKED_TOP_FROZEN:
        if selector.fraction is None:
            raise ConfigError("freeze-top needs a fraction")
        k = _frozen_count(n, selector.fraction)
        ranking = need_ranking()
        frozen = {e.layer for e in ranking.entries[:k]}
        return frozenset(ids) - frozen
    if kind in (SelectorKind.RANDOM_FROZEN, SelectorKind.FIRST_FROZEN, SelectorKind.LAST_FROZEN):
        if selector.count is not None:
            k = selector.count
            if not (0 <= k <= n):
                raise ConfigError(f"freeze count {k} out of range for {n} layers")
        else:
            if selector.fraction is None:
                raise ConfigError(f"{kind.value} needs a count or fraction")
            k = _frozen_count(n, selector.fraction)
        if kind == SelectorKind.FIRST_FROZEN:
            frozen = set(ids[:k])
        elif kind == SelectorKind.LAST_FROZEN:
            frozen = set(ids[-k:]) if k else set()
        else:
            if selector.seed is None:
                raise ConfigError("freeze-random needs a seed, e.g. freeze-random:0.25@7")
            rng = np.random.default_rng(selector.seed)
            frozen = {ids[i] for i in rng.choice(n, size=k, replace=False)}
        return frozenset(ids) - frozen
    if kind == SelectorKind.GROUP:
        roles = GROUP_PRESETS[selector.group]
        if roles is None:
            return frozenset(ids)
        return frozenset(lid for lid in ids if lid.role in roles)
    if kind == SelectorKind.INTERSECTION:
        if not selector.rankings or len(selector.rankings) < 2:
            raise ContractError("intersection selector requires at least two rankings")
        for r in selector.rankings:
            if r.fingerprint != fingerprint(config):
                raise ContractError("ranking fingerprint does not match the model configuration")
        if selector.count is None:
            raise ConfigError("intersection needs a bottom-k count")
        frozen = intersect_unimportant(selector.rankings, selector.count)
        return frozenset(ids) - frozen
    raise ConfigError(f"unhandled selector kind {kind}")


@dataclass
class FinetuneConfig:
    mode: str = adp.LORA
    rank: int = 8
    beta: Optional[float] = None
    lr: float = 5e-3
    steps: int = 300
    seed: int = 0
    train_extras: bool = True  # dense mode only


@dataclass
class FinetuneOutcome:
    params: ModelParams
    adapters: adp.AdapterSet
    trainable: frozenset[LayerId]
    eval_loss: float
    token_acc: float
    steps: int
    seconds: float


def evaluate(params: ModelParams, probe) -> tuple[float, float]:
    """Held-out mean loss and token accuracy over the probe batches."""
    losses, accs = [], []
    for batch in probe:
        logits = forward_logits(batch.inputs, params)
        losses.append(sequence_loss(logits, batch.targets, batch.mask).item())
        accs.append(token_accuracy(logits.data, batch.targets, batch.mask))
    return float(np.mean(losses)), float(np.mean(accs))


def finetune_with_selector(
    params: ModelParams,
    data: Batches,
    selector: LayerSelector,
    cfg: FinetuneConfig,
) -> FinetuneOutcome:
    """Fine-tune deltas on the selector's trainable set for a fixed budget."""
    trainable = resolve(selector, params.config)
    start = time.perf_counter()
    if not trainable:
        loss, acc = evaluate(params, data.probe)
        empty = adp.AdapterSet(cfg.mode, {})
        return FinetuneOutcome(params, empty, trainable, loss, acc, 0, time.perf_counter() - start)

    ordered = [lid for lid in layer_ids(params.config) if lid in trainable]
    if cfg.mode == adp.LORA:
        adapters = adp.init_lora(params, rank=cfg.rank, beta=cfg.beta, seed=cfg.seed, layers=ordered)
    else:
        adapters = adp.init_fft(params, layers=ordered, train_extras=cfg.train_extras)
    run_cfg = tr.StageOneConfig(lr=cfg.lr, max_steps=cfg.steps)
    result = tr.run_training(params, adapters, data, run_cfg)
    tuned = adp.merge(params, result.adapters, result.adapters.layers)
    loss, acc = evaluate(tuned, data.probe)
    return FinetuneOutcome(tuned, result.adapters, trainable, loss, acc, cfg.steps, time.perf_counter() - start)


ABLATION_SELECTORS = (
    "all",
    "freeze-bottom:0.25",
    "freeze-random:0.25@{s1}",
    "freeze-random:0.25@{s2}",
    "freeze-first:0.25",
    "freeze-last:0.25",
    "ila-top:0.1",
    "ila-top:0.2",
    "ila-top:0.3",
)


@dataclass
class AblationRow:
    selector: str
    trainable_layers: int
    frozen_layers: int
    eval_loss: float
    token_acc: float
    steps: int
    seconds: float


def run_ablation_suite(
    params: ModelParams,
    data: Batches,
    ranking: LayerRanking,
    cfg: FinetuneConfig,
) -> list[AblationRow]:
    """All-layers baseline, ranked freezes, random/positional freezes, and
    top-fraction selective runs; one row per selector."""
    n = len(layer_ids(params.config))
    rows = []
    for template in ABLATION_SELECTORS:
        spec = template.format(s1=cfg.seed * 10 + 1, s2=cfg.seed * 10 + 2)
        selector = parse_selector(spec, ranking=ranking)
        outcome = finetune_with_selector(params, data, selector, cfg)
        rows.append(
            AblationRow(
                spec,
                len(outcome.trainable),
                n - len(outcome.trainable),
                outcome.eval_loss,
                outcome.token_acc,
                outcome.steps,
                outcome.seconds,
            )
        )
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], path) -> None:
    lines = ["selector,trainable_layers,frozen_layers,eval_loss,token_acc,steps,seconds"]
    for r in rows:
        lines.append(
            f"{r.selector},{r.trainable_layers},{r.frozen_layers},{r.eval_loss!r},{r.token_acc!r},{r.steps},{r.seconds:.3f}"
        )
    from pathlib import Path

    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    tmp.replace(path)
