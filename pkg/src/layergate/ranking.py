"""Layer rankings, top-fraction selection, and set-overlap statistics.

A ranking is an ordered list of (layer, score) pairs tied to one model
fingerprint; rankings from different architectures never compare. The
"important" set at fraction p is the ceil(p * N) highest-scoring layers,
with ties broken by (block, role) so selection is total and deterministic.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .model import HEAD_BLOCK, LayerId, ModelConfig, fingerprint, tie_key
from .training import ImportanceScores


@dataclass(frozen=True)
class RankedLayer:
    layer: LayerId
    score: float


@dataclass
class LayerRanking:
    entries: list[RankedLayer]  # descending score, ties by (block, role)
    fingerprint: str
    provenance: dict = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.entries)

    def layers(self) -> list[LayerId]:
        return [e.layer for e in self.entries]

    def scores(self) -> dict[LayerId, float]:
        return {e.layer: e.score for e in self.entries}


def build_ranking(
    scores: ImportanceScores | dict[LayerId, float],
    config: ModelConfig,
    provenance: dict | None = None,
) -> LayerRanking:
    raw = scores.scores if isinstance(scores, ImportanceScores) else scores
    entries = [
        RankedLayer(lid, float(s))
        for lid, s in sorted(raw.items(), key=lambda kv: (-kv[1], tie_key(kv[0])))
    ]
    return LayerRanking(entries, fingerprint(config), dict(provenance or {}))


def select_top_fraction(ranking: LayerRanking, p: float) -> frozenset[LayerId]:
    """The ceil(p * N) highest-scoring layers."""
    if not (0.0 < p <= 1.0):
        raise ConfigError(f"selection fraction must be in (0, 1], got {p}")
    count = math.ceil(p * ranking.n_layers)
    return frozenset(e.layer for e in ranking.entries[:count])


def bottom_layers(ranking: LayerRanking, k: int) -> frozenset[LayerId]:
    """The k lowest-scoring layers."""
    if not (0 <= k <= ranking.n_layers):
        raise ConfigError(f"k={k} out of range for {ranking.n_layers} layers")
    if k == 0:
        return frozenset()
    return frozenset(e.layer for e in ranking.entries[-k:])


def jaccard(s1: Iterable, s2: Iterable) -> float:
    """|intersection| / |union|; two empty sets count as identical (1.0)."""
    a, b = set(s1), set(s2)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def _check_same_fingerprint(rankings: Sequence[LayerRanking]) -> None:
    prints = {r.fingerprint for r in rankings}
    if len(prints) > 1:
        raise ContractError(f"rankings come from different models: {sorted(prints)}")


def compare_rankings(rankings: Sequence[LayerRanking], p: float) -> np.ndarray:
    """Pairwise top-fraction overlap matrix (symmetric, unit diagonal)."""
    _check_same_fingerprint(rankings)
    sets = [select_top_fraction(r, p) for r in rankings]
    n = len(sets)
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = jaccard(sets[i], sets[j])
    return out


def intersect_unimportant(rankings: Sequence[LayerRanking], k: int) -> frozenset[LayerId]:
    """Layers in the bottom-k of every ranking."""
    if len(rankings) < 2:
        raise ContractError("need at least two rankings to intersect")
    _check_same_fingerprint(rankings)
    out = bottom_layers(rankings[0], k)
    for r in rankings[1:]:
        out &= bottom_layers(r, k)
    return out


@functools.lru_cache(maxsize=32)
def random_overlap_baseline(n_layers: int, p: float, trials: int = 20000, seed: int = 20240) -> float:
    """Expected overlap of two independent uniform top-fraction subsets.

    Computed once by seeded simulation; used as the floor that learned
    rankings must clear to count as agreeing beyond chance.
    """
    rng = np.random.default_rng(seed)
    keep = math.ceil(p * n_layers)
    total = 0.0
    for _ in range(trials):
        a = set(rng.choice(n_layers, size=keep, replace=False).tolist())
        b = set(rng.choice(n_layers, size=keep, replace=False).tolist())
        total += len(a & b) / len(a | b)
    return total / trials


def _block_json(lid: LayerId):
    return "head" if lid.is_head else lid.block


def _layer_from_json(block, role: str) -> LayerId:
    return LayerId(HEAD_BLOCK if block == "head" else int(block), role)


def save_ranking(ranking: LayerRanking, path) -> None:
    payload = {
        "fingerprint": ranking.fingerprint,
        "provenance": ranking.provenance,
        "layers": [
            {"block": _block_json(e.layer), "role": e.layer.role, "score": e.score}
            for e in ranking.entries
        ],
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    tmp.replace(path)


def load_ranking(path) -> LayerRanking:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    entries = [
        RankedLayer(_layer_from_json(obj["block"], obj["role"]), float(obj["score"]))
        for obj in payload["layers"]
    ]
    return LayerRanking(entries, payload["fingerprint"], payload.get("provenance", {}))


def export_heatmap(ranking: LayerRanking, path, p: float = 0.75) -> None:
    """CSV of per-layer scores: block, role, score, gate, rank, important."""
    important = select_top_fraction(ranking, p)
    lines = ["block,role,score,gate,rank,important"]
    for rank, e in enumerate(ranking.entries, start=1):
        gate = 1.0 / (1.0 + math.exp(-e.score))
        lines.append(
            f"{_block_json(e.layer)},{e.layer.role},{e.score!r},{gate!r},{rank},{int(e.layer in important)}"
        )
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    tmp.replace(path)
