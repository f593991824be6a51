"""Programmatic sequence scorer used as the desk-scale reward model.

score = sum of keyword weights + sum of pair bonuses over co-present keywords
        - length_penalty * number of tokens

Placeholder tokens carry weight 0 and join no bonus pair, but still count toward
the length. Task files (`data/demo_task.json`) hold the tokens to score plus the
oracle definition:

    {"tokens": [...], "oracle": {"weights": {tok: w}, "bonuses": [[a, b, w], ...],
                                 "length_penalty": p, "placeholder": "<pad>"}}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from errors import ValidationError
from shapley_credit import DEFAULT_PLACEHOLDER


@dataclass(frozen=True)
class ToyRewardOracle:
    weights: Mapping[str, float] = field(default_factory=dict)
    bonuses: Mapping[tuple[str, str], float] = field(default_factory=dict)
    length_penalty: float = 0.0
    placeholder: str = DEFAULT_PLACEHOLDER

    def __call__(self, tokens: Sequence[str]) -> float:
        return toy_oracle_score(self, tokens)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ToyRewardOracle:
        try:
            weights = {str(k): float(v) for k, v in data.get("weights", {}).items()}
            bonuses = {(str(a), str(b)): float(w) for a, b, w in data.get("bonuses", [])}
            penalty = float(data.get("length_penalty", 0.0))
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"malformed toy oracle definition: {exc}") from exc
        return cls(weights, bonuses, penalty, str(data.get("placeholder", DEFAULT_PLACEHOLDER)))


def toy_oracle_score(oracle: ToyRewardOracle, tokens: Sequence[str]) -> float:
    present = set(tokens)
    present.discard(oracle.placeholder)
    score = 0.0
    for tok in tokens:
        if tok != oracle.placeholder:
            score += oracle.weights.get(tok, 0.0)
    for (a, b), bonus in oracle.bonuses.items():
        if a in present and b in present:
            score += bonus
    return score - oracle.length_penalty * len(tokens)


def load_task(path: Path) -> tuple[list[str], ToyRewardOracle]:
    data = json.loads(path.read_text(encoding="utf-8"))
    if "tokens" not in data or "oracle" not in data:
        raise ValidationError(f"{path} needs 'tokens' and 'oracle' entries")
    return [str(t) for t in data["tokens"]], ToyRewardOracle.from_dict(data["oracle"])
