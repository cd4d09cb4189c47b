"""Next-token distributions, entropies, and anchor decisions.

A decode position is an uncertainty anchor when its next-token entropy
exceeds the policy threshold, the candidate token surface is not in the
symbol whitelist, and branch budget remains. Entropy is in nats,
H = -sum_v p_v * ln(p_v + eps), with zero-probability terms contributing
exactly 0 and the result clamped to be non-negative.

All functions are stateless and safe for unrestricted concurrent use.
"""

from __future__ import annotations

import codecs
from dataclasses import dataclass, field
from typing import FrozenSet, Tuple

import numpy as np

from . import _kernels

# Literal symbol surfaces excluded from anchor status (branching at
# them tends to split inside markup rather than at reasoning pivots).
DEFAULT_WHITELIST: FrozenSet[str] = frozenset({
    "\\", "$", "\n", "\r", " ", "_", "  ", ":",
    "\\(", "\\[", "\\{", "\\]", "\\)", "\\}",
    "(", "[", "{", "}",
})

DEFAULT_EPSILON = 1e-10


@dataclass(frozen=True)
class TokenDistribution:
    """Probability vector over the vocabulary plus its entropy in nats."""

    probs: np.ndarray
    entropy_nats: float


@dataclass(frozen=True)
class AnchorPolicy:
    threshold_nats: float = 1.0
    epsilon: float = DEFAULT_EPSILON
    whitelist: FrozenSet[str] = field(default=DEFAULT_WHITELIST)
    max_branches: int = 8

    def __post_init__(self):
        if self.threshold_nats <= 0:
            raise ValueError("threshold_nats must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_branches < 1:
            raise ValueError("max_branches must be >= 1")


@dataclass(frozen=True)
class AnchorDecision:
    is_anchor: bool
    top2: Tuple[int, int]
    entropy_nats: float


def softmax_entropy(logits: np.ndarray, epsilon: float = DEFAULT_EPSILON) -> TokenDistribution:
    """Max-shifted softmax of the logits and its epsilon-stabilized entropy."""
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    probs = _kernels.softmax(logits, 1.0)
    h = _kernels.entropy(probs, epsilon)
    return TokenDistribution(probs=probs, entropy_nats=float(h))


def top2_ids(probs: np.ndarray) -> Tuple[int, int]:
    """The two highest-probability token ids, ties to the lower id."""
    a, b = _kernels.top2(np.ascontiguousarray(probs, dtype=np.float64))
    return int(a), int(b)


def decide_anchor(dist: TokenDistribution, candidate_token_surface: str,
                  policy: AnchorPolicy, budget_remaining: int) -> AnchorDecision:
    """Threshold + whitelist + budget gate; top2 populated either way."""
    top2 = top2_ids(dist.probs)
    is_anchor = (
        dist.entropy_nats > policy.threshold_nats
        and candidate_token_surface not in policy.whitelist
        and budget_remaining > 0
    )
    return AnchorDecision(is_anchor=is_anchor, top2=top2, entropy_nats=dist.entropy_nats)


def load_whitelist(path: str) -> FrozenSet[str]:
    """One token surface per line; backslash escapes (\\n, \\r) decode."""
    surfaces = set()
    with open(path, "r", encoding="utf-8", newline="") as f:
        for line in f.read().split("\n"):
            if not line:
                continue
            surfaces.add(codecs.decode(line, "unicode_escape"))
    return frozenset(surfaces)


def save_whitelist(path: str, whitelist: FrozenSet[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        for surface in sorted(whitelist):
            f.write(codecs.encode(surface, "unicode_escape").decode("ascii") + "\n")
