"""Token-dropping policies: hard tail sampling for stage 1, Bernoulli gates
for stage 2, and the inference-time threshold / expected-count / fixed-count
rules plus the EoS position rule used by the AR model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class InferencePolicy:
    kind: str                 # "threshold" | "expected_count" | "fixed_count"
    tau: float = 0.5
    extra: int = 0
    k: int = 1

    def __post_init__(self):
        if self.kind not in ("threshold", "expected_count", "fixed_count"):
            raise PolicyError(f"unknown policy kind {self.kind!r}")
        if self.kind == "threshold" and not (0.0 < self.tau < 1.0):
            raise PolicyError(f"threshold tau must be in (0,1), got {self.tau}")
        if self.kind == "fixed_count" and self.k < 1:
            raise PolicyError(f"fixed count must be >= 1, got {self.k}")

    @staticmethod
    def parse(text: str) -> "InferencePolicy":
        """CLI syntax: threshold:0.5 | expected:+4 | fixed:12."""
        try:
            name, _, arg = text.partition(":")
            if name == "threshold":
                return InferencePolicy("threshold", tau=float(arg))
            if name == "expected":
                return InferencePolicy("expected_count", extra=int(arg))
            if name == "fixed":
                return InferencePolicy("fixed_count", k=int(arg))
        except ValueError:
            raise PolicyError(f"bad policy argument in {text!r}") from None
        raise PolicyError(f"unknown policy {text!r} (expected threshold:T | expected:+N | fixed:K)")

    def describe(self) -> str:
        if self.kind == "threshold":
            return f"threshold:{self.tau:g}"
        if self.kind == "expected_count":
            return f"expected:{self.extra:+d}"
        return f"fixed:{self.k}"


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def prefix_mask(lengths: np.ndarray, seq_len: int) -> np.ndarray:
    """(B,) keep lengths -> (B, L) {0,1} prefix masks."""
    pos = np.arange(seq_len)
    return (pos[None, :] < np.asarray(lengths).reshape(-1, 1)).astype(np.float32)


def sample_hard_tail(rng: np.random.Generator, l_min: int, l_max: int, seq_len: int,
                     batch: int) -> np.ndarray:
    """Per-sample K ~ U{l_min..l_max} inclusive; prefix-ones masks (B, L)."""
    if not (1 <= l_min <= l_max <= seq_len):
        raise PolicyError(f"need 1 <= L_min <= L_max <= L, got ({l_min}, {l_max}, {seq_len})")
    ks = rng.integers(l_min, l_max + 1, size=batch)
    return prefix_mask(ks, seq_len)


def sample_bernoulli_gate(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Independent keep/drop draws m[j,i] ~ Bernoulli(p[j,i])."""
    return (rng.random(size=p.shape) < p).astype(np.float32)


def apply_policy(p: np.ndarray, policy: InferencePolicy) -> np.ndarray:
    """Per-token threshold keeps where p > tau (no prefix forcing); the count
    policies always produce prefix masks."""
    p = np.asarray(p)
    batch, seq_len = p.shape
    if policy.kind == "threshold":
        return (p > policy.tau).astype(np.float32)
    if policy.kind == "expected_count":
        ks = _round_half_up(p.sum(axis=1)) + policy.extra
        return prefix_mask(np.clip(ks, 1, seq_len), seq_len)
    ks = np.full(batch, min(policy.k, seq_len))
    return prefix_mask(ks, seq_len)


def eos_position(p_row: np.ndarray, tau: float) -> int:
    """First index with p < tau, clamped to >= 1; the full length if none."""
    if not (0.0 < tau < 1.0):
        raise PolicyError(f"tau must be in (0,1), got {tau}")
    below = np.flatnonzero(np.asarray(p_row) < tau)
    if below.size == 0:
        return len(p_row)
    return max(1, int(below[0]))
