"""Training objectives: reconstruction, VQ auxiliaries, and the three
keep-probability regularizers (complexity correlation, monotone decay,
Bernoulli-KL sparsity), combined by a weighted composite."""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_EPS = 1e-6
VAR_FLOOR = 1e-12


@dataclass
class LossWeights:
    w_recon: float = 1.0
    w_vq_codebook: float = 1.0
    w_vq_commit: float = 0.25
    w_content: float = 1.0
    w_decrease: float = 50.0
    w_sparse: float = 0.005
    p_star: float = 0.5

    def __post_init__(self):
        for name in ("w_recon", "w_vq_codebook", "w_vq_commit", "w_content", "w_decrease", "w_sparse"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if not (0.0 < self.p_star < 1.0):
            raise ValueError(f"p_star must be in (0,1), got {self.p_star}")


@dataclass
class LossReport:
    total: Tensor
    components: dict = field(default_factory=dict)   # unweighted scalar values
    weighted: dict = field(default_factory=dict)
    per_sample_recon: np.ndarray | None = None

    def value(self) -> float:
        return float(self.total.data)


def recon_loss(x, x_hat: Tensor) -> tuple[Tensor, Tensor]:
    """Mean squared error; returns (batch scalar, per-sample vector)."""
    target = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=x_hat.dtype))
    diff = T.sub(x_hat, target)
    per_sample = T.tmean(T.reshape(T.square(diff), (diff.shape[0], -1)), axis=1)
    return T.tmean(per_sample), per_sample


def content_loss(per_sample_proxy: np.ndarray, token_expectation: Tensor) -> Tensor:
    """(1 - Pearson(proxy, T))^2 across the batch.

    The proxy is detached by construction (plain numpy); only T carries
    gradient.  Variances are floored at 1e-12 so degenerate batches return
    loss 1 (corr treated as 0) with finite gradients.
    """
    proxy = np.asarray(per_sample_proxy, dtype=np.float64).reshape(-1)
    b = proxy.size
    if b < 2:
        raise ValueError(f"content loss needs a batch of >= 2, got {b}")
    if token_expectation.shape != (b,):
        raise T.ShapeError("content_loss", proxy.shape, token_expectation.shape)
    xc = proxy - proxy.mean()
    var_x = max(float(np.mean(xc * xc)), VAR_FLOOR)
    xc_t = Tensor(xc.astype(token_expectation.dtype) / b)  # folds the 1/B of the covariance mean
    tc = T.sub(token_expectation, T.tmean(token_expectation))
    cov = T.tsum(T.mul(xc_t, tc))
    var_t = T.maximum_const(T.tmean(T.square(tc)), VAR_FLOOR)
    denom = T.sqrt(T.mul(var_t, Tensor(np.asarray(var_x, dtype=token_expectation.dtype))))
    corr = T.div(cov, denom)
    return T.square(T.sub(Tensor(np.asarray(1.0, dtype=token_expectation.dtype)), corr))


def decrease_loss(p: Tensor) -> Tensor:
    """Mean over the batch of the summed upward steps max(0, p_i - p_{i-1})."""
    seq_len = p.shape[1]
    if seq_len < 2:
        raise ValueError(f"decrease loss needs L >= 2, got {seq_len}")
    steps = T.sub(T.narrow(p, 1, 1, seq_len), T.narrow(p, 1, 0, seq_len - 1))
    return T.tmean(T.tsum(T.maximum_const(steps, 0.0), axis=1))


def sparse_loss(p: Tensor, p_star: float) -> Tensor:
    """KL(Bern(p*) || Bern(mean_i p)) per sample, in nats, batch-averaged."""
    if not (0.0 < p_star < 1.0):
        raise ValueError(f"p_star must be in (0,1), got {p_star}")
    pbar = T.clamp(T.tmean(p, axis=1), PROB_EPS, 1.0 - PROB_EPS)
    one = Tensor(np.asarray(1.0, dtype=p.dtype))
    kl = T.add(
        T.mul(Tensor(np.asarray(p_star, dtype=p.dtype)),
              T.sub(Tensor(np.asarray(math.log(p_star), dtype=p.dtype)), T.log(pbar))),
        T.mul(Tensor(np.asarray(1.0 - p_star, dtype=p.dtype)),
              T.sub(Tensor(np.asarray(math.log(1.0 - p_star), dtype=p.dtype)), T.log(T.sub(one, pbar)))),
    )
    return T.tmean(kl)


_STAGE1_PARTS = ("recon", "codebook", "commit")
_STAGE2_PARTS = _STAGE1_PARTS + ("content", "decrease", "sparse")


def composite(stage: int, parts: dict, weights: LossWeights,
              per_sample_recon: np.ndarray | None = None) -> LossReport:
    """Weighted sum of the stage's components; stage 2 adds the three
    keep-probability regularizers on top of the stage-1 terms."""
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    needed = _STAGE1_PARTS if stage == 1 else _STAGE2_PARTS
    missing = [name for name in needed if name not in parts]
    if missing:
        raise ValueError(f"composite stage {stage} missing component(s): {', '.join(missing)}")
    scale = {
        "recon": weights.w_recon,
        "codebook": weights.w_vq_codebook,
        "commit": weights.w_vq_commit,
        "content": weights.w_content,
        "decrease": weights.w_decrease,
        "sparse": weights.w_sparse,
    }
    total = None
    components, weighted = {}, {}
    for name in needed:
        term = parts[name]
        components[name] = float(term.data)
        weighted[name] = scale[name] * components[name]
        piece = T.mul(term, Tensor(np.asarray(scale[name], dtype=term.dtype)))
        total = piece if total is None else T.add(total, piece)
    return LossReport(total=total, components=components, weighted=weighted,
                      per_sample_recon=per_sample_recon)
