"""Reconstruction metrics, token-count statistics, complexity-correlation
analysis, monotonicity diagnostics, and the ablation-variant harness."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .allocation import InferencePolicy, apply_policy
from .data import Dataset, dataset_proxies
from .model import AdaptiveTokenizer, decode_codes, encode_corpus

PSNR_CAP_DB = 100.0
_MSE_FLOOR = 1e-10
_VAR_EPS = 1e-12


def mse_per_image(x: np.ndarray, x_hat: np.ndarray) -> np.ndarray:
    if x.shape != x_hat.shape:
        raise ValueError(f"mse: shape mismatch {x.shape} vs {x_hat.shape}")
    d = (x.astype(np.float64) - x_hat.astype(np.float64)) ** 2
    return d.reshape(d.shape[0], -1).mean(axis=1)


def psnr(x: np.ndarray, x_hat: np.ndarray) -> float:
    """PSNR in dB on the [0,1] remap of [-1,1] pixels, capped at 100 dB."""
    if x.shape != x_hat.shape:
        raise ValueError(f"psnr: shape mismatch {x.shape} vs {x_hat.shape}")
    mse = float(np.mean(((x.astype(np.float64) - x_hat.astype(np.float64)) / 2.0) ** 2))
    if mse < _MSE_FLOOR:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def pearson(x: np.ndarray, y: np.ndarray) -> tuple[float, bool]:
    """(correlation, variance_degenerate); degenerate pairs report 0."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    vx, vy = float(np.mean(xc * xc)), float(np.mean(yc * yc))
    if vx < _VAR_EPS or vy < _VAR_EPS:
        return 0.0, True
    return float(np.mean(xc * yc) / np.sqrt(vx * vy)), False


def least_squares(x: np.ndarray, y: np.ndarray) -> tuple[float, float, bool]:
    """slope, intercept, degenerate flag for y ~ slope*x + intercept."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    vx = float(np.mean(xc * xc))
    if vx < _VAR_EPS:
        return 0.0, float(y.mean()), True
    slope = float(np.mean(xc * (y - y.mean())) / vx)
    return slope, float(y.mean() - slope * x.mean()), False


def upward_step_mass(probs: np.ndarray) -> np.ndarray:
    """Per-image sum of max(0, p_i - p_{i-1}) divided by L."""
    steps = np.maximum(probs[:, 1:] - probs[:, :-1], 0.0)
    return steps.sum(axis=1) / probs.shape[1]


@dataclass
class EvalReport:
    mean_mse: float
    mean_psnr_db: float
    mean_tokens: float
    token_count_histogram: list[int] = field(default_factory=list)
    pearson_tokens_vs_proxy: float = 0.0
    regression_slope: float = 0.0
    regression_intercept: float = 0.0
    mean_upward_violation: float = 0.0
    variance_degenerate: bool = False
    policy: str = ""
    n_samples: int = 0


@dataclass
class PerSampleTable:
    ids: np.ndarray
    labels: np.ndarray
    proxy_bytes: np.ndarray
    token_expectation: np.ndarray   # T = sum of p
    kept: np.ndarray                # tokens kept by the applied policy
    mse: np.ndarray
    psnr_db: np.ndarray
    probs: np.ndarray               # (N, L) keep profiles
    codes: np.ndarray               # (N, L) code indices


def token_complexity_analysis(model: AdaptiveTokenizer, ds: Dataset, policy: InferencePolicy,
                              batch_size: int = 64,
                              proxies: np.ndarray | None = None) -> tuple[EvalReport, PerSampleTable]:
    """Full reconstruction + allocation analysis of a corpus under a policy."""
    codes, probs = encode_corpus(model, ds.pixels, batch_size)
    if proxies is None:
        proxies = dataset_proxies(ds)
    t_expect = probs.sum(axis=1, dtype=np.float64)
    mask = apply_policy(probs, policy)
    kept = mask.sum(axis=1).astype(np.int64)
    x_hat = decode_codes(model, codes, mask, batch_size)
    per_mse = mse_per_image(ds.pixels, x_hat)
    per_psnr = np.asarray([psnr(ds.pixels[i:i + 1], x_hat[i:i + 1]) for i in range(len(ds))])

    seq_len = probs.shape[1]
    hist = np.bincount(kept, minlength=seq_len + 1)[:seq_len + 1]
    corr, degenerate = pearson(proxies, t_expect)
    slope, intercept, deg2 = least_squares(proxies, t_expect)
    report = EvalReport(
        mean_mse=float(per_mse.mean()),
        mean_psnr_db=float(per_psnr.mean()),
        mean_tokens=float(kept.mean()),
        token_count_histogram=[int(c) for c in hist],
        pearson_tokens_vs_proxy=corr,
        regression_slope=slope,
        regression_intercept=intercept,
        mean_upward_violation=float(upward_step_mass(probs).mean()),
        variance_degenerate=degenerate or deg2,
        policy=policy.describe(),
        n_samples=len(ds),
    )
    table = PerSampleTable(ds.ids, ds.labels, proxies, t_expect, kept, per_mse, per_psnr, probs, codes)
    return report, table


def run_variant(variant: str, model: AdaptiveTokenizer, ds: Dataset, tau: float = 0.5,
                batch_size: int = 64, proxies: np.ndarray | None = None,
                fixed_k: int | None = None) -> tuple[EvalReport, PerSampleTable]:
    """Evaluate one dropping variant.

    stat / fixthreshold use per-token thresholding at tau; harddrop truncates
    each image at round(sum p); fixcount uses one constant prefix length (by
    default the rounded mean expected count of a matching stat run).
    """
    if variant in ("stat", "fixthreshold"):
        policy = InferencePolicy("threshold", tau=tau)
    elif variant == "harddrop":
        policy = InferencePolicy("expected_count", extra=0)
    elif variant == "fixcount":
        if fixed_k is None:
            stat_report, _ = token_complexity_analysis(
                model, ds, InferencePolicy("threshold", tau=tau), batch_size, proxies)
            fixed_k = int(np.floor(stat_report.mean_tokens + 0.5))
        fixed_k = int(np.clip(fixed_k, 1, model.cfg.latent_len))
        policy = InferencePolicy("fixed_count", k=fixed_k)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return token_complexity_analysis(model, ds, policy, batch_size, proxies)


def quartile_token_gap(proxies: np.ndarray, t_expect: np.ndarray) -> float:
    """Mean T of the hardest proxy quartile minus the easiest quartile's.

    Quartile boundaries use the sorted order with lower-index tie-break.
    """
    n = len(proxies)
    order = np.argsort(proxies, kind="stable")
    q = n // 4
    easy = t_expect[order[:q]]
    hard = t_expect[order[n - q:]]
    return float(hard.mean() - easy.mean())


# persistence ---------------------------------------------------------------

def _atomic_write(path: str, text: str):
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def write_report_json(path: str, report: EvalReport):
    _atomic_write(path, json.dumps(asdict(report), indent=2) + "\n")


def write_per_sample_csv(path: str, table: PerSampleTable):
    lines = ["id,label,proxy_bytes,T,k_threshold,mse,psnr"]
    for i in range(len(table.ids)):
        lines.append(f"{table.ids[i]},{table.labels[i]},{table.proxy_bytes[i]},"
                     f"{table.token_expectation[i]:.6f},{table.kept[i]},"
                     f"{table.mse[i]:.8g},{table.psnr_db[i]:.6f}")
    _atomic_write(path, "\n".join(lines) + "\n")


def write_profiles_csv(path: str, ids: np.ndarray, probs: np.ndarray):
    seq_len = probs.shape[1]
    header = "id," + ",".join(f"p_{i}" for i in range(seq_len))
    lines = [header]
    for i in range(len(ids)):
        lines.append(f"{ids[i]}," + ",".join(f"{v:.8g}" for v in probs[i]))
    _atomic_write(path, "\n".join(lines) + "\n")


def write_tokens_csv(path: str, table: PerSampleTable):
    seq_len = table.codes.shape[1]
    header = ("id,k,T," + ",".join(f"code_{i}" for i in range(seq_len))
              + "," + ",".join(f"p_{i}" for i in range(seq_len)))
    lines = [header]
    for i in range(len(table.ids)):
        lines.append(f"{table.ids[i]},{table.kept[i]},{table.token_expectation[i]:.6f},"
                     + ",".join(str(c) for c in table.codes[i]) + ","
                     + ",".join(f"{v:.8g}" for v in table.probs[i]))
    _atomic_write(path, "\n".join(lines) + "\n")
