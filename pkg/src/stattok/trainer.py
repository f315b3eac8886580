"""Two-stage training orchestration: deterministic batching, per-step RNG
streams derived from (seed, step), composite losses, gradient clipping,
CSV logging, and periodic checkpoints."""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from .allocation import sample_hard_tail
from .data import Dataset, epoch_order, hflip
from .losses import LossWeights, composite, content_loss, decrease_loss, recon_loss, sparse_loss
from .model import AdaptiveTokenizer, TokenizerConfig, config_from_array, config_to_array
from .optim import AdamW, NonFiniteGradient, Schedule, clip_global_norm, lr_at

_TAG_MODEL_INIT = 0x101
_TAG_HEAD_INIT = 0x102
_TAG_STEP = 0x5717

LOG_HEADER = "step,lr,total,recon,codebook,commit,content,decrease,sparse,mean_T"


@dataclass
class TrainerConfig:
    batch_size: int = 64
    steps_stage1: int = 2000
    steps_stage2: int = 4000
    warmup_steps: int = 200
    base_lr: float = 1e-3
    prob_head_lr: float = 2e-4
    end_lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    l_min: int = 10
    l_max: int = 16
    log_every: int = 100
    ckpt_every: int = 1000
    flip_augment: bool = True


def derive_rng(seed: int, tag: int, index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(tag, index))))


def build_model(cfg: TokenizerConfig, seed: int, dtype=np.float32) -> AdaptiveTokenizer:
    return AdaptiveTokenizer(cfg, derive_rng(seed, _TAG_MODEL_INIT), dtype=dtype)


def _fmt(x: float) -> str:
    return f"{x:.8g}"


def _log_row(step: int, lr: float, report, mean_t: float) -> str:
    c = report.components
    fields = [str(step), _fmt(lr), _fmt(report.value()),
              _fmt(c.get("recon", 0.0)), _fmt(c.get("codebook", 0.0)), _fmt(c.get("commit", 0.0)),
              _fmt(c.get("content", 0.0)), _fmt(c.get("decrease", 0.0)), _fmt(c.get("sparse", 0.0)),
              _fmt(mean_t)]
    return ",".join(fields)


def write_log(path: str, rows: list[str]):
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(LOG_HEADER + "\n")
        f.write("\n".join(rows))
        if rows:
            f.write("\n")
    os.replace(tmp, path)


class _BatchStream:
    """Deterministic epoch shuffling; every sample appears once per epoch."""

    def __init__(self, dataset: Dataset, batch_size: int, seed: int):
        if len(dataset) < batch_size:
            raise ValueError(f"dataset of {len(dataset)} smaller than batch size {batch_size}")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.per_epoch = len(dataset) // batch_size
        self._epoch = -1
        self._perm = None

    def batch(self, step: int) -> np.ndarray:
        epoch, slot = divmod(step, self.per_epoch)
        if epoch != self._epoch:
            self._perm = epoch_order(len(self.dataset), self.seed, epoch)
            self._epoch = epoch
        idx = self._perm[slot * self.batch_size:(slot + 1) * self.batch_size]
        return self.dataset.pixels[idx]


def _save_state(path: str, model: AdaptiveTokenizer, opt: AdamW, stage: int):
    extra = opt.state_records()
    extra["meta.stage"] = np.asarray([float(stage)], dtype=np.float32)
    extra["meta.tokenizer_config"] = config_to_array(model.cfg)
    ckpt.save_model(path, model, extra)


def _train_loop(model: AdaptiveTokenizer, opt: AdamW, schedule: Schedule, stream: _BatchStream,
                tcfg: TrainerConfig, weights: LossWeights, seed: int, stage: int,
                out_path: str, log_path: str | None, start_step: int, total_steps: int,
                rows: list[str], echo=print):
    params = model.params()
    for step in range(start_step, total_steps):
        rng = derive_rng(seed, _TAG_STEP, step)
        batch = stream.batch(step)
        if tcfg.flip_augment:
            batch = hflip(batch, rng.random(batch.shape[0]) < 0.5)

        if stage == 1:
            mask = sample_hard_tail(rng, tcfg.l_min, tcfg.l_max, model.cfg.latent_len, batch.shape[0])
            keep = mask.sum(axis=1).astype(np.int64)
            x_hat, p, quant = model.forward_stage1(batch, keep)
            scalar, per_sample = recon_loss(batch, x_hat)
            parts = {"recon": scalar, "codebook": quant.codebook_loss, "commit": quant.commitment_loss}
            mean_t = float(np.mean(np.sum(p.data, axis=1)))
        else:
            out = model.forward_stage2(batch, rng)
            scalar, per_sample = recon_loss(batch, out.x_hat)
            proxy = per_sample.data.astype(np.float64)  # detached complexity proxy
            parts = {
                "recon": scalar,
                "codebook": out.quantized.codebook_loss,
                "commit": out.quantized.commitment_loss,
                "content": content_loss(proxy, out.token_expectation),
                "decrease": decrease_loss(out.p),
                "sparse": sparse_loss(out.p, weights.p_star),
            }
            mean_t = float(np.mean(out.token_expectation.data))

        report = composite(stage, parts, weights, per_sample.data.copy())
        model.zero_grad()
        report.total.backward()
        clip_global_norm(params, tcfg.grad_clip)
        lr = lr_at(step, schedule)
        try:
            opt.step(lr)
        except NonFiniteGradient as exc:
            print(f"step {step}: skipped ({exc})", file=sys.stderr)
            opt.step_count += 1  # keep the step counter aligned with the loop
        rows.append(_log_row(step, lr, report, mean_t))

        if tcfg.log_every and (step % tcfg.log_every == 0 or step == total_steps - 1):
            echo(f"stage{stage} step {step}/{total_steps} lr {lr:.2e} "
                 f"loss {report.value():.5f} recon {report.components['recon']:.5f} mean_T {mean_t:.2f}")
        if tcfg.ckpt_every and (step + 1) % tcfg.ckpt_every == 0 and step + 1 < total_steps:
            _save_state(out_path, model, opt, stage)
            if log_path:
                write_log(log_path, rows)
    _save_state(out_path, model, opt, stage)
    if log_path:
        write_log(log_path, rows)


def train_stage1(model_cfg: TokenizerConfig, tcfg: TrainerConfig, weights: LossWeights,
                 dataset: Dataset, seed: int, out_path: str, log_path: str | None = None,
                 resume: str | None = None, echo=print) -> AdaptiveTokenizer:
    """Hard tail-dropping pretraining; deterministic given (configs, dataset, seed)."""
    model = build_model(model_cfg, seed)
    schedule = Schedule(tcfg.base_lr, tcfg.warmup_steps, tcfg.steps_stage1, tcfg.end_lr)
    opt = AdamW(model.params(), tcfg.beta1, tcfg.beta2, tcfg.eps, tcfg.weight_decay)
    start = 0
    if resume:
        extra = ckpt.load_model(resume, model)
        opt.load_state_records(extra)
        start = opt.step_count
    stream = _BatchStream(dataset, tcfg.batch_size, seed)
    rows: list[str] = []
    _train_loop(model, opt, schedule, stream, tcfg, weights, seed, 1,
                out_path, log_path, start, tcfg.steps_stage1, rows, echo)
    return model


def train_stage2(model_cfg: TokenizerConfig, tcfg: TrainerConfig, weights: LossWeights,
                 stage1_path: str, dataset: Dataset, seed: int, out_path: str,
                 log_path: str | None = None, resume: str | None = None, echo=print) -> AdaptiveTokenizer:
    """Content-adaptive fine-tuning: everything continues from stage 1 except
    the probability head, which restarts fresh (bias +2) at a reduced LR."""
    model = build_model(model_cfg, seed)
    head_names = model.prob_head_param_names()
    schedule = Schedule(tcfg.base_lr, tcfg.warmup_steps, tcfg.steps_stage2, tcfg.end_lr)
    head_scale = tcfg.prob_head_lr / tcfg.base_lr
    scales = {name: head_scale for name in head_names}
    opt = AdamW(model.params(), tcfg.beta1, tcfg.beta2, tcfg.eps, tcfg.weight_decay, group_scales=scales)
    start = 0
    if resume:
        extra = ckpt.load_model(resume, model)
        opt.load_state_records(extra)
        start = opt.step_count
    else:
        ckpt.load_model(stage1_path, model)
        model.init_prob_head(derive_rng(seed, _TAG_HEAD_INIT))
    stream = _BatchStream(dataset, tcfg.batch_size, seed)
    rows: list[str] = []
    _train_loop(model, opt, schedule, stream, tcfg, weights, seed, 2,
                out_path, log_path, start, tcfg.steps_stage2, rows, echo)
    return model


def load_tokenizer(path: str, model_cfg: TokenizerConfig) -> AdaptiveTokenizer:
    model = build_model(model_cfg, seed=0)
    ckpt.load_model(path, model)
    return model


def load_tokenizer_auto(path: str) -> AdaptiveTokenizer:
    """Rebuild a tokenizer from a checkpoint's embedded configuration."""
    records = ckpt.load_records(path)
    if "meta.tokenizer_config" not in records:
        raise ckpt.CheckpointError(f"{path}: not a tokenizer checkpoint (no embedded config)")
    return load_tokenizer(path, config_from_array(records["meta.tokenizer_config"]))
