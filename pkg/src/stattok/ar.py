"""Class-conditional causal transformer over tokenizer code sequences.

Sequence lengths are supervised through an End-of-Sequence token whose
position comes from thresholding the tokenizer's keep-probability profile;
sampling stops adaptively at the generated EoS.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .allocation import eos_position
from .data import epoch_order
from .nn import Embedding, LayerNorm, Linear, Module, TransformerBlock
from .optim import AdamW, NonFiniteGradient, Schedule, clip_global_norm, lr_at
from .tensor import Tensor

FIXED_THRESHOLDS = (0.99, 0.5, 0.25, 0.1, 0.01, 0.001)
FIXED_THRESHOLD_PROB = 0.75
_TAG_AR_INIT = 0x201
_TAG_AR_STEP = 0x202

AR_LOG_HEADER = "step,lr,loss"


@dataclass
class ARConfig:
    layers: int = 4
    hidden_dim: int = 128
    heads: int = 4
    steps: int = 2000
    batch_size: int = 64
    base_lr: float = 1e-3
    warmup_steps: int = 100
    end_lr: float = 1e-4
    weight_decay: float = 1e-4
    null_dropout: float = 0.1
    fixed_threshold: float | None = None   # set to train the single-threshold variant


@dataclass
class ARSequence:
    class_id: int
    codes: np.ndarray   # (k,) int64 in [0, codebook_size)
    eos_pos: int

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.eos_pos != len(self.codes):
            raise ValueError(f"eos_pos {self.eos_pos} != number of codes {len(self.codes)}")


class ARGenerator(Module):
    """Decoder-only transformer; position 0 carries the class embedding and
    positions 1..L the code prefix.  Vocabulary is codes plus one EoS id."""

    def __init__(self, rng: np.random.Generator, codebook_size: int, num_classes: int,
                 seq_len: int, cfg: ARConfig, dtype=np.float32):
        self.codebook_size = codebook_size
        self.num_classes = num_classes
        self.seq_len = seq_len
        self.eos_id = codebook_size
        self.vocab = codebook_size + 1
        self.null_class = num_classes
        d = cfg.hidden_dim
        self.tok_emb = Embedding(rng, self.vocab, d, dtype=dtype)
        self.cls_emb = Embedding(rng, num_classes + 1, d, dtype=dtype)
        self.pos_emb = Tensor(rng.normal(0.0, 0.02, size=(seq_len + 1, d)).astype(dtype), requires_grad=True)
        self.blocks = [TransformerBlock(rng, d, cfg.heads, causal=True, dtype=dtype) for _ in range(cfg.layers)]
        self.ln = LayerNorm(d, dtype)
        self.head = Linear(rng, d, self.vocab, dtype=dtype)

    def logits(self, class_ids: np.ndarray, codes: np.ndarray) -> Tensor:
        """(B,) class ids + (B, S) padded code ids -> (B, S+1, vocab)."""
        b, s = codes.shape
        cls = T.reshape(self.cls_emb(class_ids), (b, 1, -1))
        tok = self.tok_emb(codes)
        seq = T.concat([cls, tok], axis=1)
        seq = T.add(seq, T.narrow(self.pos_emb, 0, 0, s + 1))
        return self.logits_from_embeddings(seq)

    def logits_from_embeddings(self, seq: Tensor) -> Tensor:
        """Transformer trunk only; exposed so tests can perturb embeddings."""
        for blk in self.blocks:
            seq = blk(seq)
        return self.head(self.ln(seq))


def draw_threshold(rng: np.random.Generator) -> float:
    """75% a member of the fixed set, otherwise uniform on (0,1)."""
    if rng.random() < FIXED_THRESHOLD_PROB:
        return FIXED_THRESHOLDS[rng.integers(0, len(FIXED_THRESHOLDS))]
    return min(max(rng.random(), 1e-12), 1.0 - 1e-12)


def make_training_sequence(indices: np.ndarray, p_row: np.ndarray,
                           rng: np.random.Generator, class_id: int = 0) -> ARSequence:
    """Draw an EoS threshold and truncate the code sequence at the profile's
    first sub-threshold position."""
    k = eos_position(p_row, draw_threshold(rng))
    return ARSequence(class_id, np.asarray(indices[:k], dtype=np.int64), k)


def batchify(sequences: list[ARSequence], seq_len: int, eos_id: int):
    """Pad to fixed length; targets are codes then EoS, the rest is masked."""
    b = len(sequences)
    inputs = np.zeros((b, seq_len), dtype=np.int64)
    targets = np.zeros((b, seq_len + 1), dtype=np.int64)
    mask = np.zeros((b, seq_len + 1), dtype=np.float32)
    for j, seq in enumerate(sequences):
        k = seq.eos_pos
        inputs[j, :k] = seq.codes
        targets[j, :k] = seq.codes
        targets[j, k] = eos_id
        mask[j, :k + 1] = 1.0
    classes = np.asarray([seq.class_id for seq in sequences], dtype=np.int64)
    return classes, inputs, targets, mask


def ar_loss(model: ARGenerator, sequences: list[ARSequence],
            rng: np.random.Generator | None = None, null_dropout: float = 0.0) -> Tensor:
    """Mean cross-entropy per supervised position (codes then EoS); positions
    beyond the EoS contribute exactly zero loss and zero gradient."""
    classes, inputs, targets, mask = batchify(sequences, model.seq_len, model.eos_id)
    if inputs.max(initial=0) >= model.codebook_size or inputs.min(initial=0) < 0:
        raise ValueError("code id out of vocabulary range")
    if null_dropout > 0.0:
        if rng is None:
            raise ValueError("null_dropout requires an rng")
        drop = rng.random(len(sequences)) < null_dropout
        classes = np.where(drop, model.null_class, classes)
    logits = model.logits(classes, inputs)
    return masked_cross_entropy(logits, targets, mask)


def masked_cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """-mean log softmax(logits)[target] over mask==1 positions.

    The max shift uses a detached row max, which leaves both the value and
    the gradient of log-softmax exact.
    """
    rowmax = Tensor(np.max(logits.data, axis=-1, keepdims=True))
    shifted = T.sub(logits, rowmax)
    lse = T.log(T.tsum(T.exp(shifted), axis=-1, keepdims=True))
    logp = T.sub(shifted, lse)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    picked = T.tsum(T.mul(logp, Tensor(onehot)), axis=-1)
    total = T.tsum(T.mul(picked, Tensor(mask.astype(logits.data.dtype))))
    count = float(mask.sum())
    if count == 0:
        raise ValueError("cross-entropy mask selects no positions")
    return T.mul(total, Tensor(np.asarray(-1.0 / count, dtype=logits.dtype)))


def sample(model: ARGenerator, class_id: int, temperature: float, guidance_scale: float,
           rng: np.random.Generator) -> ARSequence:
    """Adaptive-length sampling: categorical draws until EoS (forced at L).

    Guided logits are null + s*(cond - null); temperature 0 means argmax.
    EoS is suppressed for the first code so every sequence has k >= 1.
    """
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    codes: list[int] = []
    with T.no_grad():
        for t in range(model.seq_len):
            prefix = np.asarray(codes, dtype=np.int64).reshape(1, -1) if codes else \
                np.zeros((1, 0), dtype=np.int64)
            cond = model.logits(np.asarray([class_id]), prefix).data[0, -1].astype(np.float64)
            if guidance_scale == 1.0:
                logits = cond
            else:
                null = model.logits(np.asarray([model.null_class]), prefix).data[0, -1].astype(np.float64)
                logits = null + guidance_scale * (cond - null)
            if t == 0:
                logits[model.eos_id] = -np.inf
            if temperature == 0.0:
                nxt = int(np.argmax(logits))
            else:
                z = logits / temperature
                z -= z.max()
                probs = np.exp(z)
                probs /= probs.sum()
                nxt = int(rng.choice(model.vocab, p=probs))
            if nxt == model.eos_id:
                break
            codes.append(nxt)
    return ARSequence(class_id, np.asarray(codes, dtype=np.int64), len(codes))


@dataclass
class TokenizedCorpus:
    codes: np.ndarray    # (N, L) int64
    probs: np.ndarray    # (N, L) float32
    labels: np.ndarray   # (N,) int64


def _draw_sequences(corpus: TokenizedCorpus, idx: np.ndarray, rng: np.random.Generator,
                    fixed_threshold: float | None) -> list[ARSequence]:
    out = []
    for i in idx:
        if fixed_threshold is None:
            out.append(make_training_sequence(corpus.codes[i], corpus.probs[i], rng,
                                              int(corpus.labels[i])))
        else:
            k = eos_position(corpus.probs[i], fixed_threshold)
            out.append(ARSequence(int(corpus.labels[i]), corpus.codes[i][:k], k))
    return out


def train_ar(cfg: ARConfig, corpus: TokenizedCorpus, codebook_size: int, num_classes: int,
             seq_len: int, seed: int, out_path: str, log_path: str | None = None,
             echo=print) -> ARGenerator:
    """Next-token training over threshold-truncated tokenizer outputs."""
    rng_init = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(_TAG_AR_INIT,))))
    model = ARGenerator(rng_init, codebook_size, num_classes, seq_len, cfg)
    schedule = Schedule(cfg.base_lr, cfg.warmup_steps, cfg.steps, cfg.end_lr)
    opt = AdamW(model.params(), weight_decay=cfg.weight_decay)
    n = corpus.codes.shape[0]
    if n < cfg.batch_size:
        raise ValueError(f"corpus of {n} smaller than batch size {cfg.batch_size}")
    per_epoch = n // cfg.batch_size
    params = model.params()
    rows: list[str] = []
    perm, perm_epoch = None, -1
    for step in range(cfg.steps):
        epoch, slot = divmod(step, per_epoch)
        if epoch != perm_epoch:
            perm = epoch_order(n, seed, epoch)
            perm_epoch = epoch
        idx = perm[slot * cfg.batch_size:(slot + 1) * cfg.batch_size]
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(_TAG_AR_STEP, step))))
        seqs = _draw_sequences(corpus, idx, rng, cfg.fixed_threshold)
        loss = ar_loss(model, seqs, rng, cfg.null_dropout)
        model.zero_grad()
        loss.backward()
        clip_global_norm(params, 1.0)
        lr = lr_at(step, schedule)
        try:
            opt.step(lr)
        except NonFiniteGradient as exc:
            print(f"step {step}: skipped ({exc})", file=sys.stderr)
            opt.step_count += 1
        rows.append(f"{step},{lr:.8g},{float(loss.data):.8g}")
        if step % 200 == 0 or step == cfg.steps - 1:
            echo(f"ar step {step}/{cfg.steps} lr {lr:.2e} loss {float(loss.data):.5f}")
    extra = opt.state_records()
    extra["meta.stage"] = np.asarray([3.0], dtype=np.float32)
    extra["meta.ar_config"] = np.asarray(
        [cfg.layers, cfg.hidden_dim, cfg.heads, codebook_size, num_classes, seq_len],
        dtype=np.float32)
    ckpt.save_model(out_path, model, extra)
    if log_path:
        tmp = log_path + ".tmp"
        with open(tmp, "w") as f:
            f.write(AR_LOG_HEADER + "\n" + "\n".join(rows) + "\n")
        os.replace(tmp, log_path)
    return model


def load_ar(path: str, cfg: ARConfig, codebook_size: int, num_classes: int, seq_len: int) -> ARGenerator:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=0, spawn_key=(_TAG_AR_INIT,))))
    model = ARGenerator(rng, codebook_size, num_classes, seq_len, cfg)
    ckpt.load_model(path, model)
    return model


def load_ar_auto(path: str) -> ARGenerator:
    """Rebuild an AR model from a checkpoint's embedded configuration."""
    records = ckpt.load_records(path)
    if "meta.ar_config" not in records:
        raise ckpt.CheckpointError(f"{path}: not an AR checkpoint (no embedded config)")
    layers, hidden, heads, codebook_size, num_classes, seq_len = (int(v) for v in records["meta.ar_config"])
    cfg = ARConfig(layers=layers, hidden_dim=hidden, heads=heads)
    return load_ar(path, cfg, codebook_size, num_classes, seq_len)
