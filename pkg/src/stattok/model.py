"""The adaptive tokenizer network: patch embedding, bidirectional
transformer encoder with learnable latent slots, vector quantizer,
position-aware keep-probability head, and transformer decoder that
predicts pixels from masked codes plus learnable output tokens."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, TransformerBlock, normal_param, sinusoidal_embedding
from .tensor import Tensor

PROB_CLAMP = 1e-6


@dataclass
class TokenizerConfig:
    image_size: int = 32
    patch_size: int = 4
    hidden_dim: int = 128
    latent_len: int = 16
    code_dim: int = 8
    codebook_size: int = 256
    enc_layers: int = 4
    dec_layers: int = 4
    heads: int = 4
    prob_head_hidden: int = 128

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.hidden_dim % self.heads != 0:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


CONFIG_FIELDS = ("image_size", "patch_size", "hidden_dim", "latent_len", "code_dim",
                 "codebook_size", "enc_layers", "dec_layers", "heads", "prob_head_hidden")


def config_to_array(cfg: TokenizerConfig) -> np.ndarray:
    return np.asarray([getattr(cfg, f) for f in CONFIG_FIELDS], dtype=np.float32)


def config_from_array(arr: np.ndarray) -> TokenizerConfig:
    values = {f: int(v) for f, v in zip(CONFIG_FIELDS, arr)}
    return TokenizerConfig(**values)


@dataclass
class QuantizedLatents:
    indices: np.ndarray        # (B, L) int64
    z_q: Tensor                # (B, L, d_code); forward values are exact codebook rows
    codebook_loss: Tensor
    commitment_loss: Tensor


@dataclass
class Stage2Output:
    x_hat: Tensor
    p: Tensor                  # (B, L) keep probabilities
    mask: np.ndarray           # (B, L) sampled {0,1}
    token_expectation: Tensor  # (B,) sum of p
    quantized: QuantizedLatents


def patchify(x: np.ndarray, f: int) -> np.ndarray:
    b, c, h, w = x.shape
    hp, wp = h // f, w // f
    return (x.reshape(b, c, hp, f, wp, f)
             .transpose(0, 2, 4, 3, 5, 1)
             .reshape(b, hp * wp, f * f * c))


class AdaptiveTokenizer(Module):
    def __init__(self, cfg: TokenizerConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        n, d, l = cfg.num_patches, cfg.hidden_dim, cfg.latent_len
        self.patch_embed = Linear(rng, cfg.patch_dim, d, dtype=dtype)
        self.pos_patch = normal_param(rng, (n, d), dtype=dtype)
        self.latent_tokens = normal_param(rng, (l, d), dtype=dtype)
        self.enc_blocks = [TransformerBlock(rng, d, cfg.heads, dtype=dtype) for _ in range(cfg.enc_layers)]
        self.enc_ln = LayerNorm(d, dtype)

        self.proj_in = Linear(rng, d, cfg.code_dim, dtype=dtype)
        lim = 1.0 / cfg.codebook_size
        self.codebook = Tensor(rng.uniform(-lim, lim, size=(cfg.codebook_size, cfg.code_dim)).astype(dtype),
                               requires_grad=True)

        self.proj_out = Linear(rng, cfg.code_dim, d, dtype=dtype)
        self.pos_latent_dec = normal_param(rng, (l, d), dtype=dtype)
        self.output_tokens = normal_param(rng, (n, d), dtype=dtype)
        self.dec_blocks = [TransformerBlock(rng, d, cfg.heads, dtype=dtype) for _ in range(cfg.dec_layers)]
        self.dec_ln = LayerNorm(d, dtype)
        self.pixel_head = Linear(rng, d, cfg.patch_dim, dtype=dtype)

        self.head_fc1 = Linear(rng, d, cfg.prob_head_hidden, dtype=dtype)
        self.head_fc2 = Linear(rng, cfg.prob_head_hidden, 1, dtype=dtype)
        self.head_fc2.bias.data[:] = 2.0
        self._head_pos = sinusoidal_embedding(l, d, dtype)

    def init_prob_head(self, rng: np.random.Generator, bias: float = 2.0):
        """Fresh head weights (used when stage 2 starts from a stage-1 model)."""
        d, hidden = self.cfg.hidden_dim, self.cfg.prob_head_hidden
        self.head_fc1.weight.data[:] = rng.normal(0.0, 0.02, size=(d, hidden)).astype(self.dtype)
        self.head_fc1.bias.data[:] = 0.0
        self.head_fc2.weight.data[:] = rng.normal(0.0, 0.02, size=(hidden, 1)).astype(self.dtype)
        self.head_fc2.bias.data[:] = bias

    def prob_head_param_names(self) -> set[str]:
        return {name for name, _ in self.params() if name.startswith("head_fc")}

    def _expand(self, rows: Tensor, batch: int) -> Tensor:
        # (R, D) -> (B, R, D) with gradients summed back over the batch
        zeros = Tensor(np.zeros((batch, 1, 1), dtype=self.dtype))
        return T.add(rows, zeros)

    # core passes ----------------------------------------------------------

    def encode(self, x: np.ndarray) -> tuple[Tensor, Tensor]:
        cfg = self.cfg
        if x.shape[1:] != (3, cfg.image_size, cfg.image_size):
            raise T.ShapeError("encode", x.shape, (-1, 3, cfg.image_size, cfg.image_size))
        b = x.shape[0]
        patches = Tensor(patchify(np.asarray(x, dtype=self.dtype), cfg.patch_size))
        tok = T.add(self.patch_embed(patches), self.pos_patch)
        seq = T.concat([tok, self._expand(self.latent_tokens, b)], axis=1)
        for blk in self.enc_blocks:
            seq = blk(seq)
        seq = self.enc_ln(seq)
        z_l = T.narrow(seq, 1, cfg.num_patches, cfg.num_patches + cfg.latent_len)

        h = T.add(z_l, Tensor(self._head_pos))
        h = self.head_fc2(T.gelu(self.head_fc1(h)))
        p = T.clamp(T.sigmoid(T.reshape(h, (b, cfg.latent_len))), PROB_CLAMP, 1.0 - PROB_CLAMP)
        return z_l, p

    def quantize(self, z_l: Tensor) -> QuantizedLatents:
        cfg = self.cfg
        proj = self.proj_in(z_l)                                   # (B, L, d_code)
        flat = proj.data.reshape(-1, cfg.code_dim).astype(np.float64)
        entries = self.codebook.data.astype(np.float64)
        # direct squared distances in float64: ties resolve to the lowest
        # index and agree exactly with a per-entry brute-force scan
        dist = np.sum((flat[:, None, :] - entries[None, :, :]) ** 2, axis=2)
        idx = np.argmin(dist, axis=1).reshape(proj.shape[0], proj.shape[1])

        selected = T.embedding(self.codebook, idx)                 # carries codebook grad
        z_q = T.straight_through(selected, proj)
        sg_proj = Tensor(proj.data)
        sg_entries = Tensor(selected.data)
        codebook_loss = T.tmean(T.square(T.sub(selected, sg_proj)))
        commitment_loss = T.tmean(T.square(T.sub(proj, sg_entries)))
        return QuantizedLatents(idx, z_q, codebook_loss, commitment_loss)

    def decode(self, z_q_masked: Tensor) -> Tensor:
        cfg = self.cfg
        b = z_q_masked.shape[0]
        lat = T.add(self.proj_out(z_q_masked), self.pos_latent_dec)
        seq = T.concat([lat, self._expand(self.output_tokens, b)], axis=1)
        for blk in self.dec_blocks:
            seq = blk(seq)
        seq = self.dec_ln(seq)
        out = T.narrow(seq, 1, cfg.latent_len, cfg.latent_len + cfg.num_patches)
        pix = self.pixel_head(out)                                 # (B, N, f*f*3)
        side = cfg.image_size // cfg.patch_size
        pix = T.reshape(pix, (b, side, side, cfg.patch_size, cfg.patch_size, 3))
        pix = T.transpose(pix, (0, 5, 1, 3, 2, 4))
        pix = T.reshape(pix, (b, 3, cfg.image_size, cfg.image_size))
        return T.clamp(pix, -1.0, 1.0)

    def apply_mask(self, z_q: Tensor, mask: np.ndarray) -> Tensor:
        m = Tensor(np.asarray(mask, dtype=self.dtype).reshape(*mask.shape, 1))
        return T.mul(z_q, m)

    # training entry points --------------------------------------------------

    def forward_stage1(self, x: np.ndarray, keep: int | np.ndarray):
        """Hard prefix masking: keep the first K quantized tokens (K may be
        per-sample).  The probability head output is unused in this stage."""
        cfg = self.cfg
        keep_arr = np.asarray(keep).reshape(-1)
        if keep_arr.size == 1:
            keep_arr = np.full(x.shape[0], int(keep_arr[0]))
        if keep_arr.min() < 1 or keep_arr.max() > cfg.latent_len:
            raise ValueError(f"keep length out of range [1, {cfg.latent_len}]: "
                             f"[{keep_arr.min()}, {keep_arr.max()}]")
        z_l, p = self.encode(x)
        quant = self.quantize(z_l)
        mask = (np.arange(cfg.latent_len)[None, :] < keep_arr[:, None]).astype(self.dtype)
        x_hat = self.decode(self.apply_mask(quant.z_q, mask))
        return x_hat, p, quant

    def forward_stage2(self, x: np.ndarray, rng: np.random.Generator) -> Stage2Output:
        """Stochastic per-token gating: m ~ Bernoulli(p) with straight-through
        gradients into p; T is the per-sample sum of keep probabilities."""
        z_l, p = self.encode(x)
        quant = self.quantize(z_l)
        mask = (rng.random(size=p.shape) < p.data).astype(self.dtype)
        gate = T.straight_through(Tensor(mask), p)
        masked = T.mul(quant.z_q, T.reshape(gate, (*mask.shape, 1)))
        x_hat = self.decode(masked)
        token_expectation = T.tsum(p, axis=1)
        return Stage2Output(x_hat, p, mask, token_expectation, quant)


def encode_corpus(model: AdaptiveTokenizer, pixels: np.ndarray,
                  batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Code indices and keep profiles for a whole corpus (no gradients)."""
    indices, probs = [], []
    with T.no_grad():
        for start in range(0, pixels.shape[0], batch_size):
            chunk = pixels[start:start + batch_size]
            z_l, p = model.encode(chunk)
            quant = model.quantize(z_l)
            indices.append(quant.indices)
            probs.append(p.data)
    return np.concatenate(indices), np.concatenate(probs)


def decode_codes(model: AdaptiveTokenizer, indices: np.ndarray, mask: np.ndarray,
                 batch_size: int = 64) -> np.ndarray:
    """Reconstruct images from code indices under a drop mask (no gradients).

    The quantizer's forward value is exactly the codebook row, so decoding
    from indices matches decoding from a full forward pass bit for bit.
    """
    out = []
    with T.no_grad():
        for start in range(0, indices.shape[0], batch_size):
            idx = indices[start:start + batch_size]
            z_q = T.embedding(model.codebook, idx)
            x_hat = model.decode(model.apply_mask(z_q, mask[start:start + batch_size]))
            out.append(x_hat.data)
    return np.concatenate(out)


def brute_force_nearest(vectors: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Independent nearest-neighbor scan: explicit per-entry loop in float64
    (same summation order as the quantizer's vectorized form)."""
    flat = vectors.reshape(-1, vectors.shape[-1]).astype(np.float64)
    entries = codebook.astype(np.float64)
    best_d = np.full(flat.shape[0], np.inf)
    best_i = np.zeros(flat.shape[0], dtype=np.int64)
    for k in range(entries.shape[0]):
        d = np.sum((flat - entries[k]) ** 2, axis=1)
        better = d < best_d
        best_d[better] = d[better]
        best_i[better] = k
    return best_i.reshape(vectors.shape[:-1])
