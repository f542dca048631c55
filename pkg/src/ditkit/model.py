"""Linear diffusion transformer.

Each block: ReLU linear self-attention, vanilla softmax cross-attention over
prompt tokens, and a two-matrix MLP, all behind RMS pre-norms and residual
connections. Q and K are RMS-normalized in both attentions so attention
logits stay bounded when weights blow up.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .diffusion import Schedule
from .tensor import (ConfigError, GradTape, InputError, Parameter, Tensor,
                     add, div, embed, matmul, mul, relu, reshape, rms_norm,
                     softmax_rows, transpose, tsum)

ATTN_EPS = 1e-6
PAD_TOKEN = 0
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 6
    d_model: int = 64
    d_ff: int = 160
    vocab: int = 16
    grid_h: int = 8
    grid_w: int = 8
    channels: int = 3
    train_steps: int = 50          # diffusion timesteps the model is trained on
    max_prompt_len: int = 8
    qk_norm: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.d_ff < self.d_model:
            raise ConfigError(f"d_ff ({self.d_ff}) < d_model ({self.d_model})")
        if self.vocab < 2 or self.train_steps < 1:
            raise ConfigError("vocab >= 2 and train_steps >= 1 required")

    @property
    def tokens(self) -> int:
        return self.grid_h * self.grid_w

    def with_depth(self, depth: int) -> "ModelConfig":
        return ModelConfig(**{**self.__dict__, "depth": depth})


# matrix fields: (name, (rows, cols) as a function of cfg)
_MAT_FIELDS = (
    ("w_q", lambda c: (c.d_model, c.d_model)),
    ("w_k", lambda c: (c.d_model, c.d_model)),
    ("w_v", lambda c: (c.d_model, c.d_model)),
    ("w_o", lambda c: (c.d_model, c.d_model)),
    ("wc_q", lambda c: (c.d_model, c.d_model)),
    ("wc_k", lambda c: (c.d_model, c.d_model)),
    ("wc_v", lambda c: (c.d_model, c.d_model)),
    ("wc_o", lambda c: (c.d_model, c.d_model)),
    ("w1", lambda c: (c.d_model, c.d_ff)),
    ("w2", lambda c: (c.d_ff, c.d_model)),
)
# gain fields initialize to ones
_GAIN_FIELDS = ("g_q", "g_k", "gc_q", "gc_k", "n1", "n2", "n3")

BLOCK_FIELDS = tuple(n for n, _ in _MAT_FIELDS) + _GAIN_FIELDS
IDENTITY_ZERO_FIELDS = ("w_o", "wc_o", "w2")  # zeroing these makes a block the identity


class BlockParams:
    """Parameters of one transformer block, keyed by field name."""

    def __init__(self, params: dict[str, Parameter]):
        missing = set(BLOCK_FIELDS) - set(params)
        if missing:
            raise ConfigError(f"block missing fields: {sorted(missing)}")
        self.params = params

    def __getitem__(self, k: str) -> Parameter:
        return self.params[k]

    @classmethod
    def random(cls, cfg: ModelConfig, rng: np.random.Generator,
               dtype=np.float32, std: float = INIT_STD) -> "BlockParams":
        p = {}
        for name, shape_fn in _MAT_FIELDS:
            p[name] = Parameter(rng.normal(0.0, std, shape_fn(cfg)).astype(dtype), name)
        for name in _GAIN_FIELDS:
            p[name] = Parameter(np.ones(cfg.d_model, dtype=dtype), name)
        return cls(p)

    def copy(self) -> "BlockParams":
        return BlockParams({k: Parameter(v.data.copy(), k) for k, v in self.params.items()})

    def zero_output_projections(self) -> None:
        for k in IDENTITY_ZERO_FIELDS:
            self.params[k].assign(np.zeros_like(self.params[k].data))


class LinearDiT:
    """Noise-prediction model over grid tokens; blocks in depth order."""

    def __init__(self, cfg: ModelConfig, blocks: list[BlockParams],
                 embeds: dict[str, Parameter]):
        if len(blocks) != cfg.depth:
            raise ConfigError(f"{len(blocks)} blocks != depth {cfg.depth}")
        self.cfg = cfg
        self.blocks = blocks
        self.embeds = embeds
        self._rename()

    _EMBED_FIELDS = ("prompt", "prompt_pos", "position", "timestep",
                     "patch_in", "head_gain", "head_out")

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int, dtype=np.float32) -> "LinearDiT":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6D6F64]))
        e = {
            "prompt": rng.normal(0, INIT_STD, (cfg.vocab, cfg.d_model)),
            "prompt_pos": rng.normal(0, INIT_STD, (cfg.max_prompt_len, cfg.d_model)),
            "position": rng.normal(0, INIT_STD, (cfg.tokens, cfg.d_model)),
            "timestep": rng.normal(0, INIT_STD, (cfg.train_steps, cfg.d_model)),
            "patch_in": rng.normal(0, INIT_STD, (cfg.channels, cfg.d_model)),
            "head_gain": np.ones(cfg.d_model),
            "head_out": rng.normal(0, INIT_STD, (cfg.d_model, cfg.channels)),
        }
        embeds = {k: Parameter(v.astype(dtype), k) for k, v in e.items()}
        blocks = [BlockParams.random(cfg, rng, dtype=dtype) for _ in range(cfg.depth)]
        return cls(cfg, blocks, embeds)

    def _rename(self) -> None:
        for k, p in self.embeds.items():
            p.name = f"embed.{k}"
        for i, b in enumerate(self.blocks):
            for k, p in b.params.items():
                p.name = f"block{i:02d}.{k}"

    def parameters(self) -> list[Parameter]:
        out = [self.embeds[k] for k in self._EMBED_FIELDS]
        for b in self.blocks:
            out.extend(b.params[k] for k in BLOCK_FIELDS)
        return out

    @property
    def dtype(self):
        return self.embeds["patch_in"].dtype

    def copy(self) -> "LinearDiT":
        return LinearDiT(self.cfg,
                         [b.copy() for b in self.blocks],
                         {k: Parameter(v.data.copy(), k) for k, v in self.embeds.items()})

    def astype(self, dtype) -> "LinearDiT":
        m = self.copy()
        for p in m.parameters():
            p.data = p.data.astype(dtype)
        return m

    def with_blocks(self, blocks: list[BlockParams]) -> "LinearDiT":
        """New model with the given block list (copied) and copied embeddings."""
        cfg = self.cfg.with_depth(len(blocks))
        return LinearDiT(cfg, [b.copy() for b in blocks],
                         {k: Parameter(v.data.copy(), k) for k, v in self.embeds.items()})

    # ------------------------------------------------------------------
    # forward
    # ------------------------------------------------------------------

    def _check_prompt(self, tokens: np.ndarray) -> None:
        if tokens.ndim not in (1, 2) or tokens.shape[-1] == 0:
            raise InputError("prompt must hold at least one token")
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab:
            raise InputError(
                f"prompt token out of vocab [0, {self.cfg.vocab}): "
                f"{int(tokens.min())}..{int(tokens.max())}")

    def predict_noise(self, x_t, t, prompt_tokens, record_block_inputs=False):
        """Predicted noise for noisy grid tokens; same shape in and out.

        x_t: (tokens, channels) or (batch, tokens, channels).
        t: int or (batch,) ints in [0, train_steps).
        prompt_tokens: (len,) or (batch, len) ints; PAD_TOKEN rows are masked.
        Returns (eps_hat, records): records is the list of per-block inputs
        plus the final block output when record_block_inputs is set.
        """
        cfg = self.cfg
        xd = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t, dtype=self.dtype)
        single = xd.ndim == 2
        if single:
            xd = xd[None]
        B = xd.shape[0]
        if xd.shape[1] != cfg.tokens or xd.shape[2] != cfg.channels:
            raise InputError(f"x_t shape {xd.shape[1:]} != ({cfg.tokens}, {cfg.channels})")

        t_arr = np.asarray(t, dtype=np.int64).reshape(-1)
        if t_arr.size == 1:
            t_arr = np.full(B, t_arr[0], dtype=np.int64)
        if t_arr.min() < 0 or t_arr.max() >= cfg.train_steps:
            raise InputError(
                f"timestep out of [0, {cfg.train_steps}): {t_arr.min()}..{t_arr.max()}")

        tokens = np.asarray(prompt_tokens, dtype=np.int64)
        self._check_prompt(tokens)
        if tokens.ndim == 1:
            tokens = np.broadcast_to(tokens, (B, tokens.shape[0]))
        L = tokens.shape[1]
        if L > cfg.max_prompt_len:
            raise InputError(f"prompt length {L} > max {cfg.max_prompt_len}")

        x = Tensor(xd)
        h = matmul(x, self.embeds["patch_in"])
        h = add(h, self.embeds["position"])
        temb = embed(self.embeds["timestep"], t_arr)
        h = add(h, reshape(temb, (B, 1, cfg.d_model)))

        P = embed(self.embeds["prompt"], tokens)
        P = add(P, embed(self.embeds["prompt_pos"], np.arange(L)))

        mask = None
        if np.any(tokens == PAD_TOKEN):
            m = np.where(tokens == PAD_TOKEN, -1e9, 0.0).astype(self.dtype)
            mask = m[:, None, :]                      # (B, 1, L)

        records = [h.data] if record_block_inputs else None
        for blk in self.blocks:
            h = add(h, self._self_attention(rms_norm(h, blk["n1"]), blk))
            h = add(h, self._cross_attention(rms_norm(h, blk["n2"]), P, blk, mask))
            h = add(h, self._mlp(rms_norm(h, blk["n3"]), blk))
            if record_block_inputs:
                records.append(h.data)

        eps = matmul(rms_norm(h, self.embeds["head_gain"]), self.embeds["head_out"])
        if single:
            eps = reshape(eps, (cfg.tokens, cfg.channels))
        return eps, records

    def _self_attention(self, x: Tensor, blk: BlockParams) -> Tensor:
        """phi(Q)(phi(K)^T V) / (phi(Q)(phi(K)^T 1) + eps); never forms n x n."""
        q = matmul(x, blk["w_q"])
        k = matmul(x, blk["w_k"])
        if self.cfg.qk_norm:
            q = rms_norm(q, blk["g_q"])
            k = rms_norm(k, blk["g_k"])
        v = matmul(x, blk["w_v"])
        fq, fk = relu(q), relu(k)
        kv = matmul(transpose(fk), v)                 # (B, d, d)
        num = matmul(fq, kv)                          # (B, n, d)
        ksum = tsum(fk, axis=-2, keepdims=True)       # (B, 1, d)
        den = matmul(fq, transpose(ksum))             # (B, n, 1)
        o = div(num, add(den, ATTN_EPS))
        return matmul(o, blk["w_o"])

    def _cross_attention(self, x: Tensor, P: Tensor, blk: BlockParams,
                         mask=None) -> Tensor:
        q = matmul(x, blk["wc_q"])
        k = matmul(P, blk["wc_k"])
        if self.cfg.qk_norm:
            q = rms_norm(q, blk["gc_q"])
            k = rms_norm(k, blk["gc_k"])
        v = matmul(P, blk["wc_v"])
        logits = mul(matmul(q, transpose(k)), 1.0 / np.sqrt(self.cfg.d_model))
        if mask is not None:
            logits = add(logits, mask)
        a = softmax_rows(logits)
        return matmul(matmul(a, v), blk["wc_o"])

    def _mlp(self, x: Tensor, blk: BlockParams) -> Tensor:
        return matmul(relu(matmul(x, blk["w1"])), blk["w2"])

    # ------------------------------------------------------------------
    # sampling
    # ------------------------------------------------------------------

    def sample(self, prompt_tokens, steps: int = 20, seed: int = 0,
               record_timesteps=None):
        """Ancestral sampling from pure noise; grid in [0, 1], (tokens, ch).

        record_timesteps: optional set of training-timestep indices at which
        per-block inputs are recorded; returns (grid, {t: [X_0..X_depth]}).
        """
        grids, recs = self.sample_batch([prompt_tokens], steps, [seed],
                                        record_timesteps=record_timesteps)
        if record_timesteps is not None:
            return grids[0], {t: [x[0] for x in xs] for t, xs in recs.items()}
        return grids[0]

    def sample_batch(self, prompts: list, steps: int, seeds: list,
                     record_timesteps=None):
        """Batched sampling; each candidate draws from its own seeded stream."""
        if steps < 1:
            raise InputError(f"steps must be >= 1, got {steps}")
        if len(prompts) != len(seeds):
            raise InputError("prompts and seeds must align")
        cfg = self.cfg
        sched = Schedule.cosine(steps)
        t_model = sched.model_timesteps(cfg.train_steps)
        rngs = [np.random.default_rng(np.random.SeedSequence([int(s), 0x73616D]))
                for s in seeds]
        B = len(prompts)
        n, ch = cfg.tokens, cfg.channels
        x = np.stack([r.standard_normal((n, ch)) for r in rngs]).astype(self.dtype)
        tokens = _pad_prompts(prompts, cfg.max_prompt_len)

        records = {} if record_timesteps is not None else None
        probe = set(int(t) for t in record_timesteps) if record_timesteps else set()
        for i in range(steps - 1, -1, -1):
            t = int(t_model[i])
            want = records is not None and t in probe and t not in records
            eps_hat, recs = self.predict_noise(x, t, tokens,
                                               record_block_inputs=want)
            if want:
                records[t] = recs
            z = None
            if i > 0:
                z = np.stack([r.standard_normal((n, ch)) for r in rngs]).astype(self.dtype)
            x = sched.posterior_step(x, eps_hat.data, i, z)
        grids = np.clip((x + 1.0) / 2.0, 0.0, 1.0)
        return grids, records


def _pad_prompts(prompts: list, max_len: int) -> np.ndarray:
    """Right-pad integer prompt sequences with PAD_TOKEN into one array."""
    L = max(len(p) for p in prompts)
    if L == 0:
        raise InputError("prompt must hold at least one token")
    if L > max_len:
        raise InputError(f"prompt length {L} > max {max_len}")
    out = np.full((len(prompts), L), PAD_TOKEN, dtype=np.int64)
    for i, p in enumerate(prompts):
        out[i, :len(p)] = np.asarray(p, dtype=np.int64)
    return out


def diffusion_loss(model: LinearDiT, x_t, t, prompt_tokens, eps) -> tuple:
    """MSE between predicted and true noise; returns (loss, eps_hat)."""
    eps_hat, _ = model.predict_noise(x_t, t, prompt_tokens)
    return T.mse(eps_hat, Tensor(np.asarray(eps, dtype=model.dtype))), eps_hat
