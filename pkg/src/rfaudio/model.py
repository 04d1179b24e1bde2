"""Velocity network: a small transformer over latent frames.

Input tokens are per-frame concatenations of the noisy latent with the
frame-conditioning stream fused with a time embedding.  Each block runs
self-attention over frames, cross-attention against the variable-length
context stream (skipped when the context is empty), and an MLP, all as
pre-layernorm residual sublayers.  The final projection back to latent
width is zero-initialized so an untrained model predicts zero velocity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concatenate,
    gelu,
    layer_norm,
    matmul,
    mul,
    no_grad,
    reshape,
    scaled_dot_product_attention,
    stack,
    transpose,
)
from .conditioning import (
    Conditioner,
    ConditioningBundle,
    ToyTokenProvider,
)
from .optim import ParamStore

#: additive attention-score penalty for padded context keys
MASK_PENALTY = -1e9


@dataclass(frozen=True)
class ModelConfig:
    """Shapes of the velocity network and its conditioning streams.

    The desk-scale defaults (4 blocks, width 64, 4 heads) are what every
    experiment and test runs; ``full_scale`` records the production
    shape (36 blocks, width 2048, 32 heads), which is far outside desk
    budgets and is never instantiated by the test suite.
    """

    d_lat: int = 100
    d_mel: int = 100
    d_sync: int = 8
    d_mm: int = 16
    d_trans: int = 16
    d_high: int = 32
    width: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    time_basis: int = 64

    def __post_init__(self) -> None:
        for name in (
            "d_lat", "d_mel", "d_sync", "d_mm", "d_trans", "d_high",
            "width", "depth", "heads", "mlp_ratio", "time_basis",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.time_basis % 2:
            raise ValueError("time_basis must be even")

    @property
    def d_low(self) -> int:
        return self.d_sync + self.d_mel

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        base = dict(
            d_lat=100, d_mel=100, d_sync=8, d_mm=2048, d_trans=512,
            d_high=2048, width=2048, depth=36, heads=32,
        )
        base.update(overrides)
        return cls(**base)


def time_features(t: float, dim: int) -> np.ndarray:
    """Sinusoidal features ``[sin(t*w_i)..., cos(t*w_i)...]``.

    The ``dim // 2`` angular rates run geometrically from 1 to 1e4.  At
    ``t = 0`` the sin half is all zeros and the cos half all ones.
    """
    if dim < 2 or dim % 2:
        raise ValueError(f"time feature dim must be even and >= 2, got {dim}")
    rates = np.geomspace(1.0, 1e4, dim // 2)
    phase = float(t) * rates
    return np.concatenate([np.sin(phase), np.cos(phase)])


class TimeEmbedding:
    """Sinusoidal time features refined by a learned 2-layer MLP."""

    def __init__(
        self,
        store: ParamStore,
        basis_dim: int,
        d_out: int,
        rng: np.random.Generator,
        dtype=np.float32,
    ) -> None:
        self.basis_dim = int(basis_dim)
        self.d_out = int(d_out)

        def make(name, arr):
            return store.create(f"time.{name}", arr.astype(dtype)).tensor

        self.w1 = make("w1", rng.standard_normal((basis_dim, basis_dim)) / np.sqrt(basis_dim))
        self.b1 = make("b1", np.zeros(basis_dim))
        self.w2 = make("w2", rng.standard_normal((basis_dim, d_out)) / np.sqrt(basis_dim))
        self.b2 = make("b2", np.zeros(d_out))

    def embed_batch(self, ts) -> Tensor:
        """Embed a vector of times into ``[len(ts), d_out]``."""
        feats = np.stack([time_features(t, self.basis_dim) for t in np.atleast_1d(ts)])
        feats = Tensor(feats.astype(self.w1.data.dtype))
        h = gelu(add(matmul(feats, self.w1), self.b1))
        return add(matmul(h, self.w2), self.b2)


class FlowModel:
    """The velocity network plus its conditioning front end.

    All trainable parameters (transformer, time MLP, transcript encoder,
    adapters, and the optional toy token table) live in one named store
    so the optimizer and checkpoints see a single flat list.
    """

    def __init__(
        self,
        config: ModelConfig,
        seed: int = 0,
        toy_vocab=None,
        mm_provider=None,
        sync_provider=None,
        dtype=np.float32,
    ) -> None:
        if toy_vocab is not None and mm_provider is not None:
            raise ValueError("pass either toy_vocab or mm_provider, not both")
        self.config = config
        self.dtype = dtype
        self.params = ParamStore()
        self.step = 0
        self.forward_count = 0
        self.toy_vocab = list(toy_vocab) if toy_vocab is not None else None
        rng = np.random.default_rng(seed)

        if self.toy_vocab is not None:
            mm_provider = ToyTokenProvider(
                self.toy_vocab, config.d_mm, self.params, rng, dtype=dtype
            )
        self.conditioner = Conditioner(
            self.params,
            d_high=config.d_high,
            d_mm=config.d_mm,
            d_trans=config.d_trans,
            d_sync=config.d_sync,
            d_mel=config.d_mel,
            rng=rng,
            mm_provider=mm_provider,
            sync_provider=sync_provider,
            dtype=dtype,
        )
        self.time_embed = TimeEmbedding(
            self.params, config.time_basis, config.d_low, rng, dtype
        )

        W, H = config.width, config.d_high
        d_in = config.d_lat + config.d_low

        def make(name, arr):
            return self.params.create(f"dit.{name}", arr.astype(dtype)).tensor

        def lin(d0, d1):
            return rng.standard_normal((d0, d1)) / np.sqrt(d0)

        self.in_w = make("in.w", lin(d_in, W))
        self.in_b = make("in.b", np.zeros(W))
        self.blocks = []
        for i in range(config.depth):
            blk = {}
            for ln in ("ln1", "ln2", "ln3"):
                blk[f"{ln}_g"] = make(f"block{i}.{ln}.g", np.ones(W))
                blk[f"{ln}_b"] = make(f"block{i}.{ln}.b", np.zeros(W))
            for proj in ("q", "k", "v", "o", "cq", "co"):
                blk[f"{proj}_w"] = make(f"block{i}.{proj}.w", lin(W, W))
                blk[f"{proj}_b"] = make(f"block{i}.{proj}.b", np.zeros(W))
            for proj in ("ck", "cv"):
                blk[f"{proj}_w"] = make(f"block{i}.{proj}.w", lin(H, W))
                blk[f"{proj}_b"] = make(f"block{i}.{proj}.b", np.zeros(W))
            blk["mlp_w1"] = make(f"block{i}.mlp.w1", lin(W, config.mlp_ratio * W))
            blk["mlp_b1"] = make(f"block{i}.mlp.b1", np.zeros(config.mlp_ratio * W))
            blk["mlp_w2"] = make(f"block{i}.mlp.w2", lin(config.mlp_ratio * W, W))
            blk["mlp_b2"] = make(f"block{i}.mlp.b2", np.zeros(W))
            self.blocks.append(blk)
        self.final_g = make("final_ln.g", np.ones(W))
        self.final_b = make("final_ln.b", np.zeros(W))
        self.out_w = make("out.w", np.zeros((W, config.d_lat)))
        self.out_b = make("out.b", np.zeros(config.d_lat))

    # -- forward ----------------------------------------------------------

    def _heads(self, x: Tensor, B: int, T: int) -> Tensor:
        cfg = self.config
        return transpose(reshape(x, (B, T, cfg.heads, cfg.head_dim)), (0, 2, 1, 3))

    def _merge(self, x: Tensor, B: int, T: int) -> Tensor:
        return reshape(transpose(x, (0, 2, 1, 3)), (B, T, self.config.width))

    def _forward(
        self,
        x_t: Tensor,
        t_vec,
        high_tokens: Tensor | None,
        high_valid: np.ndarray | None,
        low: Tensor,
    ) -> Tensor:
        """Batched core: ``[B, T, d_lat]`` plus conditioning to ``[B, T, d_lat]``."""
        self.forward_count += 1
        cfg = self.config
        B, T, _ = x_t.data.shape

        te = reshape(self.time_embed.embed_batch(t_vec), (B, 1, cfg.d_low))
        tokens = concatenate([x_t, add(low, te)], axis=-1)
        x = add(matmul(tokens, self.in_w), self.in_b)

        mask = None
        indicator = None
        if high_tokens is not None:
            L = high_tokens.data.shape[1]
            if not high_valid.all():
                mask = np.where(high_valid[:, None, None, :], 0.0, MASK_PENALTY)
                mask = mask.astype(x.data.dtype)
                per_item = high_valid.any(axis=1)
                if not per_item.all():
                    indicator = Tensor(
                        per_item.astype(x.data.dtype).reshape(B, 1, 1)
                    )

        for blk in self.blocks:
            h = layer_norm(x, blk["ln1_g"], blk["ln1_b"])
            q = self._heads(add(matmul(h, blk["q_w"]), blk["q_b"]), B, T)
            k = self._heads(add(matmul(h, blk["k_w"]), blk["k_b"]), B, T)
            v = self._heads(add(matmul(h, blk["v_w"]), blk["v_b"]), B, T)
            att = self._merge(scaled_dot_product_attention(q, k, v), B, T)
            x = add(x, add(matmul(att, blk["o_w"]), blk["o_b"]))

            if high_tokens is not None:
                h = layer_norm(x, blk["ln2_g"], blk["ln2_b"])
                q = self._heads(add(matmul(h, blk["cq_w"]), blk["cq_b"]), B, T)
                L = high_tokens.data.shape[1]
                ck = add(matmul(high_tokens, blk["ck_w"]), blk["ck_b"])
                cv = add(matmul(high_tokens, blk["cv_w"]), blk["cv_b"])
                ck = self._heads(ck, B, L)
                cv = self._heads(cv, B, L)
                att = self._merge(
                    scaled_dot_product_attention(q, ck, cv, mask=mask), B, T
                )
                out = add(matmul(att, blk["co_w"]), blk["co_b"])
                if indicator is not None:
                    out = mul(out, indicator)
                x = add(x, out)

            h = layer_norm(x, blk["ln3_g"], blk["ln3_b"])
            h = gelu(add(matmul(h, blk["mlp_w1"]), blk["mlp_b1"]))
            h = add(matmul(h, blk["mlp_w2"]), blk["mlp_b2"])
            x = add(x, h)

        h = layer_norm(x, self.final_g, self.final_b)
        return add(matmul(h, self.out_w), self.out_b)

    def predict_velocity(self, x_t, t: float, bundle: ConditioningBundle) -> np.ndarray:
        """Tape-free single-example forward, returned as float64."""
        with no_grad():
            out = dit_forward(x_t, t, bundle, self)
        return np.asarray(out.data, dtype=np.float64)


def dit_forward(x_t, t: float, bundle: ConditioningBundle, model: FlowModel) -> Tensor:
    """Predicted velocity for one example; shape equals the latent shape.

    Cross-attention is skipped entirely when the context stream is empty,
    so the unconditional pass is the same network minus those sublayers.
    """
    x = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t))
    if x.data.ndim != 2:
        raise ValueError(f"latent must be [T, d_lat], got shape {x.data.shape}")
    T, d = x.data.shape
    cfg = model.config
    if d != cfg.d_lat:
        raise ValueError(f"latent width {d} does not match model d_lat {cfg.d_lat}")
    if bundle.low.frame_count != T:
        raise ValueError(
            f"frame stream has {bundle.low.frame_count} frames, latent has {T}"
        )
    if bundle.low.width != cfg.d_low:
        raise ValueError(
            f"frame stream width {bundle.low.width} does not match d_low {cfg.d_low}"
        )
    high_tokens = None
    high_valid = None
    if bundle.high.length > 0:
        if bundle.high.width != cfg.d_high:
            raise ValueError(
                f"context width {bundle.high.width} does not match d_high {cfg.d_high}"
            )
        high_tokens = reshape(bundle.high.tokens, (1, bundle.high.length, cfg.d_high))
        high_valid = bundle.high.validity[None]
    low = Tensor(bundle.low.frames[None])
    out = model._forward(reshape(x, (1, T, d)), np.array([t]), high_tokens, high_valid, low)
    return reshape(out, (T, d))


def collate_bundles(bundles, dtype=np.float32):
    """Batch bundles: stacked frame streams, padded context, validity.

    Context sequences are zero-padded to the longest length with their
    validity masks extended by False; gradients still flow into each
    item's real tokens.  Returns ``(high_tokens, high_valid, low)`` where
    the first two are None when every context is empty.
    """
    Ts = {b.low.frame_count for b in bundles}
    if len(Ts) != 1:
        raise ValueError(f"bundles must share one frame count, got {sorted(Ts)}")
    widths = {b.low.width for b in bundles}
    if len(widths) != 1:
        raise ValueError(f"bundles must share one frame width, got {sorted(widths)}")
    low = Tensor(np.stack([b.low.frames for b in bundles]).astype(dtype))

    l_max = max(b.high.length for b in bundles)
    if l_max == 0:
        return None, None, low
    d_high = {b.high.width for b in bundles}
    if len(d_high) != 1:
        raise ValueError(f"context widths differ: {sorted(d_high)}")
    (dh,) = d_high
    padded = []
    valid = np.zeros((len(bundles), l_max), dtype=bool)
    for i, b in enumerate(bundles):
        tok = b.high.tokens
        L = b.high.length
        if L < l_max:
            pad = Tensor(np.zeros((l_max - L, dh), dtype=tok.data.dtype))
            tok = concatenate([tok, pad], axis=0) if L else pad
        padded.append(tok)
        valid[i, :L] = b.high.validity
    return stack(padded, axis=0), valid, low
