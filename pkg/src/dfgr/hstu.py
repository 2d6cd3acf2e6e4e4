"""HSTU blocks, the dual-flow encoder and its single-sequence oracle.

Tensor layout: activations are ``(..., T, D)`` with optional leading batch
axis; per-head tensors are ``(..., H, T, d)`` with heads in head-major order
so that merging back is a plain reshape.

Attention is ``silu((Q K^T + rab) * mask) V`` with no softmax and no
``1/sqrt(d)`` scaling. The whole pre-activation is zeroed at disallowed
entries, and ``silu(0) == 0``, so a masked key contributes exactly nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import (
    Tensor,
    gather_cols,
    get_default_dtype,
    layer_norm,
    silu,
    split,
    tsum,
)
from .heads import HeadParams
from .masking import candidate_block_mask, causal_mask, check_mask, session_mask
from .sequence import (
    FAKE_ACTION,
    Role,
    EmbeddingTables,
    TokenBatch,
    UserSequence,
    layout_dfgr,
    to_batch,
)


class ContractError(ValueError):
    pass


@dataclass
class HstuConfig:
    dim: int = 32
    heads: int = 2
    layers: int = 2
    pos_buckets: int = 128
    time_buckets: int = 32
    residual: bool = True
    session_mask: bool = True
    scale_by_length: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        if self.dim % self.heads:
            raise ContractError(f"dim {self.dim} is not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


class HstuParams:
    """Weights of one block. The fused projection output splits as (U, V, Q, K)."""

    def __init__(self, cfg: HstuConfig, rng: np.random.Generator):
        D, H = cfg.dim, cfg.heads
        std = cfg.init_std
        self.W1 = Tensor(rng.normal(0.0, std, size=(D, 4 * D)), requires_grad=True)
        self.b1 = Tensor(np.zeros(4 * D), requires_grad=True)
        self.W2 = Tensor(rng.normal(0.0, std, size=(D, D)), requires_grad=True)
        self.b2 = Tensor(np.zeros(D), requires_grad=True)
        self.norm_gain = Tensor(np.ones(D), requires_grad=True)
        self.norm_bias = Tensor(np.zeros(D), requires_grad=True)
        self.rab_pos = Tensor(np.zeros((H, cfg.pos_buckets)), requires_grad=True)
        self.rab_time = Tensor(np.zeros((H, cfg.time_buckets)), requires_grad=True)

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        names = ("W1", "b1", "W2", "b2", "norm_gain", "norm_bias", "rab_pos", "rab_time")
        return [(prefix + n, getattr(self, n)) for n in names]


class EncoderParams:
    def __init__(
        self,
        cfg: HstuConfig,
        item_vocab: int,
        num_actions: int = 2,
        slot_vocab: dict[str, int] | None = None,
        profile_vocab: dict[str, int] | None = None,
        seed: int = 0,
    ):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.tables = EmbeddingTables(
            cfg.dim, item_vocab, num_actions, slot_vocab, profile_vocab, rng=rng, std=cfg.init_std
        )
        self.layers = [HstuParams(cfg, rng) for _ in range(cfg.layers)]
        self.head = HeadParams(cfg.dim, rng=rng, std=cfg.init_std)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = list(self.tables.named_parameters())
        for i, layer in enumerate(self.layers):
            out += layer.named_parameters(f"layer{i}.")
        out += self.head.named_parameters()
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for n, t in self.named_parameters():
            t.data = np.array(snap[n], dtype=t.data.dtype)


# ---------------------------------------------------------------- attention context


def position_buckets(positions: np.ndarray, num_buckets: int) -> np.ndarray:
    p = np.asarray(positions, dtype=np.int64)
    delta = np.abs(p[..., :, None] - p[..., None, :])
    return np.minimum(delta, num_buckets - 1)


def time_buckets(timestamps: np.ndarray, num_buckets: int) -> np.ndarray:
    """``clamp(floor(log2(dt + 1)), 0, Q - 1)`` with ``dt = ts_query - ts_key``."""
    ts = np.asarray(timestamps, dtype=np.int64)
    dt = ts[..., :, None] - ts[..., None, :]
    T = ts.shape[-1]
    if ((dt < 0) & np.tril(np.ones((T, T), dtype=bool))).any():
        raise ContractError("a query's timestamp precedes an earlier key's timestamp")
    dt = np.maximum(dt, 0)
    b = np.floor(np.log2(dt.astype(np.float64) + 1.0)).astype(np.int64)
    return np.clip(b, 0, num_buckets - 1)


@dataclass
class AttentionContext:
    allow: np.ndarray
    weight: np.ndarray = field(repr=False)
    cross_weight: np.ndarray = field(repr=False)
    pos_bucket: np.ndarray = field(repr=False)
    time_bucket: np.ndarray = field(repr=False)

    @property
    def length(self) -> int:
        return self.allow.shape[-1]


def attention_context(
    allow: np.ndarray, positions: np.ndarray, timestamps: np.ndarray, cfg: HstuConfig
) -> AttentionContext:
    allow = np.asarray(allow, dtype=bool)
    check_mask(allow)
    positions = np.asarray(positions)
    if (np.diff(positions, axis=-1) < 0).any():
        raise ContractError("positions must be non-decreasing")
    T = allow.shape[-1]
    dtype = get_default_dtype()
    weight = allow[..., None, :, :].astype(dtype)
    cross = (allow & ~np.eye(T, dtype=bool))[..., None, :, :].astype(dtype)
    return AttentionContext(
        allow=allow,
        weight=weight,
        cross_weight=cross,
        pos_bucket=position_buckets(positions, cfg.pos_buckets),
        time_bucket=time_buckets(timestamps, cfg.time_buckets),
    )


def default_mask(session_ids: np.ndarray, cfg: HstuConfig) -> np.ndarray:
    if cfg.session_mask:
        return session_mask(session_ids)
    T = np.asarray(session_ids).shape[-1]
    return np.broadcast_to(causal_mask(T), np.asarray(session_ids).shape + (T,)).copy()


# ---------------------------------------------------------------- block pieces


def project(x: Tensor, p: HstuParams) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """``silu(x W1 + b1)`` split into (U, V, Q, K)."""
    D = p.W1.shape[0]
    if x.shape[-1] != D:
        raise ContractError(f"input width {x.shape[-1]} does not match model width {D}")
    u, v, q, k = split(silu(x @ p.W1 + p.b1), 4, axis=-1)
    return u, v, q, k


def split_heads(x: Tensor, H: int) -> Tensor:
    *lead, T, D = x.shape
    return x.reshape(*lead, T, H, D // H).swapaxes(-2, -3)


def merge_heads(x: Tensor) -> Tensor:
    *lead, H, T, d = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, T, H * d)


def rab(ctx: AttentionContext, p: HstuParams) -> Tensor:
    """Relative bias ``(..., H, T, T)`` from position and log-time buckets."""
    bias = gather_cols(p.rab_pos, ctx.pos_bucket) + gather_cols(p.rab_time, ctx.time_bucket)
    if bias.ndim == 4:
        bias = bias.swapaxes(0, 1)
    return bias


def _finish(attn_out: Tensor, u: Tensor, x: Tensor, p: HstuParams, cfg: HstuConfig) -> Tensor:
    h = layer_norm(merge_heads(attn_out), p.norm_gain, p.norm_bias)
    y = (h * u) @ p.W2 + p.b2
    return x + y if cfg.residual else y


def real_flow_layer(
    x: Tensor, ctx: AttentionContext, p: HstuParams, cfg: HstuConfig, bias: Tensor | None = None
) -> tuple[Tensor, tuple[Tensor, Tensor]]:
    """Standard HSTU block; also returns this layer's per-head (K, V)."""
    H = cfg.heads
    u, v, q, k = project(x, p)
    qh, kh, vh = split_heads(q, H), split_heads(k, H), split_heads(v, H)
    if bias is None:
        bias = rab(ctx, p)
    attn = silu((qh @ kh.swapaxes(-1, -2) + bias) * ctx.weight)
    if cfg.scale_by_length:
        attn = attn * (1.0 / ctx.length)
    return _finish(attn @ vh, u, x, p, cfg), (kh, vh)


def fake_flow_layer(
    xf: Tensor,
    cache_entry: tuple[Tensor, Tensor],
    ctx: AttentionContext,
    p: HstuParams,
    cfg: HstuConfig,
    bias: Tensor | None = None,
    fault: str | None = None,
) -> Tensor:
    """Placeholder-flow block reading real-flow (K, V) at allowed earlier keys.

    Query ``i`` combines a cross term over real keys ``j < i`` with a self
    term built from its own placeholder key and value at ``j == i``.
    ``fault="keep_diagonal"`` leaves the real diagonal in the cross term; it
    exists only to prove the oracle check catches that mistake.
    """
    kr, vr = cache_entry
    if kr.shape[-2] != xf.shape[-2]:
        raise ContractError(f"cache length {kr.shape[-2]} != fake-flow length {xf.shape[-2]}")
    H = cfg.heads
    u, v, q, k = project(xf, p)
    qh, kh, vh = split_heads(q, H), split_heads(k, H), split_heads(v, H)
    if bias is None:
        bias = rab(ctx, p)
    cross_w = ctx.weight if fault == "keep_diagonal" else ctx.cross_weight
    cross = silu((qh @ kr.swapaxes(-1, -2) + bias) * cross_w) @ vr
    diag_bias = p.rab_pos[:, 0:1] + p.rab_time[:, 0:1]
    self_score = tsum(qh * kh, axis=-1) + diag_bias
    self_term = silu(self_score).reshape(*self_score.shape, 1) * vh
    out = cross + self_term
    if cfg.scale_by_length:
        out = out * (1.0 / ctx.length)
    return _finish(out, u, xf, p, cfg)


# ---------------------------------------------------------------- encoders


@dataclass
class FlowCache:
    layers: list[tuple[Tensor, Tensor]]
    real_output: Tensor


def forward_single(
    batch: TokenBatch, enc: EncoderParams, mask: np.ndarray | None = None
) -> Tensor:
    """Stack of standard blocks over one sequence (or padded batch)."""
    if mask is None:
        mask = default_mask(batch.session_ids, enc.cfg)
    ctx = attention_context(mask, batch.positions, batch.timestamps, enc.cfg)
    x = batch.X
    for p in enc.layers:
        x, _ = real_flow_layer(x, ctx, p, enc.cfg)
    return x


def forward_dfgr(
    real: TokenBatch,
    fake: TokenBatch,
    enc: EncoderParams,
    mask: np.ndarray | None = None,
    fault: str | None = None,
) -> tuple[Tensor, FlowCache]:
    """Run both flows layer by layer; returns final placeholder-flow states."""
    if real.length != fake.length:
        raise ContractError("real and fake flows differ in length")
    if not (
        np.array_equal(real.positions, fake.positions)
        and np.array_equal(real.timestamps, fake.timestamps)
        and np.array_equal(real.session_ids, fake.session_ids)
    ):
        raise ContractError("real and fake flows must share positions, timestamps and sessions")
    if mask is None:
        mask = default_mask(real.session_ids, enc.cfg)
    ctx = attention_context(mask, real.positions, real.timestamps, enc.cfg)
    xr, xf = real.X, fake.X
    caches = []
    for p in enc.layers:
        bias = rab(ctx, p)
        xr_next, kv = real_flow_layer(xr, ctx, p, enc.cfg, bias=bias)
        xf = fake_flow_layer(xf, kv, ctx, p, enc.cfg, bias=bias, fault=fault)
        caches.append(kv)
        xr = xr_next
    return xf, FlowCache(caches, xr)


def oracle_per_target(seq: UserSequence, t: int, enc: EncoderParams) -> Tensor:
    """Hidden state for interaction ``t`` (1-based) from one explicit sequence.

    The sequence is the user token, interactions ``1..t-1`` with real actions
    and interaction ``t`` with the placeholder action; the answer is the
    final state at its last position.
    """
    if not 1 <= t <= seq.n:
        raise ContractError(f"t={t} out of range 1..{seq.n}")
    prefix = UserSequence(seq.user_id, seq.interactions[:t], seq.profile_slots)
    real, _ = layout_dfgr(prefix, enc.tables.slot_names, enc.tables.profile_names)
    actions = real.action_ids.copy()
    actions[-1] = FAKE_ACTION
    layout = real.replace_actions(actions)
    Y = forward_single(to_batch(layout, enc.tables), enc)
    return Y[-1]


def forward_candidates(batch: TokenBatch, enc: EncoderParams) -> Tensor:
    """Final states ``(m, D)`` of the candidate suffix of one inference sequence.

    The history runs as a standard stack; each candidate then reads history
    keys and values plus its own, with candidates laid along a leading axis
    so that every candidate goes through the same arithmetic regardless of
    its slot. Mathematically equal to :func:`forward_single` under the
    candidate block mask, and exactly permutation-equivariant.
    """
    roles = np.asarray(batch.roles)
    if roles.ndim != 1:
        raise ContractError("forward_candidates takes one unpadded sequence")
    allow = candidate_block_mask(roles, batch.session_ids)
    cand = np.flatnonzero(roles == Role.CANDIDATE)
    if cand.size == 0:
        raise ContractError("no candidate tokens")
    hist = np.arange(cand[0])
    if hist.size == 0:
        raise ContractError("candidates need at least the user token before them")
    cfg = enc.cfg
    full = attention_context(allow, batch.positions, batch.timestamps, cfg)
    hctx = attention_context(
        allow[np.ix_(hist, hist)], batch.positions[hist], batch.timestamps[hist], cfg
    )
    # per-candidate cross weights and bucket rows against history keys: (m, 1, 1, Th)
    cross_w = allow[np.ix_(cand, hist)][:, None, None, :].astype(get_default_dtype())
    pb = full.pos_bucket[np.ix_(cand, hist)][:, None, :]
    tb = full.time_bucket[np.ix_(cand, hist)][:, None, :]
    xh = batch.X[hist]
    xc = batch.X[cand].reshape(cand.size, 1, cfg.dim)
    H = cfg.heads
    for p in enc.layers:
        xh_next, (kr, vr) = real_flow_layer(xh, hctx, p, cfg)
        u, v, q, k = project(xc, p)
        qh, kh, vh = split_heads(q, H), split_heads(k, H), split_heads(v, H)
        # (H, m, 1, Th) -> (m, H, 1, Th)
        bias = (gather_cols(p.rab_pos, pb) + gather_cols(p.rab_time, tb)).swapaxes(0, 1)
        cross = silu((qh @ kr.swapaxes(-1, -2) + bias) * cross_w) @ vr
        self_score = tsum(qh * kh, axis=-1) + (p.rab_pos[:, 0:1] + p.rab_time[:, 0:1])
        out = cross + silu(self_score).reshape(*self_score.shape, 1) * vh
        if cfg.scale_by_length:
            out = out * (1.0 / full.length)
        xc = _finish(out, u, xc, p, cfg)
        xh = xh_next
    return xc.reshape(cand.size, cfg.dim)
