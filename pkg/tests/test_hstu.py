import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfgr.autograd import Tensor, no_grad
from dfgr.hstu import (
    ContractError,
    HstuConfig,
    HstuParams,
    attention_context,
    fake_flow_layer,
    forward_candidates,
    forward_dfgr,
    forward_single,
    oracle_per_target,
    position_buckets,
    project,
    rab,
    real_flow_layer,
    time_buckets,
)
from dfgr.masking import candidate_block_mask, causal_mask, session_mask
from dfgr.sequence import (
    Candidate,
    build_dfgr,
    build_inference,
    build_sfgr_samples,
)
from helpers import random_encoder, random_sequence


def silu(x):
    return x / (1.0 + np.exp(-x))


def loop_layer(x, allow, pos, ts, p: HstuParams, cfg: HstuConfig):
    """Scalar-loop reference of one standard block on a single sequence."""
    T, D = x.shape
    H, d = cfg.heads, cfg.head_dim
    proj = silu(x @ p.W1.data + p.b1.data)
    U, V, Q, K = proj[:, :D], proj[:, D:2 * D], proj[:, 2 * D:3 * D], proj[:, 3 * D:]
    out = np.zeros((T, D))
    for h in range(H):
        sl = slice(h * d, (h + 1) * d)
        for i in range(T):
            acc = np.zeros(d)
            for j in range(T):
                if not allow[i, j]:
                    continue
                bp = min(abs(int(pos[i]) - int(pos[j])), cfg.pos_buckets - 1)
                dt = int(ts[i]) - int(ts[j])
                bt = min(max(int(np.floor(np.log2(max(dt, 0) + 1))), 0), cfg.time_buckets - 1)
                s = float(Q[i, sl] @ K[j, sl]) + p.rab_pos.data[h, bp] + p.rab_time.data[h, bt]
                acc += silu(s) * V[j, sl]
            out[i, sl] = acc
    mu = out.mean(axis=1, keepdims=True)
    var = ((out - mu) ** 2).mean(axis=1, keepdims=True)
    normed = (out - mu) / np.sqrt(var + 1e-6) * p.norm_gain.data + p.norm_bias.data
    y = (normed * U) @ p.W2.data + p.b2.data
    return x + y if cfg.residual else y


def randomize(p: HstuParams, rng, scale=0.3):
    for _, t in p.named_parameters():
        t.data = rng.normal(0.0, scale, size=t.shape)


def layer_setup(rng, T=6, D=8, H=2, residual=True, sessions=None):
    cfg = HstuConfig(dim=D, heads=H, layers=1, residual=residual)
    p = HstuParams(cfg, rng)
    randomize(p, rng)
    x = rng.normal(size=(T, D))
    sess = np.array(sessions if sessions is not None else [-1] + list(range(T - 1)))
    allow = session_mask(sess)
    pos = np.arange(T)
    ts = np.cumsum(rng.integers(0, 5000, size=T))
    return cfg, p, x, allow, pos, ts


class TestBuckets:
    def test_position_buckets(self):
        b = position_buckets(np.array([0, 1, 5, 300]), 128)
        assert b[3].tolist() == [127, 127, 127, 0]
        assert b[2, 1] == 4 and b[1, 2] == 4

    @pytest.mark.parametrize(
        "dt,bucket", [(0, 0), (1, 1), (2, 1), (3, 2), (7, 3), (1023, 10), (10**9, 29), (2**40, 31)]
    )
    def test_time_buckets(self, dt, bucket):
        assert time_buckets(np.array([0, dt]), 32)[1, 0] == bucket

    def test_negative_dt_rejected(self):
        with pytest.raises(ContractError):
            time_buckets(np.array([10, 5]), 32)

    def test_zero_tables_zero_bias(self, rng):
        cfg, p, x, allow, pos, ts = layer_setup(rng)
        p.rab_pos.data[:] = 0
        p.rab_time.data[:] = 0
        ctx = attention_context(allow, pos, ts, cfg)
        assert not rab(ctx, p).data.any()

    def test_diagonal_uses_bucket_zero(self, rng):
        cfg, p, x, allow, pos, ts = layer_setup(rng)
        bias = rab(attention_context(allow, pos, ts, cfg), p).data
        for h in range(cfg.heads):
            np.testing.assert_array_equal(
                np.diagonal(bias[h]), np.full(len(pos), p.rab_pos.data[h, 0] + p.rab_time.data[h, 0])
            )

    def test_candidates_share_bias_rows(self, small_encoder, seq_432):
        (b,) = build_inference(seq_432, [Candidate(i) for i in range(3)], small_encoder.tables, 3, 10**7)
        ctx = attention_context(candidate_block_mask(b.roles, b.session_ids), b.positions, b.timestamps,
                                small_encoder.cfg)
        bias = rab(ctx, small_encoder.layers[0]).data
        hist = slice(0, seq_432.n + 1)
        np.testing.assert_array_equal(bias[:, -1, hist], bias[:, -2, hist])
        np.testing.assert_array_equal(bias[:, -1, hist], bias[:, -3, hist])

    def test_decreasing_positions_rejected(self, rng):
        cfg = HstuConfig(dim=4, heads=1, layers=1)
        with pytest.raises(ContractError):
            attention_context(causal_mask(3), np.array([0, 2, 1]), np.zeros(3, dtype=int), cfg)


class TestProject:
    def test_zero_weights(self, rng):
        cfg = HstuConfig(dim=4, heads=2, layers=1)
        p = HstuParams(cfg, rng)
        p.W1.data[:] = 0
        for part in project(Tensor(rng.normal(size=(3, 4))), p):
            assert not part.data.any()

    def test_stacked_identity(self, rng):
        cfg = HstuConfig(dim=4, heads=2, layers=1)
        p = HstuParams(cfg, rng)
        p.W1.data = np.hstack([np.eye(4)] * 4)
        x = rng.normal(size=(1, 4))
        for part in project(Tensor(x), p):
            np.testing.assert_allclose(part.data, silu(x), atol=1e-15)

    def test_order_is_u_v_q_k(self, rng):
        cfg, p, x, *_ = layer_setup(rng)
        full = silu(x @ p.W1.data + p.b1.data)
        for k, part in enumerate(project(Tensor(x), p)):
            np.testing.assert_allclose(part.data, full[:, 8 * k:8 * (k + 1)], atol=1e-14)

    def test_width_mismatch(self, rng):
        cfg, p, *_ = layer_setup(rng)
        with pytest.raises(ContractError, match="width"):
            project(Tensor(np.ones((2, 5))), p)

    def test_heads_must_divide_dim(self):
        with pytest.raises(ContractError):
            HstuConfig(dim=6, heads=4)


class TestRealFlowLayer:
    @pytest.mark.parametrize("residual", [True, False])
    def test_matches_loop_reference(self, rng, residual):
        cfg, p, x, allow, pos, ts = layer_setup(rng, T=7, sessions=[-1, 0, 0, 1, 1, 1, 2], residual=residual)
        y, _ = real_flow_layer(Tensor(x), attention_context(allow, pos, ts, cfg), p, cfg)
        np.testing.assert_allclose(y.data, loop_layer(x, allow, pos, ts, p, cfg), rtol=0, atol=1e-12)

    def test_zero_w1_gives_residual_only(self, rng):
        cfg, p, x, allow, pos, ts = layer_setup(rng)
        p.W1.data[:] = 0
        p.b1.data[:] = 0
        y, _ = real_flow_layer(Tensor(x), attention_context(allow, pos, ts, cfg), p, cfg)
        np.testing.assert_allclose(y.data, x + p.b2.data, atol=0)

    def test_t1_scalar_chain(self, rng):
        cfg = HstuConfig(dim=2, heads=1, layers=1, residual=False)
        p = HstuParams(cfg, rng)
        randomize(p, rng)
        x = rng.normal(size=(1, 2))
        y, _ = real_flow_layer(Tensor(x), attention_context(causal_mask(1), [0], [0], cfg), p, cfg)
        u, v, q, k = np.split(silu(x[0] @ p.W1.data + p.b1.data), 4)
        a = silu(q @ k + p.rab_pos.data[0, 0] + p.rab_time.data[0, 0]) * v
        h = (a - a.mean()) / np.sqrt(a.var() + 1e-6) * p.norm_gain.data + p.norm_bias.data
        np.testing.assert_allclose(y.data[0], (h * u) @ p.W2.data + p.b2.data, atol=1e-14)

    def test_masked_key_equals_dropping_it(self, rng):
        cfg, p, x, allow, pos, ts = layer_setup(rng, T=6)
        allow = allow.copy()
        allow[5, 2] = False
        y, _ = real_flow_layer(Tensor(x), attention_context(allow, pos, ts, cfg), p, cfg)
        keep = [0, 1, 3, 4, 5]
        sub = allow[np.ix_(keep, keep)]
        ysub, _ = real_flow_layer(Tensor(x[keep]), attention_context(sub, pos[keep], ts[keep], cfg), p, cfg)
        np.testing.assert_allclose(y.data[5], ysub.data[-1], rtol=0, atol=1e-13)

    def test_masked_key_ignores_huge_scores(self, rng):
        cfg, p, x, allow, pos, ts = layer_setup(rng, T=4, sessions=[-1, 0, 0, 0])
        ctx = attention_context(allow, pos, ts, cfg)
        y0, _ = real_flow_layer(Tensor(x), ctx, p, cfg)
        x2 = x.copy()
        x2[2] *= 1e3
        y1, _ = real_flow_layer(Tensor(x2), ctx, p, cfg)
        np.testing.assert_array_equal(y0.data[3], y1.data[3])

    def test_batched_matches_single(self, rng):
        cfg, p, x, allow, pos, ts = layer_setup(rng, T=5)
        ctx1 = attention_context(allow, pos, ts, cfg)
        ctxb = attention_context(np.stack([allow, allow]), np.stack([pos, pos]), np.stack([ts, ts]), cfg)
        y1, _ = real_flow_layer(Tensor(x), ctx1, p, cfg)
        yb, _ = real_flow_layer(Tensor(np.stack([x, 2 * x])), ctxb, p, cfg)
        np.testing.assert_allclose(yb.data[0], y1.data, atol=1e-14)

    def test_scale_by_length_flag(self, rng):
        cfg, p, x, allow, pos, ts = layer_setup(rng, T=5)
        cfg.scale_by_length = True
        cfg.residual = False
        y, _ = real_flow_layer(Tensor(x), attention_context(allow, pos, ts, cfg), p, cfg)
        assert np.isfinite(y.data).all()


class TestFakeFlowLayer:
    def test_coinciding_flows_are_bit_identical(self, rng):
        cfg, p, x, allow, pos, ts = layer_setup(rng, T=6, sessions=[-1, 0, 0, 1, 1, 2])
        ctx = attention_context(allow, pos, ts, cfg)
        yr, kv = real_flow_layer(Tensor(x), ctx, p, cfg)
        yf = fake_flow_layer(Tensor(x), kv, ctx, p, cfg)
        np.testing.assert_allclose(yf.data, yr.data, rtol=0, atol=1e-15)

    def test_t1_uses_only_fake_token(self, rng):
        cfg, p, x, allow, pos, ts = layer_setup(rng, T=1, sessions=[0])
        ctx = attention_context(allow, pos, ts, cfg)
        _, kv = real_flow_layer(Tensor(x), ctx, p, cfg)
        xf = rng.normal(size=(1, 8))
        yf = fake_flow_layer(Tensor(xf), kv, ctx, p, cfg)
        yref, _ = real_flow_layer(Tensor(xf), ctx, p, cfg)
        np.testing.assert_allclose(yf.data, yref.data, atol=1e-15)

    def test_cache_length_mismatch(self, rng):
        cfg, p, x, allow, pos, ts = layer_setup(rng, T=4)
        ctx = attention_context(allow, pos, ts, cfg)
        _, (k, v) = real_flow_layer(Tensor(x), ctx, p, cfg)
        with pytest.raises(ContractError, match="cache"):
            fake_flow_layer(Tensor(x[:3]), (k, v), ctx, p, cfg)


class TestEncoder:
    def test_zero_layers_identity(self, rng, seq_432):
        enc = random_encoder(rng, 8, 2, 1, True)
        enc.layers = []
        real, fake = build_dfgr(seq_432, enc.tables)
        Yf, _ = forward_dfgr(real, fake, enc)
        np.testing.assert_array_equal(Yf.data, fake.X.data)
        np.testing.assert_array_equal(forward_single(real, enc).data, real.X.data)

    def test_zero_action_table_fake_equals_real(self, small_encoder, seq_432):
        small_encoder.tables.action.data[:] = 0
        real, fake = build_dfgr(seq_432, small_encoder.tables)
        Yf, cache = forward_dfgr(real, fake, small_encoder)
        np.testing.assert_allclose(Yf.data, cache.real_output.data, rtol=0, atol=1e-14)

    def test_real_flow_equals_forward_single(self, small_encoder, seq_432):
        real, fake = build_dfgr(seq_432, small_encoder.tables)
        _, cache = forward_dfgr(real, fake, small_encoder)
        np.testing.assert_array_equal(cache.real_output.data, forward_single(real, small_encoder).data)
        assert len(cache.layers) == 2

    @pytest.mark.parametrize("residual", [True, False])
    @pytest.mark.parametrize("layers", [1, 2, 4])
    def test_oracle_equivalence(self, rng, residual, layers):
        enc = random_encoder(rng, 8, 2, layers, residual)
        seq = random_sequence(rng, 20)
        real, fake = build_dfgr(seq, enc.tables)
        with no_grad():
            Yf, _ = forward_dfgr(real, fake, enc)
            for t in range(1, seq.n + 1):
                np.testing.assert_allclose(oracle_per_target(seq, t, enc).data, Yf.data[t], rtol=0, atol=1e-10)

    def test_keep_diagonal_fault_is_caught(self, rng, seq_432):
        enc = random_encoder(rng, 8, 2, 2, True)
        real, fake = build_dfgr(seq_432, enc.tables)
        Yf, _ = forward_dfgr(real, fake, enc, fault="keep_diagonal")
        diffs = [np.abs(oracle_per_target(seq_432, t, enc).data - Yf.data[t]).max() for t in range(1, 10)]
        assert max(diffs) > 1e-6

    def test_oracle_range(self, small_encoder, seq_432):
        with pytest.raises(ContractError):
            oracle_per_target(seq_432, 0, small_encoder)
        with pytest.raises(ContractError):
            oracle_per_target(seq_432, 10, small_encoder)

    def test_oracle_t6_masks_same_session(self, small_encoder, seq_432):
        # t=6 opens session 1; changing interaction 5 (session 0) must matter,
        # while t=7 must ignore interaction 6 (same session)
        base = oracle_per_target(seq_432, 7, small_encoder).data
        its = list(seq_432.interactions)
        its[5] = type(its[5])(its[5].item_id + 1, 1 - its[5].action, its[5].timestamp, its[5].session_id, its[5].slots)
        other = type(seq_432)(0, its, seq_432.profile_slots)
        np.testing.assert_array_equal(oracle_per_target(other, 7, small_encoder).data, base)

    def test_sfgr_dfgr_consistency(self, small_encoder, seq_432):
        real, fake = build_dfgr(seq_432, small_encoder.tables)
        Yf, _ = forward_dfgr(real, fake, small_encoder)
        t = 1
        for sample in build_sfgr_samples(seq_432, small_encoder.tables):
            Y = forward_single(sample, small_encoder)
            for idx in np.flatnonzero(sample.label_mask):
                np.testing.assert_allclose(Y.data[idx], Yf.data[t], rtol=0, atol=1e-10)
                t += 1
        assert t == 10

    def test_flow_mismatch_rejected(self, small_encoder, seq_432):
        real, fake = build_dfgr(seq_432, small_encoder.tables)
        fake.timestamps = fake.timestamps + 1
        with pytest.raises(ContractError):
            forward_dfgr(real, fake, small_encoder)

    def test_weight_sharing(self, small_encoder, seq_432):
        small_encoder.tables.action.data[:] = 0
        real, fake = build_dfgr(seq_432, small_encoder.tables)
        small_encoder.layers[0].W2.data *= 1.7
        Yf, cache = forward_dfgr(real, fake, small_encoder)
        np.testing.assert_allclose(Yf.data, cache.real_output.data, atol=1e-14)


def candidate_states(enc, seq, cands):
    (b,) = build_inference(seq, cands, enc.tables, len(cands), seq.interactions[-1].timestamp + 10)
    return forward_candidates(b, enc).data


def test_candidate_path_matches_masked_forward(rng, small_encoder, seq_432):
    cands = [Candidate(int(i)) for i in rng.integers(0, 30, size=5)]
    (b,) = build_inference(seq_432, cands, small_encoder.tables, 5, 10**5)
    full = forward_single(b, small_encoder, candidate_block_mask(b.roles, b.session_ids)).data[-5:]
    np.testing.assert_allclose(forward_candidates(b, small_encoder).data, full, rtol=0, atol=1e-12)


def test_candidate_order_invariance(rng, small_encoder, seq_432):
    cands = [Candidate(int(i), {"category": int(i % 5)}) for i in rng.integers(0, 30, size=6)]
    base = candidate_states(small_encoder, seq_432, cands)
    for _ in range(5):
        perm = rng.permutation(6)
        got = candidate_states(small_encoder, seq_432, [cands[i] for i in perm])
        assert np.array_equal(got, base[perm])


def _perturb(it, **kw):
    fields = dict(item_id=it.item_id, action=it.action, timestamp=it.timestamp,
                  session_id=it.session_id, slots=it.slots)
    fields.update(kw)
    return type(it)(**fields)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_leakage_property(seed):
    rng = np.random.default_rng(seed)
    enc = random_encoder(rng, 8, 2, 2, bool(seed % 2))
    seq = random_sequence(rng, int(rng.integers(2, 16)))
    real, fake = build_dfgr(seq, enc.tables)
    with no_grad():
        base, _ = forward_dfgr(real, fake, enc)
        t = int(rng.integers(1, seq.n + 1))
        its = list(seq.interactions)
        its[t - 1] = _perturb(its[t - 1], action=1 - its[t - 1].action)
        for j in range(t, seq.n):
            its[j] = _perturb(its[j], item_id=int(rng.integers(0, 30)), action=1 - its[j].action)
        sess = seq.interactions[t - 1].session_id
        for j in range(t - 1):
            if its[j].session_id == sess:
                its[j] = _perturb(its[j], item_id=int(rng.integers(0, 30)), slots={"category": 0, "hour": 1})
        other = type(seq)(seq.user_id, its, seq.profile_slots)
        r2, f2 = build_dfgr(other, enc.tables)
        got, _ = forward_dfgr(r2, f2, enc)
    assert np.array_equal(got.data[t], base.data[t])
