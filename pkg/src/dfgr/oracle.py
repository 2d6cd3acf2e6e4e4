"""Randomized dual-flow vs per-target oracle sweeps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import no_grad
from .hstu import EncoderParams, HstuConfig, forward_dfgr, oracle_per_target
from .sequence import Interaction, UserSequence, build_dfgr

SLOT_VOCAB = {"category": 5, "hour": 24}
PROFILE_VOCAB = {"segment": 3}
ITEM_VOCAB = 30


def random_sequence(rng: np.random.Generator, n: int, user_id: int = 0) -> UserSequence:
    """``n`` interactions split into random contiguous sessions."""
    its = []
    ts = int(rng.integers(0, 1000))
    sess = 0
    left = 0
    for _ in range(n):
        if left == 0:
            if its:
                sess += 1
                ts += int(rng.integers(0, 5000))
            left = int(rng.integers(1, 7))
        ts += int(rng.integers(0, 60))
        slots = {"category": int(rng.integers(0, 5)), "hour": int(rng.integers(0, 24))}
        its.append(Interaction(int(rng.integers(0, ITEM_VOCAB)), int(rng.integers(0, 2)), ts, sess, slots))
        left -= 1
    return UserSequence(user_id, its, {"segment": int(rng.integers(0, 3))})


def random_encoder(
    rng: np.random.Generator, dim: int, heads: int, layers: int, residual: bool, scale: float = 0.3
) -> EncoderParams:
    cfg = HstuConfig(dim=dim, heads=heads, layers=layers, residual=residual)
    enc = EncoderParams(cfg, ITEM_VOCAB, 2, SLOT_VOCAB, PROFILE_VOCAB, seed=int(rng.integers(2**31)))
    for _, p in enc.named_parameters():
        p.data = rng.normal(0.0, scale, size=p.shape)
    for layer in enc.layers:
        layer.norm_gain.data = 1.0 + rng.normal(0.0, 0.1, size=layer.norm_gain.shape)
    return enc


@dataclass
class SweepResult:
    configs: int = 0
    positions: int = 0
    max_abs_diff: float = 0.0
    failures: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "configs": self.configs,
            "positions": self.positions,
            "max_abs_diff": self.max_abs_diff,
            "failures": self.failures[:20],
        }


def _choices(spec: str) -> list[int]:
    return [int(x) for x in str(spec).split(",") if x.strip()]


def sweep(
    configs: int = 200,
    seed: int = 0,
    max_n: int = 64,
    dims="8,16",
    heads="1,2",
    layers="1,2,4",
    residual: str = "both",
    tolerance: float = 1e-10,
    fault: str | None = None,
) -> SweepResult:
    """Compare dual-flow outputs with the per-target oracle at every position."""
    rng = np.random.default_rng(seed)
    dims_l, heads_l, layers_l = _choices(dims), _choices(heads), _choices(layers)
    res_opts = {"both": [True, False], "on": [True], "off": [False]}[residual]
    out = SweepResult()
    with no_grad():
        for c in range(configs):
            D = int(rng.choice(dims_l))
            H = int(rng.choice([h for h in heads_l if D % h == 0]))
            L = int(rng.choice(layers_l))
            res = res_opts[c % len(res_opts)]
            n = int(rng.integers(1, max_n + 1))
            enc = random_encoder(rng, D, H, L, res)
            seq = random_sequence(rng, n, user_id=c)
            real, fake = build_dfgr(seq, enc.tables)
            Yf, _ = forward_dfgr(real, fake, enc, fault=fault)
            for t in range(1, n + 1):
                diff = float(np.abs(oracle_per_target(seq, t, enc).data - Yf.data[t]).max())
                out.max_abs_diff = max(out.max_abs_diff, diff)
                out.positions += 1
                if not diff < tolerance:
                    out.failures.append(
                        {"config": c, "D": D, "H": H, "L": L, "residual": res, "n": n,
                         "position": t, "abs_diff": diff}
                    )
            out.configs += 1
    return out
