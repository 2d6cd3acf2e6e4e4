import numpy as np

from dfgr.oracle import random_encoder, random_sequence  # noqa: F401
from dfgr.sequence import Interaction, UserSequence


def fd_grad(f, x: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        h = rel_step * max(1.0, abs(x[i]))
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def make_seq(sizes, seed=0, user_id=0) -> UserSequence:
    """Sequence with the given session sizes and random items/actions/slots."""
    rng = np.random.default_rng(seed)
    its = []
    ts = 100
    for s, k in enumerate(sizes):
        ts += 3600
        for _ in range(k):
            ts += int(rng.integers(1, 60))
            its.append(
                Interaction(
                    int(rng.integers(0, 30)),
                    int(rng.integers(0, 2)),
                    ts,
                    s,
                    {"category": int(rng.integers(0, 5)), "hour": int(rng.integers(0, 24))},
                )
            )
    return UserSequence(user_id, its, {"segment": 1})


def fd_grad_entry(f, x: np.ndarray, index, h: float = 1e-4) -> float:
    """Fourth-order central difference of scalar ``f()`` w.r.t. ``x[index]``."""
    old = x[index]
    vals = []
    for k in (2, 1, -1, -2):
        x[index] = old + k * h
        vals.append(f())
    x[index] = old
    return (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
