"""Boolean attention-permission matrices.

``allow[..., i, j]`` is true when query ``i`` may attend key ``j``. Every
builder accepts 1-D metadata (one sequence) or 2-D metadata (a padded batch)
and returns ``(..., T, T)``.
"""

from __future__ import annotations

import numpy as np

from .sequence import NO_SESSION, Role


class MaskError(ValueError):
    pass


def causal_mask(T: int) -> np.ndarray:
    if T < 1:
        raise MaskError("T must be >= 1")
    return np.tril(np.ones((T, T), dtype=bool))


def _check_contiguous(session_ids: np.ndarray) -> None:
    for row in np.atleast_2d(session_ids):
        seen: set[int] = set()
        prev = None
        for s in row.tolist():
            if s == NO_SESSION:
                prev = s
                continue
            if s != prev:
                if s in seen:
                    raise MaskError(f"session {s} is not a contiguous block")
                seen.add(s)
            prev = s


def session_mask(session_ids) -> np.ndarray:
    """Causal mask with attention between distinct items of one session removed.

    Tokens carrying ``NO_SESSION`` (the user token, padding) as query follow
    the plain causal rule.
    """
    s = np.asarray(session_ids, dtype=np.int64)
    _check_contiguous(s)
    T = s.shape[-1]
    causal = causal_mask(T)
    eye = np.eye(T, dtype=bool)
    si = s[..., :, None]
    sj = s[..., None, :]
    cross = (si != sj) | (si == NO_SESSION)
    return (causal & cross) | eye


def candidate_block_mask(roles, session_ids) -> np.ndarray:
    """Session mask plus mutual blindness among candidate tokens.

    Candidate tokens must form a suffix of each sequence (padding may follow).
    """
    r = np.asarray(roles, dtype=np.int64)
    allow = session_mask(session_ids)
    for row in np.atleast_2d(r):
        is_c = row == Role.CANDIDATE
        real = row != Role.PAD
        idx = np.flatnonzero(is_c)
        if idx.size and not is_c[idx[0]: np.flatnonzero(real)[-1] + 1].all():
            raise MaskError("candidate positions must form a suffix")
    cand = r == Role.CANDIDATE
    both = cand[..., :, None] & cand[..., None, :]
    T = r.shape[-1]
    return allow & ~(both & ~np.eye(T, dtype=bool))


def interleaved_session_mask(roles, session_ids) -> np.ndarray:
    """Session-aware mask for the interleaved item/action layout.

    Item tokens follow the session rule. An action token additionally sees
    the item token it annotates (the token right before it).
    """
    r = np.asarray(roles, dtype=np.int64)
    allow = session_mask(session_ids).copy()
    T = r.shape[-1]
    prev = np.eye(T, k=-1, dtype=bool)
    is_action = r == Role.ACTION
    allow |= is_action[..., :, None] & prev
    return allow


def check_mask(allow: np.ndarray) -> None:
    T = allow.shape[-1]
    if (allow & ~causal_mask(T)).any():
        raise MaskError("mask lets a query attend a future key")
    if not np.diagonal(allow, axis1=-2, axis2=-1).all():
        raise MaskError("mask diagonal must be fully allowed")


def render(allow: np.ndarray) -> str:
    """0/1 text grid, one row per query."""
    return "\n".join(" ".join("1" if v else "0" for v in row) for row in np.asarray(allow))
