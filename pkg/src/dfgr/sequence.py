"""User behavior logs and the token layouts fed to the encoder.

Three organizations of one log are supported:

* interleaved: ``user, item_1, action_1, ..., item_n, action_n``
* session split: one sample per session, earlier sessions carry real
  actions, the target session carries the placeholder action
* dual flow: a real-action copy and a placeholder-action copy of the
  whole log, both of length ``n + 1``

A :class:`TokenLayout` holds ids and per-token metadata only; :func:`embed`
turns it into a :class:`TokenBatch` whose ``X`` is a differentiable tensor.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autograd import Tensor, gather_rows, get_default_dtype

NO_SESSION = -1
ABSENT = -1
FAKE_ACTION = -2


class Role(enum.IntEnum):
    USER = 0
    ITEM = 1
    ACTION = 2
    HISTORY = 3
    CANDIDATE = 4
    PAD = 5


class SequenceError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    item_id: int
    action: int
    timestamp: int
    session_id: int
    slots: Mapping[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class Candidate:
    item_id: int
    slots: Mapping[str, int] = field(default_factory=dict)


@dataclass
class UserSequence:
    user_id: int
    interactions: list[Interaction]
    profile_slots: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.interactions)

    @property
    def n(self) -> int:
        return len(self.interactions)

    def validate(self, ctr: bool = False) -> None:
        prev_ts = None
        seen: set[int] = set()
        prev_sess = None
        for i, it in enumerate(self.interactions):
            if it.timestamp < 0:
                raise SequenceError(f"user {self.user_id}: negative timestamp at {i}")
            if prev_ts is not None and it.timestamp < prev_ts:
                raise SequenceError(f"user {self.user_id}: timestamps decrease at {i}")
            if ctr and it.action not in (0, 1):
                raise SequenceError(f"user {self.user_id}: non-binary action {it.action} at {i}")
            if it.session_id != prev_sess:
                if it.session_id in seen:
                    raise SequenceError(
                        f"user {self.user_id}: session {it.session_id} is not contiguous"
                    )
                seen.add(it.session_id)
                prev_sess = it.session_id
            prev_ts = it.timestamp

    def sessions(self) -> list[list[Interaction]]:
        blocks: list[list[Interaction]] = []
        for it in self.interactions:
            if blocks and blocks[-1][0].session_id == it.session_id:
                blocks[-1].append(it)
            else:
                blocks.append([it])
        return blocks

    def session_sizes(self) -> list[int]:
        return [len(b) for b in self.sessions()]


@dataclass
class TokenLayout:
    """Token ids plus metadata for one sequence (1-D arrays) or a padded batch (2-D)."""

    item_ids: np.ndarray
    action_ids: np.ndarray
    slot_ids: dict[str, np.ndarray]
    profile_ids: dict[str, np.ndarray]
    roles: np.ndarray
    positions: np.ndarray
    timestamps: np.ndarray
    session_ids: np.ndarray
    label_mask: np.ndarray
    labels: np.ndarray

    @property
    def length(self) -> int:
        return self.roles.shape[-1]

    def replace_actions(self, action_ids: np.ndarray) -> TokenLayout:
        return TokenLayout(
            item_ids=self.item_ids,
            action_ids=action_ids,
            slot_ids=self.slot_ids,
            profile_ids=self.profile_ids,
            roles=self.roles,
            positions=self.positions,
            timestamps=self.timestamps,
            session_ids=self.session_ids,
            label_mask=self.label_mask,
            labels=self.labels,
        )


@dataclass
class TokenBatch:
    X: Tensor
    roles: np.ndarray
    positions: np.ndarray
    timestamps: np.ndarray
    session_ids: np.ndarray
    label_mask: np.ndarray
    labels: np.ndarray

    @property
    def length(self) -> int:
        return self.roles.shape[-1]


class _Builder:
    """Accumulates tokens one at a time."""

    def __init__(self, slot_names: Sequence[str], profile_names: Sequence[str]):
        self.slot_names = list(slot_names)
        self.profile_names = list(profile_names)
        self.rows: list[tuple] = []

    def add(
        self,
        role: Role,
        position: int,
        timestamp: int,
        session_id: int,
        item_id: int = ABSENT,
        action_id: int = ABSENT,
        slots: Mapping[str, int] | None = None,
        profile: Mapping[str, int] | None = None,
        label_mask: bool = False,
        label: int = 0,
    ) -> None:
        slots = slots or {}
        profile = profile or {}
        self.rows.append(
            (
                item_id,
                action_id,
                [slots.get(s, ABSENT) for s in self.slot_names],
                [profile.get(s, ABSENT) for s in self.profile_names],
                int(role),
                position,
                timestamp,
                session_id,
                label_mask,
                label,
            )
        )

    def build(self) -> TokenLayout:
        cols = list(zip(*self.rows))
        i64 = np.int64
        slot_mat = np.array(cols[2], dtype=i64).reshape(len(self.rows), len(self.slot_names))
        prof_mat = np.array(cols[3], dtype=i64).reshape(len(self.rows), len(self.profile_names))
        return TokenLayout(
            item_ids=np.array(cols[0], dtype=i64),
            action_ids=np.array(cols[1], dtype=i64),
            slot_ids={s: slot_mat[:, k].copy() for k, s in enumerate(self.slot_names)},
            profile_ids={s: prof_mat[:, k].copy() for k, s in enumerate(self.profile_names)},
            roles=np.array(cols[4], dtype=i64),
            positions=np.array(cols[5], dtype=i64),
            timestamps=np.array(cols[6], dtype=i64),
            session_ids=np.array(cols[7], dtype=i64),
            label_mask=np.array(cols[8], dtype=bool),
            labels=np.array(cols[9], dtype=i64),
        )


def _names(seq: UserSequence, slot_names=None, profile_names=None):
    if slot_names is None:
        slot_names = sorted({k for it in seq.interactions for k in it.slots})
    if profile_names is None:
        profile_names = sorted(seq.profile_slots)
    return slot_names, profile_names


def _user_timestamp(seq: UserSequence, fallback: int = 0) -> int:
    return seq.interactions[0].timestamp if seq.interactions else fallback


def _start(seq, slot_names, profile_names, user_ts=None) -> _Builder:
    b = _Builder(*_names(seq, slot_names, profile_names))
    b.add(
        Role.USER,
        0,
        _user_timestamp(seq) if user_ts is None else user_ts,
        NO_SESSION,
        profile=seq.profile_slots,
    )
    return b


def layout_metagr(seq: UserSequence, slot_names=None, profile_names=None) -> TokenLayout:
    """Interleaved item/action tokens; loss at item tokens, T = 2n + 1."""
    b = _start(seq, slot_names, profile_names)
    pos = 1
    for it in seq.interactions:
        b.add(
            Role.ITEM, pos, it.timestamp, it.session_id,
            item_id=it.item_id, slots=it.slots, label_mask=True, label=it.action,
        )
        b.add(
            Role.ACTION, pos + 1, it.timestamp, it.session_id,
            action_id=it.action, label=it.action,
        )
        pos += 2
    return b.build()


def layout_sfgr_samples(seq: UserSequence, slot_names=None, profile_names=None) -> list[TokenLayout]:
    """One sample per session: real-action history then placeholder-action targets."""
    samples = []
    done: list[Interaction] = []
    for block in seq.sessions():
        b = _start(seq, slot_names, profile_names)
        pos = 1
        for it in done:
            b.add(
                Role.HISTORY, pos, it.timestamp, it.session_id,
                item_id=it.item_id, action_id=it.action, slots=it.slots, label=it.action,
            )
            pos += 1
        for it in block:
            b.add(
                Role.CANDIDATE, pos, it.timestamp, it.session_id,
                item_id=it.item_id, action_id=FAKE_ACTION, slots=it.slots,
                label_mask=True, label=it.action,
            )
            pos += 1
        samples.append(b.build())
        done.extend(block)
    return samples


def layout_dfgr(
    seq: UserSequence, slot_names=None, profile_names=None
) -> tuple[TokenLayout, TokenLayout]:
    """Real-action and placeholder-action copies sharing all metadata, T = n + 1."""
    b = _start(seq, slot_names, profile_names)
    for pos, it in enumerate(seq.interactions, start=1):
        b.add(
            Role.HISTORY, pos, it.timestamp, it.session_id,
            item_id=it.item_id, action_id=it.action, slots=it.slots, label=it.action,
        )
    real = b.build()
    fake_actions = np.where(real.roles == Role.USER, ABSENT, FAKE_ACTION)
    fake = real.replace_actions(fake_actions)
    fake.roles = np.where(real.roles == Role.USER, Role.USER, Role.CANDIDATE).astype(np.int64)
    fake.label_mask = real.roles != Role.USER
    real.label_mask = np.zeros_like(real.label_mask)
    return real, fake


def layout_inference(
    seq: UserSequence,
    candidates: Sequence[Candidate],
    m: int,
    request_ts: int | None = None,
    slot_names=None,
    profile_names=None,
) -> list[TokenLayout]:
    """History with real actions followed by up to ``m`` placeholder candidates.

    Every candidate in a microbatch shares position ``n + 1``, the request
    timestamp and a fresh session id.
    """
    if m < 1:
        raise ValueError("microbatch size m must be >= 1")
    if not candidates:
        return []
    if slot_names is None:
        slot_names = sorted(
            {k for it in seq.interactions for k in it.slots} | {k for c in candidates for k in c.slots}
        )
    last_ts = seq.interactions[-1].timestamp if seq.interactions else 0
    ts = last_ts if request_ts is None else request_ts
    if ts < last_ts:
        raise SequenceError("request timestamp precedes the last history interaction")
    sess = max((it.session_id for it in seq.interactions), default=NO_SESSION) + 1
    sess = max(sess, 0)
    out = []
    for start in range(0, len(candidates), m):
        b = _start(seq, slot_names, profile_names, user_ts=_user_timestamp(seq, ts))
        for pos, it in enumerate(seq.interactions, start=1):
            b.add(
                Role.HISTORY, pos, it.timestamp, it.session_id,
                item_id=it.item_id, action_id=it.action, slots=it.slots, label=it.action,
            )
        cpos = seq.n + 1
        for c in candidates[start:start + m]:
            b.add(
                Role.CANDIDATE, cpos, ts, sess,
                item_id=c.item_id, action_id=FAKE_ACTION, slots=c.slots, label_mask=True,
            )
        out.append(b.build())
    return out


def collate(layouts: Sequence[TokenLayout], length: int | None = None) -> TokenLayout:
    """Right-pad layouts to a common length and stack them into 2-D arrays.

    Pad tokens come after every real token, so causal attention never lets a
    real token see them.
    """
    T = max(l.length for l in layouts) if length is None else length
    B = len(layouts)

    def pad(name, fill, dtype):
        out = np.full((B, T), fill, dtype=dtype)
        for b, l in enumerate(layouts):
            out[b, : l.length] = getattr(l, name)
        return out

    positions = np.zeros((B, T), dtype=np.int64)
    timestamps = np.zeros((B, T), dtype=np.int64)
    for b, l in enumerate(layouts):
        k = l.length
        positions[b, :k] = l.positions
        positions[b, k:] = l.positions[-1] + 1 + np.arange(T - k)
        timestamps[b, :k] = l.timestamps
        timestamps[b, k:] = l.timestamps[-1]

    def pad_map(attr):
        keys = list(getattr(layouts[0], attr))
        res = {}
        for key in keys:
            arr = np.full((B, T), ABSENT, dtype=np.int64)
            for b, l in enumerate(layouts):
                arr[b, : l.length] = getattr(l, attr)[key]
            res[key] = arr
        return res

    return TokenLayout(
        item_ids=pad("item_ids", ABSENT, np.int64),
        action_ids=pad("action_ids", ABSENT, np.int64),
        slot_ids=pad_map("slot_ids"),
        profile_ids=pad_map("profile_ids"),
        roles=pad("roles", int(Role.PAD), np.int64),
        positions=positions,
        timestamps=timestamps,
        session_ids=pad("session_ids", NO_SESSION, np.int64),
        label_mask=pad("label_mask", False, bool),
        labels=pad("labels", 0, np.int64),
    )


class EmbeddingTables:
    """One table per categorical slot family.

    Row 0 of every table is the out-of-vocabulary row; id ``k`` lives at row
    ``k + 1``. The action table has one extra final row for the placeholder
    action.
    """

    def __init__(
        self,
        dim: int,
        item_vocab: int,
        num_actions: int = 2,
        slot_vocab: Mapping[str, int] | None = None,
        profile_vocab: Mapping[str, int] | None = None,
        rng: np.random.Generator | None = None,
        std: float = 0.02,
    ):
        self.dim = dim
        self.item_vocab = item_vocab
        self.num_actions = num_actions
        self.slot_vocab = dict(sorted((slot_vocab or {}).items()))
        self.profile_vocab = dict(sorted((profile_vocab or {}).items()))
        rng = rng if rng is not None else np.random.default_rng(0)

        def table(n):
            return Tensor(rng.normal(0.0, std, size=(n + 1, dim)), requires_grad=True)

        self.item = table(item_vocab)
        self.action = table(num_actions + 1)
        self.slots = {k: table(v) for k, v in self.slot_vocab.items()}
        self.profile = {k: table(v) for k, v in self.profile_vocab.items()}

    @property
    def fake_row(self) -> int:
        return self.num_actions + 1

    @property
    def slot_names(self) -> list[str]:
        return list(self.slot_vocab)

    @property
    def profile_names(self) -> list[str]:
        return list(self.profile_vocab)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("emb.item", self.item), ("emb.action", self.action)]
        out += [(f"emb.slot.{k}", t) for k, t in self.slots.items()]
        out += [(f"emb.profile.{k}", t) for k, t in self.profile.items()]
        return out

    @staticmethod
    def _rows(ids: np.ndarray, vocab: int) -> np.ndarray:
        return np.where((ids >= 0) & (ids < vocab), ids + 1, 0)

    def action_rows(self, ids: np.ndarray) -> np.ndarray:
        rows = self._rows(ids, self.num_actions)
        return np.where(ids == FAKE_ACTION, self.fake_row, rows)

    def row(self, family: str, key: int, name: str | None = None) -> np.ndarray:
        ids = np.array([key])
        if family == "item":
            return self.item.data[self._rows(ids, self.item_vocab)[0]]
        if family == "action":
            return self.action.data[self.action_rows(ids)[0]]
        if family == "slot":
            return self.slots[name].data[self._rows(ids, self.slot_vocab[name])[0]]
        if family == "profile":
            return self.profile[name].data[self._rows(ids, self.profile_vocab[name])[0]]
        raise KeyError(family)


def _lookup(table: Tensor, rows: np.ndarray, present: np.ndarray) -> Tensor:
    out = gather_rows(table, rows)
    if present.all():
        return out
    return out * present[..., None].astype(get_default_dtype())


def embed_layout(layout: TokenLayout, tables: EmbeddingTables) -> Tensor:
    """Sum of item, action, side-slot and profile embeddings per token."""
    x = _lookup(tables.item, tables._rows(layout.item_ids, tables.item_vocab), layout.item_ids != ABSENT)
    x = x + _lookup(tables.action, tables.action_rows(layout.action_ids), layout.action_ids != ABSENT)
    for name, table in tables.slots.items():
        ids = layout.slot_ids.get(name)
        if ids is None:
            continue
        x = x + _lookup(table, tables._rows(ids, tables.slot_vocab[name]), ids != ABSENT)
    for name, table in tables.profile.items():
        ids = layout.profile_ids.get(name)
        if ids is None:
            continue
        x = x + _lookup(table, tables._rows(ids, tables.profile_vocab[name]), ids != ABSENT)
    return x


def to_batch(layout: TokenLayout, tables: EmbeddingTables) -> TokenBatch:
    return TokenBatch(
        X=embed_layout(layout, tables),
        roles=layout.roles,
        positions=layout.positions,
        timestamps=layout.timestamps,
        session_ids=layout.session_ids,
        label_mask=layout.label_mask,
        labels=layout.labels,
    )


def embed(seq: UserSequence, tables: EmbeddingTables, use_real_action: bool = True) -> TokenBatch:
    """Single-token-per-interaction embedding with real or placeholder actions."""
    real, fake = layout_dfgr(seq, tables.slot_names, tables.profile_names)
    return to_batch(real if use_real_action else fake, tables)


def build_metagr(seq: UserSequence, tables: EmbeddingTables) -> TokenBatch:
    return to_batch(layout_metagr(seq, tables.slot_names, tables.profile_names), tables)


def build_sfgr_samples(seq: UserSequence, tables: EmbeddingTables) -> list[TokenBatch]:
    return [
        to_batch(l, tables)
        for l in layout_sfgr_samples(seq, tables.slot_names, tables.profile_names)
    ]


def build_dfgr(seq: UserSequence, tables: EmbeddingTables) -> tuple[TokenBatch, TokenBatch]:
    real, fake = layout_dfgr(seq, tables.slot_names, tables.profile_names)
    return to_batch(real, tables), to_batch(fake, tables)


def build_inference(
    seq: UserSequence,
    candidates: Sequence[Candidate],
    tables: EmbeddingTables,
    m: int,
    request_ts: int | None = None,
) -> list[TokenBatch]:
    layouts = layout_inference(
        seq, candidates, m, request_ts, tables.slot_names, tables.profile_names
    )
    return [to_batch(l, tables) for l in layouts]
