"""Synthetic interaction logs with known click probabilities, and log ingestion.

Log file format (UTF-8, one interaction per line, tab separated)::

    user_id  item_id  action  ts  session_id  [name=value ...]

=========== ======== ==============================================
field       type     meaning
=========== ======== ==============================================
user_id     int      user key; lines of one user may be interleaved
item_id     int      categorical item id
action      int      action label (0/1 in CTR mode)
ts          int      seconds, non-negative
session_id  int      request id; one contiguous block per user
name=value  int      optional side slot; ``u.`` prefix marks a user
                     profile slot (constant per user)
=========== ======== ==============================================

Blank lines and lines starting with ``#`` are ignored. Generated datasets
also write a sidecar with one true click probability per line, in the same
order as the log.
"""

from __future__ import annotations

import logging
import os
import tempfile
import warnings
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .metrics import auc
from .sequence import Interaction, UserSequence

log = logging.getLogger(__name__)

HOURS = 24


class IngestError(ValueError):
    pass


class UnavailableError(RuntimeError):
    """Requested quantity needs ground truth that this dataset does not carry."""


class EmptySplitWarning(UserWarning):
    pass


@dataclass
class GeneratorSpec:
    num_users: int = 2000
    num_items: int = 400
    num_categories: int = 8
    num_segments: int = 4
    sessions_mean: float = 10.0
    session_len_mean: float = 10.0
    latent_dim: int = 4
    drift: float = 0.05
    interest_weight: float = 1.5
    item_bias_std: float = 0.8
    recency_weight: float = 0.5
    base_logit: float = -0.3
    item_spread: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_users", "num_items", "num_categories", "num_segments", "latent_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.sessions_mean < 1 or self.session_len_mean < 1:
            raise ValueError("session count and length means must be >= 1")
        if not 0.0 <= self.drift <= 1.0:
            raise ValueError("drift must lie in [0, 1]")

    @property
    def zero_click_model(self) -> bool:
        return (
            self.interest_weight == 0
            and self.item_bias_std == 0
            and self.recency_weight == 0
            and self.base_logit == 0
        )


@dataclass
class Dataset:
    sequences: list[UserSequence]
    vocab: dict
    probabilities: list[np.ndarray] | None = None
    warnings: int = 0

    @property
    def num_interactions(self) -> int:
        return sum(s.n for s in self.sequences)

    def labels(self) -> np.ndarray:
        return np.array([it.action for s in self.sequences for it in s.interactions], dtype=np.int64)

    def timestamps(self) -> np.ndarray:
        return np.array(
            [it.timestamp for s in self.sequences for it in s.interactions], dtype=np.int64
        )


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _world(spec: GeneratorSpec):
    """Item and segment structure shared by all users."""
    rng = np.random.default_rng([spec.seed, 0xC0FFEE])
    r = spec.latent_dim
    centers = rng.normal(size=(spec.num_categories, r))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    item_cat = rng.integers(0, spec.num_categories, size=spec.num_items)
    item_vec = centers[item_cat] + spec.item_spread * rng.normal(size=(spec.num_items, r))
    item_bias = spec.item_bias_std * rng.normal(size=spec.num_items)
    popularity = 1.0 / (np.arange(spec.num_items) + 20.0)
    popularity = popularity[rng.permutation(spec.num_items)]
    popularity /= popularity.sum()
    seg_centers = rng.normal(size=(spec.num_segments, r))
    return item_cat, item_vec, item_bias, popularity, seg_centers


def _user(spec: GeneratorSpec, uid: int, world) -> tuple[UserSequence, np.ndarray]:
    item_cat, item_vec, item_bias, popularity, seg_centers = world
    rng = np.random.default_rng([spec.seed, uid])
    segment = int(rng.integers(0, spec.num_segments))
    w = seg_centers[segment] + rng.normal(size=spec.latent_dim)
    w /= max(np.linalg.norm(w), 1e-9)
    n_sessions = 1 + int(rng.poisson(spec.sessions_mean - 1))
    t = int(rng.integers(0, 86_400))
    last_end = None
    its: list[Interaction] = []
    probs: list[float] = []
    for s in range(n_sessions):
        if s > 0:
            step = rng.normal(size=spec.latent_dim)
            w = np.sqrt(1.0 - spec.drift**2) * w + spec.drift * step / np.sqrt(spec.latent_dim)
            t += int(rng.exponential(86_400.0)) + 600
        gap_h = None if last_end is None else (t - last_end) / 3600.0
        recency = 0.0 if gap_h is None else float(np.exp(-gap_h / 24.0))
        k = 1 + int(rng.poisson(spec.session_len_mean - 1))
        items = rng.choice(spec.num_items, size=k, p=popularity)
        for j in items:
            logit = (
                spec.interest_weight * float(w @ item_vec[j]) * np.sqrt(spec.latent_dim)
                + item_bias[j]
                + spec.recency_weight * recency
                + spec.base_logit
            )
            p = float(_sigmoid(logit))
            a = int(rng.random() < p)
            slots = {"category": int(item_cat[j]), "hour": (t // 3600) % HOURS}
            its.append(Interaction(int(j), a, t, s, slots))
            probs.append(p)
            t += int(rng.exponential(30.0)) + 1
        last_end = t
    return UserSequence(uid, its, {"segment": segment}), np.array(probs)


def vocab_for(spec: GeneratorSpec) -> dict:
    return {
        "item_vocab": spec.num_items,
        "num_actions": 2,
        "slot_vocab": {"category": spec.num_categories, "hour": HOURS},
        "profile_vocab": {"segment": spec.num_segments},
    }


def generate(spec: GeneratorSpec) -> Dataset:
    """Users with drifting latent interest; clicks ~ Bernoulli(sigmoid(logit)).

    The logit is interest-item affinity plus item bias plus a recency bonus
    for returning soon after the previous session. Each user draws from its
    own seed stream, so the output does not depend on generation order.
    """
    spec.validate()
    world = _world(spec)
    seqs, probs = [], []
    for uid in range(spec.num_users):
        seq, p = _user(spec, uid, world)
        seqs.append(seq)
        probs.append(p)
    return Dataset(seqs, vocab_for(spec), probs)


def bayes_auc(dataset: Dataset, mask: list[np.ndarray] | None = None) -> float:
    """AUC of the true click probabilities against realized labels."""
    if dataset.probabilities is None:
        raise UnavailableError("true probabilities are only known for generated data")
    if mask is None:
        p = np.concatenate(dataset.probabilities) if dataset.probabilities else np.array([])
        return auc(p, dataset.labels())
    ps, ys = [], []
    for seq, pr, m in zip(dataset.sequences, dataset.probabilities, mask):
        ps.append(pr[m])
        ys.append(np.array([it.action for it in seq.interactions], dtype=np.int64)[m])
    return auc(np.concatenate(ps), np.concatenate(ys))


# ---------------------------------------------------------------- file io


def format_line(uid: int, it: Interaction, profile: dict) -> str:
    fields = [str(uid), str(it.item_id), str(it.action), str(it.timestamp), str(it.session_id)]
    fields += [f"{k}={v}" for k, v in sorted(it.slots.items())]
    fields += [f"u.{k}={v}" for k, v in sorted(profile.items())]
    return "\t".join(fields)


def _atomic_write(path: str, lines) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"output directory does not exist: {directory}")
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            for line in lines:
                fh.write(line)
                fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset(dataset: Dataset, path: str, sidecar: str | None = None) -> None:
    _atomic_write(
        path,
        (format_line(s.user_id, it, s.profile_slots) for s in dataset.sequences for it in s.interactions),
    )
    if sidecar is not None:
        if dataset.probabilities is None:
            raise UnavailableError("dataset has no true probabilities to write")
        try:
            _atomic_write(sidecar, (repr(float(p)) for ps in dataset.probabilities for p in ps))
        except BaseException:
            os.unlink(path)
            raise


def parse_line(line: str, lineno: int) -> tuple[int, Interaction, dict]:
    parts = line.rstrip("\n").split("\t")
    if len(parts) < 5:
        raise IngestError(f"line {lineno}: expected at least 5 tab-separated fields, got {len(parts)}")
    try:
        uid, item, action, ts, sess = (int(x) for x in parts[:5])
    except ValueError as exc:
        raise IngestError(f"line {lineno}: non-integer core field ({exc})") from None
    if ts < 0:
        raise IngestError(f"line {lineno}: negative timestamp")
    slots: dict[str, int] = {}
    profile: dict[str, int] = {}
    for extra in parts[5:]:
        name, eq, value = extra.partition("=")
        if not eq or not name:
            raise IngestError(f"line {lineno}: slot field {extra!r} is not name=value")
        try:
            v = int(value)
        except ValueError:
            raise IngestError(f"line {lineno}: slot {name!r} has non-integer value") from None
        if name.startswith("u."):
            profile[name[2:]] = v
        else:
            slots[name] = v
    return uid, Interaction(item, action, ts, sess, slots), profile


def ingest(path: str, fmt: str = "tsv", sidecar: str | None = None) -> Dataset:
    """Read a log file into per-user sequences sorted by timestamp."""
    if fmt != "tsv":
        raise IngestError(f"unsupported format {fmt!r}")
    per_user: dict[int, list[tuple[Interaction, int]]] = defaultdict(list)
    profiles: dict[int, dict] = {}
    order = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            uid, it, prof = parse_line(line, lineno)
            per_user[uid].append((it, order))
            profiles.setdefault(uid, {}).update(prof)
            order += 1
    probs_flat = None
    if sidecar is not None:
        with open(sidecar, encoding="utf-8") as fh:
            probs_flat = np.array([float(x) for x in fh if x.strip()])
        if probs_flat.size != order:
            raise IngestError(f"sidecar has {probs_flat.size} values for {order} interactions")
    unsorted = 0
    seqs, probs = [], []
    for uid in sorted(per_user):
        rows = per_user[uid]
        ts = [it.timestamp for it, _ in rows]
        if any(b < a for a, b in zip(ts, ts[1:])):
            unsorted += 1
            rows = sorted(rows, key=lambda r: (r[0].timestamp, r[1]))
        seq = UserSequence(uid, [it for it, _ in rows], profiles.get(uid, {}))
        try:
            seq.validate()
        except ValueError as exc:
            raise IngestError(str(exc)) from None
        seqs.append(seq)
        if probs_flat is not None:
            probs.append(probs_flat[[o for _, o in rows]])
    if unsorted:
        log.warning("%d users had non-monotone timestamps and were sorted", unsorted)
    return Dataset(seqs, infer_vocab(seqs), probs if probs_flat is not None else None, unsorted)


def infer_vocab(seqs: list[UserSequence]) -> dict:
    item = 0
    actions = 2
    slots: dict[str, int] = {}
    profile: dict[str, int] = {}
    for s in seqs:
        for k, v in s.profile_slots.items():
            profile[k] = max(profile.get(k, 0), v + 1)
        for it in s.interactions:
            item = max(item, it.item_id + 1)
            actions = max(actions, it.action + 1)
            for k, v in it.slots.items():
                slots[k] = max(slots.get(k, 0), v + 1)
    return {
        "item_vocab": max(item, 1),
        "num_actions": actions,
        "slot_vocab": dict(sorted(slots.items())),
        "profile_vocab": dict(sorted(profile.items())),
    }


# ---------------------------------------------------------------- splits


@dataclass
class TimeSplit:
    train: Dataset
    valid: Dataset
    cutoff: int
    valid_masks: list[np.ndarray] = field(default_factory=list)


def split_cutoff(dataset: Dataset, train_fraction: float = 0.8) -> int:
    ts = dataset.timestamps()
    return int(np.quantile(ts, train_fraction, method="lower"))


def time_split(dataset: Dataset, cutoff: int) -> TimeSplit:
    """Train keeps ``ts <= cutoff``, validation keeps ``ts > cutoff``.

    ``valid_masks`` marks, per user of the original dataset, the positions
    that fall into the validation side, for scoring with full history.
    """
    tr, va, trp, vap, masks = [], [], [], [], []
    for i, s in enumerate(dataset.sequences):
        m = np.array([it.timestamp > cutoff for it in s.interactions], dtype=bool)
        masks.append(m)
        a = [it for it, x in zip(s.interactions, m) if not x]
        b = [it for it, x in zip(s.interactions, m) if x]
        if a:
            tr.append(UserSequence(s.user_id, a, s.profile_slots))
            if dataset.probabilities is not None:
                trp.append(dataset.probabilities[i][~m])
        if b:
            va.append(UserSequence(s.user_id, b, s.profile_slots))
            if dataset.probabilities is not None:
                vap.append(dataset.probabilities[i][m])
    has_p = dataset.probabilities is not None
    if not va:
        warnings.warn(f"time split at {cutoff} leaves the validation set empty", EmptySplitWarning)
    return TimeSplit(
        Dataset(tr, dataset.vocab, trp if has_p else None),
        Dataset(va, dataset.vocab, vap if has_p else None),
        cutoff,
        masks,
    )
