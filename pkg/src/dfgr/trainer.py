"""Training loop, Adam, learning-rate schedule and validation metrics."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import Tensor, backward, no_grad
from .datagen import Dataset
from .flops import TRAIN_FACTOR, CostModel, layer_flops
from .heads import masked_bce, probabilities, score
from .hstu import EncoderParams, HstuConfig, forward_dfgr, forward_single
from .masking import interleaved_session_mask, session_mask, causal_mask
from .metrics import UndefinedMetric, auc, gauc
from .sequence import (
    TokenLayout,
    UserSequence,
    collate,
    layout_dfgr,
    layout_metagr,
    layout_sfgr_samples,
    to_batch,
)

log = logging.getLogger(__name__)

PARADIGMS = ("METAGR", "SFGR", "DFGR")
LR_FLOOR = 1e-6


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    paradigm: str = "DFGR"
    batch_size: int = 16
    steps: int = 2000
    base_lr: float = 5e-4
    decay_per_1k: float = 5e-6
    decay_start_step: int = 10**9
    seed: int = 0
    dim: int = 32
    heads: int = 2
    layers: int = 2
    residual: bool = True
    session_mask: bool = True
    metagr_session_mask: bool = False
    max_len: int = 256
    eval_every: int = 500
    weight_decay: float = 0.0
    flop_budget: float = 0.0  # stop once analytic training FLOPs reach this; 0 = no limit

    def __post_init__(self):
        self.paradigm = str(self.paradigm).upper()
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"paradigm must be one of {', '.join(PARADIGMS)}; got {self.paradigm!r}")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.batch_size < 1 or self.steps < 0 or self.max_len < 2:
            raise ValueError("batch_size >= 1, steps >= 0, max_len >= 2 required")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.flop_budget < 0:
            raise ValueError("flop_budget must be >= 0")

    def hstu_config(self) -> HstuConfig:
        return HstuConfig(
            dim=self.dim,
            heads=self.heads,
            layers=self.layers,
            residual=self.residual,
            session_mask=self.session_mask,
        )


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Constant ``base_lr`` then a linear decay of ``decay_per_1k`` per 1000 steps.

    No warmup. Clamped below at 1e-6.
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < cfg.decay_start_step:
        return cfg.base_lr
    lr = cfg.base_lr - cfg.decay_per_1k * (step - cfg.decay_start_step) / 1000.0
    return max(lr, LR_FLOOR)


class Adam:
    def __init__(self, params: list[Tensor], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * update

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def state(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}

    def load_state(self, state: dict) -> None:
        self.t = state["t"]
        self.m = [a.copy() for a in state["m"]]
        self.v = [a.copy() for a in state["v"]]


# ---------------------------------------------------------------- batches


def crop(seq: UserSequence, max_interactions: int, start: int | None = None) -> UserSequence:
    if seq.n <= max_interactions:
        return seq
    s = seq.n - max_interactions if start is None else start
    return UserSequence(seq.user_id, seq.interactions[s:s + max_interactions], seq.profile_slots)


def paradigm_logits(
    enc: EncoderParams, paradigm: str, layouts, metagr_session: bool = False
) -> tuple[Tensor, TokenLayout]:
    """Logits for a list of sequence layouts of one paradigm.

    DFGR expects ``(real, fake)`` pairs; the other paradigms plain layouts.
    Returns logits ``(B, T)`` and the collated layout holding labels/masks.
    """
    tables = enc.tables
    if paradigm == "DFGR":
        real = collate([r for r, _ in layouts])
        fake = collate([f for _, f in layouts])
        Y, _ = forward_dfgr(to_batch(real, tables), to_batch(fake, tables), enc)
        return score(Y, enc.head), fake
    batch = collate(layouts)
    if paradigm == "METAGR":
        if metagr_session:
            mask = interleaved_session_mask(batch.roles, batch.session_ids)
        else:
            T = batch.length
            mask = np.broadcast_to(causal_mask(T), batch.roles.shape + (T,))
    else:
        mask = session_mask(batch.session_ids) if enc.cfg.session_mask else None
    Y = forward_single(to_batch(batch, tables), enc, mask)
    return score(Y, enc.head), batch


def step_flops(paradigm: str, batch_size: int, length: int, cfg: HstuConfig) -> float:
    """Analytic training FLOPs of one step over a padded batch of ``length`` tokens."""
    model = CostModel(B=batch_size, N=length, K=1, D=cfg.dim, H=cfg.heads, L=cfg.layers)
    flows = 2 if paradigm == "DFGR" else 1
    return TRAIN_FACTOR * flows * cfg.layers * layer_flops(length, model)


def make_layouts(enc: EncoderParams, paradigm: str, seqs: list[UserSequence], rng=None):
    names = (enc.tables.slot_names, enc.tables.profile_names)
    if paradigm == "DFGR":
        return [layout_dfgr(s, *names) for s in seqs]
    if paradigm == "METAGR":
        return [layout_metagr(s, *names) for s in seqs]
    out = []
    for s in seqs:
        samples = layout_sfgr_samples(s, *names)
        out.append(samples[int(rng.integers(len(samples)))] if rng is not None else samples[-1])
    return out


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalResult:
    loss: float
    auc: float | None
    gauc: float | None
    scores: np.ndarray
    labels: np.ndarray
    users: np.ndarray


def predict_positions(
    enc: EncoderParams,
    paradigm: str,
    seqs: list[UserSequence],
    masks: list[np.ndarray],
    max_len: int = 256,
    chunk: int = 32,
    metagr_session: bool = False,
):
    """Logits for interactions flagged in ``masks``, each scored with full prior history.

    DFGR and SFGR models score through the placeholder flow (identical to
    session-split scoring); METAGR scores item tokens of the interleaved
    layout.
    """
    logits, labels, users = [], [], []
    work = []
    for seq, m in zip(seqs, masks):
        idx = np.flatnonzero(m)
        if idx.size == 0:
            continue
        end = idx[-1] + 1
        start = max(0, end - max_len)
        sub = UserSequence(seq.user_id, seq.interactions[start:end], seq.profile_slots)
        work.append((sub, m[start:end]))
    eval_paradigm = "METAGR" if paradigm == "METAGR" else "DFGR"
    with no_grad():
        for i in range(0, len(work), chunk):
            part = work[i:i + chunk]
            lays = make_layouts(enc, eval_paradigm, [s for s, _ in part])
            z, batch = paradigm_logits(enc, eval_paradigm, lays, metagr_session)
            for b, (s, m) in enumerate(part):
                if eval_paradigm == "METAGR":
                    pos = 1 + 2 * np.flatnonzero(m)
                else:
                    pos = 1 + np.flatnonzero(m)
                logits.append(z.data[b, pos])
                labels.append(batch.labels[b, pos])
                users.append(np.full(pos.size, s.user_id))
    if not logits:
        return np.array([]), np.array([], dtype=np.int64), np.array([], dtype=np.int64)
    return np.concatenate(logits), np.concatenate(labels), np.concatenate(users)


def evaluate(enc, paradigm, seqs, masks, max_len=256, metagr_session=False) -> EvalResult:
    z, y, u = predict_positions(enc, paradigm, seqs, masks, max_len, metagr_session=metagr_session)
    if z.size == 0:
        return EvalResult(float("nan"), None, None, z, y, u)
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    p = probabilities(z)
    try:
        a = auc(p, y)
    except UndefinedMetric:
        a = None
    try:
        g = gauc(p, y, u)
    except UndefinedMetric:
        g = None
    return EvalResult(float(per.mean()), a, g, p, y, u)


# ---------------------------------------------------------------- training


@dataclass
class MetricsReport:
    auc: float | None = None
    gauc: float | None = None
    eval_loss: float | None = None
    loss_curve: list[float] = field(default_factory=list)
    train_flops: float = 0.0
    eval_rows: list[dict] = field(default_factory=list)
    eval_timestamp: str = ""

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "lr", "loss", "auc", "gauc"])
        for r in self.eval_rows:
            w.writerow([r["step"], repr(r["lr"]), repr(r["loss"]), repr(r["auc"]), repr(r["gauc"])])
        return buf.getvalue()


@dataclass
class TrainState:
    enc: EncoderParams
    opt: Adam
    step: int = 0


def init_model(cfg: TrainConfig, vocab: dict) -> EncoderParams:
    return EncoderParams(
        cfg.hstu_config(),
        vocab["item_vocab"],
        vocab.get("num_actions", 2),
        vocab.get("slot_vocab", {}),
        vocab.get("profile_vocab", {}),
        seed=cfg.seed,
    )


def train(
    cfg: TrainConfig,
    data: Dataset,
    valid_masks: list[np.ndarray] | None = None,
    state: TrainState | None = None,
    steps: int | None = None,
) -> tuple[EncoderParams, MetricsReport, TrainState]:
    """Optimize masked BCE with Adam; deterministic given ``cfg.seed``.

    ``valid_masks`` (aligned with ``data.sequences``) selects the scored
    interactions; every unflagged interaction is training data. Passing a
    previous ``state`` continues from it, with step numbering carried on.
    """
    if not data.sequences:
        raise ValueError("training data is empty")
    masks = valid_masks or [np.zeros(s.n, dtype=bool) for s in data.sequences]
    train_seqs = []
    for s, m in zip(data.sequences, masks):
        keep = np.flatnonzero(~m)
        if keep.size:
            # validation interactions always trail the training ones per user
            train_seqs.append(UserSequence(s.user_id, s.interactions[: keep[-1] + 1], s.profile_slots))
    if not train_seqs:
        raise ValueError("no training interactions")

    if state is None:
        enc = init_model(cfg, data.vocab)
        state = TrainState(enc, Adam(enc.parameters(), weight_decay=cfg.weight_decay))
    enc, opt = state.enc, state.opt
    total = cfg.steps if steps is None else steps
    rng = np.random.default_rng([cfg.seed, 7919, state.step])
    report = MetricsReport()
    has_valid = any(m.any() for m in masks)
    max_inter = cfg.max_len if cfg.paradigm != "METAGR" else cfg.max_len // 2

    for _ in range(total):
        if cfg.flop_budget and report.train_flops >= cfg.flop_budget:
            break
        step = state.step
        lr = lr_at(step, cfg)
        picks = rng.integers(0, len(train_seqs), size=cfg.batch_size)
        seqs = []
        for i in picks:
            s = train_seqs[int(i)]
            start = int(rng.integers(0, s.n - max_inter + 1)) if s.n > max_inter else None
            seqs.append(crop(s, max_inter, start))
        lays = make_layouts(enc, cfg.paradigm, seqs, rng)
        logits, batch = paradigm_logits(enc, cfg.paradigm, lays, cfg.metagr_session_mask)
        loss = masked_bce(logits, batch.labels, batch.label_mask)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at step {step} (lr={lr:g})")
        opt.zero_grad()
        backward(loss)
        opt.step(lr)
        report.loss_curve.append(value)
        report.train_flops += step_flops(cfg.paradigm, len(seqs), batch.length, enc.cfg)
        state.step += 1
        if has_valid and state.step % cfg.eval_every == 0:
            ev = evaluate(enc, cfg.paradigm, data.sequences, masks, cfg.max_len, cfg.metagr_session_mask)
            report.eval_rows.append(
                {"step": state.step, "lr": lr, "loss": ev.loss, "auc": ev.auc, "gauc": ev.gauc}
            )
            log.info("step %d lr %.3g eval loss %.4f auc %s", state.step, lr, ev.loss, ev.auc)

    if has_valid:
        if report.eval_rows and report.eval_rows[-1]["step"] == state.step:
            last = report.eval_rows[-1]
            report.auc, report.gauc, report.eval_loss = last["auc"], last["gauc"], last["loss"]
        else:
            ev = evaluate(enc, cfg.paradigm, data.sequences, masks, cfg.max_len, cfg.metagr_session_mask)
            report.auc, report.gauc, report.eval_loss = ev.auc, ev.gauc, ev.loss
    report.eval_timestamp = time.strftime("%Y-%m-%dT%H:%M:%S")
    return enc, report, state


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
