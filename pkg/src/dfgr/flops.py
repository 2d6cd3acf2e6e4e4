"""Analytic FLOP accounting for the three paradigms, plus a wall-clock probe.

Per HSTU layer at sequence length ``T``::

    2*(4*B*T*D^2 + 2*B*H*T^2*d + B*T*D^2)

itemized as fused projection, attention, and output projection. Embedding
and head costs are excluded. Training cost is modeled as three times the
forward cost; the factor cancels in every paradigm ratio.
"""

from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

PARADIGMS = ("METAGR", "SFGR", "DFGR")
TRAIN_FACTOR = 3

LAYER_FORMULA = "2*O(4*B*N*D^2 + 2*B*H*N^2*d + B*N*D^2)*L"
FORMULAS = {
    "METAGR": {
        "train": "2*O(4*B*2N*D^2 + 2*B*H*(2N)^2*d + B*2N*D^2) * L",
        "infer": "2*O(4*B*2N*D^2 + 2*B*H*(2N)^2*d + B*2N*D^2) * L",
    },
    "SFGR": {
        "train": "\\sum_{i=1}^{N/K}2*O(4*B*i*K*D^2 + 2*B*H*(iK)^2*d + B*i*K*D^2)*L",
        "infer": LAYER_FORMULA,
    },
    "DFGR": {
        "train": "2*2*O(4*B*N*D^2 + 2*B*H*N^2*d + B*N*D^2)*L",
        "infer": LAYER_FORMULA,
    },
}

CSV_COLUMNS = [
    "paradigm", "B", "N", "K", "D", "H", "d", "L",
    "train_flops", "infer_flops", "ratio_vs_metagr",
]


@dataclass(frozen=True)
class CostModel:
    B: int = 1
    N: int = 4096
    K: int = 32
    D: int = 64
    H: int = 2
    L: int = 1
    m: int = 1  # candidates per inference microbatch

    def __post_init__(self):
        for name in ("B", "N", "K", "D", "H", "L"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.m < 0:
            raise ValueError("m must be non-negative")
        if self.D % self.H:
            raise ValueError(f"D={self.D} must equal H*d")
        if self.K > self.N:
            raise ValueError(f"K={self.K} exceeds N={self.N}")

    @property
    def d(self) -> int:
        return self.D // self.H


def layer_terms(T: int, model: CostModel) -> dict[str, float]:
    """Itemized single-layer forward FLOPs at sequence length ``T``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    B, D, H, d = model.B, model.D, model.H, model.d
    return {
        "projection": 2.0 * 4 * B * T * D**2,
        "attention": 2.0 * 2 * B * H * T**2 * d,
        "output": 2.0 * B * T * D**2,
    }


def layer_flops(T: int, model: CostModel) -> float:
    return sum(layer_terms(T, model).values())


def _scaled(terms: dict[str, float], k: float) -> dict[str, float]:
    return {n: v * k for n, v in terms.items()}


def _summed(parts: list[dict[str, float]]) -> dict[str, float]:
    out = {"projection": 0.0, "attention": 0.0, "output": 0.0}
    for p in parts:
        for n, v in p.items():
            out[n] += v
    return out


@dataclass
class ParadigmCost:
    paradigm: str
    forward_terms: dict[str, float]
    inference_terms: dict[str, float]
    train_factor: int = TRAIN_FACTOR

    @property
    def forward_flops(self) -> float:
        return sum(self.forward_terms.values())

    @property
    def training_flops(self) -> float:
        return self.train_factor * self.forward_flops

    @property
    def inference_flops(self) -> float:
        return sum(self.inference_terms.values())


@dataclass
class FlopReport:
    model: CostModel
    costs: dict[str, ParadigmCost]
    formulas: dict[str, dict[str, str]] = field(default_factory=lambda: FORMULAS)

    def train_ratio(self, paradigm: str) -> float:
        return self.costs[paradigm].training_flops / self.costs["METAGR"].training_flops

    def infer_ratio(self, paradigm: str) -> float:
        return self.costs[paradigm].inference_flops / self.costs["METAGR"].inference_flops

    def sfgr_asymptote(self) -> float:
        return self.model.N / (12.0 * self.model.K)

    def to_dict(self) -> dict:
        return {
            "model": asdict(self.model),
            "layer_formula": LAYER_FORMULA,
            "formulas": self.formulas,
            "paradigms": {
                p: {
                    "forward_terms": c.forward_terms,
                    "forward_flops": c.forward_flops,
                    "training_flops": c.training_flops,
                    "inference_terms": c.inference_terms,
                    "inference_flops": c.inference_flops,
                    "train_ratio_vs_metagr": self.train_ratio(p),
                    "infer_ratio_vs_metagr": self.infer_ratio(p),
                }
                for p, c in self.costs.items()
            },
            "sfgr_asymptote_N_over_12K": self.sfgr_asymptote(),
        }


def paradigm_flops(model: CostModel) -> FlopReport:
    N, K, L, m = model.N, model.K, model.L, model.m
    sessions = N // K
    metagr_train = _scaled(layer_terms(2 * N, model), L)
    dfgr_train = _scaled(layer_terms(N, model), 2 * L)
    sfgr_train = _scaled(_summed([layer_terms(i * K, model) for i in range(1, sessions + 1)]), L)
    single_infer = _scaled(layer_terms(N + m, model), L)
    costs = {
        "METAGR": ParadigmCost("METAGR", metagr_train, _scaled(layer_terms(2 * N + m, model), L)),
        "SFGR": ParadigmCost("SFGR", sfgr_train, single_infer),
        "DFGR": ParadigmCost("DFGR", dfgr_train, dict(single_infer)),
    }
    return FlopReport(model, costs)


def ratio_grid(Ns, K: int, D: int, H: int = 2, L: int = 1, m: int = 1) -> list[dict[str, float]]:
    """DFGR/METAGR train and infer ratios and the SFGR ratio over ``N / (12 K)``."""
    rows = []
    for N in Ns:
        r = paradigm_flops(CostModel(N=N, K=K, D=D, H=H, L=L, m=m))
        rows.append(
            {
                "N": N,
                "dfgr_train": r.train_ratio("DFGR"),
                "dfgr_infer": r.infer_ratio("DFGR"),
                "sfgr_train_over_asymptote": r.train_ratio("SFGR") / r.sfgr_asymptote(),
            }
        )
    return rows


def grid_csv(models: list[CostModel], runtimes: dict | None = None) -> str:
    """CSV with one row per (configuration, paradigm)."""
    buf = io.StringIO()
    cols = list(CSV_COLUMNS)
    if runtimes is not None:
        cols += ["median_infer_seconds", "runtime_ratio_vs_metagr"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for model in models:
        rep = paradigm_flops(model)
        for p in PARADIGMS:
            c = rep.costs[p]
            row = [
                p, model.B, model.N, model.K, model.D, model.H, model.d, model.L,
                repr(c.training_flops), repr(c.inference_flops), repr(rep.train_ratio(p)),
            ]
            if runtimes is not None:
                rt = runtimes.get((model, p))
                base = runtimes.get((model, "METAGR"))
                row += [
                    "" if rt is None else repr(rt),
                    "" if rt is None or not base else repr(rt / base),
                ]
            w.writerow(row)
    return buf.getvalue()


# ---------------------------------------------------------------- wall clock


@dataclass
class RuntimeReport:
    paradigm: str
    seq_len: int
    times: list[float]
    analytic_ratio_vs_metagr: float

    @property
    def median(self) -> float | None:
        return statistics.median(self.times) if self.times else None


def inference_length(model: CostModel, paradigm: str) -> int:
    """Tokens per inference forward: user token + history + candidates."""
    if paradigm == "METAGR":
        return 2 * model.N + 1 + model.m
    return model.N + 1 + model.m


def measure_runtime(model: CostModel, paradigm: str, trials: int, seed: int = 0) -> RuntimeReport:
    """Median wall time of one inference forward through ``L`` HSTU blocks.

    Inputs are random embeddings; only the encoder is timed.
    """
    from .autograd import Tensor, no_grad
    from .hstu import HstuConfig, HstuParams, attention_context, real_flow_layer
    from .masking import causal_mask

    analytic = paradigm_flops(model).infer_ratio(paradigm)
    T = inference_length(model, paradigm)
    if trials <= 0:
        return RuntimeReport(paradigm, T, [], analytic)
    cfg = HstuConfig(dim=model.D, heads=model.H, layers=model.L)
    rng = np.random.default_rng(seed)
    layers = [HstuParams(cfg, rng) for _ in range(model.L)]
    x = Tensor(rng.normal(size=(model.B, T, model.D)))
    pos = np.broadcast_to(np.arange(T), (model.B, T))
    ctx = attention_context(
        np.broadcast_to(causal_mask(T), (model.B, T, T)), pos, pos * 10, cfg
    )
    times = []
    with no_grad():
        for _ in range(trials):
            t0 = time.perf_counter()
            h = x
            for p in layers:
                h, _ = real_flow_layer(h, ctx, p, cfg)
            times.append(time.perf_counter() - t0)
    return RuntimeReport(paradigm, T, times, analytic)
