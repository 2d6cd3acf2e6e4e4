"""Per-position prediction head and the masked binary cross-entropy loss."""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, masked_bce_with_logits, silu


class HeadParams:
    """Two-layer MLP: D -> D/2 (SiLU) -> 1 logit."""

    def __init__(self, dim: int, rng: np.random.Generator | None = None, std: float = 0.02):
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = max(dim // 2, 1)
        self.W1 = Tensor(rng.normal(0.0, std, size=(dim, hidden)), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True)
        self.W2 = Tensor(rng.normal(0.0, std, size=(hidden, 1)), requires_grad=True)
        self.b2 = Tensor(np.zeros(1), requires_grad=True)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [
            ("head.W1", self.W1),
            ("head.b1", self.b1),
            ("head.W2", self.W2),
            ("head.b2", self.b2),
        ]


def score(Y: Tensor, head: HeadParams) -> Tensor:
    """One logit per position; ``Y`` is ``(..., T, D)``, the result ``(..., T)``."""
    h = silu(Y @ head.W1 + head.b1)
    z = h @ head.W2 + head.b2
    return z.reshape(z.shape[:-1])


def probabilities(logits: Tensor | np.ndarray) -> np.ndarray:
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def masked_bce(logits: Tensor, labels, label_mask) -> Tensor:
    return masked_bce_with_logits(logits, labels, label_mask)
