"""Training objective: next-token cross entropy plus the balance penalty.

The balance term couples F (fraction of tokens whose top choice is expert i,
a hard count) with G (mean softmax mass on expert i). Only G carries gradient;
pushing their inner product down spreads probability mass toward experts that
currently receive few tokens. Per-layer terms are averaged so the weight
alpha means the same thing at any depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .router import RoutingOutcome
from .tensor import Tensor, cross_entropy, reshape


@dataclass
class LossReport:
    total: float
    regressive: float
    aux: float
    per_layer_aux: list[float] = field(default_factory=list)
    alpha: float = 0.0

    def to_record(self) -> dict:
        return {
            "regressive": self.regressive,
            "aux": self.aux,
            "total": self.total,
        }


def autoregressive_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross entropy over positions whose target is not -1."""
    b, s, v = logits.shape
    return cross_entropy(reshape(logits, (b * s, v)), np.asarray(targets).reshape(-1))


def balance_loss(outcome: RoutingOutcome) -> Tensor:
    """E * sum_i F_i * G_i for one MoE layer; differentiable through G."""
    return (outcome.F * outcome.G).sum() * float(outcome.n_experts)


def total_loss(
    targets: np.ndarray,
    logits: Tensor,
    outcomes: list[RoutingOutcome],
    alpha: float,
) -> tuple[Tensor, LossReport]:
    """Assemble the training scalar and its report.

    aux is the mean of per-layer balance losses; a dense model (no outcomes)
    has aux defined as 0, making total equal to the regressive term.
    """
    regressive = autoregressive_loss(logits, targets)
    per_layer = [balance_loss(o) for o in outcomes]
    if per_layer:
        aux = per_layer[0]
        for term in per_layer[1:]:
            aux = aux + term
        aux = aux * (1.0 / len(per_layer))
    else:
        aux = Tensor(0.0)
    total = regressive + alpha * aux
    report = LossReport(
        total=float(total.data),
        regressive=float(regressive.data),
        aux=float(aux.data),
        per_layer_aux=[float(t.data) for t in per_layer],
        alpha=alpha,
    )
    return total, report
