"""Expert evolution: frozen experts as lagged averages of the trained one.

Expert 0 is the only expert the optimizer touches. After each optimizer step,
every other expert n is pulled toward expert 0's new parameters by an
exponential moving average with a retention coefficient beta_n drawn uniformly
from that expert's configured range. Small beta tracks expert 0 aggressively;
beta = 1 freezes the expert at its snapshot. Distinct ranges per expert are
what make the bank diverge into distinct functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .model import ExpertBank, FeedForward, ffn_expert_forward
from .rng import Rng
from .tensor import Tensor, no_grad


@dataclass
class EvolutionSchedule:
    """Per-expert beta ranges plus the stream the draws come from."""

    ranges: list  # (E-1) pairs [lo, hi], index n-1 belongs to expert n
    rng_stream: Rng
    active: bool = True

    def validate(self) -> None:
        for pair in self.ranges:
            lo, hi = float(pair[0]), float(pair[1])
            if not (0.0 <= lo <= hi <= 1.0):
                raise ContractError(f"beta range {pair} outside [0, 1] or inverted")


def init_evolved(bank: ExpertBank) -> None:
    """Reset experts 1..E-1 to bit-exact copies of expert 0 and freeze them."""
    base = bank.experts[0]
    for e in range(1, bank.n_experts):
        for dst, src in zip(bank.experts[e].arrays(), base.arrays()):
            dst.data[...] = src.data
    bank.trainable = [e == 0 for e in range(bank.n_experts)]


def evolution_step(banks, schedule: EvolutionSchedule) -> list[float]:
    """One evolution update across all banks; returns the sampled betas.

    One beta is drawn per evolved expert per step and applied to that expert's
    arrays in every bank, keeping layers in lockstep. Call exactly once per
    optimizer step, after expert 0 has been updated. Inactive schedules
    consume no randomness and change nothing.
    """
    if not schedule.active:
        return []
    if isinstance(banks, ExpertBank):
        banks = [banks]
    schedule.validate()

    betas = [schedule.rng_stream.uniform(lo, hi) for lo, hi in schedule.ranges]
    for bank in banks:
        if len(schedule.ranges) != bank.n_experts - 1:
            raise ContractError(
                f"schedule has {len(schedule.ranges)} ranges for a bank of "
                f"{bank.n_experts} experts"
            )
        base_arrays = [t.data for t in bank.experts[0].arrays()]
        for n, beta in enumerate(betas, start=1):
            for dst, src in zip(bank.experts[n].arrays(), base_arrays):
                if beta == 1.0:
                    continue  # exact no-op, keeps the snapshot bit-identical
                if beta == 0.0:
                    np.copyto(dst.data, src)
                else:
                    dst.data[...] = beta * dst.data + (1.0 - beta) * src
    return betas


def expert_divergence(bank: ExpertBank, probe: Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise distances between experts: parameters and behaviour.

    Returns (param_l2, func_l2), both (E, E). param_l2[i, j] is the l2 norm of
    the concatenated parameter difference; func_l2[i, j] is the mean over
    probe rows of the output-difference row norm.
    """
    if isinstance(probe, Tensor):
        probe_t = probe
    else:
        probe_t = Tensor(probe)
    if not np.any(probe_t.data):
        raise ContractError("expert_divergence probe must be nonzero")

    n_exp = bank.n_experts
    with no_grad():
        outs = [ffn_expert_forward(probe_t, exp).data for exp in bank.experts]
    param_l2 = np.zeros((n_exp, n_exp))
    func_l2 = np.zeros((n_exp, n_exp))
    for i in range(n_exp):
        for j in range(n_exp):
            if i == j:
                continue
            sq = 0.0
            for a, b in zip(bank.experts[i].arrays(), bank.experts[j].arrays()):
                d = a.data - b.data
                sq += float(np.sum(d * d))
            param_l2[i, j] = np.sqrt(sq)
            diff = outs[i] - outs[j]
            func_l2[i, j] = float(np.mean(np.sqrt(np.sum(diff * diff, axis=-1))))
    return param_l2, func_l2


def param_l2_between(a: FeedForward, b: FeedForward) -> float:
    """l2 distance between two FFN parameter groups (concatenated arrays)."""
    sq = 0.0
    for x, y in zip(a.arrays(), b.arrays()):
        d = x.data - y.data
        sq += float(np.sum(d * d))
    return float(np.sqrt(sq))
