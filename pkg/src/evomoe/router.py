"""Expert selection: the linear baseline and the token-aware hypernetwork router.

The linear router is one shared affine map from token vector to expert logits.
The token-aware router generates a per-token down/up projection pair from a
modality-specific hypernetwork, squeezes the token through that generated
bottleneck with a swiglu gate, and maps the bottleneck feature to expert
logits with a final affine gate layer. Visual and text tokens never share a
hypernetwork.

Both routers produce a RoutingOutcome carrying everything downstream code
needs: logits, selections, renormalized gates, and the F/G balance statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import MODALITY_T, MODALITY_V
from .errors import ContractError
from .tensor import (
    Tensor,
    concat,
    gather2d,
    matmul,
    narrow,
    reshape,
    scatter_rows,
    softmax,
    swiglu,
    take_rows,
)


@dataclass
class RoutingOutcome:
    """Per-token routing decisions plus the layer's balance statistics.

    F is the hard top-1 token-fraction histogram, held as a constant (no
    gradient); G is the mean softmax mass per expert and is the differentiable
    path into the balance loss.
    """

    logits: Tensor  # (N, E)
    selected: np.ndarray  # (N, K) int64, descending logit order
    gates: Tensor  # (N, K), renormalized over the K selected
    F: Tensor  # (E,) constant token fractions
    G: Tensor  # (E,) mean softmax mass, differentiable
    modality_of_token: np.ndarray  # (N,)
    # tokens each hypernetwork actually served in this call (instrumentation;
    # the linear router leaves it empty)
    hypernet_counts: dict = field(default_factory=dict)

    @property
    def n_experts(self) -> int:
        return self.logits.shape[1]


def _finish_outcome(logits: Tensor, modality: np.ndarray, top_k: int) -> RoutingOutcome:
    """Selection, gate renormalization, and F/G from raw logits."""
    n, n_experts = logits.shape
    if not (1 <= top_k <= n_experts):
        raise ContractError(f"top_k {top_k} out of range [1, {n_experts}]")
    if n == 0:
        raise ContractError("routing needs at least one token")

    probs = softmax(logits)

    # Stable sort on negated logits: equal logits keep index order, so ties
    # resolve toward the lower expert index.
    order = np.argsort(-logits.data, axis=1, kind="stable")
    selected = order[:, :top_k].astype(np.int64)

    rows = np.repeat(np.arange(n, dtype=np.int64), top_k)
    raw = reshape(gather2d(probs, rows, selected.reshape(-1)), (n, top_k))
    gates = raw / raw.sum(axis=1, keepdims=True)

    counts = np.bincount(selected[:, 0], minlength=n_experts).astype(np.float64)
    f_stat = Tensor(counts / n)
    g_stat = probs.mean(axis=0)

    return RoutingOutcome(
        logits=logits,
        selected=selected,
        gates=gates,
        F=f_stat,
        G=g_stat,
        modality_of_token=np.asarray(modality),
    )


def linear_route(x: Tensor, weight: Tensor, modality: np.ndarray, top_k: int) -> RoutingOutcome:
    """Shared affine router: logits = x @ weight, weight is (C, E)."""
    return _finish_outcome(matmul(x, weight), modality, top_k)


@dataclass
class Hypernetwork:
    """Affine-affine map from a token vector to its generated projections.

    The output vector of length 2*C*r splits row-major into the down
    projection (C, r) followed by the up projection (r, C). There is no
    nonlinearity between the two affine maps; the composition is affine in
    the token by construction.
    """

    w1: Tensor  # (C, hidden)
    b1: Tensor  # (hidden,)
    w2: Tensor  # (hidden, 2*C*r)
    b2: Tensor  # (2*C*r,)
    modality: int  # MODALITY_V or MODALITY_T

    def params(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


def hypernet_forward(x: Tensor, h: Hypernetwork) -> tuple[Tensor, Tensor]:
    """Generate per-token (theta_down, theta_up): (N, C, r) and (N, r, C)."""
    n, c = x.shape
    out = matmul(matmul(x, h.w1) + h.b1, h.w2) + h.b2
    r = out.shape[1] // (2 * c)
    theta_down = reshape(narrow(out, 1, 0, c * r), (n, c, r))
    theta_up = reshape(narrow(out, 1, c * r, r * c), (n, r, c))
    return theta_down, theta_up


def _bottleneck(x: Tensor, h: Hypernetwork) -> Tensor:
    """Squeeze each token through its generated projections.

    u = x @ theta_down is an r-vector; swiglu halves it to r/2; the gated
    feature drives both halves of theta_up (duplication convention), keeping
    every generated parameter live: e = concat(s, s) @ theta_up.
    """
    n, c = x.shape
    theta_down, theta_up = hypernet_forward(x, h)
    u = matmul(reshape(x, (n, 1, c)), theta_down)  # (N, 1, r)
    s = swiglu(u)  # (N, 1, r/2)
    e = matmul(concat([s, s], axis=-1), theta_up)  # (N, 1, C)
    return reshape(e, (n, c))


def dtr_route(
    x: Tensor,
    modality: np.ndarray,
    h_visual: Hypernetwork,
    h_text: Hypernetwork,
    gate_weight: Tensor,
    gate_bias: Tensor,
    top_k: int,
) -> RoutingOutcome:
    """Token-aware routing: per-modality hypernetworks, then the gate layer."""
    modality = np.asarray(modality)
    n = x.shape[0]
    if n == 0:
        raise ContractError("routing needs at least one token")
    known = (modality == MODALITY_V) | (modality == MODALITY_T)
    if not known.all():
        bad = np.unique(modality[~known])
        raise ContractError(f"unknown modality tags {bad.tolist()}")

    counts: dict[int, int] = {}
    feature = None
    for tag, h in ((MODALITY_V, h_visual), (MODALITY_T, h_text)):
        idx = np.nonzero(modality == tag)[0]
        counts[tag] = int(idx.size)
        if idx.size == 0:
            continue
        part = scatter_rows(_bottleneck(take_rows(x, idx), h), idx, n)
        feature = part if feature is None else feature + part

    logits = matmul(feature, gate_weight) + gate_bias
    outcome = _finish_outcome(logits, modality, top_k)
    outcome.hypernet_counts = counts
    return outcome


def shuffle_assignments(
    outcome: RoutingOutcome, perm: np.ndarray | None = None, rng=None
) -> RoutingOutcome:
    """Relabel which expert serves each token; gates and logits untouched.

    perm maps old expert index to new. When perm is None a random permutation
    is drawn from rng. Inference-time diagnostic only: the result's F is
    recomputed from the remapped assignments, G keeps the original logits'
    value (the probabilities did not change, only who serves the token).
    """
    n_experts = outcome.n_experts
    if perm is None:
        if rng is None:
            raise ContractError("shuffle_assignments needs a permutation or an rng")
        perm = rng.permutation(n_experts)
    perm = np.asarray(perm, dtype=np.int64)
    if perm.shape != (n_experts,) or not np.array_equal(np.sort(perm), np.arange(n_experts)):
        raise ContractError(f"perm must be a bijection on 0..{n_experts - 1}, got {perm}")

    selected = perm[outcome.selected]
    n = selected.shape[0]
    counts = np.bincount(selected[:, 0], minlength=n_experts).astype(np.float64)
    return RoutingOutcome(
        logits=outcome.logits,
        selected=selected,
        gates=outcome.gates,
        F=Tensor(counts / n),
        G=outcome.G,
        modality_of_token=outcome.modality_of_token,
        hypernet_counts=dict(outcome.hypernet_counts),
    )
