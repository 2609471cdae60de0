"""Causal transformer with optional expert banks on a placement schedule.

The model exists in two shapes sharing one parameter registry convention:
dense (every layer has a single FFN) and sparse (layers on the placement
schedule carry an expert bank plus a router). transition_to_moe converts a
trained dense model into the sparse shape by replicating each converted FFN
into all experts of its bank and freshly initializing the router, which keeps
the function computed by the network bit-identical at top-1.

Parameter init: weights ~ Normal(0, 0.02), biases zero, layer-norm gain one.
Every array draws from its own named rng stream, so init is independent of
construction order. The output projection is tied to the input embedding.
"""

from __future__ import annotations

import logging

import numpy as np

from .config import ModelConfig
from .data import MODALITY_T, MODALITY_V
from .errors import ContractError
from .rng import Rng, stream_id_for_name
from .router import (
    Hypernetwork,
    RoutingOutcome,
    dtr_route,
    linear_route,
    shuffle_assignments,
)
from .tensor import (
    Tensor,
    embedding,
    layer_norm,
    matmul,
    narrow,
    reshape,
    scatter_rows,
    softmax,
    swiglu,
    take_rows,
    transpose,
)

INIT_STD = 0.02
MASK_VALUE = -1e30


class ParamFactory:
    """Creates named parameters and records them in a registry."""

    def __init__(self, seed: int, registry: dict):
        self.seed = seed
        self.registry = registry

    def _register(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.registry:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self.registry[name] = t
        return t

    def weight(self, name: str, shape: tuple) -> Tensor:
        rng = Rng(self.seed, stream_id_for_name(f"init/{name}"))
        return self._register(name, rng.normal(shape, std=INIT_STD))

    def zeros(self, name: str, shape: tuple) -> Tensor:
        return self._register(name, np.zeros(shape, dtype=np.float64))

    def ones(self, name: str, shape: tuple) -> Tensor:
        return self._register(name, np.ones(shape, dtype=np.float64))


class NormParams:
    def __init__(self, factory: ParamFactory, prefix: str, dim: int):
        self.gain = factory.ones(f"{prefix}.gain", (dim,))
        self.bias = factory.zeros(f"{prefix}.bias", (dim,))


class FeedForward:
    """SwiGLU FFN: gate and value projections packed into one input matrix."""

    def __init__(self, factory: ParamFactory, prefix: str, d_model: int, hidden: int):
        self.prefix = prefix
        self.w_in = factory.weight(f"{prefix}.w_in", (d_model, 2 * hidden))
        self.b_in = factory.zeros(f"{prefix}.b_in", (2 * hidden,))
        self.w_out = factory.weight(f"{prefix}.w_out", (hidden, d_model))
        self.b_out = factory.zeros(f"{prefix}.b_out", (d_model,))

    def arrays(self) -> list[Tensor]:
        return [self.w_in, self.b_in, self.w_out, self.b_out]


def ffn_expert_forward(x: Tensor, expert: FeedForward) -> Tensor:
    """W_out applied to swiglu(W_in x), with biases. x is (N, C) or (B, S, C)."""
    return matmul(swiglu(matmul(x, expert.w_in) + expert.b_in), expert.w_out) + expert.b_out


class AttentionParams:
    def __init__(self, factory: ParamFactory, prefix: str, d_model: int, n_heads: int):
        self.n_heads = n_heads
        self.wq = factory.weight(f"{prefix}.wq", (d_model, d_model))
        self.bq = factory.zeros(f"{prefix}.bq", (d_model,))
        self.wk = factory.weight(f"{prefix}.wk", (d_model, d_model))
        self.bk = factory.zeros(f"{prefix}.bk", (d_model,))
        self.wv = factory.weight(f"{prefix}.wv", (d_model, d_model))
        self.bv = factory.zeros(f"{prefix}.bv", (d_model,))
        self.wo = factory.weight(f"{prefix}.wo", (d_model, d_model))
        self.bo = factory.zeros(f"{prefix}.bo", (d_model,))


def _causal_mask(seq_len: int) -> Tensor:
    mask = np.triu(np.full((seq_len, seq_len), MASK_VALUE), k=1)
    return Tensor(mask)


def attention_block(z: Tensor, attn: AttentionParams, norm: NormParams) -> Tensor:
    """Residual multi-head causal self-attention: z + MSA(LN(z))."""
    b, s, c = z.shape
    h = attn.n_heads
    dh = c // h
    x = layer_norm(z, norm.gain, norm.bias)

    def split_heads(t: Tensor) -> Tensor:
        return transpose(reshape(t, (b, s, h, dh)), (0, 2, 1, 3))  # (B, H, S, dh)

    q = split_heads(matmul(x, attn.wq) + attn.bq)
    k = split_heads(matmul(x, attn.wk) + attn.bk)
    v = split_heads(matmul(x, attn.wv) + attn.bv)

    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    weights = softmax(scores + _causal_mask(s))
    ctx = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (b, s, c))
    return z + (matmul(ctx, attn.wo) + attn.bo)


class ExpertBank:
    """Per-layer expert set: expert 0 trains, the rest evolve."""

    def __init__(self, experts: list[FeedForward], shared: FeedForward | None = None):
        self.experts = experts
        self.trainable = [i == 0 for i in range(len(experts))]
        self.shared = shared

    @property
    def n_experts(self) -> int:
        return len(self.experts)


class LinearRouter:
    def __init__(self, factory: ParamFactory, prefix: str, d_model: int, n_experts: int):
        self.weight = factory.weight(f"{prefix}.weight", (d_model, n_experts))

    def route(self, x: Tensor, modality: np.ndarray, top_k: int) -> RoutingOutcome:
        return linear_route(x, self.weight, modality, top_k)

    def arrays(self) -> list[Tensor]:
        return [self.weight]


class TokenRouter:
    """Modality-split hypernetworks plus the final affine gate layer."""

    def __init__(self, factory: ParamFactory, prefix: str, cfg: ModelConfig):
        c, r, hh = cfg.d_model, cfg.dtr_rank, cfg.hypernet_hidden

        def hyper(tag_name: str, tag: int) -> Hypernetwork:
            p = f"{prefix}.{tag_name}"
            return Hypernetwork(
                w1=factory.weight(f"{p}.w1", (c, hh)),
                b1=factory.zeros(f"{p}.b1", (hh,)),
                w2=factory.weight(f"{p}.w2", (hh, 2 * c * r)),
                b2=factory.zeros(f"{p}.b2", (2 * c * r,)),
                modality=tag,
            )

        self.h_visual = hyper("visual", MODALITY_V)
        self.h_text = hyper("text", MODALITY_T)
        self.gate_weight = factory.weight(f"{prefix}.gate.weight", (c, cfg.n_experts))
        self.gate_bias = factory.zeros(f"{prefix}.gate.bias", (cfg.n_experts,))

    def route(self, x: Tensor, modality: np.ndarray, top_k: int) -> RoutingOutcome:
        return dtr_route(
            x, modality, self.h_visual, self.h_text, self.gate_weight, self.gate_bias, top_k
        )

    def arrays(self) -> list[Tensor]:
        return (
            self.h_visual.params()
            + self.h_text.params()
            + [self.gate_weight, self.gate_bias]
        )


class Block:
    def __init__(self, factory: ParamFactory, index: int, cfg: ModelConfig, is_moe: bool):
        prefix = f"block{index}"
        self.index = index
        self.attn_norm = NormParams(factory, f"{prefix}.attn_norm", cfg.d_model)
        self.attn = AttentionParams(factory, f"{prefix}.attn", cfg.d_model, cfg.n_heads)
        self.ffn_norm = NormParams(factory, f"{prefix}.ffn_norm", cfg.d_model)
        self.ffn: FeedForward | None = None
        self.bank: ExpertBank | None = None
        self.router = None
        if is_moe:
            experts = [
                FeedForward(factory, f"{prefix}.expert{e}", cfg.d_model, cfg.ffn_hidden)
                for e in range(cfg.n_experts)
            ]
            shared = (
                FeedForward(factory, f"{prefix}.shared", cfg.d_model, cfg.ffn_hidden)
                if cfg.shared_expert
                else None
            )
            self.bank = ExpertBank(experts, shared)
            if cfg.router_kind == "linear":
                self.router = LinearRouter(factory, f"{prefix}.router", cfg.d_model, cfg.n_experts)
            else:
                self.router = TokenRouter(factory, f"{prefix}.router", cfg)
        else:
            self.ffn = FeedForward(factory, f"{prefix}.ffn", cfg.d_model, cfg.ffn_hidden)


def moe_layer_forward(
    z_prime: Tensor, x_ln: Tensor, bank: ExpertBank, routing: RoutingOutcome
) -> Tensor:
    """Combine expert outputs per routing: residual + gated expert mix.

    z_prime is the attention output (B, S, C); x_ln is LN(z_prime) flattened
    to (B*S, C), the same rows the router saw. Tokens are dispatched to each
    expert as one gathered sub-batch, scaled by their renormalized gate, and
    scattered back.
    """
    b, s, c = z_prime.shape
    n = b * s
    if int(routing.selected.max()) >= bank.n_experts:
        raise ContractError(
            f"routing selects expert {int(routing.selected.max())} "
            f"but the bank has {bank.n_experts}"
        )

    combined = None
    for k in range(routing.selected.shape[1]):
        gate_col = narrow(routing.gates, 1, k, 1)  # (N, 1)
        assignment = routing.selected[:, k]
        for e in range(bank.n_experts):
            idx = np.nonzero(assignment == e)[0]
            if idx.size == 0:
                continue
            out = ffn_expert_forward(take_rows(x_ln, idx), bank.experts[e])
            part = scatter_rows(out * take_rows(gate_col, idx), idx, n)
            combined = part if combined is None else combined + part
    if bank.shared is not None:
        combined = combined + ffn_expert_forward(x_ln, bank.shared)
    return z_prime + reshape(combined, (b, s, c))


class Model:
    """The full network plus its named parameter registry."""

    def __init__(self, cfg: ModelConfig, is_moe: bool):
        cfg.validate()
        self.config = cfg
        self.is_moe = is_moe
        self.params: dict[str, Tensor] = {}
        factory = ParamFactory(cfg.seed, self.params)

        self.embed = factory.weight("embed.weight", (cfg.vocab_size, cfg.d_model))
        self.pos = factory.weight("pos.weight", (cfg.max_seq_len, cfg.d_model))
        moe_layers = set(cfg.moe_layers()) if is_moe else set()
        self.blocks = [
            Block(factory, i, cfg, is_moe=i in moe_layers) for i in range(cfg.n_layers)
        ]
        self.final_norm = NormParams(factory, "final_norm", cfg.d_model)

    # ---- structure helpers ----

    def moe_blocks(self) -> list[Block]:
        return [blk for blk in self.blocks if blk.bank is not None]

    def banks(self) -> list[ExpertBank]:
        return [blk.bank for blk in self.moe_blocks()]

    def param_names_for_stage(self, stage: str) -> set[str]:
        """Names trainable in a stage; everything else stays frozen."""
        if stage == "I":
            return set(self.params.keys())
        if stage == "II":
            picked = set()
            for blk in self.moe_blocks():
                for arr, name in _ffn_named(blk, "expert0"):
                    picked.add(name)
                if blk.bank.shared is not None:
                    for arr, name in _ffn_named(blk, "shared"):
                        picked.add(name)
            return picked
        if stage == "III":
            return {name for name in self.params if ".router." in name}
        raise ContractError(f"unknown stage {stage!r}")

    def apply_stage_mask(self, stage: str) -> None:
        trainable = self.param_names_for_stage(stage)
        for name, p in self.params.items():
            p.requires_grad = name in trainable
        for blk in self.moe_blocks():
            blk.bank.trainable = [e == 0 for e in range(blk.bank.n_experts)]

    # ---- forward ----

    def forward(
        self,
        tokens: np.ndarray,
        modality: np.ndarray,
        assignment_perms: dict | None = None,
        force_expert: int | None = None,
    ) -> tuple[Tensor, list[RoutingOutcome]]:
        """Run the network; returns vocab logits and per-MoE-layer outcomes.

        assignment_perms optionally maps layer index to an expert permutation
        applied to that layer's routing assignments (diagnostics only).

        force_expert sends every token in every bank through that one expert
        (plus the shared expert when configured), skipping the routers
        entirely; no routing outcomes are produced. The expert-growing stage
        trains this way: the bank's trainable expert sees the full token
        stream while the router waits for its own stage.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        b, s = tokens.shape
        if s > self.config.max_seq_len:
            raise ContractError(f"sequence length {s} exceeds max_seq_len")

        x = embedding(self.embed, tokens) + embedding(self.pos, np.arange(s))
        modality_flat = np.asarray(modality).reshape(-1)
        outcomes: list[RoutingOutcome] = []

        for blk in self.blocks:
            z = attention_block(x, blk.attn, blk.attn_norm)
            x_ln = layer_norm(z, blk.ffn_norm.gain, blk.ffn_norm.bias)
            if blk.bank is None:
                out = ffn_expert_forward(
                    reshape(x_ln, (b * s, self.config.d_model)), blk.ffn
                )
                x = z + reshape(out, (b, s, self.config.d_model))
            elif force_expert is not None:
                if force_expert >= blk.bank.n_experts:
                    raise ContractError(
                        f"force_expert {force_expert} out of range for a "
                        f"bank of {blk.bank.n_experts}"
                    )
                flat = reshape(x_ln, (b * s, self.config.d_model))
                out = ffn_expert_forward(flat, blk.bank.experts[force_expert])
                if blk.bank.shared is not None:
                    out = out + ffn_expert_forward(flat, blk.bank.shared)
                x = z + reshape(out, (b, s, self.config.d_model))
            else:
                flat = reshape(x_ln, (b * s, self.config.d_model))
                outcome = blk.router.route(flat, modality_flat, self.config.top_k)
                if assignment_perms and blk.index in assignment_perms:
                    outcome = shuffle_assignments(outcome, assignment_perms[blk.index])
                outcomes.append(outcome)
                x = moe_layer_forward(z, flat, blk.bank, outcome)

        x = layer_norm(x, self.final_norm.gain, self.final_norm.bias)
        logits = matmul(x, transpose(self.embed))
        return logits, outcomes


def _ffn_named(blk: Block, slot: str) -> list[tuple[Tensor, str]]:
    prefix = f"block{blk.index}.{slot}"
    ffn = blk.bank.shared if slot == "shared" else blk.bank.experts[int(slot[6:])]
    return [
        (ffn.w_in, f"{prefix}.w_in"),
        (ffn.b_in, f"{prefix}.b_in"),
        (ffn.w_out, f"{prefix}.w_out"),
        (ffn.b_out, f"{prefix}.b_out"),
    ]


def model_forward(
    batch,
    model: Model,
    assignment_perms: dict | None = None,
    force_expert: int | None = None,
) -> tuple[Tensor, list[RoutingOutcome]]:
    """Convenience wrapper taking a TokenBatch."""
    return model.forward(batch.tokens, batch.modality, assignment_perms, force_expert)


def transition_to_moe(dense: Model) -> Model:
    """Convert a trained dense model into the sparse shape.

    Every placement layer's FFN becomes expert 0 and is replicated bit-exactly
    into the other experts; routers are freshly initialized from their named
    seed streams. With top-1 routing the converted model computes the same
    function as the dense one. The shared expert, when configured, starts with
    a zero output projection so it cannot perturb that equivalence.
    """
    cfg = dense.config
    if dense.is_moe:
        raise ContractError("transition_to_moe expects a dense model")
    if not cfg.moe_layers() and cfg.n_experts > 1:
        logging.getLogger("evomoe").warning(
            "moe_placement %r yields no MoE layers while n_experts=%d",
            cfg.moe_placement,
            cfg.n_experts,
        )

    sparse = Model(cfg, is_moe=True)
    moe_set = set(cfg.moe_layers())
    for name, src in dense.params.items():
        if name in sparse.params:
            sparse.params[name].data[...] = src.data
    for li in moe_set:
        for part in ("w_in", "b_in", "w_out", "b_out"):
            src = dense.params[f"block{li}.ffn.{part}"]
            for e in range(cfg.n_experts):
                sparse.params[f"block{li}.expert{e}.{part}"].data[...] = src.data
            if cfg.shared_expert:
                tgt = sparse.params[f"block{li}.shared.{part}"]
                if part in ("w_out", "b_out"):
                    tgt.data[...] = 0.0
                else:
                    tgt.data[...] = src.data
    return sparse
