"""Three-stage training orchestration.

Stage I trains a dense model from random init. Stage II converts it to the
sparse shape and trains only expert 0's FFN while the other experts evolve
after every step; its training forward sends every token through expert 0,
so the freshly initialized router sits untouched until stage III, which
trains only the router under the routed forward. Each stage picks its own
data stream; evaluation always reads the held-out stream with the routed
forward, positioned statelessly per batch so that evaluation never perturbs
training randomness.
"""

from __future__ import annotations

import math

from .checkpoint import TrainingState
from .config import LabConfig, StageConfig
from .data import batch_rng, generate_batch
from .errors import ContractError, NumericError
from .evolution import EvolutionSchedule, evolution_step
from .model import Model, transition_to_moe
from .objectives import autoregressive_loss, total_loss
from .optim import Adam
from .rng import (
    STREAM_BETA,
    STREAM_DATA_EVAL,
    STREAM_DATA_STAGE1,
    STREAM_DATA_STAGE2,
    STREAM_DATA_STAGE3,
    Rng,
)
from .tensor import no_grad

_STAGE_STREAMS = {
    "I": STREAM_DATA_STAGE1,
    "II": STREAM_DATA_STAGE2,
    "III": STREAM_DATA_STAGE3,
}


def new_run(lab: LabConfig) -> TrainingState:
    """Fresh stage-I state: dense model at random init."""
    lab.validate()
    return TrainingState(lab=lab, model=Model(lab.model, is_moe=False), stage="I", step=0)


def evaluate(model: Model, lab: LabConfig, n_batches: int, batch_size: int = 8) -> float:
    """Mean cross entropy over the held-out stream. Deterministic, read-only."""
    if n_batches <= 0:
        raise ContractError("evaluate needs n_batches >= 1")
    total = 0.0
    with no_grad():
        for j in range(n_batches):
            rng = batch_rng(lab.task, STREAM_DATA_EVAL, j, batch_size)
            batch = generate_batch(lab.task, rng, batch_size)
            logits, _ = model.forward(batch.tokens, batch.modality)
            total += float(autoregressive_loss(logits, batch.targets).data)
    return total / n_batches


def _enter_stage(state: TrainingState, target: str) -> TrainingState:
    """Transition/resume bookkeeping; returns a state positioned in `target`."""
    if target == state.stage:
        return state  # resume (possibly a no-op if already complete)
    if target == "I":
        raise ContractError("stage I starts from new_run(), not from a checkpoint")
    if target == "II":
        if state.stage != "I":
            raise ContractError(
                f"stage II requires a stage-I checkpoint, got stage {state.stage}"
            )
        sparse = transition_to_moe(state.model)
        return TrainingState(lab=state.lab, model=sparse, stage="II", step=0)
    if target == "III":
        if state.stage != "II":
            raise ContractError(
                f"stage III requires a stage-II checkpoint, got stage {state.stage}"
            )
        return TrainingState(
            lab=state.lab,
            model=state.model,
            stage="III",
            step=0,
            beta_counter=state.beta_counter,
        )
    raise ContractError(f"unknown stage {target!r}")


def run_stage(
    state: TrainingState,
    stage_cfg: StageConfig,
    eval_batches: int = 8,
) -> tuple[TrainingState, list[dict]]:
    """Run (or resume) one stage; returns the new state and its log records.

    The returned state's step equals stage_cfg.steps. Resuming an already
    complete stage returns it unchanged with no records.
    """
    stage_cfg.validate()
    target = stage_cfg.stage
    state = _enter_stage(state, target)
    if state.step >= stage_cfg.steps:
        return state, []

    lab = state.lab
    model = state.model
    if target != "I" and not model.is_moe:
        raise ContractError(f"stage {target} needs a sparse model")
    model.apply_stage_mask(target)

    adam = Adam(model.params, lr=stage_cfg.learning_rate)
    if state.step > 0:
        adam.load_state(state.adam_m, state.adam_v, state.adam_t)

    schedule = EvolutionSchedule(
        ranges=list(lab.model.beta_ranges) if lab.model.n_experts > 1 else [],
        rng_stream=Rng(lab.model.seed, STREAM_BETA, counter=state.beta_counter),
        active=(target == "II" and model.is_moe),
    )
    banks = model.banks()
    stream = _STAGE_STREAMS[target]
    # The expert-growing stage trains its expert on the whole token stream,
    # router untouched; only the router stage runs the routed forward.
    forced = 0 if target == "II" else None

    records: list[dict] = []
    for step in range(state.step, stage_cfg.steps):
        rng = batch_rng(lab.task, stream, step, stage_cfg.batch_size)
        batch = generate_batch(lab.task, rng, stage_cfg.batch_size)
        logits, outcomes = model.forward(batch.tokens, batch.modality, force_expert=forced)
        loss, report = total_loss(batch.targets, logits, outcomes, lab.alpha)
        if not math.isfinite(report.total):
            records.append(
                {
                    "event": "abort",
                    "stage": target,
                    "step": step + 1,
                    "regressive": report.regressive,
                    "aux": report.aux,
                    "total": report.total,
                }
            )
            raise NumericError(f"non-finite loss at stage {target} step {step + 1}")
        adam.zero_grad()
        loss.backward()
        adam.step()
        betas = evolution_step(banks, schedule) if schedule.active else []

        records.append(
            {
                "step": step + 1,
                "stage": target,
                "regressive": report.regressive,
                "aux": report.aux,
                "total": report.total,
                "betas": betas,
                "lr": stage_cfg.learning_rate,
            }
        )
        if (step + 1) % stage_cfg.eval_every == 0:
            ce = evaluate(model, lab, eval_batches, stage_cfg.batch_size)
            records.append(
                {"event": "eval", "stage": target, "step": step + 1, "eval_ce": ce}
            )

    out = TrainingState(
        lab=lab,
        model=model,
        stage=target,
        step=stage_cfg.steps,
        adam_t=adam.t,
        adam_m=adam.m,
        adam_v=adam.v,
        beta_counter=schedule.rng_stream.counter,
    )
    return out, records


def run_pipeline(
    lab: LabConfig, eval_batches: int = 8
) -> tuple[TrainingState, list[dict]]:
    """All three stages in sequence from a fresh model."""
    state = new_run(lab)
    all_records: list[dict] = []
    for name in ("I", "II", "III"):
        state, records = run_stage(state, lab.stages[name], eval_batches=eval_batches)
        all_records.extend(records)
    return state, all_records
