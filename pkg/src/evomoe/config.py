"""Configuration dataclasses and the strict JSON config format.

One JSON document describes a whole lab run: model architecture, synthetic
task, the three stage schedules, and the aux-loss weight. Unknown keys are
rejected at every level so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from .errors import ConfigError

STAGE_NAMES = ("I", "II", "III")


@dataclass
class ModelConfig:
    """Architecture and ablation switches."""

    vocab_size: int = 64
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 2
    ffn_hidden: int = 128
    n_experts: int = 4
    top_k: int = 1
    router_kind: str = "dtr"  # "dtr" or "linear"
    moe_placement: str = "alternating"  # "alternating", "all", "none"
    skip_first_moe_layer: bool = False
    shared_expert: bool = False
    dtr_rank: int = 4
    hypernet_hidden: int = 16
    beta_ranges: list = field(
        default_factory=lambda: [[0.9, 0.99], [0.8, 0.89], [0.7, 0.79]]
    )
    max_seq_len: int = 32
    seed: int = 42

    def validate(self) -> None:
        if self.d_model <= 0 or self.n_layers <= 0 or self.ffn_hidden <= 0:
            raise ConfigError("d_model, n_layers, ffn_hidden must be positive")
        if self.n_heads <= 0 or self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"n_heads must divide d_model, got {self.n_heads} and {self.d_model}"
            )
        if self.n_experts < 1:
            raise ConfigError("n_experts must be >= 1")
        if not (1 <= self.top_k <= self.n_experts):
            raise ConfigError(f"top_k must lie in [1, {self.n_experts}], got {self.top_k}")
        if self.router_kind not in ("linear", "dtr"):
            raise ConfigError(f"router_kind must be 'linear' or 'dtr', got {self.router_kind!r}")
        if self.moe_placement not in ("alternating", "all", "none"):
            raise ConfigError(f"unknown moe_placement {self.moe_placement!r}")
        if self.dtr_rank <= 0 or self.dtr_rank % 2 != 0:
            raise ConfigError("dtr_rank must be positive and even (swiglu halves it)")
        if self.hypernet_hidden <= 0:
            raise ConfigError("hypernet_hidden must be positive")
        if self.max_seq_len <= 0:
            raise ConfigError("max_seq_len must be positive")
        if self.n_experts > 1:
            if len(self.beta_ranges) != self.n_experts - 1:
                raise ConfigError(
                    f"beta_ranges needs {self.n_experts - 1} (lo, hi) pairs, "
                    f"got {len(self.beta_ranges)}"
                )
            for pair in self.beta_ranges:
                if len(pair) != 2 or not (0.0 <= pair[0] <= pair[1] <= 1.0):
                    raise ConfigError(f"bad beta range {pair}: need 0 <= lo <= hi <= 1")

    def moe_layers(self) -> list[int]:
        """Indices of layers that carry an expert bank after the transition."""
        if self.moe_placement == "none":
            return []
        if self.moe_placement == "all":
            layers = list(range(self.n_layers))
        else:
            layers = [i for i in range(self.n_layers) if i % 2 == 0]
        if self.skip_first_moe_layer and 0 in layers:
            layers.remove(0)
        return layers


@dataclass
class SyntheticTaskSpec:
    """Two-segment sequences: a visual prefix and a text suffix.

    Each segment lives in its own disjoint id range and follows its own affine
    next-token rule t -> (mult * t + add) mod segment_vocab. Every non-boundary
    target is therefore a deterministic function of the current token.
    """

    vocab_a: int = 32
    vocab_b: int = 32
    rule_a: list = field(default_factory=lambda: [5, 3])
    rule_b: list = field(default_factory=lambda: [7, 11])
    prefix_len: int = 16
    suffix_len: int = 16
    seed: int = 42

    def validate(self) -> None:
        if self.vocab_a <= 0 or self.vocab_b <= 0:
            raise ConfigError("segment vocab sizes must be positive")
        if self.prefix_len <= 0 or self.suffix_len <= 0:
            raise ConfigError("prefix_len and suffix_len must be positive")
        for name, rule in (("rule_a", self.rule_a), ("rule_b", self.rule_b)):
            if len(rule) != 2:
                raise ConfigError(f"{name} must be a [mult, add] pair, got {rule}")

    @property
    def seq_len(self) -> int:
        return self.prefix_len + self.suffix_len


@dataclass
class StageConfig:
    """One stage's schedule. The trainable set is derived from `stage`."""

    stage: str  # "I", "II", "III"
    steps: int = 100
    batch_size: int = 8
    learning_rate: float = 1e-3
    eval_every: int = 50

    def validate(self) -> None:
        if self.stage not in STAGE_NAMES:
            raise ConfigError(f"stage must be one of {STAGE_NAMES}, got {self.stage!r}")
        if self.steps <= 0 or self.batch_size <= 0 or self.eval_every <= 0:
            raise ConfigError("steps, batch_size, eval_every must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


@dataclass
class LabConfig:
    """Everything one run needs: model + task + stage schedules + alpha."""

    model: ModelConfig = field(default_factory=ModelConfig)
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    stages: dict = field(
        default_factory=lambda: {
            "I": StageConfig("I", steps=300),
            "II": StageConfig("II", steps=200),
            "III": StageConfig("III", steps=150),
        }
    )
    alpha: float = 0.001

    def validate(self) -> None:
        self.model.validate()
        self.task.validate()
        if set(self.stages.keys()) != set(STAGE_NAMES):
            raise ConfigError(f"stages must define exactly {STAGE_NAMES}")
        for name, st in self.stages.items():
            st.validate()
            if st.stage != name:
                raise ConfigError(f"stage entry {name!r} declares stage {st.stage!r}")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.task.vocab_a + self.task.vocab_b != self.model.vocab_size:
            raise ConfigError(
                f"vocab_size {self.model.vocab_size} != "
                f"vocab_a + vocab_b = {self.task.vocab_a + self.task.vocab_b}"
            )
        if self.task.seq_len > self.model.max_seq_len:
            raise ConfigError(
                f"prefix_len + suffix_len = {self.task.seq_len} exceeds "
                f"max_seq_len {self.model.max_seq_len}"
            )

    def to_dict(self) -> dict:
        return {
            "model": asdict(self.model),
            "task": asdict(self.task),
            "stages": {
                name: {k: v for k, v in asdict(st).items() if k != "stage"}
                for name, st in sorted(self.stages.items())
            },
            "alpha": self.alpha,
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def _build(cls, section: str, raw: dict, extra: dict | None = None):
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    fields = {f for f in cls.__dataclass_fields__}
    unknown = set(raw.keys()) - fields
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    merged = dict(raw)
    if extra:
        merged.update(extra)
    try:
        return cls(**merged)
    except TypeError as e:
        raise ConfigError(f"bad {section!r} section: {e}") from e


def config_from_dict(doc: dict) -> LabConfig:
    """Parse and validate a full config document. Unknown keys are errors."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(doc.keys()) - {"model", "task", "stages", "alpha"}
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")

    cfg = LabConfig()
    if "model" in doc:
        cfg.model = _build(ModelConfig, "model", doc["model"])
    if "task" in doc:
        cfg.task = _build(SyntheticTaskSpec, "task", doc["task"])
    if "stages" in doc:
        raw_stages = doc["stages"]
        if not isinstance(raw_stages, dict):
            raise ConfigError("'stages' must be an object keyed by stage name")
        unknown = set(raw_stages.keys()) - set(STAGE_NAMES)
        if unknown:
            raise ConfigError(f"unknown stage names: {sorted(unknown)}")
        stages = {}
        for name in STAGE_NAMES:
            if name in raw_stages:
                stages[name] = _build(
                    StageConfig, f"stages.{name}", raw_stages[name], {"stage": name}
                )
            else:
                stages[name] = cfg.stages[name]
        cfg.stages = stages
    if "alpha" in doc:
        if not isinstance(doc["alpha"], (int, float)) or isinstance(doc["alpha"], bool):
            raise ConfigError("alpha must be a number")
        cfg.alpha = float(doc["alpha"])
    cfg.validate()
    return cfg


def load_config(path: str) -> LabConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return config_from_dict(doc)


def config_from_snapshot(snapshot: dict) -> LabConfig:
    """Rebuild a LabConfig from a checkpoint's embedded snapshot."""
    return config_from_dict(snapshot)
