"""JSON experiment specifications.

A spec is one JSON document::

    {
      "dataset": {"name": "ring8", "n_train": 8000, "n_val": 1000, "seed": 0},
      "model": {"hidden": 64, "depth": 4, "blocks": 1, "seed": 0},
      "train": {"lambda_K": 0.01, "lambda_J": 0.01, "epochs": 100, ...},
      "ablation": {"seeds": [0], "strength": null},
      "output_dir": "runs/ring8",
      "exports": {"trajectories": true, "density_grid": true, "samples": true,
                  "plots": true}
    }

Every section and key is optional; missing values take the defaults below.
Unknown keys are rejected so that typos do not silently fall back to
defaults.  Command-line flags are applied on top of the file (flags win).
"""

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from .datasets import GENERATORS
from .errors import ConfigurationError
from .solvers import SolverConfig
from .training import TrainConfig


@dataclass
class DatasetSpec:
    name: str = "ring8"
    n_train: int = 8000
    n_val: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.name not in GENERATORS:
            raise ConfigurationError(
                f"unknown dataset {self.name!r}; choose from {sorted(GENERATORS)}")
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigurationError("dataset sizes must be at least 1")

    @property
    def val_seed(self):
        # held-out data comes from a different stream than the training data
        return self.seed + 1


@dataclass
class ModelSpec:
    hidden: int = 64
    depth: int = 4
    blocks: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.hidden < 1 or self.depth < 1 or self.blocks < 1:
            raise ConfigurationError("hidden, depth and blocks must be at least 1")


@dataclass
class AblationSpec:
    seeds: list = field(default_factory=lambda: [0])
    strength: Optional[float] = None

    def __post_init__(self):
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ConfigurationError("ablation needs at least one seed")
        if self.strength is not None and self.strength <= 0:
            raise ConfigurationError("ablation strength must be positive")


@dataclass
class ExportSpec:
    trajectories: bool = True
    density_grid: bool = True
    samples: bool = True
    plots: bool = True


@dataclass
class ExperimentSpec:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationSpec = field(default_factory=AblationSpec)
    output_dir: str = "runs"
    exports: ExportSpec = field(default_factory=ExportSpec)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_SECTIONS = {
    "dataset": DatasetSpec,
    "model": ModelSpec,
    "train": TrainConfig,
    "ablation": AblationSpec,
    "exports": ExportSpec,
}


def _check_keys(section, doc, cls):
    if not isinstance(doc, dict):
        raise ConfigurationError(f"section {section!r} must be an object")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")


def spec_from_dict(doc):
    if not isinstance(doc, dict):
        raise ConfigurationError("experiment spec must be a JSON object")
    _check_keys("<root>", doc, ExperimentSpec)
    kwargs = {}
    try:
        for name, cls in _SECTIONS.items():
            if name not in doc:
                continue
            sub = doc[name]
            _check_keys(name, sub, cls)
            if cls is TrainConfig:
                for key in ("solver", "eval_solver"):
                    if key in sub and isinstance(sub[key], dict):
                        _check_keys(f"train.{key}", sub[key], SolverConfig)
            kwargs[name] = cls(**sub)
        if "output_dir" in doc:
            kwargs["output_dir"] = str(doc["output_dir"])
    except TypeError as exc:
        raise ConfigurationError(f"invalid experiment spec: {exc}") from exc
    return ExperimentSpec(**kwargs)


def parse_spec(text, source="<string>"):
    """Parse spec JSON; syntax errors report the line and column."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(
            f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return spec_from_dict(doc)


def load_spec(path):
    with open(path) as fh:
        text = fh.read()
    return parse_spec(text, source=str(path))


def apply_overrides(spec, seed=None, lambda_k=None, lambda_j=None, solver=None,
                    step_size=None, rtol=None, atol=None, output_dir=None):
    """Return a new spec with the given command-line values taking precedence."""
    doc = spec.to_dict()
    tr = doc["train"]
    if seed is not None:
        tr["seed"] = seed
    if lambda_k is not None:
        tr["lambda_K"] = lambda_k
    if lambda_j is not None:
        tr["lambda_J"] = lambda_j
    if solver is not None:
        tr["solver"]["method"] = {"rk4": "rk4_fixed", "dopri5": "dopri5"}.get(solver, solver)
    if step_size is not None:
        tr["solver"]["step_size"] = step_size
    if rtol is not None:
        tr["solver"]["rtol"] = rtol
    if atol is not None:
        tr["solver"]["atol"] = atol
    if output_dir is not None:
        doc["output_dir"] = output_dir
    return spec_from_dict(doc)
