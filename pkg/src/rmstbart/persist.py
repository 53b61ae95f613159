"""JSON persistence of fitted forests and their metadata."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_open
from .errors import InputError
from .trees import CutpointGrid, DecisionTree, Forest, ForestDraws, TreePriorParams

FORMAT_VERSION = 1


@dataclass
class FittedModel:
    """What prediction, importance and partial dependence need from a fit."""

    forests: ForestDraws
    grid: CutpointGrid
    mu_hat_b: float
    tau: float
    transform: str
    covariate_names: list
    tree_prior: TreePriorParams = field(default_factory=TreePriorParams)
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_draws(cls, draws, metadata: dict | None = None) -> "FittedModel":
        return cls(draws.forests, draws.grid, draws.mu_hat_b, draws.tau, draws.transform,
                   list(draws.covariate_names), draws.config.tree_prior, dict(metadata or {}))

    def to_json_dict(self) -> dict:
        tp = self.tree_prior
        return {
            "format-version": FORMAT_VERSION,
            "tau": self.tau,
            "transform": self.transform,
            "mu_hat_b": self.mu_hat_b,
            "covariates": list(self.covariate_names),
            "grid": self.grid.as_lists(),
            "tree_prior": {"alpha": tp.alpha, "beta": tp.beta, "p_grow": tp.p_grow,
                           "p_prune": tp.p_prune, "p_change": tp.p_change, "max_depth": tp.max_depth},
            "metadata": self.metadata,
            "draws": [[t.to_dict() for t in f.trees] for f in self.forests],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "FittedModel":
        version = d.get("format-version")
        if version != FORMAT_VERSION:
            raise InputError(f"unsupported model format-version {version!r} (expected {FORMAT_VERSION})")
        try:
            grid = CutpointGrid.from_lists(d["grid"])
            forests = [Forest([DecisionTree.from_dict(t) for t in draw]) for draw in d["draws"]]
            names = list(d["covariates"])
            return cls(ForestDraws.from_forests(forests, len(names)), grid, float(d["mu_hat_b"]),
                       float(d["tau"]), d["transform"], names, TreePriorParams(**d["tree_prior"]),
                       d.get("metadata", {}))
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"malformed model file: {exc}") from None

    def save(self, path) -> None:
        with atomic_open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, separators=(",", ":"), allow_nan=False,
                      default=_json_default)

    @classmethod
    def load(cls, path) -> "FittedModel":
        path = Path(path)
        if not path.is_file():
            raise InputError(f"model file not found: {path}")
        try:
            with path.open() as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path} is not valid JSON: {exc}") from None
        return cls.from_json_dict(d)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")
