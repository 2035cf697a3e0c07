"""Server-side aggregation: weighted FedAvg and its distance-decayed variant.

The dynamic scheme first computes the sample-weighted average, then rescales
each client by c_k = n_k * exp(-lambda_c * ||W_k - W_avg|| / n_k) / sum(n),
and re-aggregates with the c_k. The division of the distance by n_k and the
constant sum(n) denominator are kept exactly as defined (the denominator
cancels in the re-aggregation quotient).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelParams

SCHEMES = ("PlainFedAvg", "DynamicWeighted")


@dataclass(frozen=True)
class AggregationConfig:
    lambda_c: float = 1.0
    scheme: str = "DynamicWeighted"

    def __post_init__(self):
        if not np.isfinite(self.lambda_c) or self.lambda_c < 0:
            raise ValueError(f"lambda_c must be finite and >= 0, got {self.lambda_c}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown aggregation scheme {self.scheme!r}, expected one of {SCHEMES}")


def _check_inputs(models: list[tuple[ModelParams, int]]):
    if not models:
        raise ValueError("cannot aggregate an empty model list")
    first = models[0][0]
    for params, n_k in models:
        if n_k < 1:
            raise ValueError(f"sample count must be >= 1, got {n_k}")
        if not params.same_architecture(first):
            raise ValueError("aggregation inputs have mismatched architectures")


def _anchored_mean(models: list[tuple[ModelParams, int]], weights: np.ndarray) -> ModelParams:
    """sum_k w_k W_k / sum_k w_k as W_0 + sum w_k (W_k - W_0) / sum w.

    The anchored form is exactly idempotent when all inputs are equal.
    """
    total = weights.sum()
    first = models[0][0].flat
    flat = first.copy()
    for (params, _), w in zip(models[1:], weights[1:]):
        flat += (w / total) * (params.flat - first)
    return models[0][0].replace_flat(flat)


def fedavg(models: list[tuple[ModelParams, int]]) -> ModelParams:
    """Sample-count-weighted elementwise mean of client parameters."""
    _check_inputs(models)
    return _anchored_mean(models, np.array([float(n_k) for _, n_k in models]))


def _decayed_weights(models: list[tuple[ModelParams, int]], lambda_c: float) -> np.ndarray:
    avg = fedavg(models)
    return np.array(
        [
            n_k * np.exp(-lambda_c * np.linalg.norm(params.flat - avg.flat) / n_k)
            for params, n_k in models
        ]
    )


def dynamic_coefficients(models: list[tuple[ModelParams, int]], lambda_c: float) -> np.ndarray:
    """The c_k scaling coefficients (all strictly positive)."""
    _check_inputs(models)
    total = sum(n_k for _, n_k in models)
    return _decayed_weights(models, lambda_c) / total


def dynamic_weighted_agg(models: list[tuple[ModelParams, int]], cfg: AggregationConfig) -> ModelParams:
    """Re-aggregation with distance-decayed coefficients.

    The constant sum(n) denominator of c_k cancels in the quotient, so the
    mixing weights are computed in cancelled form; with lambda_c = 0 every
    decay factor is exactly 1 and this coincides bitwise with fedavg.
    """
    _check_inputs(models)
    return _anchored_mean(models, _decayed_weights(models, cfg.lambda_c))


def aggregate(models: list[tuple[ModelParams, int]], cfg: AggregationConfig) -> tuple[ModelParams, np.ndarray]:
    """Dispatch on the configured scheme; returns (model, coefficients used)."""
    if cfg.scheme == "PlainFedAvg":
        total = sum(n_k for _, n_k in models)
        return fedavg(models), np.array([n_k / total for _, n_k in models])
    return dynamic_weighted_agg(models, cfg), dynamic_coefficients(models, cfg.lambda_c)
