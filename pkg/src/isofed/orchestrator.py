"""Federated round loop: IsoFed's two-substep protocol and the baselines.

One IsoFed round: (1) unlabeled clients pretrain (IM loss) and run
mean-teacher training on the incoming global model, (2) their student
uploads are aggregated alone, (3) labeled clients pretrain and run CE
training on that intermediate model, (4) their uploads are aggregated alone
to produce the next global model. Labeled and unlabeled uploads never meet
inside one aggregation call, which the per-phase trace records make
auditable.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

log = logging.getLogger("isofed")

from .aggregation import AggregationConfig, aggregate
from .data import (
    AugmentConfig,
    ClientShard,
    Dataset,
    NormStats,
    PartitionSpec,
    Role,
    derive_seed,
    dirichlet_partition,
    normalization_stats,
)
from .metrics import MetricReport, evaluate
from .model import ModelConfig, ModelParams, extract_params, init_model
from .training import TeacherStudent, TrainerConfig, im_pretrain, train_labeled_client, train_unlabeled_client

METHODS = ("IsoFed", "IsoFedNoPT", "MTWFedAvg", "SupervisedWFedAvg")
PRETRAIN_SCOPES = ("all", "unlabeled_only")


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    method: str
    rounds: int
    partition: PartitionSpec
    trainer: TrainerConfig = TrainerConfig()
    aggregation: AggregationConfig = AggregationConfig()
    labeled_epochs: int = 1
    unlabeled_epochs: int = 1
    eval_every: int = 1
    seed: int = 0
    pretrain_scope: str = "all"
    hflip: bool = True
    threads: int = 1
    conv_channels: tuple[int, int] = (8, 16)
    fc_width: int = 128
    mlp_hidden: int = 128

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.pretrain_scope not in PRETRAIN_SCOPES:
            raise ConfigError(f"pretrain_scope must be one of {PRETRAIN_SCOPES}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.method == "SupervisedWFedAvg" and self.partition.unlabeled_count != 0:
            raise ConfigError("SupervisedWFedAvg requires every client to be labeled")
        if self.method in ("IsoFed", "IsoFedNoPT") and (
            self.partition.labeled_count == 0 or self.partition.unlabeled_count == 0
        ):
            raise ConfigError(f"{self.method} needs at least one labeled and one unlabeled client")


@dataclass
class RoundPlan:
    round_idx: int
    phase: str  # "unlabeled" | "labeled" | "joint"
    client_ids: list[int]


@dataclass
class GlobalState:
    w_glob: ModelParams
    teachers: dict[int, TeacherStudent] = field(default_factory=dict)
    round_idx: int = 0
    history: list[MetricReport] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)


@dataclass
class ExperimentContext:
    cfg: ExperimentConfig
    train: Dataset
    shards: list[ClientShard]
    stats: NormStats
    model_cfg: ModelConfig
    aug: AugmentConfig


def _labeled(ctx) -> list[ClientShard]:
    return [s for s in ctx.shards if s.role is Role.LABELED]


def _unlabeled(ctx) -> list[ClientShard]:
    return [s for s in ctx.shards if s.role is Role.UNLABELED]


def _map_clients(ctx, fn, shards):
    """Run one job per client, optionally on a thread pool; order-stable."""
    if ctx.cfg.threads > 1 and len(shards) > 1:
        with ThreadPoolExecutor(max_workers=ctx.cfg.threads) as pool:
            return list(pool.map(fn, shards))
    return [fn(shard) for shard in shards]


def _maybe_pretrain(ctx, state, params: ModelParams, shard: ClientShard) -> ModelParams:
    cfg = ctx.cfg
    if cfg.method in ("IsoFedNoPT", "MTWFedAvg", "SupervisedWFedAvg"):
        return params
    if cfg.pretrain_scope == "unlabeled_only" and shard.role is Role.LABELED:
        return params
    seed = derive_seed(cfg.seed, "round", state.round_idx, "client", shard.client_id, "pretrain")
    return im_pretrain(params, shard, ctx.train, ctx.stats, ctx.model_cfg, ctx.cfg.trainer, seed)


def _train_one(ctx, state, shard: ClientShard, incoming: ModelParams) -> tuple[ModelParams, int]:
    cfg = ctx.cfg
    start = _maybe_pretrain(ctx, state, incoming, shard)
    seed = derive_seed(cfg.seed, "round", state.round_idx, "client", shard.client_id, "train")
    if shard.role is Role.LABELED:
        tcfg = replace(cfg.trainer, local_epochs=cfg.labeled_epochs)
        out = train_labeled_client(start, shard, ctx.train, ctx.stats, ctx.model_cfg, tcfg, seed, ctx.aug)
    else:
        tcfg = replace(cfg.trainer, local_epochs=cfg.unlabeled_epochs)
        pair = train_unlabeled_client(start, shard, ctx.train, ctx.stats, ctx.model_cfg, tcfg, seed, ctx.aug)
        state.teachers[shard.client_id] = pair
        out = pair.student
    return out, shard.n_k


def _aggregate_phase(ctx, state, phase: str, uploads, client_ids) -> ModelParams:
    pre_norm = float(np.linalg.norm(state.w_glob.flat))
    merged, coeffs = aggregate(uploads, ctx.cfg.aggregation)
    state.trace.append(
        {
            "round": state.round_idx,
            "phase": phase,
            "client_ids": list(client_ids),
            "agg_scheme": ctx.cfg.aggregation.scheme,
            "coefficients": [float(c) for c in coeffs],
            "pre_norm": pre_norm,
            "post_norm": float(np.linalg.norm(merged.flat)),
        }
    )
    return merged


def run_isofed_round(state: GlobalState, ctx: ExperimentContext) -> GlobalState:
    """Unlabeled substep then labeled substep, each aggregated in isolation."""
    unlabeled, labeled = _unlabeled(ctx), _labeled(ctx)
    results = _map_clients(ctx, lambda s: _train_one(ctx, state, s, state.w_glob), unlabeled)
    intermediate = _aggregate_phase(ctx, state, "unlabeled", results, [s.client_id for s in unlabeled])
    state.w_glob = intermediate
    results = _map_clients(ctx, lambda s: _train_one(ctx, state, s, intermediate), labeled)
    state.w_glob = _aggregate_phase(ctx, state, "labeled", results, [s.client_id for s in labeled])
    return state


def run_mt_wfedavg_round(state: GlobalState, ctx: ExperimentContext) -> GlobalState:
    """All clients train in parallel from the same global model; one joint merge."""
    results = _map_clients(ctx, lambda s: _train_one(ctx, state, s, state.w_glob), ctx.shards)
    state.w_glob = _aggregate_phase(ctx, state, "joint", results, [s.client_id for s in ctx.shards])
    return state


def run_supervised_round(state: GlobalState, ctx: ExperimentContext) -> GlobalState:
    """Fully-supervised upper bound; requires an all-labeled partition."""
    return run_mt_wfedavg_round(state, ctx)


def run_round(state: GlobalState, ctx: ExperimentContext) -> GlobalState:
    if ctx.cfg.method in ("IsoFed", "IsoFedNoPT"):
        return run_isofed_round(state, ctx)
    if ctx.cfg.method == "MTWFedAvg":
        return run_mt_wfedavg_round(state, ctx)
    return run_supervised_round(state, ctx)


def build_context(cfg: ExperimentConfig, train: Dataset) -> ExperimentContext:
    shards = dirichlet_partition(train, cfg.partition)
    stats = normalization_stats(train)
    model_cfg = ModelConfig(
        num_classes=train.num_classes,
        in_channels=train.channels,
        conv_channels=cfg.conv_channels,
        fc_width=cfg.fc_width,
        mlp_hidden=cfg.mlp_hidden,
        image_hw=train.images.shape[1],
    )
    aug = AugmentConfig(hflip=cfg.hflip)
    return ExperimentContext(cfg, train, shards, stats, model_cfg, aug)


def run_experiment(cfg: ExperimentConfig, train: Dataset, test: Dataset) -> GlobalState:
    """Full deterministic training run; returns final state with history and trace."""
    if cfg.method == "IsoFedNoPT":
        cfg = replace(cfg, trainer=replace(cfg.trainer, pretrain_epochs=0))
    ctx = build_context(cfg, train)
    model = init_model(derive_seed(cfg.seed, "init"), train.num_classes, train.channels, ctx.model_cfg)
    state = GlobalState(w_glob=extract_params(model))
    state.history.append(evaluate(state.w_glob, test, round_idx=0, phase="init", model_cfg=ctx.model_cfg))
    final_phase = "labeled" if cfg.method in ("IsoFed", "IsoFedNoPT") else "joint"
    for round_idx in range(1, cfg.rounds + 1):
        state.round_idx = round_idx
        state = run_round(state, ctx)
        if round_idx % cfg.eval_every == 0 or round_idx == cfg.rounds:
            report = evaluate(state.w_glob, test, round_idx=round_idx, phase=final_phase, model_cfg=ctx.model_cfg)
            state.history.append(report)
            log.info(
                "%s round %d/%d acc=%.2f%% auc=%.2f%%",
                cfg.method, round_idx, cfg.rounds, 100 * report.accuracy, 100 * report.auc,
            )
        else:
            log.debug("%s round %d/%d done", cfg.method, round_idx, cfg.rounds)
    return state


def write_trace(state: GlobalState, path):
    with open(path, "w") as fh:
        for record in state.trace:
            fh.write(json.dumps(record) + "\n")


def write_metrics_csv(state: GlobalState, path):
    from .metrics import CSV_HEADER

    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for report in state.history:
            fh.write(report.csv_row() + "\n")
