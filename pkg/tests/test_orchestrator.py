import numpy as np
import pytest
from dataclasses import replace

from isofed.aggregation import AggregationConfig
from isofed.data import PartitionSpec, Role, derive_seed, dirichlet_partition, normalization_stats
from isofed.model import ModelConfig, extract_params, init_model
from isofed.orchestrator import ConfigError, ExperimentConfig, run_experiment
from isofed.synth import make_blob_dataset
from isofed.training import TrainerConfig, train_labeled_client

TRAIN = make_blob_dataset(4, 400, seed=10)
TEST = make_blob_dataset(4, 120, seed=11, split="test")


def base_cfg(**overrides):
    defaults = dict(
        method="IsoFed",
        rounds=2,
        partition=PartitionSpec(4, 1, 0.8, seed=5),
        trainer=TrainerConfig(lr=0.05, batch_size=32, pretrain_epochs=1, pretrain_lr=0.02),
        aggregation=AggregationConfig(lambda_c=1.0),
        eval_every=1,
        seed=3,
        hflip=False,
        conv_channels=(2, 4),
        fc_width=16,
        mlp_hidden=16,
    )
    defaults.update(overrides)
    return ExperimentConfig(**defaults)


def init_flat(cfg, train):
    mc = ModelConfig(train.num_classes, train.channels, cfg.conv_channels, cfg.fc_width, cfg.mlp_hidden)
    return extract_params(init_model(derive_seed(cfg.seed, "init"), train.num_classes, train.channels, mc))


def test_zero_lr_no_pretraining_is_fixed_point():
    cfg = base_cfg(trainer=TrainerConfig(lr=0.0, batch_size=32, pretrain_epochs=0))
    state = run_experiment(cfg, TRAIN, TEST)
    assert (state.w_glob.flat == init_flat(cfg, TRAIN).flat).all()


def test_single_labeled_client_reduces_to_solo_training():
    cfg = base_cfg(unlabeled_epochs=0, trainer=TrainerConfig(lr=0.05, batch_size=32, pretrain_epochs=0), rounds=1)
    state = run_experiment(cfg, TRAIN, TEST)

    shards = dirichlet_partition(TRAIN, cfg.partition)
    labeled = [s for s in shards if s.role is Role.LABELED][0]
    stats = normalization_stats(TRAIN)
    mc = ModelConfig(4, 1, cfg.conv_channels, cfg.fc_width, cfg.mlp_hidden)
    tcfg = replace(cfg.trainer, local_epochs=cfg.labeled_epochs)
    expected = train_labeled_client(
        init_flat(cfg, TRAIN),
        labeled,
        TRAIN,
        stats,
        mc,
        tcfg,
        seed=derive_seed(cfg.seed, "round", 1, "client", labeled.client_id, "train"),
        aug=state_aug(cfg),
    )
    assert (state.w_glob.flat == expected.flat).all()


def state_aug(cfg):
    from isofed.data import AugmentConfig

    return AugmentConfig(hflip=cfg.hflip)


def test_isofed_isolation_and_phase_order():
    cfg = base_cfg(rounds=3)
    state = run_experiment(cfg, TRAIN, TEST)
    shards = dirichlet_partition(TRAIN, cfg.partition)
    labeled_ids = sorted(s.client_id for s in shards if s.role is Role.LABELED)
    unlabeled_ids = sorted(s.client_id for s in shards if s.role is Role.UNLABELED)

    assert len(state.trace) == 2 * cfg.rounds
    for round_idx in range(1, cfg.rounds + 1):
        first, second = state.trace[2 * (round_idx - 1)], state.trace[2 * round_idx - 1]
        assert first["round"] == second["round"] == round_idx
        assert first["phase"] == "unlabeled" and second["phase"] == "labeled"
        assert sorted(first["client_ids"]) == unlabeled_ids
        assert sorted(second["client_ids"]) == labeled_ids
        assert not set(first["client_ids"]) & set(second["client_ids"])
        assert all(c > 0 for c in first["coefficients"] + second["coefficients"])


def test_nopt_equals_isofed_with_zero_pretrain_epochs():
    nopt = run_experiment(base_cfg(method="IsoFedNoPT"), TRAIN, TEST)
    zero = run_experiment(
        base_cfg(trainer=TrainerConfig(lr=0.05, batch_size=32, pretrain_epochs=0, pretrain_lr=0.02)),
        TRAIN,
        TEST,
    )
    assert (nopt.w_glob.flat == zero.w_glob.flat).all()
    assert [r.csv_row() for r in nopt.history] == [r.csv_row() for r in zero.history]


def test_mt_single_labeled_client_is_plain_local_training():
    cfg = base_cfg(method="MTWFedAvg", partition=PartitionSpec(1, 1, 0.8, seed=5), rounds=1)
    state = run_experiment(cfg, TRAIN, TEST)
    shards = dirichlet_partition(TRAIN, cfg.partition)
    stats = normalization_stats(TRAIN)
    mc = ModelConfig(4, 1, cfg.conv_channels, cfg.fc_width, cfg.mlp_hidden)
    expected = train_labeled_client(
        init_flat(cfg, TRAIN),
        shards[0],
        TRAIN,
        stats,
        mc,
        replace(cfg.trainer, local_epochs=1),
        seed=derive_seed(cfg.seed, "round", 1, "client", 0, "train"),
        aug=state_aug(cfg),
    )
    assert (state.w_glob.flat == expected.flat).all()


def test_mt_joint_aggregation_covers_all_clients():
    cfg = base_cfg(method="MTWFedAvg", rounds=2)
    state = run_experiment(cfg, TRAIN, TEST)
    assert len(state.trace) == cfg.rounds
    for record in state.trace:
        assert record["phase"] == "joint"
        assert sorted(record["client_ids"]) == [0, 1, 2, 3]
        assert len(record["coefficients"]) == 4


def test_mt_all_labeled_coincides_with_supervised():
    part = PartitionSpec(3, 3, 0.8, seed=2)
    mt = run_experiment(base_cfg(method="MTWFedAvg", partition=part), TRAIN, TEST)
    sup = run_experiment(base_cfg(method="SupervisedWFedAvg", partition=part), TRAIN, TEST)
    assert (mt.w_glob.flat == sup.w_glob.flat).all()
    assert [r.csv_row() for r in mt.history] == [r.csv_row() for r in sup.history]


def test_full_run_determinism():
    cfg = base_cfg(rounds=2)
    a = run_experiment(cfg, TRAIN, TEST)
    b = run_experiment(cfg, TRAIN, TEST)
    assert (a.w_glob.flat == b.w_glob.flat).all()
    assert [r.csv_row() for r in a.history] == [r.csv_row() for r in b.history]
    assert a.trace == b.trace


def test_thread_pool_does_not_change_results():
    serial = run_experiment(base_cfg(threads=1), TRAIN, TEST)
    pooled = run_experiment(base_cfg(threads=4), TRAIN, TEST)
    assert (serial.w_glob.flat == pooled.w_glob.flat).all()
    assert serial.trace == pooled.trace


def test_history_row_count_for_single_round():
    cfg = base_cfg(rounds=1, eval_every=1)
    state = run_experiment(cfg, TRAIN, TEST)
    assert len(state.history) == 2  # round-0 baseline + round 1
    assert state.history[0].phase == "init"
    assert state.history[1].round == 1


def test_config_validation_errors():
    with pytest.raises(ConfigError, match="labeled"):
        base_cfg(method="SupervisedWFedAvg")  # has unlabeled clients
    with pytest.raises(ConfigError, match="unlabeled"):
        base_cfg(partition=PartitionSpec(4, 4, 0.8, seed=5))  # IsoFed needs both groups
    with pytest.raises(ConfigError, match="method"):
        base_cfg(method="FedProx")
    with pytest.raises(ConfigError, match="rounds"):
        base_cfg(rounds=0)


def test_teacher_state_recorded_per_unlabeled_client():
    cfg = base_cfg(rounds=1)
    state = run_experiment(cfg, TRAIN, TEST)
    shards = dirichlet_partition(TRAIN, cfg.partition)
    unlabeled_ids = {s.client_id for s in shards if s.role is Role.UNLABELED}
    assert set(state.teachers) == unlabeled_ids
