"""Local client training: supervised CE, mean-teacher consistency, IM pretraining.

Every trainer is a pure function of (incoming parameters, shard, config,
seed): it builds a fresh model, trains, and returns a parameter snapshot.
Nothing here mutates shared state, so clients can run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import AugmentConfig, Batch, ClientShard, Dataset, NormStats, Role, batches
from .model import CnnClassifier, ModelConfig, ModelParams, extract_params, load_params

IM_LOG_EPS = 1e-12


@dataclass(frozen=True)
class TrainerConfig:
    lr: float = 0.03
    batch_size: int = 64
    local_epochs: int = 1
    ema_alpha: float = 0.999
    sharpen_tau: float = 0.5
    pretrain_epochs: int = 1
    pretrain_lr: float = 0.03
    momentum: float = 0.9

    def __post_init__(self):
        if not (0.0 <= self.ema_alpha <= 1.0):
            raise ValueError(f"ema_alpha must be in [0,1], got {self.ema_alpha}")
        if self.sharpen_tau <= 0:
            raise ValueError(f"sharpen_tau must be > 0, got {self.sharpen_tau}")
        if self.local_epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("epoch counts must be >= 0")


@dataclass
class TeacherStudent:
    teacher: ModelParams
    student: ModelParams


class SgdMomentum:
    def __init__(self, params: list[ad.Tensor], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(t.data) for t in params]

    def step(self):
        if self.lr == 0.0:
            return  # exact no-op so zero-lr runs are bit-stable
        for t, v in zip(self.params, self.velocity):
            if t.grad is None:
                continue
            v *= self.momentum
            v += t.grad
            t.data = t.data - self.lr * v

    def zero_grad(self):
        for t in self.params:
            t.grad = None


# -- core transforms -------------------------------------------------------------


def sharpen(p, tau: float):
    """Temperature sharpening p_i^(1/tau) / sum_j p_j^(1/tau).

    Accepts a probability array (rows on the simplex) or a Tensor; the
    Tensor path is differentiable.
    """
    if tau <= 0:
        raise ValueError(f"sharpen temperature must be > 0, got {tau}")
    values = p.data if isinstance(p, ad.Tensor) else np.asarray(p, dtype=np.float64)
    if values.min() < 0:
        raise ValueError("sharpen input has negative entries")
    sums = values.sum(axis=-1)
    if (sums == 0).any():
        raise ValueError("sharpen input row is all zero")
    if (np.abs(sums - 1.0) > 1e-6).any():
        raise ValueError("sharpen input rows must sum to 1 (within 1e-6)")
    if tau == 1.0:
        return p  # exact identity, so tau=1 teachers give bit-zero consistency loss
    if isinstance(p, ad.Tensor):
        powered = p ** (1.0 / tau)
        return powered / powered.sum(axis=-1, keepdims=True)
    powered = values ** (1.0 / tau)
    return powered / powered.sum(axis=-1, keepdims=True)


def ema_update(teacher: ModelParams, student: ModelParams, alpha: float) -> ModelParams:
    """Convex combination alpha*student + (1-alpha)*teacher, elementwise."""
    if not teacher.same_architecture(student):
        raise ValueError("ema_update requires identical architectures")
    return teacher.replace_flat(alpha * student.flat + (1.0 - alpha) * teacher.flat)


def consistency_loss(teacher_probs, student_probs: ad.Tensor, tau: float) -> ad.Tensor:
    """Mean squared L2 distance between sharpened teacher and student probs."""
    sharp = sharpen(teacher_probs, tau)
    if not isinstance(sharp, ad.Tensor):
        sharp = ad.Tensor(sharp)
    return ad.mse_loss(sharp, student_probs)


def im_loss(probs: ad.Tensor) -> ad.Tensor:
    """Information-maximization objective over a batch of probability rows.

    Sum of the (negated) entropy of the batch-mean prediction and the mean
    per-sample entropy; minimized by predictions that are individually
    one-hot but uniform on average, where it attains -log(num_classes).
    """
    if not isinstance(probs, ad.Tensor):
        probs = ad.Tensor(probs)
    mean_probs = ad.tmean(probs, axis=0)
    diversity = ad.tsum(mean_probs * ad.log(mean_probs + IM_LOG_EPS))
    per_sample_entropy = -ad.tsum(probs * ad.log(probs + IM_LOG_EPS), axis=-1)
    return diversity + ad.tmean(per_sample_entropy)


# -- client trainers --------------------------------------------------------------


def _build(params_in: ModelParams, model_cfg: ModelConfig) -> CnnClassifier:
    model = CnnClassifier(model_cfg)
    load_params(model, params_in)
    return model


def _ema_tensors(teacher: CnnClassifier, student: CnnClassifier, alpha: float):
    for tt, ts in zip(teacher.parameters(), student.parameters()):
        tt.data = alpha * ts.data + (1.0 - alpha) * tt.data


def train_labeled_client(
    params_in: ModelParams,
    shard: ClientShard,
    dataset: Dataset,
    stats: NormStats,
    model_cfg: ModelConfig,
    cfg: TrainerConfig,
    seed: int,
    aug: AugmentConfig = AugmentConfig(),
) -> ModelParams:
    """Cross-entropy SGD over weakly augmented batches."""
    if shard.role is not Role.LABELED:
        raise ValueError(f"client {shard.client_id} is not a labeled client")
    if cfg.local_epochs == 0:
        return params_in.copy()
    model = _build(params_in, model_cfg)
    opt = SgdMomentum(model.parameters(), cfg.lr, cfg.momentum)
    rng = np.random.default_rng(seed)
    for _ in range(cfg.local_epochs):
        for batch in batches(shard, dataset, cfg.batch_size, rng, stats, mode="weak", aug=aug):
            loss = ad.cross_entropy(model(ad.Tensor(batch.x)), batch.y)
            ad.backward(loss)
            opt.step()
            opt.zero_grad()
    return extract_params(model)


def train_unlabeled_client(
    global_in: ModelParams,
    shard: ClientShard,
    dataset: Dataset,
    stats: NormStats,
    model_cfg: ModelConfig,
    cfg: TrainerConfig,
    seed: int,
    aug: AugmentConfig = AugmentConfig(),
) -> TeacherStudent:
    """Mean-teacher consistency training; returns final (teacher, student).

    The teacher and student both start from ``global_in``. Per batch: the
    teacher predicts on the weak view (outside the tape), predictions are
    sharpened, the student takes an SGD step on the strong view against the
    squared-distance consistency loss, then the teacher is EMA-updated.
    """
    if shard.role is not Role.UNLABELED:
        raise ValueError(f"client {shard.client_id} is not an unlabeled client")
    teacher = _build(global_in, model_cfg)
    student = _build(global_in, model_cfg)
    if cfg.local_epochs == 0:
        return TeacherStudent(extract_params(teacher), extract_params(student))
    opt = SgdMomentum(student.parameters(), cfg.lr, cfg.momentum)
    rng = np.random.default_rng(seed)
    for _ in range(cfg.local_epochs):
        for batch in batches(
            shard, dataset, cfg.batch_size, rng, stats, paired=True, mode="weak", aug=aug
        ):
            with ad.no_grad():
                teacher_probs = ad.softmax(teacher(ad.Tensor(batch.x)), axis=-1).data
            student_probs = ad.softmax(student(ad.Tensor(batch.x_strong)), axis=-1)
            loss = consistency_loss(teacher_probs, student_probs, cfg.sharpen_tau)
            ad.backward(loss)
            opt.step()
            opt.zero_grad()
            _ema_tensors(teacher, student, cfg.ema_alpha)
    return TeacherStudent(extract_params(teacher), extract_params(student))


def im_pretrain(
    global_in: ModelParams,
    shard: ClientShard,
    dataset: Dataset,
    stats: NormStats,
    model_cfg: ModelConfig,
    cfg: TrainerConfig,
    seed: int,
) -> ModelParams:
    """Client-adaptive pretraining by minimizing the IM loss on clean views.

    ``pretrain_epochs == 0`` returns the input unchanged (the no-pretraining
    ablation). Label-free by construction, so it runs on either client role.
    """
    if cfg.pretrain_epochs == 0:
        return global_in.copy()
    model = _build(global_in, model_cfg)
    opt = SgdMomentum(model.parameters(), cfg.pretrain_lr, cfg.momentum)
    rng = np.random.default_rng(seed)
    for _ in range(cfg.pretrain_epochs):
        for batch in batches(shard, dataset, cfg.batch_size, rng, stats, mode="none"):
            probs = ad.softmax(model(ad.Tensor(batch.x)), axis=-1)
            loss = im_loss(probs)
            ad.backward(loss)
            opt.step()
            opt.zero_grad()
    return extract_params(model)
