# training.py
"""Two-stage training: RNC pretraining of the encoder, then a frozen-encoder
linear probe fitted with the L1 loss and selected on validation R²."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from enum import StrEnum
from typing import Any, NamedTuple

import numpy as np

from rankcav.exceptions import ConfigError, TrainingError, UndefinedMetricError
from rankcav.helpers import derive_rng
from rankcav.metrics import MetricsReport, kendall_tau, r_squared
from rankcav.nn import (
    LinearHead,
    MlpEncoder,
    backward,
    flat_grads,
    forward,
    head_outputs,
    init_encoder,
)
from rankcav.optim import OptimizerKind, cosine_lr, exponential_lr, make_optimizer
from rankcav.rnc import RncBatch, RncConfig, rnc_loss
from rankcav.synth import Scene, Split, feature_matrix, in_split, targets_of

logger = logging.getLogger(__name__)

DEFAULT_WIDTHS = (64, 64, 16)


class BudgetUnit(StrEnum):
    STEPS = "steps"
    EPOCHS = "epochs"


class EncoderTag(StrEnum):
    RNC = "rnc-pretrained"
    SUPERVISED = "supervised-baseline"
    RANDOM = "random-init"


@dataclass(frozen=True, slots=True)
class TrainConfig:
    pretrain_steps: int = 400
    pretrain_epochs: int = 20
    pretrain_budget: BudgetUnit = BudgetUnit.STEPS
    probe_epochs: int = 100
    batch_scenes: int = 32
    pretrain_lr: float = 0.05
    pretrain_lr_floor: float = 0.0
    probe_lr: float = 0.05
    probe_gamma: float = 0.95
    supervised_lr: float = 0.01
    supervised_gamma: float = 0.95
    optimizer: OptimizerKind = OptimizerKind.SGD
    temperature: float = 2.0
    noise_std: float = 0.02
    horizontal_flip: bool = True
    encoder_widths: tuple[int, ...] = DEFAULT_WIDTHS
    seed: int = 0
    log_every: int = 50

    def __post_init__(self) -> None:
        object.__setattr__(self, "pretrain_budget", BudgetUnit(self.pretrain_budget))
        object.__setattr__(self, "optimizer", OptimizerKind(self.optimizer))
        object.__setattr__(self, "encoder_widths", tuple(int(w) for w in self.encoder_widths))
        counts = {
            "pretrain_steps": self.pretrain_steps,
            "pretrain_epochs": self.pretrain_epochs,
            "probe_epochs": self.probe_epochs,
            "batch_scenes": self.batch_scenes,
            "log_every": self.log_every,
        }
        rates = {
            "pretrain_lr": self.pretrain_lr,
            "probe_lr": self.probe_lr,
            "supervised_lr": self.supervised_lr,
            "probe_gamma": self.probe_gamma,
            "supervised_gamma": self.supervised_gamma,
        }
        if bad := {k: v for k, v in counts.items() if v < 1}:
            raise ConfigError("Counts must be positive", context=bad)
        if bad := {k: v for k, v in rates.items() if not v >= 0}:
            raise ConfigError("Rates must be non-negative", context=bad)
        if self.noise_std < 0 or self.pretrain_lr_floor < 0:
            raise ConfigError(
                "noise_std and pretrain_lr_floor must be non-negative",
                context={"noise_std": self.noise_std, "pretrain_lr_floor": self.pretrain_lr_floor},
            )
        RncConfig(self.temperature)

    @property
    def rnc(self) -> RncConfig:
        return RncConfig(temperature=self.temperature)

    def total_pretrain_steps(self, n_train: int) -> int:
        match self.pretrain_budget:
            case BudgetUnit.STEPS:
                return self.pretrain_steps
            case BudgetUnit.EPOCHS:
                return self.pretrain_epochs * math.ceil(n_train / self.batch_scenes)

    def snapshot(self) -> dict[str, Any]:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}


class PretrainResult(NamedTuple):
    encoder: MlpEncoder
    losses: tuple[float, ...]
    rng_state: dict[str, Any]


class ProbeResult(NamedTuple):
    head: LinearHead
    val_r2: tuple[float, ...]
    train_mae: tuple[float, ...]
    best_epoch: int


@dataclass(frozen=True, eq=False, slots=True)
class TrainedPipeline:
    encoder: MlpEncoder
    head: LinearHead
    tag: EncoderTag
    config: TrainConfig
    pretrain_losses: tuple[float, ...] = ()
    probe_val_r2: tuple[float, ...] = ()
    best_epoch: int = -1
    rng_state: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.encoder.frozen:
            raise TrainingError("A trained pipeline holds a frozen encoder")
        if self.head.dim != self.encoder.embedding_dim:
            raise TrainingError(
                "Head width does not match the encoder",
                context={"head": self.head.dim, "embedding_dim": self.encoder.embedding_dim},
            )
        object.__setattr__(self, "tag", EncoderTag(self.tag))


def embed(encoder: MlpEncoder, scenes: Sequence[Scene]) -> np.ndarray:
    return forward(encoder, feature_matrix(scenes)).embedding


def predict(pipeline: TrainedPipeline, scenes: Sequence[Scene]) -> np.ndarray:
    return head_outputs(pipeline.head, embed(pipeline.encoder, scenes))


def augment(
    features: np.ndarray,
    shape: tuple[int, int],
    config: TrainConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """One augmented view per row: optional horizontal flip, then Gaussian pixel noise."""
    views = features.copy()
    if config.horizontal_flip:
        flips = rng.random(views.shape[0]) < 0.5
        grids = views.reshape(-1, shape[0], shape[1], 3)
        grids[flips] = grids[flips][:, :, ::-1, :]
        views = grids.reshape(features.shape)
    if config.noise_std > 0:
        views = views + rng.normal(0.0, config.noise_std, size=views.shape)
    return views


def _train_arrays(dataset: Sequence[Scene]) -> tuple[np.ndarray, np.ndarray, tuple[int, int]]:
    train = in_split(dataset, Split.TRAIN)
    if not train:
        raise TrainingError("The dataset has no train split")
    return feature_matrix(train), targets_of(train), train[0].shape


class _Batches:
    """Endless shuffled minibatches over n rows, reshuffling on exhaustion."""

    def __init__(self, n: int, size: int, rng: np.random.Generator) -> None:
        self.n = n
        self.size = min(size, n)
        self.rng = rng
        self.order = rng.permutation(n)
        self.cursor = 0

    def next(self) -> np.ndarray:
        if self.cursor + self.size > self.n:
            self.order = self.rng.permutation(self.n)
            self.cursor = 0
        indices = self.order[self.cursor : self.cursor + self.size]
        self.cursor += self.size
        return indices


def pretrain_rnc(encoder: MlpEncoder, dataset: Sequence[Scene], config: TrainConfig) -> PretrainResult:
    """SGD (or Adam) on the RNC loss over two augmented views per train scene."""
    features, labels, shape = _train_arrays(dataset)
    rng = derive_rng(config.seed, "pretrain")
    work = encoder.copy()
    params = work.parameters()
    optimizer = make_optimizer(config.optimizer)
    batches = _Batches(len(labels), config.batch_scenes, rng)
    total = config.total_pretrain_steps(len(labels))
    losses = []
    for step in range(total):
        indices = batches.next()
        views = np.concatenate(
            [augment(features[indices], shape, config, rng), augment(features[indices], shape, config, rng)]
        )
        trace = forward(work, views)
        output = rnc_loss(RncBatch(trace.embedding, np.tile(labels[indices], 2)), config.rnc)
        lr = cosine_lr(config.pretrain_lr, step, total, config.pretrain_lr_floor)
        optimizer.step(params, flat_grads(backward(work, trace, output.grad)), lr)
        losses.append(output.value)
        if step % config.log_every == 0 or step == total - 1:
            logger.info("pretrain step %d/%d loss=%.5f lr=%.5f", step + 1, total, output.value, lr)
    return PretrainResult(work, tuple(losses), rng.bit_generator.state)


def train_supervised(encoder: MlpEncoder, dataset: Sequence[Scene], config: TrainConfig) -> PretrainResult:
    """Baseline: encoder and a temporary head trained jointly on the L1 loss, same step budget."""
    features, labels, shape = _train_arrays(dataset)
    rng = derive_rng(config.seed, "supervised")
    work = encoder.copy()
    weights = np.zeros(work.embedding_dim)
    bias = np.array([np.median(labels)])
    params = [*work.parameters(), weights, bias]
    optimizer = make_optimizer(config.optimizer)
    batches = _Batches(len(labels), config.batch_scenes, rng)
    total = config.total_pretrain_steps(len(labels))
    steps_per_epoch = math.ceil(len(labels) / batches.size)
    losses = []
    for step in range(total):
        indices = batches.next()
        trace = forward(work, augment(features[indices], shape, config, rng))
        residuals = trace.embedding @ weights + bias[0] - labels[indices]
        signs = np.sign(residuals) / len(indices)
        grads = flat_grads(backward(work, trace, np.outer(signs, weights)))
        grads += [signs @ trace.embedding, np.array([signs.sum()])]
        lr = exponential_lr(config.supervised_lr, step // steps_per_epoch, config.supervised_gamma)
        optimizer.step(params, grads, lr)
        losses.append(float(np.mean(np.abs(residuals))))
        if step % config.log_every == 0 or step == total - 1:
            logger.info("supervised step %d/%d mae=%.5f lr=%.5f", step + 1, total, losses[-1], lr)
    return PretrainResult(work, tuple(losses), rng.bit_generator.state)


def _fold(weights: np.ndarray, bias: float, mean: np.ndarray, scale: np.ndarray) -> LinearHead:
    """Express a head on standardised inputs as a head on raw embeddings."""
    raw = weights / scale
    return LinearHead(raw, bias - float(raw @ mean))


def fit_probe(
    train_embeddings: np.ndarray,
    train_labels: np.ndarray,
    val_embeddings: np.ndarray,
    val_labels: np.ndarray,
    config: TrainConfig,
) -> ProbeResult:
    """L1 subgradient descent on standardised embeddings; keeps the epoch with the best val R²."""
    if len(train_labels) == 0 or len(val_labels) == 0:
        raise TrainingError(
            "Probing needs non-empty train and val splits",
            context={"train": len(train_labels), "val": len(val_labels)},
        )
    mean = train_embeddings.mean(axis=0)
    scale = train_embeddings.std(axis=0)
    scale[scale == 0] = 1.0
    inputs = (train_embeddings - mean) / scale

    weights = np.zeros(inputs.shape[1])
    bias = np.array([np.median(train_labels)])
    optimizer = make_optimizer(config.optimizer)
    rng = derive_rng(config.seed, "probe")
    batch = min(config.batch_scenes, len(train_labels))

    val_curve, mae_curve = [], []
    best_head, best_score, best_epoch = None, -math.inf, -1
    for epoch in range(config.probe_epochs):
        lr = exponential_lr(config.probe_lr, epoch, config.probe_gamma)
        order = rng.permutation(len(train_labels))
        for start in range(0, len(order), batch):
            rows = order[start : start + batch]
            signs = np.sign(inputs[rows] @ weights + bias[0] - train_labels[rows]) / len(rows)
            optimizer.step([weights, bias], [signs @ inputs[rows], np.array([signs.sum()])], lr)
        head = _fold(weights, bias[0], mean, scale)
        score = r_squared(head_outputs(head, val_embeddings), val_labels)
        val_curve.append(score)
        mae_curve.append(float(np.mean(np.abs(head_outputs(head, train_embeddings) - train_labels))))
        if score > best_score:
            best_head, best_score, best_epoch = head, score, epoch
    logger.info("probe best epoch %d val R²=%.4f", best_epoch, best_score)
    assert best_head is not None
    return ProbeResult(best_head, tuple(val_curve), tuple(mae_curve), best_epoch)


def train_probe(encoder: MlpEncoder, dataset: Sequence[Scene], config: TrainConfig) -> ProbeResult:
    """Fit the linear head on a frozen encoder; the encoder is never modified."""
    if not encoder.frozen:
        raise TrainingError("train_probe needs a frozen encoder (call MlpEncoder.freeze)")
    train = in_split(dataset, Split.TRAIN)
    val = in_split(dataset, Split.VAL)
    if not train or not val:
        raise TrainingError(
            "Probing needs non-empty train and val splits",
            context={"train": len(train), "val": len(val)},
        )
    before = encoder.digest()
    result = fit_probe(embed(encoder, train), targets_of(train), embed(encoder, val), targets_of(val), config)
    if encoder.digest() != before:
        raise TrainingError("Encoder parameters changed during probing")
    return result


def evaluate(pipeline: TrainedPipeline, dataset: Sequence[Scene], split: Split | str) -> MetricsReport:
    scenes = in_split(dataset, split)
    if not scenes:
        raise TrainingError("Cannot evaluate an empty split", context={"split": str(split)})
    predictions = predict(pipeline, scenes)
    labels = targets_of(scenes)
    return MetricsReport(
        split=str(Split(split)),
        r2=r_squared(predictions, labels),
        kendall_tau=kendall_tau(predictions, labels),
        n=len(scenes),
    )


def train_pipeline(
    dataset: Sequence[Scene], config: TrainConfig, tag: EncoderTag | str = EncoderTag.RNC
) -> TrainedPipeline:
    """Initialise, (pre)train, freeze and probe one encoder variant."""
    tag = EncoderTag(tag)
    train = in_split(dataset, Split.TRAIN)
    if not train:
        raise TrainingError("The dataset has no train split")
    encoder = init_encoder((train[0].features.shape[0], *config.encoder_widths), config.seed)
    match tag:
        case EncoderTag.RNC:
            stage = pretrain_rnc(encoder, dataset, config)
        case EncoderTag.SUPERVISED:
            stage = train_supervised(encoder, dataset, config)
        case EncoderTag.RANDOM:
            stage = PretrainResult(encoder, (), {})
    frozen = stage.encoder.freeze()
    probe = train_probe(frozen, dataset, config)
    return TrainedPipeline(
        encoder=frozen,
        head=probe.head,
        tag=tag,
        config=config,
        pretrain_losses=stage.losses,
        probe_val_r2=probe.val_r2,
        best_epoch=probe.best_epoch,
        rng_state=stage.rng_state,
    )


def latent_ordering(encoder: MlpEncoder, scenes: Sequence[Scene], anchors: int = 50, seed: int = 0) -> float:
    """Mean over random anchors of Kendall tau(embedding distance, label distance)."""
    if len(scenes) < 3:
        raise TrainingError("Latent ordering needs at least three scenes", context={"n": len(scenes)})
    embeddings = embed(encoder, scenes)
    labels = targets_of(scenes)
    rng = derive_rng(seed, "latent-ordering")
    taus = []
    for anchor in rng.choice(len(scenes), size=min(anchors, len(scenes)), replace=False):
        others = np.arange(len(scenes)) != anchor
        distances = np.linalg.norm(embeddings[others] - embeddings[anchor], axis=1)
        try:
            taus.append(kendall_tau(distances, np.abs(labels[others] - labels[anchor])))
        except UndefinedMetricError:
            logger.debug("anchor %d skipped: fully tied distances", anchor)
    if not taus:
        raise UndefinedMetricError("Every anchor had fully tied distances")
    return float(np.mean(taus))
