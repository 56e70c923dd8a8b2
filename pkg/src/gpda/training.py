"""Joint adversarial training: schedules, per-batch graphs, centroid bank, SGD."""

from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tensor
from .data import PdaTask
from .graph import NodeLabels, assign_pseudo_labels, build_adjacency, soft_pseudo_labels
from .losses import (
    CentroidBank,
    ClassWeights,
    LossBreakdown,
    estimate_gamma,
    loss_centroid_separation,
    loss_domain_logits,
    loss_source,
    loss_target_weighted,
    total_loss,
    update_centroids,
)
from .models import (
    GpdaModels,
    ModelSpec,
    classify,
    discriminator_logits,
    feature_extract,
    gcn_forward,
    init_params,
)

log = logging.getLogger(__name__)

MODES = {
    "gpda": {},
    "no_cs": {"no_cs": True},
    "no_graph": {"no_graph": True},
    "baseline": {"baseline": True, "no_graph": True, "no_cs": True},
    "source_only": {"source_only": True, "no_graph": True, "no_cs": True, "uniform_gamma": True},
    "dann_like": {"uniform_gamma": True, "no_graph": True, "no_cs": True},
}


class TrainingAborted(NumericError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    lambda1: float = 1.0
    lambda2: float = 1.0
    gamma_period: int = 1
    threshold: float = 0.8
    centroid_momentum: float = 0.7
    seed: int = 0
    no_graph: bool = False
    no_cs: bool = False
    baseline: bool = False
    source_only: bool = False
    uniform_gamma: bool = False
    normalize_gamma: bool = True
    soft_labels: bool = False
    # Unit-norm rows before centroids keep the separation term bounded below.
    normalize_centroid_features: bool = True
    standardize_inputs: bool = True
    # Global gradient-norm ceiling; None disables clipping.
    grad_clip: float | None = 5.0
    feature_sizes: tuple[int, ...] = (128, 64)
    gcn_sizes: tuple[int, ...] = (64, 64, 64)
    disc_hidden: tuple[int, ...] = (32,)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.gamma_period < 1:
            raise ValueError("epochs must be >= 0, batch_size and gamma_period >= 1")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError(f"need lr > 0 and momentum in [0, 1), got {self.lr}, {self.momentum}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("trade-off weights must be non-negative")
        if self.baseline and not (self.no_graph and self.no_cs):
            raise ValueError("baseline requires no_graph and no_cs")
        if self.source_only and not (self.no_graph and self.no_cs and self.uniform_gamma):
            raise ValueError("source_only requires no_graph, no_cs and uniform_gamma")

    @classmethod
    def for_mode(cls, mode: str, **overrides) -> "TrainConfig":
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; choose from {sorted(MODES)}")
        return cls(**{**overrides, **MODES[mode]})

    @property
    def uses_domain(self) -> bool:
        return not self.source_only

    @property
    def uses_graph(self) -> bool:
        return not (self.source_only or self.no_graph)

    @property
    def uses_separation(self) -> bool:
        return not (self.source_only or self.no_cs)

    def model_spec(self, input_dim: int, num_classes: int) -> ModelSpec:
        return ModelSpec(input_dim, num_classes, self.feature_sizes, self.gcn_sizes, self.disc_hidden)


@dataclass
class EpochRecord:
    epoch: int
    losses: dict[str, float]
    target_accuracy: float
    gamma: np.ndarray


@dataclass
class TrainState:
    config: TrainConfig
    models: GpdaModels
    bank: CentroidBank
    gamma: ClassWeights
    total_steps: int
    step: int = 0
    velocity: dict[int, np.ndarray] = field(default_factory=dict)
    offset_rng: np.random.Generator | None = None
    history: list[EpochRecord] = field(default_factory=list)

    @property
    def progress(self) -> float:
        return min(1.0, self.step / self.total_steps) if self.total_steps else 0.0

    def active_parameters(self) -> list[Tensor]:
        groups = self.models.groups()
        names = ["E", "Fs", "Ft"]
        if self.config.uses_domain:
            names.append("D")
        if self.config.uses_graph:
            names.append("G")
        return [p for name in names for p in groups[name]]


def grl_coefficient(p: float) -> float:
    return 2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0


def learning_rate(p: float, base_lr: float, new_layer: bool = False, pretrained_backbone: bool = False) -> float:
    """Annealed rate ``base / (1 + 10 p)^0.75``.

    Layers trained from scratch get ten times the rate, but only when the
    rest of the network is a pre-trained backbone; every layer here is new.
    """
    rate = base_lr / (1.0 + 10.0 * p) ** 0.75
    return 10.0 * rate if new_layer and pretrained_backbone else rate


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


@contextmanager
def _term(name: str):
    try:
        yield
    except NumericError as exc:
        if isinstance(exc, TrainingAborted):
            raise
        raise TrainingAborted(f"{name}: {exc}") from exc


def objective(
    models: GpdaModels,
    config: TrainConfig,
    xs: np.ndarray,
    ys: np.ndarray,
    xt: np.ndarray,
    gamma: ClassWeights,
    bank: CentroidBank,
    grl_coeff: float,
    offset: int,
) -> tuple[LossBreakdown, CentroidBank]:
    """Forward pass of the full objective over one joint batch.

    Does not mutate ``models`` or ``bank``; returns the loss terms and the
    centroid bank as it would stand after this batch.
    """
    num_classes = models.spec.num_classes
    n_s = xs.shape[0]
    feats = feature_extract(models.extractor, models.preprocess(np.vstack([xs, xt])))
    feats_s = ad.take_rows(feats, np.arange(n_s))
    y_s = one_hot(ys, num_classes)
    weights = ClassWeights.uniform(num_classes) if config.uniform_gamma else gamma

    with _term("L_S"):
        l_source = loss_source(classify(models.source_classifier, feats_s), y_s)
    with _term("L_T"):
        l_target = loss_target_weighted(classify(models.target_classifier, feats_s), y_s, weights)
    zero = Tensor(np.zeros((1, 1)))
    l_domain, l_sep, new_bank = zero, zero, bank

    if config.uses_domain:
        labels = NodeLabels.ground_truth(ys, num_classes)
        if config.uses_graph or config.uses_separation:
            target_logits = classify(models.target_classifier, Tensor(feats.values[n_s:]))
            probs = ad.softmax(target_logits.values)
            pseudo = soft_pseudo_labels(probs) if config.soft_labels else assign_pseudo_labels(probs, config.threshold)
            labels = NodeLabels.concat(labels, pseudo)
        if config.uses_graph:
            graph_feats = gcn_forward(models.gcn, feats, build_adjacency(labels))
        else:
            graph_feats = feats
        domain_scores = discriminator_logits(models.discriminator, graph_feats, grl_coeff)
        is_source = np.arange(feats.shape[0]) < n_s
        sample_weights = np.ones(feats.shape[0])
        sample_weights[:n_s] = weights.per_sample(ys)
        with _term("L_D"):
            l_domain = loss_domain_logits(domain_scores, is_source.astype(np.float64), sample_weights)
        if config.uses_separation and num_classes > 1:
            centroid_feats = ad.normalize_rows(graph_feats) if config.normalize_centroid_features else graph_feats
            new_bank = update_centroids(bank, centroid_feats, labels.rows, is_source)
            l_sep = loss_centroid_separation(new_bank, offset)

    return total_loss(l_source, l_target, l_domain, l_sep, config.lambda1, config.lambda2), new_bank


def new_state(config: TrainConfig, task: PdaTask, steps_per_epoch: int) -> TrainState:
    spec = config.model_spec(task.source.dim, task.num_classes)
    models = init_params(spec, config.seed)
    if config.uses_domain and not config.uses_graph and spec.gcn_sizes[-1] != spec.feature_dim:
        raise ValueError("without the GCN head the discriminator input must match the feature width")
    graph_dim = spec.gcn_sizes[-1] if config.uses_graph else spec.feature_dim
    return TrainState(
        config=config,
        models=models,
        bank=CentroidBank.empty(task.num_classes, graph_dim, config.centroid_momentum),
        gamma=ClassWeights.uniform(task.num_classes),
        total_steps=config.epochs * steps_per_epoch,
        offset_rng=np.random.default_rng([config.seed, 2]),
    )


def train_step(state: TrainState, xs: np.ndarray, ys: np.ndarray, xt: np.ndarray) -> tuple[TrainState, dict[str, float]]:
    if xs.shape[0] == 0 or xt.shape[0] == 0:
        raise ValueError("train_step needs non-empty source and target batches")
    config = state.config
    p = state.progress
    num_classes = state.models.spec.num_classes
    offset = int(state.offset_rng.integers(1, num_classes)) if num_classes > 1 else 0
    parts, new_bank = objective(
        state.models, config, xs, ys, xt, state.gamma, state.bank, grl_coefficient(p), offset
    )
    values = parts.values()
    for name, v in values.items():
        if not math.isfinite(v):
            raise TrainingAborted(f"non-finite {name} ({v}) at step {state.step}")

    params = state.active_parameters()
    ad.zero_grads(params)
    ad.backward(parts.total)
    rate = learning_rate(p, config.lr)
    scale = 1.0
    if config.grad_clip is not None:
        norm = math.sqrt(sum(float(np.sum(q.grad * q.grad)) for q in params))
        if norm > config.grad_clip:
            scale = config.grad_clip / norm
    for param in params:
        grad = param.grad * scale if scale != 1.0 else param.grad
        v = state.velocity.get(id(param))
        v = grad if v is None else config.momentum * v + grad
        state.velocity[id(param)] = v
        param.values = param.values - rate * v
        if not np.all(np.isfinite(param.values)):
            raise TrainingAborted(f"parameter {param.name} became non-finite at step {state.step}")

    if config.uses_separation:
        state.bank = new_bank.detached()
    state.step += 1
    return state, values


def refresh_gamma(state: TrainState, target_samples: np.ndarray) -> ClassWeights:
    """Class weights from F_s(E(x)) averaged over the whole target set."""
    if state.config.uniform_gamma:
        return ClassWeights.uniform(state.models.spec.num_classes)
    probs = state.models.source_probs(target_samples)
    return estimate_gamma(probs, normalize=state.config.normalize_gamma)


def target_accuracy(models: GpdaModels, samples: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    pred = models.predict_target(samples).argmax(axis=1)
    return float(np.mean(pred == labels))


def epoch_batches(rng: np.random.Generator, n: int, steps: int, batch: int) -> np.ndarray:
    """``steps`` x ``batch`` index matrix drawn from back-to-back permutations of ``range(n)``."""
    need = steps * batch
    chunks, have = [], 0
    while have < need:
        chunks.append(rng.permutation(n))
        have += n
    return np.concatenate(chunks)[:need].reshape(steps, batch)


def fit(config: TrainConfig, task: PdaTask, state_hook=None) -> tuple[GpdaModels, list[EpochRecord]]:
    """Train all components on ``task`` and return the models and per-epoch history."""
    src, tgt = task.source, task.target
    missing = set(range(task.num_classes)) - set(src.classes().tolist())
    if missing:
        raise ValueError(f"source lacks samples for classes {sorted(missing)}")
    steps = math.ceil(max(len(src), len(tgt)) / config.batch_size)
    state = new_state(config, task, steps)
    if config.standardize_inputs:
        state.models.fit_input_scaling(src.samples)
    if config.epochs == 0:
        return state.models, state.history
    order_rng = np.random.default_rng([config.seed, 1])
    state.gamma = refresh_gamma(state, tgt.samples)

    for epoch in range(config.epochs):
        src_idx = epoch_batches(order_rng, len(src), steps, config.batch_size)
        tgt_idx = epoch_batches(order_rng, len(tgt), steps, config.batch_size)
        sums: dict[str, float] = {}
        for s_idx, t_idx in zip(src_idx, tgt_idx):
            _, values = train_step(state, src.samples[s_idx], src.labels[s_idx], tgt.samples[t_idx])
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v
        if (epoch + 1) % config.gamma_period == 0:
            state.gamma = refresh_gamma(state, tgt.samples)
        record = EpochRecord(
            epoch=epoch,
            losses={k: v / steps for k, v in sums.items()},
            target_accuracy=target_accuracy(state.models, tgt.samples, tgt.labels),
            gamma=state.gamma.gamma.copy(),
        )
        state.history.append(record)
        log.debug("epoch %d acc %.4f losses %s", epoch, record.target_accuracy, record.losses)
        if state_hook is not None:
            state_hook(state)
    return state.models, state.history


def with_seed(config: TrainConfig, seed: int) -> TrainConfig:
    return replace(config, seed=seed)
