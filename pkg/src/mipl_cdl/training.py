"""Training loop, held-out evaluation and repeated experiments."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from mipl_cdl import calibration
from mipl_cdl.data import GenConfig, MiplDataset, collate, generate_synthetic, make_rng, split
from mipl_cdl.errors import ConfigurationError, NumericalError
from mipl_cdl.losses import LOSS_KINDS, LabelWeights, LossConfig, batch_loss
from mipl_cdl.model import MiplModel, ModelConfig
from mipl_cdl.numerics import cosine_anneal, sgd_step
from mipl_cdl.theory import dataset_bound_summary

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0001
    loss: str = "cdl-cn"
    gamma: int = 1
    unit_base: bool = False
    seed: int = 0
    # Check label-weight invariants after every batch instead of every epoch.
    debug_checks: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigurationError("lr must be positive")
        if self.loss not in LOSS_KINDS:
            raise ConfigurationError(f"unknown loss {self.loss!r}")
        self.loss_config()

    def loss_config(self) -> LossConfig:
        return LossConfig(self.loss, self.gamma, self.unit_base)


class TrainingAborted(NumericalError):
    def __init__(self, message, epoch, batch, op=None):
        super().__init__(f"epoch {epoch}, batch {batch}: {message}", op=op)
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainTrace:
    loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    tau: list = field(default_factory=list)
    weight_violation: list = field(default_factory=list)
    weight_leak: list = field(default_factory=list)


@dataclass
class TrainState:
    model: MiplModel
    weights: LabelWeights
    trace: TrainTrace


def _run_seeds(seed: int) -> tuple:
    # Shuffling draws from its own stream so data and optimization randomness stay independent.
    rng = make_rng(seed)
    return int(rng.integers(2**63 - 1)), int(rng.integers(2**63 - 1))


def init_model(config: ModelConfig, seed: int) -> MiplModel:
    init_seed, _ = _run_seeds(seed)
    return MiplModel(config, seed=init_seed)


def train(dataset: MiplDataset, model: MiplModel, config: TrainConfig) -> TrainState:
    if dataset.d != model.config.input_dim or dataset.k != model.config.num_classes:
        raise ConfigurationError(
            f"dataset (d={dataset.d}, k={dataset.k}) does not match model "
            f"(d={model.config.input_dim}, k={model.config.num_classes})")
    loss_cfg = config.loss_config()
    _, shuffle_seed = _run_seeds(config.seed)
    rng = make_rng(shuffle_seed)
    bags = dataset.bags
    m, k = len(bags), dataset.k
    cand = np.stack([collate([b], k).candidate_mask[0] for b in bags])
    weights = LabelWeights(cand, config.epochs)
    trace = TrainTrace()
    params = model.parameters()
    mam = model.config.attention.variant == "mam"

    for epoch in range(1, config.epochs + 1):
        lr = cosine_anneal(config.lr, epoch, config.epochs)
        if mam:
            model.anneal()
        order = rng.permutation(m)
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, m, config.batch_size)):
            rows = order[start:start + config.batch_size]
            batch = collate([bags[i] for i in rows], k)
            try:
                out = model.forward(batch)
                weights.update(rows, out.probs.data, epoch)
                loss = batch_loss(loss_cfg, weights[rows], out.probs, batch.candidate_mask)
                loss.backward()
                sgd_step(params, lr, config.momentum, config.weight_decay)
            except NumericalError as exc:
                raise TrainingAborted(str(exc), epoch, b + 1, op=exc.op) from exc
            if config.debug_checks and weights.violation() > 1e-9:
                raise TrainingAborted("label weights left the candidate simplex", epoch, b + 1)
            total += loss.item() * len(rows)
            seen += len(rows)
        trace.loss.append(total / seen)
        trace.lr.append(lr)
        trace.tau.append(model.tau)
        trace.weight_violation.append(weights.violation())
        trace.weight_leak.append(weights.leak())
        log.debug("epoch %d loss %.6f lr %.5f tau %.4f", epoch, trace.loss[-1], lr, model.tau)
    return TrainState(model, weights, trace)


@dataclass
class Evaluation:
    records: list
    probs: np.ndarray
    accuracy: float
    reliability: calibration.ReliabilityReport
    breakdown: dict

    @property
    def ece(self) -> float:
        return self.reliability.ece


def evaluate(model: MiplModel, dataset: MiplDataset, n_bins: int = 15) -> Evaluation:
    if dataset.d != model.config.input_dim or dataset.k != model.config.num_classes:
        raise ConfigurationError("dataset and model dimensions disagree")
    probs = model.predict_proba(list(dataset.bags))
    records = calibration.make_records([b.bag_id for b in dataset], probs,
                                       [b.true_label for b in dataset], [b.candidates for b in dataset])
    return Evaluation(records, probs, calibration.accuracy(records),
                      calibration.ece(records, n_bins), calibration.probability_breakdown(records))


@dataclass
class RunResult:
    model: MiplModel
    trace: TrainTrace
    test: Evaluation
    train_breakdown: dict
    theorem: dict | None
    duration: float
    config: dict

    @property
    def accuracy(self) -> float:
        return self.test.accuracy

    @property
    def ece(self) -> float:
        return self.test.ece

    @property
    def records(self) -> list:
        return self.test.records

    def metrics(self) -> dict:
        """Deterministic metrics document (no wall-clock values)."""
        bins = [dict(zip(calibration.CSV_HEADER, row)) for row in self.test.reliability.rows()]
        return {
            "accuracy": self.test.accuracy,
            "ece": self.test.ece,
            "breakdown": self.test.breakdown,
            "train_breakdown": self.train_breakdown,
            "loss_trace": self.trace.loss,
            "lr_trace": self.trace.lr,
            "tau_trace": self.trace.tau,
            "weight_violation": self.trace.weight_violation,
            "weight_leak": self.trace.weight_leak,
            "theorem": self.theorem,
            "reliability": bins,
            "test_bags": len(self.test.records),
        }


def fit_and_evaluate(train_set: MiplDataset, test_set: MiplDataset, model_config: ModelConfig,
                     train_config: TrainConfig, n_bins: int = 15) -> RunResult:
    """Initialize from the run seed, train, then evaluate on the held-out split."""
    start = time.perf_counter()
    model = init_model(model_config, train_config.seed)
    state = train(train_set, model, train_config)
    test_eval = evaluate(model, test_set, n_bins)
    train_probs = model.predict_proba(list(train_set.bags))
    train_records = calibration.make_records([b.bag_id for b in train_set], train_probs,
                                             [b.true_label for b in train_set],
                                             [b.candidates for b in train_set])
    theorem = None
    if train_config.loss.startswith("cdl"):
        theorem = dataset_bound_summary(state.weights.values, train_probs, state.weights.candidates,
                                        train_config.loss[-2:], int(train_config.gamma))
    cfg = {"model": _model_dict(model_config), "train": asdict(train_config)}
    return RunResult(model, state.trace, test_eval, calibration.probability_breakdown(train_records),
                     theorem, time.perf_counter() - start, cfg)


def _model_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    d["hidden"] = list(d["hidden"])
    return d


@dataclass(frozen=True)
class ModelSpec:
    """Model hyperparameters without the dataset-derived dimensions."""

    hidden: tuple = (64,)
    activation: str = "tanh"
    scorer_hidden: int = 128
    attention: str = "sam"
    sam_scale: float | None = None
    tau0: float = 1.0
    tau_min: float = 0.1

    def build(self, input_dim: int, num_classes: int) -> ModelConfig:
        from mipl_cdl.model import AttentionConfig
        return ModelConfig(input_dim, num_classes, tuple(self.hidden), self.activation, self.scorer_hidden,
                           AttentionConfig(self.attention, self.sam_scale, self.tau0, self.tau_min))


@dataclass(frozen=True)
class ExperimentConfig:
    data: GenConfig = field(default_factory=GenConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_ratio: float = 0.7
    n_bins: int = 15


@dataclass
class ExperimentResult:
    runs: list
    seeds: list

    def _stat(self, name):
        vals = np.array([getattr(r, name) for r in self.runs])
        return float(vals.mean()), float(vals.std())

    @property
    def accuracy(self) -> tuple:
        return self._stat("accuracy")

    @property
    def ece(self) -> tuple:
        return self._stat("ece")

    def summary(self) -> dict:
        acc_mean, acc_std = self.accuracy
        ece_mean, ece_std = self.ece
        return {"repeats": len(self.runs), "accuracy_mean": acc_mean, "accuracy_std": acc_std,
                "ece_mean": ece_mean, "ece_std": ece_std}


def repeat_seeds(config: ExperimentConfig, offset: int) -> tuple:
    return config.data.seed + offset, config.train.seed + offset


def run_single(config: ExperimentConfig, offset: int) -> RunResult:
    data_seed, run_seed = repeat_seeds(config, offset)
    data = generate_synthetic(GenConfig(**{**asdict(config.data), "seed": data_seed}))
    train_set, test_set = split(data, config.train_ratio, seed=data_seed)
    model_config = config.model.build(data.d, data.k)
    train_config = TrainConfig(**{**asdict(config.train), "seed": run_seed})
    return fit_and_evaluate(train_set, test_set, model_config, train_config, config.n_bins)


def run_experiment(config: ExperimentConfig, repeats: int = 10) -> ExperimentResult:
    """Generate, split, train and evaluate ``repeats`` times with seed offsets 0..repeats-1."""
    if repeats < 1:
        raise ConfigurationError("repeats must be >= 1")
    runs = []
    for s in range(repeats):
        runs.append(run_single(config, s))
        log.info("repeat %d: accuracy %.4f ece %.4f", s, runs[-1].accuracy, runs[-1].ece)
    return ExperimentResult(runs, [repeat_seeds(config, s) for s in range(repeats)])
