"""Embedded-space MIPL network: MLP extractor, gated scorer, attention pooling, softmax classifier.

All batch computations run on a flat instance matrix with one segment id
per instance, so bags of any size share a single forward pass.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mipl_cdl import numerics as nx
from mipl_cdl.data import Bag, Batch, atomic_write_text, collate, make_rng
from mipl_cdl.errors import ConfigurationError
from mipl_cdl.numerics import Parameter, Tensor

VARIANTS = ("dam", "sam", "mam")
ACTIVATIONS = {"tanh": nx.tanh, "relu": nx.relu}
TEMPERATURE_DECAY = 0.95
STD_GUARD = 1e-12
CHECKPOINT_SCHEMA = "mipl-cdl/checkpoint-v1"


@dataclass(frozen=True)
class AttentionConfig:
    variant: str = "sam"
    sam_scale: float | None = None  # None -> gated scorer hidden size
    tau0: float = 1.0
    tau_min: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown attention variant {self.variant!r}; expected one of {VARIANTS}")
        if self.sam_scale is not None and not self.sam_scale > 0:
            raise ConfigurationError("sam_scale must be positive")
        if not self.tau0 >= self.tau_min > 0:
            raise ConfigurationError("need tau0 >= tau_min > 0")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    num_classes: int
    hidden: tuple = (64,)
    activation: str = "tanh"
    scorer_hidden: int = 128
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if isinstance(self.attention, dict):
            object.__setattr__(self, "attention", AttentionConfig(**self.attention))
        if self.input_dim < 1 or self.num_classes < 1 or self.scorer_hidden < 1:
            raise ConfigurationError("input_dim, num_classes and scorer_hidden must be >= 1")
        if any(h < 1 for h in self.hidden):
            raise ConfigurationError("hidden widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @property
    def embed_dim(self) -> int:
        return self.hidden[-1] if self.hidden else self.input_dim

    @property
    def sam_scale(self) -> float:
        a = self.attention.sam_scale
        return float(self.scorer_hidden if a is None else a)


# -- attention primitives (single bag or segmented batch) -------------------------

def _segments(n: int):
    return np.zeros(n, dtype=np.intp), np.array([n], dtype=np.intp)


def dam_weights(scores, segments, sizes) -> Tensor:
    s = nx.sigmoid(scores)
    return s / nx.take_rows(nx.segment_sum(s, segments, len(sizes)), segments)


def sam_weights(scores, segments, sizes, scale: float) -> Tensor:
    return nx.segment_softmax(nx.tensor(scores) * (1.0 / math.sqrt(scale)), segments, len(sizes))


def mam_weights(scores, segments, sizes, tau: float) -> Tensor:
    """Temperature softmax followed by per-bag standardization (sample std).

    Bags with a single instance, or whose softmax weights have std below
    1e-12, get all-zero weights.
    """
    nb = len(sizes)
    sizes = np.asarray(sizes)
    soft = nx.segment_softmax(nx.tensor(scores) * (1.0 / tau), segments, nb)
    mean = nx.segment_sum(soft, segments, nb) * (1.0 / sizes)
    dev = soft - nx.take_rows(mean, segments)
    denom = np.maximum(sizes - 1, 1).astype(np.float64)
    var = nx.segment_sum(dev * dev, segments, nb) * (1.0 / denom)
    ok = (sizes >= 2) & (np.sqrt(np.maximum(var.data, 0.0)) >= STD_GUARD)
    okf = ok.astype(np.float64)
    std = nx.sqrt(var * okf + (1.0 - okf))
    return dev / nx.take_rows(std, segments) * okf[segments]


def attention_dam(scores) -> Tensor:
    seg, sizes = _segments(len(nx.tensor(scores).data))
    return dam_weights(scores, seg, sizes)


def attention_sam(scores, scale: float) -> Tensor:
    if not scale > 0:
        raise ConfigurationError("SAM scale must be positive")
    seg, sizes = _segments(len(nx.tensor(scores).data))
    return sam_weights(scores, seg, sizes, scale)


def attention_mam(scores, tau: float) -> Tensor:
    if not tau > 0:
        raise ConfigurationError("temperature must be positive")
    seg, sizes = _segments(len(nx.tensor(scores).data))
    return mam_weights(scores, seg, sizes, tau)


def anneal_temperature(tau_prev: float, tau_min: float) -> float:
    return max(tau_min, tau_prev * TEMPERATURE_DECAY)


def aggregate(weights, embeddings) -> Tensor:
    """Bag feature ``z = sum_j a_j h_j`` for one bag."""
    return nx.weighted_sum(weights, embeddings)


def aggregate_segments(weights, embeddings, segments, num_bags: int) -> Tensor:
    weights, embeddings = nx.tensor(weights), nx.tensor(embeddings)
    if weights.shape[0] != embeddings.shape[0]:
        raise ConfigurationError("attention weight count differs from instance count")
    return nx.segment_sum(nx.reshape(weights, (-1, 1)) * embeddings, segments, num_bags)


def predict_from_probs(probs) -> tuple:
    """(1-based label, confidence) with lowest-index tie-break."""
    p = np.asarray(nx.tensor(probs).data)
    idx = int(np.argmax(p))
    return idx + 1, float(p[idx])


# -- model --------------------------------------------------------------------

@dataclass
class ForwardOutput:
    probs: Tensor
    logits: Tensor
    bag_features: Tensor
    attention: Tensor
    scores: Tensor
    embeddings: Tensor


class MiplModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.tau = config.attention.tau0
        rng = make_rng(seed)
        self.extractor = []
        fan_in = config.input_dim
        for i, width in enumerate(config.hidden):
            self.extractor.append((self._init(rng, (fan_in, width), fan_in, f"extractor.{i}.weight"),
                                   self._init(rng, (width,), fan_in, f"extractor.{i}.bias")))
            fan_in = width
        e, h = config.embed_dim, config.scorer_hidden
        self.w_tanh = self._init(rng, (e, h), e, "scorer.tanh.weight")
        self.b_tanh = self._init(rng, (h,), e, "scorer.tanh.bias")
        self.w_sigm = self._init(rng, (e, h), e, "scorer.sigm.weight")
        self.b_sigm = self._init(rng, (h,), e, "scorer.sigm.bias")
        self.w_out = self._init(rng, (h,), h, "scorer.out.weight")
        self.b_out = self._init(rng, (), h, "scorer.out.bias")
        self.w_cls = self._init(rng, (e, config.num_classes), e, "classifier.weight")
        self.b_cls = self._init(rng, (config.num_classes,), e, "classifier.bias")

    @staticmethod
    def _init(rng, shape, fan_in, name) -> Parameter:
        bound = 1.0 / math.sqrt(fan_in)
        return Parameter(rng.uniform(-bound, bound, size=shape), name=name)

    def parameters(self) -> list:
        params = [p for layer in self.extractor for p in layer]
        params += [self.w_tanh, self.b_tanh, self.w_sigm, self.b_sigm, self.w_out, self.b_out,
                   self.w_cls, self.b_cls]
        return params

    # -- pipeline stages --------------------------------------------------------
    def extract_features(self, instances) -> Tensor:
        x = nx.tensor(instances)
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ConfigurationError(
                f"instance dimension {x.shape[-1] if x.ndim else None} != model input_dim {self.config.input_dim}")
        act = ACTIVATIONS[self.config.activation]
        for w, b in self.extractor:
            x = act(nx.linear(x, w, b))
        return x

    def score_instances(self, embeddings) -> Tensor:
        h = nx.tensor(embeddings)
        gate = nx.tanh(nx.linear(h, self.w_tanh, self.b_tanh)) * nx.sigmoid(nx.linear(h, self.w_sigm, self.b_sigm))
        return nx.linear(gate, self.w_out, self.b_out)

    def attention(self, scores, segments, sizes) -> Tensor:
        variant = self.config.attention.variant
        if variant == "dam":
            return dam_weights(scores, segments, sizes)
        if variant == "sam":
            return sam_weights(scores, segments, sizes, self.config.sam_scale)
        return mam_weights(scores, segments, sizes, self.tau)

    def classify(self, bag_features) -> Tensor:
        return nx.softmax(nx.linear(bag_features, self.w_cls, self.b_cls), axis=-1)

    def forward(self, batch: Batch) -> ForwardOutput:
        h = self.extract_features(batch.instances)
        scores = self.score_instances(h)
        a = self.attention(scores, batch.segments, batch.sizes)
        z = aggregate_segments(a, h, batch.segments, batch.num_bags)
        logits = nx.linear(z, self.w_cls, self.b_cls)
        probs = nx.softmax(logits, axis=-1)
        return ForwardOutput(probs, logits, z, a, scores, h)

    def predict_proba(self, bags: Sequence[Bag], batch_size: int = 256) -> np.ndarray:
        out = []
        with nx.no_grad():
            for start in range(0, len(bags), batch_size):
                batch = collate(bags[start:start + batch_size], self.config.num_classes)
                out.append(self.forward(batch).probs.data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.config.num_classes))

    def predict(self, bag: Bag) -> tuple:
        """Return ``(label, confidence)`` for one bag; labels are 1-based."""
        return predict_from_probs(self.predict_proba([bag])[0])

    def anneal(self) -> float:
        self.tau = anneal_temperature(self.tau, self.config.attention.tau_min)
        return self.tau

    # -- checkpoints --------------------------------------------------------
    def state_dict(self) -> dict:
        cfg = asdict(self.config)
        cfg["hidden"] = list(cfg["hidden"])
        return {
            "schema": CHECKPOINT_SCHEMA,
            "config": cfg,
            "tau": self.tau,
            "params": {p.name: {"shape": list(p.data.shape), "values": p.data.reshape(-1).tolist()}
                       for p in self.parameters()},
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "MiplModel":
        if state.get("schema") != CHECKPOINT_SCHEMA:
            raise ConfigurationError(f"unsupported checkpoint schema {state.get('schema')!r}")
        cfg = dict(state["config"])
        cfg["attention"] = AttentionConfig(**cfg["attention"])
        model = cls(ModelConfig(**cfg))
        model.tau = float(state["tau"])
        stored = state["params"]
        for p in model.parameters():
            if p.name not in stored:
                raise ConfigurationError(f"checkpoint missing parameter {p.name}")
            entry = stored[p.name]
            values = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
            if values.shape != p.data.shape:
                raise ConfigurationError(f"parameter {p.name}: shape {values.shape} != {p.data.shape}")
            p.data = values
        return model

    def save(self, path) -> None:
        atomic_write_text(Path(path), json.dumps(self.state_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "MiplModel":
        return cls.from_state_dict(json.loads(Path(path).read_text(encoding="utf-8")))
