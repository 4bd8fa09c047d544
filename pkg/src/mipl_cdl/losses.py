"""Candidate-label weights and the disambiguation loss family.

Every loss takes ``(weights, probs, candidates)`` where ``weights`` and
``candidates`` are constant ``(B, k)`` arrays (float weights, boolean
candidate mask) and ``probs`` is a ``(B, k)`` tensor of predicted class
probabilities.  1-D inputs are treated as a single bag and give a scalar.
Batched calls return the per-bag loss vector; :func:`batch_loss` averages it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mipl_cdl import numerics as nx
from mipl_cdl.errors import ConfigurationError, NumericalError
from mipl_cdl.numerics import Tensor

LOSS_KINDS = ("mdl", "fl", "ifl", "cdl-cc", "cdl-cn")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "cdl-cn"
    gamma: float = 1
    # Replace the CDL modulating base by the constant 1 (degeneracy checks only).
    unit_base: bool = False

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigurationError(f"unknown loss {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.kind.startswith("cdl") and (self.gamma < 1 or self.gamma != int(self.gamma)):
            raise ConfigurationError(f"CDL needs an integer gamma >= 1, got {self.gamma}")
        if self.gamma < 0:
            raise ConfigurationError(f"gamma must be non-negative, got {self.gamma}")


# -- label weights --------------------------------------------------------------

def init_weights(candidates: np.ndarray) -> np.ndarray:
    """Uniform ``1/|S|`` on candidates, exactly 0 elsewhere."""
    mask = np.asarray(candidates, dtype=bool)
    counts = mask.sum(axis=-1, keepdims=True)
    if np.any(counts == 0):
        raise ConfigurationError("empty candidate set")
    return np.where(mask, 1.0 / counts, 0.0)


def momentum_rate(t: int, total: int) -> float:
    return (total - t) / total


def update_weights(prev: np.ndarray, probs, candidates: np.ndarray, t: int, total: int) -> np.ndarray:
    """Momentum update towards the candidate-renormalized (detached) prediction."""
    if not 2 <= t <= total:
        raise ConfigurationError(f"weight update epoch {t} outside 2..{total}")
    p = np.asarray(nx.tensor(probs).data)
    mask = np.asarray(candidates, dtype=bool)
    masked = np.where(mask, p, 0.0)
    mass = masked.sum(axis=-1, keepdims=True)
    if np.any(mass < 1e-12):
        raise NumericalError("candidate probability mass below 1e-12", op="update_weights")
    alpha = momentum_rate(t, total)
    return np.where(mask, alpha * np.asarray(prev) + (1.0 - alpha) * masked / mass, 0.0)


class LabelWeights:
    """Per-bag weight table for a training set, indexed by row."""

    def __init__(self, candidates: np.ndarray, total_epochs: int):
        self.candidates = np.asarray(candidates, dtype=bool)
        self.total_epochs = int(total_epochs)
        self.values = init_weights(self.candidates)

    def __getitem__(self, rows) -> np.ndarray:
        return self.values[rows]

    def update(self, rows: np.ndarray, probs, epoch: int) -> None:
        if epoch < 2:
            return
        self.values[rows] = update_weights(self.values[rows], probs, self.candidates[rows],
                                           epoch, self.total_epochs)

    def leak(self) -> float:
        """Largest absolute weight on a non-candidate label (exactly 0 when valid)."""
        return float(np.abs(np.where(self.candidates, 0.0, self.values)).max())

    def violation(self) -> float:
        """Largest departure from a candidate-restricted simplex (0 when valid)."""
        off = np.abs(np.where(self.candidates, 0.0, self.values)).max()
        neg = max(0.0, -float(self.values.min()))
        total = np.abs(self.values.sum(axis=1) - 1.0).max()
        return float(max(off, neg, total))


# -- selectors ------------------------------------------------------------------

def _rows(probs, weights=None, candidates=None):
    p = nx.tensor(probs)
    single = p.ndim == 1
    if single:
        p = nx.reshape(p, (1, -1))
    out = [p]
    for arr, dtype in ((weights, np.float64), (candidates, bool)):
        if arr is not None:
            arr = np.asarray(arr, dtype=dtype)
            out.append(arr.reshape(1, -1) if single else arr)
    return single, out


def _finish(single: bool, values: Tensor) -> Tensor:
    return nx.reshape(values, ()) if single else values


def max_candidate(probs, candidates) -> Tensor:
    single, (p, mask) = _rows(probs, candidates=candidates)
    return _finish(single, nx.max_value(p, mask=mask))


def phi_cc(probs, candidates) -> Tensor:
    """Second-largest candidate probability (0 for singleton candidate sets)."""
    single, (p, mask) = _rows(probs, candidates=candidates)
    top = nx.argmax(p, mask=mask)
    rest = mask.copy()
    rest[np.arange(len(top)), top] = False
    has_second = rest.any(axis=1)
    second = nx.argmax(p, mask=rest)
    value = nx.pick(p, np.arange(len(top)), second) * has_second.astype(np.float64)
    return _finish(single, value)


def phi_cn(probs, candidates) -> Tensor:
    """Largest non-candidate probability (0 when every label is a candidate)."""
    single, (p, mask) = _rows(probs, candidates=candidates)
    rest = ~mask
    has_nc = rest.any(axis=1)
    idx = nx.argmax(p, mask=rest)
    value = nx.pick(p, np.arange(len(idx)), idx) * has_nc.astype(np.float64)
    return _finish(single, value)


PHI = {"cc": phi_cc, "cn": phi_cn}


def modulating_base(probs, candidates, variant: str) -> Tensor:
    """``1 - max_{c in S} p_c + Phi(p)`` for the CC or CN instantiation."""
    if variant not in PHI:
        raise ConfigurationError(f"unknown CDL variant {variant!r}")
    return 1.0 - max_candidate(probs, candidates) + PHI[variant](probs, candidates)


# -- losses -------------------------------------------------------------------

def _weighted_nll_terms(w: np.ndarray, p: Tensor) -> Tensor:
    return -(nx.log(p) * w)


def mdl_loss(weights, probs, candidates=None) -> Tensor:
    """``-sum_{c in S} w_c log p_c``; weights vanish off the candidate set."""
    single, (p, w) = _rows(probs, weights=weights)
    return _finish(single, nx.tsum(_weighted_nll_terms(w, p), axis=1))


def _focal(weights, probs, gamma: float, sign: float) -> Tensor:
    single, (p, w) = _rows(probs, weights=weights)
    mod = nx.power(1.0 + sign * p, gamma)
    return _finish(single, nx.tsum(_weighted_nll_terms(w, p) * mod, axis=1))


def fl_mipl_loss(weights, probs, candidates=None, gamma: float = 1) -> Tensor:
    return _focal(weights, probs, gamma, -1.0)


def ifl_mipl_loss(weights, probs, candidates=None, gamma: float = 1) -> Tensor:
    return _focal(weights, probs, gamma, +1.0)


def cdl_loss(weights, probs, candidates, variant: str = "cn", gamma: int = 1,
             unit_base: bool = False) -> Tensor:
    """Per-bag modulating factor ``base**gamma`` times the MDL loss.

    The factor is shared by every candidate term of a bag, so the sum
    factorizes; gradients flow through the max/Phi selectors.
    """
    single, (p, w, mask) = _rows(probs, weights=weights, candidates=candidates)
    mdl = nx.tsum(_weighted_nll_terms(w, p), axis=1)
    if unit_base:
        return _finish(single, mdl)
    base = modulating_base(p, mask, variant)
    return _finish(single, nx.power(base, gamma) * mdl)


def bag_losses(config: LossConfig, weights, probs, candidates) -> Tensor:
    kind = config.kind
    if kind == "mdl":
        return mdl_loss(weights, probs)
    if kind == "fl":
        return fl_mipl_loss(weights, probs, gamma=config.gamma)
    if kind == "ifl":
        return ifl_mipl_loss(weights, probs, gamma=config.gamma)
    return cdl_loss(weights, probs, candidates, variant=kind[-2:], gamma=int(config.gamma),
                    unit_base=config.unit_base)


def batch_loss(config: LossConfig, weights, probs, candidates) -> Tensor:
    """Mean of the per-bag losses over a mini-batch."""
    return nx.tmean(bag_losses(config, weights, probs, candidates))
