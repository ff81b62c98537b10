"""Patient-level score composition: mean aggregation, side prior, side-only rule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from pcamil.data import Label, Side
from pcamil.errors import (
    EmptyBag,
    InvalidConfig,
    OutOfRangePosterior,
    SingleClassTrainingSet,
    ZeroEvidence,
)

LEFT_WEIGHT = 0.1
BETA_GRID = (0.8, 0.9, 1.0)


@dataclass(frozen=True)
class PriorConfig:
    left_weight: float = LEFT_WEIGHT
    beta: float = 1.0

    def __post_init__(self):
        if not 0 < self.left_weight <= 1:
            raise InvalidConfig(f"left_weight must lie in (0, 1], got {self.left_weight}")
        if not 0 < self.beta <= 1:
            raise InvalidConfig(f"beta must lie in (0, 1], got {self.beta}")


def mean_aggregate(patch_probs: Sequence[float]) -> float:
    probs = np.asarray(patch_probs, dtype=np.float64)
    if probs.size == 0:
        raise EmptyBag("cannot aggregate an empty bag")
    return float(probs.mean())


def side_prior(side: Side, cfg: PriorConfig = PriorConfig()) -> float:
    # undefined shares the right-side branch
    return cfg.left_weight if side is Side.LEFT else cfg.beta


def apply_prior(p: float, side: Side, cfg: PriorConfig = PriorConfig()) -> float:
    return p * side_prior(side, cfg)


def apply_prior_many(scores, sides: Sequence[Side], cfg: PriorConfig = PriorConfig()) -> np.ndarray:
    factors = np.array([side_prior(s, cfg) for s in sides])
    return np.asarray(scores, dtype=np.float64) * factors


def side_only_classifier(side: Side) -> Label:
    return Label.MSS if side is Side.LEFT else Label.MSI


def bayes_posterior(likelihood: float, prior: float, evidence: float) -> float:
    """P(class | evidence) = P(evidence | class) P(class) / P(evidence)."""
    if evidence <= 0:
        raise ZeroEvidence("evidence probability must be > 0")
    post = likelihood * prior / evidence
    if not 0.0 <= post <= 1.0:
        raise OutOfRangePosterior(f"posterior {post} outside [0, 1]; inputs are inconsistent")
    return post


# ---------------------------------------------------------------- patch scorer


@dataclass(frozen=True)
class PatchScorer:
    """Logistic model over single patch feature vectors."""

    weights: np.ndarray
    bias: float

    def predict(self, patches: np.ndarray) -> np.ndarray:
        x = np.asarray(patches, dtype=np.float64)
        return expit(x @ self.weights + self.bias)

    def score_bag(self, patches: np.ndarray) -> float:
        return mean_aggregate(self.predict(patches))


def train_patch_scorer(
    patches: np.ndarray,
    labels: Sequence[Label],
    epochs: int = 200,
    lr: float = 0.01,
    seed: int = 0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> PatchScorer:
    """Fit by full-batch ADAM on class-weighted patch BCE.

    ``labels`` gives one label per patch row (patches inherit their
    patient's label). Class weights follow the MIL rule: inverse patch
    frequency normalised to mean one.
    """
    x = np.asarray(patches, dtype=np.float64)
    y = np.array([lab.y for lab in labels], dtype=np.float64)
    if len(y) != len(x):
        raise InvalidConfig(f"{len(x)} patches but {len(y)} labels")
    n_pos = y.sum()
    if n_pos == 0 or n_pos == len(y):
        raise SingleClassTrainingSet("patch scorer needs both classes")
    inv_pos, inv_neg = len(y) / n_pos, len(y) / (len(y) - n_pos)
    mean_inv = (inv_pos + inv_neg) / 2
    sample_w = np.where(y == 1, inv_pos, inv_neg) / mean_inv

    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, 0.01, size=x.shape[1])
    b = 0.0
    m_w, v_w = np.zeros_like(w), np.zeros_like(w)
    m_b = v_b = 0.0
    n = len(y)
    for t in range(1, epochs + 1):
        p = expit(x @ w + b)
        r = sample_w * (p - y) / n
        g_w, g_b = x.T @ r, r.sum()
        m_w = beta1 * m_w + (1 - beta1) * g_w
        v_w = beta2 * v_w + (1 - beta2) * g_w * g_w
        m_b = beta1 * m_b + (1 - beta1) * g_b
        v_b = beta2 * v_b + (1 - beta2) * g_b * g_b
        c1, c2 = 1 - beta1**t, 1 - beta2**t
        w = w - lr * (m_w / c1) / (np.sqrt(v_w / c2) + eps)
        b = b - lr * (m_b / c1) / (np.sqrt(v_b / c2) + eps)
    return PatchScorer(w, float(b))
