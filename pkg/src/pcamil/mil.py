"""Gated-attention MIL over eigenvector bags, in plain numpy.

Forward graph for one bag ``E`` (k instances x d_in):

    H     = relu(E W_f^T + b_f)                       k x d_hidden
    A_raw = (tanh(H W1^T) W2^T) * (sigmoid(H W4^T) W3^T)   k x n_heads
    A     = softmax(A_raw, axis=0)                    one distribution per head
    bag   = flatten(A^T H)                            n_heads * d_hidden, head-major
    p     = sigmoid(W5 . bag + b5)

Gradients are written out by hand; ``tests/test_mil.py`` checks them
against central finite differences.
"""

from __future__ import annotations

import copy
import csv
import io
import logging
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from pcamil.data import Label
from pcamil.errors import (
    BadMagic,
    DomainError,
    InvalidConfig,
    MissingFile,
    NonFiniteActivation,
    NonFiniteLoss,
    ShapeMismatch,
    SingleClassTrainingSet,
    TruncatedPayload,
    VersionMismatch,
)

log = logging.getLogger(__name__)

PARAM_NAMES = ("W_f", "b_f", "W1", "W4", "W2", "W3", "W5", "b5")
CHECKPOINT_THRESHOLD = 0.95
DECISION_THRESHOLD = 0.5


@dataclass(frozen=True)
class MilConfig:
    d_in: int | None = None
    d_hidden: int = 512
    d_att: int = 128
    n_heads: int = 3
    lr: float = 1e-4
    beta1: float = 0.7
    beta2: float = 0.99
    adam_eps: float = 1e-8
    epochs: int = 10
    label_smoothing: float = 0.01
    seed: int = 0

    def __post_init__(self):
        ints = ("d_hidden", "d_att", "n_heads", "epochs")
        bad = [n for n in ints if getattr(self, n) < 1]
        if self.d_in is not None and self.d_in < 1:
            bad.append("d_in")
        if not self.lr > 0 or not self.adam_eps > 0:
            bad.append("lr/adam_eps")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            bad.append("beta1/beta2")
        if not 0 <= self.label_smoothing < 0.5:
            bad.append("label_smoothing")
        if bad:
            raise InvalidConfig(f"invalid MilConfig fields: {', '.join(bad)}")

    def with_input_dim(self, d_in: int) -> "MilConfig":
        return replace(self, d_in=d_in)


@dataclass
class MilParams:
    W_f: np.ndarray
    b_f: np.ndarray
    W1: np.ndarray
    W4: np.ndarray
    W2: np.ndarray
    W3: np.ndarray
    W5: np.ndarray
    b5: np.ndarray

    def items(self):
        return ((n, getattr(self, n)) for n in PARAM_NAMES)

    def copy(self) -> "MilParams":
        return MilParams(*(getattr(self, n).copy() for n in PARAM_NAMES))

    def zeros_like(self) -> "MilParams":
        return MilParams(*(np.zeros_like(getattr(self, n)) for n in PARAM_NAMES))

    @property
    def d_in(self) -> int:
        return self.W_f.shape[1]

    def check(self, cfg: MilConfig) -> None:
        want = _param_shapes(cfg)
        for name, arr in self.items():
            if arr.shape != want[name]:
                raise ShapeMismatch(f"{name}: shape {arr.shape}, expected {want[name]}")


def _param_shapes(cfg: MilConfig) -> dict[str, tuple[int, ...]]:
    if cfg.d_in is None:
        raise InvalidConfig("MilConfig.d_in is unset")
    return {
        "W_f": (cfg.d_hidden, cfg.d_in),
        "b_f": (cfg.d_hidden,),
        "W1": (cfg.d_att, cfg.d_hidden),
        "W4": (cfg.d_att, cfg.d_hidden),
        "W2": (cfg.n_heads, cfg.d_att),
        "W3": (cfg.n_heads, cfg.d_att),
        "W5": (cfg.n_heads * cfg.d_hidden,),
        "b5": (),
    }


def init_params(cfg: MilConfig) -> MilParams:
    """Weights uniform in +-1/sqrt(fan_in), biases zero, drawn from ``cfg.seed``."""
    shapes = _param_shapes(cfg)
    rng = np.random.default_rng(cfg.seed)
    out = {}
    for name in PARAM_NAMES:
        shape = shapes[name]
        if name.startswith("b"):
            out[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[-1])
            out[name] = rng.uniform(-bound, bound, size=shape)
    return MilParams(**out)


# ---------------------------------------------------------------- forward


@dataclass
class BagOutput:
    H: np.ndarray
    A_raw: np.ndarray
    A: np.ndarray
    bag_vec: np.ndarray
    p: float
    logit: float


def feature_mlp(params: MilParams, E: np.ndarray) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] < 1 or E.shape[1] != params.d_in:
        raise ShapeMismatch(f"bag of shape {E.shape} does not match d_in={params.d_in}")
    return np.maximum(E @ params.W_f.T + params.b_f, 0.0)


def _softmax_instances(a: np.ndarray) -> np.ndarray:
    z = np.exp(a - a.max(axis=0, keepdims=True))
    return z / z.sum(axis=0, keepdims=True)


def gated_attention(params: MilParams, H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Raw gated scores and their per-head softmax over instances."""
    if H.ndim != 2 or H.shape[1] != params.W1.shape[1]:
        raise ShapeMismatch(f"H of shape {H.shape} does not match d_hidden={params.W1.shape[1]}")
    t = np.tanh(H @ params.W1.T)
    s = expit(H @ params.W4.T)
    a_raw = (t @ params.W2.T) * (s @ params.W3.T)
    return a_raw, _softmax_instances(a_raw)


def bag_probability(params: MilParams, E: np.ndarray) -> BagOutput:
    H = feature_mlp(params, E)
    a_raw, A = gated_attention(params, H)
    bag_vec = (A.T @ H).ravel()
    logit = float(params.W5 @ bag_vec + params.b5)
    if not np.isfinite(logit):
        raise NonFiniteActivation("non-finite classifier logit")
    return BagOutput(H, a_raw, A, bag_vec, float(expit(logit)), logit)


def predict(params: MilParams, bags: Sequence[np.ndarray]) -> np.ndarray:
    return np.array([bag_probability(params, E).p for E in bags])


# ---------------------------------------------------------------- loss


def class_weights(labels: Sequence[Label]) -> dict[Label, float]:
    """Inverse class frequency, normalised to mean one over the two classes."""
    labels = list(labels)
    n = len(labels)
    counts = {c: sum(1 for l in labels if l is c) for c in Label}
    if any(v == 0 for v in counts.values()):
        raise SingleClassTrainingSet("class weights need both classes present")
    inv = {c: n / counts[c] for c in Label}
    mean_inv = sum(inv.values()) / len(inv)
    return {c: inv[c] / mean_inv for c in Label}


def smoothed_target(y: int, alpha: float) -> float:
    return y * (1.0 - alpha) + alpha / 2.0


def smoothed_weighted_bce(p: float, y: Label, alpha: float, weights: dict[Label, float]) -> float:
    if not 0.0 < p < 1.0:
        raise DomainError(f"probability {p} outside (0, 1)")
    t = smoothed_target(y.y, alpha)
    return weights[y] * -(t * np.log(p) + (1.0 - t) * np.log1p(-p))


def _bce_from_logit(logit: float, t: float) -> float:
    # -[t log sigmoid(z) + (1-t) log(1-sigmoid(z))], stable for large |z|
    return t * np.logaddexp(0.0, -logit) + (1.0 - t) * np.logaddexp(0.0, logit)


def loss_and_gradients(
    params: MilParams,
    E: np.ndarray,
    y: Label,
    alpha: float,
    weights: dict[Label, float],
) -> tuple[float, MilParams, BagOutput]:
    """Loss on one bag together with its gradient for every parameter."""
    E = np.asarray(E, dtype=np.float64)
    Z = E @ params.W_f.T + params.b_f
    H = np.maximum(Z, 0.0)
    T = np.tanh(H @ params.W1.T)
    S = expit(H @ params.W4.T)
    G = T @ params.W2.T
    Q = S @ params.W3.T
    A_raw = G * Q
    A = _softmax_instances(A_raw)
    M = A.T @ H
    bag_vec = M.ravel()
    logit = float(params.W5 @ bag_vec + params.b5)
    if not np.isfinite(logit):
        raise NonFiniteActivation("non-finite classifier logit")
    p = float(expit(logit))

    w = weights[y]
    t = smoothed_target(y.y, alpha)
    loss = w * _bce_from_logit(logit, t)

    d_logit = w * (p - t)
    g_W5 = d_logit * bag_vec
    g_b5 = np.array(d_logit)
    dM = d_logit * params.W5.reshape(M.shape)
    dA = H @ dM.T
    dH = A @ dM
    dA_raw = A * (dA - np.sum(A * dA, axis=0, keepdims=True))
    dG = dA_raw * Q
    dQ = dA_raw * G
    g_W2 = dG.T @ T
    g_W3 = dQ.T @ S
    dU1 = (dG @ params.W2) * (1.0 - T * T)
    dU4 = (dQ @ params.W3) * S * (1.0 - S)
    g_W1 = dU1.T @ H
    g_W4 = dU4.T @ H
    dH += dU1 @ params.W1 + dU4 @ params.W4
    dZ = dH * (Z > 0)
    g_Wf = dZ.T @ E
    g_bf = dZ.sum(axis=0)

    grads = MilParams(g_Wf, g_bf, g_W1, g_W4, g_W2, g_W3, g_W5, g_b5)
    return float(loss), grads, BagOutput(H, A_raw, A, bag_vec, p, logit)


def gradients(params, E, y, alpha, weights) -> MilParams:
    return loss_and_gradients(params, E, y, alpha, weights)[1]


# ---------------------------------------------------------------- ADAM


@dataclass
class AdamState:
    m: MilParams
    v: MilParams
    t: int = 0

    @classmethod
    def zeros(cls, params: MilParams) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adam_step(state: AdamState, params: MilParams, grads: MilParams, cfg: MilConfig):
    """One bias-corrected ADAM update; returns new params and new state."""
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, theta in params.items():
        g = getattr(grads, name)
        if g.shape != theta.shape:
            raise ShapeMismatch(f"gradient {name}: shape {g.shape}, expected {theta.shape}")
        m = cfg.beta1 * getattr(state.m, name) + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * getattr(state.v, name) + (1.0 - cfg.beta2) * g * g
        new_p[name] = theta - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        new_m[name] = m
        new_v[name] = v
    return MilParams(**new_p), AdamState(MilParams(**new_m), MilParams(**new_v), t)


# ---------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    acc_overall: float
    acc_msi: float
    checkpointed: bool


@dataclass
class TrainResult:
    params: MilParams
    history: list[EpochRecord]
    checkpoint_epoch: int | None

    @property
    def used_fallback(self) -> bool:
        """True when no epoch met the checkpoint rule and final weights were kept."""
        return self.checkpoint_epoch is None


def _accuracies(probs: np.ndarray, ys: np.ndarray) -> tuple[float, float]:
    pred = (probs >= DECISION_THRESHOLD).astype(int)
    acc = float(np.mean(pred == ys))
    msi = ys == 1
    acc_msi = float(np.mean(pred[msi] == 1)) if msi.any() else 0.0
    return acc, acc_msi


def train_fold(
    train_bags: Sequence[tuple[np.ndarray, Label]],
    cfg: MilConfig,
    checkpoint_threshold: float = CHECKPOINT_THRESHOLD,
) -> TrainResult:
    """Train on one fold, one optimizer step per patient.

    After each epoch the training set is scored at threshold 0.5; when both
    overall and MSI accuracy exceed ``checkpoint_threshold`` the weights are
    checkpointed. The latest checkpoint is returned, or the final weights
    if the rule never fired.
    """
    if not train_bags:
        raise SingleClassTrainingSet("empty training set")
    instances = [np.asarray(E, dtype=np.float64) for E, _ in train_bags]
    labels = [lab for _, lab in train_bags]
    weights = class_weights(labels)
    d_in = instances[0].shape[1]
    if cfg.d_in is None:
        cfg = cfg.with_input_dim(d_in)
    elif cfg.d_in != d_in:
        raise ShapeMismatch(f"bags have d_in={d_in}, config says {cfg.d_in}")

    params = init_params(cfg)
    state = AdamState.zeros(params)
    ys = np.array([lab.y for lab in labels])
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))

    history = []
    best, best_epoch = None, None
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for i in rng.permutation(len(instances)):
            loss, grads, _ = loss_and_gradients(
                params, instances[i], labels[i], cfg.label_smoothing, weights
            )
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"epoch {epoch}, patient index {i}: loss={loss}")
            params, state = adam_step(state, params, grads, cfg)
            total += loss
        acc, acc_msi = _accuracies(predict(params, instances), ys)
        hit = acc > checkpoint_threshold and acc_msi > checkpoint_threshold
        if hit:
            best, best_epoch = params.copy(), epoch
        history.append(EpochRecord(epoch, total / len(instances), acc, acc_msi, hit))
        log.debug("epoch %d loss %.5f acc %.3f acc_msi %.3f", epoch, total / len(instances), acc, acc_msi)

    if best is None:
        log.info("checkpoint rule never fired; using final-epoch parameters")
        return TrainResult(params, history, None)
    return TrainResult(best, history, best_epoch)


def history_csv(history: Sequence[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss", "acc_overall", "acc_msi"])
    for h in history:
        w.writerow([h.epoch, repr(h.loss), repr(h.acc_overall), repr(h.acc_msi)])
    return buf.getvalue()


# ---------------------------------------------------------------- checkpoints

MODEL_MAGIC = b"MILM"
MODEL_VERSION = 1
# d_in, d_hidden, d_att, n_heads, epochs, seed, lr, beta1, beta2, adam_eps, label_smoothing
_CFG = struct.Struct("<IIIIIqddddd")


def save_checkpoint(params: MilParams, cfg: MilConfig, path) -> None:
    """Binary model file: magic, version, config, then each tensor.

    Tensors are written in ``PARAM_NAMES`` order as ``ndim`` (u32), the
    dims (u32 each) and a binary64 LE payload.
    """
    if cfg.d_in is None:
        cfg = cfg.with_input_dim(params.d_in)
    params.check(cfg)
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC + struct.pack("<I", MODEL_VERSION))
        fh.write(
            _CFG.pack(
                cfg.d_in, cfg.d_hidden, cfg.d_att, cfg.n_heads, cfg.epochs, cfg.seed,
                cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.label_smoothing,
            )
        )
        for _, arr in params.items():
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[MilParams, MilConfig]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise BadMagic(f"{path}: bad magic {raw[:4]!r}")
    try:
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != MODEL_VERSION:
            raise VersionMismatch(f"{path}: version {version}, expected {MODEL_VERSION}")
        vals = _CFG.unpack_from(raw, 8)
        cfg = MilConfig(
            d_in=vals[0], d_hidden=vals[1], d_att=vals[2], n_heads=vals[3], epochs=vals[4],
            seed=vals[5], lr=vals[6], beta1=vals[7], beta2=vals[8], adam_eps=vals[9],
            label_smoothing=vals[10],
        )
        off = 8 + _CFG.size
        tensors = {}
        for name in PARAM_NAMES:
            (ndim,) = struct.unpack_from("<I", raw, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            if off + 8 * count > len(raw):
                raise TruncatedPayload(f"{path}: tensor {name} truncated")
            tensors[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
            off += 8 * count
    except struct.error as exc:
        raise TruncatedPayload(f"{path}: {exc}") from None
    params = MilParams(**tensors)
    params.check(cfg)
    return params, cfg
