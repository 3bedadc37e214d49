"""Linear zero-shot model, its three losses, analytic gradients and SGD.

The model has three parts:

* encoder ``f``: ``v = max(W_f.T @ x, 0)`` (stand-in for a CNN backbone)
* attribute regressor ``g``: ``a_hat = W_g.T @ v + b_g``
* feature generator ``h``: ``v_hat = W_h.T @ a + b_h``

Class scores are dot products ``a_hat . a_j`` against the attribute table.
Batch functions work on class *row positions* of the table; the single-sample
helpers accept class ids.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from fedzsl.data import AttributeTable
from fedzsl.rng import stream

PARAM_NAMES = ("w_f", "w_g", "b_g", "w_h", "b_h")


class BatchError(ValueError):
    """Raised for an empty batch, e.g. when FMD discarded every sample."""


@dataclass(eq=False)
class ZslParams:
    w_f: np.ndarray  # (d_in, d_v)
    w_g: np.ndarray  # (d_v, d_a)
    b_g: np.ndarray  # (d_a,)
    w_h: np.ndarray  # (d_a, d_v)
    b_h: np.ndarray  # (d_v,)

    def __post_init__(self) -> None:
        d_in, d_v = self.w_f.shape
        if self.w_g.shape[0] != d_v or self.w_h.shape != (self.w_g.shape[1], d_v):
            raise ValueError("inconsistent parameter shapes")
        if self.b_g.shape != (self.w_g.shape[1],) or self.b_h.shape != (d_v,):
            raise ValueError("inconsistent bias shapes")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.w_f.shape[0], self.w_f.shape[1], self.w_g.shape[1]

    def arrays(self) -> Iterator[np.ndarray]:
        for name in PARAM_NAMES:
            yield getattr(self, name)

    def copy(self) -> ZslParams:
        return ZslParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self) -> ZslParams:
        return ZslParams(*(np.zeros_like(a) for a in self.arrays()))

    def __add__(self, other: ZslParams) -> ZslParams:
        return ZslParams(*(a + b for a, b in zip(self.arrays(), other.arrays())))

    def __sub__(self, other: ZslParams) -> ZslParams:
        return ZslParams(*(a - b for a, b in zip(self.arrays(), other.arrays())))

    def __mul__(self, scalar: float) -> ZslParams:
        return ZslParams(*(a * scalar for a in self.arrays()))

    __rmul__ = __mul__

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def equals(self, other: ZslParams) -> bool:
        """Bitwise equality of every array."""
        return all(a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(self.arrays(), other.arrays()))


def init_params(d_in: int, d_v: int, d_a: int, seed: int, scale: float = 0.1) -> ZslParams:
    """Identity encoder when ``d_in == d_v`` (raw features pass through), else Gaussian."""
    rng = stream(seed, "init")
    if d_in == d_v:
        w_f = np.eye(d_in)
    else:
        w_f = rng.normal(size=(d_in, d_v)) / np.sqrt(d_in)
    w_g = scale * rng.normal(size=(d_v, d_a)) / np.sqrt(d_v)
    w_h = scale * rng.normal(size=(d_a, d_v)) / np.sqrt(d_a)
    return ZslParams(w_f, w_g, np.zeros(d_a), w_h, np.zeros(d_v))


def save_params(params: ZslParams, path: str | Path) -> None:
    """Write a checkpoint: an ``.npz`` with one float64 array per parameter plus
    ``header = [d_in, d_v, d_a]``."""
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(params.dims, dtype=np.int64), **{n: getattr(params, n) for n in PARAM_NAMES})


def load_params(path: str | Path) -> ZslParams:
    with np.load(path) as z:
        d_in, d_v, d_a = (int(v) for v in z["header"])
        params = ZslParams(*(np.array(z[n], dtype=np.float64) for n in PARAM_NAMES))
    if params.dims != (d_in, d_v, d_a):
        raise ValueError(f"{path}: header dims {(d_in, d_v, d_a)} disagree with arrays {params.dims}")
    return params


@dataclass(frozen=True)
class Hyper:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    mu: float = 3.0
    tau: float = 10.0
    batch_size: int = 64
    local_epochs: int = 2
    train_encoder: bool = True

    def __post_init__(self) -> None:
        if self.lr <= 0 or self.tau <= 0 or self.mu < 0:
            raise ValueError("need lr > 0, tau > 0, mu >= 0")
        if self.batch_size < 1 or self.local_epochs < 0:
            raise ValueError("need batch_size >= 1 and local_epochs >= 0")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("need 0 <= momentum < 1 and weight_decay >= 0")


@dataclass
class LossBreakdown:
    total: float
    sce: float
    kl: float
    con: float


@dataclass(eq=False)
class Gradients:
    params: ZslParams
    components: dict[str, ZslParams] = field(default_factory=dict)


# ------------------------------------------------------------- single sample


def encode(params: ZslParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.w_f.shape[0]:
        raise ValueError(f"input has dimension {x.shape[-1]}, encoder expects {params.w_f.shape[0]}")
    return np.maximum(x @ params.w_f, 0.0)


def regress_attributes(params: ZslParams, v: np.ndarray) -> np.ndarray:
    return np.asarray(v) @ params.w_g + params.b_g


def class_logits(a_hat: np.ndarray, table: AttributeTable, space: Sequence[int]) -> np.ndarray:
    if len(space) == 0:
        raise ValueError("empty class space")
    return table.rows[table.positions(space)] @ np.asarray(a_hat)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def soften(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    if tau <= 0:
        raise ValueError("tau must be positive")
    return np.exp(_log_softmax(np.asarray(logits, dtype=np.float64) / tau))


def loss_sce(a_hat: np.ndarray, y: int, table: AttributeTable, space: Sequence[int]) -> float:
    space = list(space)
    if y not in space:
        raise ValueError(f"label {y} not in class space")
    z = class_logits(a_hat, table, space)
    return float(-_log_softmax(z)[space.index(y)])


def loss_kl(student_logits: np.ndarray, sigma_row: np.ndarray, tau: float) -> float:
    """``tau**2 * KL(softmax(sigma_row/tau) || softmax(student_logits/tau))``."""
    student_logits = np.asarray(student_logits, dtype=np.float64)
    sigma_row = np.asarray(sigma_row, dtype=np.float64)
    if student_logits.shape != sigma_row.shape:
        raise ValueError("student logits and similarity row differ in length")
    log_t = _log_softmax(sigma_row / tau)
    log_s = _log_softmax(student_logits / tau)
    return float(tau**2 * np.sum(np.exp(log_t) * (log_t - log_s)))


def generate_features(params: ZslParams, a: np.ndarray) -> np.ndarray:
    return np.asarray(a) @ params.w_h + params.b_h


def loss_consistency(params: ZslParams, x: np.ndarray, a_y: np.ndarray) -> float:
    """Unsquared Euclidean distance between generated and encoded features."""
    return float(np.linalg.norm(generate_features(params, a_y) - encode(params, x)))


# -------------------------------------------------------------------- batches


def _forward_backward(
    params: ZslParams,
    X: np.ndarray,
    pos: np.ndarray,
    table: AttributeTable,
    sigma: np.ndarray | None,
    hyper: Hyper,
    space_pos: np.ndarray,
    need_grad: bool,
) -> tuple[LossBreakdown, Gradients | None]:
    B = X.shape[0]
    if B == 0:
        raise BatchError("empty batch")
    A = table.rows
    Z = X @ params.w_f
    V = np.maximum(Z, 0.0)
    a_hat = V @ params.w_g + params.b_g
    logits = a_hat @ A.T  # (B, |Y|)

    # semantic cross-entropy over the configured class space
    col = np.searchsorted(space_pos, pos)
    if np.any(col >= len(space_pos)) or np.any(space_pos[np.minimum(col, len(space_pos) - 1)] != pos):
        raise ValueError("batch label outside the class space")
    ls = _log_softmax(logits[:, space_pos])
    sce = -ls[np.arange(B), col]

    # relation distillation over the full class set
    mu, tau = hyper.mu, hyper.tau
    if mu > 0:
        if sigma is None:
            raise ValueError("distillation needs a similarity matrix")
        log_t = _log_softmax(sigma[pos] / tau)
        log_s = _log_softmax(logits / tau)
        p_t = np.exp(log_t)
        kl = tau**2 * np.sum(p_t * (log_t - log_s), axis=1)
    else:
        kl = np.zeros(B)

    # semantic consistency
    A_y = A[pos]
    R = A_y @ params.w_h + params.b_h - V
    norms = np.sqrt(np.sum(R * R, axis=1))
    con = norms

    losses = LossBreakdown(
        total=float(sce.mean() + mu * kl.mean() + con.mean()),
        sce=float(sce.mean()),
        kl=float(kl.mean()),
        con=float(con.mean()),
    )
    if not need_grad:
        return losses, None

    # d/dlogits of the SCE term
    d_logits_sce = np.zeros_like(logits)
    probs = np.exp(ls)
    probs[np.arange(B), col] -= 1.0
    d_logits_sce[:, space_pos] = probs / B
    if mu > 0:
        d_logits_kl = mu * tau * (np.exp(log_s) - p_t) / B
    else:
        d_logits_kl = np.zeros_like(logits)

    safe = np.where(norms > 0, norms, 1.0)
    d_R = np.where(norms[:, None] > 0, R / safe[:, None], 0.0) / B

    def through_g(d_logits: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        d_a = d_logits @ A
        return V.T @ d_a, d_a.sum(axis=0), d_a @ params.w_g.T

    gw_sce, gb_sce, dv_sce = through_g(d_logits_sce)
    gw_kl, gb_kl, dv_kl = through_g(d_logits_kl)
    dv_con = -d_R
    mask = Z > 0
    zero_f = np.zeros_like(params.w_f)
    zero_g, zero_bg = np.zeros_like(params.w_g), np.zeros_like(params.b_g)
    zero_h, zero_bh = np.zeros_like(params.w_h), np.zeros_like(params.b_h)

    def wf_grad(dv: np.ndarray) -> np.ndarray:
        return X.T @ (dv * mask) if hyper.train_encoder else zero_f

    comp = {
        "sce": ZslParams(wf_grad(dv_sce), gw_sce, gb_sce, zero_h, zero_bh),
        "kl": ZslParams(wf_grad(dv_kl), gw_kl, gb_kl, zero_h, zero_bh),
        "con": ZslParams(wf_grad(dv_con), zero_g, zero_bg, A_y.T @ d_R, d_R.sum(axis=0)),
    }
    total = ZslParams(
        wf_grad(dv_sce + dv_kl + dv_con),
        gw_sce + gw_kl,
        gb_sce + gb_kl,
        comp["con"].w_h,
        comp["con"].b_h,
    )
    return losses, Gradients(total, comp)


def _space_positions(table: AttributeTable, space: Sequence[int] | None) -> np.ndarray:
    if space is None:
        return np.arange(table.n_classes)
    return np.unique(table.positions(space))


def loss_total(
    params: ZslParams,
    X: np.ndarray,
    labels: np.ndarray,
    table: AttributeTable,
    sigma: np.ndarray | None,
    hyper: Hyper,
    space: Sequence[int] | None = None,
) -> LossBreakdown:
    """Batch-mean ``sce + mu * kl + con``; ``space=None`` means all classes."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    pos = table.positions(labels)
    losses, _ = _forward_backward(params, X, pos, table, sigma, hyper, _space_positions(table, space), False)
    return losses


def grad(
    params: ZslParams,
    X: np.ndarray,
    labels: np.ndarray,
    table: AttributeTable,
    sigma: np.ndarray | None,
    hyper: Hyper,
    space: Sequence[int] | None = None,
) -> tuple[Gradients, LossBreakdown]:
    """Exact gradient of ``loss_total``; rectifier and norm kinks take subgradient 0."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    pos = table.positions(labels)
    losses, g = _forward_backward(params, X, pos, table, sigma, hyper, _space_positions(table, space), True)
    assert g is not None
    return g, losses


def grad_positions(
    params: ZslParams,
    X: np.ndarray,
    pos: np.ndarray,
    table: AttributeTable,
    sigma: np.ndarray | None,
    hyper: Hyper,
    space_pos: np.ndarray,
) -> tuple[Gradients, LossBreakdown]:
    losses, g = _forward_backward(params, X, pos, table, sigma, hyper, space_pos, True)
    assert g is not None
    return g, losses


def sgd_step(params: ZslParams, momentum: ZslParams, grads: ZslParams, hyper: Hyper) -> ZslParams:
    """Classic momentum with weight decay folded into the gradient, in place.

    ``g' = g + wd * p``; ``buf = m * buf + g'``; ``p -= lr * buf``.
    """
    for f in fields(params):
        if f.name == "w_f" and not hyper.train_encoder:
            continue
        p = getattr(params, f.name)
        buf = getattr(momentum, f.name)
        g = getattr(grads, f.name) + hyper.weight_decay * p
        buf *= hyper.momentum
        buf += g
        p -= hyper.lr * buf
    return params
