"""Twice-differentiable models with exact gradients and Hessian-vector products.

Three kinds share a flat parameter vector ``theta``:

* ``ridge``    -- linear scores, half squared error against one-hot targets.
* ``logistic`` -- linear scores, softmax cross-entropy.
* ``mlp2``     -- one tanh hidden layer, softmax cross-entropy.

Linear kinds store ``W`` (K x p, row-major) followed by ``b`` (K). ``mlp2``
stores ``W1`` (h x p), ``b1`` (h), ``W2`` (K x h), ``b2`` (K).

The per-sample loss includes the L2 term ``(l2/2)*||theta||**2``, so a batch
mean of per-sample gradients equals the batch objective gradient and every
Hessian carries ``+ l2*I``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Union

import numpy as np

from .data import STREAM_INIT
from .errors import FormatError, PreconditionError
from .numkit import Rng, fnv1a64, hex_digest, min_eigenvalue, power_iteration

KINDS = ("ridge", "logistic", "mlp2")
HESSIAN_CAP = 8192
M_SAFETY = 1.05


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    classes: int
    hidden: int = 0
    l2: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PreconditionError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.input_dim < 1 or self.classes < 1:
            raise PreconditionError("input_dim and classes must be >= 1")
        if self.kind == "mlp2" and self.hidden < 1:
            raise PreconditionError("mlp2 needs hidden >= 1")
        if self.l2 < 0:
            raise PreconditionError("l2 must be >= 0")

    @property
    def d(self) -> int:
        p, K, h = self.input_dim, self.classes, self.hidden
        if self.kind == "mlp2":
            return h * (p + 1) + K * (h + 1)
        return K * (p + 1)

    parameter_count = d


@dataclass(frozen=True, eq=False)
class Params:
    theta: np.ndarray
    spec: ModelSpec

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64)
        if theta.shape != (self.spec.d,):
            raise PreconditionError(f"theta has shape {theta.shape}, spec needs ({self.spec.d},)")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    def with_theta(self, theta) -> "Params":
        return Params(theta, self.spec)

    def to_bytes(self) -> bytes:
        s = self.spec
        head = b"HFPW" + struct.pack("<IIQQQdQ", 1, KINDS.index(s.kind), s.input_dim, s.classes, s.hidden, s.l2, s.d)
        return head + self.theta.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes, offset: int = 0) -> tuple["Params", int]:
        """Parse one serialized record; returns ``(params, next_offset)``."""
        hsize = 4 + struct.calcsize("<IIQQQdQ")
        if len(raw) - offset < hsize:
            raise FormatError("truncated parameter header")
        if raw[offset : offset + 4] != b"HFPW":
            raise FormatError("bad parameter magic")
        version, kind, p, K, h, l2, d = struct.unpack_from("<IIQQQdQ", raw, offset + 4)
        if version != 1 or kind >= len(KINDS):
            raise FormatError(f"unsupported parameter record (version {version}, kind {kind})")
        spec = ModelSpec(KINDS[kind], p, K, h, l2)
        if spec.d != d:
            raise FormatError("parameter count does not match spec")
        start = offset + hsize
        if len(raw) - start < 8 * d:
            raise FormatError("truncated parameter payload")
        theta = np.frombuffer(raw, dtype="<f8", count=d, offset=start).astype(np.float64)
        return cls(theta, spec), start + 8 * d

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Params":
        params, _ = cls.from_bytes(Path(path).read_bytes())
        return params

    @property
    def digest(self) -> str:
        return hex_digest(fnv1a64(self.to_bytes()))


def init_params(spec: ModelSpec, seed: int = 0) -> Params:
    """Uniform in +-1/sqrt(fan_in) per layer, from the seed's init stream."""
    rng = Rng(seed).stream(STREAM_INIT)
    u = 2.0 * rng.uniform_array(spec.d) - 1.0
    p, h = spec.input_dim, spec.hidden
    if spec.kind == "mlp2":
        scale = np.empty(spec.d)
        n1 = h * (p + 1)
        scale[:n1] = 1.0 / math.sqrt(p)
        scale[n1:] = 1.0 / math.sqrt(h)
    else:
        scale = 1.0 / math.sqrt(p)
    return Params(u * scale, spec)


def _check_X(spec: ModelSpec, X, y=None, allow_empty=False):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise PreconditionError(f"features have shape {X.shape}, model expects (*, {spec.input_dim})")
    if X.shape[0] == 0 and not allow_empty:
        raise PreconditionError("empty example list")
    if y is None:
        return X, None
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape != (X.shape[0],):
        raise PreconditionError("labels do not match features")
    if y.size and (y.min() < 0 or y.max() >= spec.classes):
        raise PreconditionError("label out of range")
    return X, y


def _split(spec: ModelSpec, theta: np.ndarray):
    p, K, h = spec.input_dim, spec.classes, spec.hidden
    if spec.kind == "mlp2":
        i = 0
        W1 = theta[i : i + h * p].reshape(h, p); i += h * p
        b1 = theta[i : i + h]; i += h
        W2 = theta[i : i + K * h].reshape(K, h); i += K * h
        b2 = theta[i : i + K]
        return W1, b1, W2, b2
    return theta[: K * p].reshape(K, p), theta[K * p :]


def _split_many(spec: ModelSpec, V: np.ndarray):
    k = V.shape[0]
    p, K, h = spec.input_dim, spec.classes, spec.hidden
    if spec.kind == "mlp2":
        i = 0
        V1 = V[:, i : i + h * p].reshape(k, h, p); i += h * p
        c1 = V[:, i : i + h]; i += h
        V2 = V[:, i : i + K * h].reshape(k, K, h); i += K * h
        c2 = V[:, i : i + K]
        return V1, c1, V2, c2
    return V[:, : K * p].reshape(k, K, p), V[:, K * p :]


def _softmax(S):
    Z = S - S.max(axis=-1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=-1, keepdims=True)


def _one_hot(y, K):
    Y = np.zeros((y.shape[0], K))
    Y[np.arange(y.shape[0]), y] = 1.0
    return Y


class _Forward(NamedTuple):
    S: np.ndarray  # scores (m, K)
    A: Optional[np.ndarray]  # hidden activations (m, h), mlp2 only


def _forward(spec, theta, X) -> _Forward:
    if spec.kind == "mlp2":
        W1, b1, W2, b2 = _split(spec, theta)
        A = np.tanh(X @ W1.T + b1)
        return _Forward(A @ W2.T + b2, A)
    W, b = _split(spec, theta)
    return _Forward(X @ W.T + b, None)


def scores(params: Params, X) -> np.ndarray:
    X, _ = _check_X(params.spec, X)
    return _forward(params.spec, params.theta, X).S


def per_sample_losses(params: Params, X, y) -> np.ndarray:
    """Per-sample loss, each including ``(l2/2)*||theta||**2``."""
    spec = params.spec
    X, y = _check_X(spec, X, y)
    S = _forward(spec, params.theta, X).S
    if spec.kind == "ridge":
        data = 0.5 * np.sum((S - _one_hot(y, spec.classes)) ** 2, axis=1)
    else:
        smax = S.max(axis=1)
        lse = smax + np.log(np.exp(S - smax[:, None]).sum(axis=1))
        data = lse - S[np.arange(len(y)), y]
    return data + 0.5 * spec.l2 * float(params.theta @ params.theta)


def loss(params: Params, X, y) -> float:
    """Mean data loss plus ``(l2/2)*||theta||**2`` (counted once)."""
    return float(np.mean(per_sample_losses(params, X, y)))


def _residual(spec, S, y):
    Y = _one_hot(y, spec.classes)
    if spec.kind == "ridge":
        return S - Y
    return _softmax(S) - Y


def per_sample_grads(params: Params, X, y) -> np.ndarray:
    """Rows are full per-sample gradients (data term plus ``l2*theta``)."""
    spec, theta = params.spec, params.theta
    X, y = _check_X(spec, X, y)
    m = X.shape[0]
    fw = _forward(spec, theta, X)
    D2 = _residual(spec, fw.S, y)
    if spec.kind == "mlp2":
        _, _, W2, _ = _split(spec, theta)
        A = fw.A
        D1 = (D2 @ W2) * (1.0 - A * A)
        G = np.concatenate(
            [
                np.einsum("mh,mp->mhp", D1, X).reshape(m, -1),
                D1,
                np.einsum("mk,mh->mkh", D2, A).reshape(m, -1),
                D2,
            ],
            axis=1,
        )
    else:
        G = np.concatenate([np.einsum("mk,mp->mkp", D2, X).reshape(m, -1), D2], axis=1)
    if spec.l2:
        G += spec.l2 * theta
    return G


def grad(params: Params, X, y) -> np.ndarray:
    """Gradient of :func:`loss`."""
    spec, theta = params.spec, params.theta
    X, y = _check_X(spec, X, y)
    m = X.shape[0]
    fw = _forward(spec, theta, X)
    D2 = _residual(spec, fw.S, y) / m
    if spec.kind == "mlp2":
        _, _, W2, _ = _split(spec, theta)
        D1 = (D2 @ W2) * (1.0 - fw.A * fw.A)
        g = np.concatenate([(D1.T @ X).ravel(), D1.sum(0), (D2.T @ fw.A).ravel(), D2.sum(0)])
    else:
        g = np.concatenate([(D2.T @ X).ravel(), D2.sum(0)])
    return g + spec.l2 * theta


def hvp_many(params: Params, X, y, V: np.ndarray) -> np.ndarray:
    """Rows of ``V`` (k x d) multiplied by the batch Hessian.

    The Hessian is the batch mean of per-sample Hessians plus ``l2*I``; an
    empty batch leaves only the regulariser. ``mlp2`` uses forward-mode
    tangent propagation through the reverse pass, so the product is exact
    (not Gauss-Newton).
    """
    spec, theta = params.spec, params.theta
    V = np.asarray(V, dtype=np.float64)
    squeeze = V.ndim == 1
    if squeeze:
        V = V[None, :]
    if V.ndim != 2 or V.shape[1] != spec.d:
        raise PreconditionError(f"vectors have shape {V.shape}, model has d={spec.d}")
    X, y = _check_X(spec, X, y, allow_empty=True)
    m = X.shape[0]
    out = spec.l2 * V if spec.l2 else np.zeros_like(V)
    if m:
        out = out + _data_hvp(spec, theta, X, y, V) / m
    return out[0] if squeeze else out


def _data_hvp(spec, theta, X, y, V):
    """Sum (not mean) over the batch of per-sample data-term HVPs."""
    k = V.shape[0]
    fw = _forward(spec, theta, X)
    if spec.kind != "mlp2":
        VW, Vb = _split_many(spec, V)
        dS = VW @ X.T + Vb[:, :, None]  # (k, K, m)
        if spec.kind == "ridge":
            dR = dS
        else:
            P = _softmax(fw.S).T  # (K, m)
            dR = P * (dS - np.sum(P * dS, axis=1, keepdims=True))
        return np.concatenate([(dR @ X).reshape(k, -1), dR.sum(axis=2)], axis=1)

    W1, b1, W2, b2 = _split(spec, theta)
    V1, c1, V2, c2 = _split_many(spec, V)
    A = fw.A  # (m, h)
    P = _softmax(fw.S)  # (m, K)
    D2 = P - _one_hot(y, spec.classes)
    Da = D2 @ W2  # (m, h)
    gp = 1.0 - A * A
    # forward tangents
    dZ1 = X @ V1.transpose(0, 2, 1) + c1[:, None, :]  # (k, m, h)
    dA = gp * dZ1
    dS = dA @ W2.T + A @ V2.transpose(0, 2, 1) + c2[:, None, :]  # (k, m, K)
    dD2 = P * (dS - np.sum(P * dS, axis=2, keepdims=True))
    # tangents of the reverse pass
    dgW2 = dD2.transpose(0, 2, 1) @ A + D2.T @ dA  # (k, K, h)
    dgb2 = dD2.sum(axis=1)
    dDa = D2 @ V2 + dD2 @ W2  # (k, m, h)
    dD1 = dDa * gp - 2.0 * Da * A * dA
    dgW1 = dD1.transpose(0, 2, 1) @ X  # (k, h, p)
    dgb1 = dD1.sum(axis=1)
    return np.concatenate([dgW1.reshape(k, -1), dgb1, dgW2.reshape(k, -1), dgb2], axis=1)


def hvp(params: Params, X, y, v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (params.spec.d,):
        raise PreconditionError(f"vector has shape {v.shape}, model has d={params.spec.d}")
    return hvp_many(params, X, y, v[None, :])[0]


def full_hessian(params: Params, X, y, cap: int = HESSIAN_CAP, chunk: int = 256) -> np.ndarray:
    """Explicit d x d Hessian, column ``j`` = ``hvp(e_j)``."""
    d = params.spec.d
    if d > cap:
        raise PreconditionError(f"d={d} exceeds the explicit-Hessian cap of {cap}")
    H = np.empty((d, d))
    for start in range(0, d, chunk):
        stop = min(d, start + chunk)
        E = np.zeros((stop - start, d))
        E[np.arange(stop - start), np.arange(start, stop)] = 1.0
        H[:, start:stop] = hvp_many(params, X, y, E).T
    return H


def predict(params: Params, X) -> np.ndarray:
    """Argmax class; ties resolve to the lowest index."""
    return np.argmax(scores(params, X), axis=1)


@dataclass(frozen=True)
class RegularityConstants:
    lambda_min: float
    M: float
    G: float
    rho: float
    eta: float
    source: str = "estimated"

    def rho_at(self, eta: float) -> float:
        return spectral_radius(eta, self.lambda_min, self.M)


def spectral_radius(eta: float, lam: float, M: float) -> float:
    """``max(|1 - eta*lam|, |1 - eta*M|)``."""
    return max(abs(1.0 - eta * lam), abs(1.0 - eta * M))


def estimate_constants(
    params: Params,
    X,
    y,
    eta0: float,
    observed_max_grad: float,
    clip_threshold: Optional[float] = None,
    max_iters: int = 2000,
    tol: float = 1e-9,
) -> RegularityConstants:
    """Estimate lambda, M, G and rho at ``params`` over the full dataset.

    M is the power-iteration estimate inflated by 5%; lambda is the larger of
    ``l2`` and the shifted-power-iteration estimate. ``source`` becomes
    ``"estimated-unconverged"`` if either iteration stalls.
    """
    X, y = _check_X(params.spec, X, y)
    d = params.spec.d
    op = lambda v: hvp(params, X, y, v)
    top = power_iteration(op, d, max_iters=max_iters, tol=tol)
    M = M_SAFETY * top.value
    low = min_eigenvalue(op, top.value, d, max_iters=max_iters, tol=tol)
    lam = max(params.spec.l2, low.value)
    G = float(observed_max_grad)
    if clip_threshold is not None:
        G = max(G, float(clip_threshold))
    source = "estimated" if (top.converged and low.converged) else "estimated-unconverged"
    return RegularityConstants(lam, M, G, spectral_radius(eta0, lam, M), eta0, source)
