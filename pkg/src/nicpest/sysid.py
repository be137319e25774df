"""Subspace identification and simulation of discrete-time LTI models.

Implements MOESP-style identification: block-Hankel matrices of inputs
and outputs, an LQ factorization, SVD of the output row-space projection
for the extended observability matrix, and a least-squares pass for the
input maps. Models follow the recursion

    x[n+1] = A x[n] + B u[n]
    y[n]   = C x[n] + D u[n]

with x[0] = 0 in every simulation performed by this package.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.linalg
import scipy.signal

from .errors import AllNegligible, RankDeficientInput, UnstableModel

_SV_FLOOR = 1e-12          # absolute singular-value detection floor
_SV_GAP_FLOOR = 1e-10      # relative floor for order candidates
_EXCITATION_RTOL = 1e-8    # input Hankel rank tolerance
_RADIUS_REJECT = 1.05      # spectral radius above which a model is rejected
_RADIUS_TARGET = 0.999     # radial projection target for marginal models


class OrderRule(str, Enum):
    SVD_GAP = "svd_gap"
    FIXED = "fixed"


@dataclass(frozen=True)
class IdentConfig:
    max_order: int = 10
    hankel_rows: int = 20
    order_rule: OrderRule = OrderRule.SVD_GAP

    def __post_init__(self) -> None:
        if not 1 <= self.max_order <= self.hankel_rows:
            raise ValueError("require 1 <= max_order <= hankel_rows")

    def to_dict(self) -> dict:
        return {
            "max_order": self.max_order,
            "hankel_rows": self.hankel_rows,
            "order_rule": self.order_rule.value,
        }

    @staticmethod
    def from_dict(d: dict) -> "IdentConfig":
        return IdentConfig(
            max_order=int(d["max_order"]),
            hankel_rows=int(d["hankel_rows"]),
            order_rule=OrderRule(d.get("order_rule", "svd_gap")),
        )


@dataclass
class StateSpaceModel:
    """State-space realization with its sample rate and provenance tag."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    fs: float
    source_entry_id: str = ""

    def __post_init__(self) -> None:
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.D = np.atleast_2d(np.asarray(self.D, dtype=float))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError("A must be square")
        if self.B.shape[0] != n or self.C.shape[1] != n:
            raise ValueError("B/C dimensions inconsistent with A")
        if self.D.shape != (self.C.shape[0], self.B.shape[1]):
            raise ValueError("D dimensions inconsistent with B/C")

    @property
    def order(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.B.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.C.shape[0]

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.A))))

    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "A": [[float(v) for v in row] for row in self.A],
            "B": [[float(v) for v in row] for row in self.B],
            "C": [[float(v) for v in row] for row in self.C],
            "D": [[float(v) for v in row] for row in self.D],
            "fs": float(self.fs),
            "source_entry_id": self.source_entry_id,
        }

    @staticmethod
    def from_dict(d: dict) -> "StateSpaceModel":
        m = StateSpaceModel(
            A=np.array(d["A"], dtype=float),
            B=np.array(d["B"], dtype=float),
            C=np.array(d["C"], dtype=float),
            D=np.array(d["D"], dtype=float),
            fs=float(d["fs"]),
            source_entry_id=d.get("source_entry_id", ""),
        )
        if m.order != int(d["order"]):
            raise ValueError("serialized order does not match A")
        return m


def _block_hankel(x: np.ndarray, rows: int) -> np.ndarray:
    """Stack ``rows`` shifted copies of a (channels, T) signal.

    Block row i holds x[:, i : i + T - rows + 1].
    """
    c, T = x.shape
    ncols = T - rows + 1
    view = np.lib.stride_tricks.sliding_window_view(x, ncols, axis=1)
    # view: (c, rows, ncols) -> (rows, c, ncols) -> (rows * c, ncols)
    return np.ascontiguousarray(view.transpose(1, 0, 2)).reshape(rows * c, ncols)


def select_order(singular_values: np.ndarray, cfg: IdentConfig) -> int:
    """Pick a model order from the projection singular values.

    SVD_GAP takes the largest ratio s_i / s_{i+1} over candidate orders
    i <= max_order whose s_i clears a relative floor; FIXED returns
    max_order capped at the number of values.
    """
    s = np.asarray(singular_values, dtype=float)
    if s.ndim != 1 or len(s) == 0:
        raise ValueError("singular values must be a non-empty 1-d array")
    if np.any(np.diff(s) > 0) or np.any(s < 0):
        raise ValueError("singular values must be non-negative and non-increasing")
    if s[0] < _SV_FLOOR:
        raise AllNegligible("all singular values below 1e-12")
    if cfg.order_rule is OrderRule.FIXED:
        return min(cfg.max_order, len(s))
    limit = min(cfg.max_order, len(s))
    eligible = [i for i in range(1, limit + 1) if s[i - 1] > _SV_GAP_FLOOR * s[0]]
    ratio_candidates = [i for i in eligible if i < len(s)]
    if not ratio_candidates:
        return eligible[-1]
    with np.errstate(divide="ignore"):
        ratios = [s[i - 1] / s[i] if s[i] > 0 else np.inf for i in ratio_candidates]
    return ratio_candidates[int(np.argmax(ratios))]


def _project_stable(A: np.ndarray) -> np.ndarray:
    """Radially project marginal eigenvalues to the stability target."""
    lam, V = np.linalg.eig(A)
    mags = np.abs(lam)
    scale = np.where(mags >= 1.0, _RADIUS_TARGET / np.maximum(mags, 1e-300), 1.0)
    lam = lam * scale
    A_new = V @ np.diag(lam) @ np.linalg.inv(V)
    return np.real(A_new)


def _zero_model(m: int, fs: float, u: np.ndarray, y: np.ndarray) -> StateSpaceModel:
    # Output carries no detectable dynamics; keep a static map only.
    D, *_ = np.linalg.lstsq(u.T, y.T, rcond=None)
    return StateSpaceModel(
        A=np.zeros((1, 1)), B=np.zeros((1, m)),
        C=np.zeros((1, 1)), D=D.T, fs=fs,
    )


def _modal(A: np.ndarray):
    """Eigendecomposition usable for simulation, or None if ill-conditioned."""
    lam, V = np.linalg.eig(A)
    try:
        Vinv = np.linalg.inv(V)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(Vinv)):
        return None
    if np.linalg.cond(V) > 1e9:
        return None
    return lam, V, Vinv


def simulate(model: StateSpaceModel, u: np.ndarray,
             x0: np.ndarray | None = None) -> np.ndarray:
    """Run the state recursion over an input matrix u of shape (m, T).

    Returns y with shape (p, T). The initial state defaults to zero.
    Diagonalizable A is simulated per mode with one-pole IIR filters;
    a direct time loop covers the defective fallback.
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    m, T = u.shape
    if m != model.n_inputs:
        raise ValueError(f"input has {m} channels, model expects {model.n_inputs}")
    n = model.order
    if x0 is None:
        x0 = np.zeros(n)
    x0 = np.asarray(x0, dtype=float).reshape(n)
    dec = _modal(model.A)
    if dec is not None:
        lam, V, Vinv = dec
        drive = (Vinv @ model.B) @ u                      # (n, T) complex
        z = np.empty((n, T), dtype=complex)
        for i in range(n):
            filt = scipy.signal.lfilter([1.0], [1.0, -lam[i]], drive[i])
            z[i, 0] = 0.0
            z[i, 1:] = filt[:-1]
        if np.any(x0):
            z0 = Vinv @ x0
            # homogeneous response lam**t folded in per mode
            t = np.arange(T)
            for i in range(n):
                z[i] += z0[i] * lam[i] ** t
        y = np.real((model.C @ V) @ z) + model.D @ u
        if np.all(np.isfinite(y)):
            return y
    # Fallback: direct recursion.
    x = x0.copy()
    y = np.empty((model.n_outputs, T))
    A, B, C, D = model.A, model.B, model.C, model.D
    for t in range(T):
        y[:, t] = C @ x + D @ u[:, t]
        x = A @ x + B @ u[:, t]
    return y


def impulse_response(model: StateSpaceModel, length: int) -> np.ndarray:
    """First ``length`` impulse-response samples per input, shape (m, length).

    h_j[0] = D[:, j], h_j[k] = C A^{k-1} B[:, j] (single-output models).
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    if model.n_outputs != 1:
        raise ValueError("impulse_response supports single-output models")
    h = np.empty((model.n_inputs, length))
    h[:, 0] = model.D[0]
    W = model.B.copy()
    for k in range(1, length):
        h[:, k] = (model.C @ W)[0]
        W = model.A @ W
    return h


def markov_parameters(model: StateSpaceModel, count: int) -> np.ndarray:
    """Markov parameter stack [D, CB, CAB, ...], shape (count, p, m)."""
    out = np.empty((count, model.n_outputs, model.n_inputs))
    out[0] = model.D
    W = model.B.copy()
    for k in range(1, count):
        out[k] = model.C @ W
        W = model.A @ W
    return out


def identify(u: np.ndarray, y: np.ndarray, cfg: IdentConfig,
             fs: float = 400.0, source_entry_id: str = "") -> StateSpaceModel:
    """Identify a state-space model from one input/output record.

    u: (m, T) inputs, y: (1, T) output, both at sample rate ``fs``.
    Raises RankDeficientInput when the input block Hankel loses rank,
    UnstableModel when the estimated dynamics matrix has spectral
    radius >= 1.05. Spectral radii in [1.0, 1.05) are radially
    projected to 0.999 so every returned model is simulation stable.
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    m, T = u.shape
    p, Ty = y.shape
    if Ty != T:
        raise ValueError("u and y must share the time axis")
    if p != 1:
        raise ValueError("single-output identification only")
    k = cfg.hankel_rows
    if T < 10 * k:
        raise ValueError(f"record too short: T={T} < 10 * hankel_rows={10 * k}")

    U = _block_hankel(u, k)
    Y = _block_hankel(y, k)
    H = np.vstack([U, Y])
    # LQ factorization via QR of the transpose.
    R = np.linalg.qr(H.T, mode="r")
    L = R.T
    km = k * m
    L11 = L[:km, :km]
    L22 = L[km:, km:]

    s_in = np.linalg.svd(L11, compute_uv=False)
    if s_in[0] <= 0 or s_in[-1] < _EXCITATION_RTOL * s_in[0]:
        raise RankDeficientInput(
            f"input Hankel rank deficient (sv ratio {s_in[-1] / max(s_in[0], 1e-300):.2e})")

    Us, s, _ = np.linalg.svd(L22)
    if s[0] < _SV_FLOOR:
        return _zero_model(m, fs, u, y)

    eff_cfg = cfg
    cap = min(cfg.max_order, k - 1) if k > 1 else 1
    if cap < cfg.max_order:
        eff_cfg = IdentConfig(max_order=cap, hankel_rows=k, order_rule=cfg.order_rule)
    n = select_order(s, eff_cfg)

    gamma = Us[:, :n] * np.sqrt(s[:n])
    C = gamma[:p].copy()
    A, *_ = np.linalg.lstsq(gamma[:-p], gamma[p:], rcond=None)

    radius = float(np.max(np.abs(np.linalg.eigvals(A))))
    if radius >= _RADIUS_REJECT:
        raise UnstableModel(f"spectral radius {radius:.4f} >= {_RADIUS_REJECT}")
    if radius >= 1.0:
        A = _project_stable(A)

    B, D = _input_maps(A, C, u, y)
    return StateSpaceModel(A=A, B=B, C=C, D=D, fs=fs,
                           source_entry_id=source_entry_id)


def _input_maps(A: np.ndarray, C: np.ndarray, u: np.ndarray,
                y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares estimate of B, D (and a discarded x0) given A, C.

    The output is linear in (B, D, x0); regressors for each B entry are
    unit-drive state responses, built from one-pole modal filters.
    """
    n = A.shape[0]
    m, T = u.shape
    dec = _modal(A)
    if dec is None:
        # Rare defective fallback: propagate unit responses directly.
        regs_B = np.empty((T, n * m))
        resp = np.empty(T)
        for l in range(n):
            basis = np.zeros(n)
            basis[l] = 1.0
            for j in range(m):
                x = np.zeros(n)
                for t in range(T):
                    resp[t] = (C @ x)[0]
                    x = A @ x + basis * u[j, t]
                regs_B[:, l * m + j] = resp
        powers = np.empty((T, n))
        W = np.eye(n)
        for t in range(T):
            powers[t] = (C @ W)[0]
            W = W @ A
    else:
        lam, V, Vinv = dec
        CV = (C @ V)[0]                                  # (n,) complex
        # modal filter of each input channel, delayed one step
        filt = np.empty((n, m, T), dtype=complex)
        for i in range(n):
            for j in range(m):
                f = scipy.signal.lfilter([1.0], [1.0, -lam[i]], u[j])
                filt[i, j, 0] = 0.0
                filt[i, j, 1:] = f[:-1]
        regs_B = np.empty((T, n * m))
        for l in range(n):
            coef = CV * Vinv[:, l]                       # (n,) complex
            for j in range(m):
                regs_B[:, l * m + j] = np.real(coef @ filt[:, j, :])
        t_idx = np.arange(T)
        lam_pow = np.power(lam[:, None], t_idx[None, :])
        powers = np.real((CV[:, None] * lam_pow).T @ Vinv)  # (T, n)

    M = np.hstack([regs_B, u.T, powers])
    theta, *_ = np.linalg.lstsq(M, y[0], rcond=None)
    B = theta[: n * m].reshape(n, m)
    D = theta[n * m: n * m + m].reshape(1, m)
    return B, D
