"""Estimation and fitting on measured joint counts.

Pauli expectations with binomial errors, linear inversion, maximum
likelihood reconstruction on the Cholesky cone, local-unitary overlap
maximisation, the fidelity lower and upper bounds, dark-count
correction, and the parity / Ramsey curve fits.

Counts index convention: every setting stores a (2, 2) integer array
``n[atom_outcome, photon_outcome]`` with index 0 the +1 eigenvalue and
index 1 the -1 eigenvalue of the module Pauli frames (see qcore).  In
detector language: atom index 0 = bright, 1 = dark; photon index 0 = H
port, 1 = V port.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares, minimize

from . import qcore

PAULI_AXES = (1, 2, 3)


class DomainError(ValueError):
    """Input outside the mathematical domain of a formula."""


class NonConvergenceError(RuntimeError):
    """Optimiser hit its iteration cap; carries the best iterate."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass
class CountsTable:
    """Joint counts per measurement setting (atom axis, photon axis)."""

    counts: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def add(self, atom_axis: int, photon_axis: int, cells: np.ndarray) -> None:
        cells = np.asarray(cells, dtype=float)
        if cells.shape != (2, 2) or (cells < 0).any():
            raise ValueError("cells must be a non-negative (2, 2) array")
        key = (qcore.pauli_index(atom_axis), qcore.pauli_index(photon_axis))
        if key in self.counts:
            self.counts[key] = self.counts[key] + cells
        else:
            self.counts[key] = cells

    def total(self, key) -> float:
        return float(self.counts[key].sum())

    @staticmethod
    def from_state(
        rho: np.ndarray,
        shots_per_setting: int,
        rng: np.random.Generator | None = None,
    ) -> "CountsTable":
        """Counts for all nine settings, exact or multinomially sampled.

        ``rng=None`` freezes counts at shots * exact probabilities, which
        is the deterministic input the round-trip oracles use.
        """
        table = CountsTable()
        for i in PAULI_AXES:
            for j in PAULI_AXES:
                p = qcore.joint_outcome_probabilities(
                    rho, qcore.atom_pauli(i), qcore.photon_pauli(j)
                )
                p = np.clip(p, 0.0, None)
                p = p / p.sum()
                if rng is None:
                    cells = shots_per_setting * p
                else:
                    draw = rng.multinomial(shots_per_setting, p.ravel())
                    cells = draw.reshape(2, 2).astype(float)
                table.add(i, j, cells)
        return table


@dataclass
class ExpectationSet:
    """S[i][j] with standard errors; mirrored entries are flagged."""

    s: np.ndarray
    err: np.ndarray
    mirrored: set = field(default_factory=set)

    def complete(self) -> bool:
        return not np.isnan(self.s).any()


def _setting_expectation(cells: np.ndarray) -> tuple[float, float]:
    n = cells.sum()
    corr = (cells[0, 0] + cells[1, 1] - cells[0, 1] - cells[1, 0]) / n
    return float(corr), float(np.sqrt(max(1.0 - corr**2, 0.0) / n))


def _marginal(cells: np.ndarray, axis: int) -> tuple[float, float]:
    n = cells.sum()
    m = cells.sum(axis=1 - axis)
    val = (m[0] - m[1]) / n
    return float(val), float(np.sqrt(max(1.0 - val**2, 0.0) / n))


def expectations_from_counts(table: CountsTable, *, mirror: bool = True) -> ExpectationSet:
    """Pauli expectation table from joint counts.

    Joint entries come from the matching setting; marginals pool every
    setting that measured the relevant axis.  When ``mirror`` is set,
    entries whose setting is missing are filled from the transposed one
    (the symmetry assumption used when only scan data exist).  A missing,
    unmirrorable entry is an error.
    """
    s = np.full((4, 4), np.nan)
    err = np.zeros((4, 4))
    s[0, 0] = 1.0
    for (i, j), cells in table.counts.items():
        if cells.sum() <= 0:
            raise ValueError(f"setting (atom={i}, photon={j}) has zero total")
        v, e = _setting_expectation(cells)
        if np.isnan(s[i, j]) or e < err[i, j]:
            s[i, j], err[i, j] = v, e
    # marginals pooled over settings sharing an axis
    for axis in PAULI_AXES:
        acc = [(cells, 0) for (i, j), cells in table.counts.items() if i == axis]
        if acc:
            pooled = sum(c for c, _ in acc)
            s[axis, 0], err[axis, 0] = _marginal(pooled, 0)
        acc = [cells for (i, j), cells in table.counts.items() if j == axis]
        if acc:
            pooled = sum(acc)
            s[0, axis], err[0, axis] = _marginal(pooled, 1)
    mirrored = set()
    if mirror:
        for i in PAULI_AXES:
            for j in PAULI_AXES:
                if np.isnan(s[i, j]) and not np.isnan(s[j, i]):
                    s[i, j], err[i, j] = s[j, i], err[j, i]
                    mirrored.add((i, j))
    if np.isnan(s).any():
        missing = [(i, j) for i in range(4) for j in range(4) if np.isnan(s[i, j])]
        raise ValueError(f"incomplete expectation set, missing entries {missing}")
    return ExpectationSet(s=s, err=err, mirrored=mirrored)


def linear_inversion(es: ExpectationSet) -> np.ndarray:
    """rho = (1/4) sum_ij S_ij A_i (x) B_j.  Physicality not guaranteed."""
    if not es.complete():
        raise ValueError("expectation set is incomplete")
    rho = np.zeros((4, 4), dtype=complex)
    for i in range(4):
        for j in range(4):
            rho += es.s[i, j] * qcore.kron(qcore.atom_pauli(i), qcore.photon_pauli(j))
    return rho / 4.0


def project_to_physical(rho: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Clip negative eigenvalues and renormalise; used to seed the MLE."""
    sym = (rho + rho.conj().T) / 2.0
    w, v = np.linalg.eigh(sym)
    w = np.clip(w.real, floor, None)
    w = w / w.sum()
    return (v * w) @ v.conj().T


# --- maximum likelihood -----------------------------------------------------

_DIAG = [0, 1, 2, 3]
_LOWER = [(1, 0), (2, 0), (2, 1), (3, 0), (3, 1), (3, 2)]


def _t_to_matrix(t: np.ndarray) -> np.ndarray:
    T = np.zeros((4, 4), dtype=complex)
    T[_DIAG, _DIAG] = t[:4]
    for k, (r, c) in enumerate(_LOWER):
        T[r, c] = t[4 + 2 * k] + 1j * t[5 + 2 * k]
    return T


def _matrix_to_t(T: np.ndarray) -> np.ndarray:
    t = np.zeros(16)
    t[:4] = np.real(np.diag(T))
    for k, (r, c) in enumerate(_LOWER):
        t[4 + 2 * k] = T[r, c].real
        t[5 + 2 * k] = T[r, c].imag
    return t


def _measurement_stack(keys) -> np.ndarray:
    """Projector stack (n_settings*4, 4, 4), row-major over 2x2 outcomes."""
    ops = []
    for (i, j) in keys:
        pa = qcore.eigenprojectors(qcore.atom_pauli(i))
        pp = qcore.eigenprojectors(qcore.photon_pauli(j))
        for a in (0, 1):
            for p in (0, 1):
                ops.append(qcore.kron(pa[a], pp[p]))
    return np.array(ops)


@dataclass
class MLEResult:
    rho: np.ndarray
    converged: bool
    iterations: int
    log_likelihood: float
    message: str


def mle_reconstruct(
    table: CountsTable,
    start: np.ndarray | None = None,
    *,
    max_iterations: int = 2000,
) -> MLEResult:
    """Physical density matrix maximising the multinomial likelihood.

    rho = T^dag T / Tr(T^dag T) with T lower triangular (16 real
    parameters), optimised by quasi-Newton descent with the analytic
    gradient.  Deterministic start from the physicality-projected linear
    inversion (or the given Hermitian unit-trace candidate).  The result
    is positive semidefinite with unit trace by construction.
    """
    keys = sorted(table.counts.keys())
    if not keys:
        raise ValueError("counts table is empty")
    ops = _measurement_stack(keys)
    flat = ops.reshape(len(ops), 16)
    counts = np.concatenate([table.counts[k].ravel() for k in keys])

    if start is None:
        try:
            start = linear_inversion(expectations_from_counts(table))
        except ValueError:
            start = np.eye(4, dtype=complex) / 4.0
    dev = np.abs(start - start.conj().T).max()
    if dev > 1e-8 or abs(np.trace(start).real - 1) > 1e-6:
        raise ValueError("start must be Hermitian with unit trace")
    t0 = _matrix_to_t(np.linalg.cholesky(
        project_to_physical(start) + 1e-10 * np.eye(4)
    ))

    # The epsilon keeps log finite on zero-probability outcomes while the
    # gradient stays exactly consistent with the smoothed objective.
    eps = 1e-12

    def objective(t):
        T = _t_to_matrix(t)
        S = T.conj().T @ T
        tr = S.trace().real
        rho = S / tr
        p = (flat @ rho.reshape(16)).real + eps
        ll = counts @ np.log(p)
        G = ((counts / p)[:, None] * flat).sum(0).reshape(4, 4)
        K = (G - np.trace(G @ rho).real * np.eye(4)) / tr
        P = K @ T.conj().T
        g = np.zeros(16)
        g[:4] = 2.0 * np.real(P[_DIAG, _DIAG])
        for k, (r, c) in enumerate(_LOWER):
            g[4 + 2 * k] = 2.0 * np.real(P[c, r])
            g[5 + 2 * k] = -2.0 * np.imag(P[c, r])
        return -ll, -g

    best = None
    starts = [t0]
    # second deterministic start from the maximally mixed state guards the
    # rare line-search abort on a degenerate boundary start
    starts.append(_matrix_to_t(np.linalg.cholesky(np.eye(4) / 4.0)))
    for k, s0 in enumerate(starts):
        res = minimize(objective, s0, jac=True, method="L-BFGS-B",
                       options=dict(maxiter=max_iterations, ftol=1e-14, gtol=1e-9))
        if best is None or res.fun < best.fun:
            best = res
        if best.success and k == 0:
            break
    res = best
    T = _t_to_matrix(res.x)
    S = T.conj().T @ T
    rho = S / S.trace().real
    gnorm = float(np.abs(res.jac).max()) if res.jac is not None else np.inf
    scale = max(abs(float(res.fun)), 1.0)
    converged = bool(res.success) or gnorm <= 1e-6 * scale
    return MLEResult(rho=rho, converged=converged, iterations=int(res.nit),
                     log_likelihood=float(-res.fun), message=str(res.message))


def log_likelihood(table: CountsTable, rho: np.ndarray) -> float:
    """Multinomial log likelihood of counts under a state."""
    keys = sorted(table.counts.keys())
    ops = _measurement_stack(keys).reshape(-1, 16)
    counts = np.concatenate([table.counts[k].ravel() for k in keys])
    p = np.maximum((ops @ np.asarray(rho, dtype=complex).reshape(16)).real, 1e-15)
    return float(counts @ np.log(p))


# --- local-unitary overlap maximisation -------------------------------------

# Magic basis: maximally entangled states are exactly the real unit
# vectors in these coordinates, so the best overlap over all local
# unitaries is the top eigenvalue of the real part of rho in this basis.
_MAGIC = np.array(
    [
        [1, -1j, 0, 0],
        [0, 0, 1, -1j],
        [0, 0, -1, -1j],
        [1, 1j, 0, 0],
    ],
    dtype=complex,
) / np.sqrt(2.0)


@dataclass
class OverlapResult:
    u_atom: np.ndarray
    u_photon: np.ndarray
    rho_aligned: np.ndarray
    overlap: float
    gain: float
    converged: bool


def _su2(params) -> np.ndarray:
    a, b, c = params
    rz1 = np.diag([np.exp(-0.5j * a), np.exp(0.5j * a)])
    ry = np.array([[np.cos(b / 2), -np.sin(b / 2)], [np.sin(b / 2), np.cos(b / 2)]],
                  dtype=complex)
    rz2 = np.diag([np.exp(-0.5j * c), np.exp(0.5j * c)])
    return rz1 @ ry @ rz2


def optimize_local_overlap(rho: np.ndarray, method: str = "exact") -> OverlapResult:
    """Local unitaries maximising the overlap with the target Bell state.

    ``exact`` builds the optimum from the magic-basis eigenvector (the
    set of maximally entangled states is the real sphere there, so this
    is a closed-form eigenproblem).  ``search`` is an independent
    multi-start quasi-Newton optimisation over six Euler angles, kept as
    the slow cross-check route.
    """
    rho = np.asarray(rho, dtype=complex)
    psi = qcore.bell_target()
    base = qcore.state_fidelity(rho, psi)
    if method == "exact":
        M = _MAGIC.conj().T @ rho @ _MAGIC
        w, v = np.linalg.eigh((M + M.conj().T).real / 2.0)
        e = _MAGIC @ v[:, -1].astype(complex)
        # solve (Ua (x) I)|bell> = |e> via the 2x2 reshapes
        Ua = (np.sqrt(2.0) * e.reshape(2, 2)) @ np.linalg.inv(
            np.sqrt(2.0) * psi.reshape(2, 2)
        )
        Up = np.eye(2, dtype=complex)
        # the optimum is <e|rho|e>; align rho by the inverse rotation
        u = qcore.kron(Ua, Up)
        overlap = float((e.conj() @ rho @ e).real)
        rho_aligned = u.conj().T @ rho @ u
        return OverlapResult(Ua.conj().T, Up.conj().T, rho_aligned, overlap,
                             overlap - base, True)
    if method != "search":
        raise ValueError(f"unknown method {method!r}")

    def neg_overlap(p):
        u = qcore.kron(_su2(p[:3]), _su2(p[3:]))
        v = u @ psi
        return -float((v.conj() @ rho @ v).real)

    best = None
    rng_starts = [np.zeros(6)]
    for k in range(15):
        rng_starts.append(np.array(
            [((7 * k + m) % 12) * np.pi / 6.0 for m in range(6)]
        ))
    for p0 in rng_starts:
        res = minimize(neg_overlap, p0, method="L-BFGS-B",
                       options=dict(maxiter=500, ftol=1e-15, gtol=1e-12))
        if best is None or res.fun < best.fun:
            best = res
    converged = bool(best.success)
    overlap = -float(best.fun)
    ua = _su2(best.x[:3])
    up = _su2(best.x[3:])
    u = qcore.kron(ua, up)
    # here rho_aligned = (Ua (x) Up)^dag ... matching <(U)psi| rho |(U)psi>
    rho_aligned = u.conj().T @ rho @ u
    return OverlapResult(ua.conj().T, up.conj().T, rho_aligned, overlap,
                         overlap - base, converged)


# --- fidelity bounds ---------------------------------------------------------


def fidelity_lower_bound(
    z_probs: np.ndarray,
    rotated_probs,
    z_errors: np.ndarray | None = None,
    rotated_errors=None,
) -> tuple[float, float]:
    """Bell-fidelity lower bound from populations and rotated coherences.

    ``z_probs`` and each rotated table are (2, 2) joint probability
    arrays in the count-table layout: ``[atom, photon]`` with atom index
    0 = up/bright and photon index 0 = H port, 1 = V port.  The bound is

        1/2 (p_uV + p_dH - sqrt(p_uH p_dV)
             + q_uV + q_dH - q_uH - q_dV)

    with q the rotated-basis populations.  ``rotated_probs`` may be a
    single table (one rotated basis) or a list, which is averaged; only
    the average over the sigma_x and sigma_y bases is a valid bound for
    arbitrary states, a single basis can overshoot when the state has
    imaginary cross coherences.

    Returns (value, propagated error); errors are per-cell binomial
    standard errors treated as independent.
    """
    z = np.asarray(z_probs, dtype=float)
    if (z < 0).any():
        raise ValueError("negative probabilities in the z table")
    if isinstance(rotated_probs, np.ndarray) and np.asarray(rotated_probs).ndim == 2:
        rotated_probs = [rotated_probs]
        if rotated_errors is not None:
            rotated_errors = [rotated_errors]
    rot = [np.asarray(r, dtype=float) for r in rotated_probs]
    if any((r < 0).any() for r in rot):
        raise ValueError("negative probabilities in a rotated table")
    ze = np.zeros((2, 2)) if z_errors is None else np.asarray(z_errors, float)
    re = ([np.zeros((2, 2)) for _ in rot] if rotated_errors is None
          else [np.asarray(r, float) for r in rotated_errors])

    p_uV, p_uH = z[0, 1], z[0, 0]
    p_dV, p_dH = z[1, 1], z[1, 0]
    root = np.sqrt(p_uH * p_dV)
    val = 0.5 * (p_uV + p_dH - root)
    var = 0.25 * (ze[0, 1] ** 2 + ze[1, 0] ** 2)
    if root > 0:
        var += 0.25 * ((0.5 * np.sqrt(p_dV / p_uH) * ze[0, 0]) ** 2
                       + (0.5 * np.sqrt(p_uH / p_dV) * ze[1, 1]) ** 2)
    for r, e in zip(rot, re):
        w = 0.5 / len(rot)
        val += w * (r[0, 1] + r[1, 0] - r[0, 0] - r[1, 1])
        var += w**2 * float((e**2).sum())
    return float(val), float(np.sqrt(var))


def fidelity_upper_bound(purity_or_rho) -> float:
    """F_max = (1 + sqrt(2P - 1)) / 2 from the purity.

    Only defined for P >= 0.5.  Exact for rank-2 states; for deeply mixed
    or strongly depolarised states the true maximal Bell overlap can
    exceed this value (Werner states already do), so the result is a
    figure of merit, not a universal bound.
    """
    p = purity_or_rho
    if isinstance(p, np.ndarray) and p.ndim == 2:
        p = qcore.purity(p)
    p = float(p)
    if p < 0.5:
        raise DomainError(f"purity {p:.4f} < 0.5: upper-bound formula inapplicable")
    if p > 1.0 + 1e-9:
        raise DomainError(f"purity {p:.4f} > 1")
    return 0.5 * (1.0 + np.sqrt(max(2.0 * p - 1.0, 0.0)))


def fidelity_upper_bound_error(purity: float, purity_err: float) -> float:
    """Gaussian propagation of a purity error through the F_max formula."""
    if purity <= 0.5:
        return float("inf")
    return purity_err / np.sqrt(2.0 * purity - 1.0)


# --- dark-count correction ----------------------------------------------------


def dark_count_correct(
    cells: np.ndarray, p_h: float, p_v: float, attempts: int
) -> np.ndarray:
    """Subtract the expected accepted dark counts from joint cells.

    ``cells`` is the (2, 2) ``[atom, photon]`` count array with photon
    index 0 = H port, 1 = V port (count-table layout).  Half of the
    expected dark events per port are removed from each atomic outcome,
    since a dark count heralds an unprepared atom read out 50/50.  The
    probabilities must refer to the same time window the counts were
    post-selected on.  Cells clamp at zero with a warning.
    """
    cells = np.asarray(cells, dtype=float).copy()
    if cells.shape != (2, 2):
        raise ValueError("expected a (2, 2) cell array")
    expected = np.array([[p_h, p_v], [p_h, p_v]]) * attempts / 2.0
    out = cells - expected
    if (out < 0).any():
        warnings.warn("dark-count correction clamped negative cells to zero")
        out = np.clip(out, 0.0, None)
    return out


# --- curve fits ----------------------------------------------------------------


@dataclass
class ParityFit:
    contrast: float
    contrast_err: float
    phase: float
    offset: float


def parity_fit(
    delta_phi: np.ndarray,
    correlation: np.ndarray,
    errors: np.ndarray | None = None,
) -> ParityFit:
    """Least-squares cosine fit; contrast is max - min of the fitted curve.

    The model ``A cos(dphi - phi0) + c`` is linear in (a, b, c) via
    ``a cos + b sin + c``, so the covariance is exact.
    """
    phi = np.asarray(delta_phi, dtype=float)
    y = np.asarray(correlation, dtype=float)
    if phi.size < 6:
        raise ValueError("need at least 6 phase points")
    if phi.max() - phi.min() < 2.0 * np.pi - 1e-9:
        raise ValueError("phase points must span at least one period")
    w = np.ones_like(y) if errors is None else 1.0 / np.maximum(errors, 1e-6)
    X = np.column_stack([np.cos(phi), np.sin(phi), np.ones_like(phi)])
    Xw = X * w[:, None]
    yw = y * w
    coef, *_ = np.linalg.lstsq(Xw, yw, rcond=None)
    a, b, c = coef
    amp = float(np.hypot(a, b))
    if amp < 1e-12:
        raise ValueError("degenerate fit: flat data")
    cov = np.linalg.inv(Xw.T @ Xw)
    if errors is None:
        resid = yw - Xw @ coef
        dof = max(len(y) - 3, 1)
        cov = cov * float(resid @ resid) / dof
    grad = np.array([a / amp, b / amp, 0.0])
    amp_err = float(np.sqrt(grad @ cov @ grad))
    return ParityFit(contrast=2.0 * amp, contrast_err=2.0 * amp_err,
                     phase=float(np.arctan2(b, a)), offset=float(c))


@dataclass
class RamseyFit:
    tau: float
    tau_err: float
    unbounded: bool


def ramsey_fit(
    hold_times: np.ndarray,
    visibilities: np.ndarray,
    errors: np.ndarray | None = None,
    *,
    tau_cap: float = 1e9,
) -> RamseyFit:
    """Single-parameter fit of exp(-t/tau) to visibility data.

    Non-decaying data pushes tau to the cap; that case is reported as an
    unbounded lower limit rather than a value.
    """
    t = np.asarray(hold_times, dtype=float)
    v = np.asarray(visibilities, dtype=float)
    if t.size < 3:
        raise ValueError("need at least 3 hold times")
    if ((v < 0) | (v > 1 + 1e-9)).any():
        raise ValueError("visibilities must lie in [0, 1]")
    w = np.ones_like(v) if errors is None else 1.0 / np.maximum(errors, 1e-6)

    def resid(p):
        return (np.exp(-t / p[0]) - v) * w

    t0 = max(t.mean(), 1e-12)
    res = least_squares(resid, [t0], bounds=([1e-12], [tau_cap]),
                        xtol=1e-15, ftol=1e-15, gtol=1e-15)
    tau = float(res.x[0])
    if tau >= 0.99 * tau_cap:
        return RamseyFit(tau=tau, tau_err=float("inf"), unbounded=True)
    jac = res.jac
    try:
        var = float(np.linalg.inv(jac.T @ jac)[0, 0])
        resid_var = float(res.fun @ res.fun) / max(len(t) - 1, 1)
        err = np.sqrt(var * (resid_var if errors is None else 1.0))
    except np.linalg.LinAlgError:
        err = float("nan")
    return RamseyFit(tau=tau, tau_err=err, unbounded=False)


@dataclass
class FidelityReport:
    f_lower: float
    f_lower_err: float
    f_upper: float
    f_upper_err: float
    purity: float
    contrasts: dict
    dark_corrected: bool
    rotated_mode: str

    def as_dict(self) -> dict:
        return {
            "f_lower": self.f_lower,
            "f_lower_err": self.f_lower_err,
            "f_upper": self.f_upper,
            "f_upper_err": self.f_upper_err,
            "purity": self.purity,
            "contrasts": self.contrasts,
            "dark_corrected": self.dark_corrected,
            "rotated_mode": self.rotated_mode,
        }
