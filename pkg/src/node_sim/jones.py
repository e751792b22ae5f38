"""Jones-calculus model of the photon detection path.

The physical layout, seen from the polarising beam splitter (PBS):

    PBS -- HWP -- QWP -- fiber -- cavity mirror

* Photon path (single pass, cavity -> PBS): fiber, then QWP, then HWP.
* Calibration path: H-polarised reference light enters through the PBS,
  passes HWP, QWP and the fiber, reflects off the first fiber mirror and
  retraces the train; the reflected V-port rate is recorded.

Backward propagation through a reciprocal element is its transpose in
the linear H/V basis; the reflecting mirror is fixed to the identity.
Both conventions are arbitrary but recorded, and the calibration fit is
self-consistent under them.

The fiber is a lossless unitary retarder with three parameters: fast
axis orientation ``alpha``, ellipticity ``beta`` (both halved angles on
the Poincare sphere) and total retardation ``delta``.  That covers all
of SU(2) up to a global phase.  Polarisation-dependent loss is invisible
in the normalised rates at the modelled precision and is not included.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares, minimize

UNITARITY_TOL = 1e-10

# Pauli-like basis on the Poincare sphere in the linear H/V Jones basis.
_S1 = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
_S2 = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
_S3 = np.array([[0.0, -1j], [1j, 0.0]], dtype=complex)

KET_H = np.array([1.0, 0.0], dtype=complex)
KET_V = np.array([0.0, 1.0], dtype=complex)


def rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]], dtype=complex)


def retarder(theta: float, retardation: float) -> np.ndarray:
    """Waveplate with fast axis at ``theta`` and the given retardation."""
    d = np.diag([1.0, np.exp(-1j * retardation)]).astype(complex)
    r = rotation(theta)
    return r @ d @ r.conj().T


def hwp(theta: float) -> np.ndarray:
    """Half-wave plate, fast axis at ``theta``."""
    return retarder(theta, np.pi)


def qwp(theta: float) -> np.ndarray:
    """Quarter-wave plate, fast axis at ``theta``."""
    return retarder(theta, np.pi / 2.0)


@dataclass(frozen=True)
class FiberModel:
    """Unitary retarder: axis angles (alpha, beta) and retardation delta."""

    alpha: float
    beta: float
    delta: float

    def axis(self) -> np.ndarray:
        return np.array(
            [
                np.cos(2 * self.beta) * np.cos(2 * self.alpha),
                np.cos(2 * self.beta) * np.sin(2 * self.alpha),
                np.sin(2 * self.beta),
            ]
        )


def fiber_unitary(f: FiberModel) -> np.ndarray:
    """exp(-i delta/2 n.sigma) for the retarder axis n."""
    n = f.axis()
    gen = n[0] * _S1 + n[1] * _S2 + n[2] * _S3
    half = f.delta / 2.0
    return np.cos(half) * np.eye(2, dtype=complex) - 1j * np.sin(half) * gen


# --- circular basis and photon readout bases -------------------------------
#
# The photon qubit leaving the cavity lives in the circular basis: the
# abstract |V> state (the one that should land on the V detector) is the
# sigma+ photon, abstract |H> is sigma-.  Fixed Jones convention:
# |sigma+-> = (|H> -+ ... see below) -- we use (|H> +- i |V>)/sqrt2.

KET_SIGMA_PLUS = (KET_H + 1j * KET_V) / np.sqrt(2.0)
KET_SIGMA_MINUS = (KET_H - 1j * KET_V) / np.sqrt(2.0)


def basis_eigenstates(basis) -> tuple[np.ndarray, np.ndarray]:
    """Physical (cavity-side) kets to be mapped onto the (H, V) ports.

    Returns ``(to_H, to_V)``: the +1 eigenstate of the photon readout
    operator goes to the H port, the -1 eigenstate to the V port.  For
    sigma_z these are the circular states; for sigma_x/sigma_y the
    phi = -+pi/4 superpositions mirroring the atomic convention.
    """
    from . import qcore

    op = qcore.photon_pauli(basis)
    # abstract (V, H) eigenvectors -> physical kets via V->sigma+, H->sigma-
    w, v = np.linalg.eigh(op)
    # eigh sorts ascending: column 0 is the -1 eigenvector
    minus, plus = v[:, 0], v[:, 1]
    to_v = minus[0] * KET_SIGMA_PLUS + minus[1] * KET_SIGMA_MINUS
    to_h = plus[0] * KET_SIGMA_PLUS + plus[1] * KET_SIGMA_MINUS
    return to_h, to_v


def photon_train(fiber_m: np.ndarray, theta_hwp: float, theta_qwp: float,
                 offsets: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Single-pass train cavity -> PBS: HWP . QWP . fiber_backward."""
    return hwp(theta_hwp + offsets[0]) @ qwp(theta_qwp + offsets[1]) @ fiber_m.T


# --- calibration heat map ---------------------------------------------------


@dataclass
class HeatMap:
    """Normalised V-detector rate over a rectangular waveplate-angle grid."""

    theta_hwp: np.ndarray
    theta_qwp: np.ndarray
    v_rate: np.ndarray  # shape (len(theta_hwp), len(theta_qwp))

    def __post_init__(self):
        self.theta_hwp = np.asarray(self.theta_hwp, dtype=float)
        self.theta_qwp = np.asarray(self.theta_qwp, dtype=float)
        self.v_rate = np.asarray(self.v_rate, dtype=float)
        if self.v_rate.shape != (len(self.theta_hwp), len(self.theta_qwp)):
            raise ValueError("heat map grid shape mismatch")


def _reflection_rates(fiber_m: np.ndarray, th: np.ndarray, tq: np.ndarray,
                      off_h: float, off_q: float) -> np.ndarray:
    """V rates of the double-pass reference beam, vectorised over the grid."""
    th = np.asarray(th, dtype=float)[:, None] + off_h
    tq = np.asarray(tq, dtype=float)[None, :] + off_q
    th, tq = np.broadcast_arrays(th, tq)
    ch, sh = np.cos(th), np.sin(th)
    cq, sq = np.cos(tq), np.sin(tq)
    # hwp entries (fast axis th): R d R^T with d = diag(1, -1)
    H = np.empty(th.shape + (2, 2), dtype=complex)
    H[..., 0, 0] = ch * ch - sh * sh
    H[..., 0, 1] = 2 * ch * sh
    H[..., 1, 0] = 2 * ch * sh
    H[..., 1, 1] = sh * sh - ch * ch
    Q = np.empty(tq.shape + (2, 2), dtype=complex)
    eq = np.exp(-1j * np.pi / 2.0)
    Q[..., 0, 0] = cq * cq + eq * sq * sq
    Q[..., 0, 1] = cq * sq * (1 - eq)
    Q[..., 1, 0] = cq * sq * (1 - eq)
    Q[..., 1, 1] = sq * sq + eq * cq * cq
    fwd = np.einsum("fe,...ed,...dc->...fc", fiber_m, Q, H)
    # mirror = identity; the backward train is the elementwise transpose,
    # so the round trip is fwd^T . fwd
    rt = np.einsum("...ca,...cb->...ab", fwd, fwd)
    amp = rt[..., 1, 0]
    return np.abs(amp) ** 2


def simulate_reflection_heatmap(
    f: FiberModel,
    offsets: tuple[float, float] = (0.0, 0.0),
    theta_hwp: np.ndarray | None = None,
    theta_qwp: np.ndarray | None = None,
) -> HeatMap:
    """Reference-laser calibration map: launch H, double pass, project on V."""
    if theta_hwp is None:
        theta_hwp = np.linspace(0.0, np.pi, 20, endpoint=False)
    if theta_qwp is None:
        theta_qwp = np.linspace(0.0, np.pi, 20, endpoint=False)
    theta_hwp = np.asarray(theta_hwp, dtype=float)
    theta_qwp = np.asarray(theta_qwp, dtype=float)
    if theta_hwp.size == 0 or theta_qwp.size == 0:
        raise ValueError("empty waveplate angle grid")
    rates = _reflection_rates(fiber_unitary(f), theta_hwp, theta_qwp, *offsets)
    return HeatMap(theta_hwp, theta_qwp, rates)


# --- fiber fit --------------------------------------------------------------


@dataclass
class FiberFitResult:
    model: FiberModel
    offsets: tuple[float, float]
    residual: float
    degenerate: bool
    notes: list[str] = field(default_factory=list)


def _canonical_params(alpha, beta, delta, off_h, off_q):
    """Reduce fit parameters to a canonical gauge patch.

    Gauge moves that leave every heat map (and every photon-path rate)
    unchanged: alpha mod pi; the axis flip (alpha+pi/2, -beta, -delta);
    waveplate offsets mod pi; HWP offset additionally mod pi/2 (a 90 deg
    rotated HWP only flips a global sign).  Canonical patch: delta in
    [0, pi], beta in [-pi/4, pi/4], alpha in [0, pi), offsets in [0, pi/2)
    and [0, pi).
    """
    delta = float(np.mod(delta, 2 * np.pi))
    if delta > np.pi:
        delta = 2 * np.pi - delta
        alpha = alpha + np.pi / 2.0
        beta = -beta
    beta = float(np.arctan2(np.sin(2 * beta), np.cos(2 * beta)) / 2.0)
    if beta > np.pi / 4.0:
        beta = beta - np.pi / 2.0
        alpha = alpha + np.pi / 2.0
        # axis direction flip in the equatorial components only
    if beta < -np.pi / 4.0:
        beta = beta + np.pi / 2.0
        alpha = alpha + np.pi / 2.0
    alpha = float(np.mod(alpha, np.pi))
    off_h = float(np.mod(off_h, np.pi / 2.0))
    off_q = float(np.mod(off_q, np.pi))
    return alpha, beta, delta, off_h, off_q


def fit_fiber(hm: HeatMap, n_starts: int = 16) -> FiberFitResult:
    """Least-squares fit of the five path parameters to a heat map.

    Multi-start local least squares on a deterministic lattice in
    (alpha, beta, delta); the map is normalised to max = 1 before
    fitting, matching how measured maps are recorded.  Symmetric minima
    beyond the documented gauge moves set ``degenerate`` instead of
    being resolved.
    """
    if hm.v_rate.size < 25:
        raise ValueError("need at least 25 grid points to fit the fiber")
    span_h = hm.theta_hwp.max() - hm.theta_hwp.min()
    span_q = hm.theta_qwp.max() - hm.theta_qwp.min()
    if span_h < np.pi / 2.0 or span_q < np.pi / 2.0:
        raise ValueError("grid must span at least half a period in each angle")
    data = hm.v_rate / hm.v_rate.max() if hm.v_rate.max() > 0 else hm.v_rate

    def residuals(p):
        a, b, d, oh, oq = p
        model = _reflection_rates(fiber_unitary(FiberModel(a, b, d)),
                                  hm.theta_hwp, hm.theta_qwp, oh, oq)
        peak = model.max()
        if peak > 1e-12:
            model = model / peak
        return (model - data).ravel()

    starts = []
    k = 0
    for a0 in (0.2, 1.0, 1.9, 2.6):
        for b0 in (-0.5, 0.25):
            for d0 in (0.7, 2.4):
                starts.append((a0, b0, d0, 0.05 * (k % 3), 0.07 * (k % 2)))
                k += 1
    best = None
    solutions = []
    for p0 in starts[:n_starts]:
        res = least_squares(residuals, p0, method="lm", xtol=1e-12, ftol=1e-12,
                            gtol=1e-12, max_nfev=4000)
        cost = float(np.sqrt(2.0 * res.cost / data.size))  # RMS residual
        solutions.append((cost, res.x))
        if best is None or cost < best[0]:
            best = (cost, res.x)
    rms, p = best
    canon = _canonical_params(*p)
    # degenerate when an equally good minimum maps to different canonical params
    degenerate = False
    notes = []
    for cost, x in solutions:
        if cost <= rms + 1e-8:
            c2 = _canonical_params(*x)
            if max(abs(np.array(c2) - np.array(canon))) > 1e-3:
                degenerate = True
                notes.append(
                    "tied minimum at canonical params "
                    + ", ".join(f"{v:.6f}" for v in c2)
                )
    model = FiberModel(canon[0], canon[1], canon[2])
    return FiberFitResult(model=model, offsets=(canon[3], canon[4]),
                          residual=rms, degenerate=degenerate, notes=notes)


# --- basis angle solving ----------------------------------------------------


class NoSolutionError(RuntimeError):
    """Waveplate solver failed to reach the required extinction."""


@dataclass(frozen=True)
class WaveplateSetting:
    theta_hwp: float
    theta_qwp: float
    offsets: tuple[float, float] = (0.0, 0.0)


def _extinction(fiber_m, th, tq, offsets, to_h, to_v):
    t = photon_train(fiber_m, th, tq, offsets)
    leak_v = np.abs(KET_H.conj() @ t @ to_v) ** 2
    leak_h = np.abs(KET_V.conj() @ t @ to_h) ** 2
    return float(leak_v + leak_h) / 2.0


def solve_basis_angles(
    f: FiberModel,
    basis,
    offsets: tuple[float, float] = (0.0, 0.0),
    *,
    extinction_goal: float = 1e-6,
) -> tuple[WaveplateSetting, float]:
    """Waveplate angles that project the photon readout basis onto (H, V).

    The -1 eigenstate of the photon operator must exit the V port, the +1
    eigenstate the H port.  A coarse grid scan (the error landscape is
    pi-periodic in both angles) seeds a local refinement; the canonical
    smallest-angle solution in [0, pi)^2 is returned together with the
    achieved extinction error.
    """
    fiber_m = fiber_unitary(f)
    to_h, to_v = basis_eigenstates(basis)
    grid = np.linspace(0.0, np.pi, 72, endpoint=False)
    best = (np.inf, 0.0, 0.0)
    # vectorised coarse scan
    th = grid[:, None] + offsets[0]
    tq = grid[None, :] + offsets[1]
    th_b, tq_b = np.broadcast_arrays(th, tq)
    ch, sh = np.cos(th_b), np.sin(th_b)
    cq, sq = np.cos(tq_b), np.sin(tq_b)
    H = np.empty(th_b.shape + (2, 2), dtype=complex)
    H[..., 0, 0] = ch**2 - sh**2
    H[..., 0, 1] = H[..., 1, 0] = 2 * ch * sh
    H[..., 1, 1] = sh**2 - ch**2
    eq = np.exp(-1j * np.pi / 2)
    Q = np.empty(tq_b.shape + (2, 2), dtype=complex)
    Q[..., 0, 0] = cq**2 + eq * sq**2
    Q[..., 0, 1] = Q[..., 1, 0] = cq * sq * (1 - eq)
    Q[..., 1, 1] = sq**2 + eq * cq**2
    train = np.einsum("...ab,...bc,cd->...ad", H, Q, fiber_m.T)
    leak = (np.abs(np.einsum("...ab,b->...a", train, to_v)[..., 0]) ** 2
            + np.abs(np.einsum("...ab,b->...a", train, to_h)[..., 1]) ** 2) / 2
    i, j = np.unravel_index(int(np.argmin(leak)), leak.shape)
    best = (float(leak[i, j]), grid[i], grid[j])

    res = minimize(
        lambda p: _extinction(fiber_m, p[0], p[1], offsets, to_h, to_v),
        np.array([best[1], best[2]]),
        method="Nelder-Mead",
        options=dict(xatol=1e-12, fatol=1e-16, maxiter=2000),
    )
    err = float(res.fun)
    if err > 1e-3:
        raise NoSolutionError(
            f"extinction {err:.3e} > 1e-3 for basis {basis!r}; fiber model "
            "is likely not unitary"
        )
    th_c = float(np.mod(res.x[0], np.pi))
    tq_c = float(np.mod(res.x[1], np.pi))
    setting = WaveplateSetting(th_c, tq_c, offsets)
    if err > extinction_goal:
        # refine once more from the canonical representative
        res2 = minimize(
            lambda p: _extinction(fiber_m, p[0], p[1], offsets, to_h, to_v),
            np.array([th_c, tq_c]), method="Nelder-Mead",
            options=dict(xatol=1e-13, fatol=1e-17, maxiter=4000),
        )
        if res2.fun < err:
            err = float(res2.fun)
            setting = WaveplateSetting(float(np.mod(res2.x[0], np.pi)),
                                       float(np.mod(res2.x[1], np.pi)), offsets)
    return setting, err


# --- CSV round trip ---------------------------------------------------------

HEATMAP_HEADER = ["theta_hwp_deg", "theta_qwp_deg", "v_rate"]


def write_heatmap_csv(hm: HeatMap, path) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh)
        w.writerow(HEATMAP_HEADER)
        for i, th in enumerate(hm.theta_hwp):
            for j, tq in enumerate(hm.theta_qwp):
                w.writerow([f"{np.degrees(th):.4f}", f"{np.degrees(tq):.4f}",
                            f"{hm.v_rate[i, j]:.6f}"])


def read_heatmap_csv(path) -> HeatMap:
    rows = []
    with open(path, "r", newline="", encoding="ascii") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != HEATMAP_HEADER:
            raise ValueError(f"line 1: expected header {','.join(HEATMAP_HEADER)}")
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"line {ln}: expected 3 fields, got {len(row)}")
            try:
                rows.append((float(row[0]), float(row[1]), float(row[2])))
            except ValueError:
                raise ValueError(f"line {ln}: cannot parse {row!r}") from None
    if not rows:
        raise ValueError("heat map file contains no data rows")
    th = np.radians(sorted({r[0] for r in rows}))
    tq = np.radians(sorted({r[1] for r in rows}))
    rate = np.full((len(th), len(tq)), np.nan)
    ih = {round(v, 10): k for k, v in enumerate(np.degrees(th))}
    iq = {round(v, 10): k for k, v in enumerate(np.degrees(tq))}
    for h, q, v in rows:
        rate[ih[round(h, 10)], iq[round(q, 10)]] = v
    if np.isnan(rate).any():
        raise ValueError("heat map grid is not rectangular")
    return HeatMap(th, tq, rate)
