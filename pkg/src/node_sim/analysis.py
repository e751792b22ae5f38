"""Pipeline from run summaries to the fidelity / tomography report.

Glue between the sequence CSV format and the estimators: classify
settings into count-table entries, fit the parity scans, assemble the
Eq-style probability tables for the fidelity lower bound, run the
reconstruction chain and collect everything in one report.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import qcore, tomo

PHI_X = qcore.PHASE_X
PHI_Y = qcore.PHASE_Y
_AXIS_NAME = {1: "x", 2: "y", 3: "z"}


def _wrap(x: float) -> float:
    return (x + np.pi) % (2.0 * np.pi) - np.pi


def scan_grid(phi0: float, points: int = 12) -> list[float]:
    """Pulse-phase grid for a parity scan: one full period inclusive.

    The end point repeats the start modulo 2 pi, so the extremum at
    ``phi0`` is sampled twice; the parity fit needs the full-period span
    and the duplicate simply pools extra statistics at the peak.
    """
    return [float(phi0 + k * 2.0 * np.pi / points) for k in range(points + 1)]


def scan_weights(points: int = 12, extremal: float = 3.0) -> list[float]:
    """Attempt weights concentrating statistics on the scan extrema."""
    return [extremal if k in (0, points // 2, points) else 1.0
            for k in range(points + 1)]


def classify_delta_phi(dphi: float, tol: float = 1e-6):
    """Map a pulse phase onto an atomic Pauli axis, if it lands on one.

    Returns (axis index, flipped) or None.  The antipodal point measures
    the negated operator, so its outcomes enter with flipped atom labels.
    """
    for axis, phi0 in ((1, PHI_X), (2, PHI_Y)):
        if abs(_wrap(dphi - phi0)) < tol:
            return axis, False
        if abs(_wrap(dphi - phi0 - np.pi)) < tol:
            return axis, True
    return None


@dataclass
class ScanData:
    """One parity scan: photon basis fixed, pulse phase swept."""

    basis: int
    delta_phi: np.ndarray
    cells: np.ndarray          # (n_points, 2, 2)
    attempts: np.ndarray | None = None

    def correlator(self) -> tuple[np.ndarray, np.ndarray]:
        """Anticorrelation-pattern probability (dark,H)+(bright,V) per point."""
        n = self.cells.sum(axis=(1, 2))
        y = (self.cells[:, 1, 0] + self.cells[:, 0, 1]) / n
        err = np.sqrt(np.clip(y * (1 - y), 1e-12, None) / n)
        return y, err


def split_rows(rows, attempts=None):
    """Separate summary rows into count-table entries and parity scans.

    ``rows`` are (photon basis, delta_phi or None, cells) triples in file
    order; ``attempts`` the per-row attempt counts when known.  Rows whose
    phase sits on an atomic Pauli axis feed the count table too.
    """
    table = tomo.CountsTable()
    scans: dict[int, list] = {}
    z_rows = []
    for k, (basis, dphi, cells) in enumerate(rows):
        att = None if attempts is None else attempts[k]
        if dphi is None:
            table.add(3, basis, cells)
            if basis == 3:
                z_rows.append((cells, att))
            continue
        scans.setdefault(basis, []).append((dphi, cells, att))
        hit = classify_delta_phi(dphi)
        if hit is not None:
            axis, flipped = hit
            eff = cells[::-1, :] if flipped else cells
            table.add(axis, basis, eff)
    scan_objs = {}
    for basis, pts in scans.items():
        pts.sort(key=lambda p: p[0])
        scan_objs[basis] = ScanData(
            basis=basis,
            delta_phi=np.array([p[0] for p in pts]),
            cells=np.array([p[1] for p in pts]),
            attempts=(None if attempts is None
                      else np.array([p[2] for p in pts], dtype=float)),
        )
    return table, scan_objs, z_rows


def _prob_table(cells: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = cells.sum()
    p = cells / n
    err = np.sqrt(np.clip(p * (1 - p), 0.0, None) / n)
    return p, err


def extremal_point(scan: ScanData, fit: tomo.ParityFit) -> int:
    """Index of the scan point nearest the fitted parity maximum."""
    dist = np.abs([_wrap(p - fit.phase) for p in scan.delta_phi])
    return int(np.argmin(dist))


@dataclass
class FidelityAnalysis:
    report: tomo.FidelityReport
    report_corrected: tomo.FidelityReport | None
    parity_fits: dict
    z_contrast: float
    z_contrast_err: float
    expectations: tomo.ExpectationSet
    rho_linear: np.ndarray
    mle: tomo.MLEResult
    overlap: tomo.OverlapResult


def z_contrast_from_cells(cells: np.ndarray) -> tuple[float, float]:
    """P(bright | V) - P(bright | H) with binomial error."""
    n_h, n_v = cells[:, 0].sum(), cells[:, 1].sum()
    if n_h == 0 or n_v == 0:
        raise ValueError("z-basis cells have an empty photon port")
    p_bv = cells[0, 1] / n_v
    p_bh = cells[0, 0] / n_h
    err = np.sqrt(p_bv * (1 - p_bv) / n_v + p_bh * (1 - p_bh) / n_h)
    return float(p_bv - p_bh), float(err)


def analyse(
    rows,
    attempts=None,
    *,
    dark_probs_window: tuple[float, float] | None = None,
    rotated_mode: str = "average",
) -> FidelityAnalysis:
    """Full analysis of summary rows.

    ``dark_probs_window`` are the per-shot dark-count probabilities
    rescaled to the acceptance window, i.e. the expected accepted false
    events per attempt on (H, V); with per-setting ``attempts`` they
    enable the dark-count-corrected bound.
    """
    table, scans, z_rows = split_rows(rows, attempts)
    if (3, 3) not in table.counts:
        raise ValueError("missing the z-basis correlation setting")
    fits = {}
    for basis, scan in scans.items():
        y, err = scan.correlator()
        if len(y) >= 6 and scan.delta_phi.max() - scan.delta_phi.min() >= 2 * np.pi - 1e-9:
            fits[_AXIS_NAME[basis]] = tomo.parity_fit(scan.delta_phi, y, err)

    z_cells = table.counts[(3, 3)]
    z_probs, z_err = _prob_table(z_cells)
    z_con, z_con_err = z_contrast_from_cells(z_cells)

    def rotated_tables(corrector=None):
        tabs, errs, used = [], [], []
        for basis in (1, 2):
            name = _AXIS_NAME[basis]
            if basis not in scans or name not in fits:
                continue
            if rotated_mode != "average" and name != rotated_mode:
                continue
            scan = scans[basis]
            k = extremal_point(scan, fits[name])
            cells = scan.cells[k]
            if corrector is not None:
                att = scan.attempts[k] if scan.attempts is not None else None
                cells = corrector(cells, att)
            p, e = _prob_table(cells)
            tabs.append(p)
            errs.append(e)
            used.append(name)
        if not tabs:
            raise ValueError("no rotated-basis scan available for the bound")
        return tabs, errs, used

    tabs, errs, used = rotated_tables()
    f_low, f_low_err = tomo.fidelity_lower_bound(z_probs, tabs, z_err, errs)

    es = tomo.expectations_from_counts(table)
    rho_lin = tomo.linear_inversion(es)
    mle = tomo.mle_reconstruct(table, start=rho_lin)
    overlap = tomo.optimize_local_overlap(mle.rho)
    pur = qcore.purity(mle.rho)
    pur_err = 0.5 * float(np.sqrt(np.sum((es.s * es.err) ** 2)))
    try:
        f_up = tomo.fidelity_upper_bound(pur)
        f_up_err = tomo.fidelity_upper_bound_error(pur, pur_err)
    except tomo.DomainError:
        f_up, f_up_err = float("nan"), float("nan")

    contrasts = {"z": z_con}
    for name, fit in fits.items():
        contrasts[name] = fit.contrast
    report = tomo.FidelityReport(
        f_lower=f_low, f_lower_err=f_low_err,
        f_upper=f_up, f_upper_err=f_up_err,
        purity=pur, contrasts=contrasts, dark_corrected=False,
        rotated_mode="+".join(used) if rotated_mode == "average" else rotated_mode,
    )

    report_corr = None
    if dark_probs_window is not None and attempts is not None:
        p_h_eff, p_v_eff = dark_probs_window

        def corrector(cells, att):
            if att is None:
                return cells
            return tomo.dark_count_correct(cells, p_h_eff, p_v_eff, att)

        z_att = sum(a for _, a in z_rows if a is not None)
        zc = tomo.dark_count_correct(z_cells, p_h_eff, p_v_eff, z_att)
        zp, ze = _prob_table(zc)
        tabs_c, errs_c, _ = rotated_tables(corrector)
        f_low_c, f_low_c_err = tomo.fidelity_lower_bound(zp, tabs_c, ze, errs_c)
        zcon_c, _ = z_contrast_from_cells(zc)
        contrasts_c = dict(contrasts)
        contrasts_c["z"] = zcon_c
        report_corr = tomo.FidelityReport(
            f_lower=f_low_c, f_lower_err=f_low_c_err,
            f_upper=f_up, f_upper_err=f_up_err,
            purity=pur, contrasts=contrasts_c, dark_corrected=True,
            rotated_mode=report.rotated_mode,
        )

    return FidelityAnalysis(
        report=report, report_corrected=report_corr, parity_fits=fits,
        z_contrast=z_con, z_contrast_err=z_con_err, expectations=es,
        rho_linear=rho_lin, mle=mle, overlap=overlap,
    )
