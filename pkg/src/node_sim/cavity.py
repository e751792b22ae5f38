"""Closed-form cavity-QED budget for the ion / fiber-cavity interface.

Cooperativity, Purcell broadening, coupling rate, the emission and
detection probability chain, resonator geometry, the photon temporal
wavepacket and entanglement-rate arithmetic.

All rates are carried internally as angular frequencies (rad/s); the
``*_mhz`` helpers convert at the boundary because published numbers mix
``2*pi*MHz`` and plain MHz freely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi


def mhz_to_angular(f_mhz: float) -> float:
    """Ordinary MHz -> angular rad/s."""
    return TWO_PI * f_mhz * 1e6


def angular_to_mhz(omega: float) -> float:
    return omega / (TWO_PI * 1e6)


@dataclass(frozen=True)
class MirrorSet:
    """Round-trip power budget of the two cavity mirrors, in ppm.

    ``t_out_ppm`` is the transmission of the mirror the photon is meant to
    exit through (the outcoupling mirror is named explicitly; the paper's
    T1/T2 labels are ambiguous about which one that is).
    """

    t_out_ppm: float
    t_other_ppm: float
    loss_total_ppm: float

    def __post_init__(self):
        if min(self.t_out_ppm, self.t_other_ppm, self.loss_total_ppm) < 0:
            raise ValueError("mirror transmissions and losses must be >= 0")
        if self.total_ppm <= 0:
            raise ValueError("total round-trip loss must be positive")

    @property
    def total_ppm(self) -> float:
        return self.t_out_ppm + self.t_other_ppm + self.loss_total_ppm


@dataclass(frozen=True)
class CavityGeometry:
    """Two-mirror resonator geometry, SI units."""

    length_m: float
    r1_m: float
    r2_m: float
    wavelength_m: float

    def __post_init__(self):
        if self.length_m <= 0 or self.wavelength_m <= 0:
            raise ValueError("cavity length and wavelength must be positive")


@dataclass(frozen=True)
class AtomCavityParams:
    """Angular rates: full atomic linewidth, cavity HWHM, cooperativity."""

    gamma_atom_full: float
    kappa: float
    c_eff: float

    def __post_init__(self):
        if self.gamma_atom_full <= 0 or self.kappa <= 0 or self.c_eff < 0:
            raise ValueError("rates must be positive and cooperativity >= 0")


@dataclass(frozen=True)
class EfficiencyChain:
    """Multiplicative photon detection chain; each factor in [0, 1]."""

    p_cavity: float
    eta_ext: float
    epsilon_mode: float
    eta_path: float
    eta_detector: float

    def __post_init__(self):
        for name, v in vars(self).items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} = {v} outside [0, 1]")

    def factors(self) -> tuple[float, ...]:
        return (self.p_cavity, self.eta_ext, self.epsilon_mode,
                self.eta_path, self.eta_detector)


class InstabilityError(ValueError):
    """Resonator geometry outside the stability region g1*g2 in (0, 1)."""

    def __init__(self, g1: float, g2: float):
        self.g1 = g1
        self.g2 = g2
        self.product = g1 * g2
        super().__init__(
            f"unstable resonator: g1 = {g1:.6f}, g2 = {g2:.6f}, "
            f"g1*g2 = {self.product:.6f} not in (0, 1)"
        )


def cooperativity_from_linewidth(gamma_purcell: float, gamma_atom_full: float) -> float:
    """C = (Gamma'/Gamma - 1)/2 from the Purcell-broadened linewidth."""
    if gamma_atom_full <= 0:
        raise ValueError("atomic linewidth must be positive")
    if gamma_purcell < gamma_atom_full:
        raise ValueError(
            "Purcell-enhanced linewidth below the bare one is unphysical "
            f"({gamma_purcell:g} < {gamma_atom_full:g})"
        )
    return (gamma_purcell / gamma_atom_full - 1.0) / 2.0


def purcell_linewidth(gamma_atom_full: float, c_eff: float) -> float:
    """Gamma' = Gamma (1 + 2C); exact inverse of cooperativity_from_linewidth."""
    if gamma_atom_full <= 0 or c_eff < 0:
        raise ValueError("linewidth must be positive and cooperativity >= 0")
    return gamma_atom_full * (1.0 + 2.0 * c_eff)


def coupling_rate(c_eff: float, kappa: float, gamma_half: float) -> float:
    """g_eff = sqrt(C * 2 * kappa * gamma) with gamma the HWHM (Gamma/2)."""
    if c_eff < 0 or kappa <= 0 or gamma_half <= 0:
        raise ValueError("need c_eff >= 0 and positive kappa, gamma")
    return float(np.sqrt(c_eff * 2.0 * kappa * gamma_half))


def emission_probability(c_eff: float) -> float:
    """P_c = 2C / (2C + 1): branching of the decay into the cavity mode."""
    if c_eff < 0:
        raise ValueError("cooperativity must be >= 0")
    return 2.0 * c_eff / (2.0 * c_eff + 1.0)


def extraction_efficiency(mirrors: MirrorSet) -> float:
    """Probability the intracavity photon leaves through the outcoupling mirror."""
    return mirrors.t_out_ppm / mirrors.total_ppm


def finesse(mirrors: MirrorSet) -> float:
    """F = 2*pi / (total round-trip loss), losses in absolute units."""
    return TWO_PI / (mirrors.total_ppm * 1e-6)


def detection_efficiency(chain: EfficiencyChain) -> float:
    """Product of the five chain factors."""
    return float(np.prod(chain.factors()))


def mode_waist(geometry: CavityGeometry) -> float:
    """1/e^2 intensity radius of the fundamental mode at the waist.

    Standard two-mirror Gaussian resonator result from the stability
    parameters g_i = 1 - L/R_i.  The symmetric confocal point g1 = g2 = 0
    is a removable singularity of the general formula and is handled by
    its closed-form limit w0 = sqrt(L lambda / 2 pi).  Everything else
    outside 0 < g1*g2 < 1 raises InstabilityError.
    """
    L, lam = geometry.length_m, geometry.wavelength_m
    g1 = 1.0 - L / geometry.r1_m
    g2 = 1.0 - L / geometry.r2_m
    prod = g1 * g2
    if abs(g1) < 1e-12 and abs(g2) < 1e-12:
        return float(np.sqrt(L * lam / (2.0 * np.pi)))
    if not 0.0 < prod < 1.0:
        raise InstabilityError(g1, g2)
    w0_sq = (L * lam / np.pi) * np.sqrt(prod * (1.0 - prod)) / abs(g1 + g2 - 2.0 * prod)
    return float(np.sqrt(w0_sq))


@dataclass(frozen=True)
class WavepacketProfile:
    """Normalised arrival-time intensity profile on a uniform grid."""

    times: np.ndarray
    intensity: np.ndarray
    fwhm: float

    @property
    def step(self) -> float:
        return float(self.times[1] - self.times[0])

    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.intensity) * self.step

    def window_capture(self, width: float, start: float | None = None) -> tuple[float, float]:
        """(capture fraction, window start) for an acceptance window.

        With ``start=None`` the window is placed where it captures the
        most probability.
        """
        cdf = self.cumulative()
        n = int(round(width / self.step))
        if n < 1 or n >= len(cdf):
            raise ValueError("window width outside the profile span")
        frac = cdf[n:] - cdf[:-n]
        if start is None:
            i0 = int(np.argmax(frac))
            return float(frac[i0]), float(self.times[i0])
        i0 = int(round((start - self.times[0]) / self.step))
        i0 = min(max(i0, 0), len(frac) - 1)
        return float(frac[i0]), float(self.times[i0])


def _fwhm_linear(t: np.ndarray, y: np.ndarray) -> float:
    """FWHM by linear interpolation of the half-maximum crossings."""
    ipk = int(np.argmax(y))
    half = y[ipk] / 2.0
    if ipk == 0:
        left = t[0]
    else:
        left = float(np.interp(half, y[: ipk + 1], t[: ipk + 1]))
    right = float(np.interp(-half, -y[ipk:], t[ipk:]))
    return right - left


def photon_wavepacket(
    gamma_purcell: float,
    tau_cavity: float,
    time_grid: np.ndarray | None = None,
    *,
    step: float = 10e-12,
    span: float = 200e-9,
) -> WavepacketProfile:
    """Photon intensity profile leaving the cavity.

    Convolution of the Purcell-broadened atomic decay intensity
    ``exp(-Gamma' t)`` with the cavity response of decay constant
    ``tau_cavity``, evaluated on a uniform grid and normalised to unit
    integral.  The grid must resolve the structure: step <= 0.05 ns.
    """
    if gamma_purcell <= 0 or tau_cavity <= 0:
        raise ValueError("decay rates must be positive")
    if time_grid is None:
        time_grid = np.arange(0.0, span, step)
    t = np.asarray(time_grid, dtype=float)
    dt = t[1] - t[0]
    if dt > 0.05e-9 + 1e-15:
        raise ValueError(f"grid too coarse: step {dt * 1e9:.3f} ns > 0.05 ns")
    if not np.allclose(np.diff(t), dt, rtol=1e-9, atol=1e-15):
        raise ValueError("time grid must be uniform")
    atom = np.exp(-gamma_purcell * t)
    cav = np.exp(-t / tau_cavity)
    prof = np.convolve(atom, cav)[: len(t)] * dt
    norm = prof.sum() * dt
    prof = prof / norm
    return WavepacketProfile(times=t, intensity=prof, fwhm=_fwhm_linear(t, prof))


def entanglement_rate(p_success_per_shot: float, attempt_rate_hz: float) -> float:
    """Detected entanglement events per second."""
    if not 0.0 <= p_success_per_shot <= 1.0:
        raise ValueError("success probability must be in [0, 1]")
    if attempt_rate_hz < 0:
        raise ValueError("attempt rate must be >= 0")
    return p_success_per_shot * attempt_rate_hz


# --- budget report --------------------------------------------------------

BUDGET_KEYS = (
    "c_eff", "g_eff_mhz", "gamma_purcell_mhz", "p_cavity", "eta_ext",
    "p_detect", "finesse", "waist_um", "fwhm_ns", "rate_hz",
)

_BUDGET_UNITS = {
    "c_eff": "", "g_eff_mhz": "MHz", "gamma_purcell_mhz": "MHz",
    "p_cavity": "", "eta_ext": "", "p_detect": "", "finesse": "",
    "waist_um": "um", "fwhm_ns": "ns", "rate_hz": "Hz",
}


def budget_report(
    params: AtomCavityParams,
    mirrors: MirrorSet,
    geometry: CavityGeometry,
    chain_tail: tuple[float, float, float],
    tau_cavity: float,
    p_success_per_shot: float,
    attempt_rate_hz: float,
) -> dict:
    """Full efficiency-chain report with the fixed key set.

    ``chain_tail`` is (mode matching, path efficiency, detector quantum
    efficiency); the head of the chain is derived from the cavity
    parameters.  An unstable geometry is reported, not raised: the waist
    entry becomes the string ``"UNSTABLE(g1g2=...)"``.
    """
    p_c = emission_probability(params.c_eff)
    eta = extraction_efficiency(mirrors)
    chain = EfficiencyChain(p_c, eta, *chain_tail)
    gamma_p = purcell_linewidth(params.gamma_atom_full, params.c_eff)
    pack = photon_wavepacket(gamma_p, tau_cavity)
    try:
        waist = mode_waist(geometry) * 1e6
    except InstabilityError as err:
        waist = f"UNSTABLE(g1g2={err.product:.6f})"
    return {
        "c_eff": params.c_eff,
        "g_eff_mhz": angular_to_mhz(
            coupling_rate(params.c_eff, params.kappa, params.gamma_atom_full / 2.0)
        ),
        "gamma_purcell_mhz": angular_to_mhz(gamma_p),
        "p_cavity": p_c,
        "eta_ext": eta,
        "p_detect": detection_efficiency(chain),
        "finesse": finesse(mirrors),
        "waist_um": waist,
        "fwhm_ns": pack.fwhm * 1e9,
        "rate_hz": entanglement_rate(p_success_per_shot, attempt_rate_hz),
    }


def format_budget_text(report: dict) -> str:
    """One "name = value unit" line per fixed key."""
    lines = []
    for key in BUDGET_KEYS:
        val = report[key]
        unit = _BUDGET_UNITS[key]
        if isinstance(val, str):
            text = val
        else:
            text = f"{val:.6g}"
        lines.append(f"{key} = {text} {unit}".rstrip())
    return "\n".join(lines) + "\n"
