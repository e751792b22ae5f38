"""Monte Carlo engine for the entanglement sequence.

Per attempt: initialisation, pulsed excitation, emission and collection,
photon projection in a chosen basis, microwave mapping and rotation with
phase bookkeeping, fluorescence readout, dark counts and post-selection.

Pulse model.  The atomic qubit reaching the readout is the hyperfine
pair (up = bright, down = dark).  The mapping pi pulse imprints the
microwave carrier phase on the transferred amplitude, diag(1, e^{i thc});
the following pi/2 pulse rotates about the equatorial axis at
``thc + delta_phi - pi/2``.  Sharing the carrier makes ``thc`` cancel
exactly: the measured atomic operator is the equatorial one at azimuth
``delta_phi - phi_noise``, where ``phi_noise`` collects the magnetic
dephasing phase, the timing-budget phase and the Larmor phase from
trigger jitter.  The engine still carries ``thc`` through the matrix
arithmetic so carrier randomisation is a real, testable invariance
rather than an assumption.

Randomness: shots split into ``shards`` with streams derived from
``SeedSequence((seed, setting_index, shard_index))``.  The same
(config, seed, shard count) reproduces results bit for bit; shards can
run on any number of workers because aggregation is a fixed-order sum.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import j0
from scipy.stats import poisson

from . import cavity, qcore, tomo

GYROMAGNETIC_MHZ_PER_G = 2.8  # level shift coefficient, MHz per Gauss
ZEEMAN_SENSITIVITY_HZ_PER_G = 2.0 * GYROMAGNETIC_MHZ_PER_G * 1e6
HYPERFINE_SENSITIVITY_HZ_PER_G = GYROMAGNETIC_MHZ_PER_G * 1e6


# --------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class ReadoutModel:
    """Poisson photon-count discrimination between bright and dark."""

    lambda_bright: float
    lambda_dark: float
    threshold: int
    contrast_penalty: float = 0.0

    def __post_init__(self):
        if not self.lambda_bright > self.lambda_dark >= 0.0:
            raise ValueError("need lambda_bright > lambda_dark >= 0")
        if self.threshold < 1:
            raise ValueError("threshold must be >= 1")
        if not 0.0 <= self.contrast_penalty <= 1.0:
            raise ValueError("contrast_penalty must be in [0, 1]")

    def side_fidelities(self) -> tuple[float, float]:
        """(P(bright measured | bright), P(dark measured | dark)), analytic."""
        p_ge_b = float(poisson.sf(self.threshold - 1, self.lambda_bright))
        p_ge_d = float(poisson.sf(self.threshold - 1, self.lambda_dark))
        pen = self.contrast_penalty
        eps_b = (1 - pen) * p_ge_b + pen * p_ge_d
        eps_d = (1 - pen) * (1 - p_ge_d) + pen * (1 - p_ge_b)
        return eps_b, eps_d

    def discrimination_fidelity(self) -> float:
        eps_b, eps_d = self.side_fidelities()
        return (eps_b + eps_d) / 2.0

    def contrast_factor(self) -> float:
        """Multiplicative contrast penalty on any atomic correlation."""
        eps_b, eps_d = self.side_fidelities()
        return eps_b + eps_d - 1.0


@dataclass(frozen=True)
class DephasingModel:
    """Quasi-static Gaussian field noise plus mains-frequency sinusoids.

    The noise is slow against the pulse sequence, so one field sample per
    shot is the right regime; the 50/150 Hz components get one random
    phase per run and are sampled at the shot's wall-clock time.
    """

    b_noise_rms_mg: float
    ac_components: tuple[tuple[float, float], ...] = ()  # (freq_hz, amp_mg)
    pulse_sequence_duration_us: float = 57.0

    def __post_init__(self):
        if self.b_noise_rms_mg < 0 or any(a < 0 for _, a in self.ac_components):
            raise ValueError("noise amplitudes must be >= 0")

    def sample_field_g(self, rng: np.random.Generator, n: int,
                       t_shot_s: np.ndarray, ac_phases: np.ndarray) -> np.ndarray:
        """Per-shot magnetic field deviation in Gauss."""
        db = rng.normal(0.0, self.b_noise_rms_mg * 1e-3, size=n)
        for k, (freq, amp) in enumerate(self.ac_components):
            db = db + amp * 1e-3 * np.sin(2 * np.pi * freq * t_shot_s + ac_phases[k])
        return db

    def sequence_phase_rad(self, db_g: np.ndarray) -> np.ndarray:
        """Equatorial phase error accumulated over the pulse sequence."""
        t = self.pulse_sequence_duration_us * 1e-6
        return 2 * np.pi * HYPERFINE_SENSITIVITY_HZ_PER_G * db_g * t


@dataclass(frozen=True)
class TimingModel:
    """Synchronisation jitter and the total equatorial phase budget."""

    sync_jitter_ps: float = 400.0
    phase_uncertainty_budget_rad: float = 0.05 * np.pi

    def __post_init__(self):
        if self.sync_jitter_ps < 0 or self.phase_uncertainty_budget_rad < 0:
            raise ValueError("timing parameters must be >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    b_field_mg: float = 603.6
    prep_fidelity: float = 1.0
    excitation_fidelity: float = 1.0
    p_cavity: float = 0.101
    eta_chain: float = 1.0
    dark_count_prob_h: float = 0.0
    dark_count_prob_v: float = 0.0
    readout: ReadoutModel = ReadoutModel(50.0, 0.0, 1)
    dephasing: DephasingModel = DephasingModel(0.0)
    timing: TimingModel = TimingModel(0.0, 0.0)
    wait_window_ns: float = 1000.0
    acceptance_window_ns: float = 10.0
    acceptance_window_start_ns: float | None = None
    attempt_period_us: float = 40.32
    shots: int = 100_000
    seed: int = 1
    shards: int = 8
    randomize_carrier: bool = True
    purity_target: float = 1.0
    z_contrast_target: float | None = None
    misalign_atom_rad: float = 0.0
    misalign_photon_rad: float = 0.0
    gamma_purcell_mhz: float = 21.58
    tau_cavity_ns: float = 1.3

    def validate(self) -> list[str]:
        problems = []
        for name in ("prep_fidelity", "excitation_fidelity", "p_cavity",
                     "eta_chain", "dark_count_prob_h", "dark_count_prob_v"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                problems.append(f"{name} = {v} outside [0, 1]")
        if self.acceptance_window_ns <= 0:
            problems.append("acceptance_window_ns must be > 0")
        if self.acceptance_window_ns > self.wait_window_ns:
            problems.append("acceptance window exceeds the wait window")
        if self.shots < 0:
            problems.append("shots must be >= 0")
        if self.shards < 1:
            problems.append("shards must be >= 1")
        if not 0.25 <= self.purity_target <= 1.0:
            problems.append("purity_target outside [0.25, 1]")
        return problems

    @property
    def larmor_frequency_hz(self) -> float:
        return GYROMAGNETIC_MHZ_PER_G * 1e6 * self.b_field_mg * 1e-3

    @property
    def attempt_rate_hz(self) -> float:
        return 1e6 / self.attempt_period_us


# --------------------------------------------------------------------------
# emitted state and pulses


def calibrate_state_channels(
    purity_target: float, z_contrast_target: float | None = None
) -> tuple[float, float]:
    """(depolarizing weight w, z-dephasing weight d) hitting the targets.

    With only a purity target the dephasing channel is preferred while it
    suffices (purity >= 0.5); below that the depolarizing weight takes
    over.  With both targets the populations fix w = 1 - z_contrast and
    the coherence magnitude follows from the purity.
    """
    p = float(purity_target)
    if not 0.25 <= p <= 1.0:
        raise ValueError(f"purity target {p} outside [0.25, 1]")
    if z_contrast_target is None:
        if p >= 0.5:
            gamma = math.sqrt(2.0 * p - 1.0)
            return 0.0, (1.0 - gamma) / 2.0
        w = 1.0 - 2.0 * math.sqrt(p - 0.25)
        return w, 0.5
    c = float(z_contrast_target)
    if not 0.0 <= c <= 1.0:
        raise ValueError("z contrast target must be in [0, 1]")
    w = 1.0 - c
    pop_part = 0.5 - w / 2.0 + w * w / 4.0
    gamma_sq = 2.0 * (p - pop_part)
    if gamma_sq < -1e-12:
        raise ValueError(
            f"purity {p} infeasible at z contrast {c} (needs >= {pop_part:.4f})"
        )
    gamma = math.sqrt(max(gamma_sq, 0.0))
    if gamma > c + 1e-9:
        raise ValueError(
            f"purity {p} infeasible at z contrast {c}: coherence {gamma:.4f} "
            f"would exceed the population bound {c:.4f}"
        )
    d = (1.0 - min(gamma / c, 1.0)) / 2.0 if c > 0 else 0.5
    return w, d


def emitted_joint_state(config: ExperimentConfig) -> np.ndarray:
    """Bell target mixed with white noise and atomic z dephasing.

    The two channel weights are calibrated so the state purity matches
    ``config.purity_target`` (and the z correlation matches
    ``config.z_contrast_target`` when given).
    """
    w, d = calibrate_state_channels(config.purity_target, config.z_contrast_target)
    rho = qcore.bell_target_density()
    z_op = qcore.kron(qcore.atom_pauli("z"), np.eye(2))
    rho = (1.0 - d) * rho + d * (z_op @ rho @ z_op)
    return (1.0 - w) * rho + w * np.eye(4) / 4.0


def _rotation_about(op: np.ndarray, angle: float) -> np.ndarray:
    return (np.cos(angle / 2.0) * np.eye(2) - 1j * np.sin(angle / 2.0) * op)


def misalignment_unitaries(config: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    """Residual static basis rotations on each qubit.

    Modeled as rotations about the y axis of each qubit's frame; equal
    and opposite angles are the symmetry-breaking combination that costs
    Bell overlap (correlated rotations leave the singlet-form state
    invariant) while leaving the parity extrema on the nominal phases.
    """
    ua = _rotation_about(qcore.atom_pauli("y"), config.misalign_atom_rad)
    up = _rotation_about(qcore.photon_pauli("y"), config.misalign_photon_rad)
    return ua, up


def _rz(phi):
    return np.array([[np.exp(-0.5j * phi), 0.0], [0.0, np.exp(0.5j * phi)]])


def atomic_pulse_unitary(
    delta_phi: float | None,
    carrier_phase: float = 0.0,
    noise_phase: float = 0.0,
) -> np.ndarray:
    """Composite mapping + rotation unitary on the atomic qubit.

    ``delta_phi=None`` means z readout: mapping pulse only.  The carrier
    phase must drop out of every measurement statistic; it is kept in
    the arithmetic on purpose.
    """
    u = _rz(noise_phase)
    u = np.diag([1.0, np.exp(1j * carrier_phase)]).astype(complex) @ u
    if delta_phi is not None:
        axis = qcore.equatorial(carrier_phase + delta_phi - np.pi / 2.0)
        u = _rotation_about(axis, np.pi / 2.0) @ u
    return u


def apply_atomic_pulses(
    rho: np.ndarray,
    delta_phi: float | None,
    larmor_frequency_hz: float,
    timing: TimingModel,
    dephase_phase_rad: float = 0.0,
    *,
    carrier_phase_rad: float = 0.0,
    jitter_s: float = 0.0,
    timing_phase_rad: float = 0.0,
) -> np.ndarray:
    """Reference per-shot state transformation through the pulse chain.

    The noise phase is the sum of the magnetic dephasing sample, the
    timing-budget sample and the Larmor phase of the trigger jitter.
    Measurement statistics in any basis are independent of
    ``carrier_phase_rad``.
    """
    phi_noise = (dephase_phase_rad + timing_phase_rad
                 + 2 * np.pi * larmor_frequency_hz * jitter_s)
    u = atomic_pulse_unitary(delta_phi, carrier_phase_rad, phi_noise)
    return qcore.apply_local_unitaries(rho, u, np.eye(2))


# --------------------------------------------------------------------------
# fluorescence readout


def fluorescence_readout(atom_is_bright: bool, model: ReadoutModel,
                         rng: np.random.Generator) -> bool:
    """One readout: Poisson counts against the threshold."""
    bright = bool(atom_is_bright)
    if model.contrast_penalty > 0.0 and rng.random() < model.contrast_penalty:
        bright = not bright
    lam = model.lambda_bright if bright else model.lambda_dark
    return int(rng.poisson(lam)) >= model.threshold


def _readout_vector(bright_true: np.ndarray, model: ReadoutModel,
                    rng: np.random.Generator) -> np.ndarray:
    eff = bright_true.copy()
    if model.contrast_penalty > 0.0:
        swap = rng.random(len(eff)) < model.contrast_penalty
        eff = eff ^ swap
    lam = np.where(eff, model.lambda_bright, model.lambda_dark)
    return rng.poisson(lam) >= model.threshold


# --------------------------------------------------------------------------
# shot records and dark counts


@dataclass
class ShotOutcome:
    attempt_index: int
    setting: tuple
    photon_port: str | None = None       # "H" | "V"
    arrival_time_ns: float | None = None
    is_dark_count: bool = False          # simulator ground truth only
    atom_bright: bool | None = None
    accepted: bool = False


def inject_dark_counts(
    shot: ShotOutcome,
    p_h: float,
    p_v: float,
    rng: np.random.Generator,
    *,
    wait_window_ns: float = 1000.0,
) -> ShotOutcome:
    """Add spurious detector events, uniform over the wait window.

    A real photon already present wins the race for all but a vanishing
    fraction of shots (it arrives within nanoseconds) and is kept.  On an
    empty shot the earlier of the fired dark counts is recorded.
    """
    if not 0.0 <= p_h <= 1.0 or not 0.0 <= p_v <= 1.0:
        raise ValueError("dark-count probabilities must be in [0, 1]")
    fire_h = rng.random() < p_h
    fire_v = rng.random() < p_v
    t_h = rng.random() * wait_window_ns
    t_v = rng.random() * wait_window_ns
    if shot.photon_port is not None or not (fire_h or fire_v):
        return shot
    if fire_h and (not fire_v or t_h <= t_v):
        port, t = "H", t_h
    else:
        port, t = "V", t_v
    return replace(shot, photon_port=port, arrival_time_ns=t, is_dark_count=True)


# --------------------------------------------------------------------------
# run summary


@dataclass
class RunSummary:
    """Aggregated counts per (photon basis, delta_phi) setting.

    ``cells[k]`` is the accepted-event count array in the count-table
    layout [atom, photon]: atom 0 = bright, photon 0 = H port.
    """

    settings: list
    attempts: np.ndarray
    detected: np.ndarray
    accepted: np.ndarray
    cells: np.ndarray
    duration_s: float
    seed: int
    shards: int

    def total_attempts(self) -> int:
        return int(self.attempts.sum())

    def detection_probability(self) -> float:
        return float(self.accepted.sum() / max(self.attempts.sum(), 1))


def _normalise_setting(setting) -> tuple[int, float | None]:
    basis, dphi = setting
    return qcore.pauli_index(basis), (None if dphi is None else float(dphi))


def _run_shard(config, setting, n_attempts, attempt_offset, seed_key,
               ac_phases, photon_ops, rho_mis, prof_pack, log_events):
    """One shard of one setting; returns ((2,2) cells, detected, accepted, log)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed_key))
    basis, dphi = setting
    n = int(n_attempts)
    if n == 0:
        return np.zeros((2, 2), dtype=np.int64), 0, 0, []
    wait = config.wait_window_ns
    # stage draws, fixed order for stream stability
    u_prep = rng.random(n)
    u_exc = rng.random(n)
    u_emit = rng.random(n)
    u_dark_h = rng.random(n)
    u_dark_v = rng.random(n)
    t_dark_h = rng.random(n) * wait
    t_dark_v = rng.random(n) * wait
    real = ((u_prep < config.prep_fidelity)
            & (u_exc < config.excitation_fidelity)
            & (u_emit < config.p_cavity * config.eta_chain))
    fire_h = u_dark_h < config.dark_count_prob_h
    fire_v = u_dark_v < config.dark_count_prob_v

    idx_real = np.flatnonzero(real)
    prof_times, prof_cdf = prof_pack
    t_real = np.interp(rng.random(len(idx_real)) * prof_cdf[-1],
                       prof_cdf, prof_times) * 1e9

    # quantum outcomes for real photons
    r_h, r_v = photon_ops[basis]
    n_evt = len(idx_real)
    t_shot = (attempt_offset + idx_real) * config.attempt_period_us * 1e-6
    db = config.dephasing.sample_field_g(rng, n_evt, t_shot, ac_phases)
    phi_b = config.dephasing.sequence_phase_rad(db)
    budget = config.timing.phase_uncertainty_budget_rad
    phi_t = rng.uniform(-budget, budget, size=n_evt) if budget > 0 else np.zeros(n_evt)
    jitter = rng.normal(0.0, config.timing.sync_jitter_ps * 1e-12, size=n_evt)
    phi_j = 2 * np.pi * config.larmor_frequency_hz * jitter
    theta_c = rng.uniform(0.0, 2 * np.pi, size=n_evt)
    if not config.randomize_carrier:
        theta_c = np.zeros(n_evt)
    phi_noise = phi_b + phi_t + phi_j

    # batched pulse unitaries and joint Born probabilities
    if dphi is None:
        # z readout: probabilities are phase independent
        probs = _joint_probs_z(rho_mis, r_h, r_v)
        p4 = np.broadcast_to(probs.ravel(), (n_evt, 4))
    else:
        p4 = _joint_probs_equatorial(rho_mis, r_h, r_v, dphi, theta_c, phi_noise)
    u_out = rng.random(n_evt)
    cum = np.cumsum(p4, axis=1)
    cum = cum / cum[:, -1][:, None]
    outcome = (u_out[:, None] > cum).sum(axis=1)  # 0..3 -> (atom+,H),(atom+,V),(atom-,H),(atom-,V)
    atom_plus = outcome < 2
    port_h = (outcome % 2) == 0

    # event resolution per attempt: real wins, else earlier dark
    port = np.full(n, -1, dtype=np.int8)  # 0 = H, 1 = V, -1 = none
    t_evt = np.full(n, np.nan)
    is_dark = np.zeros(n, dtype=bool)
    port[idx_real] = np.where(port_h, 0, 1)
    t_evt[idx_real] = t_real
    only_dark = ~real & (fire_h | fire_v)
    th = np.where(fire_h, t_dark_h, np.inf)
    tv = np.where(fire_v, t_dark_v, np.inf)
    dark_h_first = th <= tv
    port[only_dark] = np.where(dark_h_first[only_dark], 0, 1)
    t_evt[only_dark] = np.minimum(th, tv)[only_dark]
    is_dark[only_dark] = True

    detected = port >= 0
    idx_evt = np.flatnonzero(detected)
    start = (config.acceptance_window_start_ns
             if config.acceptance_window_start_ns is not None else 0.0)
    accepted = detected & (t_evt >= start) & (t_evt <= start + config.acceptance_window_ns)

    # atomic readout for every detected event (sequence branches on the click)
    bright_true = np.zeros(n, dtype=bool)
    bright_true[idx_real] = atom_plus
    n_dark_evt = int(is_dark.sum())
    bright_true[is_dark] = rng.random(n_dark_evt) < 0.5
    measured = np.zeros(n, dtype=bool)
    measured[idx_evt] = _readout_vector(bright_true[idx_evt], config.readout, rng)

    # tally accepted events
    cells = np.zeros((2, 2), dtype=np.int64)
    acc = np.flatnonzero(accepted)
    a_idx = (~measured[acc]).astype(np.int64)      # 0 bright, 1 dark
    p_idx = port[acc].astype(np.int64)             # 0 H, 1 V
    np.add.at(cells, (a_idx, p_idx), 1)

    log = []
    if log_events:
        for i in idx_evt:
            log.append(ShotOutcome(
                attempt_index=int(attempt_offset + i),
                setting=(basis, dphi),
                photon_port="H" if port[i] == 0 else "V",
                arrival_time_ns=float(t_evt[i]),
                is_dark_count=bool(is_dark[i]),
                atom_bright=bool(measured[i]),
                accepted=bool(accepted[i]),
            ))
    return cells, int(detected.sum()), int(accepted.sum()), log


def _photon_setting_ops(rho_mis: np.ndarray, basis: int):
    """Atom-space operators after projecting the photon on H (+1) / V (-1)."""
    op = qcore.photon_pauli(basis)
    p_plus, p_minus = qcore.eigenprojectors(op)
    rho4 = rho_mis.reshape(2, 2, 2, 2)
    r_h = np.einsum("ikjl,lk->ij", rho4, p_plus)
    r_v = np.einsum("ikjl,lk->ij", rho4, p_minus)
    return r_h, r_v


def _joint_probs_z(rho_mis, r_h, r_v) -> np.ndarray:
    """(2, 2) outcome probabilities for atomic z readout, [atom+, photon H]."""
    pz_plus = np.array([[1.0, 0.0], [0.0, 0.0]])
    pz_minus = np.array([[0.0, 0.0], [0.0, 1.0]])
    out = np.empty((2, 2))
    out[0, 0] = np.trace(pz_plus @ r_h).real
    out[0, 1] = np.trace(pz_plus @ r_v).real
    out[1, 0] = np.trace(pz_minus @ r_h).real
    out[1, 1] = np.trace(pz_minus @ r_v).real
    return np.clip(out, 0.0, None)


def _joint_probs_equatorial(rho_mis, r_h, r_v, dphi, theta_c, phi_noise):
    """Outcome probabilities through the explicit batched pulse chain.

    Column order (atom+, H), (atom+, V), (atom-, H), (atom-, V).
    """
    n = len(theta_c)
    u = np.empty((n, 2, 2), dtype=complex)
    # U = Upi2(axis) . diag(1, e^{i thc}) . Rz(phi_noise); the -pi/2 axis
    # offset is the pulse-phase zero that makes delta_phi select the
    # equatorial readout axis directly.
    axis = theta_c + dphi - np.pi / 2.0
    h = 1.0 / np.sqrt(2.0)
    u[:, 0, 0] = h
    u[:, 0, 1] = -1j * h * np.exp(-1j * axis)
    u[:, 1, 0] = -1j * h * np.exp(1j * axis)
    u[:, 1, 1] = h
    imprint = np.exp(1j * theta_c)
    phase = np.exp(0.5j * phi_noise)
    # right-multiply by diag(e^{-i phi/2}, e^{i phi/2} e^{i thc})
    u[:, :, 0] = u[:, :, 0] * np.conj(phase)[:, None]
    u[:, :, 1] = u[:, :, 1] * (phase * imprint)[:, None]
    # measured operator = U^dag P_z U; probabilities via the photon-projected
    # atom operators r_h, r_v
    top = u[:, 0, :]      # row of U entering P+ = |0><0|
    bot = u[:, 1, :]
    m_plus = np.einsum("ni,nj->nij", np.conj(top), top)
    m_minus = np.einsum("ni,nj->nij", np.conj(bot), bot)
    p = np.empty((n, 4))
    p[:, 0] = np.einsum("nij,ji->n", m_plus, r_h).real
    p[:, 1] = np.einsum("nij,ji->n", m_plus, r_v).real
    p[:, 2] = np.einsum("nij,ji->n", m_minus, r_h).real
    p[:, 3] = np.einsum("nij,ji->n", m_minus, r_v).real
    return np.clip(p, 0.0, None)


def run_sequence(
    config: ExperimentConfig,
    settings,
    *,
    attempts_per_setting=None,
    threads: int | None = None,
    log_events: bool = False,
) -> tuple[RunSummary, list]:
    """Simulate the full sequence for a list of (photon basis, delta_phi).

    ``delta_phi=None`` selects atomic z readout.  ``attempts_per_setting``
    overrides the uniform split of ``config.shots``.  Shot logs are only
    kept on request; they hold one record per detected photon event.
    """
    problems = config.validate()
    if problems:
        raise ValueError("; ".join(problems))
    settings = [_normalise_setting(s) for s in settings]
    if not settings:
        raise ValueError("settings list is empty")
    if attempts_per_setting is None:
        base = config.shots // len(settings)
        attempts_per_setting = [base] * len(settings)
        attempts_per_setting[-1] += config.shots - base * len(settings)
    if len(attempts_per_setting) != len(settings):
        raise ValueError("attempts_per_setting length mismatch")

    rho = emitted_joint_state(config)
    ua, up = misalignment_unitaries(config)
    rho_mis = qcore.apply_local_unitaries(rho, ua, up)
    profile = cavity.photon_wavepacket(
        cavity.mhz_to_angular(config.gamma_purcell_mhz),
        config.tau_cavity_ns * 1e-9,
    )
    prof_cdf = profile.cumulative()
    prof_pack = (profile.times, prof_cdf)

    # one random mains phase per component per run
    run_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0xAC)))
    ac_phases = run_rng.uniform(0, 2 * np.pi, size=max(len(config.dephasing.ac_components), 1))

    photon_ops = {}
    for basis, _ in settings:
        if basis not in photon_ops:
            photon_ops[basis] = _photon_setting_ops(rho_mis, basis)

    jobs = []
    offset = 0
    for s_idx, (setting, n_total) in enumerate(zip(settings, attempts_per_setting)):
        per = int(n_total) // config.shards
        for shard in range(config.shards):
            n = per + (int(n_total) - per * config.shards if shard == config.shards - 1 else 0)
            jobs.append((s_idx, setting, n, offset, (config.seed, s_idx, shard)))
            offset += n

    def work(job):
        s_idx, setting, n, off, key = job
        return s_idx, _run_shard(config, setting, n, off, key, ac_phases,
                                 photon_ops, rho_mis, prof_pack, log_events)

    results = []
    if threads is not None and threads <= 1:
        results = [work(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, jobs))

    cells = np.zeros((len(settings), 2, 2), dtype=np.int64)
    detected = np.zeros(len(settings), dtype=np.int64)
    accepted = np.zeros(len(settings), dtype=np.int64)
    log: list = []
    for s_idx, (c, det, acc, shard_log) in results:
        cells[s_idx] += c
        detected[s_idx] += det
        accepted[s_idx] += acc
        log.extend(shard_log)
    log.sort(key=lambda r: r.attempt_index)
    attempts = np.array([int(n) for n in attempts_per_setting], dtype=np.int64)
    summary = RunSummary(
        settings=settings,
        attempts=attempts,
        detected=detected,
        accepted=accepted,
        cells=cells,
        duration_s=float(attempts.sum() * config.attempt_period_us * 1e-6),
        seed=config.seed,
        shards=config.shards,
    )
    return summary, log


# --------------------------------------------------------------------------
# Ramsey coherence


def ramsey_visibility_analytic(
    qubit: str, hold_times_us, dephasing: DephasingModel
) -> np.ndarray:
    """Expected fringe visibility per hold time under the noise model.

    Gaussian quasi-static noise contributes exp(-sigma_phi^2 / 2); each
    mains sinusoid with a random phase contributes a J0 factor.
    """
    sens = _qubit_sensitivity(qubit)
    t = np.asarray(hold_times_us, dtype=float) * 1e-6
    sig_phi = 2 * np.pi * sens * dephasing.b_noise_rms_mg * 1e-3 * t
    vis = np.exp(-0.5 * sig_phi**2)
    for freq, amp in dephasing.ac_components:
        vis = vis * j0(2 * np.pi * sens * amp * 1e-3 * t)
    return vis


def _qubit_sensitivity(qubit: str) -> float:
    if qubit == "zeeman":
        return ZEEMAN_SENSITIVITY_HZ_PER_G
    if qubit == "hyperfine":
        return HYPERFINE_SENSITIVITY_HZ_PER_G
    raise ValueError(f"unknown qubit {qubit!r}; use 'zeeman' or 'hyperfine'")


def simulate_ramsey(
    qubit: str,
    hold_times_us,
    dephasing: DephasingModel,
    shots_per_point: int,
    *,
    phase_points: int = 12,
    seed: int = 1,
    shot_period_us: float = 600.0,
) -> np.ndarray:
    """Fringe visibility of a two-pulse sequence per hold time.

    For every hold time the relative phase of the closing pulse is
    scanned; fitted sinusoid amplitude over mean gives the visibility.
    """
    hold = np.asarray(hold_times_us, dtype=float)
    if (hold <= 0).any():
        raise ValueError("hold times must be positive")
    if shots_per_point < 100:
        raise ValueError("need at least 100 shots per phase point for the fit")
    sens = _qubit_sensitivity(qubit)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x9A)))
    ac_phases = rng.uniform(0, 2 * np.pi, size=max(len(dephasing.ac_components), 1))
    phases = np.linspace(0.0, 2 * np.pi, phase_points, endpoint=False)
    vis = np.empty(len(hold))
    shot_counter = 0
    for k, t_us in enumerate(hold):
        frac = np.empty(phase_points)
        for m, ph in enumerate(phases):
            t_shot = (shot_counter + np.arange(shots_per_point)) * shot_period_us * 1e-6
            shot_counter += shots_per_point
            db = dephasing.sample_field_g(rng, shots_per_point, t_shot, ac_phases)
            noise_phase = 2 * np.pi * sens * db * t_us * 1e-6
            p_bright = 0.5 * (1.0 + np.cos(ph + noise_phase))
            frac[m] = (rng.random(shots_per_point) < p_bright).mean()
        x = np.column_stack([np.cos(phases), np.sin(phases), np.ones_like(phases)])
        coef, *_ = np.linalg.lstsq(x, frac, rcond=None)
        vis[k] = float(np.clip(2.0 * np.hypot(coef[0], coef[1]), 0.0, 1.0))
    return vis


def solve_lambda_dark(
    target_fidelity: float, lambda_bright: float, threshold: int
) -> float:
    """Dark-period Poisson mean reproducing a discrimination fidelity.

    The bright/dark histograms themselves are not published, only the
    discrimination fidelity; the dark mean is the free parameter fitted
    against the analytic Poisson-threshold expression.
    """
    from scipy.optimize import brentq

    def fid(lam_d):
        return ReadoutModel(lambda_bright, lam_d, threshold).discrimination_fidelity()

    hi = lambda_bright * 0.999
    if not fid(hi) <= target_fidelity <= fid(1e-12):
        raise ValueError("target fidelity unreachable at this bright mean")
    return float(brentq(lambda l: fid(l) - target_fidelity, 1e-12, hi, xtol=1e-12))


def calibrate_field_noise(
    target_tau_us: float,
    hold_times_us,
    *,
    qubit: str = "zeeman",
    ac_components: tuple = (),
    pulse_sequence_duration_us: float = 57.0,
) -> float:
    """Quasi-static noise rms (mG) whose fitted coherence time hits target.

    The fitted time comes from the same single-parameter exponential fit
    applied to the analytic visibility curve, so simulation noise is the
    only source of deviation afterwards.
    """
    from scipy.optimize import brentq

    hold = np.asarray(hold_times_us, dtype=float)

    def fitted(sig_mg):
        model = DephasingModel(sig_mg, tuple(ac_components),
                               pulse_sequence_duration_us)
        vis = ramsey_visibility_analytic(qubit, hold, model)
        return tomo.ramsey_fit(hold, vis).tau

    lo, hi = 1e-6, 10.0
    if fitted(hi) > target_tau_us:
        raise ValueError("target coherence time too short for the search range")
    return float(brentq(lambda s: fitted(s) - target_tau_us, lo, hi, xtol=1e-10))


# --------------------------------------------------------------------------
# arrival-time histogram


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    fwhm_ns: float | None

    def centers(self) -> np.ndarray:
        return (self.edges[:-1] + self.edges[1:]) / 2.0


def arrival_time_histogram(times_ns, bin_width_ns: float) -> Histogram:
    """Bin photon arrival times; FWHM interpolated between bin centers."""
    t = np.asarray(times_ns, dtype=float)
    if t.size < 2:
        raise ValueError("histogram needs at least two events")
    if bin_width_ns <= 0:
        raise ValueError("bin width must be positive")
    lo = np.floor(t.min() / bin_width_ns) * bin_width_ns
    hi = np.ceil(t.max() / bin_width_ns) * bin_width_ns
    edges = np.arange(lo, hi + bin_width_ns / 2, bin_width_ns)
    counts, _ = np.histogram(t, bins=edges)
    centers = (edges[:-1] + edges[1:]) / 2.0
    fwhm = None
    ipk = int(np.argmax(counts))
    if counts[ipk] >= 4 and 0 < ipk < len(counts) - 1:
        half = counts[ipk] / 2.0
        left = np.interp(half, counts[: ipk + 1], centers[: ipk + 1])
        right = np.interp(-half, -counts[ipk:].astype(float), centers[ipk:])
        fwhm = float(right - left)
    return Histogram(edges=edges, counts=counts, fwhm_ns=fwhm)


# --------------------------------------------------------------------------
# summary persistence

SUMMARY_HEADER = "basis,delta_phi_rad,hv,hd,vb,vd"
_BASIS_NAMES = {1: "x", 2: "y", 3: "z"}


def write_summary_csv(summary: RunSummary, path) -> None:
    """Counts CSV; the pinned header names mean (port, bright/dark):
    hv = (H, bright), hd = (H, dark), vb = (V, bright), vd = (V, dark)."""
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write(SUMMARY_HEADER + "\n")
        for k, (basis, dphi) in enumerate(summary.settings):
            c = summary.cells[k]
            dp = "" if dphi is None else f"{dphi:.10f}"
            fh.write(f"{_BASIS_NAMES[basis]},{dp},{c[0,0]},{c[1,0]},{c[0,1]},{c[1,1]}\n")


def read_summary_csv(path):
    """Rows of (photon basis index, delta_phi or None, (2,2) cells)."""
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().rstrip("\n")
        if header != SUMMARY_HEADER:
            raise ValueError(f"line 1: expected header {SUMMARY_HEADER!r}")
        for ln, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 6:
                raise ValueError(f"line {ln}: expected 6 fields, got {len(parts)}")
            name, dp = parts[0], parts[1]
            try:
                basis = qcore.pauli_index(name)
                dphi = None if dp == "" else float(dp)
                hv, hd, vb, vd = (int(x) for x in parts[2:])
            except (ValueError, KeyError):
                raise ValueError(f"line {ln}: cannot parse {line!r}") from None
            cells = np.array([[hv, vb], [hd, vd]], dtype=float)
            rows.append((basis, dphi, cells))
    if not rows:
        raise ValueError("summary file contains no data rows")
    return rows


def write_summary_meta(summary: RunSummary, config_hash: str, path) -> None:
    meta = {
        "seed": summary.seed,
        "config_hash": config_hash,
        "shards": summary.shards,
        "attempts": [int(a) for a in summary.attempts],
        "detected": [int(d) for d in summary.detected],
        "accepted": [int(a) for a in summary.accepted],
        "settings": [[_BASIS_NAMES[b], dp] for b, dp in summary.settings],
        "duration_s": summary.duration_s,
    }
    with open(path, "w", encoding="ascii") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_shot_log(log, path) -> None:
    """Line-delimited JSON, one record per detected photon event."""
    with open(path, "w", encoding="ascii") as fh:
        for rec in log:
            fh.write(json.dumps({
                "attempt": rec.attempt_index,
                "basis": _BASIS_NAMES[rec.setting[0]],
                "delta_phi": rec.setting[1],
                "port": rec.photon_port,
                "t_ns": None if rec.arrival_time_ns is None
                        else round(rec.arrival_time_ns, 6),
                "dark": rec.is_dark_count,
                "atom_bright": rec.atom_bright,
                "accepted": rec.accepted,
            }) + "\n")
