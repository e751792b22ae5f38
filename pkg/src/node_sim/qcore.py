"""Exact linear algebra for the atom-photon qubit pair.

Conventions (fixed once, used everywhere):

* Two-qubit states are 4x4 complex density matrices, atom factor first.
* Atom basis order: ``(|up>, |down>)`` where ``|up>`` is the bright
  hyperfine state and ``|down>`` the dark one.  Photon basis order:
  ``(|V>, |H>)``.  Composite index order: ``upV, upH, downV, downH``.
* The target entangled state is ``(|up,V> - |down,H>)/sqrt(2)``: a V
  click heralds a bright atom.
* Each qubit carries its own Pauli frame.  The atom frame uses
  ``sigma_z = diag(+1, -1)`` and equatorial operators with phase
  conventions ``phi_x = +pi/4`` and ``phi_y = -pi/4`` (the superposition
  phases that make the microwave-pulse and waveplate angles come out
  simple).  The photon frame is the spin-flip image of the atom frame:
  ``sigma_z = diag(-1, +1)`` in (V, H) and conjugated equatorial phases.
  With this pair of frames the target state is anticorrelated in all
  three joint bases, ``S_xx = S_yy = S_zz = -1``, exactly like a singlet.

Every operator pair ``(A_i, B_j)`` used here forms an orthogonal
Hermitian basis, so ``rho = (1/4) sum_ij S_ij A_i (x) B_j`` holds for any
state; tomography relies on that identity.

All operations are pure functions on immutable inputs.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

# Algebraic comparisons (expectations, unitarity, hermiticity checks).
TOL_ALGEBRA = 1e-10
# Construction-level identities (trace normalisation, serialisation).
TOL_CONSTRUCTION = 1e-12

# Superposition phase conventions for the equatorial operators.
PHASE_X = np.pi / 4
PHASE_Y = -np.pi / 4

_LABELS = {0: 0, 1: 1, 2: 2, 3: 3, "i": 0, "1": 0, "x": 1, "y": 2, "z": 3}


def pauli_index(label) -> int:
    """Normalise a Pauli label (0..3 or one of 'i1xyz') to an index."""
    try:
        return _LABELS[label if isinstance(label, int) else str(label).lower()]
    except KeyError:
        raise ValueError(f"unknown Pauli label {label!r}") from None


def equatorial(phi: float) -> np.ndarray:
    """Traceless Hermitian unitary with +1 eigenvector (|0> + e^{i phi}|1>)/sqrt2."""
    return np.array([[0.0, np.exp(-1j * phi)], [np.exp(1j * phi), 0.0]])


def atom_pauli(label) -> np.ndarray:
    """Atom-frame operator for a Pauli label (identity, x, y, z)."""
    i = pauli_index(label)
    if i == 0:
        return np.eye(2, dtype=complex)
    if i == 1:
        return equatorial(PHASE_X)
    if i == 2:
        return equatorial(PHASE_Y)
    return np.diag([1.0 + 0j, -1.0])


def photon_pauli(label) -> np.ndarray:
    """Photon-frame operator: spin-flip mirror of the atom frame.

    sigma_z assigns +1 to H and -1 to V; the equatorial phases are the
    negatives of the atom ones.  This is the convention under which the
    emitted state shows perfect anticorrelation in every joint basis.
    """
    i = pauli_index(label)
    if i == 0:
        return np.eye(2, dtype=complex)
    if i == 1:
        return equatorial(-PHASE_X)
    if i == 2:
        return equatorial(-PHASE_Y)
    return np.diag([-1.0 + 0j, 1.0])


def kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Tensor product with the atom factor first. Inputs must be 2x2."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != (2, 2) or b.shape != (2, 2):
        raise ValueError(f"kron expects 2x2 factors, got {a.shape} and {b.shape}")
    return np.kron(a, b)


def bell_target() -> np.ndarray:
    """Target state ket (|up,V> - |down,H>)/sqrt(2)."""
    psi = np.zeros(4, dtype=complex)
    psi[0] = 1.0 / np.sqrt(2.0)
    psi[3] = -1.0 / np.sqrt(2.0)
    return psi


def bell_target_density() -> np.ndarray:
    psi = bell_target()
    return np.outer(psi, psi.conj())


def _check_hermitian(rho: np.ndarray, tol: float) -> None:
    dev = np.abs(rho - rho.conj().T).max()
    if dev > tol:
        raise ValueError(f"matrix is not Hermitian within {tol:g} (deviation {dev:.3e})")


def pauli_expectation(rho: np.ndarray, i, j, *, tol: float = TOL_ALGEBRA) -> float:
    """Joint expectation S_ij = Tr(rho . A_i (x) B_j).

    ``i`` selects the atom-frame operator, ``j`` the photon-frame one.
    """
    rho = np.asarray(rho, dtype=complex)
    _check_hermitian(rho, tol)
    val = np.trace(rho @ kron(atom_pauli(i), photon_pauli(j)))
    if abs(val.imag) > tol:
        raise ValueError(f"expectation has imaginary part {val.imag:.3e}")
    return float(val.real)


def expectation_table(rho: np.ndarray) -> np.ndarray:
    """All sixteen S_ij as a real (4, 4) array, S[0, 0] = 1."""
    return np.array(
        [[pauli_expectation(rho, i, j) for j in range(4)] for i in range(4)]
    )


def purity(rho: np.ndarray) -> float:
    """Tr(rho^2); 1 for pure states, 0.25 for the maximally mixed one."""
    rho = np.asarray(rho, dtype=complex)
    return float(np.trace(rho @ rho).real)


def state_fidelity(rho: np.ndarray, psi: np.ndarray) -> float:
    """Overlap <psi|rho|psi> with a normalised pure state ket."""
    psi = np.asarray(psi, dtype=complex)
    norm = np.linalg.norm(psi)
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"pure state must be normalised (|psi| = {norm:.6f})")
    return float((psi.conj() @ np.asarray(rho, dtype=complex) @ psi).real)


def _check_unitary(u: np.ndarray, tol: float, name: str) -> None:
    dev = np.abs(u @ u.conj().T - np.eye(u.shape[0])).max()
    if dev > tol:
        raise ValueError(f"{name} is not unitary within {tol:g} (deviation {dev:.3e})")


def apply_local_unitaries(
    rho: np.ndarray,
    u_atom: np.ndarray,
    u_photon: np.ndarray,
    *,
    tol: float = TOL_ALGEBRA,
) -> np.ndarray:
    """(Ua (x) Up) rho (Ua (x) Up)^dagger. Spectrum and purity are preserved."""
    u_atom = np.asarray(u_atom, dtype=complex)
    u_photon = np.asarray(u_photon, dtype=complex)
    _check_unitary(u_atom, tol, "u_atom")
    _check_unitary(u_photon, tol, "u_photon")
    u = kron(u_atom, u_photon)
    return u @ np.asarray(rho, dtype=complex) @ u.conj().T


@dataclass(frozen=True)
class PhysicalityReport:
    """Diagnostic result of a density-matrix physicality check."""

    ok: bool
    min_eigenvalue: float
    trace_deviation: float
    hermiticity_deviation: float

    def __bool__(self) -> bool:
        return self.ok


def is_physical(rho: np.ndarray, tol: float = 1e-9) -> PhysicalityReport:
    """Check Hermiticity, unit trace and positive semidefiniteness.

    Never raises: estimators produce non-physical candidates routinely and
    the caller needs the diagnostic, not an exception.
    """
    rho = np.asarray(rho, dtype=complex)
    herm = float(np.abs(rho - rho.conj().T).max())
    trdev = float(abs(np.trace(rho).real - 1.0) + abs(np.trace(rho).imag))
    sym = (rho + rho.conj().T) / 2.0
    mineig = float(np.linalg.eigvalsh(sym).min())
    ok = herm <= tol and trdev <= tol and mineig >= -tol
    return PhysicalityReport(ok, mineig, trdev, herm)


def joint_outcome_probabilities(
    rho: np.ndarray, atom_op: np.ndarray, photon_op: np.ndarray
) -> np.ndarray:
    """Born probabilities for a joint two-outcome measurement.

    Returns a (2, 2) array indexed ``[atom_outcome, photon_outcome]`` with
    index 0 = +1 eigenvalue and index 1 = -1 eigenvalue of the respective
    operator.
    """
    rho = np.asarray(rho, dtype=complex)
    pa = eigenprojectors(atom_op)
    pp = eigenprojectors(photon_op)
    out = np.empty((2, 2))
    for a in (0, 1):
        for p in (0, 1):
            out[a, p] = np.trace(rho @ kron(pa[a], pp[p])).real
    return out


def eigenprojectors(op: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(P_plus, P_minus) for a traceless Hermitian unitary 2x2 operator."""
    op = np.asarray(op, dtype=complex)
    eye = np.eye(2)
    return (eye + op) / 2.0, (eye - op) / 2.0


def random_physical_state(rng: np.random.Generator, rank: int = 4) -> np.ndarray:
    """Random density matrix from the Ginibre ensemble with given rank."""
    if not 1 <= rank <= 4:
        raise ValueError("rank must be in 1..4")
    g = rng.normal(size=(4, rank)) + 1j * rng.normal(size=(4, rank))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real


def random_unitary(rng: np.random.Generator, dim: int = 2) -> np.ndarray:
    """Haar-random unitary via QR with phase fixing."""
    g = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    q, r = np.linalg.qr(g)
    d = np.diagonal(r)
    return q * (d / np.abs(d))


# --- plain-text serialisation -------------------------------------------
#
# Four lines of four entries, each entry "re+imi" with 17 significant
# digits, which round-trips IEEE doubles exactly.


def format_density_matrix(rho: np.ndarray) -> str:
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (4, 4):
        raise ValueError(f"expected a 4x4 matrix, got {rho.shape}")
    lines = []
    for row in rho:
        lines.append(" ".join(f"{z.real:.17g}{z.imag:+.17g}i" for z in row))
    return "\n".join(lines) + "\n"


def parse_density_matrix(text: str) -> np.ndarray:
    rows = []
    for ln, line in enumerate(text.strip().splitlines(), start=1):
        entries = line.split()
        if len(entries) != 4:
            raise ValueError(f"line {ln}: expected 4 entries, got {len(entries)}")
        row = []
        for tok in entries:
            if not tok.endswith("i"):
                raise ValueError(f"line {ln}: entry {tok!r} does not end in 'i'")
            try:
                row.append(complex(tok[:-1] + "j"))
            except ValueError:
                raise ValueError(f"line {ln}: cannot parse entry {tok!r}") from None
        rows.append(row)
    if len(rows) != 4:
        raise ValueError(f"expected 4 lines, got {len(rows)}")
    return np.array(rows, dtype=complex)


def write_density_matrix(rho: np.ndarray, path) -> None:
    if isinstance(path, io.TextIOBase):
        path.write(format_density_matrix(rho))
    else:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(format_density_matrix(rho))


def read_density_matrix(path) -> np.ndarray:
    if isinstance(path, io.TextIOBase):
        return parse_density_matrix(path.read())
    with open(path, "r", encoding="ascii") as fh:
        return parse_density_matrix(fh.read())
