"""Configuration files: flat INI sections, dotted overrides, hashing.

One structured text file carries everything a run needs.  The CLI layers
values in fixed order: built-in defaults, then a preset, then --config,
then repeated --set section.key=value overrides, then the --seed/--shots
shortcuts.  Validation errors name the offending key and, where the text
is available, its line number.
"""

from __future__ import annotations

import configparser
import hashlib
import io

# key -> type tag: f float, i int, b bool, s string, fl float list
SCHEMA = {
    "run": {
        "seed": "i", "shots": "i", "shards": "i",
        "attempt_period_us": "f", "attempt_rate_hz": "f", "threads": "i",
    },
    "sequence": {
        "b_field_mg": "f", "prep_fidelity": "f", "excitation_fidelity": "f",
        "p_cavity": "f", "eta_chain": "f",
        "dark_count_prob_h": "f", "dark_count_prob_v": "f",
        "wait_window_ns": "f", "acceptance_window_ns": "f",
        "acceptance_window_start_ns": "f", "randomize_carrier": "b",
    },
    "state": {
        "purity_target": "f", "z_contrast_target": "f",
        "misalign_atom_rad": "f", "misalign_photon_rad": "f",
    },
    "readout": {
        "lambda_bright": "f", "lambda_dark": "f", "threshold": "i",
        "contrast_penalty": "f",
    },
    "dephasing": {
        "b_noise_rms_mg": "f", "ac_50hz_mg": "f", "ac_150hz_mg": "f",
        "pulse_sequence_duration_us": "f",
    },
    "timing": {
        "sync_jitter_ps": "f", "phase_uncertainty_budget_rad": "f",
    },
    "cavity": {
        "gamma_atom_mhz": "f", "kappa_mhz": "f", "gamma_purcell_mhz": "f",
        "tau_cavity_ns": "f",
    },
    "mirrors": {
        "t_out_ppm": "f", "t_other_ppm": "f", "loss_total_ppm": "f",
    },
    "geometry": {
        "length_um": "f", "r1_um": "f", "r2_um": "f", "wavelength_nm": "f",
    },
    "chain": {
        "epsilon_mode": "f", "eta_path": "f", "eta_detector": "f",
    },
    "budget": {
        "p_success_measured": "f",
    },
    "ramsey": {
        "hold_times_us": "fl", "phase_points": "i", "shots_per_point": "i",
        "target_tau_zeeman_us": "f",
    },
}


class ConfigError(ValueError):
    """Invalid configuration; message carries section.key and line info."""


def _find_line(text: str, section: str, key: str) -> str:
    in_section = False
    for ln, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            in_section = stripped[1:-1].strip() == section
        elif in_section and stripped.split("=")[0].strip() == key:
            return f" (line {ln})"
    return ""


def _convert(section: str, key: str, raw: str, text: str):
    kind = SCHEMA[section][key]
    where = f"{section}.{key}{_find_line(text, section, key)}"
    try:
        if kind == "f":
            return float(raw)
        if kind == "i":
            return int(raw)
        if kind == "b":
            low = raw.strip().lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if kind == "fl":
            return tuple(float(tok) for tok in raw.replace(",", " ").split())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind}") from None


def parse_config(text: str) -> dict:
    """Parse and validate INI text into {section: {key: typed value}}."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"config parse error: {err}") from None
    out: dict = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]"
                              + _find_line("\n" + text, section, ""))
        out.setdefault(section, {})
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(
                    f"unknown key {section}.{key}{_find_line(text, section, key)}"
                )
            out[section][key] = _convert(section, key, raw, text)
    return out


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def merge(base: dict, overlay: dict) -> dict:
    out = {s: dict(kv) for s, kv in base.items()}
    for section, kv in overlay.items():
        out.setdefault(section, {}).update(kv)
    return out


def apply_overrides(cfg: dict, assignments) -> dict:
    """Apply repeated ``section.key=value`` command-line overrides."""
    out = {s: dict(kv) for s, kv in cfg.items()}
    for item in assignments:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not section.key=value")
        dotted, raw = item.split("=", 1)
        section, key = dotted.strip().split(".", 1)
        section, key = section.strip(), key.strip()
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown override target {section}.{key}")
        out.setdefault(section, {})[key] = _convert(section, key, raw.strip(), "")
    return out


def dump_config(cfg: dict) -> str:
    """Canonical text form: sorted sections and keys, repr-stable values."""
    buf = io.StringIO()
    for section in sorted(cfg):
        buf.write(f"[{section}]\n")
        for key in sorted(cfg[section]):
            val = cfg[section][key]
            if isinstance(val, tuple):
                text = ", ".join(f"{v:.12g}" for v in val)
            elif isinstance(val, bool):
                text = "true" if val else "false"
            elif isinstance(val, float):
                text = f"{val:.17g}"
            else:
                text = str(val)
            buf.write(f"{key} = {text}\n")
        buf.write("\n")
    return buf.getvalue()


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(dump_config(cfg).encode("ascii")).hexdigest()


def get(cfg: dict, section: str, key: str, default=None):
    return cfg.get(section, {}).get(key, default)


def build_experiment_config(cfg: dict):
    """ExperimentConfig from the [run]/[sequence]/[state]/... sections."""
    from . import sequence as seq

    g = lambda s, k, d=None: get(cfg, s, k, d)
    readout = seq.ReadoutModel(
        lambda_bright=g("readout", "lambda_bright", 50.0),
        lambda_dark=g("readout", "lambda_dark", 0.0),
        threshold=g("readout", "threshold", 1),
        contrast_penalty=g("readout", "contrast_penalty", 0.0),
    )
    ac = []
    if g("dephasing", "ac_50hz_mg", 0.0):
        ac.append((50.0, g("dephasing", "ac_50hz_mg")))
    if g("dephasing", "ac_150hz_mg", 0.0):
        ac.append((150.0, g("dephasing", "ac_150hz_mg")))
    dephasing = seq.DephasingModel(
        b_noise_rms_mg=g("dephasing", "b_noise_rms_mg", 0.0),
        ac_components=tuple(ac),
        pulse_sequence_duration_us=g("dephasing", "pulse_sequence_duration_us", 57.0),
    )
    timing = seq.TimingModel(
        sync_jitter_ps=g("timing", "sync_jitter_ps", 0.0),
        phase_uncertainty_budget_rad=g("timing", "phase_uncertainty_budget_rad", 0.0),
    )
    return seq.ExperimentConfig(
        b_field_mg=g("sequence", "b_field_mg", 603.6),
        prep_fidelity=g("sequence", "prep_fidelity", 1.0),
        excitation_fidelity=g("sequence", "excitation_fidelity", 1.0),
        p_cavity=g("sequence", "p_cavity", 0.101),
        eta_chain=g("sequence", "eta_chain", 1.0),
        dark_count_prob_h=g("sequence", "dark_count_prob_h", 0.0),
        dark_count_prob_v=g("sequence", "dark_count_prob_v", 0.0),
        readout=readout,
        dephasing=dephasing,
        timing=timing,
        wait_window_ns=g("sequence", "wait_window_ns", 1000.0),
        acceptance_window_ns=g("sequence", "acceptance_window_ns", 10.0),
        acceptance_window_start_ns=g("sequence", "acceptance_window_start_ns"),
        attempt_period_us=g("run", "attempt_period_us", 40.32),
        shots=g("run", "shots", 100_000),
        seed=g("run", "seed", 1),
        shards=g("run", "shards", 8),
        randomize_carrier=g("sequence", "randomize_carrier", True),
        purity_target=g("state", "purity_target", 1.0),
        z_contrast_target=g("state", "z_contrast_target"),
        misalign_atom_rad=g("state", "misalign_atom_rad", 0.0),
        misalign_photon_rad=g("state", "misalign_photon_rad", 0.0),
        gamma_purcell_mhz=g("cavity", "gamma_purcell_mhz", 21.58),
        tau_cavity_ns=g("cavity", "tau_cavity_ns", 1.3),
    )


def build_budget_inputs(cfg: dict) -> dict:
    """Inputs for the closed-form budget from the cavity sections."""
    from . import cavity as cav

    g = lambda s, k, d=None: get(cfg, s, k, d)
    gamma_atom = cav.mhz_to_angular(g("cavity", "gamma_atom_mhz", 19.4))
    gamma_purcell = cav.mhz_to_angular(g("cavity", "gamma_purcell_mhz", 21.58))
    c_eff = cav.cooperativity_from_linewidth(gamma_purcell, gamma_atom)
    params = cav.AtomCavityParams(
        gamma_atom_full=gamma_atom,
        kappa=cav.mhz_to_angular(g("cavity", "kappa_mhz", 58.0)),
        c_eff=c_eff,
    )
    mirrors = cav.MirrorSet(
        t_out_ppm=g("mirrors", "t_out_ppm", 500.0),
        t_other_ppm=g("mirrors", "t_other_ppm", 100.0),
        loss_total_ppm=g("mirrors", "loss_total_ppm", 350.0),
    )
    geometry = cav.CavityGeometry(
        length_m=g("geometry", "length_um", 261.0) * 1e-6,
        r1_m=g("geometry", "r1_um", 255.0) * 1e-6,
        r2_m=g("geometry", "r2_um", 304.0) * 1e-6,
        wavelength_m=g("geometry", "wavelength_nm", 370.0) * 1e-9,
    )
    return dict(
        params=params,
        mirrors=mirrors,
        geometry=geometry,
        chain_tail=(
            g("chain", "epsilon_mode", 0.44),
            g("chain", "eta_path", 0.65),
            g("chain", "eta_detector", 0.215),
        ),
        tau_cavity=g("cavity", "tau_cavity_ns", 1.3) * 1e-9,
        p_success_per_shot=g("budget", "p_success_measured", 2.5e-3),
        attempt_rate_hz=g("run", "attempt_rate_hz", 24800.0),
    )
