"""Command-line front end.

Subcommands: budget, simulate, tomo, calibrate, ramsey.  Every command
can write a run manifest recording the exact configuration, seed and
output inventory; re-running with the same configuration and seed
reproduces the data files byte for byte.

Exit codes: 0 success, 1 validation error, 2 numerical non-convergence,
3 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import json
import os
import sys

import numpy as np

from . import __version__, analysis, cavity, config as cfgmod, jones, presets
from . import qcore, sequence as seq, tomo

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3


class NumericalFailure(RuntimeError):
    pass


def _load_layers(args) -> dict:
    cfg: dict = {}
    if getattr(args, "preset", None):
        cfg = cfgmod.merge(cfg, presets.load_preset(args.preset))
    if getattr(args, "config", None):
        cfg = cfgmod.merge(cfg, cfgmod.load_config(args.config))
    if not cfg:
        cfg = presets.load_preset("paper")
    if getattr(args, "set", None):
        cfg = cfgmod.apply_overrides(cfg, args.set)
    if getattr(args, "seed", None) is not None:
        cfg.setdefault("run", {})["seed"] = args.seed
    if getattr(args, "shots", None) is not None:
        cfg.setdefault("run", {})["shots"] = args.shots
    return cfg


def _write_manifest(out_dir, command, args, cfg, outputs) -> None:
    text = cfgmod.dump_config(cfg)
    manifest = {
        "command": command,
        "argv": list(sys.argv[1:]),
        "seed": cfgmod.get(cfg, "run", "seed", 1),
        "config_hash": cfgmod.config_hash(cfg),
        "config_text": text,
        "outputs": sorted(outputs),
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "versions": {"node-sim": __version__, "numpy": np.__version__},
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _ensure_out(args):
    out = getattr(args, "out", None)
    if out:
        os.makedirs(out, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# budget


def cmd_budget(args) -> int:
    cfg = _load_layers(args)
    inputs = cfgmod.build_budget_inputs(cfg)
    report = cavity.budget_report(**inputs)
    text = cavity.format_budget_text(report)
    sys.stdout.write(text)
    out = _ensure_out(args)
    if out:
        outputs = ["budget.txt", "budget.json"]
        with open(os.path.join(out, "budget.txt"), "w", encoding="ascii") as fh:
            fh.write(text)
        with open(os.path.join(out, "budget.json"), "w", encoding="ascii") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_manifest(out, "budget", args, cfg, outputs)
    return EXIT_OK


# --------------------------------------------------------------------------
# simulate


def build_plan(name: str, points: int = 12):
    """(settings, weights) for a named measurement plan."""
    z = [("z", None)]
    tomo9 = [("z", None), ("x", None), ("y", None)]
    for dphi in (analysis.PHI_X, analysis.PHI_Y):
        tomo9 += [("z", dphi), ("x", dphi), ("y", dphi)]
    if name == "z":
        return z, [1.0]
    if name == "parity-x":
        pts = analysis.scan_grid(analysis.PHI_X, points)
        return [("x", p) for p in pts], analysis.scan_weights(points)
    if name == "parity-y":
        pts = analysis.scan_grid(analysis.PHI_Y, points)
        return [("y", p) for p in pts], analysis.scan_weights(points)
    if name == "tomo":
        return tomo9, [1.0] * len(tomo9)
    if name == "full":
        settings, weights = [("z", None)], [6.0]
        for scan_name in ("parity-x", "parity-y"):
            s, w = build_plan(scan_name, points)
            settings += s
            weights += w
        extras = [("x", None), ("y", None), ("z", analysis.PHI_X), ("z", analysis.PHI_Y)]
        settings += extras
        weights += [1.0] * len(extras)
        return settings, weights
    raise cfgmod.ConfigError(f"unknown plan {name!r}")


def _split_attempts(total: int, weights) -> list[int]:
    w = np.asarray(weights, dtype=float)
    alloc = np.floor(total * w / w.sum()).astype(int)
    alloc[0] += total - int(alloc.sum())
    return [int(a) for a in alloc]


def cmd_simulate(args) -> int:
    cfg = _load_layers(args)
    exp = cfgmod.build_experiment_config(cfg)
    problems = exp.validate()
    if problems:
        raise cfgmod.ConfigError("; ".join(problems))
    settings, weights = build_plan(args.plan, args.phi_points)
    if exp.shots == 0:
        sys.stderr.write("warning: --shots 0, writing an empty summary\n")
    attempts = _split_attempts(exp.shots, weights)
    threads = getattr(args, "threads", None) or cfgmod.get(cfg, "run", "threads")
    summary, log = seq.run_sequence(
        exp, settings, attempts_per_setting=attempts,
        threads=threads, log_events=args.log_shots or args.plan == "z",
    )
    p_det = summary.detection_probability()
    sys.stdout.write(
        f"attempts {summary.total_attempts()}  accepted {int(summary.accepted.sum())}"
        f"  detection_probability {p_det:.3e}\n"
    )
    for k, (basis, dphi) in enumerate(summary.settings):
        if basis == 3 and dphi is None and summary.cells[k].sum() > 0:
            con, err = analysis.z_contrast_from_cells(summary.cells[k].astype(float))
            sys.stdout.write(f"z-basis contrast {100 * con:.1f}% +- {100 * err:.1f}%\n")
    out = _ensure_out(args)
    if out:
        outputs = ["summary.csv", "summary.meta.json"]
        seq.write_summary_csv(summary, os.path.join(out, "summary.csv"))
        seq.write_summary_meta(summary, cfgmod.config_hash(cfg),
                               os.path.join(out, "summary.meta.json"))
        if log:
            times = [r.arrival_time_ns for r in log if r.arrival_time_ns is not None]
            if len(times) >= 2:
                hist = seq.arrival_time_histogram(times, args.bin_ns)
                outputs.append("arrival_hist.csv")
                with open(os.path.join(out, "arrival_hist.csv"), "w",
                          encoding="ascii", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(["t_ns", "counts"])
                    for c, n in zip(hist.centers(), hist.counts):
                        w.writerow([f"{c:.3f}", int(n)])
        if args.log_shots:
            outputs.append("shots.jsonl")
            seq.write_shot_log(log, os.path.join(out, "shots.jsonl"))
        _write_manifest(out, "simulate", args, cfg, outputs)
    return EXIT_OK


# --------------------------------------------------------------------------
# tomo


def _load_counts_files(paths):
    rows, attempts = [], []
    for path in paths:
        file_rows = seq.read_summary_csv(path)
        meta_path = path[:-4] + ".meta.json" if path.endswith(".csv") else None
        per = [None] * len(file_rows)
        if meta_path and os.path.isfile(meta_path):
            with open(meta_path, "r", encoding="ascii") as fh:
                meta = json.load(fh)
            if len(meta.get("attempts", [])) == len(file_rows):
                per = meta["attempts"]
        rows.extend(file_rows)
        attempts.extend(per)
    if any(a is None for a in attempts):
        attempts = None
    return rows, attempts


def cmd_tomo(args) -> int:
    cfg = _load_layers(args)
    exp = cfgmod.build_experiment_config(cfg)
    rows, attempts = _load_counts_files(args.counts)
    scale = exp.acceptance_window_ns / exp.wait_window_ns
    dark = (exp.dark_count_prob_h * scale, exp.dark_count_prob_v * scale)
    result = analysis.analyse(rows, attempts, dark_probs_window=dark,
                              rotated_mode=args.rotated_mode)
    rep = result.report
    sys.stdout.write(
        f"purity {rep.purity:.4f}  F_upper {rep.f_upper:.4f} +- {rep.f_upper_err:.4f}\n"
        f"F_lower raw {rep.f_lower:.4f} +- {rep.f_lower_err:.4f} "
        f"(rotated basis: {rep.rotated_mode})\n"
    )
    if result.report_corrected is not None:
        rc = result.report_corrected
        sys.stdout.write(
            f"F_lower dark-corrected {rc.f_lower:.4f} +- {rc.f_lower_err:.4f} "
            f"(+{100 * (rc.f_lower - rep.f_lower):.2f} pts)\n"
        )
    sys.stdout.write(
        f"local-rotation gain {100 * result.overlap.gain:.2f} pts "
        f"(aligned overlap {result.overlap.overlap:.4f})\n"
    )
    phys = qcore.is_physical(result.mle.rho, tol=1e-9)
    out = _ensure_out(args)
    if out:
        outputs = ["expectations.json", "rho_linear.txt", "rho_mle.txt",
                   "rho_aligned.txt", "fidelity_report.json", "fig3a_bars.csv"]
        with open(os.path.join(out, "expectations.json"), "w", encoding="ascii") as fh:
            json.dump({
                "s": result.expectations.s.tolist(),
                "err": result.expectations.err.tolist(),
                "mirrored": sorted(list(result.expectations.mirrored)),
            }, fh, indent=2)
            fh.write("\n")
        qcore.write_density_matrix(result.rho_linear, os.path.join(out, "rho_linear.txt"))
        qcore.write_density_matrix(result.mle.rho, os.path.join(out, "rho_mle.txt"))
        qcore.write_density_matrix(result.overlap.rho_aligned,
                                   os.path.join(out, "rho_aligned.txt"))
        payload = {
            "raw": rep.as_dict(),
            "corrected": (None if result.report_corrected is None
                          else result.report_corrected.as_dict()),
            "local_rotation_gain": result.overlap.gain,
            "mle_converged": result.mle.converged,
            "mle_physical": bool(phys.ok),
            "min_eigenvalue": phys.min_eigenvalue,
        }
        with open(os.path.join(out, "fidelity_report.json"), "w", encoding="ascii") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(out, "fig3a_bars.csv"), "w",
                  encoding="ascii", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "col", "abs_rho"])
            labels = ["upV", "upH", "downV", "downH"]
            for i in range(4):
                for j in range(4):
                    w.writerow([labels[i], labels[j],
                                f"{abs(result.mle.rho[i, j]):.6f}"])
        _write_manifest(out, "tomo", args, cfg, outputs)
    if not result.mle.converged:
        raise NumericalFailure(f"MLE did not converge: {result.mle.message}")
    if not phys.ok:
        raise NumericalFailure(
            f"MLE state failed the physicality check (min eig {phys.min_eigenvalue:.2e})"
        )
    return EXIT_OK


# --------------------------------------------------------------------------
# calibrate (photon path)


def cmd_calibrate(args) -> int:
    hm = jones.read_heatmap_csv(args.heatmap)
    fit = jones.fit_fiber(hm)
    if fit.degenerate:
        sys.stderr.write("warning: degenerate fit, gauge-inequivalent tie reported\n")
    sys.stdout.write(
        f"fiber alpha {fit.model.alpha:.6f} rad, beta {fit.model.beta:.6f} rad, "
        f"delta {fit.model.delta:.6f} rad\n"
        f"waveplate offsets hwp {fit.offsets[0]:.6f} rad, qwp {fit.offsets[1]:.6f} rad\n"
        f"rms residual {fit.residual:.3e}\n"
    )
    angles = {}
    for name in ("x", "y", "z"):
        try:
            setting, err = jones.solve_basis_angles(fit.model, name, fit.offsets)
        except jones.NoSolutionError as exc:
            raise NumericalFailure(str(exc)) from exc
        angles[name] = (setting, err)
        sys.stdout.write(
            f"basis {name}: hwp {np.degrees(setting.theta_hwp):8.4f} deg, "
            f"qwp {np.degrees(setting.theta_qwp):8.4f} deg, extinction {err:.2e}\n"
        )
    out = _ensure_out(args)
    if out:
        outputs = ["fiber_fit.json", "basis_angles.csv"]
        with open(os.path.join(out, "fiber_fit.json"), "w", encoding="ascii") as fh:
            json.dump({
                "alpha_rad": fit.model.alpha,
                "beta_rad": fit.model.beta,
                "delta_rad": fit.model.delta,
                "offset_hwp_rad": fit.offsets[0],
                "offset_qwp_rad": fit.offsets[1],
                "rms_residual": fit.residual,
                "degenerate": fit.degenerate,
                "gauge_notes": fit.notes,
            }, fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(os.path.join(out, "basis_angles.csv"), "w",
                  encoding="ascii", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["basis", "hwp_deg", "qwp_deg", "extinction"])
            for name, (setting, err) in angles.items():
                w.writerow([name, f"{np.degrees(setting.theta_hwp):.4f}",
                            f"{np.degrees(setting.theta_qwp):.4f}", f"{err:.3e}"])
        _write_manifest(out, "calibrate", args, cfgmod.parse_config(""), outputs)
    return EXIT_OK


# --------------------------------------------------------------------------
# ramsey


def cmd_ramsey(args) -> int:
    cfg = _load_layers(args)
    exp = cfgmod.build_experiment_config(cfg)
    hold = cfgmod.get(cfg, "ramsey", "hold_times_us",
                      (25.0, 50.0, 100.0, 200.0, 400.0, 800.0))
    points = cfgmod.get(cfg, "ramsey", "phase_points", 12)
    shots = cfgmod.get(cfg, "ramsey", "shots_per_point", 400)
    hold = np.asarray(hold, dtype=float)
    results = {}
    for qubit in ("zeeman", "hyperfine"):
        vis = seq.simulate_ramsey(qubit, hold, exp.dephasing, shots,
                                  phase_points=points, seed=exp.seed)
        fit = tomo.ramsey_fit(hold, vis)
        results[qubit] = (vis, fit)
        if fit.unbounded:
            sys.stdout.write(f"{qubit}: no decay resolved, tau unbounded\n")
        else:
            sys.stdout.write(
                f"{qubit}: tau {fit.tau:.1f} +- {fit.tau_err:.1f} us\n"
            )
    out = _ensure_out(args)
    if out:
        outputs = ["ramsey.csv", "ramsey_report.json"]
        with open(os.path.join(out, "ramsey.csv"), "w", encoding="ascii",
                  newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["hold_time_us", "visibility_zeeman", "visibility_hyperfine"])
            for k, t in enumerate(hold):
                w.writerow([f"{t:.1f}", f"{results['zeeman'][0][k]:.6f}",
                            f"{results['hyperfine'][0][k]:.6f}"])
        with open(os.path.join(out, "ramsey_report.json"), "w", encoding="ascii") as fh:
            json.dump({
                q: {"tau_us": fit.tau, "tau_err_us": fit.tau_err,
                    "unbounded": fit.unbounded}
                for q, (vis, fit) in results.items()
            }, fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_manifest(out, "ramsey", args, cfg, outputs)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _common(p, with_shots=True):
    p.add_argument("--preset", help="named preset (see --list-presets)")
    p.add_argument("--config", help="configuration file path")
    p.add_argument("--set", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override a config value")
    p.add_argument("--seed", type=int, help="random seed override")
    if with_shots:
        p.add_argument("--shots", type=int, help="attempt count override")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="worker cap for sharded runs")


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="node-sim",
        description="Spin-photon entanglement node: simulation and analysis",
    )
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("budget", help="closed-form efficiency budget")
    _common(p, with_shots=False)
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("simulate", help="Monte Carlo entanglement sequence")
    _common(p)
    p.add_argument("--plan", default="full",
                   choices=["z", "parity-x", "parity-y", "tomo", "full"])
    p.add_argument("--phi-points", type=int, default=12)
    p.add_argument("--bin-ns", type=float, default=2.0,
                   help="arrival histogram bin width")
    p.add_argument("--log-shots", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("tomo", help="tomography and fidelity bounds")
    _common(p, with_shots=False)
    p.add_argument("--counts", nargs="+", required=True,
                   help="summary CSV files from simulate")
    p.add_argument("--rotated-mode", default="average",
                   choices=["average", "x", "y"])
    p.set_defaults(func=cmd_tomo)

    p = sub.add_parser("calibrate", help="fiber fit and basis angles")
    p.add_argument("--heatmap", required=True, help="heat-map CSV")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("ramsey", help="coherence-time simulation")
    _common(p, with_shots=False)
    p.set_defaults(func=cmd_ramsey)
    return ap


def main(argv=None) -> int:
    ap = make_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except (NumericalFailure, tomo.NonConvergenceError, tomo.DomainError) as err:
        sys.stderr.write(f"numerical error: {err}\n")
        return EXIT_NUMERICAL
    except (cfgmod.ConfigError, ValueError) as err:
        sys.stderr.write(f"error: {err}\n")
        return EXIT_VALIDATION
    except OSError as err:
        sys.stderr.write(f"i/o error: {err}\n")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
