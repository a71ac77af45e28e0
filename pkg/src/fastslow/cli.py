"""Experiment orchestration: `fastslow <subcommand> --config cfg.toml`.

Every run validates its config block strictly (unknown keys are errors),
fills defaults, echoes the resolved config next to the results, and writes
CSV/JSON artifacts.  Exit codes: 0 success, 2 validation failure, 3
numerical non-convergence.  A single master seed is split into per-
experiment streams by label, so reruns are byte-identical and adding an
experiment never perturbs another's stream.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys as _sys

import numpy as np

from . import averaging, cohomology, patches, slopes, stats, transfer
from . import pairs as pairs_mod
from .errors import FastslowError, ValidationError
from .reporting import ExperimentReport, content_hash, write_csv
from .system import load_system, system_to_toml

EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


# -- config ---------------------------------------------------------------------


SCHEMAS = {
    "density": {"theta": 0.3, "N": 256, "tol": 1e-12},
    "average": {"N_theta": 256, "N": 256, "tol": 1e-12, "rho_reg": 0.1},
    "classify": {"N_theta": 256, "N": 256, "margin": 1e-3},
    "normalize": {"N_theta": 256, "N": 256},
    "slopes": {"x": 0.3, "theta": 0.7, "n": 30, "tol": 1e-10},
    "cones": {"n_samples": 10_000},
    "orbits": {"theta": 0.3, "max_period": 4, "psi_tol": 1e-10},
    "pair-push": {"n_steps": 5, "z": 4.0, "r": 2.0, "T0": 0.5, "max_pieces": 1024,
                  "weight_floor": 1e-12},
    "patch-push": {"n_steps": 1, "T0": 0.5, "height_factor": 0.5, "x0": 0.15,
                   "theta0": 0.74},
    "telemetry": {"horizon": 4, "T0": 0.5, "max_pieces": 16, "checkpoint_every": 1},
    "lyapunov": {"n_samples": 32, "n_steps": 100_000, "N_theta": 128, "N": 128},
    "measure": {"n_orbits": 100_000, "n_steps": 10, "bins": 128, "V": 2.0, "T0": 1.0},
    "correlations": {"lag_max": 1200, "n_samples": 400_000, "lag_stride": 4,
                     "observable": "cos_theta"},
    "rate-scaling": {"eps_grid": [2e-2, 1e-2, 5e-3], "lag_max": 2400,
                     "n_samples": 300_000, "lag_stride": 4, "observable": "cos_theta"},
    "sink": {"n_samples": 200_000, "V": 2.0, "T0": 1.0, "C": 0.0},
    "tv": {"horizon_units": 5.0, "n_checkpoints": 6, "bins": 64,
           "n_points": 1_000_000, "shift": 0.2, "amp": 0.5, "T0": 0.5},
    "appendix-check": {"n_points": 100, "n_steps": 20},
    "constants": {"T0": 0.5},
    "scan": {"a_grid": [-0.25, -0.1, 0.0, 0.1, 0.25], "phase": 0.0, "N_theta": 96,
             "N": 128, "margin": 1e-3},
}

OBSERVABLES = {
    "cos_theta": lambda x, t: np.cos(2 * np.pi * t),
    "sin_theta": lambda x, t: np.sin(2 * np.pi * t),
    "cos_x": lambda x, t: np.cos(2 * np.pi * x),
    "cos_x_sin_theta": lambda x, t: np.cos(2 * np.pi * x) * np.sin(2 * np.pi * t),
}


def load_config(path, subcommand, overrides):
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"malformed TOML config: {exc}") from exc
    top_known = {"system", "seed", "out", "threads"} | set(SCHEMAS)
    unknown = set(raw) - top_known
    if unknown:
        raise ValidationError(f"unknown top-level config keys: {sorted(unknown)}")
    if "system" not in raw:
        raise ValidationError("config must name a `system` TOML file")
    block = raw.get(subcommand, {})
    schema = SCHEMAS[subcommand]
    unknown = set(block) - set(schema)
    if unknown:
        raise ValidationError(f"unknown keys in [{subcommand}]: {sorted(unknown)}")
    resolved = dict(schema)
    resolved.update(block)
    cfg = {
        "system": raw["system"],
        "seed": int(overrides.get("seed") or raw.get("seed", 0)),
        "out": overrides.get("out") or raw.get("out", "results"),
        "threads": int(
            overrides.get("threads")
            or raw.get("threads", os.environ.get("FASTSLOW_THREADS", 0))
            or max(1, os.cpu_count() or 1)
        ),
        subcommand: resolved,
    }
    if overrides.get("eps") is not None:
        cfg["eps_override"] = float(overrides["eps"])
    return cfg


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ValidationError(f"cannot serialize config value {v!r}")


def echo_config(cfg, subcommand, outdir):
    lines = [f"system = {_toml_value(cfg['system'])}",
             f"seed = {cfg['seed']}",
             f"out = {_toml_value(cfg['out'])}",
             f"threads = {cfg['threads']}",
             "",
             f"[{subcommand}]"]
    for k, v in sorted(cfg[subcommand].items()):
        lines.append(f"{k} = {_toml_value(v)}")
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, f"{subcommand}_config.toml"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _load_sys(cfg):
    sysm = load_system(cfg["system"])
    if "eps_override" in cfg:
        from .system import FastSlowSystem

        sysm = FastSlowSystem(
            sysm.fibre_degree, sysm.f_pert, sysm.omega, cfg["eps_override"]
        )
    with open(cfg["system"]) as fh:
        cfg["system_hash"] = content_hash(fh.read())
    return sysm


# -- subcommand implementations ----------------------------------------------------


def cmd_density(cfg, out):
    sysm = _load_sys(cfg)
    c = cfg["density"]
    rho = transfer.invariant_density(sysm, c["theta"], N=c["N"], tol=c["tol"])
    write_csv(os.path.join(out, "density.csv"), ["x", "rho"],
              list(zip(rho.grid(), rho.values)))
    return {"residual": rho.residual, "iterations": rho.iterations}


def cmd_average(cfg, out):
    sysm = _load_sys(cfg)
    c = cfg["average"]
    psi = slopes.build_psi_field(sysm, rho_reg=c["rho_reg"])
    drift = transfer.averaged_drift(sysm, N_theta=c["N_theta"], N=c["N"],
                                    tol=c["tol"], psi_field=psi,
                                    workers=cfg["threads"])
    drift.to_csv(os.path.join(out, "average.csv"))
    return {"max_residual": float(drift.residuals.max()), "psi_n0": drift.psi_n0}


def cmd_classify(cfg, out):
    sysm = _load_sys(cfg)
    c = cfg["classify"]
    cls = averaging.classify_system(sysm, N_theta=c["N_theta"], N=c["N"],
                                    margin=c["margin"])
    return {
        "class": cls.kind,
        "psi_bar_star_at_sink": round(cls.psi_bar_star_at_sink, 4),
        "theta_minus": cls.sink.theta_minus,
        "theta_plus": cls.sink.theta_plus,
        "deriv_minus": cls.sink.deriv_minus,
        "deriv_plus": cls.sink.deriv_plus,
    }


def cmd_normalize(cfg, out):
    sysm = _load_sys(cfg)
    c = cfg["normalize"]
    new, scale = averaging.normalize_system(sysm, N_theta=c["N_theta"], N=c["N"])
    with open(os.path.join(out, "normalized_system.toml"), "w") as fh:
        fh.write(system_to_toml(new))
    return {"scale": scale, "epsilon": new.epsilon}


def cmd_slopes(cfg, out):
    sysm = _load_sys(cfg)
    c = cfg["slopes"]
    psi = slopes.build_psi_field(sysm)
    fac = slopes.expansion_factors(sysm, c["x"], c["theta"], c["n"], psi_field=psi)
    rows = [
        (k, fac.s_eps[k], fac.w_eps[k], fac.log_Gamma[k], fac.log_Upsilon[k], fac.zeta[k])
        for k in range(c["n"] + 1)
    ]
    write_csv(os.path.join(out, "expansion_factors.csv"),
              ["k", "s_eps", "w_eps", "log_Gamma", "log_Upsilon", "zeta"], rows)
    star = slopes.slope_s_star(sysm, c["x"], c["theta"], tol=c["tol"])
    return {"s_star": float(star.value), "order": star.n, "sigma_hat": star.sigma_hat}


def cmd_cones(cfg, out):
    sysm = _load_sys(cfg)
    c = cfg["cones"]
    cp = sysm.cone_params()
    rng = np.random.default_rng(cfg["seed"])
    n = c["n_samples"]
    x, t = rng.random(n), rng.random(n)
    u = rng.uniform(-cp.chi_u, cp.chi_u, n)
    v = np.stack([np.ones(n), sysm.epsilon * u], axis=-1)
    J = sysm.jacobian(x, t)
    img = np.einsum("nij,nj->ni", J, v)
    ok_fwd = np.abs(img[:, 1]) <= sysm.epsilon * cp.chi_u * np.abs(img[:, 0]) + 1e-15
    ratio = np.abs(img[:, 0]) / np.abs(v[:, 0])
    return {
        "M": cp.M, "lambda": cp.lam, "chi_c": cp.chi_c, "chi_u": cp.chi_u,
        "forward_invariant_fraction": float(np.mean(ok_fwd)),
        "min_expansion_ratio": float(ratio.min()),
    }


def cmd_orbits(cfg, out):
    sysm = _load_sys(cfg)
    c = cfg["orbits"]
    margin, orbits = cohomology.a0_span_margin(
        sysm, c["theta"], c["max_period"], psi_tol=c["psi_tol"]
    )
    rows = [
        (o.theta, o.period, "".join(map(str, o.itinerary)), o.birkhoff_omega,
         o.birkhoff_psi, o.residual)
        for o in orbits
    ]
    write_csv(os.path.join(out, "orbits.csv"),
              ["theta", "period", "itinerary", "birkhoff_omega", "birkhoff_psi",
               "residual"], rows)
    return {"margin": margin, "n_orbits": len(orbits)}


def cmd_pair_push(cfg, out):
    sysm = _load_sys(cfg)
    c = cfg["pair-push"]
    led = pairs_mod.derive_standard_constants(sysm, T0=c["T0"])
    rng = np.random.default_rng(cfg["seed"])
    pair = pairs_mod.make_prestandard_pair(led, rng, z=c["z"], r=c["r"])
    fam = pairs_mod.PairFamily([pair], np.array([1.0]))
    fam = pairs_mod.iterate_family(sysm, led, fam, c["n_steps"],
                                   weight_floor=c["weight_floor"],
                                   max_pieces=c["max_pieces"], seed=cfg["seed"])
    vals = [pairs_mod.validate_pair(led, p) for p in fam.pairs]
    rows = [(w, v.z, v.r) for w, v in zip(fam.weights, vals)]
    write_csv(os.path.join(out, "pair_family.csv"), ["weight", "z", "r"], rows)
    return {
        "pieces": len(fam.pairs), "mass_defect": fam.mass_defect,
        "max_z": max(v.z for v in vals), "max_r": max(v.r for v in vals),
        "all_valid": all(v.valid for v in vals),
    }


def cmd_patch_push(cfg, out):
    sysm = _load_sys(cfg)
    c = cfg["patch-push"]
    led = pairs_mod.derive_standard_constants(sysm, T0=c["T0"])
    G0 = pairs_mod.horizontal_pair(led, c["x0"], c["theta0"]).curve
    rect = patches.build_rectangle(sysm, led, G0,
                                   led.Delta * sysm.epsilon * c["height_factor"])[0]
    patch = patches.uniform_patch(rect, led)
    pieces, masses = patches.cut_adapted(patch, c["n_steps"], c["T0"], sysm)
    fam = patches.pushforward_patch(sysm, led, pieces[0], n=c["n_steps"])
    rows = [(w, p.rect.z, p.rect.Z) for w, p in zip(fam.weights, fam.patches)]
    write_csv(os.path.join(out, "patch_family.csv"), ["weight", "z", "Z"], rows)
    return {"pieces": len(fam.patches), "weight_sum": float(fam.weights.sum())}


def cmd_telemetry(cfg, out):
    sysm = _load_sys(cfg)
    c = cfg["telemetry"]
    led = pairs_mod.derive_standard_constants(sysm, T0=c["T0"])
    G0 = pairs_mod.horizontal_pair(led, 0.15, 0.74).curve
    rect = patches.build_rectangle(sysm, led, G0, led.Delta * sysm.epsilon * 0.5)[0]
    patch = patches.uniform_patch(rect, led)
    fam = patches.PatchFamily([patch], np.array([1.0]))
    cps = list(range(0, c["horizon"] + 1, c["checkpoint_every"]))
    rows = patches.gauge_telemetry(sysm, led, fam, c["horizon"], cps,
                                   max_pieces=c["max_pieces"], seed=cfg["seed"],
                                   T0=c["T0"])
    write_csv(os.path.join(out, "telemetry.csv"),
              ["step", "mean_L", "max_M", "proper_flag", "piece_count"],
              [(r["step"], r["mean_L"], r["max_M"], int(r["proper"]), r["pieces"])
               for r in rows])
    return {"final_mean_L": rows[-1]["mean_L"], "band": 2 * led.B_prop}


def cmd_lyapunov(cfg, out):
    sysm = _load_sys(cfg)
    c = cfg["lyapunov"]
    drift = transfer.averaged_drift(sysm, N_theta=c["N_theta"], N=c["N"],
                                    workers=cfg["threads"])
    cls = averaging.classify_drift(drift)
    est = stats.central_lyapunov(sysm, n_samples=c["n_samples"], n_steps=c["n_steps"],
                                 seed=cfg["seed"],
                                 psi_bar_star_at_sink=cls.psi_bar_star_at_sink)
    return {
        "lyapunov": est.value, "stderr": est.stderr,
        "predictor_eps_psi_bar_star": est.predictor, "class": cls.kind,
    }


def cmd_measure(cfg, out):
    sysm = _load_sys(cfg)
    c = cfg["measure"]
    H = stats.physical_measure(sysm, n_orbits=c["n_orbits"], n_steps=c["n_steps"],
                               bins=(c["bins"], c["bins"]), seed=cfg["seed"],
                               V=c["V"], T0=c["T0"])
    centres, marg = H.theta_marginal()
    write_csv(os.path.join(out, "theta_marginal.csv"), ["theta", "mass"],
              list(zip(centres, marg)))
    np.savetxt(os.path.join(out, "histogram.csv"), H.counts, delimiter=",", fmt="%d")
    return {"total": H.total, "mode_theta": float(centres[np.argmax(marg)])}


def cmd_correlations(cfg, out):
    sysm = _load_sys(cfg)
    c = cfg["correlations"]
    A = OBSERVABLES[c["observable"]]
    fit = stats.correlation_decay(sysm, A, A, lag_max=c["lag_max"],
                                  n_samples=c["n_samples"], seed=cfg["seed"],
                                  lag_stride=c["lag_stride"])
    write_csv(os.path.join(out, "correlations.csv"), ["lag", "C_hat", "stderr"],
              list(zip(fit.lags, fit.corr, fit.stderr)))
    return {"rate": fit.rate, "r_squared": fit.r_squared, "window": list(fit.window)}


def cmd_rate_scaling(cfg, out):
    sysm = _load_sys(cfg)
    c = cfg["rate-scaling"]
    from .system import FastSlowSystem

    systems = [
        FastSlowSystem(sysm.fibre_degree, sysm.f_pert, sysm.omega, e)
        for e in c["eps_grid"]
    ]
    A = OBSERVABLES[c["observable"]]
    res = stats.rate_scaling(systems, A, A, lag_max=c["lag_max"],
                             n_samples=c["n_samples"], seed=cfg["seed"])
    write_csv(os.path.join(out, "rate_scaling.csv"),
              ["eps", "c_hat", "r_squared"],
              list(zip(res["epsilon"], res["rate"], res["r_squared"])))
    return {
        "slope_eps_over_log": res["slope_eps_over_log"],
        "slope_pure_eps": res["slope_pure_eps"],
        "C2_band": list(res["C2_band"]),
    }


def cmd_sink(cfg, out):
    sysm = _load_sys(cfg)
    c = cfg["sink"]
    drift = transfer.averaged_drift(sysm, N_theta=128, N=128, workers=cfg["threads"])
    rep = averaging.find_zeros(drift)
    C0 = c["C"] if c["C"] > 0 else None
    loc = stats.sink_localization(sysm, rep.theta_minus, C=C0,
                                  n_samples=c["n_samples"], seed=cfg["seed"],
                                  V=c["V"], T0=c["T0"])
    std = stats.theta_marginal_std(sysm, rep.theta_minus, n_samples=c["n_samples"],
                                   seed=cfg["seed"] + 1, V=c["V"], T0=c["T0"])
    return {
        "mass": loc.mass, "wilson_low": loc.wilson_low, "C": loc.C,
        "radius": loc.radius, "horizon": loc.horizon, "theta_std": std,
        "theta_minus": rep.theta_minus,
    }


def cmd_tv(cfg, out):
    sysm = _load_sys(cfg)
    c = cfg["tv"]
    led = pairs_mod.derive_standard_constants(sysm, T0=c["T0"])
    fam1 = patches.smooth_measure_to_family(sysm, led, lambda x, t: np.ones_like(x))
    amp, shift = c["amp"], c["shift"]
    fam2 = patches.smooth_measure_to_family(
        sysm, led, lambda x, t: 1.0 + amp * np.cos(2 * np.pi * (t - shift)),
        kappa=2 * np.pi * amp / (1 - amp) if amp < 1 else None,
    )
    eps = sysm.epsilon
    unit = (1.0 / eps) * math.log(1.0 / eps)
    horizon = int(c["horizon_units"] * unit)
    cps = np.unique(np.linspace(0, horizon, c["n_checkpoints"]).astype(int)).tolist()
    res = stats.tv_contraction(sysm, fam1, fam2, horizon, cps, bins=c["bins"],
                               n_points=c["n_points"], seed=cfg["seed"])
    write_csv(os.path.join(out, "tv.csv"), ["step", "time_units", "tv"],
              list(zip(res["steps"], res["time_units"], res["tv"])))
    return {"final_tv": float(res["tv"][-1]),
            "envelope_rate_per_unit": res["envelope_rate_per_unit"]}


def cmd_appendix_check(cfg, out):
    sysm = _load_sys(cfg)
    c = cfg["appendix-check"]
    rng = np.random.default_rng(cfg["seed"])
    max_rel = 0.0
    max_resid = 0.0
    for _ in range(c["n_points"]):
        q = (rng.random(), rng.random())
        itin = rng.integers(0, sysm.fibre_degree, c["n_steps"])
        Mx, fac, orbit = slopes.inverse_jacobian_formula(sysm, q[0], q[1], itin)
        direct = slopes.direct_inverse_jacobian(sysm, *orbit)
        rel = float(np.max(np.abs(Mx - direct) / np.maximum(np.abs(direct), 1e-30)))
        max_rel = max(max_rel, rel)
        max_resid = max(max_resid, slopes.log_jacobian_identity(sysm, q[0], q[1], itin))
    return {"max_matrix_rel_err": max_rel, "max_logdet_resid": max_resid}


def cmd_constants(cfg, out):
    sysm = _load_sys(cfg)
    c = cfg["constants"]
    led = pairs_mod.derive_standard_constants(sysm, T0=c["T0"])
    payload = {k: v for k, v in led.__dict__.items() if k != "notes"}
    payload["notes"] = led.notes
    return payload


def cmd_scan(cfg, out):
    c = cfg["scan"]
    from .reference import scan_system

    rows = stats.scan_mostly_expanding(
        lambda a: scan_system(a, c["phase"]),
        [(a,) for a in c["a_grid"]],
        N_theta=c["N_theta"], N=c["N"], margin=c["margin"],
    )
    table = [
        (r["params"][0], r["kind"], r.get("psi_bar_star_at_sink", float("nan")))
        for r in rows
    ]
    write_csv(os.path.join(out, "scan.csv"), ["a", "class", "psi_bar_star_at_sink"],
              table)
    flagged = [r["params"][0] for r in rows if r.get("kind") == "MostlyExpanding"]
    return {"mostly_expanding_region": flagged,
            "n_invalid": sum(1 for r in rows if not r["ok"])}


COMMANDS = {
    "density": cmd_density,
    "average": cmd_average,
    "classify": cmd_classify,
    "normalize": cmd_normalize,
    "slopes": cmd_slopes,
    "cones": cmd_cones,
    "orbits": cmd_orbits,
    "pair-push": cmd_pair_push,
    "patch-push": cmd_patch_push,
    "telemetry": cmd_telemetry,
    "lyapunov": cmd_lyapunov,
    "measure": cmd_measure,
    "correlations": cmd_correlations,
    "rate-scaling": cmd_rate_scaling,
    "sink": cmd_sink,
    "tv": cmd_tv,
    "appendix-check": cmd_appendix_check,
    "constants": cmd_constants,
    "scan": cmd_scan,
}


def main(argv=None):
    parser = argparse.ArgumentParser(prog="fastslow",
                                     description="fast-slow torus map laboratory")
    parser.add_argument("subcommand", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True)
    parser.add_argument("--out", default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--eps", type=float, default=None)
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config, args.subcommand,
                          {"seed": args.seed, "out": args.out,
                           "threads": args.threads, "eps": args.eps})
        out = cfg["out"]
        os.makedirs(out, exist_ok=True)
        echo_config(cfg, args.subcommand, out)
        summary = COMMANDS[args.subcommand](cfg, out)
    except (ValidationError, ValueError, FileNotFoundError, KeyError) as exc:
        _write_error(args.out or "results", args.subcommand, exc, EXIT_VALIDATION)
        return EXIT_VALIDATION
    except FastslowError as exc:
        _write_error(args.out or "results", args.subcommand, exc, EXIT_NUMERICAL)
        return EXIT_NUMERICAL
    report = ExperimentReport(
        name=args.subcommand.replace("-", "_"), seed=cfg["seed"],
        config={**cfg[args.subcommand], "system": cfg["system"],
                "system_hash": cfg.get("system_hash", ""), "threads": cfg["threads"]},
        summary=summary,
    )
    report.write(out)
    print(json.dumps({"experiment": args.subcommand, **_plain(summary)},
                     sort_keys=True, default=str))
    return 0


def _plain(d):
    out = {}
    for k, v in d.items():
        if isinstance(v, (np.floating, np.integer)):
            v = v.item()
        out[k] = v
    return out


def _write_error(outdir, name, exc, code):
    os.makedirs(outdir, exist_ok=True)
    payload = {"experiment": name, "error": type(exc).__name__,
               "message": str(exc), "exit_code": code}
    with open(os.path.join(outdir, "error.json"), "w") as fh:
        json.dump(payload, fh, indent=2)
    print(json.dumps(payload), file=_sys.stderr)


if __name__ == "__main__":
    raise SystemExit(main())
