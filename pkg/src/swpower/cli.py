"""Command-line interface: ``swpower <command> [options]``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure,
4 infeasible sample-size search.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .config import build_icc, build_query, build_scenario, load_config
from .correlation import icc_to_variance_components
from .errors import InfeasibleError, SingularMatrixError, SwpowerError, ValidationError
from .mlmm import FitControls, fit_em, read_dataset_csv
from .power import atomic_write, compute_power, sample_size_search, sensitivity_sweep, sweep_to_csv
from .simulate import reports_to_csv, run_power_study, run_type1_study

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_INFEASIBLE = 0, 2, 3, 4


def _emit(text: str, out) -> None:
    if out:
        atomic_write(out, text if text.endswith("\n") else text + "\n")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _seed(args, cfg):
    return args.seed if args.seed is not None else cfg.seed


def cmd_power(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    q = build_query(cfg, test=args.test, mode=args.mode, seed=seed)
    res = compute_power(q)
    lines = [f"config: {cfg.source}", f"seed: {seed}",
             f"design: I={q.design.I} T={q.design.T} N={q.design.N} mode={q.icc.design_kind}", res.summary()]
    if q.test != "common-effect":
        cov = res.covariance
        sd = np.sqrt(np.diag(cov))
        lines.append("Omega_delta:")
        lines += ["  " + "  ".join(f"{v: .6e}" for v in row) for row in cov]
        lines.append("effect SEs: " + ", ".join(f"{v:.6f}" for v in sd))
        corr = cov / np.outer(sd, sd)
        lines.append("Wald correlation: " + "; ".join(", ".join(f"{v:.4f}" for v in r) for r in corr))
    else:
        lines.append(f"var(delta'): {res.covariance[0, 0]:.6e}")
    _emit("\n".join(lines), args.out)
    return EXIT_OK


def cmd_samplesize(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    q = build_query(cfg, test=args.test, mode=args.mode, seed=seed)
    s = cfg.section("search")
    target = float(s["target"])
    if not q.alpha < target < 1:
        raise ValidationError(f"config key search.target: {target} must lie in (alpha={q.alpha}, 1)")
    head = [f"config: {cfg.source}", f"seed: {seed}", f"target power: {100 * target:.1f}%"]
    try:
        r = sample_size_search(target, q, I_max=s.get("I_max", 200), I_min=s.get("I_min", 1),
                               N_max=s.get("N_max", 25), N_min=s.get("N_min", 1), order=s.get("order", "I-first"))
    except InfeasibleError as exc:
        b = exc.best
        _emit("\n".join(head + ["status: infeasible", str(exc),
                                f"best: I={b.I} N={b.N} power={100 * b.power:.1f}%"]), args.out)
        return EXIT_INFEASIBLE
    _emit("\n".join(head + ["status: feasible", f"I={r.I} N={r.N} power={100 * r.power:.1f}%",
                            f"evaluations: {r.evaluations}"]), args.out)
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    q = build_query(cfg, test=args.test, mode=args.mode, seed=seed)
    s = cfg.section("sensitivity", required=False)
    rows = sensitivity_sweep(q, s.get("grid"), points=s.get("points"))
    text = sweep_to_csv(rows, args.out, seed=seed)
    if not args.out:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    if args.reps is not None and args.reps < 1:
        raise ValidationError(f"--reps must be >= 1, got {args.reps}")
    sc = build_scenario(cfg, reps=args.reps, null=args.null, seed=seed, mode=args.mode)
    report = run_type1_study(sc) if sc.null != "none" else run_power_study(sc)
    text = reports_to_csv([report], args.out)
    if not args.out:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_fit(args) -> int:
    data = read_dataset_csv(args.data, args.mode or "cs")
    controls = FitControls(tol=args.tol, max_iter=args.max_iter, se_method=args.se)
    res = fit_em(data, common_effect=args.common_effect, controls=controls)
    _emit(res.report(seed=args.seed), args.out)
    return EXIT_OK


def cmd_validate_icc(args) -> int:
    cfg = load_config(args.config)
    icc = build_icc(cfg, args.mode)
    icc.validate()
    e = cfg.section("effects", required=False)
    sd = np.broadcast_to(np.asarray(e.get("marginal_sd", 1.0), dtype=float), (icc.L,))
    vc = icc_to_variance_components(icc, sd)
    lines = [f"config: {cfg.source}", f"seed: {_seed(args, cfg)}", f"ICC set is valid ({icc.design_kind}, L={icc.L})"]
    for name in ("sigma_b", "sigma_s", "sigma_gamma", "sigma_eps"):
        M = getattr(vc, name)
        if M is not None:
            lines.append(f"{name}: eigenvalues " + ", ".join(f"{v:.4g}" for v in np.linalg.eigvalsh(M)))
    _emit("\n".join(lines), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swpower", description="Power and sample size for stepped-wedge trials "
                                "with multiple continuous co-primary endpoints.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="TOML config path or bundled config name")
        sp.add_argument("--out", help="output file (written atomically); default stdout")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--mode", choices=["cs", "cc"], help="cross-sectional or closed-cohort")

    for name, fn, helptext in (
        ("power", cmd_power, "power for one design"),
        ("samplesize", cmd_samplesize, "smallest design reaching a target power"),
        ("sensitivity", cmd_sensitivity, "power over ICC perturbations (CSV)"),
    ):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--test", choices=["iu", "omnibus", "common"])
        sp.set_defaults(func=fn)

    sp = sub.add_parser("simulate", help="Monte Carlo power or type-I error (CSV)")
    common(sp)
    sp.add_argument("--reps", type=int)
    sp.add_argument("--null", choices=["none", "first-zero", "second-zero", "all-zero"])
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="fit the mixed model to a long-format CSV")
    sp.add_argument("data", help="CSV with columns cluster,period,subject,treatment,y1..yL")
    common(sp, config=False)
    sp.add_argument("--common-effect", action="store_true", help="fit a shared standardized effect")
    sp.add_argument("--se", choices=["hessian", "fgls", "none"], default="hessian")
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.add_argument("--max-iter", type=int, default=5000)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("validate-icc", help="check an ICC specification")
    common(sp)
    sp.set_defaults(func=cmd_validate_icc)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InfeasibleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SingularMatrixError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SwpowerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
