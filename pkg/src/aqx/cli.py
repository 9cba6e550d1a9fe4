"""``aqx`` command line: rank, project, envelope, fhom, ehom, twoscale, relaxcheck and verify.

Exit codes: 0 success, 1 configuration or input error, 2 constant-rank
violation, 3 numerical failure.  Every subcommand writes a JSON report; its
``header`` holds the timestamp so the ``body`` is byte-stable across reruns.
Relative output paths resolve against the output directory (config
``[output] dir``, overridden by ``AQX_OUTPUT_DIR``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .acceptance import _clean, load_verify_config, verify_suite, verify_twice
from .config import OUTPUT_ENV, RunConfig, load_config
from .envelope import envelope_batch
from .errors import AqxError, ConfigError
from .homogenize import ehom, fhom_batch, membership_check, relaxation_check
from .operator import check_constant_rank, direction_samples, probe_points
from .projection import project_two_scale, projection_report, project
from .seeds import derive_seed
from .spectral import Grid, PeriodicField, read_aqxf, read_field, write_aqxf, write_field
from .twoscale import (
    TwoScaleField,
    generate_sequence,
    macro_residuals,
    twoscale_residual,
    unfold,
    unfold_convergence,
    unfold_isometry_gap,
)

log = logging.getLogger("aqx")


# --- argument helpers ---------------------------------------------------------

def _floats(text: str, n: int | None = None, what: str = "value") -> tuple[float, ...]:
    try:
        vals = tuple(float(t) for t in text.split(","))
    except ValueError:
        raise ConfigError(f"cannot parse {what} {text!r}: expected comma-separated numbers") from None
    if n is not None and len(vals) != n:
        raise ConfigError(f"{what} {text!r} must have {n} components")
    return vals


def _sweep(text: str, d: int) -> np.ndarray:
    """``lo:hi:count`` applied to every component, e.g. ``-1.5:1.5:9``."""
    try:
        lo, hi, count = text.split(":")
        t = np.linspace(float(lo), float(hi), int(count))
    except ValueError:
        raise ConfigError(f"cannot parse sweep {text!r}: expected lo:hi:count") from None
    return np.stack(np.meshgrid(*([t] * d), indexing="ij"), -1).reshape(-1, d)


def _out_dir(cfg: RunConfig | None) -> Path:
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return Path(env)
    return cfg.output_dir if cfg is not None else Path(".")


def _resolve(path: str | None, default: str, cfg: RunConfig | None) -> Path:
    p = Path(path or default)
    if not p.is_absolute():
        p = _out_dir(cfg) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(path: Path, body: dict) -> None:
    doc = {"header": {"timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"), "version": __version__},
           "body": _clean(body)}
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    log.info("wrote %s", path)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _macro_field(cfg: RunConfig, path: str | None, expr: str | None) -> PeriodicField:
    """Macro field from an AQXF file, from component expressions in ``x``, or from ``twoscale.u``."""
    if path:
        u = read_field(path, origin=0.0)
    else:
        from .expr import eval_expr

        comps = expr.split(";") if expr else [str(c) for c in cfg.twoscale.get("u", ["0"] * cfg.op.d)]
        grid = Grid.macro(cfg.macro)
        X = grid.coords()
        env = {f"x{i + 1}": X[..., i] for i in range(grid.N)}
        vals = [np.broadcast_to(np.asarray(eval_expr(c, **env), float), grid.dims) for c in comps]
        u = PeriodicField(grid, np.stack(vals, -1))
    if u.d != cfg.op.d or u.grid.N != cfg.op.N:
        raise ConfigError(f"field has N={u.grid.N}, d={u.d}; operator expects N={cfg.op.N}, d={cfg.op.d}")
    return u


# --- subcommands ------------------------------------------------------------------

def cmd_rank(cfg: RunConfig, args) -> dict:
    xs = probe_points(cfg.op.N, args.x_samples, derive_seed(cfg.seed, "rank"))
    dirs = direction_samples(cfg.op.N, args.directions, cfg.seed)
    rank = check_constant_rank(cfg.op, xs, dirs)
    body = {"rank": rank, "declared_rank": cfg.op.declared_rank, "x_samples": args.x_samples,
            "directions": args.directions, "periodicity_jump": cfg.op.check_periodic()}
    print(f"rank {rank}")
    return body


def cmd_project(cfg: RunConfig, args) -> dict:
    if not args.input:
        raise ConfigError("project needs --in FIELD.aqxf")
    psi = read_field(args.input)
    x = _floats(args.x, cfg.op.N, "--x") if args.x else (0.0,) * cfg.op.N
    out = project(cfg.op, x, psi)
    target = _resolve(args.out, "proj.aqxf", cfg)
    write_field(target, out)
    rep = projection_report(cfg.op, x, psi, cfg.integrand.p)
    body = rep.as_dict() | {"output": str(target)}
    print(f"projected field written to {target}; deficiency bound {'holds' if rep.bound_holds else 'FAILS'}"
          f" ({rep.bound_status}, Nyquist share {rep.nyquist_fraction:.2g} excluded)")
    return body


def cmd_envelope(cfg: RunConfig, args) -> dict:
    x = _floats(args.x, cfg.op.N, "--x") if args.x else (0.0,) * cfg.op.N
    if args.sweep:
        xis = _sweep(args.sweep, cfg.op.d)
    else:
        xis = np.array([_floats(args.xi, cfg.op.d, "--xi") if args.xi else (0.0,) * cfg.op.d])
    results = envelope_batch(cfg.op, cfg.integrand, [x] * len(xis), xis, cfg.options,
                             y0=(0.0,) * cfg.op.N if cfg.integrand.depends_on_y else None)
    stem = _resolve(args.out, "envelope.json", cfg)
    points = []
    for k, res in enumerate(results):
        mpath = stem.with_name(f"{stem.stem}_minimizer_{k}.aqxf")
        write_field(mpath, res.minimizer)
        points.append(res.summary() | {"minimizer": str(mpath)})
        print(f"xi={tuple(float(v) for v in res.xi)} value={res.value:.6g}")
    if args.sweep:
        header = [f"xi{i + 1}" for i in range(cfg.op.d)] + ["value", "residual"]
        _write_csv(stem.with_suffix(".csv"), header, [list(r.xi) + [r.value, r.gnorm] for r in results])
    return {"x": list(x), "points": points}


def _trace_rows(traces) -> list:
    rows = []
    for k, t in enumerate(traces):
        for n, v, g in zip(t.n_list, t.values, t.gnorms):
            rows.append((k, n, v, g))
    return rows


def cmd_fhom(cfg: RunConfig, args) -> dict:
    x = _floats(args.x, cfg.op.N, "--x") if args.x else (0.0,) * cfg.op.N
    xis = _sweep(args.sweep, cfg.op.d) if args.sweep else np.array(
        [_floats(args.xi, cfg.op.d, "--xi") if args.xi else (0.0,) * cfg.op.d])
    n_max = args.n_max or cfg.n_max
    traces = fhom_batch(cfg.op, cfg.integrand, [x] * len(xis), xis, n_max, cfg.options)
    target = _resolve(args.out, "fhom.json", cfg)
    _write_csv(target.with_suffix(".csv"), ["point", "n", "value", "residual"], _trace_rows(traces))
    for t in traces:
        print(f"xi={t.xi} fhom={t.fhom_estimate:.6g} trace={[round(v, 8) for v in t.values]}")
    return {"traces": [t.as_dict() for t in traces]}


def cmd_ehom(cfg: RunConfig, args) -> dict:
    u = _macro_field(cfg, args.u, args.u_expr)
    res = ehom(cfg.op, cfg.integrand, u, args.n_max or cfg.n_max, cfg.options, cfg.membership_tol)
    target = _resolve(args.out, "ehom.json", cfg)
    rows = []
    if res.feasible:
        n_list = res.traces[0].n_list
        resid = res.membership.residuals["A_macro"]
        for j, n in enumerate(n_list):
            rows.append((n, float(np.mean([t.values[j] for t in res.traces])), resid))
    _write_csv(target.with_suffix(".csv"), ["n", "value", "residual"], rows)
    print(f"E_hom = {res.value if res.feasible else 'inf (u is not A-free)'}")
    return res.as_dict()


def _default_two_scale(cfg: RunConfig) -> TwoScaleField:
    """``v = u + Pi(x) psi`` from the ``[twoscale]`` section: constant ``u`` plus a projected random fluctuation."""
    macro, micro = Grid.macro(cfg.macro), Grid.micro(tuple(cfg.twoscale.get("micro", (4,) * cfg.op.N)))
    u = np.asarray(cfg.twoscale.get("u", [0.0] * cfg.op.d), float)
    band = int(cfg.twoscale.get("band", 1))
    rng = np.random.default_rng(derive_seed(cfg.seed, "twoscale"))
    from .acceptance import band_limited_field

    psi = band_limited_field(micro, cfg.op.d, rng, band)
    w = TwoScaleField(macro, micro, np.broadcast_to(psi.values, macro.dims + micro.dims + (cfg.op.d,)).copy())
    w = project_two_scale(cfg.op, w)
    return TwoScaleField(macro, micro, w.values + u)


def _read_two_scale(path: str, N: int) -> TwoScaleField:
    values = read_aqxf(path)
    dims = values.shape[:-1]
    if len(dims) != 2 * N:
        raise ConfigError(f"{path}: two-scale AQXF needs {2 * N} axes (macro then micro), found {len(dims)}")
    return TwoScaleField(Grid.macro(dims[:N]), Grid.micro(dims[N:]), values)


def _write_two_scale(path: Path, w: TwoScaleField) -> None:
    write_aqxf(path, w.values)


def cmd_twoscale(cfg: RunConfig, args) -> dict:
    eps = [e.strip() for e in args.eps.split(",")] if args.eps else [str(e) for e in cfg.eps_list]
    target = _resolve(args.out, "twoscale.json", cfg)
    if args.mode == "unfold":
        u = _macro_field(cfg, args.input, args.u_expr)
        conv = unfold_convergence(u, eps)
        iso = [unfold_isometry_gap(u, e) for e in eps]
        for e in eps:
            _write_two_scale(target.with_name(f"{target.stem}_unfold_{e.replace('/', '_')}.aqxf"), unfold(u, e))
        _write_csv(target.with_suffix(".csv"), ["eps", "value", "residual"], zip(eps, conv, iso))
        print(f"||u - T_eps u||: {dict(zip(eps, conv))}")
        return {"mode": "unfold", "eps": eps, "convergence": conv, "isometry_gap": iso}
    v = _read_two_scale(args.input, cfg.op.N) if args.input else _default_two_scale(cfg)
    out = Grid.macro(tuple(args.out_grid)) if args.out_grid else None
    bundle = generate_sequence(cfg.op, v, eps, out, cfg.membership_tol)
    res = macro_residuals(cfg.op, bundle)
    for e, u in zip(bundle.eps_list, bundle.fields):
        write_field(target.with_name(f"{target.stem}_u_eps_{e.denominator}.aqxf"), u)
    body = {"mode": args.mode, "eps": [str(e) for e in bundle.eps_list], "macro_residuals": res,
            "params": bundle.params, "membership": membership_check(cfg.op, v, "F", cfg.membership_tol).as_dict()}
    rows = list(zip(body["eps"], res, res))
    if args.mode == "residual":
        rep = twoscale_residual(bundle, v)
        body |= rep.as_dict()
        rows = list(zip(body["eps"], rep.pairing_gap, res))
    _write_csv(target.with_suffix(".csv"), ["eps", "value", "residual"], rows)
    print(f"hneg(A u_eps): {dict(zip(body['eps'], res))}")
    return body


def cmd_relaxcheck(cfg: RunConfig, args) -> dict:
    u = _macro_field(cfg, args.u, args.u_expr)
    eps = [e.strip() for e in args.eps.split(",")] if args.eps else cfg.eps_list
    rep = relaxation_check(cfg.op, cfg.integrand, u, eps, cfg.options, tol=cfg.membership_tol)
    target = _resolve(args.out, "relaxcheck.json", cfg)
    _write_csv(target.with_suffix(".csv"), ["eps", "value", "residual"], zip(rep.eps, rep.energies, rep.residuals))
    print(f"envelope integral {rep.envelope_integral:.6g}; energies {dict(zip(rep.eps, rep.energies))}")
    return rep.as_dict()


def cmd_verify(args) -> int:
    cfg = load_verify_config(args.config, threads=args.threads, seed=args.seed,
                             tolerance_scale=args.tolerance_scale,
                             criteria=None if not args.criteria else [int(c) for c in args.criteria.split(",")])
    report = verify_suite(cfg, echo=print) if args.once else verify_twice(cfg, echo=print)
    target = _resolve(args.out, "verify.json", None)
    target.write_text(report.to_json() + "\n")
    failed = [r.id for r in report.results if not r.passed]
    if report.determinism is not None and not report.determinism.passed:
        failed.append(10)
    print(f"report written to {target}; {'all criteria pass' if not failed else f'failed: {failed}'}")
    return 0 if not failed else 1


OPERATIONS = {"rank": "operator.check_constant_rank", "project": "projection.project",
              "envelope": "envelope.qa_envelope", "fhom": "homogenize.fhom", "ehom": "homogenize.ehom",
              "twoscale": "twoscale", "relaxcheck": "homogenize.relaxation_check",
              "verify": "acceptance.verify_suite"}

COMMANDS = {"rank": cmd_rank, "project": cmd_project, "envelope": cmd_envelope, "fhom": cmd_fhom,
            "ehom": cmd_ehom, "twoscale": cmd_twoscale, "relaxcheck": cmd_relaxcheck}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aqx", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"aqx {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="TOML run configuration")
        p.add_argument("--threads", type=int, help="worker processes for independent solves")
        p.add_argument("--out", help="JSON report path (relative paths go to the output directory)")

    p = sub.add_parser("rank", help="check the constant-rank condition")
    common(p)
    p.add_argument("--x-samples", type=int, default=32)
    p.add_argument("--directions", type=int, default=64)

    p = sub.add_parser("project", help="apply Pi(x) to a micro field")
    common(p)
    p.add_argument("--in", dest="input", help="input AQXF field on the micro cell")
    p.add_argument("--x", help="frozen macro point, comma separated")
    p.add_argument("--report", help="alias of --out for the JSON report")

    p = sub.add_parser("envelope", help="quasiconvex envelope at a frozen point")
    common(p)
    p.add_argument("--x")
    p.add_argument("--xi")
    p.add_argument("--sweep", help="xi grid lo:hi:count in every component")

    p = sub.add_parser("fhom", help="dyadic cell traces of the homogenized density")
    common(p)
    p.add_argument("--x")
    p.add_argument("--xi")
    p.add_argument("--sweep")
    p.add_argument("--n-max", type=int)

    p = sub.add_parser("ehom", help="homogenized functional of a macro field")
    common(p)
    p.add_argument("--u", help="macro field as AQXF")
    p.add_argument("--u-expr", help="macro field components in x, separated by ';'")
    p.add_argument("--n-max", type=int)

    p = sub.add_parser("twoscale", help="unfolding, sequence generation and two-scale residuals")
    common(p)
    p.add_argument("--mode", choices=["unfold", "generate", "residual"], required=True)
    p.add_argument("--eps", help='comma separated scales, e.g. "1/4,1/8,1/16"')
    p.add_argument("--in", dest="input", help="macro field (unfold) or two-scale field (generate/residual) as AQXF")
    p.add_argument("--u-expr", help="macro field components for unfold, separated by ';'")
    p.add_argument("--out-grid", type=int, nargs="+", help="macro grid carrying the generated sequence")

    p = sub.add_parser("relaxcheck", help="sequence energies against the envelope integral")
    common(p)
    p.add_argument("--u")
    p.add_argument("--u-expr")
    p.add_argument("--eps")

    p = sub.add_parser("verify", help="run the acceptance suite")
    p.add_argument("--config", help="verify TOML (defaults to the shipped one)")
    p.add_argument("--threads", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tolerance-scale", type=float)
    p.add_argument("--criteria", help="comma separated subset of 1-9")
    p.add_argument("--once", action="store_true", help="skip the determinism rerun")
    p.add_argument("--out", help="report path")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = "config.load_config"
    try:
        if args.command == "verify":
            stage = OPERATIONS["verify"]
            return cmd_verify(args)
        cfg = load_config(args.config).with_threads(args.threads)
        stage = OPERATIONS[args.command]
        body = COMMANDS[args.command](cfg, args)
        body["config"] = cfg.metadata()
        # for project, --out is the projected field and --report the JSON
        report = args.report if args.command == "project" else args.out
        _write_json(_resolve(report, f"{args.command}.json", cfg), body)
        return 0
    except AqxError as exc:
        print(f"aqx {args.command}: {stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"aqx {args.command}: {stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
