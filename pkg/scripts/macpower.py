"""
scripts/macpower.py
-------------------
Experiment runner for the invariant power-allocation library.

Every subcommand reads one experiment config (see app/schemas/experiment/v1.json),
writes a JSON document to stdout or --out, and optional CSV side files.

Exit codes: 0 success, 2 config/validation error, 3 regularity refusal or
failed search, 4 inconclusive Monte Carlo certificate.

Usage
-----
    # Threshold policy of every user:
    python -m scripts.macpower policy --config content/experiments/homogeneous_p1.json

    # Expected EPI sum rate of a profile (default: invariant profile):
    python -m scripts.macpower evaluate --config content/experiments/two_user_p2.json --method mc --seed 7

    # Best response of user 0 against the others, checked against vertex enumeration:
    python -m scripts.macpower best-response --config ... --user 0 --verify

    # Empirical invariance threshold with summary and margin tables:
    python -m scripts.macpower find-nstar --config ... --n-max 64 --csv sweep.csv --margins-csv margins.csv

    # Entropy or m-dominating rate certificate at the configured N:
    python -m scripts.macpower certificate --config ... --kind entropy

    # mu bound and interference-moment decay:
    python -m scripts.macpower bounds --config ... --n-values 16,32,64,128 --csv moments.csv
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Any, Callable, Sequence

from pydantic import ValidationError

_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if _ROOT not in sys.path:
    sys.path.insert(0, _ROOT)

from app.core.errors import (  # noqa: E402
    DegenerateLevelError,
    DomainError,
    EnumerationCapExceeded,
    RegularityViolation,
    SearchFailure,
    SpecValidationError,
)
from app.core.logging import configure_logging  # noqa: E402
from app.schemas.experiment_config import ExperimentConfig, load_experiment  # noqa: E402
from app.schemas.policy import ProfileDocument  # noqa: E402
from app.services import report_service as report  # noqa: E402
from app.services.best_response_service import (  # noqa: E402
    best_response,
    brute_force_best_response,
    conditional_payoff_table,
)
from app.services.bounds_service import moment_decay, mu_bound, paley_zygmund_margin  # noqa: E402
from app.services.certificate_service import (  # noqa: E402
    find_n_star,
    require_regularity,
    verify_entropy_dual_certificate,
    verify_m_dominating,
)
from app.services.channel_service import SystemSpec, validate_spec  # noqa: E402
from app.services.entropy_power import require_strict_convexity  # noqa: E402
from app.services.policy_service import (  # noqa: E402
    PolicyProfile,
    average_power,
    invariant_policy,
    invariant_profile,
)
from app.services.power_grid import PowerGrid  # noqa: E402
from app.services.rate_service import expected_sum_rate, user_objective  # noqa: E402

logger = logging.getLogger("macpower")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_REFUSED = 3
EXIT_INCONCLUSIVE = 4

DEFAULT_N_VALUES = (16, 32, 64, 128, 256, 512, 1024)
ORACLE_TOL = 1e-9


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _grid(cfg: ExperimentConfig, spec: SystemSpec, user: int | None = None) -> PowerGrid:
    g_max = spec.g_max if user is None else spec.users[user].g_max
    return PowerGrid.uniform(g_max, cfg.grid.m)


def _certificate_kind(text: str) -> str:
    return "m_dominating" if text == "rate" else text


def _emit(doc: Any, out: str | None) -> None:
    text = report.write_json(doc, out)
    if out is None:
        sys.stdout.write(text)


def _load(args) -> tuple[ExperimentConfig, SystemSpec]:
    cfg = load_experiment(args.config)
    return cfg, cfg.to_system_spec()


def _profile(args, spec: SystemSpec) -> PolicyProfile:
    if not getattr(args, "profile", None):
        return invariant_profile(spec)
    try:
        with open(args.profile, encoding="utf-8") as fh:
            doc = ProfileDocument.model_validate_json(fh.read())
    except OSError as exc:
        raise SpecValidationError(f"cannot read profile: {exc}", args.profile) from exc
    except ValidationError as exc:
        first = exc.errors()[0]
        raise SpecValidationError(first["msg"], "profile." + ".".join(str(p) for p in first["loc"])) from exc
    return PolicyProfile.checked(doc.to_policies([u.g_max for u in spec.users]), spec)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_policy(args) -> int:
    cfg, spec = _load(args)
    validation = validate_spec(spec, _grid(cfg, spec))
    if args.require_regularity:
        require_strict_convexity(spec.model, spec.ladder, _grid(cfg, spec))
    users = []
    for i, u in enumerate(spec.users):
        inv = invariant_policy(u, spec.ladder)
        used = average_power(inv.base, u)
        users.append({"user": i, "avg_power": used, **inv.to_dict()})
        sys.stderr.write(f"user {i}\n" + report.policy_table(inv.tau, inv.mix_prob, used, inv.regime))
    _emit({"users": users, "validation": validation.to_dict()}, args.out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg, spec = _load(args)
    settings = cfg.eval_settings(method=args.method, seed=args.seed)
    profile = _profile(args, spec)
    if args.user is None:
        res = expected_sum_rate(profile, spec, settings)
    else:
        res = user_objective(args.user, profile, spec, settings)
    _emit(res.to_dict(), args.out)
    return EXIT_OK


def cmd_best_response(args) -> int:
    cfg, spec = _load(args)
    settings = cfg.eval_settings(method=args.method, seed=args.seed)
    profile = _profile(args, spec)
    i = args.user
    if not 0 <= i < spec.n_users:
        raise SpecValidationError(f"user index {i} outside 0..{spec.n_users - 1}", "--user")
    others = profile.others(i)
    table = conditional_payoff_table(i, others, spec, _grid(cfg, spec, i), settings)
    res = best_response(i, others, spec, table=table)
    doc = {"user": i, **res.to_dict()}
    if args.verify:
        oracle = brute_force_best_response(i, others, spec, table=table)
        diff = abs(oracle.value - res.value)
        doc["verify"] = {"oracle_value": oracle.value, "difference": diff, "agrees": diff <= ORACLE_TOL}
    _emit(doc, args.out)
    return EXIT_OK


def cmd_find_nstar(args) -> int:
    cfg, spec = _load(args)
    params = cfg.parameters()
    n_min = args.n_min if args.n_min is not None else int(params.get("n_min", 1))
    n_max = args.n_max if args.n_max is not None else int(params.get("n_max", 64))
    settings = cfg.eval_settings(method=args.method, seed=args.seed)
    # each user gets its own grid up to its g_max
    res = find_n_star(spec, n_min, n_max, None, settings, cfg.grid.m)

    if args.csv:
        report.write_csv(
            args.csv,
            report.NSTAR_HEADER,
            [(r.n_users, r.status, r.min_margin, r.min_ci_low, r.entropy_min_margin, r.method, r.samples) for r in res.rows],
        )
    if args.margins_csv:
        rows = [row for cert in res.certificates for row in cert.rows]
        report.write_csv(args.margins_csv, report.MARGIN_HEADER, report.margin_rows(rows))
    _emit(res.to_dict(), args.out)

    if res.n_star is None and any(r.status == "inconclusive" for r in res.rows):
        return EXIT_INCONCLUSIVE
    return EXIT_OK


def cmd_certificate(args) -> int:
    cfg, spec = _load(args)
    if args.kind == "entropy":
        i = args.user
        if not 0 <= i < spec.n_users:
            raise SpecValidationError(f"user index {i} outside 0..{spec.n_users - 1}", "--user")
        cert = verify_entropy_dual_certificate(spec.users[i], spec, _grid(cfg, spec, i))
    else:
        require_regularity(spec, _grid(cfg, spec))
        settings = cfg.eval_settings(method=args.method, seed=args.seed)
        cert = verify_m_dominating(spec, None, settings, cfg.grid.m)
    if args.csv:
        report.write_csv(args.csv, report.MARGIN_HEADER, report.margin_rows(cert.rows))
    _emit(cert.to_dict(include_rows=False), args.out)
    return EXIT_INCONCLUSIVE if cert.status == "inconclusive" else EXIT_OK


def cmd_bounds(args) -> int:
    cfg, spec = _load(args)
    params = cfg.parameters()
    n_values = args.n_values or [int(n) for n in params.get("n_values", DEFAULT_N_VALUES)]
    ks = args.ks or [int(k) for k in params.get("ks", (1, 2))]
    n0 = args.n0 if args.n0 is not None else float(params.get("n0", 1.0))
    # moment sweeps reach N in the thousands; sampling unless asked otherwise
    method = args.method or (cfg.eval.method if "method" in cfg.eval.model_fields_set else "mc")
    settings = cfg.eval_settings(method=method, seed=args.seed)

    grid = _grid(cfg, spec)
    users = []
    for i, u in enumerate(spec.users):
        if u in spec.users[:i]:
            continue
        inv = invariant_policy(u, spec.ladder)
        users.append(
            {
                "user": i,
                "mu": mu_bound(u, spec, grid).to_dict(),
                "paley_zygmund": paley_zygmund_margin(inv.base, u).to_dict(),
            }
        )
    decay = moment_decay(spec, n_values, ks, n0=n0, settings=settings)
    if args.csv:
        report.write_csv(
            args.csv, report.MOMENT_HEADER, [(r.n_users, r.k, r.estimate, r.stderr) for r in decay.rows]
        )
    _emit({"users": users, "moment_decay": decay.to_dict()}, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="macpower", description="Invariant power allocation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="Experiment config JSON.")
    common.add_argument("--out", help="Write the JSON document here instead of stdout.")
    common.add_argument("--seed", type=int, help="Override eval.seed.")
    common.add_argument("--method", choices=["exact", "mc", "convolve", "auto"], help="Override eval.method.")
    common.add_argument("--verbose", action="store_true", help="DEBUG logging on stderr.")

    p = sub.add_parser("policy", parents=[common], help="Invariant threshold policy per user.")
    p.add_argument("--require-regularity", action="store_true", help="Refuse non strictly convex models.")
    p.set_defaults(handler=cmd_policy)

    p = sub.add_parser("evaluate", parents=[common], help="Expected EPI sum rate of a profile.")
    p.add_argument("--profile", help="Profile JSON; defaults to the invariant profile.")
    p.add_argument("--user", type=int, help="Report this user's own objective instead of the sum rate.")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("best-response", parents=[common], help="Best response of one user.")
    p.add_argument("--profile", help="Profile JSON for the opponents; defaults to the invariant profile.")
    p.add_argument("--user", type=int, default=0)
    p.add_argument("--verify", action="store_true", help="Cross-check against vertex enumeration.")
    p.set_defaults(handler=cmd_best_response)

    p = sub.add_parser("find-nstar", parents=[common], help="Sweep N for the invariance threshold.")
    p.add_argument("--n-min", type=int)
    p.add_argument("--n-max", type=int)
    p.add_argument("--csv", help="One summary row per swept N.")
    p.add_argument("--margins-csv", help="Full margin table.")
    p.set_defaults(handler=cmd_find_nstar)

    p = sub.add_parser("certificate", parents=[common], help="Entropy or m-dominating rate certificate.")
    p.add_argument(
        "--kind",
        type=_certificate_kind,
        choices=["entropy", "m_dominating"],
        default="m_dominating",
        help="entropy or m_dominating (alias: rate).",
    )
    p.add_argument("--user", type=int, default=0, help="User for the entropy certificate.")
    p.add_argument("--csv", help="Margin table.")
    p.set_defaults(handler=cmd_certificate)

    p = sub.add_parser("bounds", parents=[common], help="mu bound and interference-moment decay.")
    p.add_argument("--n-values", type=_int_list)
    p.add_argument("--ks", type=_int_list)
    p.add_argument("--n0", type=float)
    p.add_argument("--csv", help="Moment table (n_users, k, estimate, stderr).")
    p.set_defaults(handler=cmd_bounds)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(logging.DEBUG if args.verbose else None)
    handler: Callable[[Any], int] = args.handler
    try:
        return handler(args)
    except (SpecValidationError, DomainError, EnumerationCapExceeded, DegenerateLevelError) as exc:
        logger.error("%s: %s", args.command, exc)
        return EXIT_INVALID
    except (RegularityViolation, SearchFailure) as exc:
        logger.error("%s: %s", args.command, exc)
        return EXIT_REFUSED


if __name__ == "__main__":
    sys.exit(main())
