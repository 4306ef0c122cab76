"""Command-line entry point.

Subcommands: admissible, assumptions, normal-form, kam, measure,
verify-bounds.  All outputs are deterministic for a fixed config and
seed; floats are printed with 17 significant digits.
"""
from __future__ import annotations

import argparse
import math
import os
import sys
from typing import List, Optional

import numpy as np

from . import bounds as bounds_mod
from .config import ConfigError, RunConfig, load_config
from .engine import (AllExcluded, ContractionFailure, run, verify_contraction)
from .indices import ADMISSIBLE, admissible
from .model import frequency_maps
from .nonres import (ExclusionLedger, MeasureDomain, ResonanceZone,
                     audit_assumptions, bulk_zone_masks, enumerate_spec_arrays,
                     measure_report, slab_box_volume)
from .pipeline import prepare_run, reference_constants
from .serialize import to_json, write_csv, write_json, write_jsonl
from .series import ParameterGrid, series_to_text


def _outdir(args) -> str:
    out = args.out or "out"
    os.makedirs(out, exist_ok=True)
    return out


def cmd_admissible(cfg: RunConfig, args) -> int:
    verdict = admissible(cfg.sites)
    doc = {"sites": list(cfg.sites.sites), "n": cfg.sites.n, "verdict": verdict,
           "site_sum": sum(cfg.sites.sites), "divisor": 2 * cfg.sites.n - 1}
    out = _outdir(args)
    write_json(os.path.join(out, "admissible.json"), doc)
    print(to_json(doc, pretty=True))
    return 0 if verdict == ADMISSIBLE else 1


def cmd_assumptions(cfg: RunConfig, args) -> int:
    grid = cfg.grid()
    freq = frequency_maps(cfg.sites, grid, cfg.bypass_admissibility)
    if cfg.enum_k_max < 1 or cfg.enum_mode_max < 1:
        raise ConfigError("empty_range", "enum ranges must be nonempty")
    audit = audit_assumptions(freq, cfg.enum_k_max, cfg.enum_mode_max)
    ref = reference_constants(cfg)
    jac_err = float(np.max(np.abs(freq.jac @ freq.jac_inv - np.eye(cfg.sites.n))))
    doc = {
        "m": audit.m, "m_reference": ref["m"],
        "m1": audit.m1, "m1_reference": ref["m1"],
        "m2": audit.m2, "m2_reference": ref["m2"],
        "m3_estimate": audit.m3_estimate, "m3_reference": ref["m3"],
        "jacobian_inverse_error": jac_err,
        "witnesses": _jsonable(audit.witnesses),
    }
    out = _outdir(args)
    write_json(os.path.join(out, "assumptions.json"), doc)
    print(to_json(doc, pretty=True))
    return 0


def _corner_points(lo, hi):
    from itertools import product as _prod
    for bits in _prod((0, 1), repeat=len(lo)):
        yield [h if b else l for b, l, h in zip(bits, lo, hi)]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def cmd_normal_form(cfg: RunConfig, args) -> int:
    prep = prepare_run(cfg)
    rep = prep.birkhoff_report
    doc = {
        "q1_terms_removed": prep.f4_terms,
        "q1_residual_rel": rep.q1_residual_rel,
        "zero_divisor_terms": len(rep.zero_divisor_terms),
        "lie_orders": rep.lie_orders,
        "split_term_counts": {
            "lambda": len(prep.split.lam.terms),
            "B": len(prep.split.b_part.terms),
            "Q1": len(prep.split.q1.terms),
            "Q2": len(prep.split.q2.terms),
            "K": len(prep.split.k_part.terms),
        },
        "reduction": {
            "extraction_error": prep.reduced.extraction_error,
            "binomial_tail_bound": prep.reduced.binomial_tail_bound.tolist(),
            "p_terms": len(prep.reduced.p_series.terms),
            "eps0_measured": prep.eps0_measured,
        },
    }
    out = _outdir(args)
    write_json(os.path.join(out, "normal_form.json"), doc)
    with open(os.path.join(out, "p_series.txt"), "w") as fh:
        fh.write(series_to_text(prep.reduced.p_series))
    print(to_json(doc, pretty=True))
    return 0


def cmd_kam(cfg: RunConfig, args) -> int:
    prep = prepare_run(cfg)
    out = _outdir(args)
    failure = None
    try:
        result = run(prep.state, prep.globals, prep.options)
        reports = result.reports
    except ContractionFailure as exc:
        failure = str(exc)
        reports = exc.reports
        result = None
    rows = [rep.to_dict() for rep in reports]
    write_jsonl(os.path.join(out, "steps.jsonl"), rows)
    summary = {
        "eps0_measured": prep.eps0_measured,
        "eps0_schedule": prep.globals.eps0,
        "alpha0": prep.globals.alpha0,
        "gamma0": prep.globals.gamma0,
        "kappa": [prep.globals.kappa.numerator, prep.globals.kappa.denominator],
        "beta_prime": [prep.globals.beta_prime.numerator,
                       prep.globals.beta_prime.denominator],
        "steps": len(rows),
        "contraction_failure": failure,
    }
    gate = None
    if result is not None:
        gate = result.smallness
        if cfg.gamma_theorem is not None:
            lhs = prep.globals.eps0
            rhs = (prep.globals.alpha0 * cfg.gamma_theorem) ** (1.0 + float(cfg.beta))
            gate = dict(gate)
            gate["theorem_gate_holds"] = lhs <= rhs
            gate["theorem_gate_rhs"] = rhs
        ok, diags = (True, {}) if not reports else verify_contraction(reports)
        summary["contraction_verified"] = ok
        summary["contraction_diagnostics"] = _jsonable(diags)
        summary["surviving_fraction"] = float(result.state.active.mean())
        tor = result.torus
        with open(os.path.join(out, "torus.txt"), "w") as fh:
            fh.write(f"#dnlskam-torus steps {len(rows)}\n")
            fh.write(f"#surviving {' '.join(str(int(v)) for v in tor.surviving)}\n")
            for b in sorted(tor.x_shift):
                fh.write(f"## x_shift {b}\n")
                fh.write(series_to_text(tor.x_shift[b]))
            for b in sorted(tor.y_embed):
                fh.write(f"## y {b}\n")
                fh.write(series_to_text(tor.y_embed[b]))
            for j in sorted(tor.z_embed):
                fh.write(f"## z {j}\n")
                fh.write(series_to_text(tor.z_embed[j]))
            for j in sorted(tor.zbar_embed):
                fh.write(f"## zbar {j}\n")
                fh.write(series_to_text(tor.zbar_embed[j]))
            fh.write("## frequencies\n")
            for g in range(tor.grid.count):
                vals = " ".join(f"{v:.17g}" for v in tor.frequencies[g])
                fh.write(f"{g} {int(tor.surviving[g])} {vals}\n")
    summary["smallness_gate"] = gate
    write_json(os.path.join(out, "summary.json"), summary)
    print(to_json(summary, pretty=True))
    return 0 if failure is None else 1


def cmd_measure(cfg: RunConfig, args) -> int:
    from .engine import KamSchedule, ScheduleGlobals
    out = _outdir(args)
    domain = cfg.measure_domain()
    mdoc = cfg.raw.get("measure", {})
    k_max = int(mdoc.get("k_max", 6))
    mode_max = int(mdoc.get("mode_max", 16))
    steps = int(mdoc.get("steps", 4))
    alpha_base = float(mdoc.get("alpha", cfg.alpha0))
    centers = domain.centers()
    grid = ParameterGrid(centers, ((0, 1),) if len(centers) > 1 else ())
    freq = frequency_maps(cfg.sites, grid, True)
    sites = cfg.sites
    tau = cfg.tau

    sweep_alphas = [float(a) for a in args.alpha_sweep.split(",")] \
        if args.alpha_sweep else [alpha_base * 2.0 ** m for m in range(5)]
    gen = enumerate_spec_arrays(sites, k_max, mode_max, "general")
    pair = enumerate_spec_arrays(sites, k_max, mode_max, "pair")

    def analytic_total(arrs, alpha):
        """Sum of the analytic slab measures over all specs of a family.
        A zone can be nonempty only when min |D| over the box corners is
        below its threshold (affine divisors attain extrema at corners)."""
        ks = arrs["ks"].astype(float)
        n = sites.n
        j_arr = np.array(sites.sites, dtype=float)
        g = ks * j_arr[None, :] + 2.0 * arrs["l2"][:, None].astype(float) / (2 * n - 1)
        corners = np.array(list(_corner_points(domain.lo, domain.hi)))
        dvals = arrs["ipart"][:, None].astype(float) + g @ corners.T
        sign_change = (dvals.min(axis=1) < 0) & (dvals.max(axis=1) > 0)
        min_abs = np.where(sign_change, 0.0, np.min(np.abs(dvals), axis=1))
        knorm = np.abs(arrs["ks"]).sum(axis=1).astype(float)
        thr = alpha * arrs["weight"] / np.maximum(1.0, knorm) ** tau
        total = 0.0
        for t in np.flatnonzero(min_abs < thr):
            total += slab_box_volume(domain.lo, domain.hi, g[t],
                                     float(arrs["ipart"][t]), float(thr[t]))
        return total

    sweep = {}
    sweep_grid = {}
    for a in sweep_alphas:
        mg, _, _ = bulk_zone_masks(gen, sites, centers, a, tau)
        mp, _, _ = bulk_zone_masks(pair, sites, centers, a, tau)
        union = mg | mp
        sweep_grid[a] = float(union.mean()) * domain.volume
        sweep[a] = analytic_total(gen, a) + analytic_total(pair, a)

    # zone table + analytic cross-check at the base alpha
    a0 = sweep_alphas[0]
    rows = []
    checked = 0
    cross_ok = 0
    for fam, arrs in (("general", gen), ("pair", pair)):
        mask, counts, thr = bulk_zone_masks(arrs, sites, centers, a0, tau)
        nz = np.flatnonzero(counts)
        for t in nz[:2000]:
            kvec = tuple(int(v) for v in arrs["ks"][t])
            ip = int(arrs["ipart"][t])
            l2 = int(arrs["l2"][t])
            g = [kvec[b] * sites.sites[b] + 2.0 * l2 / (2 * sites.n - 1)
                 for b in range(sites.n)]
            analytic = slab_box_volume(domain.lo, domain.hi, g, float(ip), float(thr[t]))
            gridm = counts[t] * domain.cell_volume
            dvals = ip + centers @ np.asarray(g)
            boundary = int(np.sum(np.abs(np.abs(dvals) - thr[t]) <=
                                  (np.max(np.abs(g)) + 1e-300) * domain.cell_diag()))
            ok = abs(gridm - analytic) <= (boundary + 1) * domain.cell_volume + 1e-300
            checked += 1
            cross_ok += int(ok)
            rows.append([fam, " ".join(str(v) for v in kvec), l2,
                         float(arrs["weight"][t]),
                         float(np.min(np.abs(dvals))),
                         counts[t] / centers.shape[0], analytic, ok])
    write_csv(os.path.join(out, "zones.csv"),
              ["family", "k", "l_mode_sum", "weight", "min_abs_divisor",
               "excluded_fraction", "analytic_measure", "grid_matches_analytic"],
              rows)

    # Theta^2 per-step decay with the schedule's alpha_{2,nu}, Pi_nu
    ref = reference_constants(cfg)
    eps_nominal = float(mdoc.get("nominal_eps0", 1e-8))
    g0 = ScheduleGlobals(n=sites.n, c_j=sites.c_j, tau=tau, beta=cfg.beta,
                         s0=cfg.s0, r0=cfg.r0, alpha0=alpha_base,
                         eps0=eps_nominal, gamma0=1e-6, bsigma_c=cfg.bsigma_c,
                         m0=ref["m"], e0=float(np.max(np.abs(freq.omega))),
                         m1_0=ref["m1"], m2_0=ref["m2"], m3_0=ref["m3"])
    sched = KamSchedule(g0)
    theta2_steps = []
    for nu in range(steps):
        try:
            row = sched.row(nu)
        except ValueError:
            break   # schedule left its validity range; report what exists
        pair_nu = enumerate_spec_arrays(sites, k_max,
                                        min(mode_max, int(row.pi_trunc)), "pair")
        mp, counts, thrs = bulk_zone_masks(pair_nu, sites, centers, row.alpha2, tau)
        analytic_total = 0.0
        for t in np.flatnonzero(counts):
            kvec = tuple(int(v) for v in pair_nu["ks"][t])
            l2 = int(pair_nu["l2"][t])
            g = [kvec[b] * sites.sites[b] + 2.0 * l2 / (2 * sites.n - 1)
                 for b in range(sites.n)]
            analytic_total += slab_box_volume(domain.lo, domain.hi, g,
                                              float(pair_nu["ipart"][t]),
                                              float(thrs[t]))
        theta2_steps.append({"nu": nu, "alpha2": row.alpha2, "pi": row.pi_trunc,
                             "grid_measure": float(mp.mean()) * domain.volume,
                             "analytic_sum": analytic_total})

    ratios = []
    alist = sorted(sweep)
    for lo_a, hi_a in zip(alist, alist[1:]):
        ratios.append(sweep[hi_a] / sweep[lo_a] if sweep[lo_a] > 0 else math.inf)
    doc = {
        "alphas": alist,
        "excluded_measures": [sweep[a] for a in alist],
        "excluded_grid_measures": [sweep_grid[a] for a in alist],
        "doubling_ratios": ratios,
        "zone_cross_checks": checked,
        "zone_cross_check_passed": cross_ok,
        "theta2_per_step": theta2_steps,
        "domain_volume": domain.volume,
    }
    write_json(os.path.join(out, "measure.json"), doc)
    print(to_json(doc, pretty=True))
    return 0


def cmd_verify_bounds(cfg: RunConfig, args) -> int:
    bdoc = cfg.raw.get("bounds", {})
    samples = int(bdoc.get("samples", 100))
    reports = bounds_mod.verify_appendix_bounds(
        samples, cfg.seed, kmax_sums=int(bdoc.get("kmax_sums", 40)),
        kmax_fields=int(bdoc.get("kmax_fields", 4)))
    out = _outdir(args)
    write_json(os.path.join(out, "bounds.json"), reports)
    print(to_json(reports, pretty=True))
    total_failed = sum(r["failed"] for r in reports.values())
    return 0 if total_failed == 0 else 1


def main(argv: Optional[List[str]] = None) -> int:
    ap = argparse.ArgumentParser(prog="dnlskam")
    ap.add_argument("--config", required=True, help="path to the JSON config")
    ap.add_argument("--out", default=None, help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="override the config seed")
    ap.add_argument("--workers", type=int, default=None,
                    help="worker cap (current ops are vectorized single-process)")
    ap.add_argument("--alpha-sweep", default=None,
                    help="comma-separated alpha values for the measure sweep")
    ap.add_argument("command", choices=["admissible", "assumptions", "normal-form",
                                        "kam", "measure", "verify-bounds"])
    args = ap.parse_args(argv)
    if args.workers is not None and args.workers < 1:
        print("config error: workers must be >= 1", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config, args.seed)
        handler = {
            "admissible": cmd_admissible,
            "assumptions": cmd_assumptions,
            "normal-form": cmd_normal_form,
            "kam": cmd_kam,
            "measure": cmd_measure,
            "verify-bounds": cmd_verify_bounds,
        }[args.command]
        return handler(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (AllExcluded,) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
