"""Batch front end: configured solver runs, sweeps and machine-readable output.

``nlschwarz run config.json [overrides]`` executes every point of the sweep
defined by the config (cartesian product of the list-valued fields among
``re``, ``fy``, ``subdomains``, ``variant``, ``coarse``) and writes, per
point, a JSON summary record and a CSV convergence history into the output
directory.  ``nlschwarz export-coarse config.json --entity K`` writes the
coarse-basis columns of one interface entity as node values.

Config schema (JSON object; every field optional unless noted):

    problem      "ldc" | "beam" | "diffusion"        (required)
    re           number or list   (ldc Reynolds numbers)
    fy           number or list   (beam loads, MN/m^2)
    coefficient  "constant" | "nonlinear"  (diffusion law)
    subdomains   [px, py] or list of such pairs
    hh           elements per subdomain per direction (H/h)
    overlap      dual-graph overlap layers for nonlinear Schwarz; NKS uses
                 nodal layers of half that width
    domain       [x0, x1, y0, y1]
    variant      "aspen" | "raspen" | "additive" | "hybrid" | "nks" or list
    coarse       "gdsw" | "rgdsw" | "msfem" or list
    modified     bool (Dirichlet-edge modification of the reduced spaces)
    tangent      "exact" | "aspin"
    out          output directory (default "results")
    seed         integer, recorded in the records
    solver       {"outer"|"inner"|"coarse": {rel_tol, abs_tol, max_iter,
                 line_search}, "gmres": {rel_tol, max_iter, restart}}

Flag overrides: --problem --re --fy --subdomains PXxPY --hh --overlap
--variant --coarse --modified --out.  The worker count for local solves is
read from the environment variable NLSCHWARZ_WORKERS.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import assembly as asm
from . import coarse as crs
from . import mesh as msh
from .outer import (GmresParams, SolveReport, SolverConfig, beam_config,
                    ldc_config, solve_nks, solve_nonlinear_schwarz)
from .schwarz import NewtonParams

HISTORY_COLUMNS = ["iteration", "rel_residual", "precond_residual",
                   "gmres_its", "inner_avg", "coarse_its", "line_search_steps",
                   "t_inner", "t_coarse", "t_gmres", "t_other"]

SWEEP_FIELDS = ("re", "fy", "subdomains", "variant", "coarse")


class ConfigError(ValueError):
    pass


def _load_config(path: str, overrides: argparse.Namespace) -> dict:
    try:
        with open(path) as f:
            cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for key in ("problem", "re", "fy", "hh", "overlap", "variant", "coarse",
                "modified", "out"):
        val = getattr(overrides, key.replace("-", "_"), None)
        if val is not None:
            cfg[key] = val
    if getattr(overrides, "subdomains", None) is not None:
        px, _, py = overrides.subdomains.partition("x")
        cfg["subdomains"] = [int(px), int(py or px)]
    if "problem" not in cfg:
        raise ConfigError("config must set 'problem'")
    if cfg["problem"] not in ("ldc", "beam", "diffusion"):
        raise ConfigError(f"unknown problem {cfg['problem']!r}")
    return cfg


def _sweep_points(cfg: dict):
    """Cartesian product over the list-valued sweep fields."""
    axes = {}
    for f in SWEEP_FIELDS:
        if f not in cfg:
            continue
        v = cfg[f]
        if f == "subdomains":
            vals = v if v and isinstance(v[0], list) else [v]
        elif isinstance(v, list):
            vals = v
        else:
            vals = [v]
        axes[f] = vals
    if not axes:
        yield {}
        return
    keys = list(axes)
    for combo in itertools.product(*(axes[k] for k in keys)):
        yield dict(zip(keys, combo))


def _newton_params(d: dict, base: NewtonParams) -> NewtonParams:
    out = NewtonParams(**{**asdict(base), **d})
    return out


def _solver_config(cfg: dict, point: dict) -> SolverConfig:
    base = beam_config() if cfg["problem"] == "beam" else ldc_config()
    s = cfg.get("solver", {})
    if "outer" in s:
        base.outer = _newton_params(s["outer"], base.outer)
    if "inner" in s:
        base.inner = _newton_params(s["inner"], base.inner)
    if "coarse" in s:
        base.coarse = _newton_params(s["coarse"], base.coarse)
    if "gmres" in s:
        g = asdict(base.gmres)
        g.update(s["gmres"])
        base.gmres = GmresParams(**g)
    base.variant = point.get("variant", cfg.get("variant", base.variant))
    base.coarse_kind = point.get("coarse", cfg.get("coarse", base.coarse_kind))
    base.modified = bool(cfg.get("modified", base.modified))
    base.tangent_mode = cfg.get("tangent", base.tangent_mode)
    return base


def _build_case(cfg: dict, point: dict):
    problem_kind = cfg["problem"]
    if problem_kind == "ldc":
        prob = asm.ldc_problem(float(point.get("re", cfg.get("re", 100.0))))
        domain = tuple(cfg.get("domain", (0.0, 1.0, 0.0, 1.0)))
    elif problem_kind == "beam":
        prob = asm.beam_problem(float(point.get("fy", cfg.get("fy", 1.0))))
        domain = tuple(cfg.get("domain", (0.0, 5.0, 0.0, 1.0)))
    else:
        prob = asm.diffusion_problem(cfg.get("coefficient", "nonlinear"))
        domain = tuple(cfg.get("domain", (0.0, 1.0, 0.0, 1.0)))
    px, py = point.get("subdomains", cfg.get("subdomains", [2, 2]))
    hh = int(cfg.get("hh", 10))
    mesh = msh.build_structured_mesh(px * hh, py * hh, domain=domain,
                                     problem_kind=problem_kind)
    dofmap = asm.build_dofmap(prob, mesh)
    return prob, mesh, dofmap, px, py


def _decompose(mesh, px, py, overlap, nks: bool):
    dec = msh.partition_structured(mesh, px, py)
    if nks:
        msh.extend_overlap(dec, msh.nodal_graph(mesh), max(1, overlap // 2))
    else:
        msh.extend_overlap(dec, msh.dual_graph(mesh), overlap)
    msh.ghost_layer(dec, msh.nodal_graph(mesh), mesh=mesh)
    return dec


def run_point(cfg: dict, point: dict) -> tuple[dict, SolveReport]:
    prob, mesh, dofmap, px, py = _build_case(cfg, point)
    scfg = _solver_config(cfg, point)
    variant = scfg.variant
    overlap = int(cfg.get("overlap", 2))
    dec = _decompose(mesh, px, py, overlap, nks=(variant == "nks"))
    needs_coarse = variant in ("nks", "additive", "hybrid")
    P0 = None
    if needs_coarse:
        skel = msh.interface_skeleton(dec, mesh)
        u0 = asm.initial_iterate(prob, dofmap)
        A0 = asm.assemble_tangent(prob, mesh, dofmap, u0)
        P0, _, _ = crs.build_coarse_space(prob, mesh, dofmap, skel, A0,
                                          scfg.coarse_kind, scfg.modified,
                                          decomp=dec)
    if variant == "nks":
        sol, rep = solve_nks(prob, mesh, dofmap, dec, scfg, P0=P0)
    else:
        sol, rep = solve_nonlinear_schwarz(prob, mesh, dofmap, dec, scfg, P0=P0)

    record = {
        "problem": cfg["problem"],
        "variant": variant,
        "coarse": scfg.coarse_kind if needs_coarse else None,
        "modified": scfg.modified if needs_coarse else None,
        "num_subdomains": px * py,
        "subdomains": [px, py],
        "hh": int(cfg.get("hh", 10)),
        "overlap": overlap,
        "n_dofs": dofmap.n_dofs,
        "seed": cfg.get("seed", 0),
        "converged": rep.converged,
        "reason": rep.reason,
        "outer_iterations": rep.outer_iterations,
        "total_gmres": rep.total_gmres,
        "avg_inner": rep.avg_inner,
        "total_coarse": rep.total_coarse,
        "label": f"{rep.total_gmres} ({rep.outer_iterations})",
        "timings": rep.timings,
    }
    if cfg["problem"] == "ldc":
        record["re"] = prob.Re
    elif cfg["problem"] == "beam":
        record["fy"] = prob.f_y
    return record, rep


def _point_tag(cfg: dict, point: dict, index: int) -> str:
    bits = [cfg["problem"]]
    for k in SWEEP_FIELDS:
        if k in point:
            v = point[k]
            bits.append(f"{k}-{v[0]}x{v[1]}" if k == "subdomains" else f"{k}-{v}")
    bits.append(f"{index:03d}")
    return "_".join(str(b) for b in bits)


def emit_history(report: SolveReport, path) -> None:
    """One CSV row per outer iteration; row 0 is the initial residual."""
    n = len(report.residuals)

    def at(lst, i, default=""):
        return lst[i] if 0 <= i < len(lst) else default

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(HISTORY_COLUMNS)
        rows = max(n, len(report.gmres_iterations) + 1)
        for k in range(rows):
            th = at(report.timing_history, k - 1, ("", "", "", ""))
            w.writerow([
                k,
                repr(at(report.residuals, k)) if k < n else "",
                repr(at(report.precond_residuals, k - 1)) if k >= 1 else "",
                at(report.gmres_iterations, k - 1, "") if k >= 1 else 0,
                repr(at(report.inner_iterations, k - 1)) if k >= 1 else 0,
                at(report.coarse_iterations, k - 1, "") if k >= 1 else 0,
                at(report.line_search_steps, k - 1, "") if k >= 1 else 0,
                *(repr(t) if t != "" else "" for t in th),
            ])


def load_history(path) -> SolveReport:
    """Inverse of emit_history for the per-iteration history fields."""
    rep = SolveReport()
    with open(path, newline="") as f:
        rdr = csv.DictReader(f)
        for row in rdr:
            k = int(row["iteration"])
            if row["rel_residual"]:
                rep.residuals.append(float(row["rel_residual"]))
            if k == 0:
                continue
            if row["precond_residual"]:
                rep.precond_residuals.append(float(row["precond_residual"]))
            if row["gmres_its"]:
                rep.gmres_iterations.append(int(row["gmres_its"]))
            if row["inner_avg"]:
                rep.inner_iterations.append(float(row["inner_avg"]))
            if row["coarse_its"]:
                rep.coarse_iterations.append(int(row["coarse_its"]))
            if row["line_search_steps"]:
                rep.line_search_steps.append(int(row["line_search_steps"]))
            if row["t_inner"]:
                rep.timing_history.append(tuple(
                    float(row[c]) for c in ("t_inner", "t_coarse", "t_gmres",
                                            "t_other")))
    for cat, tot in zip(("Inner solve", "Coarse solve", "GMRES", "Other"),
                        zip(*rep.timing_history) if rep.timing_history
                        else ((), (), (), ())):
        rep.timings[cat] = float(sum(tot))
    return rep


def cmd_run(args) -> int:
    try:
        cfg = _load_config(args.config, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(cfg.get("out", "results"))
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i, point in enumerate(_sweep_points(cfg)):
        tag = _point_tag(cfg, point, i)
        record, rep = run_point(cfg, point)
        record["point"] = point
        record["history_file"] = f"{tag}.csv"
        emit_history(rep, out_dir / f"{tag}.csv")
        with open(out_dir / f"{tag}.json", "w") as f:
            json.dump(record, f, indent=2)
        records.append(record)
        status = "ok" if record["converged"] else f"FAILED ({record['reason']})"
        print(f"{tag}: {record['label']} {status}")
    with open(out_dir / "summary.json", "w") as f:
        json.dump(records, f, indent=2)
    return 0


def cmd_export_coarse(args) -> int:
    try:
        cfg = _load_config(args.config, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    point = next(_sweep_points(cfg))
    prob, mesh, dofmap, px, py = _build_case(cfg, point)
    scfg = _solver_config(cfg, point)
    dec = _decompose(mesh, px, py, int(cfg.get("overlap", 2)), nks=False)
    skel = msh.interface_skeleton(dec, mesh)
    u0 = asm.initial_iterate(prob, dofmap)
    A0 = asm.assemble_tangent(prob, mesh, dofmap, u0)
    P0, ents, labels = crs.build_coarse_space(prob, mesh, dofmap, skel, A0,
                                              scfg.coarse_kind, scfg.modified,
                                              decomp=dec)
    k = args.entity
    if not 0 <= k < len(ents):
        print(f"error: entity {k} out of range (0..{len(ents) - 1})",
              file=sys.stderr)
        return 2
    cols = [c for c, (e, _) in enumerate(labels) if e == k]
    out = Path(cfg.get("out", "results"))
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"coarse_entity_{k}.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["node", "x", "y"] + [labels[c][1] for c in cols])
        dense = np.asarray(P0[:, cols].todense())
        for node in range(mesh.n_nodes):
            vals = []
            for c_i, c in enumerate(cols):
                fld = dofmap.field(labels[c][1]) if labels[c][1] in \
                    [fl.name for fl in dofmap.fields] else dofmap.fields[0]
                vals.append(float(dense[fld.offset + node, c_i]))
            w.writerow([node, repr(float(mesh.nodes[node, 0])),
                        repr(float(mesh.nodes[node, 1]))]
                       + [repr(v) for v in vals])
    print(f"wrote {path} ({ents[k].kind} entity, {len(cols)} modes)")
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="nlschwarz",
                                 description="nonlinear Schwarz solver runs")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_overrides(p):
        p.add_argument("config")
        p.add_argument("--problem", choices=("ldc", "beam", "diffusion"))
        p.add_argument("--re", type=float)
        p.add_argument("--fy", type=float)
        p.add_argument("--subdomains", help="PXxPY, e.g. 4x4")
        p.add_argument("--hh", type=int)
        p.add_argument("--overlap", type=int)
        p.add_argument("--variant",
                       choices=("aspen", "raspen", "additive", "hybrid", "nks"))
        p.add_argument("--coarse", choices=("gdsw", "rgdsw", "msfem"))
        p.add_argument("--modified", action="store_const", const=True)
        p.add_argument("--out")

    pr = sub.add_parser("run", help="execute the configured sweep")
    add_overrides(pr)
    pr.set_defaults(func=cmd_run)

    pe = sub.add_parser("export-coarse", help="write coarse-basis node values")
    add_overrides(pe)
    pe.add_argument("--entity", type=int, required=True)
    pe.set_defaults(func=cmd_export_coarse)

    args = ap.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
