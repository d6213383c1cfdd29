"""``pqlmm`` command line: ``fit``, ``infer`` and ``simulate``.

Exit codes: 0 success, 1 usage or validation error, 2 numerical
non-convergence (a partial artifact is still written), 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import ClusterData, ClusteredDesign, ThetaState
from .family import KINDS, DomainError, Family
from .inference import (DEFAULT_DRAWS, REGIME_TAGS, TargetSelection, UnsupportedConfiguration,
                        conditional_interval, linear_predictor_interval, prediction_gap_interval,
                        unconditional_fixed_interval)
from .rng import fresh_seed
from .simulate import (DESK_GRID, FULL_GRID, MODELS, SimDesign, frobenius_table,
                       reports_to_csv, run_coverage_experiment, run_gap_normality_study)
from .solver import PqlFit, SolverConfig, fit_pql


EXIT_OK, EXIT_VALIDATION, EXIT_NONCONVERGED, EXIT_IO = 0, 1, 2, 3
ARTIFACT_VERSION = 1


class ValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


# --- configuration -------------------------------------------------------------

def _reject_unknown(d, allowed, where):
    if not isinstance(d, dict):
        raise ValidationError(f"{where} must be a JSON object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ValidationError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass
class ColumnMap:
    cluster: str = "cluster_id"
    response: str = "y"
    fixed: list | None = None  # None: every column named x<k>, in order
    random: list | None = None  # None: same as fixed (partnered)
    trials: str | None = None

    @classmethod
    def from_dict(cls, d):
        _reject_unknown(d, cls.__dataclass_fields__, "columns")
        return cls(**d)


@dataclass
class InferenceOptions:
    regime: str = "auto"
    level: float = 0.95
    n_draws: int = DEFAULT_DRAWS
    seed: int | None = None

    @classmethod
    def from_dict(cls, d):
        _reject_unknown(d, cls.__dataclass_fields__, "inference")
        return cls(**d)


@dataclass
class RunConfig:
    family: str = "gaussian"
    solver: SolverConfig = field(default_factory=SolverConfig)
    inference: InferenceOptions = field(default_factory=InferenceOptions)
    columns: ColumnMap = field(default_factory=ColumnMap)
    init_G: list | None = None

    @classmethod
    def from_dict(cls, d):
        _reject_unknown(d, cls.__dataclass_fields__, "config")
        out = cls(family=d.get("family", "gaussian"),
                  solver=SolverConfig.from_dict(d.get("solver", {})),
                  inference=InferenceOptions.from_dict(d.get("inference", {})),
                  columns=ColumnMap.from_dict(d.get("columns", {})),
                  init_G=d.get("init_G"))
        out.validate()
        return out

    def validate(self):
        Family.from_tag(self.family)
        _check_level(self.inference.level)
        if self.inference.regime not in REGIME_TAGS or self.inference.regime == "uncond_balanced":
            raise ValidationError(f"regime must be one of {[r for r in REGIME_TAGS if r != 'uncond_balanced']}")
        if self.inference.n_draws < 1:
            raise ValidationError("n_draws must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class SimulationConfig:
    study: str = "coverage"  # coverage, gap_normality or frobenius
    family: str = "poisson"
    model: str = "section5"
    grid: list | None = None
    full_grid: bool = False
    replicates: int = 200
    regime: str = "unconditional"
    targets: list = field(default_factory=lambda: ["beta", "b1"])
    level: float = 0.95
    seed: int | None = None
    g_mode: str = "sample_cov"
    g_modes: list = field(default_factory=lambda: ["sample_cov"])
    sigma_b2: float = 1.0
    n_draws: int = DEFAULT_DRAWS
    solver: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        _reject_unknown(d, cls.__dataclass_fields__, "simulation config")
        out = cls(**d)
        out.validate()
        return out

    def validate(self):
        if self.study not in ("coverage", "gap_normality", "frobenius"):
            raise ValidationError(f"unknown study {self.study!r}")
        Family.from_tag(self.family)
        if self.model not in MODELS:
            raise ValidationError(f"model must be one of {MODELS}")
        _check_level(self.level)
        if self.replicates < 1:
            raise ValidationError("replicates must be at least 1")
        unknown_targets = set(self.targets) - {"beta", "b1"}
        if unknown_targets:
            raise ValidationError(f"unknown targets {sorted(unknown_targets)}")
        for cell in self.cells():
            if len(cell) != 2 or min(cell) < 1 or any(int(v) != v for v in cell):
                raise ValidationError(f"invalid grid cell {cell!r}; expected [m, n] positive integers")
        SolverConfig.from_dict(self.solver)

    def cells(self):
        if self.full_grid:
            return [tuple(c) for c in FULL_GRID]
        return [tuple(c) for c in (self.grid if self.grid is not None else DESK_GRID)]

    def designs(self, seed):
        out = []
        for m, n in self.cells():
            try:
                out.append(SimDesign(family=self.family, m=int(m), n=int(n), regime=self.regime,
                                     replicates=self.replicates, seed=seed, model=self.model,
                                     sigma_b2=self.sigma_b2, g_mode=self.g_mode))
            except ValueError as exc:
                raise ValidationError(str(exc)) from exc
        return out


def _check_level(level):
    if not 0 < level < 1:
        raise ValidationError(f"level must lie strictly between 0 and 1, got {level}")


def _load_json(path):
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc


# --- data ------------------------------------------------------------------------

def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_dataset(path, columns: ColumnMap, family=None):
    """Parse a clustered CSV into ``(ClusteredDesign, cluster_ids, fixed_names, random_names)``.

    Clusters are ordered by first appearance.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValidationError(f"{path}: empty file")
        header = [h.strip() for h in header]
        dupes = sorted({h for h in header if header.count(h) > 1})
        if dupes:
            raise ValidationError(f"{path}: duplicate column names {dupes}")
        fixed = columns.fixed
        if fixed is None:
            fixed = [h for h in header if h.startswith("x") and h[1:].isdigit()]
            fixed.sort(key=lambda h: int(h[1:]))
        random = fixed if columns.random is None else columns.random
        needed = [columns.cluster, columns.response, *fixed, *random]
        if columns.trials:
            needed.append(columns.trials)
        missing = [c for c in dict.fromkeys(needed) if c not in header]
        if missing:
            raise ValidationError(f"{path}: missing columns {missing}")
        pos = {h: k for k, h in enumerate(header)}
        groups: dict[str, list] = {}
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}: line {line} has {len(row)} fields, expected {len(header)}")
            cid = row[pos[columns.cluster]].strip()
            if not cid:
                raise ValidationError(f"{path}: line {line}, column {columns.cluster!r}: empty cluster id")
            vals = {}
            for name in dict.fromkeys(needed[1:]):
                cell = row[pos[name]].strip()
                try:
                    vals[name] = float(cell)
                except ValueError:
                    raise ValidationError(
                        f"{path}: line {line}, column {name!r}: cannot parse {cell!r} as a number") from None
                if not np.isfinite(vals[name]):
                    raise ValidationError(f"{path}: line {line}, column {name!r}: non-finite value")
            groups.setdefault(cid, []).append(vals)
    if not groups:
        raise ValidationError(f"{path}: no data rows")
    clusters = []
    for rows in groups.values():
        y = [r[columns.response] for r in rows]
        X = np.array([[r[c] for c in fixed] for r in rows]).reshape(len(rows), len(fixed))
        Z = np.array([[r[c] for c in random] for r in rows]).reshape(len(rows), len(random))
        t = [r[columns.trials] for r in rows] if columns.trials else None
        clusters.append(ClusterData(y, X, Z, t))
    design = ClusteredDesign(clusters, family)
    return design, list(groups), list(fixed), list(random)


# --- artifact --------------------------------------------------------------------

def fit_to_artifact(fit: PqlFit, cluster_ids, config: RunConfig, data_path, fixed, random):
    return {
        "version": ARTIFACT_VERSION,
        "family": fit.family,
        "fixed_names": fixed,
        "random_names": random,
        "beta": fit.beta.tolist(),
        "b": {cid: fit.b[i].tolist() for i, cid in enumerate(cluster_ids)},
        "cluster_order": list(cluster_ids),
        "G_hat": np.asarray(fit.G_hat).tolist(),
        "phi_hat": fit.phi_hat,
        "dispersion": fit.dispersion,
        "diagnostics": {"converged": fit.converged, "newton_iters_total": fit.newton_iters_total,
                        "outer_iters": fit.outer_iters, "final_grad_norm": fit.final_grad_norm,
                        "objective": fit.objective, "g_mode": fit.g_mode,
                        "warnings": list(fit.warnings)},
        "config": config.to_dict(),
        "data_sha256": file_sha256(data_path),
    }


def artifact_to_fit(art) -> PqlFit:
    b = np.array([art["b"][cid] for cid in art["cluster_order"]], dtype=float)
    b = b.reshape(len(art["cluster_order"]), len(art["random_names"]))
    d = art["diagnostics"]
    return PqlFit(theta=ThetaState(np.asarray(art["beta"], dtype=float), b),
                  G_hat=np.asarray(art["G_hat"], dtype=float), phi_hat=art["phi_hat"],
                  converged=d["converged"], newton_iters_total=d["newton_iters_total"],
                  outer_iters=d["outer_iters"], final_grad_norm=d["final_grad_norm"],
                  objective=d["objective"], dispersion=art["dispersion"], g_mode=d["g_mode"],
                  family=art["family"], warnings=list(d["warnings"]))


def _write_text(path, text):
    if path is None or str(path) == "-":
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
        return
    Path(path).write_text(text, encoding="utf-8")


# --- targets ---------------------------------------------------------------------

def _parse_kv(body, what):
    out = {}
    for part in body.split(","):
        if "=" not in part:
            raise ValidationError(f"malformed {what} target field {part!r}; expected key=value")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def parse_target(spec: str) -> dict:
    """Parse ``beta:K``, ``b:cluster=ID[,k=K]``, ``gap:cluster=ID`` or ``lp:cluster=ID,a=A1:A2:...``.

    Component indices are 1-based on the command line.
    """
    if ":" not in spec:
        raise ValidationError(f"malformed target {spec!r}")
    kind, body = spec.split(":", 1)
    if kind == "beta":
        try:
            k = int(body)
        except ValueError:
            raise ValidationError(f"beta target needs an integer index, got {body!r}") from None
        if k < 1:
            raise ValidationError("beta index is 1-based")
        return {"kind": "beta", "k": k - 1}
    if kind not in ("b", "gap", "lp"):
        raise ValidationError(f"unknown target kind {kind!r}")
    kv = _parse_kv(body, kind)
    allowed = {"b": {"cluster", "k"}, "gap": {"cluster"}, "lp": {"cluster", "a"}}[kind]
    if "cluster" not in kv or set(kv) - allowed:
        raise ValidationError(f"{kind} target accepts keys {sorted(allowed)} and needs cluster=")
    out = {"kind": kind, "cluster": kv["cluster"]}
    if "k" in kv:
        try:
            out["k"] = int(kv["k"]) - 1
        except ValueError:
            raise ValidationError(f"component index must be an integer, got {kv['k']!r}") from None
        if out["k"] < 0:
            raise ValidationError("component index is 1-based")
    if kind == "lp":
        if "a" not in kv:
            raise ValidationError("lp target needs a=A1:A2:...")
        try:
            out["a"] = [float(v) for v in kv["a"].split(":")]
        except ValueError:
            raise ValidationError(f"cannot parse coefficients {kv['a']!r}") from None
    return out


def intervals_for_target(target, design, fit, cluster_ids, regime, level, seed, n_draws):
    G = fit.G_hat
    if target["kind"] == "beta":
        if regime == "conditional":
            return [conditional_interval(design, fit, TargetSelection("fixed_effect", target["k"]), level)]
        return [unconditional_fixed_interval(fit, target["k"], level, G)]
    try:
        i = cluster_ids.index(target["cluster"])
    except ValueError:
        raise ValidationError(f"unknown cluster id {target['cluster']!r}") from None
    if target["kind"] == "lp":
        return [linear_predictor_interval(design, fit, i, target["a"], level, seed,
                                          G_for_inference=G, n_draws=n_draws)]
    if target["kind"] == "b" and regime == "conditional":
        comps = [target["k"]] if "k" in target else range(design.p_r)
        return [conditional_interval(design, fit, TargetSelection("random_effect", k, i), level)
                for k in comps]
    out = prediction_gap_interval(design, fit, i, level, regime, G, seed,
                                  component=target.get("k"), n_draws=n_draws)
    return out if isinstance(out, list) else [out]


# --- commands --------------------------------------------------------------------

def _resolve_run_config(args) -> RunConfig:
    cfg = RunConfig.from_dict(_load_json(args.config)) if args.config else RunConfig()
    if args.family:
        cfg.family = args.family
    if getattr(args, "level", None) is not None:
        cfg.inference.level = args.level
    if getattr(args, "regime", None):
        cfg.inference.regime = args.regime
    if args.seed is not None:
        cfg.inference.seed = args.seed
    cfg.validate()
    return cfg


def _seed(seed):
    if seed is None:
        seed = fresh_seed()
        print(f"seed: {seed}", file=sys.stderr)
    return seed


def cmd_fit(args) -> int:
    cfg = _resolve_run_config(args)
    if args.show_config:
        print(json.dumps(cfg.to_dict(), indent=2))
    design, ids, fixed, random = read_dataset(args.data, cfg.columns, cfg.family)
    fit = fit_pql(design, cfg.family, cfg.solver, init_G=cfg.init_G)
    art = fit_to_artifact(fit, ids, cfg, args.data, fixed, random)
    _write_text(args.out, json.dumps(art, indent=2))
    if not fit.converged:
        print("fit did not converge: " + "; ".join(fit.warnings), file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_infer(args) -> int:
    art = _load_json(args.artifact)
    cfg = RunConfig.from_dict(art["config"])
    if args.level is not None:
        cfg.inference.level = args.level
    if args.regime:
        cfg.inference.regime = args.regime
    cfg.validate()
    if file_sha256(args.data) != art["data_sha256"]:
        raise ValidationError("artifact is stale: data file does not match the fitted data")
    design, ids, _, _ = read_dataset(args.data, cfg.columns, cfg.family)
    if ids != art["cluster_order"]:
        raise ValidationError("artifact is stale: cluster order differs")
    fit = artifact_to_fit(art)
    seed = _seed(args.seed if args.seed is not None else cfg.inference.seed)
    if not args.target:
        raise ValidationError("give at least one --target")
    records = []
    for spec in args.target:
        target = parse_target(spec)
        for iv in intervals_for_target(target, design, fit, ids, cfg.inference.regime,
                                       cfg.inference.level, seed, cfg.inference.n_draws):
            records.append({"spec": spec, **iv.to_record()})
    _write_text(args.out, json.dumps({"seed": seed, "records": records}, indent=2))
    return EXIT_OK


def cmd_simulate(args) -> int:
    raw = _load_json(args.config) if args.config else {}
    if args.family:
        raw["family"] = args.family
    if args.level is not None:
        raw["level"] = args.level
    if args.regime:
        raw["regime"] = args.regime
    sim = SimulationConfig.from_dict(raw)
    seed = _seed(args.seed if args.seed is not None else sim.seed)
    sim.seed = seed
    designs = sim.designs(seed)
    if args.show_config or args.dry_run:
        plan = {"config": asdict(sim),
                "cells": [{"m": d.m, "n": d.n, "replicates": d.replicates} for d in designs]}
        print(json.dumps(plan, indent=2))
    if args.dry_run:
        return EXIT_OK
    solver = SolverConfig.from_dict(sim.solver)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    if sim.study == "frobenius":
        rows = frobenius_table(designs, solver, tuple(sim.g_modes), jobs=args.jobs)
        (out / "frobenius.json").write_text(json.dumps(rows, indent=2, sort_keys=True), encoding="utf-8")
        with open(out / "frobenius.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        return EXIT_OK
    reports = []
    for d in designs:
        if sim.study == "gap_normality":
            rep = run_gap_normality_study(d, solver, sim.level, args.jobs, sim.n_draws)
        else:
            rep = run_coverage_experiment(d, solver, tuple(sim.targets), sim.level, args.jobs,
                                          sim.n_draws)
        print(f"m={d.m} n={d.n}: used {rep.n_used}, dropped {rep.n_dropped}, "
              f"{rep.wall_time:.1f}s", file=sys.stderr)
        reports.append(rep)
    (out / "report.csv").write_text(reports_to_csv(reports), encoding="utf-8")
    body = "[\n" + ",\n".join(r.to_json() for r in reports) + "\n]\n"
    (out / "report.json").write_text(body, encoding="utf-8")
    return EXIT_OK


def build_parser():
    p = _Parser(prog="pqlmm", description="PQL fitting and inference for clustered GLMMs")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--family", choices=KINDS)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output path ('-' or omitted: stdout)")
        sp.add_argument("--show-config", action="store_true", help="print the resolved configuration")

    f = sub.add_parser("fit", help="fit a model to a clustered CSV")
    f.add_argument("data")
    common(f)
    f.set_defaults(func=cmd_fit, level=None, regime=None)

    i = sub.add_parser("infer", help="intervals from a fit artifact")
    i.add_argument("artifact")
    i.add_argument("data")
    common(i)
    i.add_argument("--target", action="append", help="beta:K, b:cluster=ID[,k=K], gap:cluster=ID "
                                                     "or lp:cluster=ID,a=A1:A2:...")
    i.add_argument("--level", type=float)
    i.add_argument("--regime", choices=[r for r in REGIME_TAGS if r != "uncond_balanced"])
    i.set_defaults(func=cmd_infer)

    s = sub.add_parser("simulate", help="run a simulation study")
    common(s)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--level", type=float)
    s.add_argument("--regime", choices=["conditional", "unconditional"])
    s.add_argument("--dry-run", action="store_true", help="print the resolved plan and exit")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ValidationError, DomainError, UnsupportedConfiguration) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except np.linalg.LinAlgError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED


if __name__ == "__main__":
    sys.exit(main())
