"""Command-line entry point: config parsing, subcommands and run manifests.

Config files are flat ``key = value`` lines with dotted section prefixes.
Blank lines and ``#`` comments are ignored. Every key can be overridden by
the environment variable ``BAYESMS_<SECTION>__<KEY>`` (upper case, the dot
replaced by a double underscore), e.g. ``BAYESMS_BAYES__SIGMA_L=1e-4``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from .coeff import CoefficientField, ContrastLaw, FieldError, generate_channel_field, \
    load_field, save_field
from .diagnostics import frequency_correlation, read_table, write_chain_tables, write_grid, \
    write_table
from .fem import SolverError
from .gmsfem import SpectralError, read_catalog, write_catalog
from .march import Run, RunPlan
from .mesh import ConfigurationError, build_hierarchy
from .sampler import burn_in_records
from .util import derive_seed

log = logging.getLogger("bayesms")

ENV_PREFIX = "BAYESMS_"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    """Bad configuration; reported with the offending key and line."""


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------
def _grid(text: str) -> tuple[int, int]:
    parts = text.lower().replace(" ", "").split("x")
    if len(parts) != 2:
        raise ValueError(f"expected NXxNY, got {text!r}")
    return int(parts[0]), int(parts[1])


def _extent(text: str) -> tuple[float, float]:
    parts = text.lower().replace(" ", "").split("x")
    if len(parts) != 2:
        raise ValueError(f"expected LXxLY, got {text!r}")
    return float(parts[0]), float(parts[1])


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(",") if p.strip())


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none", "auto") else float(text)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _choice(*options):
    def parse(text: str) -> str:
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {t!r}")
        return t
    parse.__name__ = "one of " + "|".join(options)
    return parse


def _source(text: str):
    t = text.strip().lower()
    if t in ("auto", "none", "wells"):
        return "wells" if t == "wells" else None
    return float(t)


def _opt_str(text: str):
    t = text.strip()
    return None if t.lower() in ("", "none") else t


@dataclass(frozen=True)
class Key:
    parse: object
    default: object
    required: bool = False
    doc: str = ""


REQUIRED = object()

SCHEMA: dict[str, Key] = {
    "grid.fine": Key(_grid, REQUIRED, True, "fine cells NXxNY"),
    "grid.coarse": Key(_grid, REQUIRED, True, "coarse blocks NXxNY (must divide grid.fine)"),
    "grid.extent": Key(_extent, (1.0, 1.0), doc="domain size LXxLY"),
    "field.path": Key(_opt_str, None, doc="coefficient file (top row first); none = generate"),
    "field.background": Key(float, 1.0, doc="generated field background value"),
    "field.contrast": Key(float, 1000.0, doc="generated field channel/background ratio"),
    "field.num_channels": Key(int, 4, doc="generated field channel count"),
    "field.seed": Key(int, 0, doc="generated field seed"),
    "field.time_law": Key(_choice("none", "contrast"), "none",
                          doc="contrast law max/min = c0 exp(r t)"),
    "field.law_c0": Key(float, 1000.0, doc="contrast law c0"),
    "field.law_r": Key(float, 0.0, doc="contrast law r"),
    "time.formulation": Key(_choice("cg", "mixed", "ipdg"), REQUIRED, True,
                            doc="cg | mixed (parabolic) or ipdg (wave)"),
    "time.t_end": Key(float, 0.2, doc="final time"),
    "time.intervals": Key(int, 2, doc="coarse time intervals"),
    "time.steps_per_interval": Key(int, 1, doc="fine steps per interval"),
    "time.source": Key(_source, None, doc="constant value, wells, or auto"),
    "time.initial": Key(_choice("auto", "zero", "bump"), "auto", doc="initial state"),
    "time.ipdg_penalty": Key(float, 10.0, doc="IPDG penalty gamma"),
    "basis.n_perm": Key(int, 2, doc="permanent functions per region"),
    "basis.n_candidates": Key(int, 8, doc="candidate functions per region"),
    "basis.p_bf": Key(int, 4, doc="snapshots per offline function"),
    "basis.layers": Key(int, 1, doc="oversampling layers"),
    "basis.cache": Key(_opt_str, None, doc="catalog cache file to read (interval 0)"),
    "bayes.posterior": Key(_choice("auto", "around_fixed", "around_previous"), "auto",
                           doc="posterior variant"),
    "bayes.sigma_L": Key(float, 1e-3, doc="likelihood scale"),
    "bayes.n_omega": Key(_opt_float, None, doc="expected updated regions (auto = fraction)"),
    "bayes.n_basis": Key(float, 2.0, doc="expected candidates per region"),
    "bayes.region_mode": Key(_choice("top", "probabilistic"), "top",
                             doc="region selection mode"),
    "bayes.region_fraction": Key(_floats, (0.3,), doc="top fraction per interval (list)"),
    "sampler.method": Key(_choice("gibbs", "sequential"), "gibbs", doc="default method"),
    "sampler.n_samples": Key(int, 20, doc="sequential realizations"),
    "sampler.n_sweeps": Key(int, 30, doc="Gibbs sweeps"),
    "sampler.burn_in": Key(float, 0.25, doc="discarded leading fraction of Gibbs records"),
    "sampler.seed": Key(int, 0, doc="master seed"),
    "sampler.threads": Key(int, 1, doc="worker cap (runs are single-threaded)"),
    "output.dir": Key(str, "out", doc="output directory"),
    "output.fields": Key(_bool, True, doc="write mean/std grids"),
}


def _env_name(key: str) -> str:
    return ENV_PREFIX + key.upper().replace(".", "__")


def _to_text(key: str, value) -> str:
    if value is None:
        return "none"
    if key.startswith("grid."):
        return f"{value[0]!r}x{value[1]!r}"
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(key: str, text: str, where: str):
    spec = SCHEMA[key]
    try:
        return spec.parse(text)
    except (ValueError, TypeError) as exc:
        name = getattr(spec.parse, "__name__", "value")
        raise ConfigError(f"{where}: key {key!r}: expected {name}: {exc}") from None


def parse_config_text(text: str, source: str = "<config>", env=None) -> dict:
    """Resolved config dict (every schema key) from ``key = value`` text."""
    env = os.environ if env is None else env
    raw: dict[str, tuple[str, str]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {stripped!r}")
        key, value = (p.strip() for p in stripped.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: key {key!r} given twice")
        raw[key] = (value, f"{source}:{lineno}")
    for key in SCHEMA:
        name = _env_name(key)
        if name in env:
            raw[key] = (env[name], f"environment {name}")
    for name in env:
        if name.startswith(ENV_PREFIX) and not any(_env_name(k) == name for k in SCHEMA):
            raise ConfigError(f"environment {name}: unknown key")
    cfg = {}
    for key, spec in SCHEMA.items():
        if key in raw:
            cfg[key] = _parse_value(key, *raw[key])
        elif spec.required:
            raise ConfigError(f"{source}: missing required key {key!r}")
        else:
            cfg[key] = spec.default
    return cfg


def parse_config(path: str | Path, env=None) -> dict:
    """Read a config file; a ``manifest.json`` from an earlier run is accepted too."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if path.suffix == ".json":
        try:
            resolved = json.loads(text)["config"]
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"{path}: not a run manifest ({exc})") from None
        text = "\n".join(f"{k} = {v}" for k, v in resolved.items())
    return parse_config_text(text, str(path), env)


def config_to_text(cfg: dict) -> dict:
    return {k: _to_text(k, v) for k, v in cfg.items()}


def build_plan(cfg: dict, method: str | None = None) -> RunPlan:
    posterior = None if cfg["bayes.posterior"] == "auto" else cfg["bayes.posterior"]
    initial = None if cfg["time.initial"] == "auto" else cfg["time.initial"]
    return RunPlan(
        formulation=cfg["time.formulation"], t_end=cfg["time.t_end"],
        n_intervals=cfg["time.intervals"], steps_per_interval=cfg["time.steps_per_interval"],
        posterior=posterior, sampler=method or cfg["sampler.method"],
        n_samples=cfg["sampler.n_samples"], n_sweeps=cfg["sampler.n_sweeps"],
        burn_in=cfg["sampler.burn_in"], n_omega=cfg["bayes.n_omega"],
        n_basis=cfg["bayes.n_basis"], sigma_L=cfg["bayes.sigma_L"],
        region_mode=cfg["bayes.region_mode"], region_fraction=cfg["bayes.region_fraction"],
        seed=cfg["sampler.seed"], n_perm=cfg["basis.n_perm"],
        n_candidates=cfg["basis.n_candidates"], p_bf=cfg["basis.p_bf"],
        layers=cfg["basis.layers"], gamma=cfg["time.ipdg_penalty"],
        source=cfg["time.source"], initial=initial)


def build_mesh(cfg: dict):
    (nxf, nyf), (nxc, nyc) = cfg["grid.fine"], cfg["grid.coarse"]
    Lx, Ly = cfg["grid.extent"]
    return build_hierarchy(nxf, nyf, nxc, nyc, Lx, Ly)


def build_field(cfg: dict, hierarchy):
    law = None
    if cfg["field.time_law"] == "contrast":
        law = ContrastLaw(cfg["field.law_c0"], cfg["field.law_r"])
    if cfg["field.path"] is not None:
        return load_field(cfg["field.path"], hierarchy, law)
    field = generate_channel_field(hierarchy, cfg["field.background"], cfg["field.contrast"],
                                   cfg["field.num_channels"], cfg["field.seed"])
    if law is not None:
        field = CoefficientField(field.values, field.nx, field.ny, law)
    return field


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------
def _version() -> str:
    from . import __version__
    return __version__


def write_manifest(out: Path, command: str, cfg: dict, plan: RunPlan | None, extra=None):
    seeds = {"master": cfg["sampler.seed"], "field": cfg["field.seed"]}
    if plan is not None:
        for n in range(plan.n_intervals):
            seeds[f"gibbs:{n}"] = derive_seed(plan.seed, f"gibbs:{n}")
            seeds[f"sequential:{n}[0]"] = derive_seed(plan.seed, f"sequential:{n}", 0)
    outputs = sorted(str(p.relative_to(out)) for p in out.rglob("*")
                     if p.is_file() and p.name != "manifest.json")
    manifest = {
        "command": command,
        "config": config_to_text(cfg),
        "plan": None if plan is None else plan.as_dict(),
        "seeds": seeds,
        "version": {"bayesms": _version(), "python": platform.python_version(),
                    "numpy": np.__version__, "scipy": scipy.__version__},
        "outputs": outputs,
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True,
                                                  default=str) + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------
def _setup(args):
    cfg = parse_config(args.config)
    if getattr(args, "out", None):
        cfg["output.dir"] = args.out
    out = Path(cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _cells(run: Run, x) -> np.ndarray:
    return run.form.to_cells(np.asarray(x))


def _write_cells(path, run: Run, x):
    h = run.hierarchy
    write_grid(path, _cells(run, x), h.nx_fine, h.ny_fine)


def _make_run(cfg, method=None) -> Run:
    h = build_mesh(cfg)
    field = build_field(cfg, h)
    catalog = None
    if cfg["basis.cache"] is not None:
        catalog = read_catalog(cfg["basis.cache"])
    try:
        plan = build_plan(cfg, method)
        plan.basis_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    run = Run(plan, h, field, catalog)
    if catalog is not None and (catalog.formulation != plan.formulation
                                or catalog.ndof != run.form.ndof):
        raise ConfigError(f"basis cache {cfg['basis.cache']} does not match the "
                          f"{plan.formulation} discretization")
    return run


def cmd_generate_field(args) -> int:
    cfg, out = _setup(args)
    h = build_mesh(cfg)
    field = generate_channel_field(h, cfg["field.background"], cfg["field.contrast"],
                                   cfg["field.num_channels"], cfg["field.seed"])
    sub = out / "field"
    sub.mkdir(exist_ok=True)
    save_field(sub / "field.txt", field)
    write_manifest(sub, "generate-field", cfg, None)
    print(f"wrote {sub / 'field.txt'}")
    return EXIT_OK


def cmd_reference(args) -> int:
    cfg, out = _setup(args)
    run = _make_run(cfg)
    ref = run.reference()
    sub = out / "reference"
    sub.mkdir(exist_ok=True)
    steps = run.plan.steps_per_interval
    rows = []
    for n in range(run.plan.n_intervals):
        state = ref[(n + 1) * steps]
        _write_cells(sub / f"interval_{n:02d}.csv", run, state)
        rows.append((n, run.interval_start(n + 1), float(np.linalg.norm(state))))
    write_table(sub / "summary.csv", ["interval", "t", "l2_norm"], rows)
    write_manifest(sub, "reference", cfg, run.plan)
    print(f"reference: {run.plan.n_intervals} intervals written to {sub}")
    return EXIT_OK


def cmd_basis(args) -> int:
    cfg, out = _setup(args)
    run = _make_run(cfg)
    sub = out / "basis"
    sub.mkdir(exist_ok=True)
    keys = sorted({run._catalog_key(n) for n in range(run.plan.n_intervals)})
    rows = []
    for key in keys:
        cat = run.catalog(key)
        write_catalog(sub / f"catalog_{key:02d}.bin", cat)
        rows.append((key, cat.n_regions, cat.n_fixed, cat.n_candidates, cat.n_test))
    write_table(sub / "summary.csv", ["catalog", "regions", "fixed", "candidates", "test"], rows)
    write_manifest(sub, "basis", cfg, run.plan)
    print(f"basis: {len(keys)} catalog(s) written to {sub}")
    return EXIT_OK


def cmd_fixed(args) -> int:
    cfg, out = _setup(args)
    run = _make_run(cfg)
    traj = run.fixed_solution()
    sub = out / "fixed"
    sub.mkdir(exist_ok=True)
    rows = []
    for n, (state, res) in enumerate(zip(traj.states, traj.residual_norms)):
        err = run.error(state, run.reference_at_interval(n))
        rows.append((n, run.interval_start(n + 1), res, err))
        _write_cells(sub / f"interval_{n:02d}.csv", run, state)
    write_table(sub / "summary.csv", ["interval", "t", "residual_norm", "error"], rows)
    write_manifest(sub, "fixed", cfg, run.plan)
    for n, t, res, err in rows:
        print(f"interval {n}: t={t:.6g} residual={res:.6e} error={err:.6e}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg, out = _setup(args)
    method = args.method or cfg["sampler.method"]
    run = _make_run(cfg, method)
    results = run.run()
    sub = out / f"sample_{method}"
    sub.mkdir(exist_ok=True)
    rows = []
    for r in results:
        n_cand = run.catalog(r.interval).n_candidates
        prefix = f"interval_{r.interval:02d}"
        write_chain_tables(sub, r.chain, prefix, n_cand)
        burn = run.plan.burn_in if method == "gibbs" else 0.0
        recs = burn_in_records(r.chain, burn)
        if cfg["output.fields"]:
            cells = np.array([_cells(run, rec.state) for rec in recs])
            h = run.hierarchy
            write_grid(sub / f"{prefix}_mean.csv", cells.mean(axis=0), h.nx_fine, h.ny_fine)
            write_grid(sub / f"{prefix}_std.csv", cells.std(axis=0), h.nx_fine, h.ny_fine)
        write_table(sub / f"{prefix}_regions.csv", ["region", "prior", "selected"],
                    [(k, float(p), int(j)) for k, (p, j) in
                     enumerate(zip(r.prior.region_p, r.J))])
        rows.append((r.interval, r.t, r.mean_error, r.snapshot_error, r.anchor_residual,
                     float(np.mean([rec.selection.n_candidates for rec in recs])),
                     float(np.mean([rec.residual_norm for rec in recs]))))
    write_table(sub / "summary.csv", ["interval", "t", "mean_error", "snapshot_error",
                                      "anchor_residual", "mean_count", "mean_residual"], rows)
    write_manifest(sub, f"sample --method {method}", cfg, run.plan)
    for row in rows:
        print(f"interval {row[0]}: mean error {row[2]:.4e} (snapshot {row[3]:.4e}), "
              f"{row[5]:.1f} candidates on average")
    return EXIT_OK


def _chain_dirs(path: Path) -> list[Path]:
    if (path / "summary.csv").exists() and any(path.glob("interval_*_trace.csv")):
        return [path]
    return sorted(p for p in path.glob("sample_*") if p.is_dir())


def moving_average_change(values, window: int = 5, last: int = 10) -> float:
    """Relative change of the ``window``-point moving average over the final ``last`` points."""
    v = np.asarray(values, dtype=float)
    if v.size < window + last - 1:
        raise ValueError(f"need at least {window + last - 1} values, got {v.size}")
    ma = np.convolve(v, np.ones(window) / window, mode="valid")[-last:]
    ref = np.abs(ma).max()
    return 0.0 if ref == 0 else float((ma.max() - ma.min()) / ref)


def cmd_stats(args) -> int:
    root = Path(args.run_dir)
    dirs = _chain_dirs(root)
    if not dirs:
        raise ConfigError(f"no sample output under {root}")
    for d in dirs:
        rows = []
        for trace in sorted(d.glob("interval_*_trace.csv")):
            interval = int(trace.name.split("_")[1])
            header, data = read_table(trace)
            res = data[:, header.index("residual_norm")]
            cnt = data[:, header.index("n_candidates")]
            start = int(np.floor(args.burn_in * len(res)))
            change = moving_average_change(res) if len(res) >= 14 else float("nan")
            rows.append((interval, len(res), float(res[start:].mean()), float(cnt[start:].mean()),
                         float(cnt[start:].std()), change))
        write_table(d / "stats.csv", ["interval", "records", "mean_residual", "mean_count",
                                      "std_count", "ma_change"], rows)
        for row in rows:
            print(f"{d.name} interval {row[0]}: {row[1]} records, residual {row[2]:.4e}, "
                  f"count {row[3]:.1f}+-{row[4]:.1f}, moving-average change {row[5]:.3g}")
    return EXIT_OK


def cmd_compare(args) -> int:
    a, b = Path(args.chain_a), Path(args.chain_b)
    da, db = _chain_dirs(a), _chain_dirs(b)
    if len(da) != 1 or len(db) != 1:
        raise ConfigError("compare needs two sample directories (sample_<method>)")
    da, db = da[0], db[0]
    out = Path(args.out) if args.out else da.parent
    out.mkdir(parents=True, exist_ok=True)
    _, sa = read_table(da / "summary.csv")
    _, sb = read_table(db / "summary.csv")
    rows = []
    for fa in sorted(da.glob("interval_*_frequency.csv")):
        fb = db / fa.name
        if not fb.exists():
            continue
        n = int(fa.name.split("_")[1])
        freq_a = read_table(fa)[1][:, 1]
        freq_b = read_table(fb)[1][:, 1]
        mask = (freq_a > 0) | (freq_b > 0) if args.active_only else np.ones(freq_a.size, bool)
        corr = frequency_correlation(freq_a[mask], freq_b[mask])
        ea = sa[sa[:, 0] == n][0, 2] if np.any(sa[:, 0] == n) else float("nan")
        eb = sb[sb[:, 0] == n][0, 2] if np.any(sb[:, 0] == n) else float("nan")
        rows.append((n, corr, float(ea), float(eb)))
    write_table(out / "compare.csv", ["interval", "frequency_correlation",
                                      f"error_{da.name}", f"error_{db.name}"], rows)
    for n, corr, ea, eb in rows:
        print(f"interval {n}: frequency correlation {corr:.4f}, "
              f"error {da.name} {ea:.4e} vs {db.name} {eb:.4e}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _key_help() -> str:
    lines = ["config keys (default):"]
    for key, spec in SCHEMA.items():
        default = "required" if spec.required else _to_text(key, spec.default)
        lines.append(f"  {key:28s} {spec.doc} [{default}]")
    lines.append(f"environment override: {ENV_PREFIX}<SECTION>__<KEY>")
    return "\n".join(lines)


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bayesms", description="Bayesian multiscale basis selection runs.",
                epilog=_key_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(name, func, help_):
        sp_ = sub.add_parser(name, help=help_)
        sp_.add_argument("config", help="key = value config file or an earlier manifest.json")
        sp_.add_argument("--out", help="override output.dir")
        sp_.set_defaults(func=func)
        return sp_

    with_config("generate-field", cmd_generate_field, "write a synthetic channel field")
    with_config("reference", cmd_reference, "fine-grid oracle solve")
    with_config("basis", cmd_basis, "build and cache the offline basis catalog")
    with_config("fixed", cmd_fixed, "permanent-basis trajectory")
    s = with_config("sample", cmd_sample, "sample basis selections")
    s.add_argument("--method", choices=("sequential", "gibbs"))
    st = sub.add_parser("stats", help="chain summaries of a sample run")
    st.add_argument("run_dir")
    st.add_argument("--burn-in", type=float, default=0.25)
    st.set_defaults(func=cmd_stats)
    c = sub.add_parser("compare", help="compare two sample runs")
    c.add_argument("chain_a")
    c.add_argument("chain_b")
    c.add_argument("--out")
    c.add_argument("--active-only", action="store_true",
                   help="correlate only candidates visited by either chain")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError) as exc:
        print(f"bayesms: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, SpectralError, FieldError, OSError, ValueError,
            np.linalg.LinAlgError) as exc:
        print(f"bayesms: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
