"""Command-line entry point: ``argossm <subcommand> --config FILE --seed N --out DIR``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import fields as fl
from . import harness as hs
from . import smc2 as s2
from .envfields import EnvHandles, precompute_pv_grid, read_grid
from .errors import ArgoSSMError, ConfigurationError, InferenceError
from .model import ModelKind
from .smc import ffbs, run_filter

log = logging.getLogger("argossm")

EXIT_OK, EXIT_VALIDATION, EXIT_INFERENCE = 0, 2, 3


class Run:
    """Shared state of one CLI invocation."""

    def __init__(self, args):
        self.cmd = args.command
        self.cfg = hs.load_config(args.config) if args.config else hs.RunConfig()
        self.base = Path(args.config).parent if args.config else Path.cwd()
        self.seed = int(args.seed if args.seed is not None else self.cfg["seed"])
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs = []
        self._env = None

    def env(self) -> EnvHandles:
        if self._env is None:
            ice_path = self.cfg.path("ice_grid", self.base) if self.cfg.get("ice_grid") else None
            bathy_path = self.cfg.path("bathymetry_grid", self.base) if self.cfg.get("bathymetry_grid") else None
            formula = str(self.cfg["ice.detect_formula"])
            if ice_path is None and bathy_path is None:
                from .synthetic import make_world

                world = make_world(float(self.cfg["pv.scale"]), float(self.cfg["pv.bandwidth_km"]))
                self._env = replace(world.env, detect_formula=formula)
            else:
                ice = read_grid(ice_path) if ice_path else None
                pv = None
                if bathy_path:
                    bathy = read_grid(bathy_path)
                    step = float(self.cfg.get("pv.grid_step", 0.5))
                    lon = np.arange(bathy.lon_axis[0], bathy.lon_axis[-1] + 1e-9, step)
                    lat = np.arange(bathy.lat_axis[0], bathy.lat_axis[-1] + 1e-9, step)
                    pv = precompute_pv_grid(bathy, lon, lat, float(self.cfg["pv.bandwidth_km"]))
                    pv = pv.scaled(float(self.cfg["pv.scale"]))
                self._env = EnvHandles(ice=ice, pv=pv, detect_formula=formula)
        return self._env

    def env_for(self, kind):
        kind = ModelKind.parse(kind)
        return self.env() if (kind.has_ice or kind.has_pv) else None

    def profiles(self):
        path = self.cfg.path("profiles", self.base)
        if path is None:
            raise ConfigurationError("config key 'profiles' is required for this command")
        return hs.load_profiles(path)

    def params_for(self, kind, series):
        return hs.params_from_config(self.cfg, series)

    def record(self, path):
        self.outputs.append(Path(path))

    def write_manifest(self):
        resolved = {k: (v if isinstance(v, (int, float, str, bool)) else str(v)) for k, v in self.cfg.resolved().items()}
        blob = json.dumps(resolved, sort_keys=True).encode()
        manifest = {
            "command": self.cmd,
            "seed": self.seed,
            "config": resolved,
            "config_sha256": hashlib.sha256(blob).hexdigest(),
            "versions": {"argossm": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "outputs": {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in self.outputs},
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# --- subcommands ----------------------------------------------------------------------

def cmd_simulate(run: Run):
    from .synthetic import simulate_floats

    kind = ModelKind.parse(run.cfg["kind"])
    params = hs.params_from_config(run.cfg)
    sims = simulate_floats(kind, params, int(run.cfg["simulate.n_floats"]), int(run.cfg["simulate.n_profiles"]),
                           float(run.cfg["simulate.dt_days"]), seed=run.seed,
                           world=None if run.env_for(kind) is None else _world(run))
    run.record(hs.write_profiles(run.out / "profiles.csv", [s for _, s in sims]))
    run.record(hs.write_truth(run.out / "truth.csv", [s.float_id for _, s in sims], [t for t, _ in sims]))
    print(f"simulated {len(sims)} {kind.value} floats -> {run.out}")


def _world(run):
    from .synthetic import World

    env = run.env()
    return World(env, None, float(run.cfg["pv.scale"]))


def cmd_smooth(run: Run):
    kind = ModelKind.parse(run.cfg["kind"])
    n_draws = int(run.cfg["ffbs.n_draws"])
    draws = []
    for s in run.profiles():
        ss = hs.trial_seed(run.seed, s.float_id, 0)
        rng = np.random.default_rng(ss)
        p = run.params_for(kind, s)
        out = run_filter(s, p, kind, run.env_for(kind), run.cfg.smc_config(), rng=rng)
        draws.append(ffbs(out, n_draws, seed=rng))
        print(f"{s.float_id}: loglik {out.loglik:.3f}, {n_draws} draws")
    run.record(hs.write_trajectories(run.out / "trajectories.csv", draws))


def _smc2_config(run, seed):
    return s2.Smc2Config(n_theta=int(run.cfg["smc2.n_theta"]), smc=run.cfg.smc_config(),
                         target_ess=float(run.cfg["smc2.target_ess"]), n_moves=int(run.cfg["smc2.n_moves"]),
                         max_moves=int(run.cfg["smc2.max_moves"]), move_tol=float(run.cfg["smc2.move_tol"]),
                         seed=seed)


def cmd_fit(run: Run):
    kind = ModelKind.parse(run.cfg["kind"])
    rows, ev_rows, draws = [], [], []
    names = None
    for s in run.profiles():
        seed = int(hs.trial_seed(run.seed, s.float_id, 0).generate_state(1)[0])
        res = s2.run_smc2(s, kind, s2.PriorSpec(), run.env_for(kind), _smc2_config(run, seed))
        names = res.cloud.names
        w = res.cloud.weights
        for i, v in enumerate(res.cloud.values):
            rows.append([s.float_id, i, w[i], *v])
        ev_rows.append([s.float_id, res.log_evidence, len(res.ladder) - 1, float(np.mean(res.acceptance))])
        draws.append(res.draws)
        print(f"{s.float_id}: log evidence {res.log_evidence:.3f} in {len(res.ladder) - 1} tempering steps")
    run.record(hs._write_rows(run.out / "theta.csv", ["float_id", "draw", "weight", *names], rows))
    run.record(hs._write_rows(run.out / "evidence.csv", ["float_id", "log_evidence", "n_steps", "acceptance"],
                              ev_rows))
    run.record(hs.write_trajectories(run.out / "trajectories.csv", draws))


def _smc2_predictor(run):
    def predictor(kind, masked, index, rng):
        seed = int(rng.integers(2**31))
        res = s2.run_smc2(masked, kind, s2.PriorSpec(), run.env_for(kind), _smc2_config(run, seed))
        return res.draws.X[:, index].mean(axis=0)

    return predictor


def cmd_holdout(run: Run):
    models = run.cfg.model_kinds()
    mode = str(run.cfg["inference"])
    if mode == "fixed":
        env = run.env() if any(k.has_ice or k.has_pv for k in models) else None
        predictor = hs.fixed_predictor(run.params_for, env, run.cfg.smc_config(), int(run.cfg["ffbs.n_draws"]))
    elif mode == "smc2":
        predictor = _smc2_predictor(run)
    else:
        raise ConfigurationError(f"inference must be 'fixed' or 'smc2', got {mode!r}")
    trials = []
    for s in run.profiles():
        for t in hs.select_holdouts(s, float(run.cfg["holdout.min_gap_days"])):
            trials.append(hs.evaluate_holdout(t, s, models, predictor, hs.trial_seed(run.seed, s.float_id, t.index)))
    if not trials:
        raise ConfigurationError("no holdout candidates in the input")
    metrics = hs.report_metrics(trials, [k.value for k in models])
    run.record(hs.write_trials(run.out / "trials.csv", trials))
    run.record(hs.write_metrics(run.out / "metrics.csv", metrics))
    print(hs.format_metrics(metrics), end="")


def cmd_ess_study(run: Run):
    kind = ModelKind.parse(run.cfg["kind"])
    props = tuple(p.strip() for p in str(run.cfg["ess.proposals"]).split(",") if p.strip())
    rows = hs.ess_study(run.profiles(), run.params_for, kind, run.env_for(kind), props,
                        int(run.cfg["smc.n_particles"]), int(run.cfg["ess.replicates"]), run.seed)
    run.record(hs.write_ess(run.out / "ess.csv", rows))
    for r in rows:
        print(f"{r[0]} {r[1]:<10} ESS {r[2]:8.1f}  sd {r[3]:.3g}{'  FLAG' if r[4] else ''}")


def cmd_fields(run: Run):
    series = run.profiles()
    tpath = run.cfg.path("trajectories", run.base)
    if tpath is None:
        raise ConfigurationError("config key 'trajectories' (smooth output) is required for fields")
    traj = hs.load_trajectories(tpath)
    var = str(run.cfg["fields.variable"])
    if var not in ("temp", "psal"):
        raise ConfigurationError("fields.variable must be temp or psal")
    n_samples = int(run.cfg["fields.n_samples"])
    rng = np.random.default_rng(run.seed)
    values, times, idx = [], [], []
    for s in series:
        if s.float_id not in traj:
            raise ConfigurationError(f"no trajectory draws for float {s.float_id}")
        v = getattr(s, var)
        for n in np.flatnonzero(np.isfinite(v)):
            values.append(v[n])
            times.append(s.times[n])
            idx.append((s, n))
    if not values:
        raise ConfigurationError(f"no {var} values in the profiles")
    n_avail = min(traj[s.float_id]["X"].shape[0] for s in series)
    n_samples = min(n_samples, n_avail)
    picks = {s.float_id: rng.choice(traj[s.float_id]["X"].shape[0], n_samples, replace=False) for s in series}
    samples = []
    for k in range(n_samples):
        xy = [s.gps[n] if s.available[n] else traj[s.float_id]["X"][picks[s.float_id][k], n] for s, n in idx]
        samples.append(np.array(xy))
    allxy = np.concatenate(samples)
    step = float(run.cfg["fields.grid_step"])
    glon = np.arange(np.floor(allxy[:, 0].min()), np.ceil(allxy[:, 0].max()) + 1e-9, step)
    glat = np.arange(np.floor(allxy[:, 1].min()), np.ceil(allxy[:, 1].max()) + 1e-9, step)
    G = np.array([(lo, la) for la in glat for lo in glon])
    cov = fl.MaternParams(float(run.cfg["fields.variance"]), float(run.cfg["fields.range_km"]),
                          float(run.cfg["fields.smoothness"]), float(run.cfg["fields.time_range_days"]),
                          float(run.cfg["fields.nugget"]))
    pcfg = fl.PipelineConfig(float(run.cfg["fields.bandwidth_km"]), int(run.cfg["fields.harmonics"]), cov,
                             bool(run.cfg["fields.fit_covariance"]))
    qt = float(run.cfg["fields.query_time"])
    res = fl.impute_aggregate(samples, np.array(values), np.array(times), G, qt, pcfg)
    rows = [[G[i, 0], G[i, 1], qt, res.mean_of_means[i], res.mean_conditional_variance[i],
             res.between_sample_variance[i], res.total_variance[i], bool(res.estimable[i])] for i in range(len(G))]
    header = ["lon", "lat", "time_days", "mean", "mean_conditional_variance", "between_sample_variance",
              "total_variance", "estimable"]
    run.record(hs._write_rows(run.out / "field.csv", header, rows))
    print(f"{var}: {int(res.estimable.sum())}/{len(G)} nodes estimable from {n_samples} location samples")


def cmd_report(run: Run):
    path = run.cfg.path("trials", run.base) if run.cfg.get("trials") else None
    if path is None:
        raise ConfigurationError("config key 'trials' (holdout output) is required for report")
    trials = hs.load_trials(path)
    metrics = hs.report_metrics(trials)
    run.record(hs.write_metrics(run.out / "metrics.csv", metrics))
    print(hs.format_metrics(metrics), end="")
    print("reference values on the real Argo corpus (RMSE km, median km):")
    for m, (r, med) in hs.REFERENCE_METRICS.items():
        print(f"  {m:<10} {r:>6.1f} {med:>6.2f}")


COMMANDS = {
    "simulate": (cmd_simulate, "simulate synthetic floats (profiles.csv, truth.csv)"),
    "fit": (cmd_fit, "SMC^2 parameter inference per float"),
    "smooth": (cmd_smooth, "particle filter + FFBS trajectory draws"),
    "holdout": (cmd_holdout, "holdout experiment and error metrics"),
    "ess-study": (cmd_ess_study, "ESS and log-likelihood spread per proposal"),
    "fields": (cmd_fields, "field estimation with location multiple imputation"),
    "report": (cmd_report, "metrics table from a trials CSV"),
}


def build_parser():
    ap = argparse.ArgumentParser(prog="argossm", description="Argo float trajectory inference")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int, help="master seed (overrides config 'seed')")
        p.add_argument("--out", default="out", help="output directory")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = Run(args)
        COMMANDS[args.command][0](run)
        run.write_manifest()
    except InferenceError as exc:
        print(f"inference failure: {exc}", file=sys.stderr)
        return EXIT_INFERENCE
    except (ArgoSSMError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
