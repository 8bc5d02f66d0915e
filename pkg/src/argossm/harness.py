"""File formats, run configuration, the holdout protocol and metrics."""

from __future__ import annotations

import ast
import configparser
import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InferenceError, LoadError
from .geo import Position, haversine_km
from .lingauss import kalman_smoother
from .model import ModelKind, ModelParams, ProfileSeries
from .smc import SmcConfig, ffbs, run_filter

log = logging.getLogger(__name__)

PROFILE_HEADER = ["float_id", "time_days", "available", "lon", "lat", "temp", "psal"]
TRAJECTORY_HEADER = ["float_id", "draw", "index", "time_days", "lon", "lat", "v_lon", "v_lat", "s"]
TRIAL_HEADER = ["float_id", "index", "gap_days", "model", "truth_lon", "truth_lat", "pred_lon", "pred_lat", "error_km"]
METRIC_HEADER = ["model", "n_trials", "rmse_km", "median_km"]
ESS_HEADER = ["float_id", "proposal", "final_ess", "loglik_sd", "flagged"]

# Holdout errors on the real Argo corpus (RMSE km, median km); kept for
# reference only, they cannot be reproduced from synthetic data.
REFERENCE_METRICS = {
    "PV-interp": (33.1, 13.2),
    "RW": (18.0, 11.4),
    "AR": (16.1, 8.58),
    "AR_ICE": (15.7, 8.92),
    "ARGOSSM": (15.4, 8.64),
}


def fmt(x) -> str:
    """Shortest round-tripping text for a float; empty for NaN/None."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(x)


def _write_rows(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in r])
    return path


# --- profiles ------------------------------------------------------------------------

def write_profiles(path, series_list):
    rows = []
    for s in series_list:
        for n in range(len(s)):
            lon, lat = s.gps[n] if s.available[n] else (None, None)
            rows.append([s.float_id, s.times[n], bool(s.available[n]), lon, lat, s.temp[n], s.psal[n]])
    return _write_rows(path, PROFILE_HEADER, rows)


def _num(text, line, name, allow_empty=False):
    text = text.strip()
    if text == "":
        if allow_empty:
            return math.nan
        raise LoadError(f"{name} is empty", line)
    try:
        v = float(text)
    except ValueError:
        raise LoadError(f"{name}={text!r} is not a number", line) from None
    if not math.isfinite(v):
        raise LoadError(f"{name} must be finite", line)
    return v


def load_profiles(path) -> list:
    """Parse a profile CSV into one ProfileSeries per float (file order kept)."""
    path = Path(path)
    with open(path, newline="", encoding="ascii") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LoadError("empty file", 1) from None
        if [h.strip() for h in header] != PROFILE_HEADER:
            raise LoadError(f"header must be {','.join(PROFILE_HEADER)}", 1)
        records: dict = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(PROFILE_HEADER):
                raise LoadError(f"expected {len(PROFILE_HEADER)} fields, got {len(row)}", lineno)
            fid = row[0].strip()
            if not fid:
                raise LoadError("float_id is empty", lineno)
            t = _num(row[1], lineno, "time_days")
            if row[2].strip() not in ("0", "1"):
                raise LoadError(f"available must be 0 or 1, got {row[2]!r}", lineno)
            avail = row[2].strip() == "1"
            lon = _num(row[3], lineno, "lon", allow_empty=not avail)
            lat = _num(row[4], lineno, "lat", allow_empty=not avail)
            if not avail and not (math.isnan(lon) and math.isnan(lat)):
                raise LoadError("lon/lat must be empty when available = 0", lineno)
            if avail and not -90.0 <= lat <= 90.0:
                raise LoadError(f"latitude {lat} outside [-90, 90]", lineno)
            temp = _num(row[5], lineno, "temp", allow_empty=True)
            psal = _num(row[6], lineno, "psal", allow_empty=True)
            rec = records.setdefault(fid, [])
            if rec and t <= rec[-1][0]:
                raise LoadError(f"time_days {t} not after previous profile of float {fid}", lineno)
            rec.append((t, avail, lon, lat, temp, psal))
    out = []
    for fid, rec in records.items():
        if len(rec) < 2:
            raise LoadError(f"float {fid} has fewer than 2 profiles")
        a = np.array(rec, dtype=float)
        out.append(ProfileSeries(fid, a[:, 0], a[:, 2:4], a[:, 1].astype(bool), a[:, 4], a[:, 5]))
    if not out:
        raise LoadError("no profiles in file")
    return out


def write_trajectories(path, draws_list):
    rows = []
    for d in draws_list:
        for k in range(d.n_draws):
            for n in range(len(d.times)):
                v = d.V[k, n] if d.V is not None else (None, None)
                s = int(d.S[k, n]) if d.S is not None else ""
                rows.append([d.float_id, k, n, d.times[n], d.X[k, n, 0], d.X[k, n, 1], v[0], v[1], str(s)])
    return _write_rows(path, TRAJECTORY_HEADER, rows)


def write_truth(path, float_ids, trajectories):
    rows = []
    for fid, tr in zip(float_ids, trajectories):
        for n in range(len(tr.times)):
            v = tr.V[n] if tr.V is not None else (None, None)
            s = str(int(tr.S[n])) if tr.S is not None else ""
            rows.append([fid, 0, n, tr.times[n], tr.X[n, 0], tr.X[n, 1], v[0], v[1], s])
    return _write_rows(path, TRAJECTORY_HEADER, rows)


def load_trajectories(path):
    """``{float_id: {"X": (draws, N, 2), "times": (N,)}}`` from a trajectory CSV."""
    data: dict = {}
    with open(path, newline="", encoding="ascii") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            d = data.setdefault(row["float_id"], {})
            d.setdefault(int(row["draw"]), []).append((float(row["time_days"]), float(row["lon"]), float(row["lat"])))
    out = {}
    for fid, draws in data.items():
        keys = sorted(draws)
        arr = np.array([draws[k] for k in keys])
        out[fid] = {"times": arr[0, :, 0], "X": arr[:, :, 1:]}
    return out


# --- configuration -------------------------------------------------------------------

DEFAULTS = {
    "profiles": "",
    "truth": "",
    "trajectories": "",
    "models": "RW,AR,AR_ICE,ARGOSSM",
    "kind": "ARGOSSM",
    "inference": "fixed",
    "seed": 0,
    "ice.detect_formula": "paper",
    "pv.scale": 1e8,
    "pv.bandwidth_km": 60.0,
    "smc.n_particles": 1000,
    "smc.resample_threshold": 0.5,
    "smc.proposal": "lookahead",
    "smc.twist": True,
    "smc.pv_in_proposal": True,
    "smc2.n_theta": 200,
    "smc2.n_moves": 3,
    "smc2.max_moves": 20,
    "smc2.move_tol": 0.1,
    "smc2.target_ess": 0.5,
    "ffbs.n_draws": 200,
    "holdout.min_gap_days": 36.0,
    "ess.replicates": 50,
    "ess.proposals": "bootstrap,lookahead",
    "simulate.n_floats": 5,
    "simulate.n_profiles": 72,
    "simulate.dt_days": 10.0,
    "fields.variable": "temp",
    "fields.bandwidth_km": 250.0,
    "fields.harmonics": 2,
    "fields.n_samples": 20,
    "fields.fit_covariance": True,
    "fields.variance": 0.05,
    "fields.range_km": 150.0,
    "fields.smoothness": 1.5,
    "fields.time_range_days": 60.0,
    "fields.nugget": 0.001,
    "fields.query_time": 365.0,
    "fields.grid_step": 1.0,
}


def _parse_value(text):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return ast.literal_eval(t)
    except (ValueError, SyntaxError):
        return t


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    source: str = ""

    def __getitem__(self, key):
        if key in self.values:
            return self.values[key]
        if key in DEFAULTS:
            return DEFAULTS[key]
        raise ConfigurationError(f"unknown configuration key {key!r}")

    def get(self, key, default=None):
        try:
            return self[key]
        except ConfigurationError:
            return default

    def section(self, prefix):
        """All keys under ``prefix.`` (defaults first) without the prefix."""
        p = prefix + "."
        out = {k[len(p):]: v for k, v in DEFAULTS.items() if k.startswith(p)}
        out.update({k[len(p):]: v for k, v in self.values.items() if k.startswith(p)})
        return out

    def resolved(self) -> dict:
        out = dict(DEFAULTS)
        out.update(self.values)
        return dict(sorted(out.items()))

    def smc_config(self, seed=None) -> SmcConfig:
        try:
            return SmcConfig(
                n_particles=int(self["smc.n_particles"]),
                resample_threshold=float(self["smc.resample_threshold"]),
                proposal=str(self["smc.proposal"]),
                twist=bool(self["smc.twist"]),
                pv_in_proposal=bool(self["smc.pv_in_proposal"]),
                seed=seed,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from None

    def model_kinds(self):
        return [ModelKind.parse(k.strip()) for k in str(self["models"]).split(",") if k.strip()]

    def path(self, key, base=None):
        v = str(self[key]).strip()
        if not v:
            return None
        p = Path(v)
        if not p.is_absolute() and base is not None:
            p = Path(base) / p
        if not p.exists():
            raise ConfigurationError(f"{key}: file {p} does not exist")
        return p


def parse_config(text, source="") -> RunConfig:
    """``key = value`` lines with dotted keys; ``#`` and ``;`` start comments."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"), delimiters=("=",))
    cp.optionxform = str
    try:
        cp.read_string("[run]\n" + text, source=source or "<config>")
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from None
    return RunConfig({k: _parse_value(v) for k, v in cp.items("run")}, source)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def params_from_config(cfg: RunConfig, series: ProfileSeries | None = None, base: ModelParams | None = None):
    """Fixed model parameters from the ``params.*`` keys over ``base``.

    Scalar keys: sx2, sv2, sy2, alpha, v0_lon, v0_lat, sigmaPV2, pTPR, pTNR,
    pMAR.  When ``series`` is given the initial state is anchored on its
    first fix.
    """
    from .synthetic import benchmark_params

    p = base or benchmark_params()
    sec = cfg.section("params")
    eye = np.eye(2)
    ch = {}
    for key, attr in (("sx2", "SigmaX"), ("sv2", "SigmaV"), ("sy2", "SigmaY")):
        if key in sec:
            ch[attr] = float(sec[key]) * eye
    for key in ("alpha", "sigmaPV2", "pTPR", "pTNR", "pMAR"):
        if key in sec:
            ch[key] = float(sec[key])
    if "v0_lon" in sec or "v0_lat" in sec:
        ch["v0"] = np.array([float(sec.get("v0_lon", p.v0[0])), float(sec.get("v0_lat", p.v0[1]))])
    unknown = set(sec) - {"sx2", "sv2", "sy2", "alpha", "sigmaPV2", "pTPR", "pTNR", "pMAR", "v0_lon", "v0_lat"}
    if unknown:
        raise ConfigurationError(f"unknown params keys: {sorted(unknown)}")
    p = p.replace(**ch)
    return p.anchored(series) if series is not None else p


# --- holdouts -------------------------------------------------------------------------

@dataclass
class HoldoutTrial:
    float_id: str
    index: int
    gap_days: float
    truth: Position
    predictions: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.gap_days < 0:
            raise ValueError("gap_days must be nonnegative")


def select_holdouts(series: ProfileSeries, min_gap_days=36.0):
    """Fixes bounding every run of missing positions spanning ``min_gap_days``.

    The span of a run is the time between the fixes before and after it, so
    only runs bounded by fixes on both sides qualify.  A fix bounding two
    qualifying runs yields a single trial (with the larger span).
    """
    avail = series.available
    found: dict = {}
    n = len(series)
    i = 0
    while i < n:
        if avail[i]:
            i += 1
            continue
        j = i
        while j < n and not avail[j]:
            j += 1
        before, after = i - 1, j
        if before >= 0 and after < n:
            gap = float(series.times[after] - series.times[before])
            if gap >= min_gap_days:
                for k in (before, after):
                    found[k] = max(found.get(k, 0.0), gap)
        i = j
    return [HoldoutTrial(series.float_id, k, found[k], Position(*series.gps[k])) for k in sorted(found)]


def predict_position(series: ProfileSeries, params: ModelParams, kind, index, env=None, smc_cfg=None,
                     n_draws=200, seed=None):
    """Posterior mean of the position at ``index`` (smoother or FFBS mean)."""
    kind = ModelKind.parse(kind)
    if kind.is_linear:
        return kalman_smoother(series, params, kind)[index].mean[:2]
    rng = np.random.default_rng(seed)
    out = run_filter(series, params, kind, env, smc_cfg or SmcConfig(), rng=rng)
    draws = ffbs(out, n_draws, seed=rng)
    return draws.X[:, index].mean(axis=0)


def fixed_predictor(params_for, env=None, smc_cfg=None, n_draws=200):
    """Predictor using fixed parameters from ``params_for(kind, masked_series)``."""

    def predictor(kind, masked, index, rng):
        return predict_position(masked, params_for(kind, masked), kind, index, env, smc_cfg, n_draws, rng)

    return predictor


def evaluate_holdout(trial: HoldoutTrial, series: ProfileSeries, models, predictor, seed=None) -> HoldoutTrial:
    """Mask the trial's fix, predict it with every model and score the error.

    ``predictor(kind, masked_series, index, rng)`` returns a (lon, lat)
    point prediction; it only ever sees the masked series.
    """
    masked = series.masked(trial.index)
    truth = trial.truth.as_array()
    ss0 = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    for kind, ss in zip(models, ss0.spawn(len(models))):
        kind = ModelKind.parse(kind)
        try:
            pred = np.asarray(predictor(kind, masked, trial.index, np.random.default_rng(ss)), dtype=float)
        except (InferenceError, np.linalg.LinAlgError) as exc:
            log.warning("trial %s/%d model %s failed: %s", trial.float_id, trial.index, kind.value, exc)
            trial.predictions[kind.value] = None
            trial.errors[kind.value] = math.nan
            continue
        trial.predictions[kind.value] = Position(float(pred[0]), float(np.clip(pred[1], -90, 90)))
        trial.errors[kind.value] = float(haversine_km(pred[0], pred[1], truth[0], truth[1]))
    return trial


def trial_seed(master, float_id, index):
    """Per-trial seed derived from (master seed, float id, index)."""
    key = [int(master)] + [ord(c) for c in str(float_id)] + [int(index)]
    return np.random.SeedSequence(key)


def report_metrics(trials, models=None):
    """``{model: (n, rmse_km, median_km)}`` over completed trials."""
    if not trials:
        raise ValueError("no trials to report")
    models = models or sorted({m for t in trials for m in t.errors})
    out = {}
    for m in models:
        e = np.array([t.errors.get(m, math.nan) for t in trials], dtype=float)
        e = e[np.isfinite(e)]
        if len(e) == 0:
            out[m] = (0, math.nan, math.nan)
            continue
        out[m] = (len(e), float(np.sqrt(np.mean(e**2))), float(np.median(e)))
    return out


def write_trials(path, trials):
    rows = []
    for t in trials:
        for m in sorted(t.errors):
            p = t.predictions.get(m)
            rows.append([t.float_id, t.index, t.gap_days, m, t.truth.lon, t.truth.lat,
                         None if p is None else p.lon, None if p is None else p.lat, t.errors[m]])
    return _write_rows(path, TRIAL_HEADER, rows)


def load_trials(path):
    trials: dict = {}
    with open(path, newline="", encoding="ascii") as fh:
        for row in csv.DictReader(fh):
            key = (row["float_id"], int(row["index"]))
            if key not in trials:
                trials[key] = HoldoutTrial(row["float_id"], int(row["index"]), float(row["gap_days"]),
                                           Position(float(row["truth_lon"]), float(row["truth_lat"])))
            t = trials[key]
            err = float(row["error_km"]) if row["error_km"] else math.nan
            t.errors[row["model"]] = err
            t.predictions[row["model"]] = (Position(float(row["pred_lon"]), float(row["pred_lat"]))
                                           if row["pred_lon"] else None)
    return list(trials.values())


def write_metrics(path, metrics):
    return _write_rows(path, METRIC_HEADER, [[m, n, r, med] for m, (n, r, med) in metrics.items()])


def format_metrics(metrics) -> str:
    buf = io.StringIO()
    buf.write(f"{'model':<10} {'n':>4} {'RMSE km':>9} {'median km':>10}\n")
    for m, (n, r, med) in metrics.items():
        buf.write(f"{m:<10} {n:>4} {r:>9.2f} {med:>10.2f}\n")
    return buf.getvalue()


# --- ESS study ------------------------------------------------------------------------

def last_observed(series: ProfileSeries):
    idx = np.flatnonzero(series.available)
    return int(idx[-1]) if len(idx) else len(series) - 1


def ess_study(series_list, params_for, kind, env=None, proposals=("bootstrap", "lookahead"), n_particles=1000,
              n_replicates=50, seed=0):
    """Final-observation ESS and log-likelihood spread per float and proposal.

    Look-ahead runs use twisting; bootstrap runs do not.  Rows are
    ``(float_id, proposal, mean final ESS, loglik sd, sd >= 1)``.
    """
    kind = ModelKind.parse(kind)
    rows = []
    for s in series_list:
        p = params_for(kind, s)
        n_last = last_observed(s)
        for prop in proposals:
            cfg = SmcConfig(n_particles=n_particles, proposal=prop, twist=(prop == "lookahead"))
            seeds = trial_seed(seed, s.float_id, 0).spawn(n_replicates)
            lls, es = [], []
            for ss in seeds:
                try:
                    out = run_filter(s, p, kind, env, cfg, rng=np.random.default_rng(ss))
                except InferenceError as exc:
                    log.warning("float %s %s replicate failed: %s", s.float_id, prop, exc)
                    lls.append(-np.inf)
                    es.append(1.0)
                    continue
                lls.append(out.loglik)
                es.append(out.ess[n_last])
            lls = np.array(lls)
            sd = float(np.std(lls, ddof=1)) if np.all(np.isfinite(lls)) else math.inf
            rows.append((s.float_id, prop, float(np.mean(es)), sd, bool(sd >= 1.0)))
    return rows


def write_ess(path, rows):
    return _write_rows(path, ESS_HEADER, [list(r) for r in rows])
