"""Experiment plumbing: config loading, seed fan-out, metrics files and summaries.

Each master seed is split by ``SeedSequence(seed).spawn(4)`` into the streams
(environment generation, dynamics, policy sampling, consensus graphs). Every
algorithm on a seed starts from fresh generators built from the same four
children, so paired runs see the same environment instance and, as far as
the consumption pattern allows, the same dynamics draws.
"""

import configparser
import csv
import hashlib
import json
import logging
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import env_abstract, env_traffic
from .algorithms import AlgorithmKind, StepSchedule, TrainConfig, train

log = logging.getLogger(__name__)

CSV_HEADER = ("run_id", "seed", "algo", "epoch", "agent", "reward", "network_total", "disagreement",
              "theta_dist")
MANIFEST_VERSION = 1
ALGO_ORDER = [k.value for k in AlgorithmKind]

ENV_DEFAULTS = {
    "abstract": {
        "env": {"n_agents": 15, "n_states": 15, "n_actions": 2, "policy_dim": 5, "value_dim": 5,
                "reward_dim": 10},
        "epochs": 120, "steps_per_epoch": 100, "consensus": "random", "g_inv_scale": 1.5, "trace_lambda": 0.0,
    },
    "traffic": {
        "env": {"arrival_pattern": 1, "n_vehicles": 50000, "horizon": 180000, "cycle_seconds": 120,
                "capacity": 50, "service_rate": 0.5, "link_time_min": 20, "link_time_max": 60,
                "warmup_epochs": 1},
        "epochs": 1500, "steps_per_epoch": 1, "consensus": "uniform", "g_inv_scale": 1.0, "trace_lambda": 0.25,
    },
}
FAST_PROFILE = {"abstract": {"epochs": 30}, "traffic": {"epochs": 300}}
FAST_SEEDS = 3
DEFAULT_SEEDS = 10

_INT_ENV_KEYS = {"n_agents", "n_states", "n_actions", "policy_dim", "value_dim", "reward_dim", "arrival_pattern",
                 "n_vehicles", "horizon", "cycle_seconds", "capacity", "link_time_min", "link_time_max",
                 "warmup_epochs"}

# section -> allowed keys (env keys depend on the env kind and are checked later)
_SCHEMA = {
    "run": {"env", "algorithms", "seeds", "seed", "epochs", "steps_per_epoch", "workers", "out", "window"},
    "env": set(ENV_DEFAULTS["abstract"]["env"]) | set(ENV_DEFAULTS["traffic"]["env"]),
    "schedule": {"exponent_v", "exponent_theta"},
    "consensus": {"mode", "connectivity_ratio"},
    "critic": {"trace_lambda"},
    "fisher": {"g_inv_scale", "schedule", "step_cap", "theta_limit"},
}


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class RunConfig:
    env: str = "abstract"
    env_params: dict = field(default_factory=lambda: dict(ENV_DEFAULTS["abstract"]["env"]))
    algorithms: tuple = tuple(ALGO_ORDER)
    seeds: tuple = tuple(range(DEFAULT_SEEDS))
    epochs: int = 120
    steps_per_epoch: int = 100
    schedule: StepSchedule = StepSchedule()
    consensus: str = "random"
    connectivity_ratio: float = None
    trace_lambda: float = 0.0
    g_inv_scale: float = 1.5
    fisher_schedule: str = "sample_average"
    fisher_step_cap: float = 0.5
    theta_limit: float = 1e6
    out: str = "runs"
    workers: int = 1
    window: int = None  # summary window in epochs; default 10% of epochs

    def validate(self):
        problems = []
        if self.env not in ENV_DEFAULTS:
            problems.append(f"unknown env {self.env!r}")
        if not self.seeds:
            problems.append("at least one seed is required")
        if not self.algorithms:
            problems.append("at least one algorithm is required")
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.steps_per_epoch < 1:
            problems.append("steps_per_epoch must be >= 1")
        if self.env == "traffic" and self.steps_per_epoch != 1:
            problems.append("traffic runs take exactly one decision epoch per step")
        if self.workers < 1:
            problems.append("workers must be >= 1")
        if self.window is not None and self.window < 1:
            problems.append("window must be >= 1")
        if self.env == "traffic":
            net = env_traffic.TrafficNet(**self.env_params)
            if self.epochs > net.max_epochs():
                problems.append(f"epochs {self.epochs} exceed the arrival horizon ({net.max_epochs()} epochs)")
        try:
            self.train_config()
        except ValueError as exc:
            problems.append(str(exc))
        if problems:
            raise ConfigError(problems)
        return self

    def train_config(self):
        return TrainConfig(
            iterations=self.epochs * self.steps_per_epoch,
            schedule=self.schedule,
            trace_lambda=self.trace_lambda,
            consensus=self.consensus,
            connectivity_ratio=self.connectivity_ratio,
            g_inv_scale=self.g_inv_scale,
            fisher_step_cap=self.fisher_step_cap,
            fisher_schedule=self.fisher_schedule,
            log_interval=self.steps_per_epoch,
            theta_limit=self.theta_limit,
        )

    @property
    def summary_window(self):
        return self.window or max(1, self.epochs // 10)

    def to_dict(self):
        d = asdict(self)
        d["algorithms"] = list(self.algorithms)
        d["seeds"] = list(self.seeds)
        return d


def default_config(env="abstract", fast=False, seed=0):
    base = ENV_DEFAULTS[env]
    cfg = RunConfig(env=env, env_params=dict(base["env"]), epochs=base["epochs"],
                    steps_per_epoch=base["steps_per_epoch"], consensus=base["consensus"],
                    g_inv_scale=base["g_inv_scale"], trace_lambda=base["trace_lambda"])
    n = FAST_SEEDS if fast else DEFAULT_SEEDS
    cfg.seeds = tuple(range(seed, seed + n))
    if fast:
        cfg.epochs = FAST_PROFILE[env]["epochs"]
    return cfg


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


def _key_lines(text):
    """(section, key) -> 1-based line number, for error reporting."""
    where = {}
    section = None
    for no, line in enumerate(text.splitlines(), 1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip()
            where[(section, None)] = no
            continue
        m = _KEY_RE.match(line)
        if m and section is not None and not line[:1].isspace():
            where.setdefault((section, m.group(1).strip().lower()), no)
    return where


def parse_config(text, fast=False, seed=None, source="<config>"):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError([f"{source}: parse error: {exc}"]) from None
    lines = _key_lines(text)
    problems = []

    def at(section, key=None):
        no = lines.get((section, key))
        return f"{source}:{no}" if no else source

    for section in parser.sections():
        if section not in _SCHEMA:
            problems.append(f"{at(section)}: unknown section [{section}]")
            continue
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                problems.append(f"{at(section, key)}: unknown key {key!r} in [{section}]")
    if problems:
        raise ConfigError(problems)

    def get(section, key, conv, default=None):
        if not parser.has_option(section, key):
            return default
        raw = parser.get(section, key)
        try:
            return conv(raw)
        except ValueError as exc:
            problems.append(f"{at(section, key)}: bad value {raw!r} for {key}: {exc}")
            return default

    env = get("run", "env", lambda s: s.strip().lower(), "abstract")
    if env not in ENV_DEFAULTS:
        raise ConfigError([f"{at('run', 'env')}: unknown env {env!r}"])
    base_seed = get("run", "seed", int, 0) if seed is None else seed
    cfg = default_config(env, fast=fast, seed=base_seed)

    env_keys = set(ENV_DEFAULTS[env]["env"])
    if parser.has_section("env"):
        for key in parser["env"]:
            if key not in env_keys:
                problems.append(f"{at('env', key)}: key {key!r} does not apply to env {env!r}")
                continue
            conv = int if key in _INT_ENV_KEYS else float
            cfg.env_params[key] = get("env", key, conv, cfg.env_params[key])

    algos = get("run", "algorithms", lambda s: tuple(AlgorithmKind.parse(a).value for a in s.split(",") if a.strip()))
    if algos is not None:
        cfg.algorithms = algos
    n_seeds = get("run", "seeds", _seed_spec)
    if n_seeds is not None:
        cfg.seeds = tuple(base_seed + k for k in range(n_seeds)) if isinstance(n_seeds, int) else n_seeds
    for key, conv in (("epochs", int), ("steps_per_epoch", int), ("workers", int), ("window", int),
                      ("out", str)):
        val = get("run", key, conv)
        if val is not None and not (fast and key == "epochs"):
            setattr(cfg, key, val)

    ev = get("schedule", "exponent_v", float, cfg.schedule.exponent_v)
    et = get("schedule", "exponent_theta", float, cfg.schedule.exponent_theta)
    try:
        cfg.schedule = StepSchedule(exponent_v=ev, exponent_theta=et)
    except ValueError as exc:
        problems.append(f"{at('schedule')}: {exc}")
    cfg.consensus = get("consensus", "mode", lambda s: s.strip().lower(), cfg.consensus)
    cfg.connectivity_ratio = get("consensus", "connectivity_ratio", float, cfg.connectivity_ratio)
    cfg.trace_lambda = get("critic", "trace_lambda", float, cfg.trace_lambda)
    cfg.g_inv_scale = get("fisher", "g_inv_scale", float, cfg.g_inv_scale)
    cfg.fisher_schedule = get("fisher", "schedule", lambda s: s.strip().lower(), cfg.fisher_schedule)
    cfg.fisher_step_cap = get("fisher", "step_cap", float, cfg.fisher_step_cap)
    cfg.theta_limit = get("fisher", "theta_limit", float, cfg.theta_limit)
    if fast:
        cfg.seeds = cfg.seeds[:FAST_SEEDS]
    if problems:
        raise ConfigError(problems)
    try:
        cfg.validate()
    except ConfigError as exc:
        raise ConfigError([f"{source}: {p}" for p in exc.problems]) from None
    return cfg


def _seed_spec(text):
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if len(parts) == 1:
        return int(parts[0])  # a count
    return tuple(int(p) for p in parts)  # explicit list


def load_config(path, fast=False, seed=None):
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config file not found: {path}"])
    return parse_config(path.read_text(), fast=fast, seed=seed, source=str(path))


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

def seed_streams(seed):
    """Four independent generators: env generation, dynamics, policy, consensus."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)]


def build_env(cfg, env_rng):
    p = cfg.env_params
    if cfg.env == "abstract":
        return env_abstract.generate(p["n_agents"], p["n_states"], env_rng, n_actions=p["n_actions"],
                                     m=p["policy_dim"], L=p["value_dim"], M=p["reward_dim"])
    return env_traffic.TrafficNet(**p)


def run_id(algo, seed):
    return f"{algo}-s{seed}"


def _fmt(x):
    return repr(float(x))


def metrics_rows(rm):
    rid = run_id(rm.algo, rm.seed)
    n = rm.n_agents
    dist = rm.theta_dist if rm.theta_dist is not None else np.zeros_like(rm.rewards)
    for e in range(len(rm.epochs)):
        tot = _fmt(rm.network_total[e])
        dis = _fmt(rm.disagreement[e])
        for i in range(n):
            yield (rid, str(rm.seed), rm.algo, str(int(rm.epochs[e])), str(i), _fmt(rm.rewards[e, i]), tot, dis,
                   _fmt(dist[e, i]))


def _csv_text(rows):
    lines = [",".join(CSV_HEADER)]
    lines.extend(",".join(r) for r in rows)
    return "\n".join(lines) + "\n"


def _pad_history(hist, epochs):
    if hist is None or len(hist) == 0:
        return None
    if len(hist) >= epochs:
        return hist
    pad = np.repeat(hist[-1:], epochs - len(hist), axis=0)
    return np.concatenate([hist, pad], axis=0)


def run_seed(cfg, seed):
    """All algorithms on one master seed; MAAC first so the others get a paired reference."""
    tc = cfg.train_config()
    env = build_env(cfg, seed_streams(seed)[0])
    results = {}
    base = train(env, AlgorithmKind.MAAC, tc, seed_streams(seed)[1:], record_theta=True, seed=seed)
    ref = _pad_history(base.theta_history, cfg.epochs)
    base.theta_history = None
    base.theta_dist = np.zeros_like(base.rewards)
    for algo in cfg.algorithms:
        kind = AlgorithmKind.parse(algo)
        if kind is AlgorithmKind.MAAC:
            results[algo] = base
            continue
        results[algo] = train(env, kind, tc, seed_streams(seed)[1:], reference_theta=ref, seed=seed)
    return seed, results


def _run_seed_job(args):
    cfg, seed = args
    seed, results = run_seed(cfg, seed)
    packed = {}
    for algo, rm in results.items():
        packed[algo] = {
            "csv": _csv_text(metrics_rows(rm)),
            "status": rm.status,
            "abort_step": rm.abort_step,
            "abort_reason": rm.abort_reason,
            "epochs_completed": int(len(rm.epochs)),
            "diagnostics": {k: (float(v) if isinstance(v, (int, float, np.floating, np.integer)) else v)
                            for k, v in rm.diagnostics.items()},
        }
    return seed, packed


def run_experiment(cfg, out=None):
    """Fan out (algorithm x seed), write one CSV per run plus manifest.json. Returns the manifest dict."""
    cfg.validate()
    out = Path(out or cfg.out)
    mdir = out / "metrics"
    mdir.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, s) for s in cfg.seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.workers, len(jobs))) as pool:
            done = dict(pool.map(_run_seed_job, jobs))
    else:
        done = dict(map(_run_seed_job, jobs))
    runs = []
    for seed in cfg.seeds:
        for algo in cfg.algorithms:
            res = done[seed][algo]
            rid = run_id(algo, seed)
            path = mdir / f"{rid}.csv"
            data = res["csv"].encode()
            path.write_bytes(data)
            runs.append({
                "run_id": rid, "algo": algo, "seed": seed, "file": f"metrics/{rid}.csv",
                "sha256": hashlib.sha256(data).hexdigest(), "status": res["status"],
                "abort_step": res["abort_step"], "abort_reason": res["abort_reason"],
                "epochs_completed": res["epochs_completed"], "diagnostics": res["diagnostics"],
            })
    cfgd = cfg.to_dict()
    cfgd.pop("out")
    cfgd.pop("workers")
    manifest = {"version": MANIFEST_VERSION, "csv_header": list(CSV_HEADER), "config": cfgd,
                "metric": default_metric(cfg.env), "runs": runs}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(out):
    return json.loads((Path(out) / "manifest.json").read_text())


def manifest_files(out):
    man = load_manifest(out)
    return [Path(out) / r["file"] for r in man["runs"]], man


# ---------------------------------------------------------------------------
# reading metrics back
# ---------------------------------------------------------------------------

@dataclass
class RunTable:
    run_id: str
    algo: str
    seed: int
    epochs: np.ndarray
    rewards: np.ndarray  # (E, n)
    network_total: np.ndarray
    disagreement: np.ndarray
    theta_dist: np.ndarray  # (E, n)

    @property
    def n_agents(self):
        return self.rewards.shape[1]


def read_metrics(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        rows = list(reader)
    if not rows:
        return RunTable(Path(path).stem, "", 0, np.zeros(0, int), np.zeros((0, 0)), np.zeros(0), np.zeros(0),
                        np.zeros((0, 0)))
    n = max(int(r[4]) for r in rows) + 1
    e = len(rows) // n
    arr = np.array([[float(x) for x in r[5:]] for r in rows]).reshape(e, n, 4)
    return RunTable(rows[0][0], rows[0][2], int(rows[0][1]), np.array([int(r[3]) for r in rows[::n]]),
                    arr[:, :, 0], arr[:, 0, 1], arr[:, 0, 2], arr[:, :, 3])


def default_metric(env):
    return "congestion" if env == "traffic" else "average_reward"


def epoch_metric(tab, metric):
    """Per-epoch network value: congestion (-total), average reward (total/n) or the raw total."""
    if metric == "congestion":
        return -tab.network_total, -tab.rewards
    if metric == "average_reward":
        return tab.network_total / tab.n_agents, tab.rewards
    if metric == "network_total":
        return tab.network_total, tab.rewards
    raise ValueError(f"unknown metric {metric!r}")


def _algo_key(algo):
    return (ALGO_ORDER.index(algo), algo) if algo in ALGO_ORDER else (len(ALGO_ORDER), algo)


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------

@dataclass
class SummaryRow:
    algo: str
    runs: int
    mean: float
    sd: float
    cf: float
    ci_low: float
    ci_high: float
    per_agent: np.ndarray  # mean over runs of each agent's window mean
    run_values: list


def mean_sd_cf(values, sd_convention="population"):
    v = np.asarray(values, dtype=float)
    mean = float(v.mean())
    ddof = 0 if sd_convention == "population" or len(v) < 2 else 1
    sd = float(v.std(ddof=ddof))
    cf = 1.96 * sd / math.sqrt(len(v))
    return mean, sd, cf


def summarize(files, window=None, metric="network_total", sd_convention="population"):
    """Per-algorithm statistics of the final-window means across runs."""
    groups = {}
    for f in files:
        tab = read_metrics(f)
        if len(tab.epochs) == 0:
            continue
        k = window or max(1, len(tab.epochs) // 10)
        net, per = epoch_metric(tab, metric)
        groups.setdefault(tab.algo, []).append((tab.seed, float(net[-k:].mean()), per[-k:].mean(axis=0)))
    table = []
    for algo in sorted(groups, key=_algo_key):
        items = sorted(groups[algo], key=lambda x: x[0])
        vals = [x[1] for x in items]
        mean, sd, cf = mean_sd_cf(vals, sd_convention)
        table.append(SummaryRow(algo, len(vals), mean, sd, cf, mean - cf, mean + cf,
                                np.mean([x[2] for x in items], axis=0), vals))
    return table


def summary_csv(table):
    n = max((len(r.per_agent) for r in table), default=0)
    head = ["algo", "runs", "mean", "sd", "cf", "ci_low", "ci_high"] + [f"agent{i}" for i in range(n)]
    lines = [",".join(head)]
    for r in table:
        vals = [r.algo, str(r.runs)] + [_fmt(x) for x in (r.mean, r.sd, r.cf, r.ci_low, r.ci_high)]
        vals += [_fmt(x) for x in r.per_agent]
        lines.append(",".join(vals))
    return "\n".join(lines) + "\n"


def format_summary(table, metric):
    out = [f"{'algorithm':<10} {'runs':>4} {metric:>14} {'sd':>10} {'CF':>10}  95% interval"]
    for r in table:
        out.append(f"{r.algo:<10} {r.runs:>4} {r.mean:>14.5f} {r.sd:>10.5f} {r.cf:>10.5f}  "
                   f"[{r.ci_low:.5f}, {r.ci_high:.5f}]")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# plot data
# ---------------------------------------------------------------------------

PLOT_KINDS = ("congestion_curve", "param_distance", "log_param_distance")


def plot_series(files, kind, metric="network_total"):
    """Return (header, rows): epoch plus one seed-averaged column per algorithm."""
    if kind not in PLOT_KINDS:
        raise ValueError(f"unknown plot kind {kind!r}")
    per_algo = {}
    for f in files:
        tab = read_metrics(f)
        if len(tab.epochs) == 0:
            continue
        if kind == "congestion_curve":
            series = epoch_metric(tab, metric)[0]
        else:
            if tab.algo == "MAAC":
                continue  # the reference itself
            series = np.sqrt((tab.theta_dist ** 2).sum(axis=1))
        per_algo.setdefault(tab.algo, []).append((tab.epochs, series))
    algos = sorted(per_algo, key=_algo_key)
    header = ["epoch"] + algos
    epochs = sorted({int(e) for a in algos for ep, _ in per_algo[a] for e in ep})
    rows = []
    for ep in epochs:
        row = [str(ep)]
        for a in algos:
            vals = [s[np.searchsorted(e, ep)] for e, s in per_algo[a] if ep in e]
            if not vals:
                row.append("nan")
                continue
            v = float(np.mean(vals))
            if kind == "log_param_distance":
                row.append(_fmt(math.log10(v)) if v > 0 else "nan")
            else:
                row.append(_fmt(v))
        rows.append(row)
    return header, rows


def emit_plot_data(files, kind, path, metric="network_total"):
    header, rows = plot_series(files, kind, metric)
    text = " ".join(header) + "\n" + "".join(" ".join(r) + "\n" for r in rows)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)
    return header, rows


def worker_count(requested=None):
    if requested:
        return int(requested)
    return max(1, min(os.cpu_count() or 1, 8))
