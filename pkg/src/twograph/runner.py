"""Config-driven runs: load a JSON config, build its pieces, train, check guarantees.

Config schema (JSON object)::

    protocol     backprop | vae | gan | dac | kickback          (required)
    seed         non-negative integer                           (required)
    settings     keyword arguments of the protocol builder
    environment  {"kind": supervised | blobs | density | linear_gaussian | bandit, ...}
    optimizer    {"lr", "momentum", "players": {name: {"lr", "momentum", "params"}}}
    stop         {"max_rounds", "tol", "window"}
    gradcheck    {"tol", "points", "players", "batch", "h"}
    verify       per-protocol guarantee settings (see guarantee_suite)
    output_dir   where run outputs go (default "runs/<protocol>")
    description  free text

The environment variable TWOGRAPH_SEED overrides ``seed``.
"""

import csv
import io
import json
import os
import tempfile

import numpy as np

from .environments import BanditMdp, DensitySource, LinearGaussianSource, SupervisedSource, two_blobs
from .errors import ConfigError
from .players import StopRule, arglocopt, init_states
from .protocols import BUILDERS, build_protocol
from .tensor import Rng
from .verify import (
    brute_force_curator,
    curator_values,
    dac_alignment,
    elbo_gap,
    gan_optimal_curator,
    grad_check_protocol,
    kickback_sign_check,
)

TOP_LEVEL = {"protocol", "seed", "settings", "environment", "optimizer", "stop", "gradcheck", "verify", "output_dir", "description"}
OPTIMIZER_KEYS = {"lr", "momentum", "players"}
PLAYER_KEYS = {"lr", "momentum", "params", "optimizer"}
STOP_KEYS = {"max_rounds", "tol", "window"}
GRADCHECK_KEYS = {"tol", "points", "players", "batch", "h", "param_std"}
ENV_KEYS = {
    "supervised": {"teacher", "activation", "noise_std", "input_std", "positive_inputs", "pool_size", "seed"},
    "blobs": {"n", "dim", "separation", "std", "seed"},
    "density": {"points", "probs", "weights", "means", "stds"},
    "linear_gaussian": {"loading", "offset", "noise_std"},
    "bandit": {"w_star", "gamma", "transition", "state_std"},
}
SEED_ENV = "TWOGRAPH_SEED"


def _only(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    extra = sorted(set(d) - set(allowed))
    if extra:
        raise ConfigError(f"unknown field(s) in {where}: {', '.join(extra)}")


def check_config(cfg: dict) -> dict:
    _only(cfg, TOP_LEVEL, "config")
    if "protocol" not in cfg:
        raise ConfigError("config is missing 'protocol'")
    if cfg["protocol"] not in BUILDERS:
        raise ConfigError(f"unknown protocol {cfg['protocol']!r}; expected one of {sorted(BUILDERS)}")
    if "seed" not in cfg:
        raise ConfigError("config is missing 'seed'")
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    opt = cfg.get("optimizer", {})
    _only(opt, OPTIMIZER_KEYS, "optimizer")
    for name, p in opt.get("players", {}).items():
        _only(p, PLAYER_KEYS, f"optimizer.players.{name}")
    _only(cfg.get("stop", {}), STOP_KEYS, "stop")
    _only(cfg.get("gradcheck", {}), GRADCHECK_KEYS, "gradcheck")
    env = cfg.get("environment")
    if env is not None:
        _only(env, {"kind"} | ENV_KEYS.get(env.get("kind"), set()), "environment")
        if env.get("kind") not in ENV_KEYS:
            raise ConfigError(f"unknown environment kind {env.get('kind')!r}; expected one of {sorted(ENV_KEYS)}")
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc.msg} (line {exc.lineno})") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    override = os.environ.get(SEED_ENV)
    if override is not None:
        try:
            cfg["seed"] = int(override)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {override!r}") from None
    return check_config(cfg)


def make_protocol(cfg: dict):
    try:
        return build_protocol(cfg["protocol"], dict(cfg.get("settings", {})))
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"cannot build {cfg['protocol']}: {exc}") from None


def make_environment(cfg: dict):
    spec = dict(cfg.get("environment") or {})
    kind = spec.pop("kind", None)
    try:
        if kind == "supervised":
            return SupervisedSource(np.array(spec.pop("teacher"), dtype=float), **spec)
        if kind == "blobs":
            seed = spec.pop("seed", cfg["seed"])
            return two_blobs(Rng(seed).spawn("blobs"), **spec)
        if kind == "density":
            return DensitySource(**spec)
        if kind == "linear_gaussian":
            return LinearGaussianSource(**spec)
        if kind == "bandit":
            return BanditMdp(np.array(spec.pop("w_star"), dtype=float), **spec)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"bad environment: {exc}") from None
    raise ConfigError(f"config for {cfg['protocol']} needs an environment")


def make_states(protocol, cfg: dict, rng: Rng) -> dict:
    opt = cfg.get("optimizer", {})
    overrides = {}
    for name, p in opt.get("players", {}).items():
        if name not in protocol.player_names:
            raise ConfigError(f"optimizer.players names unknown player {name!r}")
        o = dict(p)
        if "params" in o:
            o["params"] = np.array(o["params"], dtype=float)
            if o["params"].shape != protocol.player(name).shape:
                raise ConfigError(f"params for {name!r} have shape {o['params'].shape}, expected {protocol.player(name).shape}")
        overrides[name] = o
    try:
        return init_states(protocol, rng, lr=opt.get("lr", 0.01), momentum=opt.get("momentum", 0.0), overrides=overrides)
    except ValueError as exc:
        raise ConfigError(f"bad optimizer settings: {exc}") from None


def make_stop(cfg: dict) -> StopRule:
    try:
        return StopRule(**cfg.get("stop", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad stop rule: {exc}") from None


def train(cfg: dict, protocol=None, max_rounds=None):
    """Build everything from the config and run ``arglocopt``."""
    protocol = protocol or make_protocol(cfg)
    root = Rng(cfg["seed"])
    env = make_environment(cfg)
    states = make_states(protocol, cfg, root.spawn("init"))
    stop = make_stop(cfg)
    if max_rounds is not None:
        stop = StopRule(max_rounds, stop.tol, stop.window)
    states, history = arglocopt(protocol, states, env, root.spawn("train"), stop)
    return protocol, env, states, history


def params_of(states) -> dict:
    return {k: s.params for k, s in states.items()}


# --------------------------------------------------------------------------
# output files


def atomic_write(path, text: str):
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _num(v) -> str:
    return format(float(v), ".17g")


def metrics_csv(protocol, history) -> str:
    monitors = sorted({k for m in history.rounds for k in m["monitors"]})
    players = protocol.player_names
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "objective", *monitors, *(f"delta_norm:{p}" for p in players)])
    for m in history.rounds:
        w.writerow([m["round"], _num(m["objective"]), *(_num(m["monitors"][k]) for k in monitors), *(_num(m["delta_norm"][p]) for p in players)])
    return buf.getvalue()


def to_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_run(out_dir, protocol, states, history, cfg) -> dict:
    objectives = history.objectives()
    report = {
        "protocol": protocol.name,
        "seed": cfg["seed"],
        "rounds": len(history),
        "stopped_early": history.stopped_early,
        "initial_objective": float(objectives[0]),
        "final_objective": float(objectives[-1]),
    }
    atomic_write(os.path.join(out_dir, "metrics.csv"), metrics_csv(protocol, history))
    atomic_write(os.path.join(out_dir, "final_params.json"), to_json(params_of(states)))
    atomic_write(os.path.join(out_dir, "report.json"), to_json(report))
    return report


# --------------------------------------------------------------------------
# checks


def gradcheck(cfg: dict, protocol=None):
    protocol = protocol or make_protocol(cfg)
    g = dict(cfg.get("gradcheck", {}))
    return grad_check_protocol(
        protocol,
        tol=g.get("tol", 1e-4),
        points=g.get("points", 10),
        rng=Rng(cfg["seed"]).spawn("gradcheck"),
        players=g.get("players"),
        h=g.get("h", 1e-5),
        batch=g.get("batch", 4),
        param_std=g.get("param_std", 0.5),
    )


def random_finite_pair(rng: Rng, k: int):
    """Two random distributions sharing a random k-point support in [-3, 3]."""
    support = np.sort(rng.uniform(-3.0, 3.0, size=k))
    pn = rng.uniform(0.05, 1.0, size=k)
    pf = rng.uniform(0.05, 1.0, size=k)
    # normalizing twice brings the sum within the 1e-12 check
    pn, pf = pn / pn.sum(), pf / pf.sum()
    return DensitySource.finite(support, pn / pn.sum()), DensitySource.finite(support, pf / pf.sum())


def suite_backprop(cfg, protocol, rng):
    rep = gradcheck(cfg, protocol)
    return {"gradcheck": rep.to_dict()}, rep.ok


def suite_kickback(cfg, protocol, rng):
    v = cfg.get("verify", {})
    s = cfg.get("settings", {})
    trials = v.get("trials", 100)
    rep = kickback_sign_check(s["widths"], trials, rng, input_dim=s.get("input_dim"), loss=s.get("loss", "mse"))
    ok = rep.ok and rep.coherent_trials == trials and rep.descent_trials >= v.get("min_descent", 0.99) * trials
    return {"sign_check": rep.to_dict()}, ok


def suite_gan(cfg, protocol, rng):
    v = cfg.get("verify", {})
    worst = 0.0
    for k in range(v.get("supports", 20)):
        p_n, p_f = random_finite_pair(rng.spawn(f"support{k}"), v.get("support_size", 8))
        _, closed = gan_optimal_curator(p_n, p_f)
        _, brute = brute_force_curator(p_n, p_f, v.get("grid", 1000))
        worst = max(worst, float(np.nanmax(np.abs(closed - brute))))
    out = {"closed_vs_brute_force": worst}
    ok = worst <= v.get("brute_force_tol", 1e-3)
    if protocol.meta.get("generator") == "categorical":
        _, env, states, _ = train(cfg, protocol)
        logits = states["theta"].params
        pf = np.exp(logits - logits.max())
        support = np.asarray(protocol.meta["support"], dtype=float)
        p_f = DensitySource.finite(support, pf / pf.sum())
        pts, d_star = gan_optimal_curator(env, p_f)
        d = curator_values(protocol, states["phi"].params, pts)
        err = float(np.nanmax(np.abs(d - d_star)))
        out.update({"trained_curator_max_error": err, "d_star": d_star, "d_trained": d})
        ok = ok and err < v.get("tol", 1e-2)
    return out, ok


def suite_vae(cfg, protocol, rng):
    v = cfg.get("verify", {})
    env = make_environment(cfg)
    x = env.sample(rng.spawn("x"), v.get("points", 20))[env.node][0]
    worst = np.inf
    for k in range(v.get("random_settings", 50)):
        prng = rng.spawn(f"params{k}")
        params = {p.name: v.get("param_std", 0.5) * prng.normal(size=p.shape) for p in protocol.players}
        rep = elbo_gap(protocol, params, x)
        worst = min(worst, min(r["gap"] for r in rep.per_point))
    _, env, states, _ = train(cfg, protocol)
    trained = elbo_gap(protocol, params_of(states), x)
    out = {"min_gap_random": worst, "trained": trained.to_dict()}
    if isinstance(env, LinearGaussianSource):
        out["true_log_likelihood"] = float(np.mean(env.log_marginal(x)))
    ok = worst >= -v.get("slack", 1e-6) and trained.gap < v.get("gap_tol", 1e-2)
    return out, ok


def suite_dac(cfg, protocol, rng):
    v = cfg.get("verify", {})
    _, env, states, history = train(cfg, protocol)
    init_env = make_environment(cfg)
    states0 = make_states(protocol, cfg, Rng(cfg["seed"]).spawn("init"))
    s = init_env.sample_states(rng.spawn("states"), v.get("states", 500))
    before = dac_alignment(protocol, params_of(states0), init_env, s)
    after = dac_alignment(protocol, params_of(states), env, s)
    ok = (
        not after.vacuous
        and after.mean_cosine > v.get("cosine", 0.95)
        and after.regret < v.get("regret", 0.05)
        and before.regret > v.get("initial_regret", 1.0)
    )
    return {"initial": before.to_dict(), "final": after.to_dict(), "rounds": len(history)}, ok


SUITES = {
    "backprop": suite_backprop,
    "kickback": suite_kickback,
    "gan": suite_gan,
    "vae": suite_vae,
    "dac": suite_dac,
}


def guarantee_suite(cfg: dict, protocol=None):
    """Run the named protocol's guarantee checks; returns (report dict, ok)."""
    protocol = protocol or make_protocol(cfg)
    report, ok = SUITES[protocol.name](cfg, protocol, Rng(cfg["seed"]).spawn("verify"))
    report["ok"] = bool(ok)
    return report, bool(ok)
