"""Independent oracles and guarantee checkers.

Nothing here trusts the engine's own derivatives: gradients are checked
against central differences, the optimal curator against a grid search, the
variational bound against quadrature and the deviator against the analytic
reward gradient.
"""

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.integrate import simpson

from .environments import BanditMdp, DensitySource, eval_density, true_action_gradient
from .errors import NonFiniteError
from .graph import (
    CLONE,
    NATURE,
    NOISE,
    OPERATOR,
    Protocol,
    derive_chain_rule_response,
    evaluate_query,
    objective_value,
    query_sweep,
    response_sweep,
)
from .operators import KERNELS, get_kernel
from .protocols import build_kickback, dac_actor, dac_deviator, kickback_coherence
from .tensor import Rng, as_tensor

KINK_MARGIN = 1e-3


def rel_error(a, b) -> float:
    a, b = as_tensor(a), as_tensor(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def central_diff(f, theta, h=1e-5) -> np.ndarray:
    """``(f(theta + h e_k) - f(theta - h e_k)) / 2h`` for every coordinate k."""
    if h <= 0:
        raise ValueError("h must be positive")
    theta = as_tensor(theta)
    out = np.zeros_like(theta)
    for idx in np.ndindex(*theta.shape):
        tp, tm = theta.copy(), theta.copy()
        tp[idx] += h
        tm[idx] -= h
        fp, fm = float(f(tp)), float(f(tm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"objective not finite at coordinate {idx}")
        out[idx] = (fp - fm) / (2.0 * h)
    return out


# --------------------------------------------------------------------------
# kernel self-test


def check_kernel(tag: str, rng: Rng, points=5, h=1e-6) -> float:
    """Worst relative error between a kernel's VJP and central differences.

    Inputs come from the kernel's example generator; points lying within
    ``KINK_MARGIN`` of a non-differentiable kink are redrawn.
    """
    spec = get_kernel(tag)
    if spec.vjp is None or spec.example is None:
        raise ValueError(f"kernel {tag!r} has no partials or no example inputs")
    gen = np.random.default_rng(rng.integers(0, 2**32))
    worst = 0.0
    for _ in range(points):
        for _attempt in range(100):
            attrs, ins = spec.example(gen)
            ins = tuple(as_tensor(x) for x in ins)
            if spec.kink is None or spec.kink(attrs, *ins) >= KINK_MARGIN:
                break
        outs = spec.forward(attrs, *ins)
        cot = tuple(gen.normal(size=np.shape(o)) for o in outs)
        grads = spec.vjp(attrs, ins, outs, cot)

        def scalar(k, v):
            args = list(ins)
            args[k] = v
            return sum(float(np.sum(c * o)) for c, o in zip(cot, spec.forward(attrs, *args)))

        for k, x in enumerate(ins):
            if k in spec.nondiff or grads[k] is None:
                continue
            fd = central_diff(lambda v: scalar(k, v), x, h)
            worst = max(worst, rel_error(grads[k], fd))
    return worst


def self_test_kernels(rng: Rng, points=5) -> dict:
    return {tag: check_kernel(tag, rng.spawn(tag), points) for tag, s in KERNELS.items() if s.vjp and s.example}


# --------------------------------------------------------------------------
# protocol gradient check


@dataclass
class GradCheckReport:
    errors: dict
    tol: float
    points: int
    h: float
    resampled: int = 0

    @property
    def passed(self) -> dict:
        return {k: v <= self.tol for k, v in self.errors.items()}

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    def to_dict(self) -> dict:
        return {**asdict(self), "passed": self.passed, "ok": self.ok}


def synthetic_samples(protocol: Protocol, rng: Rng, batch: int):
    """Standard-normal samples for every nature port and noise node."""
    nature, noise = {}, {}
    for n in protocol.query.of_kind(NATURE):
        nature[n.id] = tuple(rng.normal(size=(batch, *s[1:]) if s and s[0] == "B" else s) for _, s in n.attrs["ports"])
    for n in protocol.query.of_kind(NOISE):
        s = n.attrs["shape"]
        noise[n.id] = rng.normal(size=(batch, *s[1:])) * n.attrs.get("std", 1.0)
    return nature, noise


def _min_kink(protocol, values) -> float:
    worst = np.inf
    q = protocol.query
    for node_id in q.order:
        n = q.node(node_id)
        if n.kind != OPERATOR:
            continue
        spec = get_kernel(n.kernel)
        if spec.kink is not None:
            worst = min(worst, spec.kink(n.attrs, *(values[s][p] for s, p in n.inputs)))
    return worst


def grad_check_protocol(
    protocol: Protocol,
    tol=1e-4,
    points=10,
    rng: Rng | None = None,
    players=None,
    h=1e-5,
    batch=4,
    param_std=0.5,
    samples=None,
) -> GradCheckReport:
    """Compare each player's response with central differences of the traced objective.

    Nature and noise samples are frozen for the whole check (synthetic
    standard-normal draws unless ``samples=(nature, noise)`` is given).
    Parameters are drawn N(0, param_std^2) and redrawn near relu kinks. The
    difference quotient is multiplied by the player's ``objective_sign`` so a
    response defined as the negated gradient is compared like for like.
    """
    protocol.require_valid()
    rng = rng or Rng(0)
    names = list(players) if players is not None else [p.name for p in protocol.players]
    nature, noise = samples if samples is not None else synthetic_samples(protocol, rng.spawn("samples"), batch)
    errors = {name: 0.0 for name in names}
    resampled = 0
    for k in range(points):
        prng = rng.spawn(f"point{k}")
        for _attempt in range(200):
            params = {p.name: param_std * prng.normal(size=p.shape) for p in protocol.players}
            clones = {n.id: param_std * prng.normal(size=n.attrs["shape"]) for n in protocol.query.of_kind(CLONE)}
            values = evaluate_query(protocol.query, params, nature, noise, clones)
            if _min_kink(protocol, values) >= KINK_MARGIN:
                break
            resampled += 1
        trace = query_sweep(protocol, params, nature, noise, clones)
        deltas = response_sweep(protocol, trace)
        for name in names:
            sign = protocol.player(name).objective_sign

            def f(theta, name=name):
                return objective_value(protocol, {**params, name: theta}, nature, noise, clones)

            fd = sign * central_diff(f, params[name], h)
            errors[name] = max(errors[name], rel_error(deltas[name], fd))
    return GradCheckReport(errors, tol, points, h, resampled)


# --------------------------------------------------------------------------
# kickback


@dataclass
class SignAgreementReport:
    trials: int
    coherent_trials: int
    compared: int
    agreements: int
    descent_trials: int
    last_layer_exact: bool
    last_layer_max_diff: float
    threshold: float
    coherence: list = field(default_factory=list)

    @property
    def agreement_rate(self) -> float:
        return self.agreements / self.compared if self.compared else 1.0

    @property
    def ok(self) -> bool:
        return self.agreements == self.compared and self.last_layer_exact

    def to_dict(self) -> dict:
        return {**asdict(self), "agreement_rate": self.agreement_rate, "ok": self.ok}


def kickback_sign_check(
    widths=(3, 3, 1),
    trials=100,
    rng: Rng | None = None,
    input_dim=None,
    loss="mse",
    step=1e-4,
    threshold=1e-8,
    incoherent=False,
) -> SignAgreementReport:
    """Compare Kickback estimates with exact backprop on random positive networks.

    Weights are uniform on (0, 1) and inputs are positive, which makes every
    network coherent. ``incoherent=True`` negates one column of the second
    layer's weights so some tau goes negative; such trials are counted but not
    held to the sign guarantee.
    """
    rng = rng or Rng(0)
    proto = build_kickback(widths, loss=loss, input_dim=input_dim, batch_size=1)
    exact = Protocol("kickback_exact", proto.query, derive_chain_rule_response(proto.query), proto.players, 1)
    n_layers = len(widths)
    last = f"theta{n_layers}"
    coherent_trials = compared = agreements = descents = 0
    max_diff, coherence = 0.0, []
    for t in range(trials):
        trng = rng.spawn(f"trial{t}")
        params = {p.name: trng.uniform(0.0, 1.0, size=p.shape) for p in proto.players}
        if incoherent and n_layers > 2:
            params["theta2"][:, 0] *= -1.0
        x = np.abs(trng.normal(size=(1, proto.query.node("nature").attrs["ports"][0][1][1])))
        y = trng.normal(size=(1, 1)) if loss == "mse" else trng.choice(2, size=(1, 1)) * 2.0 - 1.0
        nature = {"nature": (x, y)}
        trace = query_sweep(proto, params, nature)
        estimate = response_sweep(proto, trace)
        truth = response_sweep(exact, trace)
        coherent = kickback_coherence(trace, n_layers)
        coherence.append(coherent)
        diff = float(np.max(np.abs(estimate[last] - truth[last])))
        max_diff = max(max_diff, diff / max(1.0, float(np.max(np.abs(truth[last])))))
        if not coherent:
            continue
        coherent_trials += 1
        for name in proto.player_names:
            mask = np.abs(truth[name]) > threshold
            compared += int(mask.sum())
            agreements += int(np.sum(np.sign(estimate[name][mask]) == np.sign(truth[name][mask])))
        before = trace.objective(proto)
        stepped = {k: v - step * estimate[k] for k, v in params.items()}
        if objective_value(proto, stepped, nature) < before:
            descents += 1
    return SignAgreementReport(
        trials, coherent_trials, compared, agreements, descents, max_diff <= 1e-12, max_diff, threshold, coherence
    )


# --------------------------------------------------------------------------
# GAN


def _common_support(p_nature: DensitySource, p_forger: DensitySource):
    if not (p_nature.is_finite and p_forger.is_finite):
        raise ValueError("the optimal curator needs finite-support densities")
    pts = np.unique(np.concatenate([p_nature.points, p_forger.points]), axis=0)
    return pts, eval_density(p_nature, pts), eval_density(p_forger, pts)


def gan_optimal_curator(p_nature: DensitySource, p_forger: DensitySource):
    """``D* = P_N / (P_N + P_F)`` on the union of supports; NaN where both are zero."""
    pts, pn, pf = _common_support(p_nature, p_forger)
    total = pn + pf
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.where(total > 0, pn / np.where(total > 0, total, 1.0), np.nan)
    return pts, d


def brute_force_curator(p_nature: DensitySource, p_forger: DensitySource, grid=1000):
    """Maximize ``P_N log D + P_F log(1 - D)`` pointwise over grid midpoints."""
    pts, pn, pf = _common_support(p_nature, p_forger)
    d = (np.arange(grid) + 0.5) / grid
    score = pn[:, None] * np.log(d)[None] + pf[:, None] * np.log1p(-d)[None]
    best = d[np.argmax(score, axis=1)]
    return pts, np.where(pn + pf > 0, best, np.nan)


def curator_values(protocol: Protocol, phi, points) -> np.ndarray:
    """The Curator's output D_phi at each point."""
    node = protocol.query.node("D_real")
    x = np.atleast_2d(as_tensor(points))
    if protocol.meta.get("curator") == "pointwise":
        x = get_kernel("onehot").forward({"support": protocol.meta["support"]}, x)[0]
    return get_kernel("mlp").forward(node.attrs, as_tensor(phi), x)[0][:, 0]


# --------------------------------------------------------------------------
# VAE


@dataclass
class ElboReport:
    elbo: float
    log_likelihood: float
    gap: float
    per_point: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _simpson_converged(fn, lo, hi, tol=1e-6, start=257, max_points=2**17 + 1):
    n, prev = start, None
    while n <= max_points:
        grid = np.linspace(lo, hi, n)
        val = fn(grid)
        if prev is not None and abs(val - prev) < tol:
            return val
        prev, n = val, 2 * n - 1
    raise ArithmeticError(f"quadrature did not settle within {tol} on [{lo}, {hi}]")


def elbo_gap(protocol: Protocol, params, x, span=8.0, tol=1e-6) -> ElboReport:
    """ELBO and quadrature log-likelihood of a 1-D-latent VAE at each data point.

    The ELBO integrates ``-(L1 + L2)`` against the noise density, with the
    encoder from the protocol's kernel and every log-density written out
    directly in log space; ``log p(x)`` integrates prior times decoder density
    over z. Both use composite Simpson on ``[-span, span]`` (in units of the
    noise or prior stddev), refined until successive estimates agree to ``tol``.
    """
    meta = protocol.meta
    if meta.get("latent_dim") != 1:
        raise ValueError("elbo_gap needs a one-dimensional latent")
    q = protocol.query
    enc, dec = q.node("G"), q.node("D")
    ns, ps = meta["noise_std"], meta["prior_std"]
    x = np.atleast_2d(as_tensor(x))
    rows = []
    theta = params["theta"]
    mean_attrs = {"widths": dec.attrs["widths"], "act": dec.attrs.get("act", "tanh")}

    def log_decoder(z, xs):
        mean = get_kernel("mlp").forward(mean_attrs, theta[:-1], z)[0]
        std = np.exp(theta[-1])
        return np.sum(-0.5 * ((xs - mean) / std) ** 2 - np.log(std) - 0.5 * np.log(2 * np.pi), axis=-1)

    def log_normal(v, std):
        return -0.5 * (v / std) ** 2 - np.log(std) - 0.5 * np.log(2 * np.pi)

    for xi in x:
        xb = xi[None, :]

        def neg_bound(eps_grid, xb=xb):
            eps = eps_grid[:, None]
            xs = np.repeat(xb, len(eps), axis=0)
            z, logdet = get_kernel("reparam_encoder").forward(enc.attrs, params["phi"], eps, xs)
            log_noise_grid = log_normal(eps_grid, ns)
            total = log_noise_grid - logdet[:, 0] - log_normal(z[:, 0], ps) - log_decoder(z, xs)
            return simpson(np.exp(log_noise_grid) * total, x=eps_grid)

        def log_marginal(z_grid, xb=xb):
            xs = np.repeat(xb, len(z_grid), axis=0)
            lj = log_decoder(z_grid[:, None], xs) + log_normal(z_grid, ps)
            m = lj.max()
            return m + np.log(simpson(np.exp(lj - m), x=z_grid))

        elbo = -_simpson_converged(neg_bound, -span * ns, span * ns, tol)
        logp = _simpson_converged(log_marginal, -span * ps, span * ps, tol)
        rows.append({"x": xi.tolist(), "elbo": float(elbo), "log_likelihood": float(logp), "gap": float(logp - elbo)})
    return ElboReport(
        float(np.mean([r["elbo"] for r in rows])),
        float(np.mean([r["log_likelihood"] for r in rows])),
        float(np.mean([r["gap"] for r in rows])),
        rows,
    )


# --------------------------------------------------------------------------
# DAC


@dataclass
class AlignmentReport:
    mean_cosine: float
    used: int
    excluded: int
    regret: float

    @property
    def vacuous(self) -> bool:
        return self.used == 0

    def to_dict(self) -> dict:
        return {**asdict(self), "vacuous": self.vacuous}


def dac_alignment(protocol: Protocol, params, mdp: BanditMdp, states, zero_tol=1e-8) -> AlignmentReport:
    """Mean cosine between G_W(s, mu(s)) and the analytic action gradient of the reward.

    States where either vector is (numerically) zero are excluded. The report
    also carries the actor's mean regret ``-r(s, mu(s))``.
    """
    s = np.atleast_2d(as_tensor(states))
    a = dac_actor(protocol, params)(s)
    g = dac_deviator(protocol, params)(s, a)
    truth = true_action_gradient(mdp, s, a)
    ng, nt = np.linalg.norm(g, axis=1), np.linalg.norm(truth, axis=1)
    keep = (ng > zero_tol) & (nt > zero_tol)
    cos = np.sum(g[keep] * truth[keep], axis=1) / (ng[keep] * nt[keep])
    mean = float(cos.mean()) if keep.any() else float("nan")
    regret = float(np.mean(-mdp.reward(s, a)))
    return AlignmentReport(mean, int(keep.sum()), int((~keep).sum()), regret)


# --------------------------------------------------------------------------
# semantics


def semantics_of(f, y, inputs, tol=0.0):
    """The sampled preimage of ``y`` under ``f``: inputs whose output lies within ``tol`` of y.

    ``y`` may also be a predicate on outputs, in which case the inputs whose
    output satisfies it are returned.
    """
    out = []
    for x in inputs:
        fx = f(x)
        if callable(y):
            hit = bool(y(fx))
        else:
            hit = float(np.max(np.abs(as_tensor(fx) - as_tensor(y)), initial=0.0)) <= tol
        if hit:
            out.append(x)
    return out
