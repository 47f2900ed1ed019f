"""Builders for the five grammars.

Each builder returns a validated :class:`Protocol`. Backprop and the VAE use
the derived chain-rule response unchanged; the GAN negates the Forger's
response; the actor-critic and Kickback protocols wire their response graphs
by hand because they deliberately deviate from the chain rule.
"""

from functools import partial

import numpy as np

from .errors import ConfigError, DomainError
from .graph import (
    CHAIN,
    CLONE,
    CONSTANT,
    NATURE,
    NEG,
    NOISE,
    OPERATOR,
    ORACLE,
    PLAYER,
    READ,
    Node,
    PlayerSpec,
    Protocol,
    QueryGraph,
    ResponseGraph,
    derive_chain_rule_response,
)
from .operators import ACTIVATIONS, decoder_param_count, get_kernel, mlp_param_count
from .players import gaussian_init, mlp_init, positive_uniform_init

B = "B"
LOSSES = ("mse", "logistic")
_LOSS_KERNEL = {"mse": "mse_loss", "logistic": "logistic_loss"}


def _check_widths(widths, what, min_len=1):
    widths = [int(w) for w in widths]
    if len(widths) < min_len or any(w <= 0 for w in widths):
        raise ConfigError(f"{what} must be {min_len}+ positive integers, got {widths}")
    return widths


def _player(name, shape, init, **kw):
    return Node(name, PLAYER, attrs={"shape": tuple(shape)}), PlayerSpec(name, tuple(shape), init, **kw)


def _layer_players(widths, input_dim, init_fn, prefix="theta"):
    nodes, specs = [], []
    fan_in = input_dim
    for i, w in enumerate(widths, start=1):
        n, s = _player(f"{prefix}{i}", (w, fan_in), partial(_matrix_init, init_fn, (w, fan_in)))
        nodes.append(n)
        specs.append(s)
        fan_in = w
    return nodes, specs


def _matrix_init(fn, shape, rng):
    return fn(shape, shape[1], rng)


def _zeros_init(shape, rng):
    return np.zeros(shape)


def _mlp_player_init(widths, bias, rng):
    return mlp_init(widths, rng, bias)


def _finish(name, query, response, players, batch_size, **kw):
    proto = Protocol(name, query, response, tuple(players), batch_size=int(batch_size), **kw)
    return proto.require_valid()


# --------------------------------------------------------------------------
# backprop


def build_backprop(
    widths,
    loss="mse",
    input_dim=None,
    activation="relu",
    output_activation="identity",
    batch_size=32,
) -> Protocol:
    """Layered network trained by error backpropagation.

    ``widths`` lists each layer's output width; the input width defaults to
    ``widths[0]``. Layer i computes ``act(theta_i . S_{i-1})``.
    """
    widths = _check_widths(widths, "widths")
    input_dim = widths[0] if input_dim is None else int(input_dim)
    if loss not in LOSSES:
        raise ConfigError(f"loss must be one of {LOSSES}, got {loss!r}")
    for a in (activation, output_activation):
        if a not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {a!r}")
    nodes, specs = _layer_players(widths, input_dim, gaussian_init)
    nodes.append(Node("nature", NATURE, attrs={"ports": [("x", (B, input_dim)), ("y", (B, widths[-1]))]}))
    prev = ("nature", 0)
    for i in range(1, len(widths) + 1):
        act = output_activation if i == len(widths) else activation
        nodes.append(Node(f"S{i}", OPERATOR, "layer", ((f"theta{i}", 0), prev), {"act": act}))
        prev = (f"S{i}", 0)
    nodes.append(Node("loss", OPERATOR, _LOSS_KERNEL[loss], (prev, ("nature", 1)), {"reduce": "mean"}))
    query = QueryGraph(tuple(nodes), ("loss", 0))
    return _finish("backprop", query, derive_chain_rule_response(query), specs, batch_size)


# --------------------------------------------------------------------------
# variational autoencoder


def build_vae(
    encoder_widths,
    decoder_widths,
    latent_dim,
    encoder_act="tanh",
    decoder_act="tanh",
    noise_std=1.0,
    prior_std=1.0,
    batch_size=32,
) -> Protocol:
    """Encoder G_phi(eps, x) and decoder density D_theta(z, x), objective L1 + L2.

    ``encoder_widths`` runs from the data dimension to ``2 * latent_dim``
    (mean and log-scale); ``decoder_widths`` from ``latent_dim`` back to the
    data dimension. The decoder carries one extra parameter, its log-stddev.
    """
    enc = _check_widths(encoder_widths, "encoder widths", 2)
    dec = _check_widths(decoder_widths, "decoder widths", 2)
    dz = int(latent_dim)
    if enc[-1] != 2 * dz:
        raise ConfigError(f"encoder must end in 2 * latent_dim = {2 * dz} outputs, got {enc[-1]}")
    if dec[0] != dz or dec[-1] != enc[0]:
        raise ConfigError(f"decoder widths {dec} must run from latent dim {dz} to data dim {enc[0]}")
    if noise_std <= 0 or prior_std <= 0:
        raise ConfigError("noise_std and prior_std must be positive")
    dx = enc[0]
    enc_attrs = {"widths": tuple(enc), "act": encoder_act}
    dec_attrs = {"widths": tuple(dec), "act": decoder_act}
    phi_n, phi_s = _player("phi", (mlp_param_count(enc),), partial(_mlp_player_init, enc, True))
    theta_n, theta_s = _player("theta", (decoder_param_count(dec),), partial(_decoder_init, dec))
    nodes = [
        phi_n,
        theta_n,
        Node("nature", NATURE, attrs={"ports": [("x", (B, dx))]}),
        Node("eps", NOISE, attrs={"shape": (B, dz), "std": float(noise_std)}),
        Node("G", OPERATOR, "reparam_encoder", (("phi", 0), ("eps", 0), ("nature", 0)), enc_attrs),
        Node("D", OPERATOR, "gaussian_decoder", (("theta", 0), ("G", 0), ("nature", 0)), dec_attrs),
        Node(
            "L",
            OPERATOR,
            "vlb_terms",
            (("eps", 0), ("G", 0), ("G", 1), ("D", 0)),
            {"noise_std": float(noise_std), "prior_std": float(prior_std), "reduce": "mean"},
        ),
        Node("objective", OPERATOR, "add", (("L", 0), ("L", 1))),
    ]
    query = QueryGraph(tuple(nodes), ("objective", 0), monitors=(("L", 0), ("L", 1)))
    meta = {"latent_dim": dz, "data_dim": dx, "noise_std": float(noise_std), "prior_std": float(prior_std)}
    return _finish("vae", query, derive_chain_rule_response(query), [phi_s, theta_s], batch_size, meta=meta)


def _decoder_init(widths, rng):
    return np.concatenate([mlp_init(widths, rng), [0.0]])


# --------------------------------------------------------------------------
# generative adversarial game


def build_gan(
    generator_widths=None,
    curator_widths=None,
    noise_dim=1,
    generator="mlp",
    curator="mlp",
    support=None,
    generator_act="tanh",
    curator_act="tanh",
    batch_size=32,
) -> Protocol:
    """Forger G_theta(eps) against Curator D_phi(x), objective log D(x) + log(1 - D(G(eps))).

    ``generator='categorical'`` makes the Forger a softmax over the finite
    ``support`` sampled by inverse CDF; ``curator='pointwise'`` gives the
    Curator one logit per support point. The Curator ascends the objective and
    receives the chain-rule response; the Forger receives the negated
    chain-rule response and also ascends it, i.e. it descends the objective.
    """
    if generator not in ("mlp", "categorical") or curator not in ("mlp", "pointwise"):
        raise ConfigError(f"unknown generator/curator kind {generator!r}/{curator!r}")
    if (generator == "categorical" or curator == "pointwise") and not support:
        raise ConfigError("a finite support is required for categorical/pointwise players")
    noise_dim = int(noise_dim)
    if support is not None:
        support = [list(np.atleast_1d(np.asarray(p, dtype=float))) for p in support]
        data_dim = len(support[0])
    if generator == "mlp":
        gw = _check_widths(generator_widths, "generator widths", 2)
        if gw[0] != noise_dim:
            raise ConfigError(f"generator widths must start at noise_dim {noise_dim}")
        data_dim = gw[-1]
        g_attrs = {"widths": tuple(gw), "act": generator_act}
        theta_n, theta_s = _player(
            "theta", (mlp_param_count(gw),), partial(_mlp_player_init, gw, True), maximize=True, objective_sign=-1.0
        )
        fake = Node("fake", OPERATOR, "mlp", (("theta", 0), ("eps", 0)), g_attrs)
    else:
        if noise_dim != 1:
            raise ConfigError("the categorical Forger uses a single noise coordinate")
        k = len(support)
        theta_n, theta_s = _player("theta", (k,), partial(_zeros_init, k), maximize=True, objective_sign=-1.0)
        fake = Node("fake", OPERATOR, "categorical_sampler", (("theta", 0), ("eps", 0)), {"support": support})
    if curator == "mlp":
        cw = _check_widths(curator_widths, "curator widths", 2)
        if cw[-1] != 1 or cw[0] != data_dim:
            raise ConfigError(f"curator widths must run from data dim {data_dim} to 1, got {cw}")
        c_attrs = {"widths": tuple(cw), "act": curator_act, "out_act": "sigmoid"}
        phi_n, phi_s = _player("phi", (mlp_param_count(cw),), partial(_mlp_player_init, cw, True), maximize=True)
        feat = []
        real_in, fake_in = ("nature", 0), ("fake", 0)
    else:
        k = len(support)
        c_attrs = {"widths": (k, 1), "bias": False, "out_act": "sigmoid"}
        phi_n, phi_s = _player("phi", (k,), partial(_zeros_init, k), maximize=True)
        feat = [
            Node("onehot_real", OPERATOR, "onehot", (("nature", 0),), {"support": support}),
            Node("onehot_fake", OPERATOR, "onehot", (("fake", 0),), {"support": support}),
        ]
        real_in, fake_in = ("onehot_real", 0), ("onehot_fake", 0)
    nodes = [
        theta_n,
        phi_n,
        Node("nature", NATURE, attrs={"ports": [("x", (B, data_dim))]}),
        Node("eps", NOISE, attrs={"shape": (B, noise_dim), "std": 1.0}),
        fake,
        *feat,
        Node("D_real", OPERATOR, "mlp", (("phi", 0), real_in), c_attrs),
        Node("D_fake", OPERATOR, "mlp", (("phi", 0), fake_in), c_attrs),
        Node("L", OPERATOR, "gan_losses", (("D_real", 0), ("D_fake", 0)), {"reduce": "mean"}),
        Node("objective", OPERATOR, "add", (("L", 0), ("L", 1))),
    ]
    query = QueryGraph(tuple(nodes), ("objective", 0), monitors=(("L", 0), ("L", 1)))
    derived = derive_chain_rule_response(query)
    neg = Node("neg[theta]", NEG, inputs=(derived.outputs["theta"],))
    response = derived.with_changes(add=[neg], outputs={"theta": ("neg[theta]", 0)})
    meta = {"support": support, "generator": generator, "curator": curator}
    return _finish("gan", query, response, [theta_s, phi_s], batch_size, meta=meta)


# --------------------------------------------------------------------------
# deviator-actor-critic


def build_dac(
    actor_widths,
    critic_widths,
    deviator_widths,
    gamma=0.0,
    sigma=0.3,
    clone_period=100,
    actor_act="tanh",
    critic_act="tanh",
    deviator_act="tanh",
    batch_size=32,
) -> Protocol:
    """Actor mu_theta(s), Critic Q_V(s, a), Deviator G_W(s, a) with the Bellman gradient error.

    Q and G are evaluated at ``(s, mu(s))``; the environment executes
    ``mu(s) + eps`` with ``eps ~ N(0, sigma^2 I)``. Critic and Deviator get the
    chain-rule response of the BGE. The Actor gets ``(d mu / d theta) . G``,
    where G is the Deviator's traced output, not a derivative of anything.
    """
    aw = _check_widths(actor_widths, "actor widths", 2)
    cw = _check_widths(critic_widths, "critic widths", 2)
    dw = _check_widths(deviator_widths, "deviator widths", 2)
    ds, da = aw[0], aw[-1]
    if cw[0] != ds + da or cw[-1] != 1:
        raise ConfigError(f"critic widths must run from {ds + da} to 1, got {cw}")
    if dw[0] != ds + da or dw[-1] != da:
        raise ConfigError(f"deviator widths must run from {ds + da} to the action dim {da}, got {dw}")
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    if not 0.0 <= gamma < 1.0:
        raise DomainError(f"gamma must lie in [0, 1), got {gamma}")
    a_attrs = {"widths": tuple(aw), "act": actor_act}
    c_attrs = {"widths": tuple(cw), "act": critic_act}
    d_attrs = {"widths": tuple(dw), "act": deviator_act}
    theta_n, theta_s = _player("theta", (mlp_param_count(aw),), partial(_mlp_player_init, aw, True), maximize=True, exact=False)
    v_n, v_s = _player("V", (mlp_param_count(cw),), partial(_mlp_player_init, cw, True))
    w_n, w_s = _player("W", (mlp_param_count(dw),), partial(_mlp_player_init, dw, True))
    nodes = [
        theta_n,
        v_n,
        w_n,
        Node("nature", NATURE, attrs={"ports": [("s", (B, ds)), ("r", (B, 1)), ("s_next", (B, ds))]}),
        Node("eps", NOISE, attrs={"shape": (B, da), "std": float(sigma)}),
        Node("V_clone", CLONE, attrs={"source": "V", "shape": v_s.shape}),
        Node("mu", OPERATOR, "mlp", (("theta", 0), ("nature", 0)), a_attrs),
        Node("sa", OPERATOR, "concat", (("nature", 0), ("mu", 0))),
        Node("Q", OPERATOR, "mlp", (("V", 0), ("sa", 0)), c_attrs),
        Node("G", OPERATOR, "mlp", (("W", 0), ("sa", 0)), d_attrs),
        Node("mu_next", OPERATOR, "mlp", (("theta", 0), ("nature", 2)), a_attrs),
        Node("sa_next", OPERATOR, "concat", (("nature", 2), ("mu_next", 0))),
        Node("Q_next", OPERATOR, "mlp", (("V_clone", 0), ("sa_next", 0)), c_attrs),
        Node(
            "bge",
            OPERATOR,
            "bellman_gradient_error",
            (("nature", 1), ("Q_next", 0), ("Q", 0), ("G", 0), ("eps", 0)),
            {"gamma": float(gamma), "reduce": "mean"},
        ),
    ]
    query = QueryGraph(tuple(nodes), ("bge", 0), monitors=(("Q", 0),))
    r_nodes = [
        Node("seed", CONSTANT, value=np.asarray(1.0)),
        Node("oracle[bge]", ORACLE, attrs={"target": "bge"}),
        Node("*[bge]", CHAIN, inputs=(("oracle[bge]", 0), ("seed", 0)), attrs={"ports": (0,), "wrt": (2, 3)}),
        Node("oracle[Q]", ORACLE, attrs={"target": "Q"}),
        Node("*[Q]", CHAIN, inputs=(("oracle[Q]", 0), ("*[bge]", 0)), attrs={"ports": (0,), "wrt": (0,)}),
        Node("oracle[G]", ORACLE, attrs={"target": "G"}),
        Node("*[G]", CHAIN, inputs=(("oracle[G]", 0), ("*[bge]", 1)), attrs={"ports": (0,), "wrt": (0,)}),
        Node("read[G]", READ, attrs={"target": ("G", 0)}),
        Node("G_hat", OPERATOR, "batch_average", (("read[G]", 0),)),
        Node("oracle[mu]", ORACLE, attrs={"target": "mu"}),
        Node("*[mu]", CHAIN, inputs=(("oracle[mu]", 0), ("G_hat", 0)), attrs={"ports": (0,), "wrt": (0,)}),
    ]
    response = ResponseGraph(tuple(r_nodes), {"theta": ("*[mu]", 0), "V": ("*[Q]", 0), "W": ("*[G]", 0)})
    meta = {"policy": _dac_policy, "state_dim": ds, "action_dim": da, "gamma": float(gamma), "sigma": float(sigma)}
    return _finish(
        "dac", query, response, [theta_s, v_s, w_s], batch_size, clone_period=int(clone_period), meta=meta
    )


def _dac_policy(protocol, params):
    spec, attrs = get_kernel("mlp"), protocol.query.node("mu").attrs
    theta = params["theta"]
    return lambda s: spec.forward(attrs, theta, np.asarray(s, dtype=float))[0]


def dac_actor(protocol, params):
    """The deterministic policy ``s -> mu_theta(s)``."""
    return _dac_policy(protocol, params)


def dac_deviator(protocol, params):
    """``(s, a) -> G_W(s, a)``."""
    spec, attrs = get_kernel("mlp"), protocol.query.node("G").attrs
    w = params["W"]
    return lambda s, a: spec.forward(attrs, w, np.concatenate([s, a], axis=-1))[0]


# --------------------------------------------------------------------------
# kickback


def build_kickback(widths, loss="mse", input_dim=None, batch_size=32) -> Protocol:
    """Rectifier network whose layers learn from one broadcast scalar.

    Layer i emits ``(S_i, tau_{i-1}, 1_{S_i})``. The response has a single
    oracle, on the loss, giving ``beta = dL/dS_L``. Layer i receives
    ``beta * Kick_i`` with ``Kick_i = S_{i-1} (x) (1_{S_i} * tau_i)`` built from
    traced values only; the top layer uses ``tau_L = 1``.
    """
    widths = _check_widths(widths, "widths")
    if widths[-1] != 1:
        raise ConfigError(f"kickback output must be one-dimensional, got width {widths[-1]}")
    if loss not in LOSSES:
        raise ConfigError(f"loss must be one of {LOSSES}, got {loss!r}")
    input_dim = widths[0] if input_dim is None else int(input_dim)
    n_layers = len(widths)
    nodes, specs = _layer_players(widths, input_dim, positive_uniform_init)
    specs = [
        PlayerSpec(s.name, s.shape, s.init, exact=(i == n_layers - 1)) for i, s in enumerate(specs)
    ]
    nodes.append(Node("nature", NATURE, attrs={"ports": [("x", (B, input_dim)), ("y", (B, 1))]}))
    prev = ("nature", 0)
    for i in range(1, n_layers + 1):
        nodes.append(Node(f"L{i}", OPERATOR, "rectifier_layer", ((f"theta{i}", 0), prev)))
        prev = (f"L{i}", 0)
    nodes.append(Node("loss", OPERATOR, _LOSS_KERNEL[loss], (prev, ("nature", 1)), {"reduce": "mean"}))
    query = QueryGraph(tuple(nodes), ("loss", 0))

    r_nodes = [
        Node("seed", CONSTANT, value=np.asarray(1.0)),
        Node("oracle[loss]", ORACLE, attrs={"target": "loss"}),
        Node("beta", CHAIN, inputs=(("oracle[loss]", 0), ("seed", 0)), attrs={"ports": (0,), "wrt": (0,)}),
    ]
    outputs = {}
    for i in range(1, n_layers + 1):
        s_prev = ("nature", 0) if i == 1 else (f"L{i - 1}", 0)
        r_nodes.append(Node(f"S_prev[{i}]", READ, attrs={"target": s_prev}))
        r_nodes.append(Node(f"active[{i}]", READ, attrs={"target": (f"L{i}", 2)}))
        if i < n_layers:
            r_nodes.append(Node(f"tau[{i}]", READ, attrs={"target": (f"L{i + 1}", 1)}))
        else:
            r_nodes.append(Node(f"tau[{i}]", OPERATOR, "ones_like", ((f"active[{i}]", 0),)))
        r_nodes.append(
            Node(f"kick[{i}]", OPERATOR, "kick", ((f"S_prev[{i}]", 0), (f"active[{i}]", 0), (f"tau[{i}]", 0)))
        )
        r_nodes.append(Node(f"beta*kick[{i}]", OPERATOR, "kick_scale", (("beta", 0), (f"kick[{i}]", 0))))
        outputs[f"theta{i}"] = (f"beta*kick[{i}]", 0)
    response = ResponseGraph(tuple(r_nodes), outputs)
    return _finish("kickback", query, response, specs, batch_size, meta={"layers": n_layers})


def kickback_coherence(trace, n_layers) -> bool:
    """True when every hidden feedback signal tau_j is strictly positive in this trace."""
    return all(np.all(trace[(f"L{i + 1}", 1)] > 0) for i in range(1, n_layers))


BUILDERS = {
    "backprop": build_backprop,
    "vae": build_vae,
    "gan": build_gan,
    "dac": build_dac,
    "kickback": build_kickback,
}


def build_protocol(name: str, settings: dict) -> Protocol:
    """Build a protocol by grammar name from keyword settings (as read from a config)."""
    if name not in BUILDERS:
        raise ConfigError(f"unknown protocol {name!r}; expected one of {sorted(BUILDERS)}")
    try:
        return BUILDERS[name](**settings)
    except TypeError as exc:
        raise ConfigError(f"bad settings for {name}: {exc}") from None
