"""Kernel library: forward functions and their vector-Jacobian products.

Every kernel is registered under a tag so graphs (and config files) can refer
to it by name. Kernels are batch-agnostic: a leading batch axis passes through
unchanged, and per-sample scalars carry a trailing axis of length one. Loss
kernels take ``reduce="mean"`` to average over every sample, which is how the
expectations in the objectives are realized.

Shapes seen by the shape-inference functions may start with the symbol ``"B"``
standing for the (runtime) batch size.
"""

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit, ndtr

from .errors import DomainError, ShapeError
from .tensor import LOG_2PI, as_tensor, elementwise, heaviside, outer_product

BATCH = "B"
PROB_FLOOR = 1e-7

Shape = tuple


@dataclass(frozen=True)
class KernelSpec:
    """A registered operator.

    ``forward(attrs, *inputs)`` returns a tuple of outputs. ``vjp(attrs, inputs,
    outputs, out_grads)`` returns one gradient (or None) per input, where
    ``out_grads`` holds one cotangent (or None) per output. Inputs listed in
    ``nondiff`` are treated as constants by the chain-rule derivation.
    """

    tag: str
    arity: int
    forward: Callable
    shape: Callable
    vjp: Callable | None = None
    nondiff: frozenset = frozenset()
    kink: Callable | None = None
    example: Callable | None = None
    doc: str = ""

    @property
    def differentiable(self) -> bool:
        return self.vjp is not None


KERNELS: dict[str, KernelSpec] = {}


def register(spec: KernelSpec) -> KernelSpec:
    if spec.tag in KERNELS:
        raise ValueError(f"kernel {spec.tag!r} already registered")
    KERNELS[spec.tag] = spec
    return spec


def get_kernel(tag: str) -> KernelSpec:
    try:
        return KERNELS[tag]
    except KeyError:
        raise KeyError(f"unknown kernel {tag!r}") from None


# --------------------------------------------------------------------------
# shape helpers


def _is_batched(shape: Shape) -> bool:
    return len(shape) > 0 and shape[0] == BATCH


def _need(cond, msg):
    if not cond:
        raise ShapeError(msg)


def _same(*shapes, what="inputs"):
    _need(all(s == shapes[0] for s in shapes), f"{what}: shapes differ {list(shapes)}")
    return shapes[0]


def _sample_scalar(shape: Shape) -> Shape:
    return shape[:-1] + (1,)


def _reduced(shape: Shape, attrs) -> Shape:
    return () if attrs.get("reduce", "mean") == "mean" else shape


def _reduce(x, attrs):
    return np.asarray(x.mean()) if attrs.get("reduce", "mean") == "mean" else x


def _expand(g, like, attrs):
    """Undo ``_reduce`` for a cotangent."""
    if attrs.get("reduce", "mean") == "mean":
        return np.full(like.shape, float(g) / like.size)
    return g


def _flat2(x):
    return x.reshape(-1, x.shape[-1])


# --------------------------------------------------------------------------
# activations


def _sigmoid_clamped(z):
    return np.clip(expit(z), PROB_FLOOR, 1.0 - PROB_FLOOR)


def _sigmoid_grad(z, a):
    s = expit(z)
    inside = (s > PROB_FLOOR) & (s < 1.0 - PROB_FLOOR)
    return s * (1.0 - s) * inside


ACTIVATIONS = {
    "identity": (lambda z: z, lambda z, a: np.ones_like(z)),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: heaviside(z)),
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "sigmoid": (_sigmoid_clamped, _sigmoid_grad),
}


def _check_act(name):
    if name not in ACTIVATIONS:
        raise ValueError(f"unknown activation {name!r}; expected one of {sorted(ACTIVATIONS)}")


# --------------------------------------------------------------------------
# elementwise family


def _unary(tag, fwd, dfwd, example_low=-2.0, example_high=2.0, doc="", kink=None, example_attrs=None):
    def shape(attrs, s):
        return (s,)

    def forward(attrs, x):
        return (fwd(attrs, x),)

    def vjp(attrs, inputs, outputs, out_grads):
        (g,) = out_grads
        return (g * dfwd(attrs, inputs[0], outputs[0]),)

    def example(rng):
        return dict(example_attrs or {}), (rng.uniform(example_low, example_high, size=(3, 2)),)

    spec = KernelSpec(tag, 1, forward, shape, vjp if dfwd else None, kink=kink, example=example, doc=doc)
    return register(spec)


_unary("identity", lambda a, x: x, lambda a, x, y: np.ones_like(x), doc="Pass-through.")
_unary("negate", lambda a, x: elementwise("negate", x), lambda a, x, y: -np.ones_like(x))
_unary("scale", lambda a, x: elementwise("scale", x, c=a["c"]), lambda a, x, y: np.full_like(x, a["c"]), example_attrs={"c": -1.5})
_unary(
    "relu",
    lambda a, x: elementwise("relu", x),
    lambda a, x, y: heaviside(x),
    kink=lambda attrs, x: float(np.min(np.abs(x))) if x.size else np.inf,
)
_unary("heaviside", lambda a, x: elementwise("heaviside", x), lambda a, x, y: np.zeros_like(x))
_unary("exp", lambda a, x: elementwise("exp", x), lambda a, x, y: y)
_unary("log", lambda a, x: elementwise("log", x), lambda a, x, y: 1.0 / x, 0.2, 3.0)
_unary("tanh", lambda a, x: np.tanh(x), lambda a, x, y: 1.0 - y * y)
_unary("sigmoid", lambda a, x: _sigmoid_clamped(x), lambda a, x, y: _sigmoid_grad(x, y))
_unary(
    "ones_like",
    lambda a, x: np.ones_like(x),
    None,
    doc="Constant ones with the shape of the input; used for the top-layer feedback signal.",
)


def _binary_shape(attrs, a, b):
    return (_same(a, b, what="elementwise"),)


register(
    KernelSpec(
        "add",
        2,
        lambda attrs, a, b: (elementwise("add", a, b),),
        _binary_shape,
        lambda attrs, ins, outs, gs: (gs[0], gs[0]),
        example=lambda rng: ({}, (rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))),
    )
)
register(
    KernelSpec(
        "hadamard",
        2,
        lambda attrs, a, b: (elementwise("hadamard", a, b),),
        _binary_shape,
        lambda attrs, ins, outs, gs: (gs[0] * ins[1], gs[0] * ins[0]),
        example=lambda rng: ({}, (rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))),
    )
)


def _concat_shape(attrs, a, b):
    _need(a[:-1] == b[:-1], f"concat: leading dims differ {a} vs {b}")
    return (a[:-1] + (a[-1] + b[-1],),)


def _concat_vjp(attrs, ins, outs, gs):
    n = ins[0].shape[-1]
    return (gs[0][..., :n], gs[0][..., n:])


register(
    KernelSpec(
        "concat",
        2,
        lambda attrs, a, b: (np.concatenate([a, b], axis=-1),),
        _concat_shape,
        _concat_vjp,
        example=lambda rng: ({}, (rng.normal(size=(4, 2)), rng.normal(size=(4, 3)))),
    )
)


def _mean_shape(attrs, s):
    _need(len(s) >= 1, f"mean expects a batched input, got {s}")
    return (s[1:],)


register(
    KernelSpec(
        "mean",
        1,
        lambda attrs, x: (x.mean(axis=0),),
        _mean_shape,
        lambda attrs, ins, outs, gs: (np.broadcast_to(gs[0] / ins[0].shape[0], ins[0].shape).copy(),),
        example=lambda rng: ({}, (rng.normal(size=(5, 2)),)),
        doc="Average over the leading batch axis.",
    )
)
register(
    KernelSpec(
        "sum",
        1,
        lambda attrs, x: (np.asarray(x.sum()),),
        lambda attrs, s: ((),),
        lambda attrs, ins, outs, gs: (np.full(ins[0].shape, float(gs[0])),),
        example=lambda rng: ({}, (rng.normal(size=(3, 2)),)),
    )
)
register(
    KernelSpec(
        "batch_average",
        1,
        lambda attrs, x: (x / x.shape[0],),
        lambda attrs, s: (s,),
        doc="Divide by the batch size; turns a per-sample signal into its share of a batch mean.",
    )
)


# --------------------------------------------------------------------------
# affine maps and layers


def affine(theta, s):
    """``theta @ s`` for a weight matrix and a vector (or a batch of row vectors)."""
    theta, s = as_tensor(theta), as_tensor(s)
    _affine_shape({}, theta.shape, s.shape)
    return s @ theta.T


def _affine_shape(attrs, t, s):
    _need(len(t) == 2, f"affine weights must be a matrix, got shape {t}")
    _need(len(s) >= 1 and s[-1] == t[1], f"affine: weights {t} do not conform with input {s}")
    return (s[:-1] + (t[0],),)


def _affine_vjp(attrs, ins, outs, gs):
    theta, s = ins
    g = gs[0]
    return (_flat2(g).T @ _flat2(s), g @ theta)


def _affine_example(rng):
    return {}, (rng.normal(size=(3, 4)), rng.normal(size=(5, 4)))


register(KernelSpec("affine", 2, lambda a, t, s: (affine(t, s),), _affine_shape, _affine_vjp, example=_affine_example))


def _layer_forward(attrs, theta, s):
    fwd, _ = ACTIVATIONS[attrs.get("act", "relu")]
    return (fwd(s @ theta.T),)


def _layer_vjp(attrs, ins, outs, gs):
    theta, s = ins
    pre = s @ theta.T
    _, dact = ACTIVATIONS[attrs.get("act", "relu")]
    gpre = gs[0] * dact(pre, outs[0])
    return _affine_vjp(attrs, ins, None, (gpre,))


def _layer_kink(attrs, theta, s):
    if attrs.get("act", "relu") != "relu":
        return np.inf
    return float(np.min(np.abs(s @ theta.T)))


register(
    KernelSpec(
        "layer",
        2,
        _layer_forward,
        _affine_shape,
        _layer_vjp,
        kink=_layer_kink,
        example=lambda rng: ({"act": "tanh"}, (rng.normal(size=(3, 4)), rng.normal(size=(5, 4)))),
        doc="act(theta . s): one layer S_i(theta_i . S_{i-1}).",
    )
)


def rectifier_layer(theta, s):
    """Return ``(S_out, tau_out)`` of a rectifier layer.

    ``S_out = max(0, theta . s)`` and ``tau_out = theta^T . 1[theta . s >= 0]``.
    """
    out, tau, _ = _rectifier_forward({}, as_tensor(theta), as_tensor(s))
    return out, tau


def _rectifier_forward(attrs, theta, s):
    pre = s @ theta.T
    active = heaviside(pre)
    return np.maximum(pre, 0.0), active @ theta, active


def _rectifier_shape(attrs, t, s):
    (out,) = _affine_shape(attrs, t, s)
    return out, s, out


def _rectifier_vjp(attrs, ins, outs, gs):
    theta, s = ins
    g_out, g_tau, _ = gs
    active = outs[2]
    g_theta = np.zeros_like(theta)
    g_s = np.zeros_like(s)
    if g_out is not None:
        gpre = g_out * active
        g_theta += _flat2(gpre).T @ _flat2(s)
        g_s += gpre @ theta
    if g_tau is not None:
        # tau is linear in theta; the indicator is piecewise constant
        g_theta += _flat2(active).T @ _flat2(g_tau)
    return g_theta, g_s


def _rectifier_kink(attrs, theta, s):
    return float(np.min(np.abs(s @ theta.T)))


register(
    KernelSpec(
        "rectifier_layer",
        2,
        _rectifier_forward,
        _rectifier_shape,
        _rectifier_vjp,
        kink=_rectifier_kink,
        example=lambda rng: ({}, (rng.normal(size=(3, 4)), rng.normal(size=(5, 4)))),
        doc="Outputs (S, tau, active): activation, feedback signal and active-unit indicator.",
    )
)


# --------------------------------------------------------------------------
# multilayer perceptrons packed into one flat parameter vector


def mlp_param_count(widths, bias=True) -> int:
    return sum(a * b + (b if bias else 0) for a, b in zip(widths[:-1], widths[1:]))


def mlp_layers(params, widths, bias=True):
    """Split a flat parameter vector into ``[(W, b), ...]`` views (b may be None)."""
    layers, i = [], 0
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        w = params[i : i + n_in * n_out].reshape(n_out, n_in)
        i += n_in * n_out
        b = None
        if bias:
            b = params[i : i + n_out]
            i += n_out
        layers.append((w, b))
    return layers


def _mlp_run(params, x, attrs):
    widths, bias = attrs["widths"], attrs.get("bias", True)
    act, out_act = attrs.get("act", "tanh"), attrs.get("out_act", "identity")
    layers = mlp_layers(params, widths, bias)
    cache, h = [], x
    for k, (w, b) in enumerate(layers):
        z = h @ w.T
        if b is not None:
            z = z + b
        a = ACTIVATIONS[out_act if k == len(layers) - 1 else act][0](z)
        cache.append((h, z, a))
        h = a
    return h, cache


def _mlp_back(params, cache, g, attrs):
    widths, bias = attrs["widths"], attrs.get("bias", True)
    act, out_act = attrs.get("act", "tanh"), attrs.get("out_act", "identity")
    layers = mlp_layers(params, widths, bias)
    pieces = []
    for k in range(len(layers) - 1, -1, -1):
        w, b = layers[k]
        h, z, a = cache[k]
        gz = g * ACTIVATIONS[out_act if k == len(layers) - 1 else act][1](z, a)
        piece = [(_flat2(gz).T @ _flat2(h)).ravel()]
        if b is not None:
            piece.append(_flat2(gz).sum(axis=0))
        pieces.append(piece)
        g = gz @ w
    flat = [p for piece in reversed(pieces) for p in piece]
    return np.concatenate(flat), g


def _mlp_shape(attrs, p, x):
    widths = attrs["widths"]
    _need(len(widths) >= 2, f"mlp needs at least two widths, got {widths}")
    n = mlp_param_count(widths, attrs.get("bias", True))
    _need(p == (n,), f"mlp{list(widths)} expects {n} parameters, got shape {p}")
    _need(len(x) >= 1 and x[-1] == widths[0], f"mlp{list(widths)} input has shape {x}")
    return (x[:-1] + (widths[-1],),)


def _mlp_vjp(attrs, ins, outs, gs):
    params, x = ins
    _, cache = _mlp_run(params, x, attrs)
    return _mlp_back(params, cache, gs[0], attrs)


def _mlp_kink(attrs, params, x):
    acts = [attrs.get("act", "tanh")] * (len(attrs["widths"]) - 2) + [attrs.get("out_act", "identity")]
    _, cache = _mlp_run(params, x, attrs)
    m = [np.min(np.abs(z)) for (h, z, a), f in zip(cache, acts) if f == "relu" and z.size]
    return float(min(m)) if m else np.inf


def _mlp_example(rng):
    attrs = {"widths": (3, 4, 2), "act": "tanh", "out_act": "sigmoid"}
    return attrs, (rng.normal(size=mlp_param_count(attrs["widths"])), rng.normal(size=(5, 3)))


register(
    KernelSpec(
        "mlp",
        2,
        lambda attrs, p, x: (_mlp_run(p, x, attrs)[0],),
        _mlp_shape,
        _mlp_vjp,
        kink=_mlp_kink,
        example=_mlp_example,
        doc="Fully connected network whose weights (and biases) are one flat parameter vector.",
    )
)


# --------------------------------------------------------------------------
# variational autoencoder pieces


def _encoder_forward(attrs, phi, eps, x):
    dz = eps.shape[-1]
    h, _ = _mlp_run(phi, x, attrs)
    mean, log_scale = h[..., :dz], h[..., dz:]
    z = mean + np.exp(log_scale) * eps
    return z, log_scale.sum(axis=-1, keepdims=True)


def _encoder_shape(attrs, p, eps, x):
    (h,) = _mlp_shape(attrs, p, x)
    _need(h[-1] == 2 * eps[-1], f"encoder output width {h[-1]} must be twice the noise width {eps[-1]}")
    _need(h[:-1] == eps[:-1], f"encoder: noise {eps} and data {x} disagree on batch dims")
    return eps, _sample_scalar(eps)


def _encoder_vjp(attrs, ins, outs, gs):
    phi, eps, x = ins
    g_z, g_logdet = gs
    dz = eps.shape[-1]
    h, cache = _mlp_run(phi, x, attrs)
    scale = np.exp(h[..., dz:])
    g_z = np.zeros_like(eps) if g_z is None else g_z
    g_h = np.concatenate([g_z, g_z * eps * scale], axis=-1)
    if g_logdet is not None:
        g_h[..., dz:] += g_logdet
    g_phi, g_x = _mlp_back(phi, cache, g_h, attrs)
    return g_phi, g_z * scale, g_x


def _encoder_example(rng):
    attrs = {"widths": (2, 3, 2), "act": "tanh"}
    return attrs, (
        0.5 * rng.normal(size=mlp_param_count(attrs["widths"])),
        rng.normal(size=(4, 1)),
        rng.normal(size=(4, 2)),
    )


register(
    KernelSpec(
        "reparam_encoder",
        3,
        _encoder_forward,
        _encoder_shape,
        _encoder_vjp,
        example=_encoder_example,
        doc="z = m(x) + exp(l(x)) * eps with (m, l) from an mlp; also emits log|dz/deps|.",
    )
)


def decoder_param_count(widths) -> int:
    return mlp_param_count(widths) + 1


def _decoder_parts(theta, z, x, attrs):
    mean, cache = _mlp_run(theta[:-1], z, attrs)
    log_std = theta[-1]
    r = (x - mean) / np.exp(log_std)
    d = x.shape[-1]
    logp = -0.5 * np.sum(r * r, axis=-1, keepdims=True) - d * (log_std + 0.5 * LOG_2PI)
    return mean, cache, r, logp


def _decoder_forward(attrs, theta, z, x):
    return (np.exp(_decoder_parts(theta, z, x, attrs)[3]),)


def _decoder_shape(attrs, p, z, x):
    widths = attrs["widths"]
    n = decoder_param_count(widths)
    _need(p == (n,), f"gaussian_decoder{list(widths)} expects {n} parameters, got {p}")
    (mean,) = _mlp_shape(attrs, (n - 1,), z)
    _need(mean == x, f"decoder mean {mean} does not match data {x}")
    return (_sample_scalar(x),)


def _decoder_vjp(attrs, ins, outs, gs):
    theta, z, x = ins
    mean, cache, r, logp = _decoder_parts(theta, z, x, attrs)
    g_logp = gs[0] * outs[0]
    std = np.exp(theta[-1])
    g_mean = g_logp * r / std
    g_mlp, g_z = _mlp_back(theta[:-1], cache, g_mean, attrs)
    g_logstd = np.sum(g_logp * (np.sum(r * r, axis=-1, keepdims=True) - x.shape[-1]))
    return np.concatenate([g_mlp, [g_logstd]]), g_z, -g_mean


def _decoder_example(rng):
    attrs = {"widths": (1, 3, 2), "act": "tanh"}
    return attrs, (
        0.3 * rng.normal(size=decoder_param_count(attrs["widths"])),
        rng.normal(size=(4, 1)),
        0.5 * rng.normal(size=(4, 2)),
    )


register(
    KernelSpec(
        "gaussian_decoder",
        3,
        _decoder_forward,
        _decoder_shape,
        _decoder_vjp,
        example=_decoder_example,
        doc="Density of x under N(mlp(z), exp(2 * log_std) I); the last parameter is log_std.",
    )
)


def _log_normal(x, std):
    d = x.shape[-1]
    return -0.5 * np.sum((x / std) ** 2, axis=-1, keepdims=True) - d * (np.log(std) + 0.5 * LOG_2PI)


def vlb_terms(eps, x, g_out, decoder_density, log_det=0.0, noise_std=1.0, prior_std=1.0, reduce="mean"):
    """Single-sample terms of the negative variational lower bound.

    ``L1 = log P_noise(eps) - log|dG/deps| - log P_prior(G(eps, x))`` and
    ``L2 = -log D``. ``x`` enters only through ``g_out`` and the decoder
    density; it is accepted so batch dimensions can be checked. With the
    default ``log_det = 0`` the first term is the plain log-ratio of densities,
    which is only a valid bound for volume-preserving encoders.
    """
    eps, x, g_out, density = (as_tensor(v) for v in (eps, x, g_out, decoder_density))
    if x.shape[:-1] != eps.shape[:-1]:
        raise ShapeError(f"noise {eps.shape} and data {x.shape} disagree on batch dims")
    log_det = np.broadcast_to(as_tensor(log_det), _sample_scalar(eps.shape))
    density = np.broadcast_to(density, _sample_scalar(eps.shape))
    attrs = {"noise_std": noise_std, "prior_std": prior_std, "reduce": reduce}
    return _vlb_forward(attrs, eps, g_out, log_det, density)


def _vlb_forward(attrs, eps, z, log_det, density):
    if np.any(density <= 0):
        raise DomainError("decoder density must be positive")
    l1 = _log_normal(eps, attrs.get("noise_std", 1.0)) - log_det - _log_normal(z, attrs.get("prior_std", 1.0))
    l2 = -np.log(density)
    return _reduce(l1, attrs), _reduce(l2, attrs)


def _vlb_shape(attrs, eps, z, log_det, density):
    s = _sample_scalar(eps)
    _need(_sample_scalar(z) == s and log_det == s and density == s, f"vlb_terms: inconsistent shapes {eps}, {z}, {log_det}, {density}")
    return _reduced(s, attrs), _reduced(s, attrs)


def _vlb_vjp(attrs, ins, outs, gs):
    eps, z, log_det, density = ins
    g1, g2 = gs
    like = log_det
    g1 = np.zeros_like(like) if g1 is None else _expand(g1, like, attrs)
    g2 = np.zeros_like(like) if g2 is None else _expand(g2, like, attrs)
    ns, ps = attrs.get("noise_std", 1.0), attrs.get("prior_std", 1.0)
    return -g1 * eps / ns**2, g1 * z / ps**2, -g1, -g2 / density


def _vlb_example(rng):
    return {"reduce": "mean", "prior_std": 1.5}, (
        rng.normal(size=(4, 2)),
        rng.normal(size=(4, 2)),
        rng.normal(size=(4, 1)),
        rng.uniform(0.2, 2.0, size=(4, 1)),
    )


register(KernelSpec("vlb_terms", 4, _vlb_forward, _vlb_shape, _vlb_vjp, example=_vlb_example))


# --------------------------------------------------------------------------
# losses


def mse_loss(y_hat, y, reduce="mean"):
    return _mse_forward({"reduce": reduce}, as_tensor(y_hat), as_tensor(y))[0]


def _mse_forward(attrs, y_hat, y):
    d = y_hat - y
    return (_reduce(np.mean(d * d, axis=-1, keepdims=True), attrs),)


def _mse_shape(attrs, a, b):
    return (_reduced(_sample_scalar(_same(a, b, what="mse_loss")), attrs),)


def _mse_vjp(attrs, ins, outs, gs):
    y_hat, y = ins
    per = _expand(gs[0], np.empty(_sample_scalar(y_hat.shape)), attrs)
    g = per * 2.0 * (y_hat - y) / y_hat.shape[-1]
    return g, -g


def _pair_example(rng):
    return {"reduce": "mean"}, (rng.normal(size=(4, 2)), rng.normal(size=(4, 2)))


register(KernelSpec("mse_loss", 2, _mse_forward, _mse_shape, _mse_vjp, example=_pair_example))


def logistic_loss(y_hat, y, reduce="mean"):
    """``log(1 + exp(-y * y_hat))`` with labels in {-1, +1}."""
    return _logistic_forward({"reduce": reduce}, as_tensor(y_hat), as_tensor(y))[0]


def _logistic_forward(attrs, y_hat, y):
    return (_reduce(np.mean(np.logaddexp(0.0, -y * y_hat), axis=-1, keepdims=True), attrs),)


def _logistic_vjp(attrs, ins, outs, gs):
    y_hat, y = ins
    per = _expand(gs[0], np.empty(_sample_scalar(y_hat.shape)), attrs)
    s = expit(-y * y_hat)
    return per * (-y * s) / y_hat.shape[-1], per * (-y_hat * s) / y_hat.shape[-1]


def _logistic_example(rng):
    return {"reduce": "mean"}, (rng.normal(size=(4, 1)), rng.choice(2, size=(4, 1)) * 2.0 - 1.0)


register(
    KernelSpec(
        "logistic_loss",
        2,
        _logistic_forward,
        _mse_shape,
        _logistic_vjp,
        nondiff=frozenset({1}),
        example=_logistic_example,
    )
)


def neg_log_likelihood(q, reduce="mean"):
    return _nll_forward({"reduce": reduce}, as_tensor(q))[0]


def _nll_forward(attrs, q):
    if np.any(q <= 0):
        raise DomainError("neg_log_likelihood needs a positive density value")
    return (_reduce(-np.log(q), attrs),)


register(
    KernelSpec(
        "neg_log_likelihood",
        1,
        _nll_forward,
        lambda attrs, s: (_reduced(s, attrs),),
        lambda attrs, ins, outs, gs: (-_expand(gs[0], ins[0], attrs) / ins[0],),
        example=lambda rng: ({"reduce": "mean"}, (rng.uniform(0.2, 3.0, size=(4, 1)),)),
    )
)


def gan_losses(d_real, d_fake, reduce="mean"):
    """``(log D(x), log(1 - D(G(eps))))`` for curator outputs strictly inside (0, 1)."""
    return _gan_forward({"reduce": reduce}, as_tensor(d_real), as_tensor(d_fake))


def _gan_forward(attrs, d_real, d_fake):
    for name, d in (("d_real", d_real), ("d_fake", d_fake)):
        if np.any(d <= 0.0) or np.any(d >= 1.0):
            raise DomainError(f"{name} saturated: curator outputs must lie strictly inside (0, 1)")
    return _reduce(np.log(d_real), attrs), _reduce(np.log1p(-d_fake), attrs)


def _gan_shape(attrs, a, b):
    if attrs.get("reduce", "mean") != "mean":
        _same(a, b, what="gan_losses")
    return _reduced(a, attrs), _reduced(b, attrs)


def _gan_vjp(attrs, ins, outs, gs):
    d_real, d_fake = ins
    g_real = None if gs[0] is None else _expand(gs[0], d_real, attrs) / d_real
    g_fake = None if gs[1] is None else -_expand(gs[1], d_fake, attrs) / (1.0 - d_fake)
    return g_real, g_fake


register(
    KernelSpec(
        "gan_losses",
        2,
        _gan_forward,
        _gan_shape,
        _gan_vjp,
        example=lambda rng: ({"reduce": "mean"}, (rng.uniform(0.1, 0.9, (4, 1)), rng.uniform(0.1, 0.9, (4, 1)))),
    )
)


def _check_gamma(gamma):
    if not 0.0 <= gamma < 1.0:
        raise DomainError(f"discount gamma must lie in [0, 1), got {gamma}")


def bellman_error(r, q_next_cloned, q, gamma, reduce="mean"):
    """Squared TD error ``(r + gamma * q_next - q)^2``; ``q_next`` comes from the clone."""
    return _bellman_forward({"gamma": gamma, "reduce": reduce}, *(as_tensor(v) for v in (r, q_next_cloned, q)))[0]


def _bellman_forward(attrs, r, q_next, q):
    _check_gamma(attrs["gamma"])
    resid = r + attrs["gamma"] * q_next - q
    return (_reduce(resid * resid, attrs),)


def _bellman_shape(attrs, r, q_next, q):
    _check_gamma(attrs["gamma"])
    return (_reduced(_same(r, q_next, q, what="bellman_error"), attrs),)


def _bellman_vjp(attrs, ins, outs, gs):
    r, q_next, q = ins
    g = _expand(gs[0], r, attrs) * 2.0 * (r + attrs["gamma"] * q_next - q)
    return g, None, -g


def _triple_example(rng):
    return {"gamma": 0.9, "reduce": "mean"}, tuple(rng.normal(size=(4, 1)) for _ in range(3))


register(
    KernelSpec(
        "bellman_error",
        3,
        _bellman_forward,
        _bellman_shape,
        _bellman_vjp,
        nondiff=frozenset({1}),
        example=_triple_example,
    )
)


def bellman_gradient_error(r, q_next_cloned, q, g, eps, gamma, reduce="mean"):
    """``(r + gamma * q_next - q - <g, eps>)^2``, the loss shared by critic and deviator."""
    args = (as_tensor(v) for v in (r, q_next_cloned, q, g, eps))
    return _bge_forward({"gamma": gamma, "reduce": reduce}, *args)[0]


def _bge_resid(attrs, r, q_next, q, g, eps):
    return r + attrs["gamma"] * q_next - q - np.sum(g * eps, axis=-1, keepdims=True)


def _bge_forward(attrs, r, q_next, q, g, eps):
    _check_gamma(attrs["gamma"])
    if g.shape != eps.shape:
        raise ShapeError(f"gradient estimate {g.shape} and noise {eps.shape} differ")
    resid = _bge_resid(attrs, r, q_next, q, g, eps)
    return (_reduce(resid * resid, attrs),)


def _bge_shape(attrs, r, q_next, q, g, eps):
    _check_gamma(attrs["gamma"])
    s = _same(r, q_next, q, what="bellman_gradient_error")
    _same(g, eps, what="bellman_gradient_error gradient/noise")
    _need(_sample_scalar(g) == s, f"bellman_gradient_error: values {s} vs gradient {g}")
    return (_reduced(s, attrs),)


def _bge_vjp(attrs, ins, outs, gs):
    r, q_next, q, g, eps = ins
    two_resid = 2.0 * _expand(gs[0], r, attrs) * _bge_resid(attrs, *ins)
    return two_resid, None, -two_resid, -two_resid * eps, -two_resid * g


def _bge_example(rng):
    return {"gamma": 0.5, "reduce": "mean"}, (
        *(rng.normal(size=(4, 1)) for _ in range(3)),
        rng.normal(size=(4, 3)),
        rng.normal(size=(4, 3)),
    )


register(
    KernelSpec(
        "bellman_gradient_error",
        5,
        _bge_forward,
        _bge_shape,
        _bge_vjp,
        nondiff=frozenset({1}),
        example=_bge_example,
    )
)


# --------------------------------------------------------------------------
# discrete helpers for finite-support generative games


def _nearest(x, support):
    support = np.asarray(support, dtype=np.float64).reshape(len(support), -1)
    d = np.sum((x[..., None, :] - support) ** 2, axis=-1)
    return np.argmin(d, axis=-1), support


register(
    KernelSpec(
        "onehot",
        1,
        lambda attrs, x: (np.eye(len(attrs["support"]))[_nearest(x, attrs["support"])[0]],),
        lambda attrs, s: (s[:-1] + (len(attrs["support"]),),),
        lambda attrs, ins, outs, gs: (np.zeros_like(ins[0]),),
        nondiff=frozenset({0}),
        doc="One-hot code of the nearest support point (piecewise constant, zero derivative).",
    )
)


def _categorical_forward(attrs, logits, eps):
    support = np.asarray(attrs["support"], dtype=np.float64).reshape(len(attrs["support"]), -1)
    p = np.exp(logits - logits.max())
    cdf = np.cumsum(p / p.sum())
    u = ndtr(eps[..., 0])
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), len(support) - 1)
    return (support[idx],)


def _categorical_shape(attrs, logits, eps):
    k = len(attrs["support"])
    _need(logits == (k,), f"categorical sampler expects {k} logits, got {logits}")
    dim = np.asarray(attrs["support"], dtype=np.float64).reshape(k, -1).shape[1]
    return (eps[:-1] + (dim,),)


register(
    KernelSpec(
        "categorical_sampler",
        2,
        _categorical_forward,
        _categorical_shape,
        lambda attrs, ins, outs, gs: (np.zeros_like(ins[0]), np.zeros_like(ins[1])),
        nondiff=frozenset({0, 1}),
        doc="Maps Gaussian noise to a support point by inverting the CDF of softmax(logits).",
    )
)


# --------------------------------------------------------------------------
# response-side combinators


def chain_combine(jacobians, delta):
    """Dense form of the ``*`` node: multiply each Jacobian by the incoming delta.

    ``jacobians[k]`` has shape ``output_shape + input_shape_k``; the result for
    input k is ``sum_o J_k[o, ...] * delta[o]`` reshaped to the input's shape.
    """
    delta = as_tensor(delta)
    out = []
    for jac in jacobians:
        jac = as_tensor(jac)
        if jac.shape[: delta.ndim] != delta.shape:
            raise ShapeError(f"jacobian {jac.shape} does not start with delta shape {delta.shape}")
        in_shape = jac.shape[delta.ndim :]
        out.append((delta.reshape(-1) @ jac.reshape(delta.size, -1)).reshape(in_shape))
    return out


def kick_compute(s_prev, ind_curr, tau_next):
    """``s_prev (outer) (ind_curr * tau_next)`` for one sample."""
    ind_curr, tau_next = as_tensor(ind_curr), as_tensor(tau_next)
    if tau_next.ndim == 0:
        # the top layer receives the scalar 1 in place of a feedback vector
        tau_next = np.full(ind_curr.shape, float(tau_next))
    if ind_curr.shape != tau_next.shape:
        raise ShapeError(f"indicator {ind_curr.shape} and feedback {tau_next.shape} differ")
    return outer_product(s_prev, ind_curr * tau_next)


def _kick_forward(attrs, s_prev, active, tau):
    return ((s_prev[..., :, None] * (active * tau)[..., None, :]),)


def _kick_shape(attrs, s_prev, active, tau):
    _same(active, tau, what="kick indicator/feedback")
    _need(s_prev[:-1] == active[:-1], f"kick: batch dims differ {s_prev} vs {active}")
    return (s_prev + (active[-1],),)


register(
    KernelSpec(
        "kick",
        3,
        _kick_forward,
        _kick_shape,
        doc="Per-sample outer product S_{i-1} (x) (1_{S_i} * tau_i).",
    )
)


def _kick_scale_forward(attrs, beta, kick):
    # sum_b beta_b * kick_b, transposed into the (out, in) layout of the weights
    k = kick.reshape(-1, kick.shape[-2], kick.shape[-1])
    return (np.einsum("b,bio->oi", beta.reshape(-1), k),)


def _kick_scale_shape(attrs, beta, kick):
    _need(beta[-1] == 1 and beta[:-1] == kick[:-2], f"kick_scale: broadcast signal {beta} vs kick {kick}")
    return ((kick[-1], kick[-2]),)


register(
    KernelSpec(
        "kick_scale",
        2,
        _kick_scale_forward,
        _kick_scale_shape,
        doc="beta * Kick accumulated over the batch, in the weight layout (out, in).",
    )
)


# --------------------------------------------------------------------------
# utilities over the registry


def partials(tag: str, inputs, attrs=None, out_grads=None):
    """Vector-Jacobian products of kernel ``tag`` at ``inputs``.

    With ``out_grads`` omitted, every output is seeded with ones.
    """
    spec = get_kernel(tag)
    attrs = dict(attrs or {})
    inputs = tuple(as_tensor(x) for x in inputs)
    outputs = spec.forward(attrs, *inputs)
    if out_grads is None:
        out_grads = tuple(np.ones_like(o) for o in outputs)
    return spec.vjp(attrs, inputs, outputs, tuple(out_grads))


def jacobian(tag: str, inputs, slot: int, attrs=None, port: int = 0):
    """Dense Jacobian of output ``port`` w.r.t. input ``slot``, built one cotangent at a time."""
    spec = get_kernel(tag)
    attrs = dict(attrs or {})
    inputs = tuple(as_tensor(x) for x in inputs)
    outputs = spec.forward(attrs, *inputs)
    out = outputs[port]
    jac = np.zeros(out.shape + inputs[slot].shape)
    for idx in np.ndindex(*out.shape):
        seed = np.zeros_like(out)
        seed[idx] = 1.0
        grads = [None] * len(outputs)
        grads[port] = seed
        g = spec.vjp(attrs, inputs, outputs, tuple(grads))[slot]
        jac[idx] = 0.0 if g is None else g
    return jac


@dataclass
class KernelCall:
    """A kernel bound to traced inputs and outputs: what an oracle node reveals."""

    spec: KernelSpec
    attrs: dict
    inputs: tuple
    outputs: tuple = field(default_factory=tuple)

    def vjp(self, out_grads):
        if self.spec.vjp is None:
            raise TypeError(f"kernel {self.spec.tag!r} has no registered partials")
        return self.spec.vjp(self.attrs, self.inputs, self.outputs, tuple(out_grads))
