"""Nature and noise sources with ground truth available for verification.

Each source exposes ``sample(rng, batch, act=None, noise=None)`` returning
``{nature_node_id: tuple_of_port_arrays}``, which is what a round feeds to
the query sweep.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError
from .tensor import Rng, as_tensor, gaussian_log_density

TEACHER_ACTIVATIONS = ("identity", "relu", "tanh", "sign")


class NullSource:
    """For protocols without Nature inputs."""

    def sample(self, rng, batch, act=None, noise=None):
        return {}


@dataclass
class LabeledPool:
    """A fixed dataset. Batches equal to the pool size return it whole, in order."""

    x: np.ndarray
    y: np.ndarray
    node: str = "nature"

    def __post_init__(self):
        self.x, self.y = as_tensor(self.x), as_tensor(self.y)
        if len(self.x) != len(self.y):
            raise ShapeError(f"{len(self.x)} inputs but {len(self.y)} labels")

    def __len__(self):
        return len(self.x)

    def sample(self, rng, batch, act=None, noise=None):
        if batch == len(self.x):
            return {self.node: (self.x, self.y)}
        idx = rng.integers(0, len(self.x), size=batch)
        return {self.node: (self.x[idx], self.y[idx])}


@dataclass
class SupervisedSource:
    """Labeled pairs ``y = teacher(x) + noise`` with Gaussian (or positive) inputs.

    ``teacher`` is an (out, in) matrix. With ``activation='sign'`` labels are
    +-1 and no label noise is added. ``pool_size`` freezes a finite dataset
    drawn once from ``seed``.
    """

    teacher: np.ndarray
    activation: str = "identity"
    noise_std: float = 0.01
    input_std: float = 1.0
    positive_inputs: bool = False
    pool_size: int | None = None
    seed: int = 0
    node: str = "nature"
    pool: LabeledPool | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.teacher = np.atleast_2d(as_tensor(self.teacher))
        if self.activation not in TEACHER_ACTIVATIONS:
            raise ValueError(f"unknown teacher activation {self.activation!r}")
        if self.noise_std < 0:
            raise DomainError("label noise stddev must be non-negative")
        if self.pool_size is not None:
            x, y = sample_supervised(self, Rng(self.seed).spawn("pool"), self.pool_size, fresh=True)
            self.pool = LabeledPool(x, y, self.node)

    @property
    def input_dim(self) -> int:
        return self.teacher.shape[1]

    @property
    def output_dim(self) -> int:
        return self.teacher.shape[0]

    def label(self, x):
        z = as_tensor(x) @ self.teacher.T
        if self.activation == "relu":
            return np.maximum(z, 0.0)
        if self.activation == "tanh":
            return np.tanh(z)
        if self.activation == "sign":
            return np.where(z >= 0, 1.0, -1.0)
        return z

    def sample(self, rng, batch, act=None, noise=None):
        x, y = sample_supervised(self, rng, batch)
        return {self.node: (x, y)}


def sample_supervised(src: SupervisedSource, rng: Rng, batch: int, fresh=False):
    if batch < 1:
        raise ValueError("batch must be at least 1")
    if src.pool is not None and not fresh:
        return src.pool.sample(rng, batch)[src.node]
    x = rng.normal(size=(batch, src.input_dim)) * src.input_std
    if src.positive_inputs:
        x = np.abs(x)
    y = src.label(x)
    if src.activation != "sign" and src.noise_std > 0:
        y = y + src.noise_std * rng.normal(size=y.shape)
    return x, y


def two_blobs(rng: Rng, n: int, dim=2, separation=3.0, std=0.5, node="nature") -> LabeledPool:
    """Two Gaussian blobs labeled +-1, centred at +-separation/2 along the first axis."""
    y = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)[:, None]
    centre = np.zeros(dim)
    centre[0] = separation / 2.0
    x = y * centre + std * rng.normal(size=(n, dim))
    return LabeledPool(x, y, node)


# --------------------------------------------------------------------------
# densities


@dataclass
class DensitySource:
    """Finite support (points, probs) or a Gaussian mixture (weights, means, stds)."""

    points: np.ndarray | None = None
    probs: np.ndarray | None = None
    weights: np.ndarray | None = None
    means: np.ndarray | None = None
    stds: np.ndarray | None = None
    node: str = "nature"

    def __post_init__(self):
        if self.points is not None:
            pts = as_tensor(self.points)
            self.points = pts[:, None] if pts.ndim == 1 else pts
            self.probs = as_tensor(self.probs)
            _check_distribution(self.probs, "probabilities")
            if len(self.probs) != len(self.points):
                raise ShapeError(f"{len(self.points)} points but {len(self.probs)} probabilities")
        elif self.weights is not None:
            self.weights = as_tensor(self.weights)
            _check_distribution(self.weights, "mixture weights")
            m = as_tensor(self.means)
            self.means = m[:, None] if m.ndim == 1 else m
            self.stds = np.broadcast_to(as_tensor(self.stds), self.weights.shape).copy()
            if np.any(self.stds <= 0):
                raise DomainError("mixture stddevs must be positive")
        else:
            raise ValueError("give either points/probs or weights/means/stds")

    @classmethod
    def finite(cls, points, probs, node="nature"):
        return cls(points=points, probs=probs, node=node)

    @classmethod
    def mixture(cls, weights, means, stds, node="nature"):
        return cls(weights=weights, means=means, stds=stds, node=node)

    @property
    def is_finite(self) -> bool:
        return self.points is not None

    @property
    def dim(self) -> int:
        return (self.points if self.is_finite else self.means).shape[1]

    def sample(self, rng, batch, act=None, noise=None):
        return {self.node: (sample_density(self, rng, batch),)}


def _check_distribution(p, what):
    if np.any(p < 0):
        raise DomainError(f"{what} must be non-negative")
    if abs(p.sum() - 1.0) > 1e-12:
        raise DomainError(f"{what} must sum to 1, got {p.sum()!r}")


def sample_density(src: DensitySource, rng: Rng, batch: int) -> np.ndarray:
    if src.is_finite:
        return src.points[rng.choice(len(src.points), size=batch, p=src.probs)]
    comp = rng.choice(len(src.weights), size=batch, p=src.weights)
    return src.means[comp] + src.stds[comp][:, None] * rng.normal(size=(batch, src.dim))


def eval_density(src: DensitySource, x) -> np.ndarray:
    """pmf (finite support; zero off the support) or pdf (mixture) at each row of x."""
    x = np.atleast_2d(as_tensor(x))
    if x.shape[1] != src.dim:
        x = x.reshape(-1, src.dim)
    if src.is_finite:
        hit = np.all(np.abs(x[:, None, :] - src.points[None]) <= 1e-9, axis=-1)
        return hit.astype(np.float64) @ src.probs
    out = np.zeros(len(x))
    for w, m, s in zip(src.weights, src.means, src.stds):
        out += w * np.exp([gaussian_log_density(row, m, s) for row in x])
    return out


@dataclass
class LinearGaussianSource:
    """``x = A z + b + noise_std * n`` with ``z, n`` standard normal.

    The marginal of x and the posterior of z given x are Gaussian and known in
    closed form, which makes this the reference instance for the VAE checks.
    """

    loading: np.ndarray
    offset: np.ndarray | None = None
    noise_std: float = 0.5
    node: str = "nature"

    def __post_init__(self):
        a = as_tensor(self.loading)
        self.loading = a[:, None] if a.ndim == 1 else a
        self.offset = np.zeros(self.data_dim) if self.offset is None else as_tensor(self.offset)
        if self.noise_std <= 0:
            raise DomainError("noise_std must be positive")

    @property
    def data_dim(self) -> int:
        return self.loading.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.loading.shape[1]

    @property
    def covariance(self) -> np.ndarray:
        return self.loading @ self.loading.T + self.noise_std**2 * np.eye(self.data_dim)

    def sample(self, rng, batch, act=None, noise=None):
        z = rng.normal(size=(batch, self.latent_dim))
        x = z @ self.loading.T + self.offset + self.noise_std * rng.normal(size=(batch, self.data_dim))
        return {self.node: (x,)}

    def log_marginal(self, x) -> np.ndarray:
        x = np.atleast_2d(as_tensor(x)) - self.offset
        cov = self.covariance
        _, logdet = np.linalg.slogdet(cov)
        maha = np.einsum("bi,ij,bj->b", x, np.linalg.inv(cov), x)
        return -0.5 * (maha + logdet + self.data_dim * np.log(2 * np.pi))

    def posterior(self, x):
        """Mean rows and covariance of p(z | x)."""
        x = np.atleast_2d(as_tensor(x)) - self.offset
        a, s2 = self.loading, self.noise_std**2
        cov = np.linalg.inv(np.eye(self.latent_dim) + a.T @ a / s2)
        return x @ a @ cov.T / s2, cov


# --------------------------------------------------------------------------
# bandit / MDP for the actor-critic game


@dataclass
class BanditMdp:
    """Reward ``r(s, a) = -||a - W* s||^2``.

    With ``transition=None`` the next state is drawn afresh (a contextual
    bandit); otherwise ``s' = A s + B a`` for ``transition=(A, B)``.
    ``noise_node`` names the query noise node whose sample perturbs the
    executed action.
    """

    w_star: np.ndarray
    gamma: float = 0.0
    transition: tuple | None = None
    state_std: float = 1.0
    node: str = "nature"
    noise_node: str = "eps"

    def __post_init__(self):
        self.w_star = np.atleast_2d(as_tensor(self.w_star))
        if not 0.0 <= self.gamma < 1.0:
            raise DomainError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.transition is not None:
            a, b = (np.atleast_2d(as_tensor(m)) for m in self.transition)
            if a.shape != (self.state_dim, self.state_dim) or b.shape != (self.state_dim, self.action_dim):
                raise ShapeError(f"transition shapes {a.shape}, {b.shape} do not fit dims {self.state_dim}, {self.action_dim}")
            self.transition = (a, b)

    @property
    def state_dim(self) -> int:
        return self.w_star.shape[1]

    @property
    def action_dim(self) -> int:
        return self.w_star.shape[0]

    def target(self, s):
        s = as_tensor(s)
        if s.shape[-1] != self.state_dim:
            raise ShapeError(f"state has shape {s.shape}, expected trailing dim {self.state_dim}")
        return s @ self.w_star.T

    def reward(self, s, a):
        a = as_tensor(a)
        d = a - self.target(s)
        if d.shape != a.shape:
            raise ShapeError(f"action shape {a.shape} does not match {d.shape}")
        return -np.sum(d * d, axis=-1, keepdims=True)

    def sample_states(self, rng, batch):
        return self.state_std * rng.normal(size=(batch, self.state_dim))

    def sample(self, rng, batch, act=None, noise=None):
        s = self.sample_states(rng, batch)
        a = act(s) if act is not None else np.zeros((batch, self.action_dim))
        if noise is not None and self.noise_node in noise:
            a = a + noise[self.noise_node]
        r, s_next = bandit_step(self, s, a, rng)
        return {self.node: (s, r, s_next)}


def bandit_step(mdp: BanditMdp, s, a, rng: Rng):
    """Reward for taking ``a`` in ``s`` and the next state."""
    r = mdp.reward(s, a)
    s = as_tensor(s)
    if mdp.transition is None:
        s_next = mdp.sample_states(rng, len(s)) if s.ndim == 2 else mdp.state_std * rng.normal(size=s.shape)
    else:
        a_mat, b_mat = mdp.transition
        s_next = s @ a_mat.T + as_tensor(a) @ b_mat.T
    return r, s_next


def true_action_gradient(mdp: BanditMdp, s, a) -> np.ndarray:
    """Analytic reward gradient in the action: ``-2 (a - W* s)``."""
    return -2.0 * (as_tensor(a) - mdp.target(s))
