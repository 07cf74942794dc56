"""Multitask optimizers for anytime networks.

Every stage contributes one loss.  Strategies differ in how the per-stage
gradients are turned into one update:

* ``sgd``        backprop of the weighted mean of the stage losses
* ``normsgd``    each stage gradient rescaled to norm sqrt(d_i) * C, then
                 averaged over the stages that cover each coordinate
* ``osgd``       stage gradients orthogonalized in priority order, then summed
* ``osgd-norm``  rescaled as in ``normsgd``, orthogonalized, summed
* ``greedy``     stage-wise: train only the parameters stage i introduces
                 against loss i, then freeze them

Stage gradients are full length and exactly zero outside the stage's own
parameters, so projecting a later gradient onto an earlier one never touches
the coordinates only the later stage owns.
"""
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigError, InputError, NumericError

STRATEGIES = ("greedy", "sgd", "normsgd", "osgd", "osgd-norm")
COMBINE_MODES = ("sum", "participation-average")
DEFAULT_COMBINE = {"normsgd": "participation-average", "osgd": "sum", "osgd-norm": "sum",
                   "sgd": "sum", "greedy": "sum"}


@dataclass
class TaskGradient:
    stage: int
    grad: np.ndarray
    dim: int
    degenerate: bool = False

    @property
    def norm(self):
        return float(np.linalg.norm(self.grad))


@dataclass
class OptimizerConfig:
    strategy: str = "osgd"
    loss_weights: tuple = None
    norm_const: float = 0.5
    priority: tuple = None
    combine: str = None
    tau: float = None
    momentum: float = 0.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        if self.norm_const <= 0:
            raise ConfigError("norm_const (C) must be positive")
        if self.tau is not None and self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.combine is not None and self.combine not in COMBINE_MODES:
            raise ConfigError(f"combine must be one of {COMBINE_MODES}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.loss_weights is not None:
            self.loss_weights = tuple(float(k) for k in self.loss_weights)
            if any(k < 0 for k in self.loss_weights) or sum(self.loss_weights) <= 0:
                raise ConfigError("loss weights must be non-negative and not all zero")
        if self.priority is not None:
            self.priority = tuple(int(p) for p in self.priority)

    def resolve(self, num_stages):
        """Copy with every default filled in for an ``num_stages`` network."""
        n = num_stages
        weights = self.loss_weights or (1.0,) * n
        priority = self.priority or tuple(range(1, n + 1))
        if len(weights) != n:
            raise ConfigError(f"{len(weights)} loss weights for {n} stages")
        check_priority(priority, n)
        return OptimizerConfig(self.strategy, tuple(weights), self.norm_const, tuple(priority),
                               self.combine or DEFAULT_COMBINE[self.strategy], self.tau,
                               self.momentum)

    def to_dict(self):
        d = asdict(self)
        for k in ("loss_weights", "priority"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def check_priority(order, n):
    if sorted(order) != list(range(1, n + 1)):
        raise ConfigError(f"priority {tuple(order)} is not a permutation of 1..{n}")


def default_tau(dim):
    return 1e-12 * np.sqrt(dim)


def _check_finite(vec, what):
    if not np.all(np.isfinite(vec)):
        bad = np.flatnonzero(~np.isfinite(vec))
        raise NumericError(f"non-finite {what} at {bad.size} coordinates (first: {bad[:5].tolist()})")


def per_task_gradients(net, x, y, stages=None):
    """One zero-padded gradient per stage, plus all stage losses.

    ``stages`` limits which gradients are computed (1-based).
    """
    g, losses, _ = net.train_graph()
    vals = g.forward(net.params, x=x, y=y)
    grads = []
    for i, node in enumerate(losses, start=1):
        if stages is not None and i not in stages:
            continue
        vec = g.backward(node)
        _check_finite(vec, f"gradient of stage {i}")
        grads.append(TaskGradient(i, vec, net.stage_dim(i)))
    return grads, [vals[n] for n in losses]


def combined_gradient(net, x, y, weights=None):
    """Backprop of the weighted-mean loss; returns (gradient, stage losses)."""
    g, losses, total = net.train_graph(weights)
    vals = g.forward(net.params, x=x, y=y)
    vec = g.backward(total)
    _check_finite(vec, "combined gradient")
    return vec, [vals[n] for n in losses]


def weighted_loss(losses, weights):
    losses = np.asarray(losses, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if losses.shape != weights.shape:
        raise InputError(f"{losses.size} losses but {weights.size} weights")
    total = weights.sum()
    if total == 0:
        raise ConfigError("loss weights sum to zero")
    return float(np.dot(weights, losses) / total)


def normalize_gradient(tg, norm_const, tau=None):
    """Rescale to norm sqrt(d_i) * C.  Gradients with norm <= tau are returned
    unchanged and flagged ``degenerate``."""
    tau = default_tau(tg.grad.size) if tau is None else tau
    nrm = tg.norm
    if nrm <= tau:
        return TaskGradient(tg.stage, tg.grad.copy(), tg.dim, degenerate=True)
    scale = np.sqrt(tg.dim) * norm_const / nrm
    return TaskGradient(tg.stage, tg.grad * scale, tg.dim)


def orthogonalize(grads, order=None, tau=None):
    """Project each gradient off every higher-priority one, in priority order.

    Earlier gradients are used in their already-projected form, one
    projection at a time (modified Gram-Schmidt, no normalization).
    Projections onto gradients with norm <= tau are skipped.  Output is in
    the input order.
    """
    if not grads:
        return []
    dim = grads[0].grad.size
    for tg in grads:
        if tg.grad.size != dim:
            raise InputError("task gradients differ in length")
    n = len(grads)
    by_stage = {tg.stage: k for k, tg in enumerate(grads)}
    order = tuple(range(1, n + 1)) if order is None else tuple(order)
    if sorted(order) != sorted(by_stage):
        raise InputError(f"priority {order} does not match stages {sorted(by_stage)}")
    tau = default_tau(dim) if tau is None else tau
    rows = np.array([grads[by_stage[s]].grad for s in order], dtype=np.float64)
    _kernels.orthogonalize_rows(rows, tau)
    out = list(grads)
    for r, s in enumerate(order):
        k = by_stage[s]
        src = grads[k]
        vec = src.grad if r == 0 else rows[r]
        out[k] = TaskGradient(src.stage, vec, src.dim, src.degenerate)
    return out


def combine(grads, mode="sum", participation=None):
    """Merge task gradients into one update vector.

    ``participation-average`` divides each coordinate by the number of stages
    covering it (``net.participation``).
    """
    if mode not in COMBINE_MODES:
        raise ConfigError(f"unknown combine mode {mode!r}")
    total = np.zeros_like(grads[0].grad)
    for tg in grads:
        total += tg.grad
    if mode == "participation-average":
        if participation is None:
            raise InputError("participation-average needs per-coordinate stage counts")
        total /= participation
    return total


def step(net, update, lr):
    """Plain gradient descent, in place: W <- W - lr * update."""
    _check_finite(update, "update")
    if lr != 0.0:
        net.params -= lr * update
    return net.params


@dataclass
class StepResult:
    losses: list
    update: np.ndarray
    projected: list = None     # post-projection task gradients (osgd variants)
    originals: list = None     # task gradients before projection
    skipped: list = field(default_factory=list)  # stages with degenerate norm


class MultitaskOptimizer:
    """Holds the resolved config and the mutable optimizer state."""

    def __init__(self, net, config):
        self.net = net
        self.config = config.resolve(net.num_stages)
        self.steps = 0
        self.velocity = None
        self.greedy_stage = 1

    def set_greedy_stage(self, i):
        if not 1 <= i <= self.net.num_stages:
            raise InputError(f"stage {i} out of range")
        self.greedy_stage = i
        self.velocity = None

    def state_dict(self):
        return {
            "steps": self.steps,
            "greedy_stage": self.greedy_stage,
            "velocity": None if self.velocity is None else self.velocity.tolist(),
        }

    def load_state_dict(self, state):
        self.steps = int(state["steps"])
        self.greedy_stage = int(state.get("greedy_stage", 1))
        v = state.get("velocity")
        self.velocity = None if v is None else np.asarray(v, dtype=np.float64)

    def compute_update(self, x, y):
        cfg, net = self.config, self.net
        strat = cfg.strategy
        if strat == "sgd":
            vec, losses = combined_gradient(net, x, y, cfg.loss_weights)
            return StepResult(losses, vec)
        if strat == "greedy":
            i = self.greedy_stage
            (tg,), losses = per_task_gradients(net, x, y, stages=(i,))
            upd = np.where(net.exclusive_mask(i), tg.grad, 0.0)
            return StepResult(losses, upd)
        grads, losses = per_task_gradients(net, x, y)
        skipped = []
        if strat in ("normsgd", "osgd-norm"):
            grads = [normalize_gradient(tg, cfg.norm_const, cfg.tau) for tg in grads]
            skipped = [tg.stage for tg in grads if tg.degenerate]
        projected = originals = None
        if strat in ("osgd", "osgd-norm"):
            originals = grads
            grads = projected = orthogonalize(grads, cfg.priority, cfg.tau)
        upd = combine(grads, cfg.combine, net.participation)
        return StepResult(losses, upd, projected, originals, skipped)

    def train_step(self, x, y, lr):
        res = self.compute_update(x, y)
        upd = res.update
        if self.config.momentum:
            self.velocity = upd.copy() if self.velocity is None else self.config.momentum * self.velocity + upd
            upd = self.velocity
        step(self.net, upd, lr)
        self.steps += 1
        return res


def train_step(net, x, y, config, lr, optimizer=None):
    """One iteration of the configured strategy; returns per-stage losses."""
    opt = optimizer or MultitaskOptimizer(net, config)
    return opt.train_step(x, y, lr).losses


def pairwise_cosines(grads, tau=None):
    """|cos| between every pair of non-degenerate gradients."""
    out = []
    live = [tg for tg in grads if tg.norm > (default_tau(tg.grad.size) if tau is None else tau)]
    for a in range(len(live)):
        for b in range(a + 1, len(live)):
            ga, gb = live[a].grad, live[b].grad
            out.append(abs(float(np.dot(ga, gb))) / (live[a].norm * live[b].norm))
    return out
