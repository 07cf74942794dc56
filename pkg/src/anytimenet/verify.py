"""Numerical self-checks: gradient verification and the orthogonality audit."""
from dataclasses import dataclass, field

import numpy as np

from .arch import MODES, NestedNetwork, StagePlan
from .graph import central_differences, relative_error
from .optim import MultitaskOptimizer, OptimizerConfig, pairwise_cosines

FD_THRESHOLD = 1e-4
ORTHO_THRESHOLD = 1e-8


def random_plan(rng, mode, max_stages=4, max_width=3, max_depth=2, num_classes=None, input_dim=None):
    return StagePlan(
        num_stages=int(rng.integers(1, max_stages + 1)),
        mode=mode,
        base_width=int(rng.integers(1, max_width + 1)),
        base_depth=int(rng.integers(1, max_depth + 1)),
        num_classes=int(num_classes or rng.integers(2, 5)),
        input_dim=int(input_dim or rng.integers(1, 4)),
    )


def kink_free_point(net, rng, x, y, margin=1e-4, tries=200):
    """Random parameters whose relu pre-activations all stay > ``margin`` from 0.

    Central differences straddling a relu kink are meaningless, so the check
    resamples until the graph is smooth within the step size.
    """
    g, _, total = net.train_graph()
    for _ in range(tries):
        theta = net.init_params(rng)
        bias = np.zeros(net.num_params, dtype=bool)
        for s in net.slots:
            if s.name.split(".")[1] == "b":
                bias[s.offset:s.offset + s.size] = True
        theta[bias] = rng.normal(0.0, 0.1, int(bias.sum()))
        g.forward(theta, x=x, y=y)
        if g.relu_margin() > margin:
            return theta
    raise RuntimeError("could not find a kink-free parameter point")


def network_fd_error(net, rng, batch=4, eps=1e-5, flip_sign=False):
    """Max relative FD error of the combined loss over every parameter."""
    x = rng.normal(size=(batch, net.plan.input_dim))
    y = rng.integers(0, net.plan.num_classes, batch)
    theta = kink_free_point(net, rng, x, y)
    g, _, total = net.train_graph()
    g.forward(theta, x=x, y=y)
    bp = g.backward(total)
    if flip_sign:
        bp = -bp
    fd = central_differences(g, total, theta, {"x": x, "y": y}, eps)
    return relative_error(fd, bp)


@dataclass
class FDReport:
    per_mode: dict = field(default_factory=dict)   # mode -> list of errors

    @property
    def max_error(self):
        errs = [e for v in self.per_mode.values() for e in v]
        return max(errs) if errs else 0.0

    def to_dict(self):
        return {"max_rel_error": self.max_error,
                "per_mode_max": {m: max(v) for m, v in self.per_mode.items()},
                "archs_per_mode": {m: len(v) for m, v in self.per_mode.items()}}


def fd_sweep(seed=0, archs_per_mode=10, modes=MODES, max_stages=4, flip_sign=False):
    rng = np.random.default_rng(seed)
    rep = FDReport()
    for mode in modes:
        rep.per_mode[mode] = []
        for _ in range(archs_per_mode):
            net = NestedNetwork(random_plan(rng, mode, max_stages), seed=rng)
            rep.per_mode[mode].append(network_fd_error(net, rng, flip_sign=flip_sign))
    return rep


@dataclass
class OrthoReport:
    steps: int
    pairs: int
    max_cosine: float          # None when no pairs were audited
    first_unchanged: bool

    def to_dict(self):
        return {"steps": self.steps, "pairs": self.pairs, "max_abs_cosine": self.max_cosine,
                "first_priority_unchanged": self.first_unchanged}


def orthogonality_audit(net, x, y, steps=100, lr=0.05, batch=32, config=None, seed=0):
    """Run OSGD steps and record the worst post-projection |cos| per pair."""
    config = config or OptimizerConfig("osgd")
    opt = MultitaskOptimizer(net, config)
    rng = np.random.default_rng(seed)
    first = opt.config.priority[0]
    worst, pairs, unchanged = 0.0, 0, True
    for _ in range(steps):
        idx = rng.choice(len(y), size=min(batch, len(y)), replace=False)
        res = opt.train_step(x[idx], y[idx], lr)
        cos = pairwise_cosines(res.projected, opt.config.tau)
        pairs += len(cos)
        if cos:
            worst = max(worst, max(cos))
        orig = next(tg for tg in res.originals if tg.stage == first)
        proj = next(tg for tg in res.projected if tg.stage == first)
        unchanged &= bool(np.array_equal(orig.grad, proj.grad))
    return OrthoReport(steps, pairs, worst if pairs else None, unchanged)
