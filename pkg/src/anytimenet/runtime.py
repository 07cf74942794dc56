"""Deadline-driven anytime inference simulation and accuracy/cost curves.

Cost is measured in analytic multiply-accumulates per example.  A deadline
is a MAC budget: a stage (or independent network) is feasible when its
cumulative cost is <= the deadline.  Inputs with no feasible predictor get
a uniformly random label drawn from one seeded generator; all schemes at
one deadline share the same guesses.
"""
import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .arch import NestedNetwork
from .checkpoint import dump_json
from .errors import InputError
from .train import stage_predictions

SCHEMES = ("baseline-anytime", "nested", "oracle-all", "oracle-each")
UNBOUNDED = math.inf


@dataclass
class CostModel:
    cumulative: tuple

    def __post_init__(self):
        self.cumulative = tuple(float(c) for c in self.cumulative)
        if any(b <= a for a, b in zip(self.cumulative, self.cumulative[1:])):
            raise InputError(f"stage costs must be strictly increasing: {self.cumulative}")

    @classmethod
    def from_network(cls, net):
        return cls(tuple(net.flops(i) for i in range(1, net.num_stages + 1)))

    def last_feasible(self, deadline):
        """0-based index of the largest stage with cost <= deadline, or -1."""
        k = -1
        for i, c in enumerate(self.cumulative):
            if c <= deadline:
                k = i
        return k


@dataclass
class StagedPredictor:
    """Per-stage predictions of an anytime network on a fixed dataset."""
    predictions: np.ndarray   # (n_stages, N)
    costs: CostModel

    @classmethod
    def from_network(cls, net, dataset):
        return cls(stage_predictions(net, dataset), CostModel.from_network(net))

    def stage_errors(self, labels):
        return (self.predictions != labels[None, :]).mean(axis=1)


@dataclass
class Independent:
    cost: float
    predictions: np.ndarray   # (N,)
    val_error: float
    name: str = ""

    @classmethod
    def from_network(cls, net, dataset, name=""):
        if net.num_stages != 1:
            raise InputError("independent networks must have a single stage")
        pred = stage_predictions(net, dataset)[0]
        return cls(float(net.flops(1)), pred, float(np.mean(pred != dataset.labels)), name)


def _staged(model, dataset):
    if isinstance(model, NestedNetwork):
        return StagedPredictor.from_network(model, dataset)
    return model


def random_guesses(rng, dataset):
    return rng.integers(0, dataset.num_classes, len(dataset))


def simulate_nested(model, dataset, deadline, rng=None, guesses=None):
    """Error when each input uses the deepest stage finishing by ``deadline``."""
    if deadline < 0:
        raise InputError("deadline must be >= 0")
    model = _staged(model, dataset)
    k = model.costs.last_feasible(deadline)
    if k < 0:
        if guesses is None:
            guesses = random_guesses(rng if rng is not None else np.random.default_rng(0), dataset)
        return float(np.mean(guesses != dataset.labels))
    return float(np.mean(model.predictions[k] != dataset.labels))


def _feasible(independents, deadline):
    return [ind for ind in independents if ind.cost <= deadline]


def simulate_oracle_all(independents, dataset, deadline, rng=None, guesses=None):
    """Best single feasible network (by validation error) for all inputs."""
    feas = _feasible(independents, deadline)
    if not feas:
        if guesses is None:
            guesses = random_guesses(rng if rng is not None else np.random.default_rng(0), dataset)
        return float(np.mean(guesses != dataset.labels))
    best = min(feas, key=lambda ind: (ind.val_error, ind.cost))
    return float(np.mean(best.predictions != dataset.labels))


def simulate_oracle_each(independents, dataset, deadline, rng=None, guesses=None):
    """An input counts as correct if any feasible network gets it right."""
    feas = _feasible(independents, deadline)
    if not feas:
        if guesses is None:
            guesses = random_guesses(rng if rng is not None else np.random.default_rng(0), dataset)
        return float(np.mean(guesses != dataset.labels))
    correct = np.zeros(len(dataset), dtype=bool)
    for ind in feas:
        correct |= ind.predictions == dataset.labels
    return float(np.mean(~correct))


def default_deadlines(max_cost, count=7, lo=0.5, hi=1.0):
    """``count`` evenly spaced budgets in [lo, hi] * max_cost, then unbounded."""
    return [float(v) for v in np.linspace(lo * max_cost, hi * max_cost, count)] + [UNBOUNDED]


@dataclass
class SimReport:
    rows: list = field(default_factory=list)   # (scheme, deadline, error)

    def errors(self, scheme):
        return [e for s, _, e in self.rows if s == scheme]

    def deadlines(self):
        seen = []
        for _, d, _ in self.rows:
            if d not in seen:
                seen.append(d)
        return seen

    def schemes(self):
        return [s for s in SCHEMES if any(r[0] == s for r in self.rows)]

    def get(self, scheme, deadline):
        for s, d, e in self.rows:
            if s == scheme and d == deadline:
                return e
        raise KeyError((scheme, deadline))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scheme", "deadline_macs", "error"])
        for s, d, e in self.rows:
            w.writerow([s, "inf" if math.isinf(d) else repr(float(d)), repr(float(e))])
        return buf.getvalue()

    def to_json(self):
        return dump_json({"rows": [{"scheme": s, "deadline_macs": None if math.isinf(d) else d,
                                    "error": e} for s, d, e in self.rows]})


def sweep(net, independents, dataset, deadlines=None, seed=0, baseline=None):
    """Evaluate every available scheme at every deadline.

    ``net`` and ``baseline`` may be networks or precomputed StagedPredictors;
    ``independents`` may be empty, in which case oracle schemes are skipped.
    """
    nested = _staged(net, dataset)
    base = _staged(baseline, dataset) if baseline is not None else None
    if deadlines is None:
        deadlines = default_deadlines(nested.costs.cumulative[-1])
    deadlines = sorted(deadlines)
    rng = np.random.default_rng(seed)
    report = SimReport()
    for d in deadlines:
        guesses = random_guesses(rng, dataset)
        if base is not None:
            report.rows.append(("baseline-anytime", d, simulate_nested(base, dataset, d, guesses=guesses)))
        report.rows.append(("nested", d, simulate_nested(nested, dataset, d, guesses=guesses)))
        if independents:
            report.rows.append(("oracle-all", d, simulate_oracle_all(independents, dataset, d, guesses=guesses)))
            report.rows.append(("oracle-each", d, simulate_oracle_each(independents, dataset, d, guesses=guesses)))
    return report


def tradeoff_curve(net, dataset):
    """One (cumulative MACs, error) point per stage."""
    model = _staged(net, dataset)
    errs = model.stage_errors(dataset.labels)
    return [(c, float(e)) for c, e in zip(model.costs.cumulative, errs)]


def oracle_curve(independents):
    return sorted((ind.cost, ind.val_error) for ind in independents)


def curves_csv(curves):
    """``curves`` maps scheme name to a list of (macs, error) points."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scheme", "stage", "macs", "error"])
    for scheme, pts in curves.items():
        for i, (c, e) in enumerate(pts, start=1):
            w.writerow([scheme, i, repr(float(c)), repr(float(e))])
    return buf.getvalue()
