"""Training and evaluation loops."""
import csv
import hashlib
import io
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .arch import NestedNetwork, StagePlan, forward_stage
from .checkpoint import atomic_write_text, dump_json, save_checkpoint
from .data import load_csv, load_idx, spiral_splits
from .errors import ConfigError, NumericError
from .optim import MultitaskOptimizer, OptimizerConfig

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "stage", "split", "metric", "value")


# ---------------------------------------------------------------- schedule

@dataclass(frozen=True)
class LRSchedule:
    start: float
    end: float
    total_steps: int

    def __post_init__(self):
        if not self.start >= self.end > 0:
            raise ConfigError("need lr_start >= lr_end > 0")
        if self.total_steps < 1:
            raise ConfigError("schedule needs at least one step")


def lr_at(schedule, step):
    """Geometric interpolation: ``start`` at step 0, ``end`` at the last step."""
    last = schedule.total_steps - 1
    if not 0 <= step <= last:
        raise ConfigError(f"step {step} outside schedule of {schedule.total_steps} steps")
    if last == 0:
        return schedule.start
    return schedule.start * (schedule.end / schedule.start) ** (step / last)


# ---------------------------------------------------------------- configs

@dataclass
class DataConfig:
    kind: str = "spiral"
    n_train: int = 3000
    n_val: int = 1000
    num_classes: int = 3
    noise: float = 0.05
    turns: float = 1.0
    seed: int = 0
    train: str = None          # csv / idx image file
    val: str = None
    train_labels: str = None   # idx only
    val_labels: str = None

    def __post_init__(self):
        if self.kind not in ("spiral", "csv", "idx"):
            raise ConfigError(f"unknown data kind {self.kind!r}")
        if self.kind != "spiral" and not (self.train and self.val):
            raise ConfigError(f"{self.kind} data needs both train and val paths")
        if self.kind == "idx" and not (self.train_labels and self.val_labels):
            raise ConfigError("idx data needs train_labels and val_labels")

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def load_data(cfg):
    if cfg.kind == "spiral":
        return spiral_splits(cfg.seed, cfg.n_train, cfg.n_val, cfg.num_classes, cfg.noise, cfg.turns)
    if cfg.kind == "csv":
        return (load_csv(cfg.train, num_classes=cfg.num_classes, split="train"),
                load_csv(cfg.val, num_classes=cfg.num_classes, split="val"))
    return (load_idx(cfg.train, cfg.train_labels, cfg.num_classes, "train"),
            load_idx(cfg.val, cfg.val_labels, cfg.num_classes, "val"))


@dataclass
class TrainConfig:
    plan: StagePlan
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    epochs: int = 200
    batch_size: int = 64
    lr_start: float = 0.1
    lr_end: float = 0.0008
    seeds: tuple = (0,)

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr_start >= self.lr_end > 0:
            raise ConfigError("need lr_start >= lr_end > 0")
        if not self.seeds:
            raise ConfigError("at least one seed required")
        if self.plan.num_classes != self.data.num_classes:
            raise ConfigError(f"plan has {self.plan.num_classes} classes, data has {self.data.num_classes}")
        if self.optimizer.strategy == "greedy" and self.epochs < self.plan.num_stages:
            raise ConfigError("greedy training needs at least one epoch per stage")
        self.optimizer.resolve(self.plan.num_stages)

    def to_dict(self):
        return {
            "plan": self.plan.to_dict(),
            "optimizer": self.optimizer.resolve(self.plan.num_stages).to_dict(),
            "data": asdict(self.data),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr_start": self.lr_start,
            "lr_end": self.lr_end,
            "seeds": list(self.seeds),
        }

    @classmethod
    def from_dict(cls, d):
        if "plan" not in d:
            raise ConfigError("config is missing the 'plan' section")
        kw = {k: d[k] for k in ("epochs", "batch_size", "lr_start", "lr_end", "seeds") if k in d}
        return cls(plan=StagePlan.from_dict(d["plan"]),
                   optimizer=OptimizerConfig.from_dict(d.get("optimizer", {})),
                   data=DataConfig.from_dict(d.get("data", {})), **kw)


# ---------------------------------------------------------------- history

@dataclass
class SeedRun:
    seed: int
    records: list
    final_errors: list
    net: NestedNetwork = None
    optimizer_state: dict = None
    rng_state: dict = None
    stage_hashes: list = field(default_factory=list)


@dataclass
class RunHistory:
    runs: list = field(default_factory=list)

    @property
    def seeds(self):
        return [r.seed for r in self.runs]

    def final_matrix(self):
        return np.array([r.final_errors for r in self.runs])

    def summary(self):
        errs = self.final_matrix()
        mean = errs.mean(axis=0)
        std = errs.std(axis=0, ddof=1) if len(self.runs) >= 2 else None
        return {
            "seeds": self.seeds,
            "final_val_error_mean": [float(v) for v in mean],
            "final_val_error_std": None if std is None else [float(v) for v in std],
            "final_val_error_per_seed": {str(r.seed): [float(v) for v in r.final_errors] for r in self.runs},
        }


def history_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for r in records:
        w.writerow([r["epoch"], r["stage"], r["split"], r["metric"], repr(float(r["value"]))])
    return buf.getvalue()


def params_hash(vec):
    return hashlib.sha256(np.ascontiguousarray(vec).tobytes()).hexdigest()


# ---------------------------------------------------------------- loops

def evaluate(net, dataset, batch=4096):
    """Per-stage misclassification rate (argmax of logits)."""
    n = net.num_stages
    if len(dataset) == 0:
        return np.zeros(n)
    wrong = np.zeros(n)
    for i in range(1, n + 1):
        for s in range(0, len(dataset), batch):
            logits = forward_stage(net, i, dataset.inputs[s:s + batch])
            wrong[i - 1] += np.sum(np.argmax(logits, axis=1) != dataset.labels[s:s + batch])
    return wrong / len(dataset)


def stage_predictions(net, dataset):
    """(n_stages, N) argmax predictions."""
    return np.stack([np.argmax(forward_stage(net, i, dataset.inputs), axis=1)
                     for i in range(1, net.num_stages + 1)])


def _epoch_plan(config):
    """(stage or None, epochs) phases; greedy gets epochs // n per stage."""
    n = config.plan.num_stages
    if config.optimizer.strategy != "greedy":
        return [(None, config.epochs)]
    per = config.epochs // n
    phases = [(i, per) for i in range(1, n + 1)]
    phases[-1] = (n, config.epochs - per * (n - 1))
    return phases


def train_seed(config, seed, train_set, val_set):
    """Train one network for one seed and record its history."""
    init_ss, batch_ss = np.random.SeedSequence(seed).spawn(2)
    net = NestedNetwork(config.plan, seed=init_ss)
    rng = np.random.default_rng(batch_ss)
    opt = MultitaskOptimizer(net, config.optimizer)
    n = net.num_stages
    steps_per_epoch = -(-len(train_set) // config.batch_size)
    records, hashes = [], []
    epoch = 0
    try:
        for stage, n_epochs in _epoch_plan(config):
            if stage is not None:
                opt.set_greedy_stage(stage)
            sched = LRSchedule(config.lr_start, config.lr_end, n_epochs * steps_per_epoch)
            t = 0
            for _ in range(n_epochs):
                epoch += 1
                loss_sum = np.zeros(n)
                nb = 0
                for xb, yb in train_set.batches(config.batch_size, rng):
                    res = opt.train_step(xb, yb, lr_at(sched, t))
                    t += 1
                    loss_sum += res.losses
                    nb += 1
                val_err = evaluate(net, val_set)
                for i in range(n):
                    records.append({"epoch": epoch, "stage": i + 1, "split": "train",
                                    "metric": "loss", "value": loss_sum[i] / nb})
                    records.append({"epoch": epoch, "stage": i + 1, "split": "val",
                                    "metric": "error", "value": val_err[i]})
                log.debug("seed %d epoch %d val %s", seed, epoch, np.round(val_err, 4))
            if stage is not None:
                hashes.append(params_hash(net.params[net.stage_mask(stage)]))
    except NumericError:
        final = evaluate(net, val_set) if np.all(np.isfinite(net.params)) else [float("nan")] * n
        raise _Aborted(SeedRun(seed, records, list(final), net, opt.state_dict(),
                               rng.bit_generator.state, hashes))
    final = [float(v) for v in evaluate(net, val_set)]
    return SeedRun(seed, records, final, net, opt.state_dict(), rng.bit_generator.state, hashes)


class _Aborted(Exception):
    def __init__(self, run):
        super().__init__(f"numeric abort in seed {run.seed}")
        self.run = run


def _train_seed_job(args):
    config, seed, train_set, val_set = args
    return train_seed(config, seed, train_set, val_set)


def train(config, out_dir=None, parallel=False):
    """Train every seed; write history, checkpoints and summary to ``out_dir``."""
    train_set, val_set = load_data(config.data)
    if train_set.input_dim != config.plan.input_dim:
        raise ConfigError(f"data has {train_set.input_dim} features, plan expects {config.plan.input_dim}")
    history = RunHistory()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        atomic_write_text(os.path.join(out_dir, "config.json"), dump_json(config.to_dict()))
    jobs = [(config, s, train_set, val_set) for s in config.seeds]
    try:
        if parallel and len(jobs) > 1:
            from concurrent.futures import ProcessPoolExecutor
            with ProcessPoolExecutor() as pool:
                results = list(pool.map(_train_seed_job, jobs))
        else:
            results = []
            for job in jobs:
                results.append(_train_seed_job(job))
                if out_dir is not None:
                    _write_seed(out_dir, config, results[-1])
    except _Aborted as exc:
        if out_dir is not None:
            _write_seed(out_dir, config, exc.run)
        raise NumericError(str(exc)) from None
    history.runs = results
    if out_dir is not None:
        for run in results:
            _write_seed(out_dir, config, run)
        summ = history.summary()
        summ.update({"plan": config.plan.to_dict(),
                     "optimizer": config.optimizer.resolve(config.plan.num_stages).to_dict(),
                     "stage_macs": [results[0].net.flops(i) for i in range(1, config.plan.num_stages + 1)]})
        atomic_write_text(os.path.join(out_dir, "summary.json"), dump_json(summ))
    return history


def _write_seed(out_dir, config, run):
    d = os.path.join(out_dir, f"seed_{run.seed}")
    os.makedirs(d, exist_ok=True)
    atomic_write_text(os.path.join(d, "history.csv"), history_csv(run.records))
    if run.net is not None:
        save_checkpoint(os.path.join(d, "checkpoint.json"), run.net, run.rng_state, run.optimizer_state,
                        extra={"data": asdict(config.data), "seed": run.seed,
                               "strategy": config.optimizer.strategy,
                               "final_val_error": [float(v) for v in run.final_errors]})
