"""Nested anytime networks trained with multitask optimizers."""
from .arch import (MODES, NestedNetwork, StagePlan, build_depth_nested, build_eann_cascade, build_even_width,
                   build_network, build_width_depth_nested, build_width_nested, extract_standalone,
                   forward_stage, independent_plan)
from .data import Dataset, gen_spiral, load_csv, load_idx
from .errors import (AnytimeError, CheckpointError, ConfigError, ConstructionError, DatasetError,
                     FormatError, GraphStateError, InputError, NumericError, ShapeError)
from .graph import Graph, finite_diff_check
from .optim import (MultitaskOptimizer, OptimizerConfig, TaskGradient, combine, normalize_gradient,
                    orthogonalize, per_task_gradients, train_step, weighted_loss)
from .runtime import (CostModel, Independent, SimReport, simulate_nested, simulate_oracle_all,
                      simulate_oracle_each, sweep, tradeoff_curve)
from .train import DataConfig, RunHistory, TrainConfig, evaluate, lr_at, train

__version__ = "0.1.0"
