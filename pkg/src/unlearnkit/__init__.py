"""Machine unlearning mechanisms with EECC evaluation."""

from ._kernels import BACKEND
from .core import DatasetTable, LossSpec, RngStream, remove_rows
from .d2d import d2d_init, pgd_unlearn, run_sequence
from .dare import DareParams, audit_forest, dare_predict_many, dare_train, dare_unlearn
from .data import CsvSchema, export_csv, ingest_csv, make_blobs, train_test_split
from .deepobliviate import block_retrain, block_train, deepobliviate_unlearn, dfa_exponent, fit_power_law
from .deltagrad import DeltaGradConfig, deltagrad_unlearn
from .errors import *  # noqa: F401,F403
from .evaluation import EvalReport, backdoor_experiment, monitor_proxies
from .methods import REGISTRY, build_method
from .secondorder import NoiseSpec, RemovalBatchPlan, fisher_unlearn, influence_unlearn
from .sisa import sisa_predict_many, sisa_train, sisa_unlearn
from .trainer import TrainConfig, naive_retrain, train_gd, train_noisy

__version__ = "0.1.0"
