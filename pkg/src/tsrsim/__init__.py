"""tsrsim: a library plus CLI simulator for two-sided low-rank (TSR) gradient
communication in data-parallel training, with exact communication-byte
accounting, randomized-SVD subspace refresh, dense and one-sided baselines,
and diagnostics for the subspace-tracking quantities.
"""

from .collective import CommLedger, CommObjectKind, CommRecord, all_reduce_mean
from .diagnostics import (DiagnosticsLog, DiagnosticsSample, projected_variance,
                          refresh_mismatch, subspace_error, tracking_error)
from .harness import (ConfigError, Method, NumericalFailure, RunConfig,
                      RunResult, StepSummary, build_run_config, compare_runs,
                      execute_run, load_run_config, predict_run_bytes,
                      predict_step_bytes, run_experiment, scaling_table,
                      selftest)
from .linalg import (SeededRng, frob_norm, gaussian_matrix, hadamard, matmul,
                     matmul_nt, matmul_tn, orth, scale_add, svd_small)
from .optimizers import (AdamHyperparams, CoreMoments, DenseMoments,
                         ProjectionPair, dense_adamw_step, one_sided_step,
                         realign_core, reconstruct, tsr_adam_step,
                         tsr_project_core, tsr_sgd_step)
from .refresh import RefreshConfig, RefreshMode, exact_refresh, randomized_refresh
from .tasks import (GradientSource, LayerKind, LayerSpec, TaskSpec,
                    make_embedding_task, make_lowrank_regression, run_worker_step)

__version__ = "0.1.0"
