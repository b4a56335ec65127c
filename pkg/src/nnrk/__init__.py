"""Explicit Runge-Kutta integrators with a learned local-error correction.

The package provides Butcher-tableau integrators and a reference solver
(:mod:`nnrk.rk`), test systems (:mod:`nnrk.systems`), a numpy multilayer
perceptron with AdamW training (:mod:`nnrk.mlp`, :mod:`nnrk.learning`),
network-corrected and safeguarded hybrid solvers (:mod:`nnrk.enhanced`),
accuracy-versus-effort benchmarks (:mod:`nnrk.benchmark`) and the ``nnrk``
command-line tool (:mod:`nnrk.cli`).
"""

from .enhanced import (
    BoundParams,
    HybridConfig,
    calibrate_delta_max,
    enhanced_integrate,
    enhanced_step,
    error_bound,
    hybrid_integrate,
    hybrid_step,
)
from .errors import (
    ConfigError,
    CorrectionError,
    DivergenceError,
    IntegrationError,
    ModelFormatError,
    NnrkError,
    TrainingError,
)
from .learning import Dataset, TrainConfig, build_dataset, train
from .mlp import Mlp, load_model, mlp_new, save_model
from .rk import (
    ButcherTableau,
    Trajectory,
    get_tableau,
    integrate,
    reference_integrate,
    richardson_integrate,
    rk_step,
)
from .systems import OdeSystem, get_system

__version__ = "0.1.0"
