"""Bootstrap particle filters, exact reference filters and uniform-in-time consistency checks."""

from uniformpf.exact import (
    DiscreteBelief,
    GaussianBelief,
    GridBelief,
    forward_filter,
    forward_step,
    grid_filter,
    grid_filter_step,
    kalman_filter,
    kalman_step,
)
from uniformpf.metrics import (
    SupportTooLarge,
    bl_distance,
    coarsen,
    mse_comparison,
    time_average,
    tv_distance,
    v_norm_distance,
)
from uniformpf.models import (
    LyapunovSpec,
    ModelSpec,
    Trajectory,
    make_bounded_obs_model,
    make_finite_hmm,
    make_linear_gaussian,
    simulate,
)
from uniformpf.particles import (
    NaiveFilterState,
    ParticleEnsemble,
    UnderflowError,
    bootstrap_init,
    bootstrap_step,
    iterate_bootstrap,
    iterate_naive,
    naive_step,
    predictor_from_filter,
    propagate,
    resample,
    update,
)

__version__ = "0.1.0"
