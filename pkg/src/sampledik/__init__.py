"""Inverse-kinematics trajectory tracking under sampled communication.

Library layout mirrors the control stack: kinematic systems, reference
trajectories, sampled controllers, the hybrid closed-loop simulator, the
closed-form convergence-rate analysis, and the data-driven estimation of its
parameters.  The ``cli`` module wraps everything into an experiment harness.
"""

from .analysis import (
    GainRecommendation,
    OutsideValidityWindow,
    RegionGrid,
    ThetaParams,
    Thresholds,
    gain_for_sampling_time,
    k_bar,
    k_bbar,
    k_o,
    k_o_validity_window,
    region_grid,
    rho_o_of_k,
    rho_o_of_tau,
    tau_o,
    tau_s,
    thresholds,
    z_bound,
)
from .control import (
    ControlStrategy,
    InfeasibleStepError,
    OfflineGain,
    OnlineGainSearch,
    SampledState,
    auxiliary_gain,
    make_sampled_state,
    online_gain,
    u_ff_naive,
    u_ps,
    u_sikm,
    u_sikm_distributed,
)
from .estimation import (
    EstimationSample,
    InfeasibleSamplesError,
    ThetaEstimate,
    collect_samples,
    estimate_theta,
)
from .kinematics import (
    ConditioningGuard,
    LinearSystem,
    PlanarFormation,
    ScalarSystem,
    SingularConfiguration,
    SquareSystem,
    eval_h,
    eval_jacobian,
    solve_jacobian,
)
from .simulation import (
    BoundHypothesisError,
    ConfigError,
    Metrics,
    SimConfig,
    SimTrace,
    check_contractive,
    compute_metrics,
    exponential_envelope_check,
    ps_bound_check,
    run,
)
from .trajectory import (
    ConstantSpec,
    ReferenceTrajectory,
    SinusoidSpec,
    SmoothstepSpec,
    make_trajectory,
    sample,
)

__version__ = "0.1.0"
