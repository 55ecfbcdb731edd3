//! Quadratic test problems with known constants, and checkers that evaluate
//! each convergence bound against measured trajectories.

pub mod battery;
pub mod bounds;
pub mod quadratic;

pub use battery::{assemble as assemble_battery, run_battery, Battery, BatteryConfig, BatteryRow, BatteryTable};
pub use bounds::{
    gd_one_step_change, multiclass_condition_check, pcngd_decrease_threshold, pcngd_monotone_run, rpcngd_distribution,
    thm_gd_bound_eval, thm_pcngd_bound_eval, thm_pcnsgd_ball_check, thm_pl_rate_check, thm_rpcngd_check,
    tightness_threshold, BoundReport, GdStepRule, MonotonicityReport, MulticlassCondition, PcngdVariant, PlMode,
    RpcngdReport, StochasticTrajectory, TheoremConstants, TightnessReport,
};
pub use quadratic::{
    make_two_class_quadratic, run_full_batch, ClassQuadratic, FullBatchRule, Trajectory, TrajectoryPoint,
    TwoClassQuadratic,
};
