//! Synthetic logistic-regression experiments, sweeps, counterexamples and
//! bound reports.

mod counterexamples;
mod data;
mod report;
mod sweep;

pub use counterexamples::{
    counterexample_gd_bias, counterexample_sigmoid_bias, counterexample_top1, gd_bias_chain,
    run_momentum_counterexample, sigmoid_bias_chain, sigmoid_bias_plan, top1_chain, GdBiasReport,
    SigmoidBiasReport, Top1Params, Top1Report, Top1Verdict,
};
pub use data::{
    generate_logreg_data, logistic_chain, loss_star_oracle, stationary_point, DatasetSpec,
    LogRegData, OptimumReport, Problem,
};
pub use report::{
    bound_report, gradient_error_dominance, pass_states, rate_bound_check, BoundReport,
    BoundReportOptions, BoundRow, DominanceOptions, DominancePoint, DominanceReport,
    RateCheckOptions, RateReport, RowKind,
};
pub use sweep::{
    problem_fingerprint, regime_plan, sweep, AggregateRecord, CellSpec, InitPolicy, OutputRecord,
    PlateauVerdict, Regime, SweepGrid, SweepResult, Trend, BASELINE_LABEL, DEFAULT_STEP_SIZES,
};
