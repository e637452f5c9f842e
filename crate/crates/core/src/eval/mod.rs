//! Accuracy metrics, significance testing and report tables.

pub mod metrics;
pub mod report;
pub mod stats;

pub use crate::model::TurnPrediction;
pub use metrics::{align, joint_goal_accuracy, mean_scores, slot_metrics, GoldTurn, SlotMetrics, SlotScores};
pub use report::{
    build_table1, build_table3, loss_reduction, loss_reduction_csv, AuxKind, Comparison, LossReductionRow, Method,
    MethodRuns, RunReport, Table1, Table3,
};
pub use stats::{
    aggregate_seeds, format1, permutation_test, round1, significance, welch_t_test, SeedAggregate, SigTest, Tier,
};
