//! Quadratic anchoring of parameters used by earlier tasks.
//!
//! Two penalties live here: the usage-weighted pathway penalty, which pulls
//! every parameter an earlier task routed through back toward that task's
//! snapshot, and the Fisher-weighted EWC penalty. The Fisher estimators,
//! power iteration and the second-order forgetting predictor sit alongside.

mod fisher;
mod penalty;

pub use fisher::{
    estimate_fisher_diag, estimate_fisher_full, lambda_max, predict_forgetting, FisherInfo, FisherValues,
    ForgettingPrediction, LambdaMax, SymMatrix, FULL_FISHER_MAX_PARAMS,
};
pub use penalty::{add_ewc_grad, add_pathway_reg_grad, ewc_penalty, pathway_reg_loss, TaskSnapshot};
