//! Evaluation spread across users with rayon.
//!
//! Each user draws sampling noise from its own stream, so results are
//! identical to [`Sequential`](bridgerec_core::trainer::Sequential) whatever
//! the thread count.

use bridgerec_core::data::{SplitView, Stage};
use bridgerec_core::eval::{EvalError, Inference};
use bridgerec_core::metrics::UserResult;
use bridgerec_core::trainer::Evaluate;
use bridgerec_core::Scalar;
use rayon::prelude::*;

pub struct Parallel;

impl Evaluate for Parallel {
    fn evaluate(
        &self,
        inference: &Inference<'_>,
        split: &SplitView,
        stage: Stage,
        conditions: Option<&[Vec<Scalar>]>,
    ) -> Result<Vec<UserResult>, EvalError> {
        evaluate(inference, split, stage, conditions)
    }
}

pub fn evaluate(
    inference: &Inference<'_>,
    split: &SplitView,
    stage: Stage,
    conditions: Option<&[Vec<Scalar>]>,
) -> Result<Vec<UserResult>, EvalError> {
    inference.check(split, conditions)?;
    split
        .users
        .par_iter()
        .enumerate()
        .map(|(i, u)| inference.rank_user(i, u, stage, conditions.map(|c| c[i].as_slice())))
        .collect()
}
