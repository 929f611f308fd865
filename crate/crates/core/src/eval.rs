//! Running the reverse chain for users and ranking the full vocabulary.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::data::{SplitUser, SplitView, Stage};
use crate::metrics::UserResult;
use crate::model::{rank_items, rank_of, ModelError, SdifRec};
use crate::rng;
use crate::sampler::{sample_with_rng, PredictorHandle, SamplerConfig, SamplerError};
use crate::schedule::ScheduleParams;
use crate::tensor::dot;
use crate::Scalar;

/// Stream lane for per-user sampling noise.
pub const SAMPLE_LANE: u64 = 0x5a;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("dataset has {dataset} items but the model was trained on {model}")]
    Vocabulary { dataset: usize, model: usize },
    #[error("{conditions} conditions for {users} users")]
    Conditions { conditions: usize, users: usize },
}

/// How candidates are compared with `x̂₀`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Retrieval {
    #[default]
    InnerProduct,
    Cosine,
}

/// A frozen model plus everything needed to sample from it.
#[derive(Debug, Clone, Copy)]
pub struct Inference<'a> {
    pub model: &'a SdifRec,
    pub schedule: ScheduleParams,
    pub sampler: SamplerConfig,
    pub retrieval: Retrieval,
}

impl<'a> Inference<'a> {
    pub fn new(model: &'a SdifRec, schedule: ScheduleParams, sampler: SamplerConfig) -> Self {
        Self { model, schedule, sampler, retrieval: Retrieval::InnerProduct }
    }

    /// Estimated next-item embedding. With a condition, classifier-free
    /// guidance mixes the conditional and unconditional branches.
    pub fn infer_x0(
        &self,
        history: &[usize],
        condition: Option<&[Scalar]>,
        stream: u64,
    ) -> Result<Vec<Scalar>, EvalError> {
        let model = self.model;
        let predictor = |x: &[Scalar], s: Scalar, x1: &[Scalar]| {
            model.predict_x0(x, s, x1).unwrap_or_else(|_| vec![Scalar::NAN; x.len()])
        };
        let mut rng = rng::stream(self.sampler.rng_seed, SAMPLE_LANE, stream);
        let out = match condition {
            None => {
                let x1 = model.encode(history)?;
                sample_with_rng(&x1, PredictorHandle::Single(&predictor), &self.schedule, &self.sampler, &mut rng)?
            }
            Some(c) => {
                let x1 = model.encode_conditional(history, Some(c))?;
                let x1_uncond = model.encode_unconditional(history)?;
                let handle = PredictorHandle::Guided {
                    cond: &predictor,
                    uncond: &predictor,
                    x1_uncond: &x1_uncond,
                    w: self.sampler.guidance_w,
                };
                sample_with_rng(&x1, handle, &self.schedule, &self.sampler, &mut rng)?
            }
        };
        Ok(out)
    }

    pub fn scores(
        &self,
        history: &[usize],
        condition: Option<&[Scalar]>,
        stream: u64,
    ) -> Result<Vec<Scalar>, EvalError> {
        let x0 = self.infer_x0(history, condition, stream)?;
        Ok(match self.retrieval {
            Retrieval::InnerProduct => self.model.score_candidates(&x0),
            Retrieval::Cosine => {
                let table = self.model.item_embeddings();
                let xn = libm::sqrt(dot(&x0, &x0)).max(1e-300);
                (0..table.rows())
                    .map(|i| {
                        let e = table.row(i);
                        dot(&x0, e) / (xn * libm::sqrt(dot(e, e)).max(1e-300))
                    })
                    .collect()
            }
        })
    }

    /// Top `k` items with scores, best first.
    pub fn recommend(
        &self,
        history: &[usize],
        condition: Option<&[Scalar]>,
        k: usize,
        stream: u64,
    ) -> Result<Vec<(usize, Scalar)>, EvalError> {
        let scores = self.scores(history, condition, stream)?;
        Ok(rank_items(&scores).into_iter().take(k).map(|i| (i, scores[i])).collect())
    }

    /// Ranks one user's held-out item for `stage`.
    pub fn rank_user(
        &self,
        index: usize,
        user: &SplitUser,
        stage: Stage,
        condition: Option<&[Scalar]>,
    ) -> Result<UserResult, EvalError> {
        let (history, target) = user.query(stage);
        let scores = self.scores(&history, condition, index as u64)?;
        Ok(UserResult { user: index, target, rank: rank_of(&scores, target), train_len: user.train.len() })
    }

    /// Sequential evaluation in user order.
    pub fn evaluate(
        &self,
        split: &SplitView,
        stage: Stage,
        conditions: Option<&[Vec<Scalar>]>,
    ) -> Result<Vec<UserResult>, EvalError> {
        self.check(split, conditions)?;
        split
            .users
            .iter()
            .enumerate()
            .map(|(i, u)| self.rank_user(i, u, stage, conditions.map(|c| c[i].as_slice())))
            .collect()
    }

    pub fn check(&self, split: &SplitView, conditions: Option<&[Vec<Scalar>]>) -> Result<(), EvalError> {
        if split.num_items != self.model.num_items() {
            return Err(EvalError::Vocabulary { dataset: split.num_items, model: self.model.num_items() });
        }
        if let Some(c) = conditions {
            if c.len() != split.users.len() {
                return Err(EvalError::Conditions { conditions: c.len(), users: split.users.len() });
            }
        }
        Ok(())
    }
}
