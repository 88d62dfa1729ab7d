use ndarray::{Array2, ArrayView2};

use super::config::Scheme;
use crate::error::Result;
use crate::models::LossBreakdown;

/// Latent state and losses of one inference step for a batch.
pub struct StepView<'a> {
    pub step: usize,
    /// `z` for the predictive-coding scheme, `μ` of ψ otherwise.
    pub mu: ArrayView2<'a, f32>,
    pub log_var: Option<ArrayView2<'a, f32>>,
    pub losses: &'a [LossBreakdown],
    /// `μθ` at the latent mean, present when the observer asked for it.
    pub reconstruction: Option<ArrayView2<'a, f32>>,
}

/// Receives every step of an inference run as it happens.
pub trait TraceObserver {
    fn wants_reconstruction(&self, _step: usize) -> bool {
        false
    }

    fn observe(&mut self, view: &StepView<'_>) -> Result<()>;
}

/// Discards everything.
pub struct NullObserver;

impl TraceObserver for NullObserver {
    fn observe(&mut self, _view: &StepView<'_>) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub mu: Array2<f32>,
    pub log_var: Option<Array2<f32>>,
    /// Batch mean.
    pub loss: LossBreakdown,
    pub per_sample: Vec<LossBreakdown>,
    pub reconstruction: Array2<f32>,
}

/// Full per-step record of one inference run, including the initial state.
#[derive(Clone, Debug)]
pub struct InferenceTrace {
    pub scheme: Scheme,
    pub records: Vec<StepRecord>,
}

impl InferenceTrace {
    pub fn new(scheme: Scheme) -> Self {
        InferenceTrace {
            scheme,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }

    pub fn at(&self, step: usize) -> Option<&StepRecord> {
        self.records.get(step)
    }
}

impl TraceObserver for InferenceTrace {
    fn wants_reconstruction(&self, _step: usize) -> bool {
        true
    }

    fn observe(&mut self, view: &StepView<'_>) -> Result<()> {
        self.records.push(StepRecord {
            step: view.step,
            mu: view.mu.to_owned(),
            log_var: view.log_var.map(|v| v.to_owned()),
            loss: LossBreakdown::mean(view.losses),
            per_sample: view.losses.to_vec(),
            reconstruction: view
                .reconstruction
                .expect("reconstruction requested")
                .to_owned(),
        });
        Ok(())
    }
}
