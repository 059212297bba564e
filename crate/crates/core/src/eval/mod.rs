//! Evaluation: last-k perplexity, compression and cost accounting,
//! synthetic in-context learning and text-visual distance sweeps.

mod cost;
mod distance;
mod icl;
mod ppl;

pub use cost::{compression_report, cost_estimate, CompressionReport, CostEstimate, COST_FORMULA};
pub use distance::{curves_csv, distance_sweep, info_gain_profile, DistanceCurve, DistancePoint, MaskMode, TokenGain, CURVES_HEADER};
pub use icl::{icl_eval, IclResult};
pub use ppl::{eval_perplexity, mean_nll};

use serde::Serialize;
use thiserror::Error;

use crate::corpus::CorpusError;
use crate::model::ModelError;
use crate::objectives::ObjectiveError;
use crate::render::RenderError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sample {index} has {len} decoder tokens, need at least {need}")]
    SampleTooShort { index: usize, len: usize, need: usize },
    #[error("no samples to evaluate")]
    NoSamples,
    #[error("label {0:?} is not a single vocabulary token")]
    Label(String),
    #[error("prompt of {len} tokens exceeds the decoder's {max} positions")]
    PromptTooLong { len: usize, max: usize },
    #[error("mask ratio {0} outside [0, 1]")]
    Ratio(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

/// One evaluated task, serialized as a single JSON object.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ppl: Option<f64>,
    /// Same checkpoint with every cross-attention gate at zero.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ppl_gates_zeroed: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub accuracy_per_seed: Vec<f64>,
    /// Absent when either token count is zero.
    pub delta: Option<f64>,
    pub flops_estimate: Option<f64>,
    pub memory_estimate: Option<u64>,
    /// How the cost estimates were computed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub formula: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub distance_curves: Vec<DistanceCurve>,
}

impl EvalReport {
    pub fn new(task: impl Into<String>) -> Self {
        Self {
            task: task.into(),
            ..Self::default()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report fields are plain data")
    }
}

/// Maps `f` over `items` on up to `workers` threads. Each thread takes a
/// contiguous chunk and results come back in input order, so any reduction
/// done afterwards is independent of the worker count.
pub(crate) fn par_map<I, O, E, F>(workers: usize, items: &[I], f: F) -> Result<Vec<O>, E>
where
    I: Sync,
    O: Send,
    E: Send,
    F: Fn(usize, &I) -> Result<O, E> + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<O>, E>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, xs)| s.spawn(move || xs.iter().enumerate().map(|(j, x)| f(c * chunk + j, x)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_keeps_order() {
        let xs: Vec<u64> = (0..37).collect();
        let one = par_map(1, &xs, |i, x| Ok::<_, ()>(x * 3 + i as u64)).unwrap();
        let four = par_map(4, &xs, |i, x| Ok::<_, ()>(x * 3 + i as u64)).unwrap();
        assert_eq!(one, four);
        assert!(par_map(3, &xs, |_, &x| if x == 20 { Err(x) } else { Ok(x) }).is_err());
    }

    #[test]
    fn report_json_omits_unused_fields() {
        let mut r = EvalReport::new("ppl");
        r.ppl = Some(12.5);
        let j = r.to_json();
        assert!(j.contains("\"ppl\":12.5"));
        assert!(!j.contains("accuracy"));
        assert!(j.contains("\"delta\":null"));
    }
}
