use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::classifier::Classifier;
use crate::data::{corrupt_rows, CorruptionSpec, Dataset};
use crate::error::{Error, Result};
use crate::inference::{Engine, Mode, NoiseSource, Scheme, StepView, TraceObserver};
use crate::par::{map_chunks, Exec};
use crate::rng::{derive_seed, tags};

/// Test images per work unit.
pub const EVAL_CHUNK: usize = 250;

/// A generative scheme, or the classifier applied to the raw input (`cl`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cl,
    Model(Scheme),
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Cl,
        Method::Model(Scheme::Vae),
        Method::Model(Scheme::Pcn),
        Method::Model(Scheme::Svi),
        Method::Model(Scheme::Ivae),
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Cl => "cl",
            Method::Model(s) => s.tag(),
        }
    }

    pub fn from_tag(s: &str) -> Result<Self> {
        if s == "cl" {
            Ok(Method::Cl)
        } else {
            Scheme::from_tag(s).map(Method::Model)
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Which inference steps get their reconstructions classified.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepSelection {
    All,
    /// Steps 0 and K only.
    Endpoints,
    /// Every `n`-th step, plus step K.
    Every(usize),
}

impl StepSelection {
    pub fn contains(self, step: usize, last: usize) -> bool {
        match self {
            StepSelection::All => true,
            StepSelection::Endpoints => step == 0 || step == last,
            StepSelection::Every(n) => step % n.max(1) == 0 || step == last,
        }
    }

    pub fn steps(self, last: usize) -> Vec<usize> {
        (0..=last).filter(|&k| self.contains(k, last)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepAccuracy {
    pub step: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub method: Method,
    pub spec: CorruptionSpec,
    /// Number of inference steps `K`; the trace holds `K + 1` states.
    pub inner_steps: usize,
    /// Accuracy at each classified step, in step order; always includes 0 and K.
    pub per_step: Vec<StepAccuracy>,
    pub final_accuracy: f64,
    pub n: usize,
}

impl AccuracyReport {
    pub fn at(&self, step: usize) -> Option<f64> {
        self.per_step.iter().find(|s| s.step == step).map(|s| s.accuracy)
    }

    pub fn initial_accuracy(&self) -> f64 {
        self.per_step[0].accuracy
    }

    /// Accuracies at every step when all were classified.
    pub fn curve(&self) -> Option<Vec<f64>> {
        (self.per_step.len() == self.inner_steps + 1).then(|| self.per_step.iter().map(|s| s.accuracy).collect())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OodConfig {
    pub selection: StepSelection,
    pub exec: Exec,
    /// Seed for the evaluation-time reparameterization noise.
    pub seed: u64,
}

impl OodConfig {
    pub fn new(selection: StepSelection, exec: Exec, seed: u64) -> Self {
        OodConfig { selection, exec, seed }
    }

    pub fn noise_seed(&self) -> u64 {
        derive_seed(&[tags::EVAL_NOISE, self.seed])
    }
}

struct CountingObserver<'a> {
    classifier: &'a Classifier,
    labels: &'a [u8],
    selection: StepSelection,
    last: usize,
    steps: Vec<usize>,
    correct: Vec<usize>,
}

impl TraceObserver for CountingObserver<'_> {
    fn wants_reconstruction(&self, step: usize) -> bool {
        self.selection.contains(step, self.last)
    }

    fn observe(&mut self, view: &StepView<'_>) -> Result<()> {
        if view.step > self.last {
            return Err(Error::Contract(format!("step {} beyond K = {}", view.step, self.last)));
        }
        if let Some(recon) = view.reconstruction {
            let pred = self.classifier.predict(recon, Exec::Sequential)?;
            let hits = pred.iter().zip(self.labels).filter(|(p, l)| p == l).count();
            self.steps.push(view.step);
            self.correct.push(hits);
        }
        Ok(())
    }
}

/// Corrupts the test images, runs inference, and classifies the decoded
/// latent mean at the selected steps. `Method::Cl` classifies the corrupted
/// images directly and reports a single step. Sample `i` always sees the same
/// corruption and inference noise, whatever the chunking or thread count.
pub fn ood_accuracy(
    method: Method,
    engine: Option<&Engine<'_>>,
    classifier: &Classifier,
    test: &Dataset,
    spec: &CorruptionSpec,
    cfg: &OodConfig,
) -> Result<AccuracyReport> {
    spec.validate()?;
    let n = test.len();
    if n == 0 {
        return Err(Error::Parameter("empty test set".into()));
    }
    let last = match (method, engine) {
        (Method::Cl, _) => 0,
        (Method::Model(s), Some(e)) if e.cfg.scheme == s => e.steps(Mode::Eval),
        (Method::Model(s), _) => {
            return Err(Error::Contract(format!("{s} evaluation needs a {s} engine")));
        }
    };
    let noise_seed = cfg.noise_seed();
    let parts = map_chunks(cfg.exec, n, EVAL_CHUNK, |r| {
        let x = corrupt_rows(test.images.slice(s![r.clone(), ..]), spec, r.start as u64)?;
        let labels = &test.labels[r.clone()];
        match (method, engine) {
            (Method::Model(_), Some(engine)) => {
                let ids: Vec<u64> = (r.start as u64..r.end as u64).collect();
                let mut obs = CountingObserver {
                    classifier,
                    labels,
                    selection: cfg.selection,
                    last,
                    steps: Vec::new(),
                    correct: Vec::new(),
                };
                engine.run(x.view(), Mode::Eval, NoiseSource { seed: noise_seed, ids: &ids }, &mut obs)?;
                Ok((obs.steps, obs.correct))
            }
            _ => {
                let pred = classifier.predict(x.view(), Exec::Sequential)?;
                let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
                Ok((vec![0], vec![hits]))
            }
        }
    })?;
    let expected = match method {
        Method::Cl => vec![0],
        Method::Model(_) => cfg.selection.steps(last),
    };
    let mut totals = vec![0usize; expected.len()];
    for (steps, correct) in parts {
        if steps != expected {
            return Err(Error::Contract(format!(
                "classified steps {:?}.. do not match the {} expected",
                &steps[..steps.len().min(4)],
                expected.len()
            )));
        }
        totals.iter_mut().zip(correct).for_each(|(t, c)| *t += c);
    }
    let per_step: Vec<StepAccuracy> = expected
        .iter()
        .zip(&totals)
        .map(|(&step, &c)| StepAccuracy {
            step,
            accuracy: c as f64 / n as f64,
        })
        .collect();
    Ok(AccuracyReport {
        method,
        spec: *spec,
        inner_steps: last,
        final_accuracy: per_step.last().expect("step 0 is always classified").accuracy,
        per_step,
        n,
    })
}

/// Final accuracy of one iVAE per β on each corruption.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaRow {
    pub beta: f32,
    pub spec: CorruptionSpec,
    pub accuracy: f64,
}

/// `models` pairs each β with an engine over the iVAE trained at that β.
pub fn beta_sweep(
    models: &[(f32, Engine<'_>)],
    classifier: &Classifier,
    test: &Dataset,
    specs: &[CorruptionSpec],
    cfg: &OodConfig,
) -> Result<Vec<BetaRow>> {
    let cfg = OodConfig {
        selection: StepSelection::Endpoints,
        ..*cfg
    };
    let mut rows = Vec::new();
    for spec in specs {
        for (beta, engine) in models {
            if engine.cfg.scheme != Scheme::Ivae {
                return Err(Error::Contract(format!("β sweep over {} models", engine.cfg.scheme)));
            }
            let r = ood_accuracy(Method::Model(Scheme::Ivae), Some(engine), classifier, test, spec, &cfg)?;
            rows.push(BetaRow {
                beta: *beta,
                spec: *spec,
                accuracy: r.final_accuracy,
            });
        }
    }
    Ok(rows)
}

/// Decoded latent means at the given steps for a batch; `steps` must be sorted.
pub fn reconstructions_at(
    engine: &Engine<'_>,
    x: ArrayView2<f32>,
    first_id: u64,
    steps: &[usize],
    seed: u64,
) -> Result<Vec<Array2<f32>>> {
    struct Grab<'s> {
        steps: &'s [usize],
        out: Vec<Array2<f32>>,
    }
    impl TraceObserver for Grab<'_> {
        fn wants_reconstruction(&self, step: usize) -> bool {
            self.steps.contains(&step)
        }
        fn observe(&mut self, view: &StepView<'_>) -> Result<()> {
            if let Some(r) = view.reconstruction {
                for _ in self.steps.iter().filter(|&&s| s == view.step) {
                    self.out.push(r.to_owned());
                }
            }
            Ok(())
        }
    }
    let last = engine.steps(Mode::Eval);
    if let Some(bad) = steps.iter().find(|&&s| s > last) {
        return Err(Error::Parameter(format!("step {bad} beyond K = {last}")));
    }
    let ids: Vec<u64> = (first_id..first_id + x.nrows() as u64).collect();
    let mut grab = Grab { steps, out: Vec::new() };
    let noise = NoiseSource {
        seed: derive_seed(&[tags::EVAL_NOISE, seed]),
        ids: &ids,
    };
    engine.run(x, Mode::Eval, noise, &mut grab)?;
    Ok(grab.out)
}
