use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::classifier::Classifier;
use super::ood::{OodConfig, EVAL_CHUNK};
use super::stats::spearman;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::{Engine, Mode, NoiseSource, Scheme, StepView, TraceObserver};
use crate::par::{map_chunks, Exec};

pub const CENTILES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypicalityRecord {
    pub id: usize,
    pub label: u8,
    /// Negated β = 1 loss at the final inference step (constants dropped).
    pub elbo: f64,
    /// First step whose reconstruction is classified correctly; `None` if
    /// no step within the run is (censored).
    pub steps_to_correct: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentileRow {
    /// 0 holds the lowest ELBO values.
    pub centile: usize,
    pub n: usize,
    pub censored: usize,
    /// Mean over uncensored samples.
    pub mean_steps: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TypicalityReport {
    pub records: Vec<TypicalityRecord>,
    pub centiles: Vec<CentileRow>,
    pub censored_fraction: f64,
    /// Spearman correlation between centile index and mean steps-to-correct.
    pub spearman: f64,
    pub inner_steps: usize,
}

struct FirstCorrect<'a> {
    classifier: &'a Classifier,
    labels: &'a [u8],
    first: Vec<Option<usize>>,
}

impl TraceObserver for FirstCorrect<'_> {
    fn wants_reconstruction(&self, _step: usize) -> bool {
        self.first.iter().any(Option::is_none)
    }

    fn observe(&mut self, view: &StepView<'_>) -> Result<()> {
        let Some(recon) = view.reconstruction else {
            return Ok(());
        };
        let pending: Vec<usize> = (0..self.first.len()).filter(|&i| self.first[i].is_none()).collect();
        if pending.is_empty() {
            return Ok(());
        }
        let rows = Array2::from_shape_fn((pending.len(), recon.ncols()), |(r, c)| recon[[pending[r], c]]);
        let pred = self.classifier.predict(rows.view(), Exec::Sequential)?;
        for (&i, p) in pending.iter().zip(pred) {
            if p == self.labels[i] {
                self.first[i] = Some(view.step);
            }
        }
        Ok(())
    }
}

/// Runs iVAE inference on clean test images, recording each sample's ELBO at
/// the final step and the first step at which its reconstruction is
/// recognized, then summarizes mean steps per ELBO centile.
pub fn typicality_analysis(
    engine: &Engine<'_>,
    classifier: &Classifier,
    test: &Dataset,
    cfg: &OodConfig,
) -> Result<TypicalityReport> {
    if engine.cfg.scheme != Scheme::Ivae {
        return Err(Error::Contract(format!("typicality needs an ivae engine, got {}", engine.cfg.scheme)));
    }
    let noise_seed = cfg.noise_seed();
    let parts = map_chunks(cfg.exec, test.len(), EVAL_CHUNK, |r| {
        let x = test.images.slice(s![r.clone(), ..]);
        let labels = &test.labels[r.clone()];
        let ids: Vec<u64> = (r.start as u64..r.end as u64).collect();
        let mut obs = FirstCorrect {
            classifier,
            labels,
            first: vec![None; labels.len()],
        };
        let out = engine.run(x, Mode::Eval, NoiseSource { seed: noise_seed, ids: &ids }, &mut obs)?;
        Ok(out
            .losses
            .iter()
            .zip(obs.first)
            .enumerate()
            .map(|(i, (l, first))| TypicalityRecord {
                id: r.start + i,
                label: labels[i],
                elbo: -(l.reconstruction as f64 + l.kl_or_prior as f64),
                steps_to_correct: first,
            })
            .collect::<Vec<_>>())
    })?;
    let records: Vec<TypicalityRecord> = parts.concat();
    let centiles = centile_summary(&records);
    Ok(TypicalityReport {
        censored_fraction: records.iter().filter(|r| r.steps_to_correct.is_none()).count() as f64
            / records.len().max(1) as f64,
        spearman: centile_spearman(&centiles),
        centiles,
        records,
        inner_steps: engine.steps(Mode::Eval),
    })
}

/// Bins records into [`CENTILES`] equal-count ELBO bins.
pub fn centile_summary(records: &[TypicalityRecord]) -> Vec<CentileRow> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].elbo.total_cmp(&records[b].elbo).then(a.cmp(&b)));
    let mut rows: Vec<CentileRow> = (0..CENTILES)
        .map(|c| CentileRow {
            centile: c,
            n: 0,
            censored: 0,
            mean_steps: None,
        })
        .collect();
    let mut sums = vec![0.0f64; CENTILES];
    let n = records.len();
    for (rank, &i) in order.iter().enumerate() {
        let c = rank * CENTILES / n.max(1);
        rows[c].n += 1;
        match records[i].steps_to_correct {
            Some(s) => sums[c] += s as f64,
            None => rows[c].censored += 1,
        }
    }
    for (row, sum) in rows.iter_mut().zip(sums) {
        let uncensored = row.n - row.censored;
        if uncensored > 0 {
            row.mean_steps = Some(sum / uncensored as f64);
        }
    }
    rows
}

pub fn centile_spearman(rows: &[CentileRow]) -> f64 {
    let (c, m): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter_map(|r| r.mean_steps.map(|m| (r.centile as f64, m)))
        .unzip();
    spearman(&c, &m)
}

/// Per digit class, the ids of up to `per_quartile` samples from each ELBO
/// quartile (lowest quartile first), spread evenly within the quartile.
pub fn quartile_examples(records: &[TypicalityRecord], per_quartile: usize) -> Vec<[Vec<usize>; 4]> {
    (0..10u8)
        .map(|digit| {
            let mut class: Vec<&TypicalityRecord> = records.iter().filter(|r| r.label == digit).collect();
            class.sort_by(|a, b| a.elbo.total_cmp(&b.elbo).then(a.id.cmp(&b.id)));
            let n = class.len();
            std::array::from_fn(|q| {
                let (lo, hi) = (q * n / 4, (q + 1) * n / 4);
                let len = hi - lo;
                let take = per_quartile.min(len);
                (0..take).map(|k| class[lo + k * len / take.max(1)].id).collect()
            })
        })
        .collect()
}
