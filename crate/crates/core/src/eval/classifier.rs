use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{batch_indices, gather, Dataset};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamConfig, AdamState, Graph, Layer, Parameters, Tensor, Var};
use crate::par::{map_chunks, Exec};
use crate::rng::{derive_seed, stream_rng, tags};

pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;
/// Minimum clean test accuracy before any evaluation may use the classifier.
pub const GATE_ACCURACY: f64 = 0.97;
pub const CLASSES: usize = 10;

const SIDE: usize = 28;
const KERNEL: usize = 3;
const PREDICT_CHUNK: usize = 128;

/// Two 3×3 convolutions (32 and 64 channels, relu), 2×2 max pooling, a
/// 128-unit relu layer and a 10-way log-softmax head.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub conv1: Layer,
    pub conv2: Layer,
    pub fc1: Layer,
    pub fc2: Layer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            epochs: 2,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

fn uniform_layer<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Layer {
    let bound = 1.0 / (fan_in as f32).sqrt();
    let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<f32>>();
    let weight = Tensor::new(&[fan_in, fan_out], draw(fan_in * fan_out)).expect("weight shape");
    let bias = Tensor::new(&[fan_out], draw(fan_out)).expect("bias shape");
    Layer { weight, bias }
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let pooled = (SIDE - 2 * (KERNEL - 1)) / 2;
        Classifier {
            conv1: uniform_layer(KERNEL * KERNEL, 32, rng),
            conv2: uniform_layer(KERNEL * KERNEL * 32, 64, rng),
            fc1: uniform_layer(pooled * pooled * 64, 128, rng),
            fc2: uniform_layer(128, CLASSES, rng),
        }
    }

    pub fn from_layers(conv1: Layer, conv2: Layer, fc1: Layer, fc2: Layer) -> Result<Self> {
        let c = Classifier { conv1, conv2, fc1, fc2 };
        let reference = Classifier::new(&mut stream_rng(0, 0));
        for (a, b) in c.tensors().iter().zip(reference.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::Dimension(format!(
                    "classifier tensor {:?}, expected {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(c)
    }

    /// Records the forward pass on raw `[0,1]` pixels; returns log-probabilities.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, x: ArrayView2<f32>, trainable: bool) -> Result<(Var, Vec<Var>)> {
        if x.ncols() != SIDE * SIDE {
            return Err(Error::Dimension(format!("classifier expects 784 pixels, got {}", x.ncols())));
        }
        let n = x.nrows();
        let data = x.iter().map(|v| (v - MNIST_MEAN) / MNIST_STD).collect();
        let input = g.constant(&[n, SIDE, SIDE, 1], data)?;
        let mut handles = Vec::with_capacity(8);
        let mut leaf = |g: &mut Graph<'a>, t: &'a Tensor| {
            let v = if trainable { g.param(t) } else { g.constant_ref(t) };
            handles.push(v);
            v
        };
        let (w1, b1) = (leaf(g, &self.conv1.weight), leaf(g, &self.conv1.bias));
        let (w2, b2) = (leaf(g, &self.conv2.weight), leaf(g, &self.conv2.bias));
        let (w3, b3) = (leaf(g, &self.fc1.weight), leaf(g, &self.fc1.bias));
        let (w4, b4) = (leaf(g, &self.fc2.weight), leaf(g, &self.fc2.bias));
        let h = g.conv2d(input, w1, b1, KERNEL)?;
        let h = g.relu(h);
        let h = g.conv2d(h, w2, b2, KERNEL)?;
        let h = g.relu(h);
        let h = g.max_pool2(h)?;
        let h = g.reshape(h, &[n, self.fc1.in_dim()])?;
        let h = g.linear(h, w3, b3)?;
        let h = g.relu(h);
        let h = g.linear(h, w4, b4)?;
        Ok((g.log_softmax(h), handles))
    }

    pub fn log_probs(&self, x: ArrayView2<f32>, exec: Exec) -> Result<Array2<f32>> {
        let parts = map_chunks(exec, x.nrows(), PREDICT_CHUNK, |r| {
            let mut g = Graph::new();
            let (lp, _) = self.forward(&mut g, x.slice(ndarray::s![r, ..]), false)?;
            Ok(g.value(lp).to_vec())
        })?;
        let data: Vec<f32> = parts.concat();
        let out = Array2::from_shape_vec((x.nrows(), CLASSES), data).expect("log-prob shape");
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("classifier log-probabilities".into()));
        }
        Ok(out)
    }

    pub fn predict(&self, x: ArrayView2<f32>, exec: Exec) -> Result<Vec<u8>> {
        let lp = self.log_probs(x, exec)?;
        Ok(lp
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (i, v) in r.iter().enumerate() {
                    if *v > r[best] {
                        best = i;
                    }
                }
                best as u8
            })
            .collect())
    }

    pub fn accuracy(&self, x: ArrayView2<f32>, labels: &[u8], exec: Exec) -> Result<f64> {
        if labels.len() != x.nrows() {
            return Err(Error::Integrity(format!("{} labels for {} images", labels.len(), x.nrows())));
        }
        Ok(fraction_correct(&self.predict(x, exec)?, labels))
    }

    /// Refuses classifiers below [`GATE_ACCURACY`] on `test`.
    pub fn gate(&self, test: &Dataset, exec: Exec) -> Result<f64> {
        let accuracy = self.accuracy(test.images.view(), &test.labels, exec)?;
        if accuracy < GATE_ACCURACY {
            return Err(Error::Gate {
                accuracy,
                threshold: GATE_ACCURACY,
            });
        }
        Ok(accuracy)
    }

    /// Mean cross-entropy and one Adam step on a labelled batch.
    pub fn train_step(&mut self, x: ArrayView2<f32>, labels: &[u8], opt: &mut AdamState) -> Result<f32> {
        let (loss, grads) = {
            let mut g = Graph::new();
            let (lp, handles) = self.forward(&mut g, x, true)?;
            let loss = g.nll_mean(lp, labels)?;
            let grads = g.backward(loss)?;
            let collected: Vec<Vec<f32>> = handles
                .iter()
                .zip(self.tensors())
                .map(|(h, t)| grads.get(*h).map_or_else(|| vec![0.0; t.len()], <[f32]>::to_vec))
                .collect();
            (g.scalar(loss), collected)
        };
        if !loss.is_finite() {
            return Err(Error::Numeric("classifier training loss".into()));
        }
        for (t, gr) in self.tensors_mut().into_iter().zip(&grads) {
            t.zero_grad();
            t.accumulate_grad(gr)?;
        }
        adam_step(self, opt)?;
        Ok(loss)
    }
}

pub fn fraction_correct(predicted: &[u8], labels: &[u8]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

impl Parameters for Classifier {
    fn tensors(&self) -> Vec<&Tensor> {
        [&self.conv1, &self.conv2, &self.fc1, &self.fc2]
            .into_iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        [&mut self.conv1, &mut self.conv2, &mut self.fc1, &mut self.fc2]
            .into_iter()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Trains with Adam on cross-entropy, then applies the accuracy gate on `test`.
/// Returns the classifier with its clean test accuracy.
pub fn train_classifier(train: &Dataset, test: &Dataset, cfg: &ClassifierConfig, exec: Exec) -> Result<(Classifier, f64)> {
    let mut rng: ChaCha8Rng = stream_rng(derive_seed(&[tags::INIT, cfg.seed]), 0);
    let mut clf = Classifier::new(&mut rng);
    let mut opt = AdamState::new(&clf, AdamConfig::with_lr(cfg.lr));
    for epoch in 0..cfg.epochs {
        let shuffle = derive_seed(&[tags::SHUFFLE, cfg.seed, epoch as u64]);
        let batches = batch_indices(train.len(), cfg.batch_size, shuffle)?;
        let mut total = 0.0f64;
        for (b, idx) in batches.iter().enumerate() {
            let (x, y) = gather(train, idx);
            let loss = clf.train_step(x.view(), &y, &mut opt)?;
            total += loss as f64 * idx.len() as f64;
            if b % 100 == 0 {
                log::debug!("classifier epoch {} batch {}/{}: nll {loss:.4}", epoch + 1, b + 1, batches.len());
            }
        }
        log::info!("classifier epoch {}/{}: nll {:.4}", epoch + 1, cfg.epochs, total / train.len().max(1) as f64);
    }
    let accuracy = clf.gate(test, exec)?;
    log::info!("classifier clean test accuracy {accuracy:.4}");
    Ok((clf, accuracy))
}
