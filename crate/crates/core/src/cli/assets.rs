//! Trained models cached on disk, keyed by (scheme, β, latent size, seed).

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use super::checkpoint::{ArtifactKind, Checkpoint, CheckpointMeta};
use super::config::{Profile, RunConfig};
use super::output::write_loss_csv;
use crate::data::{load_mnist, Dataset};
use crate::error::{Error, Result};
use crate::eval::{train_classifier, Classifier, ClassifierConfig};
use crate::inference::{fit, EpochStats, Learner, Scheme};
use crate::models::{Encoder, GenerativeModel};
use crate::par::Exec;

pub const ARTIFACT_DIR_ENV: &str = "IVERLAB_ARTIFACT_DIR";
pub const DATA_DIR_ENV: &str = "IVERLAB_DATA_DIR";
/// When set, missing assets are an error instead of being trained.
pub const NO_TRAIN_ENV: &str = "IVERLAB_NO_TRAIN";

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: GenerativeModel,
    pub encoder: Option<Encoder>,
    pub config: RunConfig,
    pub history: Vec<EpochStats>,
}

/// Trains `cfg.scheme` on `train`; returns the learner and its loss curve.
pub fn train_generative(cfg: &RunConfig, train: &Dataset, exec: Exec) -> Result<(Learner, Vec<EpochStats>)> {
    cfg.validate()?;
    let mut learner = Learner::new(cfg.inference(), cfg.latent_dim)?.with_exec(exec);
    let history = fit(&mut learner, train, cfg.epochs, cfg.batch_size, |_, _| Ok(()))?;
    Ok((learner, history))
}

pub fn generative_checkpoint(cfg: &RunConfig, learner: &Learner, history: &[EpochStats]) -> Checkpoint {
    let meta = CheckpointMeta {
        kind: ArtifactKind::Generative,
        config: cfg.clone(),
        history: history.to_vec(),
        test_accuracy: None,
    };
    Checkpoint::generative(meta, &learner.model, learner.encoder.as_ref())
}

pub fn load_trained(path: &Path) -> Result<TrainedModel> {
    let ck = Checkpoint::load(path)?;
    let (model, encoder) = ck.to_generative()?;
    Ok(TrainedModel {
        model,
        encoder,
        config: ck.meta.config,
        history: ck.meta.history,
    })
}

pub fn load_classifier(path: &Path) -> Result<(Classifier, Option<f64>)> {
    let ck = Checkpoint::load(path)?;
    Ok((ck.to_classifier()?, ck.meta.test_accuracy))
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub struct AssetStore {
    pub root: PathBuf,
    pub data_dir: PathBuf,
    pub profile: Profile,
    pub seed: u64,
    pub exec: Exec,
    /// Train and cache missing models instead of failing.
    pub train_missing: bool,
    data: OnceLock<(Dataset, Dataset)>,
}

impl AssetStore {
    pub fn new(root: PathBuf, data_dir: PathBuf, profile: Profile) -> Self {
        AssetStore {
            root,
            data_dir,
            profile,
            seed: 0,
            exec: Exec::default(),
            train_missing: true,
            data: OnceLock::new(),
        }
    }

    /// Artifacts under `$IVERLAB_ARTIFACT_DIR` (default `target/iverlab`),
    /// data under `$IVERLAB_DATA_DIR` (default `data/mnist`).
    pub fn from_env(profile: Profile) -> Self {
        let root = std::env::var_os(ARTIFACT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| workspace_root().join("target/iverlab"));
        let data = std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| workspace_root().join("data/mnist"));
        let mut store = AssetStore::new(root, data, profile);
        store.train_missing = std::env::var_os(NO_TRAIN_ENV).is_none();
        store
    }

    pub fn data(&self) -> Result<&(Dataset, Dataset)> {
        if let Some(d) = self.data.get() {
            return Ok(d);
        }
        let loaded = load_mnist(&self.data_dir)?;
        Ok(self.data.get_or_init(|| loaded))
    }

    pub fn train(&self) -> Result<&Dataset> {
        Ok(&self.data()?.0)
    }

    pub fn test(&self) -> Result<&Dataset> {
        Ok(&self.data()?.1)
    }

    pub fn config(&self, scheme: Scheme, beta: f32, latent_dim: usize) -> RunConfig {
        let mut cfg = RunConfig::new("train", scheme, self.profile);
        cfg.beta = beta;
        cfg.latent_dim = latent_dim;
        cfg.seed = self.seed;
        cfg.data_dir = self.data_dir.clone();
        cfg.out_dir = self.dir();
        cfg
    }

    fn dir(&self) -> PathBuf {
        self.root.join(self.profile.tag())
    }

    pub fn generative_path(&self, scheme: Scheme, beta: f32, latent_dim: usize) -> PathBuf {
        self.dir()
            .join(format!("{scheme}-beta{beta}-d{latent_dim}-s{}.ivlb", self.seed))
    }

    pub fn classifier_path(&self) -> PathBuf {
        self.dir().join(format!("classifier-s{}.ivlb", self.seed))
    }

    fn may_train(&self, path: &Path) -> Result<()> {
        if !self.train_missing {
            return Err(Error::Asset(format!("missing checkpoint {}", path.display())));
        }
        Ok(())
    }

    /// Loads the cached model, training and caching it first if needed.
    pub fn generative(&self, scheme: Scheme, beta: f32, latent_dim: usize) -> Result<TrainedModel> {
        let path = self.generative_path(scheme, beta, latent_dim);
        if path.exists() {
            return load_trained(&path);
        }
        self.may_train(&path)?;
        let cfg = self.config(scheme, beta, latent_dim);
        log::info!("training {} for {}", scheme, path.display());
        let (learner, history) = train_generative(&cfg, self.train()?, self.exec)?;
        generative_checkpoint(&cfg, &learner, &history).save(&path)?;
        write_loss_csv(&path.with_extension("loss.csv"), &history)?;
        std::fs::write(path.with_extension("config.json"), cfg.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(TrainedModel {
            model: learner.model,
            encoder: learner.encoder,
            config: cfg,
            history,
        })
    }

    /// Loads (or trains) the classifier and re-checks its gate on clean test data.
    pub fn classifier(&self) -> Result<(Classifier, f64)> {
        let path = self.classifier_path();
        let (_, test) = self.data()?;
        if path.exists() {
            let (clf, _) = load_classifier(&path)?;
            let accuracy = clf.gate(test, self.exec)?;
            return Ok((clf, accuracy));
        }
        self.may_train(&path)?;
        let mut cfg = RunConfig::new("classifier-train", Scheme::Vae, self.profile);
        cfg.seed = self.seed;
        cfg.data_dir = self.data_dir.clone();
        cfg.out_dir = self.dir();
        let (clf, accuracy) = train_classifier(self.train()?, test, &classifier_config(&cfg), self.exec)?;
        let meta = CheckpointMeta {
            kind: ArtifactKind::Classifier,
            config: cfg,
            history: vec![],
            test_accuracy: Some(accuracy),
        };
        Checkpoint::classifier(meta, &clf).save(&path)?;
        Ok((clf, accuracy))
    }
}

pub fn classifier_config(cfg: &RunConfig) -> ClassifierConfig {
    ClassifierConfig {
        epochs: cfg.classifier_epochs,
        batch_size: cfg.classifier_batch_size,
        lr: cfg.lr,
        seed: cfg.seed,
    }
}
