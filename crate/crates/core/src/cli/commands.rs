use std::path::{Path, PathBuf};

use super::assets::{classifier_config, generative_checkpoint, train_generative, AssetStore};
use super::checkpoint::{ArtifactKind, Checkpoint, CheckpointMeta};
use super::config::RunConfig;
use super::config::Method;
use super::output::{heatmap, image_sheet, write_csv, write_loss_csv, write_pgm, write_ppm};
use crate::data::{corrupt_rows, load_mnist, CorruptionSpec, Dataset, NoiseKind, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::eval::stats::spearman;
use crate::eval::{
    beta_sweep, elbo_landscape, ood_accuracy, quartile_examples, reconstructions_at, train_classifier,
    typicality_analysis, GridConfig, OodConfig, StepSelection, Surface,
};
use crate::inference::{Engine, Mode, Scheme};
use crate::par::Exec;
use ndarray::Array2;

/// Files written by a command.
#[derive(Clone, Debug, Default)]
pub struct Written(pub Vec<PathBuf>);

pub fn write_config(dir: &Path, stem: &str, cfg: &RunConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{stem}.config.json"));
    std::fs::write(&path, cfg.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn store_for(cfg: &RunConfig, exec: Exec) -> AssetStore {
    let mut store = AssetStore::new(cfg.out_dir.clone(), cfg.data_dir.clone(), cfg.profile);
    store.seed = cfg.seed;
    store.exec = exec;
    store
}

/// Trains one generative scheme; writes the checkpoint, its loss curve and config.
pub fn cmd_train(cfg: &RunConfig, exec: Exec) -> Result<Written> {
    cfg.validate()?;
    let (train, _) = load_mnist(&cfg.data_dir)?;
    let (learner, history) = train_generative(cfg, &train, exec)?;
    let path = store_for(cfg, exec).generative_path(cfg.scheme, cfg.beta, cfg.latent_dim);
    generative_checkpoint(cfg, &learner, &history).save(&path)?;
    let loss = path.with_extension("loss.csv");
    write_loss_csv(&loss, &history)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("train").to_string();
    let config = write_config(path.parent().unwrap_or(Path::new(".")), &stem, cfg)?;
    log::info!("{} optimizer steps", learner.optimizer_steps());
    Ok(Written(vec![path, loss, config]))
}

pub fn cmd_classifier_train(cfg: &RunConfig, exec: Exec) -> Result<Written> {
    cfg.validate()?;
    let (train, test) = load_mnist(&cfg.data_dir)?;
    let (clf, accuracy) = train_classifier(&train, &test, &classifier_config(cfg), exec)?;
    let path = store_for(cfg, exec).classifier_path();
    let meta = CheckpointMeta {
        kind: ArtifactKind::Classifier,
        config: cfg.clone(),
        history: vec![],
        test_accuracy: Some(accuracy),
    };
    Checkpoint::classifier(meta, &clf).save(&path)?;
    println!("clean test accuracy {accuracy:.4}");
    Ok(Written(vec![path]))
}

/// Every (scheme, β, latent size) the experiments read.
pub const EXPERIMENT_ASSETS: [(Scheme, f32, usize); 8] = [
    (Scheme::Vae, 1.0, 15),
    (Scheme::Ivae, 1.0, 15),
    (Scheme::Svi, 1.0, 15),
    (Scheme::Pcn, 1.0, 15),
    (Scheme::Ivae, 0.0, 15),
    (Scheme::Ivae, 2.0, 15),
    (Scheme::Ivae, 1.0, 2),
    (Scheme::Vae, 1.0, 2),
];

/// Trains the classifier and every experiment model not yet on disk.
pub fn cmd_prepare(cfg: &RunConfig, exec: Exec) -> Result<Written> {
    let store = store_for(cfg, exec);
    let mut out = Written::default();
    store.classifier()?;
    out.0.push(store.classifier_path());
    for (scheme, beta, d) in EXPERIMENT_ASSETS {
        store.generative(scheme, beta, d)?;
        out.0.push(store.generative_path(scheme, beta, d));
    }
    Ok(out)
}

fn eval_store(cfg: &RunConfig, exec: Exec) -> AssetStore {
    let mut store = store_for(cfg, exec);
    store.train_missing = false;
    store
}

fn test_subset(store: &AssetStore, cfg: &RunConfig) -> Result<Dataset> {
    let test = store.test()?;
    Ok(match cfg.eval_samples {
        Some(n) => test.head(n),
        None => test.clone(),
    })
}

fn out_dir(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    let dir = cfg.out_dir.join(cfg.profile.tag()).join(name);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Engine configuration for `scheme` taken from `cfg`, keeping the
/// scheme's own inner learning rates unless they were overridden.
fn scheme_config(cfg: &RunConfig, scheme: Scheme) -> RunConfig {
    let mut c = cfg.for_scheme(scheme);
    if cfg.scheme == scheme {
        c.eval_inner_steps = cfg.eval_inner_steps;
        c.eval_inner_lr = cfg.eval_inner_lr;
    } else if scheme.is_iterative() && cfg.scheme.is_iterative() {
        c.eval_inner_steps = cfg.eval_inner_steps;
    }
    c
}

/// The corruptions swept by `eval`: the requested one, or every kind at
/// levels 1–4.
fn eval_specs(cfg: &RunConfig, kind: Option<NoiseKind>, explicit_level: bool) -> Result<Vec<CorruptionSpec>> {
    match (kind, explicit_level) {
        (Some(k), true) => Ok(vec![CorruptionSpec::new(k, cfg.level, cfg.seed)]),
        (Some(NoiseKind::None), false) => Ok(vec![CorruptionSpec::new(NoiseKind::None, 0.0, cfg.seed)]),
        (Some(k), false) => (1..=4).map(|i| CorruptionSpec::canonical(k, i, cfg.seed)).collect(),
        (None, _) => NoiseKind::CORRUPTIONS
            .iter()
            .flat_map(|&k| (1..=4).map(move |i| CorruptionSpec::canonical(k, i, cfg.seed)))
            .collect(),
    }
}

/// Accuracy of every method on every requested corruption. Writes
/// `accuracy_steps.csv` and `accuracy_final.csv`, both with columns
/// `scheme,noise_kind,noise_level,step,accuracy,n`.
pub fn cmd_eval(
    cfg: &RunConfig,
    methods: &[Method],
    kind: Option<NoiseKind>,
    explicit_level: bool,
    exec: Exec,
) -> Result<Written> {
    let store = eval_store(cfg, exec);
    let (classifier, clean) = store.classifier()?;
    log::info!("classifier gate passed: {clean:.4}");
    let test = test_subset(&store, cfg)?;
    let specs = eval_specs(cfg, kind, explicit_level)?;
    let ood = OodConfig::new(StepSelection::Every(cfg.step_stride), exec, cfg.seed);
    let mut steps_rows = Vec::new();
    let mut final_rows = Vec::new();
    for &method in methods {
        let assets = match method {
            Method::Model(s) => Some((s, store.generative(s, cfg.beta, cfg.latent_dim)?)),
            Method::Cl => None,
        };
        let engine_cfg = assets.as_ref().map(|(s, _)| scheme_config(cfg, *s).inference());
        let engine = match (&assets, engine_cfg) {
            (Some((_, m)), Some(ec)) => Some(Engine::new(&m.model, m.encoder.as_ref(), ec)?),
            _ => None,
        };
        for spec in &specs {
            let r = ood_accuracy(method, engine.as_ref(), &classifier, &test, spec, &ood)?;
            log::info!(
                "{method} {} {}: step 0 {:.4}, final {:.4}",
                spec.kind.tag(),
                spec.level,
                r.initial_accuracy(),
                r.final_accuracy
            );
            let row = |step: usize, acc: f64| {
                vec![
                    method.tag().to_string(),
                    spec.kind.tag().to_string(),
                    spec.level.to_string(),
                    step.to_string(),
                    acc.to_string(),
                    r.n.to_string(),
                ]
            };
            steps_rows.extend(r.per_step.iter().map(|s| row(s.step, s.accuracy)));
            final_rows.push(row(r.inner_steps, r.final_accuracy));
        }
    }
    let dir = out_dir(cfg, "eval")?;
    let header = ["scheme", "noise_kind", "noise_level", "step", "accuracy", "n"];
    let steps = dir.join("accuracy_steps.csv");
    let fin = dir.join("accuracy_final.csv");
    write_csv(&steps, &header, &steps_rows)?;
    write_csv(&fin, &header, &final_rows)?;
    let config = write_config(&dir, "eval", cfg)?;
    Ok(Written(vec![steps, fin, config]))
}

/// Final iVAE accuracy for β ∈ {0, 1, 2} on every requested corruption.
pub fn cmd_beta_sweep(cfg: &RunConfig, kind: Option<NoiseKind>, explicit_level: bool, exec: Exec) -> Result<Written> {
    let store = eval_store(cfg, exec);
    let (classifier, _) = store.classifier()?;
    let test = test_subset(&store, cfg)?;
    let betas = [0.0f32, 1.0, 2.0];
    let trained = betas
        .iter()
        .map(|&b| store.generative(Scheme::Ivae, b, cfg.latent_dim))
        .collect::<Result<Vec<_>>>()?;
    let engines = betas
        .iter()
        .zip(&trained)
        .map(|(&b, m)| {
            let mut c = scheme_config(cfg, Scheme::Ivae);
            c.beta = b;
            Ok((b, Engine::new(&m.model, m.encoder.as_ref(), c.inference())?))
        })
        .collect::<Result<Vec<_>>>()?;
    let specs = eval_specs(cfg, kind, explicit_level)?;
    let ood = OodConfig::new(StepSelection::Endpoints, exec, cfg.seed);
    let rows = beta_sweep(&engines, &classifier, &test, &specs, &ood)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.beta.to_string(),
                r.spec.kind.tag().to_string(),
                r.spec.level.to_string(),
                r.accuracy.to_string(),
                test.len().to_string(),
            ]
        })
        .collect();
    let dir = out_dir(cfg, "beta_sweep")?;
    let path = dir.join("beta_sweep.csv");
    write_csv(&path, &["beta", "noise_kind", "noise_level", "accuracy", "n"], &table)?;
    let config = write_config(&dir, "beta_sweep", cfg)?;
    Ok(Written(vec![path, config]))
}

fn grid_index(grid: &GridConfig, v: f32) -> usize {
    let t = (v - grid.lo) / (grid.hi - grid.lo) * (grid.resolution - 1) as f32;
    (t.round().max(0.0) as usize).min(grid.resolution - 1)
}

fn write_surface(path: &Path, grid: &GridConfig, s: &Surface) -> Result<()> {
    let mut markers = vec![((grid_index(grid, s.argmin[0]), grid_index(grid, s.argmin[1])), [230, 30, 30])];
    if let Some(init) = s.init {
        markers.push(((grid_index(grid, init[0]), grid_index(grid, init[1])), [255, 255, 255]));
    }
    let (w, h, rgb) = heatmap(&s.values, &markers);
    write_ppm(path, w, h, &rgb)
}

/// Clean and corrupted loss surfaces of the 2-latent models for the first
/// test digits (20 unless `--eval-samples` says otherwise). Salt & pepper
/// at p = 0.3 unless a noise kind is given. Heatmaps mark the grid argmin
/// in red and the amortized posterior mean in white.
pub fn cmd_landscape(cfg: &RunConfig, kind: Option<NoiseKind>, exec: Exec) -> Result<Written> {
    let store = eval_store(cfg, exec);
    let test = store.test()?;
    let spec = match kind {
        Some(k) => CorruptionSpec::new(k, cfg.level, cfg.seed),
        None => CorruptionSpec::new(NoiseKind::SaltPepper, 0.3, cfg.seed),
    };
    let grid = GridConfig {
        seed: cfg.seed,
        ..GridConfig::default()
    };
    let n = cfg.eval_samples.unwrap_or(20).min(test.len());
    let dir = out_dir(cfg, "landscape")?;
    let mut written = Vec::new();
    for scheme in [Scheme::Ivae, Scheme::Vae] {
        let m = match store.generative(scheme, cfg.beta, 2) {
            Ok(m) => m,
            Err(Error::Asset(msg)) if scheme == Scheme::Vae => {
                log::warn!("skipping vae landscapes: {msg}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut summary = Vec::new();
        let mut grid_rows = Vec::new();
        for id in 0..n {
            let x = test.images.row(id).to_vec();
            let l = elbo_landscape(&m.model, m.encoder.as_ref(), &x, id as u64, &spec, &grid, exec)?;
            let rho = spearman(
                &l.clean.values.iter().map(|&v| v as f64).collect::<Vec<_>>(),
                &l.corrupted.values.iter().map(|&v| v as f64).collect::<Vec<_>>(),
            );
            for ((i, j), v) in l.clean.values.indexed_iter() {
                grid_rows.push(vec![
                    id.to_string(),
                    grid.coordinate(i).to_string(),
                    grid.coordinate(j).to_string(),
                    v.to_string(),
                    l.corrupted.values[[i, j]].to_string(),
                ]);
            }
            let fmt = |p: Option<[f32; 2]>| p.map_or(["".into(), "".into()], |p| [p[0].to_string(), p[1].to_string()]);
            let mut row = vec![id.to_string(), test.labels[id].to_string(), rho.to_string()];
            row.extend(fmt(Some(l.clean.argmin)));
            row.extend(fmt(Some(l.corrupted.argmin)));
            row.extend(fmt(l.clean.init));
            row.extend(fmt(l.corrupted.init));
            summary.push(row);
            let stem = format!("{scheme}-{id:02}");
            write_surface(&dir.join(format!("{stem}-clean.ppm")), &grid, &l.clean)?;
            write_surface(&dir.join(format!("{stem}-{}.ppm", spec.kind.tag())), &grid, &l.corrupted)?;
            let (w, h, px) = image_sheet(&[vec![Some(&l.image[..]), Some(&l.corrupted_image[..])]], IMAGE_SIDE);
            write_pgm(&dir.join(format!("{stem}-input.pgm")), w, h, &px)?;
        }
        let s = dir.join(format!("{scheme}-markers.csv"));
        write_csv(
            &s,
            &[
                "id",
                "label",
                "spearman",
                "argmin_clean_1",
                "argmin_clean_2",
                "argmin_corrupted_1",
                "argmin_corrupted_2",
                "init_clean_1",
                "init_clean_2",
                "init_corrupted_1",
                "init_corrupted_2",
            ],
            &summary,
        )?;
        let g = dir.join(format!("{scheme}-grid.csv"));
        write_csv(&g, &["id", "mu1", "mu2", "loss_clean", "loss_corrupted"], &grid_rows)?;
        written.extend([s, g]);
    }
    written.push(write_config(&dir, "landscape", cfg)?);
    Ok(Written(written))
}

/// Steps-to-correct against ELBO centile for the β = 1 iVAE on clean test
/// images, plus per-class quartile sheets (lowest ELBO quartile on the left).
pub fn cmd_typicality(cfg: &RunConfig, exec: Exec) -> Result<Written> {
    let store = eval_store(cfg, exec);
    let (classifier, _) = store.classifier()?;
    let test = test_subset(&store, cfg)?;
    let m = store.generative(Scheme::Ivae, 1.0, cfg.latent_dim)?;
    let mut ec = scheme_config(cfg, Scheme::Ivae);
    ec.beta = 1.0;
    let engine = Engine::new(&m.model, m.encoder.as_ref(), ec.inference())?;
    let report = typicality_analysis(&engine, &classifier, &test, &OodConfig::new(StepSelection::All, exec, cfg.seed))?;
    log::info!(
        "typicality: spearman {:.3}, censored {:.4}",
        report.spearman,
        report.censored_fraction
    );
    let dir = out_dir(cfg, "typicality")?;
    let records = dir.join("records.csv");
    let rows: Vec<Vec<String>> = report
        .records
        .iter()
        .map(|r| {
            vec![
                r.id.to_string(),
                r.label.to_string(),
                r.elbo.to_string(),
                r.steps_to_correct.map_or(String::new(), |s| s.to_string()),
                r.steps_to_correct.is_none().to_string(),
            ]
        })
        .collect();
    write_csv(&records, &["id", "label", "elbo", "steps_to_correct", "censored"], &rows)?;
    let centiles = dir.join("centiles.csv");
    let rows: Vec<Vec<String>> = report
        .centiles
        .iter()
        .map(|c| {
            vec![
                c.centile.to_string(),
                c.n.to_string(),
                c.censored.to_string(),
                c.mean_steps.map_or(String::new(), |m| m.to_string()),
            ]
        })
        .collect();
    write_csv(&centiles, &["centile", "n", "censored", "mean_steps"], &rows)?;
    let summary = dir.join("summary.csv");
    write_csv(
        &summary,
        &["spearman", "censored_fraction", "inner_steps", "n"],
        &[vec![
            report.spearman.to_string(),
            report.censored_fraction.to_string(),
            report.inner_steps.to_string(),
            report.records.len().to_string(),
        ]],
    )?;
    let per_quartile = 4;
    let quartiles = quartile_examples(&report.records, per_quartile);
    let image = |id: usize| test.images.row(id).to_slice().map(|s| s.to_vec());
    let tiles: Vec<Vec<Option<Vec<f32>>>> = quartiles
        .iter()
        .map(|q| {
            q.iter()
                .flat_map(|ids| (0..per_quartile).map(move |k| ids.get(k).copied()))
                .map(|id| id.and_then(image))
                .collect()
        })
        .collect();
    let rows: Vec<Vec<Option<&[f32]>>> = tiles.iter().map(|r| r.iter().map(|t| t.as_deref()).collect()).collect();
    let (w, h, px) = image_sheet(&rows, IMAGE_SIDE);
    let sheet = dir.join("quartiles.pgm");
    write_pgm(&sheet, w, h, &px)?;
    let config = write_config(&dir, "typicality", cfg)?;
    Ok(Written(vec![records, centiles, summary, sheet, config]))
}

/// Steps actually shown for a run of `k` inner steps: requests beyond `k`
/// show the final state.
pub fn panel_steps(requested: &[usize], k: usize) -> Vec<usize> {
    requested.iter().map(|&s| s.min(k)).collect()
}

/// One sheet per (corruption, test image): a row per scheme holding the
/// corrupted input, the reconstructions at the requested steps, and the
/// clean target.
pub fn cmd_reconstruct(
    cfg: &RunConfig,
    methods: &[Method],
    requested: &[usize],
    kind: Option<NoiseKind>,
    exec: Exec,
) -> Result<Written> {
    let store = eval_store(cfg, exec);
    let test = store.test()?;
    let schemes: Vec<Scheme> = methods
        .iter()
        .filter_map(|m| match m {
            Method::Model(s) => Some(*s),
            Method::Cl => None,
        })
        .collect();
    let kinds = match kind {
        Some(k) => vec![CorruptionSpec::new(k, cfg.level, cfg.seed)],
        None => NoiseKind::CORRUPTIONS
            .iter()
            .map(|&k| CorruptionSpec::canonical(k, 3, cfg.seed))
            .collect::<Result<_>>()?,
    };
    let n = cfg.eval_samples.unwrap_or(3).min(test.len());
    let models = schemes
        .iter()
        .map(|&s| store.generative(s, cfg.beta, cfg.latent_dim).map(|m| (s, m)))
        .collect::<Result<Vec<_>>>()?;
    let dir = out_dir(cfg, "reconstruct")?;
    let mut written = Vec::new();
    for spec in &kinds {
        let x = corrupt_rows(test.images.slice(ndarray::s![0..n, ..]), spec, 0)?;
        let mut panels: Vec<Vec<Array2<f32>>> = Vec::new();
        for (s, m) in &models {
            let engine = Engine::new(&m.model, m.encoder.as_ref(), scheme_config(cfg, *s).inference())?;
            let steps = panel_steps(requested, engine.steps(Mode::Eval));
            let mut sorted = steps.clone();
            sorted.sort_unstable();
            let grabbed = reconstructions_at(&engine, x.view(), 0, &sorted, cfg.seed)?;
            panels.push(steps.iter().map(|st| grabbed[sorted.iter().position(|v| v == st).unwrap()].clone()).collect());
        }
        for i in 0..n {
            let input = x.row(i).to_vec();
            let target = test.images.row(i).to_vec();
            let rows: Vec<Vec<Option<&[f32]>>> = panels
                .iter()
                .map(|p| {
                    let mut row = vec![Some(&input[..])];
                    row.extend(p.iter().map(|a| a.row(i).to_slice()));
                    row.push(Some(&target[..]));
                    row
                })
                .collect();
            let (w, h, px) = image_sheet(&rows, IMAGE_SIDE);
            let path = dir.join(format!("{}-{}-{i:02}.pgm", spec.kind.tag(), spec.level));
            write_pgm(&path, w, h, &px)?;
            written.push(path);
        }
    }
    written.push(write_config(&dir, "reconstruct", cfg)?);
    Ok(Written(written))
}
