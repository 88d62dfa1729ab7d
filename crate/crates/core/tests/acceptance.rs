//! End-to-end acceptance run at desk scale. Every criterion prints one
//! `PASS`/`FAIL` line; the test fails if any criterion does.
//!
//! Trained models come from the asset store (`target/iverlab/desk` by
//! default, see `IVERLAB_ARTIFACT_DIR`). Missing ones are trained first,
//! which takes hours; run `iverlab prepare --profile desk` to build them
//! ahead of time. With `IVERLAB_NO_TRAIN` set, missing models are failures.

mod common;

use std::io::Write;
use std::time::Instant;

use iverlab::cli::assets::{generative_checkpoint, TrainedModel};
use iverlab::cli::{AssetStore, Checkpoint, Profile};
use iverlab::data::{CorruptionSpec, Dataset, NoiseKind, Split};
use iverlab::eval::stats::{spearman, window_means};
use iverlab::eval::{
    distance, elbo_landscape, ood_accuracy, typicality_analysis, AccuracyReport, Classifier, GridConfig, Method,
    OodConfig, StepSelection,
};
use iverlab::inference::{fit, Engine, Learner, Scheme};
use iverlab::numerics::Parameters;
use iverlab::par::Exec;
use iverlab::Result;

const LATENT: usize = 15;
/// Test images used for per-step curves.
const CURVE_SAMPLES: usize = 2000;
/// Test images used for the noise-level and β comparisons.
const SWEEP_SAMPLES: usize = 3000;
const LANDSCAPE_DIGITS: usize = 20;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

/// Writes straight to the process stderr so the line shows in captured runs too.
fn report(id: usize, name: &str, res: &Result<Outcome>, secs: f64) -> bool {
    let (pass, detail) = match res {
        Ok(o) => (o.pass, o.detail.clone()),
        Err(e) => (false, format!("error: {e}")),
    };
    let line = format!(
        "{} C{id} {name}: {detail} [{secs:.0}s]\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    pass
}

fn run(id: usize, name: &str, f: &mut dyn FnMut() -> Result<Outcome>) -> bool {
    let t = Instant::now();
    let res = f();
    report(id, name, &res, t.elapsed().as_secs_f64())
}

struct Ctx {
    store: AssetStore,
    exec: Exec,
}

impl Ctx {
    fn model(&self, scheme: Scheme, beta: f32, latent: usize) -> Result<TrainedModel> {
        self.store.generative(scheme, beta, latent)
    }

    fn engine<'m>(&self, m: &'m TrainedModel) -> Result<Engine<'m>> {
        let cfg = self.store.config(m.config.scheme, m.config.beta, m.config.latent_dim);
        Engine::new(&m.model, m.encoder.as_ref(), cfg.inference())
    }

    fn ood(&self, selection: StepSelection) -> OodConfig {
        OodConfig::new(selection, self.exec, 0)
    }

    fn accuracy(
        &self,
        method: Method,
        model: Option<&TrainedModel>,
        clf: &Classifier,
        test: &Dataset,
        spec: &CorruptionSpec,
        selection: StepSelection,
    ) -> Result<AccuracyReport> {
        let engine = model.map(|m| self.engine(m)).transpose()?;
        ood_accuracy(method, engine.as_ref(), clf, test, spec, &self.ood(selection))
    }
}

fn math_core() -> Result<Outcome> {
    let (pc, pc_at) = common::pc_gradient_error(101);
    let (vae, vae_at) = common::vae_gradient_error(202);
    let kl = common::kl_monte_carlo_gap(1_000_000, 1);
    let elbo = common::elbo_form_gap(5);
    let delta = common::delta_offset_gap(10);
    let corruption = common::corruption_properties(3);
    let pass = pc < 1e-3 && vae < 1e-3 && kl < 0.01 && elbo < 1e-4 && delta < 1e-5 && corruption.is_ok();
    outcome(
        pass,
        format!(
            "grad rel err pc {pc:.1e} ({pc_at}) vae {vae:.1e} ({vae_at}); KL MC gap {kl:.4}; \
             ELBO forms {elbo:.1e}; delta offset {delta:.1e}; corruption {}",
            corruption.err().unwrap_or_else(|| "ok".into())
        ),
    )
}

fn white(level: usize) -> CorruptionSpec {
    CorruptionSpec::canonical(NoiseKind::WhiteNoise, level, 0).expect("canonical level")
}

fn pts(a: f64) -> f64 {
    100.0 * a
}

#[test]
fn acceptance() {
    let mut store = AssetStore::from_env(Profile::Desk);
    store.exec = Exec::Parallel;
    let ctx = Ctx { store, exec: Exec::Parallel };
    let mut all = true;

    all &= run(1, "math core", &mut math_core);

    let clf = ctx.store.classifier();
    let test = ctx.store.test().map(Dataset::clone);
    all &= run(2, "classifier gate", &mut || {
        let ((clf, acc), test) = match (&clf, &test) {
            (Ok(c), Ok(t)) => (c, t),
            (Err(e), _) | (_, Err(e)) => return outcome(false, format!("{e}")),
        };
        let clean = ctx.accuracy(Method::Cl, None, clf, test, &CorruptionSpec::none(), StepSelection::Endpoints)?;
        outcome(
            *acc >= 0.97 && clean.final_accuracy == *acc,
            format!("clean accuracy {acc:.4} (≥ 0.9700); cl pass-through {:.4}", clean.final_accuracy),
        )
    });
    let (clf, test) = match (clf, test) {
        (Ok((c, _)), Ok(t)) => (c, t),
        _ => {
            for (id, name) in [
                (3, "ordering at white σ=0.6"),
                (4, "step-axis trends"),
                (5, "noise-gap growth"),
                (6, "β effects"),
                (7, "landscape invariance"),
                (8, "typicality"),
            ] {
                report(id, name, &outcome(false, "no gated classifier or test data".into()), 0.0);
            }
            run(9, "engineering contracts", &mut || contracts(&ctx));
            panic!("acceptance criteria failed");
        }
    };

    let spec = white(3);
    let mut finals: Vec<(Method, AccuracyReport)> = Vec::new();
    all &= run(3, "ordering at white σ=0.6", &mut || {
        for method in Method::ALL {
            let m = match method {
                Method::Model(s) => Some(ctx.model(s, 1.0, LATENT)?),
                Method::Cl => None,
            };
            let r = ctx.accuracy(method, m.as_ref(), &clf, &test, &spec, StepSelection::Endpoints)?;
            finals.push((method, r));
        }
        let acc = |s: Scheme| finals.iter().find(|(m, _)| *m == Method::Model(s)).unwrap().1.final_accuracy;
        let cl = finals.iter().find(|(m, _)| *m == Method::Cl).unwrap().1.final_accuracy;
        let (iv, sv, pc, va) = (acc(Scheme::Ivae), acc(Scheme::Svi), acc(Scheme::Pcn), acc(Scheme::Vae));
        let order = iv >= sv && sv >= pc - 0.02 && iv >= va + 0.02;
        let above_cl = [iv, sv, pc, va].iter().all(|&a| a >= cl + 0.05);
        outcome(
            order && above_cl,
            format!(
                "n={} ivae {:.1} svi {:.1} pcn {:.1} vae {:.1} cl {:.1}; ordering {}; all ≥ cl+5 {}",
                test.len(),
                pts(iv),
                pts(sv),
                pts(pc),
                pts(va),
                pts(cl),
                order,
                above_cl
            ),
        )
    });

    all &= run(4, "step-axis trends", &mut || {
        let subset = test.head(CURVE_SAMPLES);
        let mut parts = Vec::new();
        let mut pass = true;
        for s in [Scheme::Ivae, Scheme::Svi, Scheme::Pcn] {
            let m = ctx.model(s, 1.0, LATENT)?;
            let r = ctx.accuracy(Method::Model(s), Some(&m), &clf, &subset, &spec, StepSelection::All)?;
            let curve = r.curve().expect("every step classified");
            let w = window_means(&curve, 10);
            let drops = w.windows(2).filter(|p| p[1] < p[0]).count();
            pass &= drops == 0;
            parts.push(format!("{s} {} window drops", drops));
        }
        let step0 = |s: Scheme| {
            finals
                .iter()
                .find(|(m, _)| *m == Method::Model(s))
                .map(|(_, r)| r.initial_accuracy())
        };
        let (iv0, va0, pc0, sv0) = match (step0(Scheme::Ivae), step0(Scheme::Vae), step0(Scheme::Pcn), step0(Scheme::Svi)) {
            (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
            _ => return outcome(false, "step-0 accuracies unavailable".into()),
        };
        let init_ok = (iv0 - va0).abs() <= 0.03 && (pc0 - 0.10).abs() <= 0.03 && (sv0 - 0.10).abs() <= 0.03;
        pass &= init_ok;
        outcome(
            pass,
            format!(
                "n={CURVE_SAMPLES}: {}; step 0 ivae {:.1} vs vae {:.1}, pcn {:.1}, svi {:.1}",
                parts.join(", "),
                pts(iv0),
                pts(va0),
                pts(pc0),
                pts(sv0)
            ),
        )
    });

    all &= run(5, "noise-gap growth", &mut || {
        let subset = test.head(SWEEP_SAMPLES);
        let ivae = ctx.model(Scheme::Ivae, 1.0, LATENT)?;
        let vae = ctx.model(Scheme::Vae, 1.0, LATENT)?;
        let mut pass = true;
        let mut parts = Vec::new();
        for kind in NoiseKind::CORRUPTIONS {
            let mut gaps = Vec::new();
            for level in [1, 4] {
                let spec = CorruptionSpec::canonical(kind, level, 0)?;
                let a = ctx.accuracy(Method::Model(Scheme::Ivae), Some(&ivae), &clf, &subset, &spec, StepSelection::Endpoints)?;
                let b = ctx.accuracy(Method::Model(Scheme::Vae), Some(&vae), &clf, &subset, &spec, StepSelection::Endpoints)?;
                gaps.push(a.final_accuracy - b.final_accuracy);
            }
            pass &= gaps[1] >= gaps[0];
            parts.push(format!("{} gap {:.1} → {:.1}", kind.tag(), pts(gaps[0]), pts(gaps[1])));
        }
        outcome(pass, format!("n={SWEEP_SAMPLES}: {}", parts.join(", ")))
    });

    all &= run(6, "β effects", &mut || {
        let subset = test.head(SWEEP_SAMPLES);
        let b0 = ctx.model(Scheme::Ivae, 0.0, LATENT)?;
        let b2 = ctx.model(Scheme::Ivae, 2.0, LATENT)?;
        let acc = |m: &TrainedModel, spec: &CorruptionSpec| {
            ctx.accuracy(Method::Model(Scheme::Ivae), Some(m), &clf, &subset, spec, StepSelection::Endpoints)
                .map(|r| r.final_accuracy)
        };
        let (hi0, hi2) = (acc(&b0, &white(4))?, acc(&b2, &white(4))?);
        let (lo0, lo2) = (acc(&b0, &white(1))?, acc(&b2, &white(1))?);
        let mut blur = Vec::new();
        for level in 1..=4 {
            let spec = CorruptionSpec::canonical(NoiseKind::Blur, level, 0)?;
            blur.push((acc(&b0, &spec)?, acc(&b2, &spec)?));
        }
        let high = hi2 >= hi0 + 0.01;
        let low = lo0 >= lo2 - 0.01;
        let flat = blur.iter().all(|(a, b)| (b - a).abs() < 0.03);
        outcome(
            high && low && flat,
            format!(
                "n={SWEEP_SAMPLES}: white 0.8 β0 {:.1} β2 {:.1}; white 0.2 β0 {:.1} β2 {:.1}; blur β2−β0 {}",
                pts(hi0),
                pts(hi2),
                pts(lo0),
                pts(lo2),
                blur.iter().map(|(a, b)| format!("{:+.1}", pts(b - a))).collect::<Vec<_>>().join("/")
            ),
        )
    });

    all &= run(7, "landscape invariance", &mut || {
        let m = ctx.model(Scheme::Ivae, 1.0, 2)?;
        let spec = CorruptionSpec::new(NoiseKind::SaltPepper, 0.3, 0);
        let grid = GridConfig::default();
        let mut rhos = Vec::new();
        let mut closer = 0;
        for id in 0..LANDSCAPE_DIGITS {
            let x = test.images.row(id).to_vec();
            let l = elbo_landscape(&m.model, m.encoder.as_ref(), &x, id as u64, &spec, &grid, ctx.exec)?;
            let flat = |s: &ndarray::Array2<f32>| s.iter().map(|&v| v as f64).collect::<Vec<_>>();
            rhos.push(spearman(&flat(&l.clean.values), &flat(&l.corrupted.values)));
            let init = l.corrupted.init.expect("ivae has an encoder");
            if distance(l.corrupted.argmin, l.clean.argmin) < distance(init, l.clean.argmin) {
                closer += 1;
            }
        }
        let mean = rhos.iter().sum::<f64>() / rhos.len() as f64;
        outcome(
            mean > 0.5 && 2 * closer > LANDSCAPE_DIGITS,
            format!("mean Spearman {mean:.3} (> 0.5); argmin closer than init for {closer}/{LANDSCAPE_DIGITS}"),
        )
    });

    all &= run(8, "typicality", &mut || {
        let m = ctx.model(Scheme::Ivae, 1.0, LATENT)?;
        let engine = ctx.engine(&m)?;
        let r = typicality_analysis(&engine, &clf, &test, &ctx.ood(StepSelection::All))?;
        outcome(
            r.spearman <= -0.8 && r.censored_fraction < 0.05,
            format!(
                "n={} K={}: Spearman {:.3} (≤ −0.8); censored {:.2}% (< 5%)",
                r.records.len(),
                r.inner_steps,
                r.spearman,
                100.0 * r.censored_fraction
            ),
        )
    });

    all &= run(9, "engineering contracts", &mut || contracts(&ctx));
    assert!(all, "acceptance criteria failed");
}

/// Checkpoint round trips, seeded replay of training and evaluation, and the
/// K = 0 gradient identity, all on real MNIST rows.
fn contracts(ctx: &Ctx) -> Result<Outcome> {
    let train = ctx.store.train()?;
    let rows = train.head(512);
    let mut notes = Vec::new();

    let mut cfg = ctx.store.config(Scheme::Ivae, 1.0, LATENT);
    cfg.train_inner_steps = 3;
    let replay = || -> Result<_> {
        let mut l = Learner::new(cfg.inference(), LATENT)?;
        let h = fit(&mut l, &rows, 1, 128, |_, _| Ok(()))?;
        Ok((l, h))
    };
    let (a, ha) = replay()?;
    let (b, hb) = replay()?;
    let replayed = ha == hb
        && a.model.checksum() == b.model.checksum()
        && a.encoder.as_ref().map(|e| e.checksum()) == b.encoder.as_ref().map(|e| e.checksum());
    notes.push(format!("training replay {replayed}"));

    let ck = generative_checkpoint(&cfg, &a, &ha);
    let bytes = ck.to_bytes()?;
    let back = Checkpoint::from_bytes(&bytes, std::path::Path::new("memory"))?;
    let (m, e) = back.to_generative()?;
    let mut round_trip = back.to_bytes()? == bytes
        && m.checksum() == a.model.checksum()
        && e.map(|e| e.checksum()) == a.encoder.as_ref().map(|e| e.checksum());
    let mut files = 0;
    if let Ok(dir) = std::fs::read_dir(ctx.store.generative_path(Scheme::Vae, 1.0, LATENT).parent().unwrap()) {
        for entry in dir.flatten() {
            let p = entry.path();
            if p.extension().is_some_and(|x| x == "ivlb") {
                let loaded = Checkpoint::load(&p)?;
                let once = loaded.to_bytes()?;
                let again = Checkpoint::from_bytes(&once, &p)?;
                round_trip &= again == loaded && again.to_bytes()? == once;
                files += 1;
            }
        }
    }
    notes.push(format!("checkpoint round trip {round_trip} ({files} files)"));

    let x = rows.images.slice(ndarray::s![0..64, ..]).to_owned();
    let mut k0 = ctx.store.config(Scheme::Ivae, 1.0, LATENT);
    k0.train_inner_steps = 0;
    let vae = Learner::new(ctx.store.config(Scheme::Vae, 1.0, LATENT).inference(), LATENT)?;
    let ivae = Learner::new(k0.inference(), LATENT)?;
    let (gv, gi) = (vae.gradients(x.view(), 11)?, ivae.gradients(x.view(), 11)?);
    let k0_equal = gv.theta == gi.theta && gv.phi == gi.phi && gv.loss == gi.loss;
    notes.push(format!("K=0 gradients equal {k0_equal}"));

    let m = TrainedModel {
        model: a.model.clone(),
        encoder: a.encoder.clone(),
        config: cfg.clone(),
        history: ha.clone(),
    };
    let eval_rows = Dataset::new(rows.images.slice(ndarray::s![0..300, ..]).to_owned(), rows.labels[..300].to_vec(), Split::Test)?;
    let clf = Classifier::new(&mut iverlab::rng::stream_rng(5, 0));
    let spec = white(3);
    let engine = ctx.engine(&m)?;
    let run_with = |exec| {
        ood_accuracy(
            Method::Model(Scheme::Ivae),
            Some(&engine),
            &clf,
            &eval_rows,
            &spec,
            &OodConfig::new(StepSelection::Every(25), exec, 3),
        )
    };
    let eval_replay = run_with(Exec::Parallel)? == run_with(Exec::Sequential)?;
    notes.push(format!("evaluation replay {eval_replay}"));

    outcome(replayed && round_trip && k0_equal && eval_replay, notes.join("; "))
}
