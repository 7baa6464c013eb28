//! Alternating adversarial training: one discriminator-side update, then
//! one generator-side update per step, with seeded determinism, periodic
//! checkpoints and line-delimited metric logging.
//!
//! Every random draw of step `t` comes from an RNG derived from
//! `(seed, t)` alone, so a resumed run replays the exact trajectory of an
//! uninterrupted one.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Domain, LoadedDataset};
use crate::losses::{
    build_discriminator_terms, build_generator_terms, CycleCache, LossReport, LossWeights,
    NoiseConfig,
};
use crate::model::{
    load_checkpoint, save_checkpoint, CheckpointMeta, ModelBundle, ModelConfig,
};
use crate::nn::{Adam, AdamState, Graph, Side};
use crate::{Result, RiftError};

fn default_batch_size() -> usize {
    4
}
fn default_lr_g() -> f64 {
    2e-4
}
fn default_lr_d() -> f64 {
    4e-4
}
fn default_beta1() -> f64 {
    0.5
}
fn default_beta2() -> f64 {
    0.999
}
fn default_checkpoint_every() -> u64 {
    1000
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Dataset directory produced by datagen.
    pub data_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub steps: u64,
    #[serde(default = "default_lr_g")]
    pub lr_g: f64,
    #[serde(default = "default_lr_d")]
    pub lr_d: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub disable_norm: bool,
    #[serde(default)]
    pub disable_guess: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.noise.validate()?;
        if self.steps == 0 {
            return Err(RiftError::Config("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(RiftError::Config("batch_size must be >= 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(RiftError::Config("checkpoint_every must be >= 1".into()));
        }
        for (name, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(RiftError::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Loss weights after applying the ablation flags.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.disable_norm {
            w.w_norm = 0.0;
        }
        if self.disable_guess {
            w.w_guess = 0.0;
        }
        w
    }
}

/// Mutable training state: model, optimizers and the step counter.
/// `step` counts completed steps.
pub struct TrainState {
    pub config: TrainConfig,
    pub bundle: ModelBundle,
    pub step: u64,
    opt_g: Adam,
    opt_d: Adam,
}

const STREAM_BATCH: u64 = 1;
const STREAM_FORWARD: u64 = 2;
const STREAM_GEN: u64 = 3;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG for one (seed, step, stream) triple; stateless across the run so a
/// resume replays draws exactly.
pub(crate) fn step_rng(seed: u64, step: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed ^ mix(step) ^ mix(stream << 17)))
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut model_cfg = config.model;
        model_cfg.seed = config.seed;
        let bundle = ModelBundle::new(model_cfg)?;
        let opt_g = Adam::new(
            &bundle.store,
            Side::Generator,
            config.lr_g,
            config.beta1,
            config.beta2,
        );
        let opt_d = Adam::new(
            &bundle.store,
            Side::Discriminator,
            config.lr_d,
            config.beta1,
            config.beta2,
        );
        Ok(TrainState {
            config,
            bundle,
            step: 0,
            opt_g,
            opt_d,
        })
    }

    /// Uniform batch draw (with replacement) from one domain of the
    /// dataset.
    pub fn sample_batch(
        &self,
        dataset: &LoadedDataset,
        domain: Domain,
        rng: &mut ChaCha8Rng,
    ) -> Result<Array4<f64>> {
        let indices = dataset.indices_in(domain);
        if indices.is_empty() {
            return Err(RiftError::EmptyBatch);
        }
        let picks: Vec<&crate::datagen::Image> = (0..self.config.batch_size)
            .map(|_| &dataset.images[indices[rng.gen_range(0..indices.len())]])
            .collect();
        Ok(crate::model::stack_images(&picks))
    }

    /// One discriminator update then one generator update. Returns the
    /// step's loss report.
    pub fn train_step(&mut self, a: &Array4<f64>, b: &Array4<f64>) -> Result<LossReport> {
        let weights = self.config.effective_weights();
        let noise = self.config.noise;
        let step = self.step;
        let seed = self.config.seed;

        // forward-only pass under current parameters produces the fake and
        // cycle images the discriminators train against
        let mut rng_f = step_rng(seed, step, STREAM_FORWARD);
        let mut fg = Graph::new(&self.bundle.store, None);
        let an = fg.constant(a.clone().into_dyn());
        let bn = fg.constant(b.clone().into_dyn());
        let ft = build_generator_terms(&mut fg, &self.bundle, an, bn, &weights, &noise, &mut rng_f);
        let cache = CycleCache {
            step_id: step,
            a_cyc: to4(fg.value(ft.a_cyc)),
            b_cyc: to4(fg.value(ft.b_cyc)),
        };
        let (fake_a, fake_b) = fakes_for_disc(&self.bundle, a, b, &noise, &mut rng_f);
        drop(fg);

        let mut dg = Graph::new(&self.bundle.store, Some(Side::Discriminator));
        let dan = dg.constant(a.clone().into_dyn());
        let dbn = dg.constant(b.clone().into_dyn());
        let dt = build_discriminator_terms(
            &mut dg,
            &self.bundle,
            dan,
            dbn,
            &fake_a,
            &fake_b,
            &cache,
            !self.config.disable_guess,
        );
        let total_d = dg.scalar(dt.total);
        check_finite("total_D", total_d)?;
        let d_grads = dg.backward(dt.total)?;
        self.opt_d.step(&mut self.bundle.store, &d_grads);
        drop(dg);

        // generator update sees the freshly updated discriminators
        let mut rng_g = step_rng(seed, step, STREAM_GEN);
        let mut gg = Graph::new(&self.bundle.store, Some(Side::Generator));
        let gan = gg.constant(a.clone().into_dyn());
        let gbn = gg.constant(b.clone().into_dyn());
        let gt = build_generator_terms(&mut gg, &self.bundle, gan, gbn, &weights, &noise, &mut rng_g);

        let mut report = LossReport::new();
        for (key, node) in [
            ("cyc_A", gt.cyc_a),
            ("cyc_B", gt.cyc_b),
            ("guess_A", gt.guess_a),
            ("guess_B", gt.guess_b),
            ("norm_A", gt.norm_a),
            ("norm_B", gt.norm_b),
            ("gan_A", gt.gan_a),
            ("gan_B", gt.gan_b),
            ("idt_A", gt.idt_a),
            ("idt_B", gt.idt_b),
            ("total_G", gt.total),
        ] {
            let v = gg.scalar(node);
            check_finite(key, v)?;
            report.insert(key.to_string(), v);
        }
        report.insert("total_D".into(), total_d);

        let g_grads = gg.backward(gt.total)?;
        self.opt_g.step(&mut self.bundle.store, &g_grads);
        self.step += 1;
        Ok(report)
    }

    fn checkpoint_meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            model: self.bundle.cfg,
            seed: self.config.seed,
            step: self.step,
            extra: serde_json::to_value(&self.config).unwrap_or(serde_json::Value::Null),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.bundle, &self.checkpoint_meta())?;
        let opt = OptimizerFile {
            opt_g: self.opt_g.export_state(),
            opt_d: self.opt_d.export_state(),
        };
        let path = dir.join("optimizer.json");
        let json =
            serde_json::to_string(&opt).map_err(|e| RiftError::Invalid(e.to_string()))?;
        std::fs::write(&path, json).map_err(|e| RiftError::io(&path, e))
    }

    /// Rebuild the exact state stored by [`save`]; the train config is
    /// taken from the checkpoint sidecar.
    pub fn resume(dir: &Path) -> Result<Self> {
        let (bundle, meta) = load_checkpoint(dir)?;
        let config: TrainConfig = serde_json::from_value(meta.extra.clone())
            .map_err(|e| RiftError::Config(format!("checkpoint train config: {e}")))?;
        let mut state = TrainState {
            opt_g: Adam::new(
                &bundle.store,
                Side::Generator,
                config.lr_g,
                config.beta1,
                config.beta2,
            ),
            opt_d: Adam::new(
                &bundle.store,
                Side::Discriminator,
                config.lr_d,
                config.beta1,
                config.beta2,
            ),
            config,
            bundle,
            step: meta.step,
        };
        let path = dir.join("optimizer.json");
        let json = std::fs::read_to_string(&path).map_err(|e| RiftError::io(&path, e))?;
        let opt: OptimizerFile =
            serde_json::from_str(&json).map_err(|e| RiftError::Config(format!("{e}")))?;
        state.opt_g.import_state(&opt.opt_g)?;
        state.opt_d.import_state(&opt.opt_d)?;
        Ok(state)
    }
}

#[derive(Serialize, Deserialize)]
struct OptimizerFile {
    opt_g: AdamState,
    opt_d: AdamState,
}

/// Fresh fake images for the discriminator update, drawn with their own
/// noise.
fn fakes_for_disc(
    bundle: &ModelBundle,
    a: &Array4<f64>,
    b: &Array4<f64>,
    noise: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> (Array4<f64>, Array4<f64>) {
    use crate::model::Direction;
    let mut g = Graph::new(&bundle.store, None);
    let an = g.constant(a.clone().into_dyn());
    let bn = g.constant(b.clone().into_dyn());
    let emb_a = bundle.encode_node(&mut g, Domain::A, an);
    let emb_b = bundle.encode_node(&mut g, Domain::B, bn);
    let guide_b = add_noise_pub(&mut g, emb_b, noise.sigma_g, rng);
    let fb = bundle.generate_node(&mut g, Direction::A2B, an, guide_b);
    let guide_a = add_noise_pub(&mut g, emb_a, noise.sigma_g, rng);
    let fa = bundle.generate_node(&mut g, Direction::B2A, bn, guide_a);
    (to4(g.value(fa)), to4(g.value(fb)))
}

fn add_noise_pub(
    g: &mut Graph,
    x: crate::nn::NodeId,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> crate::nn::NodeId {
    if sigma == 0.0 {
        return x;
    }
    use rand_distr::Distribution;
    let normal = rand_distr::Normal::new(0.0, sigma).unwrap();
    let shape = g.value(x).raw_dim();
    let noise = ndarray::ArrayD::from_shape_fn(shape, |_| normal.sample(rng));
    let n = g.constant(noise);
    g.add(x, n)
}

fn check_finite(term: &str, v: f64) -> Result<()> {
    if !v.is_finite() {
        return Err(RiftError::NonFinite(term.to_string()));
    }
    Ok(())
}

fn to4(v: &ndarray::ArrayD<f64>) -> Array4<f64> {
    v.clone().into_dimensionality().expect("4-d tensor")
}

pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub last_report: Option<LossReport>,
}

pub fn checkpoint_dir(out: &Path, step: u64) -> PathBuf {
    out.join(format!("ckpt_{step:06}"))
}

/// Run (or continue) a training loop to `config.steps`, writing
/// checkpoints and metrics under `out`.
pub fn train(
    config: &TrainConfig,
    out: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let dataset = LoadedDataset::load(&config.data_dir)?;
    if dataset.manifest.split.resolution != config.model.resolution {
        return Err(RiftError::Config(format!(
            "dataset resolution {:?} does not match model resolution {:?}",
            dataset.manifest.split.resolution, config.model.resolution
        )));
    }
    let mut state = match resume_from {
        Some(dir) => TrainState::resume(dir)?,
        None => TrainState::new(config.clone())?,
    };

    std::fs::create_dir_all(out).map_err(|e| RiftError::io(out, e))?;
    // fresh runs overwrite so reruns are idempotent; resumed runs append
    let metrics_path = out.join("metrics.jsonl");
    let mut opts = std::fs::OpenOptions::new();
    opts.create(true);
    if resume_from.is_some() {
        opts.append(true);
    } else {
        opts.write(true).truncate(true);
    }
    let mut metrics = opts
        .open(&metrics_path)
        .map_err(|e| RiftError::io(&metrics_path, e))?;

    let mut last_report = None;
    while state.step < config.steps {
        let mut rng_b = step_rng(config.seed, state.step, STREAM_BATCH);
        let a = state.sample_batch(&dataset, Domain::A, &mut rng_b)?;
        let b = state.sample_batch(&dataset, Domain::B, &mut rng_b)?;
        let this_step = state.step;
        let report = state.train_step(&a, &b)?;
        let line = serde_json::json!({ "step": this_step, "losses": report });
        writeln!(metrics, "{line}").map_err(|e| RiftError::io(&metrics_path, e))?;
        if state.step % config.checkpoint_every == 0 || state.step == config.steps {
            state.save(&checkpoint_dir(out, state.step))?;
        }
        last_report = Some(report);
    }
    // make sure the final step is checkpointed even off-cadence
    let final_dir = checkpoint_dir(out, state.step);
    if !final_dir.exists() {
        state.save(&final_dir)?;
    }
    Ok(TrainOutcome {
        final_checkpoint: final_dir,
        metrics_path,
        last_report,
    })
}
