//! Training objectives: noisy cycle consistency, guess (honesty) losses,
//! embedding capacity penalty, LS-GAN realism and identity losses.
//!
//! Every function exists in two layers. Graph builders
//! ([`build_generator_terms`], [`build_discriminator_terms`]) assemble the
//! differentiable step losses and are what the trainer backpropagates
//! through. The standalone operations (`noisy_cycle_loss`, `gan_losses`,
//! ...) evaluate single terms to plain scalars for reporting and tests.

use std::collections::BTreeMap;

use ndarray::{Array4, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::{Direction, ModelBundle};
use crate::nn::{Graph, NodeId};
use crate::datagen::Domain;
use crate::{Result, RiftError};

/// Gaussian noise channel amplitudes: `sigma_s` on images entering the
/// backward half of the cycle, `sigma_g` on guide embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma_s: f64,
    pub sigma_g: f64,
    pub rng_seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma_s: 0.02,
            sigma_g: 0.25,
            rng_seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_s.is_finite() && self.sigma_s >= 0.0)
            || !(self.sigma_g.is_finite() && self.sigma_g >= 0.0)
        {
            return Err(RiftError::Config(
                "noise amplitudes must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn silent() -> Self {
        NoiseConfig {
            sigma_s: 0.0,
            sigma_g: 0.0,
            rng_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_cyc: f64,
    pub w_guess: f64,
    pub w_norm: f64,
    pub w_gan: f64,
    pub w_idt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_cyc: 8.0,
            w_guess: 2.0,
            w_norm: 0.03,
            w_gan: 3.0,
            w_idt: 3.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("w_cyc", self.w_cyc),
            ("w_guess", self.w_guess),
            ("w_norm", self.w_norm),
            ("w_gan", self.w_gan),
            ("w_idt", self.w_idt),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(RiftError::Config(format!(
                    "{name} must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }

    pub fn zeros() -> Self {
        LossWeights {
            w_cyc: 0.0,
            w_guess: 0.0,
            w_norm: 0.0,
            w_gan: 0.0,
            w_idt: 0.0,
        }
    }
}

/// Per-term scalar values for one step, keyed by term name.
pub type LossReport = BTreeMap<String, f64>;

pub const REPORT_KEYS: [&str; 12] = [
    "cyc_A", "cyc_B", "guess_A", "guess_B", "norm_A", "norm_B", "gan_A", "gan_B", "idt_A",
    "idt_B", "total_G", "total_D",
];

/// Cycle reconstructions computed by `noisy_cycle_loss`, reusable by the
/// guess losses within the same training step.
#[derive(Clone, Debug)]
pub struct CycleCache {
    pub step_id: u64,
    pub a_cyc: Array4<f64>,
    pub b_cyc: Array4<f64>,
}

impl CycleCache {
    fn check_step(&self, current_step: u64) -> Result<()> {
        if self.step_id != current_step {
            return Err(RiftError::StaleCache {
                cache_step: self.step_id,
                current_step,
            });
        }
        Ok(())
    }
}

fn check_batches(bundle: &ModelBundle, a: &Array4<f64>, b: &Array4<f64>) -> Result<()> {
    if a.dim().0 == 0 || b.dim().0 == 0 {
        return Err(RiftError::EmptyBatch);
    }
    bundle.check_image_batch(a)?;
    bundle.check_image_batch(b)
}

/// x + N(0, sigma) with a fresh draw; returns x unchanged when sigma is 0.
fn add_noise(g: &mut Graph, x: NodeId, sigma: f64, rng: &mut ChaCha8Rng) -> NodeId {
    if sigma == 0.0 {
        return x;
    }
    let normal = Normal::new(0.0, sigma).unwrap();
    let shape = g.value(x).raw_dim();
    let noise = ArrayD::from_shape_fn(shape, |_| normal.sample(rng));
    let n = g.constant(noise);
    g.add(x, n)
}

fn mean_sq(g: &mut Graph, x: NodeId) -> NodeId {
    let s = g.square(x);
    g.mean(s)
}

fn mean_one_minus_sq(g: &mut Graph, x: NodeId) -> NodeId {
    let d = g.one_minus(x, 1.0);
    mean_sq(g, d)
}

/// Node ids of every generator-side loss term plus the cycle images.
pub struct GeneratorTerms {
    pub cyc_a: NodeId,
    pub cyc_b: NodeId,
    pub guess_a: NodeId,
    pub guess_b: NodeId,
    pub norm_a: NodeId,
    pub norm_b: NodeId,
    pub gan_a: NodeId,
    pub gan_b: NodeId,
    pub idt_a: NodeId,
    pub idt_b: NodeId,
    pub total: NodeId,
    pub a_cyc: NodeId,
    pub b_cyc: NodeId,
}

struct CycleNodes {
    cyc_a: NodeId,
    cyc_b: NodeId,
    a_cyc: NodeId,
    b_cyc: NodeId,
}

/// One noisy cycle per direction:
/// a_cyc = G_B2A(G_A2B(a, s_B(b) + eps_g) + eps_s, s_A(a) + eps_g).
fn build_cycle(
    g: &mut Graph,
    bundle: &ModelBundle,
    a: NodeId,
    b: NodeId,
    emb_a: NodeId,
    emb_b: NodeId,
    noise: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> CycleNodes {
    let mut one = |g: &mut Graph, src, src_emb, guide_emb, dir: Direction| {
        let guide = add_noise(g, guide_emb, noise.sigma_g, rng);
        let fake = bundle.generate_node(g, dir, src, guide);
        let fake = add_noise(g, fake, noise.sigma_s, rng);
        let back = add_noise(g, src_emb, noise.sigma_g, rng);
        let cyc = bundle.generate_node(g, dir.reverse(), fake, back);
        let loss = g.l1(src, cyc);
        (cyc, loss)
    };
    let (a_cyc, cyc_a) = one(g, a, emb_a, emb_b, Direction::A2B);
    let (b_cyc, cyc_b) = one(g, b, emb_b, emb_a, Direction::B2A);
    CycleNodes {
        cyc_a,
        cyc_b,
        a_cyc,
        b_cyc,
    }
}

/// Generator-side guess objective on one domain:
/// [D^gs(orig, cyc)]^2 + [1 - D^gs(cyc, orig)]^2, means over batch and
/// patch map.
fn build_guess_gen(
    g: &mut Graph,
    bundle: &ModelBundle,
    domain: Domain,
    orig: NodeId,
    cyc: NodeId,
) -> NodeId {
    let fwd = bundle.guess_node(g, domain, orig, cyc);
    let rev = bundle.guess_node(g, domain, cyc, orig);
    let t1 = mean_sq(g, fwd);
    let t2 = mean_one_minus_sq(g, rev);
    g.add(t1, t2)
}

/// Discriminator-side guess objective: push D^gs(orig, cyc) -> 1 and
/// D^gs(cyc, orig) -> 0.
fn build_guess_disc(
    g: &mut Graph,
    bundle: &ModelBundle,
    domain: Domain,
    orig: NodeId,
    cyc: NodeId,
) -> NodeId {
    let fwd = bundle.guess_node(g, domain, orig, cyc);
    let rev = bundle.guess_node(g, domain, cyc, orig);
    let t1 = mean_one_minus_sq(g, fwd);
    let t2 = mean_sq(g, rev);
    g.add(t1, t2)
}

/// Build every generator-side term in one graph. `rng` supplies fresh noise
/// for each term.
pub fn build_generator_terms(
    g: &mut Graph,
    bundle: &ModelBundle,
    a: NodeId,
    b: NodeId,
    weights: &LossWeights,
    noise: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> GeneratorTerms {
    let emb_a = bundle.encode_node(g, Domain::A, a);
    let emb_b = bundle.encode_node(g, Domain::B, b);

    let cycle = build_cycle(g, bundle, a, b, emb_a, emb_b, noise, rng);
    let guess_a = build_guess_gen(g, bundle, Domain::A, a, cycle.a_cyc);
    let guess_b = build_guess_gen(g, bundle, Domain::B, b, cycle.b_cyc);

    let norm_a = g.batch_mean_sq_norm(emb_a);
    let norm_b = g.batch_mean_sq_norm(emb_b);

    // realism: fake images must score 1 under the frozen discriminators
    let guide_b = add_noise(g, emb_b, noise.sigma_g, rng);
    let fake_b = bundle.generate_node(g, Direction::A2B, a, guide_b);
    let score_b = bundle.discriminate_node(g, Domain::B, fake_b);
    let gan_b = mean_one_minus_sq(g, score_b);
    let guide_a = add_noise(g, emb_a, noise.sigma_g, rng);
    let fake_a = bundle.generate_node(g, Direction::B2A, b, guide_a);
    let score_a = bundle.discriminate_node(g, Domain::A, fake_a);
    let gan_a = mean_one_minus_sq(g, score_a);

    // self-translation with own embedding must reproduce the input
    let own_a = add_noise(g, emb_a, noise.sigma_g, rng);
    let idt_a_img = bundle.generate_node(g, Direction::B2A, a, own_a);
    let idt_a = g.l1(idt_a_img, a);
    let own_b = add_noise(g, emb_b, noise.sigma_g, rng);
    let idt_b_img = bundle.generate_node(g, Direction::A2B, b, own_b);
    let idt_b = g.l1(idt_b_img, b);

    let mut total_parts = Vec::new();
    let mut weighted = |g: &mut Graph, w: f64, x: NodeId, y: NodeId| {
        let s = g.add(x, y);
        total_parts.push(g.scale(s, w));
    };
    weighted(g, weights.w_cyc, cycle.cyc_a, cycle.cyc_b);
    weighted(g, weights.w_guess, guess_a, guess_b);
    weighted(g, weights.w_norm, norm_a, norm_b);
    weighted(g, weights.w_gan, gan_a, gan_b);
    weighted(g, weights.w_idt, idt_a, idt_b);
    let total = g.add_n(&total_parts);

    GeneratorTerms {
        cyc_a: cycle.cyc_a,
        cyc_b: cycle.cyc_b,
        guess_a,
        guess_b,
        norm_a,
        norm_b,
        gan_a,
        gan_b,
        idt_a,
        idt_b,
        total,
        a_cyc: cycle.a_cyc,
        b_cyc: cycle.b_cyc,
    }
}

/// Node ids of every discriminator-side loss term.
pub struct DiscriminatorTerms {
    pub gan_a: NodeId,
    pub gan_b: NodeId,
    pub guess_a: NodeId,
    pub guess_b: NodeId,
    pub total: NodeId,
}

/// Build the discriminator-side terms. Fake and cycle images are passed in
/// as plain arrays (from the generator pass), so no gradient reaches the
/// generators by construction. With `include_guess` false the guess terms
/// are still reported but left out of the total, freezing the guess
/// discriminators.
pub fn build_discriminator_terms(
    g: &mut Graph,
    bundle: &ModelBundle,
    a: NodeId,
    b: NodeId,
    fake_a: &Array4<f64>,
    fake_b: &Array4<f64>,
    cache: &CycleCache,
    include_guess: bool,
) -> DiscriminatorTerms {
    let fa = g.constant(fake_a.clone().into_dyn());
    let fb = g.constant(fake_b.clone().into_dyn());
    let a_cyc = g.constant(cache.a_cyc.clone().into_dyn());
    let b_cyc = g.constant(cache.b_cyc.clone().into_dyn());

    let gan = |g: &mut Graph, domain, real, fake| {
        let rs = bundle.discriminate_node(g, domain, real);
        let fs = bundle.discriminate_node(g, domain, fake);
        let t1 = mean_one_minus_sq(g, rs);
        let t2 = mean_sq(g, fs);
        g.add(t1, t2)
    };
    let gan_a = gan(g, Domain::A, a, fa);
    let gan_b = gan(g, Domain::B, b, fb);
    let guess_a = build_guess_disc(g, bundle, Domain::A, a, a_cyc);
    let guess_b = build_guess_disc(g, bundle, Domain::B, b, b_cyc);
    let s1 = g.add(gan_a, gan_b);
    let total = if include_guess {
        let s2 = g.add(guess_a, guess_b);
        g.add(s1, s2)
    } else {
        s1
    };
    DiscriminatorTerms {
        gan_a,
        gan_b,
        guess_a,
        guess_b,
        total,
    }
}

/// Noisy cycle consistency losses and the cycle reconstructions, tagged
/// with `step_id` for cache-staleness checks.
pub fn noisy_cycle_loss(
    bundle: &ModelBundle,
    a: &Array4<f64>,
    b: &Array4<f64>,
    noise: &NoiseConfig,
    step_id: u64,
) -> Result<(f64, f64, CycleCache)> {
    check_batches(bundle, a, b)?;
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.rng_seed);
    let mut g = Graph::new(&bundle.store, None);
    let an = g.constant(a.clone().into_dyn());
    let bn = g.constant(b.clone().into_dyn());
    let emb_a = bundle.encode_node(&mut g, Domain::A, an);
    let emb_b = bundle.encode_node(&mut g, Domain::B, bn);
    let cycle = build_cycle(&mut g, bundle, an, bn, emb_a, emb_b, noise, &mut rng);
    let cache = CycleCache {
        step_id,
        a_cyc: to4(g.value(cycle.a_cyc)),
        b_cyc: to4(g.value(cycle.b_cyc)),
    };
    Ok((g.scalar(cycle.cyc_a), g.scalar(cycle.cyc_b), cache))
}

/// Generator-side guess losses evaluated on cached cycle images.
pub fn guess_loss_generator(
    bundle: &ModelBundle,
    a: &Array4<f64>,
    b: &Array4<f64>,
    cache: &CycleCache,
    current_step: u64,
) -> Result<(f64, f64)> {
    check_batches(bundle, a, b)?;
    cache.check_step(current_step)?;
    let mut g = Graph::new(&bundle.store, None);
    let an = g.constant(a.clone().into_dyn());
    let bn = g.constant(b.clone().into_dyn());
    let ac = g.constant(cache.a_cyc.clone().into_dyn());
    let bc = g.constant(cache.b_cyc.clone().into_dyn());
    let la = build_guess_gen(&mut g, bundle, Domain::A, an, ac);
    let lb = build_guess_gen(&mut g, bundle, Domain::B, bn, bc);
    Ok((g.scalar(la), g.scalar(lb)))
}

/// Discriminator-side guess losses evaluated on cached cycle images.
pub fn guess_loss_discriminator(
    bundle: &ModelBundle,
    a: &Array4<f64>,
    b: &Array4<f64>,
    cache: &CycleCache,
    current_step: u64,
) -> Result<(f64, f64)> {
    check_batches(bundle, a, b)?;
    cache.check_step(current_step)?;
    let mut g = Graph::new(&bundle.store, None);
    let an = g.constant(a.clone().into_dyn());
    let bn = g.constant(b.clone().into_dyn());
    let ac = g.constant(cache.a_cyc.clone().into_dyn());
    let bc = g.constant(cache.b_cyc.clone().into_dyn());
    let la = build_guess_disc(&mut g, bundle, Domain::A, an, ac);
    let lb = build_guess_disc(&mut g, bundle, Domain::B, bn, bc);
    Ok((g.scalar(la), g.scalar(lb)))
}

/// Mean over the batch of the squared Euclidean norm of each flattened
/// embedding.
pub fn capacity_loss(embeddings: &Array4<f64>) -> Result<f64> {
    let n = embeddings.dim().0;
    if n == 0 {
        return Err(RiftError::EmptyBatch);
    }
    Ok(embeddings.iter().map(|v| v * v).sum::<f64>() / n as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct GanScalars {
    pub gen_a: f64,
    pub gen_b: f64,
    pub disc_a: f64,
    pub disc_b: f64,
}

/// LS-GAN realism terms for both domains, both sides of the split.
pub fn gan_losses(
    bundle: &ModelBundle,
    a: &Array4<f64>,
    b: &Array4<f64>,
    noise: &NoiseConfig,
) -> Result<GanScalars> {
    check_batches(bundle, a, b)?;
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.rng_seed);
    let mut g = Graph::new(&bundle.store, None);
    let an = g.constant(a.clone().into_dyn());
    let bn = g.constant(b.clone().into_dyn());
    let emb_a = bundle.encode_node(&mut g, Domain::A, an);
    let emb_b = bundle.encode_node(&mut g, Domain::B, bn);

    let mut one = |g: &mut Graph, src, guide_emb, dir: Direction, real| {
        let guide = add_noise(g, guide_emb, noise.sigma_g, &mut rng);
        let fake = bundle.generate_node(g, dir, src, guide);
        let fs = bundle.discriminate_node(g, dir.target_domain(), fake);
        let rs = bundle.discriminate_node(g, dir.target_domain(), real);
        let gen = mean_one_minus_sq(g, fs);
        let d1 = mean_one_minus_sq(g, rs);
        let d2 = mean_sq(g, fs);
        let disc = g.add(d1, d2);
        (gen, disc)
    };
    let (gen_b, disc_b) = one(&mut g, an, emb_b, Direction::A2B, bn);
    let (gen_a, disc_a) = one(&mut g, bn, emb_a, Direction::B2A, an);
    Ok(GanScalars {
        gen_a: g.scalar(gen_a),
        gen_b: g.scalar(gen_b),
        disc_a: g.scalar(disc_a),
        disc_b: g.scalar(disc_b),
    })
}

/// L1 between the self-translation G_Y2X(x, s_X(x) + eps_g) and x.
pub fn identity_loss(
    bundle: &ModelBundle,
    a: &Array4<f64>,
    b: &Array4<f64>,
    noise: &NoiseConfig,
) -> Result<(f64, f64)> {
    check_batches(bundle, a, b)?;
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.rng_seed);
    let mut g = Graph::new(&bundle.store, None);
    let an = g.constant(a.clone().into_dyn());
    let bn = g.constant(b.clone().into_dyn());
    let emb_a = bundle.encode_node(&mut g, Domain::A, an);
    let emb_b = bundle.encode_node(&mut g, Domain::B, bn);
    let own_a = add_noise(&mut g, emb_a, noise.sigma_g, &mut rng);
    let ia = bundle.generate_node(&mut g, Direction::B2A, an, own_a);
    let la = g.l1(ia, an);
    let own_b = add_noise(&mut g, emb_b, noise.sigma_g, &mut rng);
    let ib = bundle.generate_node(&mut g, Direction::A2B, bn, own_b);
    let lb = g.l1(ib, bn);
    Ok((g.scalar(la), g.scalar(lb)))
}

fn finite(report: &LossReport) -> Result<()> {
    for (k, v) in report {
        if !v.is_finite() {
            return Err(RiftError::NonFinite(k.clone()));
        }
    }
    Ok(())
}

/// Every loss term of one step as plain scalars.
pub fn total_losses(
    bundle: &ModelBundle,
    a: &Array4<f64>,
    b: &Array4<f64>,
    weights: &LossWeights,
    noise: &NoiseConfig,
) -> Result<LossReport> {
    check_batches(bundle, a, b)?;
    weights.validate()?;
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.rng_seed);
    let mut g = Graph::new(&bundle.store, None);
    let an = g.constant(a.clone().into_dyn());
    let bn = g.constant(b.clone().into_dyn());
    let terms = build_generator_terms(&mut g, bundle, an, bn, weights, noise, &mut rng);

    // discriminator side reuses this step's fakes and cycles
    let guide_b = {
        let emb_b = bundle.encode_node(&mut g, Domain::B, bn);
        add_noise(&mut g, emb_b, noise.sigma_g, &mut rng)
    };
    let fake_b = bundle.generate_node(&mut g, Direction::A2B, an, guide_b);
    let guide_a = {
        let emb_a = bundle.encode_node(&mut g, Domain::A, an);
        add_noise(&mut g, emb_a, noise.sigma_g, &mut rng)
    };
    let fake_a = bundle.generate_node(&mut g, Direction::B2A, bn, guide_a);
    let cache = CycleCache {
        step_id: 0,
        a_cyc: to4(g.value(terms.a_cyc)),
        b_cyc: to4(g.value(terms.b_cyc)),
    };
    let fake_a_v = to4(g.value(fake_a));
    let fake_b_v = to4(g.value(fake_b));
    let mut dg = Graph::new(&bundle.store, None);
    let dan = dg.constant(a.clone().into_dyn());
    let dbn = dg.constant(b.clone().into_dyn());
    let disc = build_discriminator_terms(&mut dg, bundle, dan, dbn, &fake_a_v, &fake_b_v, &cache, true);

    let mut report = LossReport::new();
    report.insert("cyc_A".into(), g.scalar(terms.cyc_a));
    report.insert("cyc_B".into(), g.scalar(terms.cyc_b));
    report.insert("guess_A".into(), g.scalar(terms.guess_a));
    report.insert("guess_B".into(), g.scalar(terms.guess_b));
    report.insert("norm_A".into(), g.scalar(terms.norm_a));
    report.insert("norm_B".into(), g.scalar(terms.norm_b));
    report.insert("gan_A".into(), g.scalar(terms.gan_a));
    report.insert("gan_B".into(), g.scalar(terms.gan_b));
    report.insert("idt_A".into(), g.scalar(terms.idt_a));
    report.insert("idt_B".into(), g.scalar(terms.idt_b));
    report.insert("total_G".into(), g.scalar(terms.total));
    report.insert("total_D".into(), dg.scalar(disc.total));
    finite(&report)?;
    Ok(report)
}

fn to4(v: &ArrayD<f64>) -> Array4<f64> {
    v.clone().into_dimensionality().expect("4-d tensor")
}
