//! Network roles and their composition: domain-specific encoders, guided
//! generators, image discriminators and guess discriminators, plus the
//! checkpoint format.
//!
//! The encoder and the generator that consume the same source domain share
//! their whole trunk; only the final heads differ. The guide embedding is a
//! single-channel image at bottleneck resolution, channel-concatenated into
//! the generator at the bottleneck.

use std::path::Path;

use ndarray::{Array4, ArrayD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datagen::{Domain, Image};
use crate::nn::{Graph, NodeId, ParamId, ParamStore, Side};
use crate::{Result, RiftError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    A2B,
    B2A,
}

impl Direction {
    pub fn source_domain(self) -> Domain {
        match self {
            Direction::A2B => Domain::A,
            Direction::B2A => Domain::B,
        }
    }

    pub fn target_domain(self) -> Domain {
        self.source_domain().opposite()
    }

    pub fn reverse(self) -> Direction {
        match self {
            Direction::A2B => Direction::B2A,
            Direction::B2A => Direction::A2B,
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Direction::A2B => write!(f, "A2B"),
            Direction::B2A => write!(f, "B2A"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub resolution: (usize, usize),
    /// Channel width of the first trunk layer; the bottleneck is 4x this.
    pub base_channels: usize,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            resolution: (32, 32),
            base_channels: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.resolution;
        if h < 8 || w < 8 || h % 4 != 0 || w % 4 != 0 {
            return Err(RiftError::Config(
                "model resolution must be >= 8 and divisible by 4".into(),
            ));
        }
        if self.base_channels == 0 {
            return Err(RiftError::Config("base_channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Spatial size of the generator bottleneck and of the domain-specific
    /// embedding (two stride-2 stages).
    pub fn bottleneck(&self) -> (usize, usize) {
        (self.resolution.0 / 4, self.resolution.1 / 4)
    }

    /// Element count of a domain-specific embedding; enters the capacity
    /// bound.
    pub fn embedding_dim(&self) -> usize {
        let (h, w) = self.bottleneck();
        h * w
    }

    /// Patch score map size for the documented discriminator stack
    /// (two stride-2 convs, one stride-1 conv, all 3x3 pad 1).
    pub fn patch_map(&self) -> (usize, usize) {
        let d = |x: usize| crate::nn::conv_out_size(x, 3, 2, 1);
        let s = |x: usize| crate::nn::conv_out_size(x, 3, 1, 1);
        (s(d(d(self.resolution.0))), s(d(d(self.resolution.1))))
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct Trunk {
    c1: Conv,
    c2: Conv,
    c3: Conv,
    r1a: Conv,
    r1b: Conv,
    r2a: Conv,
    r2b: Conv,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct Decoder {
    fuse: Conv,
    up1: Conv,
    up2: Conv,
    out: Conv,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct Disc {
    c1: Conv,
    c2: Conv,
    c3: Conv,
}

/// All networks of one model instance, backed by a single parameter store.
pub struct ModelBundle {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    trunk_a: Trunk,
    trunk_b: Trunk,
    enc_a: Conv,
    enc_b: Conv,
    dec_a2b: Decoder,
    dec_b2a: Decoder,
    disc_a: Disc,
    disc_b: Disc,
    guess_a: Disc,
    guess_b: Disc,
}

struct Init<'r> {
    rng: &'r mut ChaCha8Rng,
    normal: Normal<f64>,
}

impl<'r> Init<'r> {
    fn conv(
        &mut self,
        store: &mut ParamStore,
        name: &str,
        side: Side,
        out_c: usize,
        in_c: usize,
        k: usize,
    ) -> Conv {
        let w = ArrayD::from_shape_fn(ndarray::IxDyn(&[out_c, in_c, k, k]), |_| {
            self.normal.sample(self.rng)
        });
        let b = ArrayD::zeros(ndarray::IxDyn(&[out_c]));
        Conv {
            w: store.add(format!("{name}.w"), side, w),
            b: store.add(format!("{name}.b"), side, b),
        }
    }
}

impl ModelBundle {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut init = Init {
            rng: &mut rng,
            normal: Normal::new(0.0, 0.02).unwrap(),
        };
        let nf = cfg.base_channels;
        let g = Side::Generator;
        let d = Side::Discriminator;

        let trunk = |init: &mut Init, store: &mut ParamStore, tag: &str| Trunk {
            c1: init.conv(store, &format!("trunk_{tag}.c1"), g, nf, 3, 3),
            c2: init.conv(store, &format!("trunk_{tag}.c2"), g, 2 * nf, nf, 3),
            c3: init.conv(store, &format!("trunk_{tag}.c3"), g, 4 * nf, 2 * nf, 3),
            r1a: init.conv(store, &format!("trunk_{tag}.r1a"), g, 4 * nf, 4 * nf, 3),
            r1b: init.conv(store, &format!("trunk_{tag}.r1b"), g, 4 * nf, 4 * nf, 3),
            r2a: init.conv(store, &format!("trunk_{tag}.r2a"), g, 4 * nf, 4 * nf, 3),
            r2b: init.conv(store, &format!("trunk_{tag}.r2b"), g, 4 * nf, 4 * nf, 3),
        };
        let trunk_a = trunk(&mut init, &mut store, "a");
        let trunk_b = trunk(&mut init, &mut store, "b");
        let enc_a = init.conv(&mut store, "enc_a.head", g, 1, 4 * nf, 3);
        let enc_b = init.conv(&mut store, "enc_b.head", g, 1, 4 * nf, 3);

        let decoder = |init: &mut Init, store: &mut ParamStore, tag: &str| Decoder {
            fuse: init.conv(store, &format!("dec_{tag}.fuse"), g, 4 * nf, 4 * nf + 1, 3),
            up1: init.conv(store, &format!("dec_{tag}.up1"), g, 2 * nf, 4 * nf, 3),
            up2: init.conv(store, &format!("dec_{tag}.up2"), g, nf, 2 * nf, 3),
            out: init.conv(store, &format!("dec_{tag}.out"), g, 3, nf, 3),
        };
        let dec_a2b = decoder(&mut init, &mut store, "a2b");
        let dec_b2a = decoder(&mut init, &mut store, "b2a");

        let disc = |init: &mut Init, store: &mut ParamStore, tag: &str, in_c: usize| Disc {
            c1: init.conv(store, &format!("{tag}.c1"), d, nf, in_c, 3),
            c2: init.conv(store, &format!("{tag}.c2"), d, 2 * nf, nf, 3),
            c3: init.conv(store, &format!("{tag}.c3"), d, 1, 2 * nf, 3),
        };
        let disc_a = disc(&mut init, &mut store, "disc_a", 3);
        let disc_b = disc(&mut init, &mut store, "disc_b", 3);
        let guess_a = disc(&mut init, &mut store, "guess_a", 6);
        let guess_b = disc(&mut init, &mut store, "guess_b", 6);

        Ok(ModelBundle {
            cfg,
            store,
            trunk_a,
            trunk_b,
            enc_a,
            enc_b,
            dec_a2b,
            dec_b2a,
            disc_a,
            disc_b,
            guess_a,
            guess_b,
        })
    }

    fn trunk_for(&self, domain: Domain) -> &Trunk {
        match domain {
            Domain::A => &self.trunk_a,
            Domain::B => &self.trunk_b,
        }
    }

    /// Parameter id of the final encoder layer's weights for `domain`;
    /// exposed so tests and probes can zero the embedding path.
    pub fn encoder_head_params(&self, domain: Domain) -> (ParamId, ParamId) {
        let c = match domain {
            Domain::A => self.enc_a,
            Domain::B => self.enc_b,
        };
        (c.w, c.b)
    }

    fn conv_in_relu(&self, g: &mut Graph, x: NodeId, c: Conv, stride: usize) -> NodeId {
        let w = g.param(&self.store, c.w);
        let b = g.param(&self.store, c.b);
        let h = g.conv2d(x, w, b, stride, 1);
        let h = g.layer_norm(h);
        g.relu(h)
    }

    fn res_block(&self, g: &mut Graph, x: NodeId, ca: Conv, cb: Conv) -> NodeId {
        let h = self.conv_in_relu(g, x, ca, 1);
        let w = g.param(&self.store, cb.w);
        let b = g.param(&self.store, cb.b);
        let h = g.conv2d(h, w, b, 1, 1);
        let h = g.layer_norm(h);
        g.add(x, h)
    }

    fn trunk_node(&self, g: &mut Graph, domain: Domain, x: NodeId) -> NodeId {
        let t = self.trunk_for(domain);
        let h = self.conv_in_relu(g, x, t.c1, 1);
        let h = self.conv_in_relu(g, h, t.c2, 2);
        let h = self.conv_in_relu(g, h, t.c3, 2);
        let h = self.res_block(g, h, t.r1a, t.r1b);
        self.res_block(g, h, t.r2a, t.r2b)
    }

    /// Domain-specific encoder s_X as a graph fragment.
    pub fn encode_node(&self, g: &mut Graph, domain: Domain, x: NodeId) -> NodeId {
        let h = self.trunk_node(g, domain, x);
        let c = match domain {
            Domain::A => self.enc_a,
            Domain::B => self.enc_b,
        };
        let w = g.param(&self.store, c.w);
        let b = g.param(&self.store, c.b);
        g.conv2d(h, w, b, 1, 1)
    }

    /// Guided generator G_X2Y as a graph fragment: trunk of the source
    /// domain, guide embedding concatenated at the bottleneck, decoder up
    /// to a tanh image.
    pub fn generate_node(
        &self,
        g: &mut Graph,
        direction: Direction,
        source: NodeId,
        embedding: NodeId,
    ) -> NodeId {
        let h = self.trunk_node(g, direction.source_domain(), source);
        let h = g.concat_channels(h, embedding);
        let dec = match direction {
            Direction::A2B => &self.dec_a2b,
            Direction::B2A => &self.dec_b2a,
        };
        let h = self.conv_in_relu(g, h, dec.fuse, 1);
        let h = g.upsample2x(h);
        let h = self.conv_in_relu(g, h, dec.up1, 1);
        let h = g.upsample2x(h);
        let h = self.conv_in_relu(g, h, dec.up2, 1);
        let w = g.param(&self.store, dec.out.w);
        let b = g.param(&self.store, dec.out.b);
        let h = g.conv2d(h, w, b, 1, 1);
        g.tanh(h)
    }

    fn disc_node(&self, g: &mut Graph, d: &Disc, x: NodeId) -> NodeId {
        let w = g.param(&self.store, d.c1.w);
        let b = g.param(&self.store, d.c1.b);
        let h = g.conv2d(x, w, b, 2, 1);
        let h = g.leaky_relu(h, 0.2);
        let w = g.param(&self.store, d.c2.w);
        let b = g.param(&self.store, d.c2.b);
        let h = g.conv2d(h, w, b, 2, 1);
        let h = g.layer_norm(h);
        let h = g.leaky_relu(h, 0.2);
        let w = g.param(&self.store, d.c3.w);
        let b = g.param(&self.store, d.c3.b);
        g.conv2d(h, w, b, 1, 1)
    }

    /// Image discriminator D_X patch score map.
    pub fn discriminate_node(&self, g: &mut Graph, domain: Domain, x: NodeId) -> NodeId {
        let d = match domain {
            Domain::A => &self.disc_a,
            Domain::B => &self.disc_b,
        };
        self.disc_node(g, d, x)
    }

    /// Guess discriminator D^gs_X on the ordered pair (x, y),
    /// channel-concatenated.
    pub fn guess_node(&self, g: &mut Graph, domain: Domain, x: NodeId, y: NodeId) -> NodeId {
        let d = match domain {
            Domain::A => &self.guess_a,
            Domain::B => &self.guess_b,
        };
        let xy = g.concat_channels(x, y);
        self.disc_node(g, d, xy)
    }

    pub(crate) fn check_image_batch(&self, x: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 3 || (h, w) != self.cfg.resolution {
            return Err(RiftError::Shape(format!(
                "image batch is {:?}, model expects (_, 3, {}, {})",
                x.dim(),
                self.cfg.resolution.0,
                self.cfg.resolution.1
            )));
        }
        Ok(())
    }

    fn check_embedding_batch(&self, e: &Array4<f64>) -> Result<()> {
        let (_, c, h, w) = e.dim();
        let (bh, bw) = self.cfg.bottleneck();
        if c != 1 || (h, w) != (bh, bw) {
            return Err(RiftError::Shape(format!(
                "embedding batch is {:?}, model expects (_, 1, {bh}, {bw})",
                e.dim()
            )));
        }
        Ok(())
    }

    /// s_X on a batch of images.
    pub fn encode(&self, domain: Domain, imgs: &Array4<f64>) -> Result<Array4<f64>> {
        self.check_image_batch(imgs)?;
        let mut g = Graph::new(&self.store, None);
        let x = g.constant(imgs.clone().into_dyn());
        let e = self.encode_node(&mut g, domain, x);
        Ok(to4(g.value(e)))
    }

    /// G_X2Y on a batch of (source, guide embedding) pairs.
    pub fn translate(
        &self,
        direction: Direction,
        source: &Array4<f64>,
        guide_embedding: &Array4<f64>,
    ) -> Result<Array4<f64>> {
        self.check_image_batch(source)?;
        self.check_embedding_batch(guide_embedding)?;
        if source.dim().0 != guide_embedding.dim().0 {
            return Err(RiftError::Shape(
                "source and embedding batch sizes differ".into(),
            ));
        }
        let mut g = Graph::new(&self.store, None);
        let s = g.constant(source.clone().into_dyn());
        let e = g.constant(guide_embedding.clone().into_dyn());
        let out = self.generate_node(&mut g, direction, s, e);
        Ok(to4(g.value(out)))
    }

    /// F_X2Y(source, guide) = G_X2Y(source, s_Y(guide)).
    pub fn guided_translate(
        &self,
        direction: Direction,
        source: &Array4<f64>,
        guide: &Array4<f64>,
    ) -> Result<Array4<f64>> {
        let emb = self.encode(direction.target_domain(), guide)?;
        self.translate(direction, source, &emb)
    }

    pub fn discriminate(&self, domain: Domain, imgs: &Array4<f64>) -> Result<Array4<f64>> {
        self.check_image_batch(imgs)?;
        let mut g = Graph::new(&self.store, None);
        let x = g.constant(imgs.clone().into_dyn());
        let s = self.discriminate_node(&mut g, domain, x);
        Ok(to4(g.value(s)))
    }

    pub fn guess(
        &self,
        domain: Domain,
        x: &Array4<f64>,
        y: &Array4<f64>,
    ) -> Result<Array4<f64>> {
        self.check_image_batch(x)?;
        self.check_image_batch(y)?;
        let mut g = Graph::new(&self.store, None);
        let xn = g.constant(x.clone().into_dyn());
        let yn = g.constant(y.clone().into_dyn());
        let s = self.guess_node(&mut g, domain, xn, yn);
        Ok(to4(g.value(s)))
    }
}

fn to4(v: &ArrayD<f64>) -> Array4<f64> {
    v.clone().into_dimensionality().expect("4-d tensor")
}

/// Stack CHW images into an NCHW batch.
pub fn stack_images(imgs: &[&Image]) -> Array4<f64> {
    assert!(!imgs.is_empty());
    let (c, h, w) = imgs[0].dim();
    let mut out = Array4::zeros((imgs.len(), c, h, w));
    for (n, img) in imgs.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), n).assign(img);
    }
    out
}

/// Sidecar metadata stored next to the parameter blob; enough to rebuild
/// the bundle and to resume training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub seed: u64,
    pub step: u64,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn save_checkpoint(dir: &Path, bundle: &ModelBundle, meta: &CheckpointMeta) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| RiftError::io(dir, e))?;
    let blob = dir.join("params.bin");
    std::fs::write(&blob, bundle.store.to_bytes()).map_err(|e| RiftError::io(&blob, e))?;
    let meta_path = dir.join("meta.json");
    let json =
        serde_json::to_string_pretty(meta).map_err(|e| RiftError::Invalid(e.to_string()))?;
    std::fs::write(&meta_path, json).map_err(|e| RiftError::io(&meta_path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelBundle, CheckpointMeta)> {
    let meta_path = dir.join("meta.json");
    let json = std::fs::read_to_string(&meta_path).map_err(|e| RiftError::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&json)
        .map_err(|e| RiftError::Config(format!("{}: {e}", meta_path.display())))?;
    let mut bundle = ModelBundle::new(meta.model)?;
    let blob = dir.join("params.bin");
    let bytes = std::fs::read(&blob).map_err(|e| RiftError::io(&blob, e))?;
    bundle.store.load_bytes(&bytes)?;
    Ok((bundle, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            resolution: (8, 8),
            base_channels: 2,
            seed: 3,
        }
    }

    fn rand_batch(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Array4<f64> {
        Array4::from_shape_fn((n, c, h, w), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zeroed_encoder_head_gives_zero_embedding() {
        let mut bundle = ModelBundle::new(tiny_cfg()).unwrap();
        let (w, b) = bundle.encoder_head_params(Domain::A);
        bundle.store.value_mut(w).fill(0.0);
        bundle.store.value_mut(b).fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_batch(&mut rng, 2, 3, 8, 8);
        let e = bundle.encode(Domain::A, &x).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
        assert_eq!(e.dim(), (2, 1, 2, 2));
    }

    #[test]
    fn embedding_depends_on_every_input_pixel() {
        let bundle = ModelBundle::new(tiny_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_batch(&mut rng, 1, 3, 8, 8);
        let e0 = bundle.encode(Domain::B, &x).unwrap();
        for &(i, j) in &[(0usize, 0usize), (7, 7), (3, 4)] {
            let mut xp = x.clone();
            xp[[0, 1, i, j]] += 0.1;
            let e1 = bundle.encode(Domain::B, &xp).unwrap();
            assert!(
                (&e1 - &e0).mapv(f64::abs).sum() > 0.0,
                "pixel ({i},{j}) invisible to encoder"
            );
        }
    }

    #[test]
    fn guided_translate_is_the_composition() {
        let bundle = ModelBundle::new(tiny_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let src = rand_batch(&mut rng, 3, 3, 8, 8);
        let guide = rand_batch(&mut rng, 3, 3, 8, 8);
        let emb = bundle.encode(Domain::B, &guide).unwrap();
        let direct = bundle.translate(Direction::A2B, &src, &emb).unwrap();
        let composed = bundle.guided_translate(Direction::A2B, &src, &guide).unwrap();
        assert_eq!(direct, composed);
    }

    #[test]
    fn zeroed_encoder_makes_output_guide_independent() {
        let mut bundle = ModelBundle::new(tiny_cfg()).unwrap();
        let (w, b) = bundle.encoder_head_params(Domain::B);
        bundle.store.value_mut(w).fill(0.0);
        bundle.store.value_mut(b).fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = rand_batch(&mut rng, 1, 3, 8, 8);
        let g1 = rand_batch(&mut rng, 1, 3, 8, 8);
        let g2 = rand_batch(&mut rng, 1, 3, 8, 8);
        let o1 = bundle.guided_translate(Direction::A2B, &src, &g1).unwrap();
        let o2 = bundle.guided_translate(Direction::A2B, &src, &g2).unwrap();
        assert_eq!(o1, o2);
    }

    #[test]
    fn generator_output_bounded_even_with_huge_weights() {
        let mut bundle = ModelBundle::new(tiny_cfg()).unwrap();
        for id in 0..bundle.store.len() {
            bundle.store.value_mut(id).mapv_inplace(|v| v * 1e6 + 17.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let src = rand_batch(&mut rng, 1, 3, 8, 8);
        let guide = rand_batch(&mut rng, 1, 3, 8, 8);
        let out = bundle.guided_translate(Direction::A2B, &src, &guide).unwrap();
        assert!(out.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }

    #[test]
    fn guess_is_order_sensitive() {
        let bundle = ModelBundle::new(tiny_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_batch(&mut rng, 1, 3, 8, 8);
        let y = rand_batch(&mut rng, 1, 3, 8, 8);
        let xy = bundle.guess(Domain::A, &x, &y).unwrap();
        let yx = bundle.guess(Domain::A, &y, &x).unwrap();
        assert!((&xy - &yx).mapv(f64::abs).sum() > 1e-9);
    }

    #[test]
    fn zero_weight_discriminator_outputs_its_bias() {
        let mut bundle = ModelBundle::new(tiny_cfg()).unwrap();
        for id in 0..bundle.store.len() {
            if bundle.store.meta(id).side == Side::Discriminator {
                bundle.store.value_mut(id).fill(0.0);
            }
        }
        // set the final bias of disc_a to 0.5
        let bias_id = (0..bundle.store.len())
            .find(|&id| bundle.store.meta(id).name == "disc_a.c3.b")
            .unwrap();
        bundle.store.value_mut(bias_id).fill(0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_batch(&mut rng, 2, 3, 8, 8);
        let s = bundle.discriminate(Domain::A, &x).unwrap();
        assert!(s.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn patch_map_size_matches_shape_arithmetic() {
        let cfg = ModelConfig {
            resolution: (32, 32),
            base_channels: 4,
            seed: 0,
        };
        let bundle = ModelBundle::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_batch(&mut rng, 1, 3, 32, 32);
        let s = bundle.discriminate(Domain::B, &x).unwrap();
        let (ph, pw) = cfg.patch_map();
        assert_eq!(s.dim(), (1, 1, ph, pw));
        assert_eq!((ph, pw), (8, 8));
    }

    #[test]
    fn trunk_is_shared_between_encoder_and_generator() {
        let mut bundle = ModelBundle::new(tiny_cfg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let src = rand_batch(&mut rng, 1, 3, 8, 8);
        let guide = rand_batch(&mut rng, 1, 3, 8, 8);
        let e0 = bundle.encode(Domain::A, &guide).unwrap();
        let o0 = bundle.guided_translate(Direction::A2B, &src, &guide).unwrap();
        // mutate one trunk_a parameter through the store
        let id = (0..bundle.store.len())
            .find(|&id| bundle.store.meta(id).name == "trunk_a.c1.w")
            .unwrap();
        bundle.store.value_mut(id)[[0, 0, 0, 0]] += 0.5;
        let e1 = bundle.encode(Domain::A, &guide).unwrap();
        let o1 = bundle.guided_translate(Direction::A2B, &src, &guide).unwrap();
        assert!((&e1 - &e0).mapv(f64::abs).sum() > 0.0, "encoder unaffected");
        assert!((&o1 - &o0).mapv(f64::abs).sum() > 0.0, "generator unaffected");
    }

    /// Straight-line reference forward pass for the encoder on a tiny
    /// hand-set network, built from the naive conv and scalar ops only.
    #[test]
    fn encoder_matches_reference_forward() {
        let cfg = tiny_cfg();
        let mut bundle = ModelBundle::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // overwrite all generator-side params with fresh known values
        for id in 0..bundle.store.len() {
            let vals: Vec<f64> = (0..bundle.store.value(id).len())
                .map(|_| rng.gen_range(-0.3..0.3))
                .collect();
            let shape = bundle.store.value(id).raw_dim();
            *bundle.store.value_mut(id) = ndarray::ArrayD::from_shape_vec(shape, vals).unwrap();
        }
        let x = rand_batch(&mut rng, 1, 3, 8, 8);
        let got = bundle.encode(Domain::A, &x).unwrap();

        // reference path
        let p = |name: &str| {
            let id = (0..bundle.store.len())
                .find(|&id| bundle.store.meta(id).name == name)
                .unwrap();
            bundle.store.value(id).clone()
        };
        let conv = |x: &Array4<f64>, wname: &str, bname: &str, stride: usize| {
            let w = p(wname).into_dimensionality::<ndarray::Ix4>().unwrap();
            let b = p(bname)
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            crate::nn::conv2d_naive(&x.view(), &w.view(), b.as_slice().unwrap(), stride, 1)
        };
        let inorm = |x: &Array4<f64>| {
            let (n, c, h, w) = x.dim();
            let chw = (c * h * w) as f64;
            let mut out = x.clone();
            for ni in 0..n {
                let mut mean = 0.0;
                for ci in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            mean += x[[ni, ci, i, j]];
                        }
                    }
                }
                mean /= chw;
                let mut var = 0.0;
                for ci in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            var += (x[[ni, ci, i, j]] - mean).powi(2);
                        }
                    }
                }
                var /= chw;
                let is = 1.0 / (var + 1e-5).sqrt();
                for ci in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            out[[ni, ci, i, j]] = (x[[ni, ci, i, j]] - mean) * is;
                        }
                    }
                }
            }
            out
        };
        let relu = |x: &Array4<f64>| x.mapv(|v| v.max(0.0));

        let h1 = relu(&inorm(&conv(&x, "trunk_a.c1.w", "trunk_a.c1.b", 1)));
        let h2 = relu(&inorm(&conv(&h1, "trunk_a.c2.w", "trunk_a.c2.b", 2)));
        let h3 = relu(&inorm(&conv(&h2, "trunk_a.c3.w", "trunk_a.c3.b", 2)));
        let r1 = &h3 + &inorm(&conv(
            &relu(&inorm(&conv(&h3, "trunk_a.r1a.w", "trunk_a.r1a.b", 1))),
            "trunk_a.r1b.w",
            "trunk_a.r1b.b",
            1,
        ));
        let r2 = &r1 + &inorm(&conv(
            &relu(&inorm(&conv(&r1, "trunk_a.r2a.w", "trunk_a.r2a.b", 1))),
            "trunk_a.r2b.w",
            "trunk_a.r2b.b",
            1,
        ));
        let expect = conv(&r2, "enc_a.head.w", "enc_a.head.b", 1);
        let diff = (&expect - &got).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        assert!(diff < 1e-10, "max diff {diff}");
    }
}
