//! Procedural toy shapes dataset with fully known attributes, domain-pair
//! construction under configurable shared/specific splits, and the exact
//! attribute decoder used as the evaluation oracle.

mod oracle;
mod render;
mod splits;

pub use oracle::attribute_oracle;
pub use render::{
    object_mask, render, CANONICAL_ATTRIBUTES, BG_PALETTE, OBJ_PALETTE, SHAPE_CIRCLE,
    SHAPE_SQUARE, SHAPE_TRIANGLE,
};
pub use splits::{stock_split, StockSplit};

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Result, RiftError};

/// CHW image with values in [-1, 1].
pub type Image = Array3<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub fn opposite(self) -> Domain {
        match self {
            Domain::A => Domain::B,
            Domain::B => Domain::A,
        }
    }
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::A => write!(f, "A"),
            Domain::B => write!(f, "B"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Shared,
    SpecificA,
    SpecificB,
}

impl Role {
    /// Is this attribute specific to `domain` (i.e. varies only there)?
    pub fn specific_to(self, domain: Domain) -> bool {
        matches!(
            (self, domain),
            (Role::SpecificA, Domain::A) | (Role::SpecificB, Domain::B)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeKind {
    Categorical { arity: usize },
    Real { dim: usize },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub kind: AttributeKind,
    pub role: Role,
}

impl AttributeSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            AttributeKind::Categorical { arity } if arity < 2 => Err(RiftError::Config(format!(
                "attribute `{}`: categorical arity must be >= 2",
                self.name
            ))),
            AttributeKind::Real { dim } if dim < 1 => Err(RiftError::Config(format!(
                "attribute `{}`: real dim must be >= 1",
                self.name
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Cat(usize),
    Real(Vec<f64>),
}

/// Concrete value assignment for a set of attributes.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct AttributeVector(pub BTreeMap<String, AttrValue>);

impl AttributeVector {
    pub fn from_cats(pairs: &[(&str, usize)]) -> Self {
        AttributeVector(
            pairs
                .iter()
                .map(|(n, v)| (n.to_string(), AttrValue::Cat(*v)))
                .collect(),
        )
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(|s| s.as_str())
    }

    pub fn get(&self, name: &str) -> Result<&AttrValue> {
        self.0
            .get(name)
            .ok_or_else(|| RiftError::UnknownAttribute(name.to_string()))
    }

    pub fn get_cat(&self, name: &str) -> Result<usize> {
        match self.get(name)? {
            AttrValue::Cat(v) => Ok(*v),
            AttrValue::Real(_) => Err(RiftError::Invalid(format!(
                "attribute `{name}` is real-valued, expected categorical"
            ))),
        }
    }

    pub fn get_real(&self, name: &str) -> Result<&[f64]> {
        match self.get(name)? {
            AttrValue::Real(v) => Ok(v),
            AttrValue::Cat(_) => Err(RiftError::Invalid(format!(
                "attribute `{name}` is categorical, expected real-valued"
            ))),
        }
    }

    pub fn set_cat(&mut self, name: &str, v: usize) {
        self.0.insert(name.to_string(), AttrValue::Cat(v));
    }
}

/// One translation problem instance: which attributes vary where, and the
/// frozen value of each specific attribute in the domain where it does not.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub split_id: String,
    pub attributes: Vec<AttributeSpec>,
    pub fixed_values: BTreeMap<String, AttrValue>,
    pub domain_sizes: (usize, usize),
    pub resolution: (usize, usize),
    pub seed: u64,
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.domain_sizes.0 < 1 || self.domain_sizes.1 < 1 {
            return Err(RiftError::Config("domain sizes must be >= 1".into()));
        }
        if self.resolution.0 < 8 || self.resolution.1 < 8 {
            return Err(RiftError::Config("resolution must be >= 8".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for spec in &self.attributes {
            spec.validate()?;
            if !seen.insert(&spec.name) {
                return Err(RiftError::Config(format!(
                    "attribute `{}` declared more than once",
                    spec.name
                )));
            }
            if spec.role != Role::Shared && !self.fixed_values.contains_key(&spec.name) {
                return Err(RiftError::Config(format!(
                    "specific attribute `{}` has no fixed value for the opposite domain",
                    spec.name
                )));
            }
        }
        Ok(())
    }

    pub fn role_of(&self, name: &str) -> Result<Role> {
        self.attributes
            .iter()
            .find(|s| s.name == name)
            .map(|s| s.role)
            .ok_or_else(|| RiftError::UnknownAttribute(name.to_string()))
    }

    pub fn spec_of(&self, name: &str) -> Result<&AttributeSpec> {
        self.attributes
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| RiftError::UnknownAttribute(name.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub domain: Domain,
    pub attrs: AttributeVector,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: SplitConfig,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn records_in(&self, domain: Domain) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.domain == domain).collect()
    }
}

/// Enumerate every attribute combination allowed in `domain`: shared and
/// own-specific attributes vary, opposite-specific attributes are frozen.
pub fn allowed_combinations(cfg: &SplitConfig, domain: Domain) -> Result<Vec<AttributeVector>> {
    let mut combos: Vec<AttributeVector> = vec![AttributeVector::default()];
    for spec in &cfg.attributes {
        let arity = match spec.kind {
            AttributeKind::Categorical { arity } => arity,
            AttributeKind::Real { .. } => {
                return Err(RiftError::Config(format!(
                    "attribute `{}`: the toy renderer only supports categorical attributes",
                    spec.name
                )))
            }
        };
        let frozen = spec.role != Role::Shared && !spec.role.specific_to(domain);
        let values: Vec<usize> = if frozen {
            let v = cfg.fixed_values[&spec.name].clone();
            match v {
                AttrValue::Cat(i) => vec![i],
                AttrValue::Real(_) => {
                    return Err(RiftError::Config(format!(
                        "fixed value for `{}` must be categorical",
                        spec.name
                    )))
                }
            }
        } else {
            (0..arity).collect()
        };
        let mut next = Vec::with_capacity(combos.len() * values.len());
        for base in &combos {
            for &v in &values {
                let mut a = base.clone();
                a.set_cat(&spec.name, v);
                next.push(a);
            }
        }
        combos = next;
    }
    Ok(combos)
}

/// Build a dataset manifest for one split: uniform sampling without
/// replacement over the allowed combinations of each domain, seeded.
pub fn build_split(cfg: &SplitConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    for (domain, n) in [(Domain::A, cfg.domain_sizes.0), (Domain::B, cfg.domain_sizes.1)] {
        let mut combos = allowed_combinations(cfg, domain)?;
        if n > combos.len() {
            return Err(RiftError::Config(format!(
                "domain {domain} requests {n} images but only {} distinct combinations exist",
                combos.len()
            )));
        }
        combos.shuffle(&mut rng);
        for (i, attrs) in combos.into_iter().take(n).enumerate() {
            records.push(ManifestRecord {
                path: format!("images/{}_{i:05}.png", domain.to_string().to_lowercase()),
                domain,
                attrs,
            });
        }
    }
    Ok(DatasetManifest {
        split: cfg.clone(),
        records,
    })
}

/// Quantize a [-1, 1] image to 8-bit and write it as PNG.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(RiftError::Shape(format!("expected 3 channels, got {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            let px = [
                to_u8(img[[0, i, j]]),
                to_u8(img[[1, i, j]]),
                to_u8(img[[2, i, j]]),
            ];
            buf.put_pixel(j as u32, i as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| RiftError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| RiftError::Image {
            path: path.display().to_string(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Image::from_shape_fn((3, h, w), |(c, i, j)| {
        img.get_pixel(j as u32, i as u32).0[c] as f64 / 127.5 - 1.0
    }))
}

fn to_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Render and write the full dataset: OUT/images/*.png, OUT/manifest.jsonl,
/// OUT/split_config.json.
pub fn write_dataset(manifest: &DatasetManifest, out: &Path) -> Result<()> {
    let images_dir = out.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| RiftError::io(&images_dir, e))?;
    for rec in &manifest.records {
        let img = render(&rec.attrs, manifest.split.resolution)?;
        save_image(&img, &out.join(&rec.path))?;
    }
    write_manifest(manifest, out)
}

pub fn write_manifest(manifest: &DatasetManifest, out: &Path) -> Result<()> {
    let cfg_path = out.join("split_config.json");
    let cfg_json = serde_json::to_string_pretty(&manifest.split)
        .map_err(|e| RiftError::Invalid(e.to_string()))?;
    std::fs::write(&cfg_path, cfg_json).map_err(|e| RiftError::io(&cfg_path, e))?;

    let man_path = out.join("manifest.jsonl");
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(&man_path).map_err(|e| RiftError::io(&man_path, e))?,
    );
    for rec in &manifest.records {
        let line = serde_json::to_string(rec).map_err(|e| RiftError::Invalid(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| RiftError::io(&man_path, e))?;
    }
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let cfg_path = dir.join("split_config.json");
    let cfg_json =
        std::fs::read_to_string(&cfg_path).map_err(|e| RiftError::io(&cfg_path, e))?;
    let split: SplitConfig = serde_json::from_str(&cfg_json)
        .map_err(|e| RiftError::Config(format!("{}: {e}", cfg_path.display())))?;
    let man_path = dir.join("manifest.jsonl");
    let f = std::fs::File::open(&man_path).map_err(|e| RiftError::io(&man_path, e))?;
    let mut records = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| RiftError::io(&man_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line)
                .map_err(|e| RiftError::Invalid(format!("{}: {e}", man_path.display())))?,
        );
    }
    Ok(DatasetManifest { split, records })
}

/// A manifest together with its decoded images, used by training and
/// evaluation.
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Image>,
    pub dir: PathBuf,
}

impl LoadedDataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let (h, w) = manifest.split.resolution;
        let mut images = Vec::with_capacity(manifest.records.len());
        for rec in &manifest.records {
            let img = load_image(&dir.join(&rec.path))?;
            if img.dim() != (3, h, w) {
                return Err(RiftError::Shape(format!(
                    "{}: image is {:?}, manifest declares {}x{}",
                    rec.path,
                    img.dim(),
                    h,
                    w
                )));
            }
            images.push(img);
        }
        Ok(LoadedDataset {
            manifest,
            images,
            dir: dir.to_path_buf(),
        })
    }

    pub fn indices_in(&self, domain: Domain) -> Vec<usize> {
        self.manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.domain == domain)
            .map(|(i, _)| i)
            .collect()
    }
}
