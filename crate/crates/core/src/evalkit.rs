//! Attribute-manipulation metrics: per-attribute accuracy tables over guided
//! translations, cross-split aggregation into shared/specific scores, the
//! overall accuracy and discrepancy summary, and the random-image baseline.

use std::collections::BTreeMap;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    attribute_oracle, AttributeKind, AttributeVector, Image, LoadedDataset, Role, SplitConfig,
};
use crate::model::{stack_images, Direction, ModelBundle};
use crate::{Result, RiftError};

/// One guided translation with its decoded attributes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TranslationRecord {
    pub direction: Direction,
    pub source_attrs: AttributeVector,
    pub guide_attrs: AttributeVector,
    pub output_attrs: AttributeVector,
}

/// Where the correct value of an attribute comes from in a translation:
/// shared attributes must be carried over from the source, specific
/// attributes must be taken from the guide.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expected {
    FromSource,
    FromGuide,
}

impl Expected {
    fn split(self, r: &TranslationRecord) -> (&AttributeVector, &AttributeVector) {
        match self {
            Expected::FromSource => (&r.source_attrs, &r.guide_attrs),
            Expected::FromGuide => (&r.guide_attrs, &r.source_attrs),
        }
    }
}

/// Counted accuracy cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub correct: usize,
    pub total: usize,
}

impl Cell {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Per (attribute, direction) accuracy cells. Cells that are undefined
/// (attribute frozen in the target domain, or no record survives
/// conditioning) are absent rather than zero.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub cells: BTreeMap<String, BTreeMap<String, Cell>>,
}

impl AccuracyTable {
    pub fn insert(&mut self, attr: &str, direction: Direction, cell: Cell) {
        self.cells
            .entry(attr.to_string())
            .or_default()
            .insert(direction.to_string(), cell);
    }

    pub fn get(&self, attr: &str, direction: Direction) -> Option<Cell> {
        self.cells
            .get(attr)?
            .get(&direction.to_string())
            .copied()
    }

    pub fn accuracy(&self, attr: &str, direction: Direction) -> Option<f64> {
        self.get(attr, direction).map(|c| c.accuracy())
    }
}

/// Aggregated accuracy of one attribute in its two roles, as fractions.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct AttributeScores {
    pub specific: Option<f64>,
    pub common: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AggregateReport {
    pub per_attribute: BTreeMap<String, AttributeScores>,
    /// Mean aggregated accuracy over all defined (attribute, role) entries,
    /// as a fraction.
    pub ac: f64,
    /// Relative discrepancy in percent, over attributes with both roles
    /// defined; absent when no attribute qualifies.
    pub rd: Option<f64>,
}

/// Round half-up to the nearest integer (0.5 goes up).
pub fn round_half_up(x: f64) -> i64 {
    (x + 0.5).floor() as i64
}

/// Fraction to whole percent, rounded half-up.
pub fn percent(frac: f64) -> i64 {
    round_half_up(frac * 100.0)
}

/// Categorical manipulation accuracy over records, conditioned on source
/// and guide disagreeing on the attribute. `None` when no record survives
/// the conditioning.
pub fn manipulation_accuracy_categorical(
    records: &[TranslationRecord],
    attr: &str,
    expected: Expected,
) -> Result<Option<Cell>> {
    let mut cell = Cell {
        correct: 0,
        total: 0,
    };
    for r in records {
        let src = r.source_attrs.get_cat(attr)?;
        let gui = r.guide_attrs.get_cat(attr)?;
        if src == gui {
            continue;
        }
        let (right, _) = expected.split(r);
        let want = right.get_cat(attr)?;
        let got = r.output_attrs.get_cat(attr)?;
        cell.total += 1;
        if got == want {
            cell.correct += 1;
        }
    }
    Ok((cell.total > 0).then_some(cell))
}

/// Real-valued manipulation accuracy: the output value must be at least as
/// close (Euclidean, ties correct) to the expected value as to the
/// distractor. No conditioning clause.
pub fn manipulation_accuracy_real(
    records: &[TranslationRecord],
    attr: &str,
    expected: Expected,
) -> Result<Option<Cell>> {
    let mut cell = Cell {
        correct: 0,
        total: 0,
    };
    for r in records {
        let (right, wrong) = expected.split(r);
        let want = right.get_real(attr)?;
        let other = wrong.get_real(attr)?;
        let got = r.output_attrs.get_real(attr)?;
        if got.len() != want.len() || got.len() != other.len() {
            return Err(RiftError::Shape(format!(
                "attribute `{attr}`: value dims differ across records"
            )));
        }
        cell.total += 1;
        if dist(got, want) <= dist(got, other) {
            cell.correct += 1;
        }
    }
    Ok((cell.total > 0).then_some(cell))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Is the (attribute, direction) cell meaningful, and if so where does the
/// correct value come from? Attributes frozen in the target domain have no
/// cell: the output cannot legitimately vary there.
pub fn cell_expectation(role: Role, direction: Direction) -> Option<Expected> {
    match role {
        Role::Shared => Some(Expected::FromSource),
        _ if role.specific_to(direction.target_domain()) => Some(Expected::FromGuide),
        _ => None,
    }
}

/// Accuracy table over all attributes and both directions for one split.
pub fn accuracy_table(
    records: &[TranslationRecord],
    split: &SplitConfig,
) -> Result<AccuracyTable> {
    let mut table = AccuracyTable::default();
    for direction in [Direction::A2B, Direction::B2A] {
        let dir_records: Vec<TranslationRecord> = records
            .iter()
            .filter(|r| r.direction == direction)
            .cloned()
            .collect();
        for spec in &split.attributes {
            let Some(expected) = cell_expectation(spec.role, direction) else {
                continue;
            };
            let cell = match spec.kind {
                AttributeKind::Categorical { .. } => {
                    manipulation_accuracy_categorical(&dir_records, &spec.name, expected)?
                }
                AttributeKind::Real { .. } => {
                    manipulation_accuracy_real(&dir_records, &spec.name, expected)?
                }
            };
            if let Some(cell) = cell {
                table.insert(&spec.name, direction, cell);
            }
        }
    }
    Ok(table)
}

/// Average each attribute's cells over every (split, direction) where it is
/// specific resp. shared. Unweighted mean over cells, matching the
/// cross-split aggregation of the accuracy tables.
pub fn aggregate_accuracy(
    tables: &[(&AccuracyTable, &SplitConfig)],
) -> Result<BTreeMap<String, AttributeScores>> {
    let mut spec_cells: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut common_cells: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (table, split) in tables {
        for spec in &split.attributes {
            for direction in [Direction::A2B, Direction::B2A] {
                let Some(expected) = cell_expectation(spec.role, direction) else {
                    continue;
                };
                let Some(acc) = table.accuracy(&spec.name, direction) else {
                    continue;
                };
                let bucket = match expected {
                    Expected::FromGuide => &mut spec_cells,
                    Expected::FromSource => &mut common_cells,
                };
                bucket.entry(spec.name.clone()).or_default().push(acc);
            }
        }
    }
    let mut out: BTreeMap<String, AttributeScores> = BTreeMap::new();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    for (name, cells) in &spec_cells {
        out.entry(name.clone()).or_default().specific = Some(mean(cells));
    }
    for (name, cells) in &common_cells {
        out.entry(name.clone()).or_default().common = Some(mean(cells));
    }
    if out.is_empty() {
        return Err(RiftError::Invalid(
            "no defined accuracy cells to aggregate".into(),
        ));
    }
    Ok(out)
}

/// Overall summary: mean aggregated accuracy (fraction) and relative
/// discrepancy (percent) over attributes where both roles are defined.
pub fn overall_scores(per_attribute: &BTreeMap<String, AttributeScores>) -> (f64, Option<f64>) {
    let mut vals = Vec::new();
    let mut num = 0.0;
    let mut den = 0.0;
    for s in per_attribute.values() {
        if let Some(v) = s.specific {
            vals.push(v);
        }
        if let Some(v) = s.common {
            vals.push(v);
        }
        if let (Some(sp), Some(co)) = (s.specific, s.common) {
            num += (sp - co).abs();
            den += sp + co;
        }
    }
    let ac = vals.iter().sum::<f64>() / vals.len() as f64;
    let rd = (den > 0.0).then(|| 100.0 * num / den);
    (ac, rd)
}

pub fn aggregate_report(
    tables: &[(&AccuracyTable, &SplitConfig)],
) -> Result<AggregateReport> {
    let per_attribute = aggregate_accuracy(tables)?;
    let (ac, rd) = overall_scores(&per_attribute);
    Ok(AggregateReport {
        per_attribute,
        ac,
        rd,
    })
}

/// Anything that produces a guided translation; lets the metrics run on the
/// trained model and on reference translators alike.
pub trait Translator: Sync {
    fn translate_one(
        &self,
        direction: Direction,
        source: &Image,
        guide: &Image,
    ) -> Result<Image>;
}

impl Translator for ModelBundle {
    fn translate_one(
        &self,
        direction: Direction,
        source: &Image,
        guide: &Image,
    ) -> Result<Image> {
        let s = stack_images(&[source]);
        let g = stack_images(&[guide]);
        let out = self.guided_translate(direction, &s, &g)?;
        Ok(out.index_axis(Axis(0), 0).to_owned())
    }
}

pub struct Evaluation {
    pub records: Vec<TranslationRecord>,
    pub table: AccuracyTable,
    pub report: AggregateReport,
}

/// Translate every source image with `n_guides` uniformly drawn (without
/// replacement) guides per direction, decode the outputs with the attribute
/// oracle and compute the full metric suite. Deterministic given the seed.
pub fn evaluate<T: Translator>(
    translator: &T,
    dataset: &LoadedDataset,
    n_guides: usize,
    seed: u64,
) -> Result<Evaluation> {
    if n_guides == 0 {
        return Err(RiftError::Config("n_guides must be >= 1".into()));
    }
    let mut pairs: Vec<(Direction, usize, usize)> = Vec::new();
    for direction in [Direction::A2B, Direction::B2A] {
        let sources = dataset.indices_in(direction.source_domain());
        let targets = dataset.indices_in(direction.target_domain());
        if targets.len() < n_guides {
            return Err(RiftError::Config(format!(
                "domain {} has {} images, fewer than n_guides = {n_guides}",
                direction.target_domain(),
                targets.len()
            )));
        }
        for (si, &src) in sources.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (si as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    ^ match direction {
                        Direction::A2B => 0,
                        Direction::B2A => 1 << 62,
                    },
            );
            let mut shuffled = targets.clone();
            shuffled.shuffle(&mut rng);
            for &guide in shuffled.iter().take(n_guides) {
                pairs.push((direction, src, guide));
            }
        }
    }
    let records: Result<Vec<TranslationRecord>> = pairs
        .par_iter()
        .map(|&(direction, src, guide)| {
            let out = translator.translate_one(
                direction,
                &dataset.images[src],
                &dataset.images[guide],
            )?;
            Ok(TranslationRecord {
                direction,
                source_attrs: dataset.manifest.records[src].attrs.clone(),
                guide_attrs: dataset.manifest.records[guide].attrs.clone(),
                output_attrs: attribute_oracle(&out),
            })
        })
        .collect();
    let records = records?;
    let table = accuracy_table(&records, &dataset.manifest.split)?;
    let report = aggregate_report(&[(&table, &dataset.manifest.split)])?;
    Ok(Evaluation {
        records,
        table,
        report,
    })
}

/// Baseline that answers every translation with a uniformly sampled
/// target-domain image: `n_trials` simulated translations per direction,
/// scored by the same metrics.
pub fn rand_baseline(
    manifest: &crate::datagen::DatasetManifest,
    n_trials: usize,
    seed: u64,
) -> Result<AccuracyTable> {
    if n_trials == 0 {
        return Err(RiftError::Config("n_trials must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(2 * n_trials);
    for direction in [Direction::A2B, Direction::B2A] {
        let sources = manifest.records_in(direction.source_domain());
        let targets = manifest.records_in(direction.target_domain());
        if sources.is_empty() || targets.is_empty() {
            return Err(RiftError::EmptyBatch);
        }
        for _ in 0..n_trials {
            let src = sources.choose(&mut rng).unwrap();
            let gui = targets.choose(&mut rng).unwrap();
            let out = targets.choose(&mut rng).unwrap();
            records.push(TranslationRecord {
                direction,
                source_attrs: src.attrs.clone(),
                guide_attrs: gui.attrs.clone(),
                output_attrs: out.attrs.clone(),
            });
        }
    }
    accuracy_table(&records, &manifest.split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{
        build_split, render, stock_split, AttrValue, AttributeSpec, Domain, ManifestRecord,
        StockSplit,
    };
    use proptest::prelude::*;

    fn rec(
        direction: Direction,
        src: &[(&str, usize)],
        gui: &[(&str, usize)],
        out: &[(&str, usize)],
    ) -> TranslationRecord {
        TranslationRecord {
            direction,
            source_attrs: AttributeVector::from_cats(src),
            guide_attrs: AttributeVector::from_cats(gui),
            output_attrs: AttributeVector::from_cats(out),
        }
    }

    #[test]
    fn categorical_conditioning_drops_agreeing_pairs() {
        // 6 records; one has source == guide and is dropped; of the
        // remaining 5, 4 carry the source value
        let d = Direction::A2B;
        let records = vec![
            rec(d, &[("x", 0)], &[("x", 1)], &[("x", 0)]),
            rec(d, &[("x", 1)], &[("x", 2)], &[("x", 1)]),
            rec(d, &[("x", 2)], &[("x", 0)], &[("x", 2)]),
            rec(d, &[("x", 0)], &[("x", 2)], &[("x", 0)]),
            rec(d, &[("x", 1)], &[("x", 0)], &[("x", 0)]),
            rec(d, &[("x", 2)], &[("x", 2)], &[("x", 1)]),
        ];
        let cell = manipulation_accuracy_categorical(&records, "x", Expected::FromSource)
            .unwrap()
            .unwrap();
        assert_eq!((cell.correct, cell.total), (4, 5));
        assert!((cell.accuracy() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_guide_copying_translators_hit_the_extremes() {
        let d = Direction::A2B;
        // output always equals the guide value
        let copier: Vec<TranslationRecord> = (0..5)
            .map(|i| rec(d, &[("x", i)], &[("x", (i + 1) % 5)], &[("x", (i + 1) % 5)]))
            .collect();
        let shared = manipulation_accuracy_categorical(&copier, "x", Expected::FromSource)
            .unwrap()
            .unwrap();
        assert_eq!(shared.correct, 0);
        let specific = manipulation_accuracy_categorical(&copier, "x", Expected::FromGuide)
            .unwrap()
            .unwrap();
        assert_eq!(specific.correct, specific.total);
    }

    #[test]
    fn no_surviving_records_is_undefined_not_zero() {
        let d = Direction::A2B;
        let records = vec![rec(d, &[("x", 1)], &[("x", 1)], &[("x", 0)])];
        let cell =
            manipulation_accuracy_categorical(&records, "x", Expected::FromSource).unwrap();
        assert!(cell.is_none());
    }

    fn real_rec(direction: Direction, src: f64, gui: f64, out: f64) -> TranslationRecord {
        let mk = |v: f64| {
            let mut a = AttributeVector::default();
            a.0.insert("r".into(), AttrValue::Real(vec![v]));
            a
        };
        TranslationRecord {
            direction,
            source_attrs: mk(src),
            guide_attrs: mk(gui),
            output_attrs: mk(out),
        }
    }

    #[test]
    fn real_accuracy_ties_count_correct_and_match_brute_force() {
        let d = Direction::A2B;
        // (src, gui, out): correct iff |out-src| <= |out-gui|
        let data = [
            (0.0, 1.0, 0.2),
            (0.0, 1.0, 0.5),
            (0.0, 1.0, 0.9),
            (2.0, -1.0, 2.0),
            (2.0, -1.0, -1.0),
            (0.5, 0.5, 0.7),
            (3.0, 1.0, 1.9),
            (3.0, 1.0, 2.1),
            (-2.0, 4.0, 1.0),
            (0.0, 8.0, 3.0),
        ];
        let records: Vec<_> = data
            .iter()
            .map(|&(s, g, o)| real_rec(d, s, g, o))
            .collect();
        let brute = data
            .iter()
            .filter(|&&(s, g, o)| (o - s).abs() <= (o - g).abs())
            .count();
        let cell = manipulation_accuracy_real(&records, "r", Expected::FromSource)
            .unwrap()
            .unwrap();
        assert_eq!(cell.total, data.len());
        assert_eq!(cell.correct, brute);
        // the midpoint tie at (0,1,0.5) and exact hits are all correct
        assert_eq!(brute, 7);
    }

    proptest! {
        #[test]
        fn adding_condition_violating_pairs_changes_nothing(
            vals in proptest::collection::vec((0usize..4, 0usize..4, 0usize..4), 1..20),
            extra in proptest::collection::vec((0usize..4, 0usize..4), 0..10),
        ) {
            let d = Direction::A2B;
            let mut records: Vec<_> = vals
                .iter()
                .map(|&(s, g, o)| rec(d, &[("x", s)], &[("x", g)], &[("x", o)]))
                .collect();
            let before = manipulation_accuracy_categorical(&records, "x", Expected::FromSource).unwrap();
            for &(v, o) in &extra {
                records.push(rec(d, &[("x", v)], &[("x", v)], &[("x", o)]));
            }
            let after = manipulation_accuracy_categorical(&records, "x", Expected::FromSource).unwrap();
            prop_assert_eq!(before, after);
        }
    }

    /// Per-split fixture from the translation benchmark this reproduces:
    /// three splits of six attributes with rotating roles, values in
    /// percent; single split-level value used for both directions of a
    /// shared cell.
    fn benchmark_tables(
        rows: [[(Role, usize); 6]; 3],
    ) -> Vec<(AccuracyTable, SplitConfig)> {
        const NAMES: [&str; 6] = ["fc", "wc", "oc", "sz", "sh", "ori"];
        rows.iter()
            .enumerate()
            .map(|(i, row)| {
                let mut table = AccuracyTable::default();
                let attributes = NAMES
                    .iter()
                    .zip(row)
                    .map(|(name, &(role, val))| {
                        let cell = Cell {
                            correct: val,
                            total: 100,
                        };
                        for direction in [Direction::A2B, Direction::B2A] {
                            if cell_expectation(role, direction).is_some() {
                                table.insert(name, direction, cell);
                            }
                        }
                        AttributeSpec {
                            name: name.to_string(),
                            kind: AttributeKind::Categorical { arity: 8 },
                            role,
                        }
                    })
                    .collect();
                let split = SplitConfig {
                    split_id: format!("bench-{i}"),
                    attributes,
                    fixed_values: BTreeMap::new(),
                    domain_sizes: (1, 1),
                    resolution: (32, 32),
                    seed: 0,
                };
                (table, split)
            })
            .collect()
    }

    const BENCH_ROLES: [[Role; 6]; 3] = {
        use Role::*;
        [
            [SpecificA, SpecificA, Shared, SpecificB, Shared, SpecificB],
            [SpecificA, Shared, SpecificB, Shared, SpecificA, SpecificB],
            [Shared, SpecificB, SpecificA, SpecificA, SpecificB, Shared],
        ]
    };

    fn roles_with(values: [[usize; 6]; 3]) -> [[(Role, usize); 6]; 3] {
        let mut out = [[(Role::Shared, 0); 6]; 3];
        for s in 0..3 {
            for k in 0..6 {
                out[s][k] = (BENCH_ROLES[s][k], values[s][k]);
            }
        }
        out
    }

    #[test]
    fn aggregation_reproduces_published_first_method_row() {
        let tables = benchmark_tables(roles_with([
            [81, 68, 92, 35, 62, 93],
            [9, 99, 10, 50, 69, 81],
            [99, 10, 9, 11, 98, 98],
        ]));
        let refs: Vec<_> = tables.iter().map(|(t, s)| (t, s)).collect();
        let report = aggregate_report(&refs).unwrap();
        let p = |v: Option<f64>| percent(v.unwrap());
        let fc = report.per_attribute["fc"];
        assert_eq!((p(fc.common), p(fc.specific)), (99, 45));
        let sz = report.per_attribute["sz"];
        assert_eq!((p(sz.common), p(sz.specific)), (50, 23));
        let wc = report.per_attribute["wc"];
        assert_eq!((p(wc.common), p(wc.specific)), (99, 39));
        let oc = report.per_attribute["oc"];
        assert_eq!((p(oc.common), p(oc.specific)), (92, 10));
        let sh = report.per_attribute["sh"];
        assert_eq!((p(sh.common), p(sh.specific)), (62, 84));
        let ori = report.per_attribute["ori"];
        assert_eq!((p(ori.common), p(ori.specific)), (98, 87));
        assert_eq!(percent(report.ac), 66);
        assert_eq!(round_half_up(report.rd.unwrap()), 33);
    }

    #[test]
    fn aggregation_reproduces_published_second_method_row() {
        let tables = benchmark_tables(roles_with([
            [99, 99, 0, 50, 96, 64],
            [88, 0, 95, 59, 15, 58],
            [5, 99, 99, 12, 99, 99],
        ]));
        let refs: Vec<_> = tables.iter().map(|(t, s)| (t, s)).collect();
        let report = aggregate_report(&refs).unwrap();
        assert_eq!(percent(report.ac), 58);
        assert_eq!(round_half_up(report.rd.unwrap()), 56);
    }

    #[test]
    fn equal_role_accuracies_give_zero_discrepancy() {
        let mut per_attribute = BTreeMap::new();
        for (name, v) in [("a", 0.4), ("b", 0.9)] {
            per_attribute.insert(
                name.to_string(),
                AttributeScores {
                    specific: Some(v),
                    common: Some(v),
                },
            );
        }
        let (ac, rd) = overall_scores(&per_attribute);
        assert!((ac - 0.65).abs() < 1e-12);
        assert_eq!(rd, Some(0.0));
    }

    #[test]
    fn single_cell_aggregation_is_identity() {
        let mut table = AccuracyTable::default();
        table.insert(
            "x",
            Direction::A2B,
            Cell {
                correct: 3,
                total: 4,
            },
        );
        let split = SplitConfig {
            split_id: "one".into(),
            attributes: vec![AttributeSpec {
                name: "x".into(),
                kind: AttributeKind::Categorical { arity: 4 },
                role: Role::Shared,
            }],
            fixed_values: BTreeMap::new(),
            domain_sizes: (1, 1),
            resolution: (32, 32),
            seed: 0,
        };
        let agg = aggregate_accuracy(&[(&table, &split)]).unwrap();
        assert_eq!(agg["x"].common, Some(0.75));
        assert_eq!(agg["x"].specific, None);
    }

    proptest! {
        #[test]
        fn discrepancy_stays_within_bounds(
            vals in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..8),
        ) {
            let per_attribute: BTreeMap<String, AttributeScores> = vals
                .iter()
                .enumerate()
                .map(|(i, &(s, c))| {
                    (format!("a{i}"), AttributeScores { specific: Some(s), common: Some(c) })
                })
                .collect();
            let (ac, rd) = overall_scores(&per_attribute);
            prop_assert!((0.0..=1.0).contains(&ac));
            if let Some(rd) = rd {
                prop_assert!((0.0..=100.0).contains(&rd));
            }
        }
    }

    #[test]
    fn full_discrepancy_iff_one_role_always_zero() {
        let mut per_attribute = BTreeMap::new();
        per_attribute.insert(
            "a".to_string(),
            AttributeScores {
                specific: Some(0.0),
                common: Some(0.7),
            },
        );
        per_attribute.insert(
            "b".to_string(),
            AttributeScores {
                specific: Some(0.4),
                common: Some(0.0),
            },
        );
        let (_, rd) = overall_scores(&per_attribute);
        assert!((rd.unwrap() - 100.0).abs() < 1e-12);
    }

    struct IdentityTranslator;
    impl Translator for IdentityTranslator {
        fn translate_one(&self, _: Direction, source: &Image, _: &Image) -> Result<Image> {
            Ok(source.clone())
        }
    }

    struct GuideCopier;
    impl Translator for GuideCopier {
        fn translate_one(&self, _: Direction, _: &Image, guide: &Image) -> Result<Image> {
            Ok(guide.clone())
        }
    }

    fn toy_dataset() -> LoadedDataset {
        let cfg = stock_split(StockSplit::A, (12, 12), (32, 32), 11);
        let manifest = build_split(&cfg).unwrap();
        let images = manifest
            .records
            .iter()
            .map(|r| render(&r.attrs, cfg.resolution).unwrap())
            .collect();
        LoadedDataset {
            manifest,
            images,
            dir: std::path::PathBuf::new(),
        }
    }

    #[test]
    fn identity_translator_preserves_shared_and_fails_specific() {
        let ds = toy_dataset();
        let eval = evaluate(&IdentityTranslator, &ds, 2, 5).unwrap();
        for attr in ["obj_color", "shape", "size"] {
            let s = eval.report.per_attribute[attr];
            assert_eq!(s.common, Some(1.0), "{attr} shared accuracy");
        }
        // specific attrs: identity output keeps the source's frozen value,
        // conditioning guarantees the guide value differs
        for attr in ["bg_color", "position"] {
            let s = eval.report.per_attribute[attr];
            assert_eq!(s.specific, Some(0.0), "{attr} specific accuracy");
        }
    }

    #[test]
    fn guide_copier_nails_specific_and_fails_shared() {
        let ds = toy_dataset();
        let eval = evaluate(&GuideCopier, &ds, 2, 5).unwrap();
        for attr in ["bg_color", "position"] {
            let s = eval.report.per_attribute[attr];
            assert_eq!(s.specific, Some(1.0), "{attr} specific accuracy");
        }
        for attr in ["obj_color", "shape", "size"] {
            let s = eval.report.per_attribute[attr];
            assert_eq!(s.common, Some(0.0), "{attr} shared accuracy");
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_seed_sensitive() {
        let ds = toy_dataset();
        let e1 = evaluate(&IdentityTranslator, &ds, 2, 5).unwrap();
        let e2 = evaluate(&IdentityTranslator, &ds, 2, 5).unwrap();
        assert_eq!(
            serde_json::to_string(&e1.table.cells).unwrap(),
            serde_json::to_string(&e2.table.cells).unwrap()
        );
        let e3 = evaluate(&IdentityTranslator, &ds, 2, 6).unwrap();
        let g1: Vec<_> = e1.records.iter().map(|r| r.guide_attrs.clone()).collect();
        let g3: Vec<_> = e3.records.iter().map(|r| r.guide_attrs.clone()).collect();
        assert_ne!(g1, g3, "different seeds should pick different guides");
    }

    #[test]
    fn zero_guides_rejected() {
        let ds = toy_dataset();
        assert!(evaluate(&IdentityTranslator, &ds, 0, 5).is_err());
    }

    #[test]
    fn rand_baseline_matches_uniform_match_probability() {
        // manifest with an 8-way shared attribute uniform over both domains
        let attributes = vec![AttributeSpec {
            name: "x".into(),
            kind: AttributeKind::Categorical { arity: 8 },
            role: Role::Shared,
        }];
        let records = (0..8)
            .flat_map(|v| {
                [Domain::A, Domain::B].map(|d| ManifestRecord {
                    path: String::new(),
                    domain: d,
                    attrs: AttributeVector::from_cats(&[("x", v)]),
                })
            })
            .collect();
        let manifest = crate::datagen::DatasetManifest {
            split: SplitConfig {
                split_id: "uniform8".into(),
                attributes,
                fixed_values: BTreeMap::new(),
                domain_sizes: (8, 8),
                resolution: (32, 32),
                seed: 0,
            },
            records,
        };
        let table = rand_baseline(&manifest, 10_000, 7).unwrap();
        for direction in [Direction::A2B, Direction::B2A] {
            let acc = table.accuracy("x", direction).unwrap();
            assert!(
                (acc - 0.125).abs() < 0.03,
                "direction {direction}: accuracy {acc}"
            );
        }
    }

    #[test]
    fn rand_baseline_real_attribute_is_a_coin_flip() {
        let attributes = vec![AttributeSpec {
            name: "r".into(),
            kind: AttributeKind::Real { dim: 1 },
            role: Role::Shared,
        }];
        // pool large enough that the finite-sample bias of the value pools
        // and exact guide/output ties stay well inside the tolerance
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let records = (0..10_000)
            .map(|i| {
                use rand::Rng;
                let d = if i % 2 == 0 { Domain::A } else { Domain::B };
                let mut attrs = AttributeVector::default();
                attrs
                    .0
                    .insert("r".into(), AttrValue::Real(vec![rng.gen_range(-1.0..1.0)]));
                ManifestRecord {
                    path: String::new(),
                    domain: d,
                    attrs,
                }
            })
            .collect();
        let manifest = crate::datagen::DatasetManifest {
            split: SplitConfig {
                split_id: "real".into(),
                attributes,
                fixed_values: BTreeMap::new(),
                domain_sizes: (5000, 5000),
                resolution: (32, 32),
                seed: 0,
            },
            records,
        };
        let table = rand_baseline(&manifest, 10_000, 7).unwrap();
        for direction in [Direction::A2B, Direction::B2A] {
            let acc = table.accuracy("r", direction).unwrap();
            assert!((acc - 0.5).abs() < 0.03, "direction {direction}: {acc}");
        }
    }

    #[test]
    fn rand_baseline_rejects_zero_trials() {
        let cfg = stock_split(StockSplit::A, (4, 4), (32, 32), 1);
        let manifest = build_split(&cfg).unwrap();
        assert!(rand_baseline(&manifest, 0, 1).is_err());
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(round_half_up(32.487), 32);
        assert_eq!(round_half_up(32.5), 33);
        assert_eq!(round_half_up(65.583), 66);
        assert_eq!(percent(0.125), 13);
        assert_eq!(percent(0.1249), 12);
    }
}
