//! Human-readable artifacts: results tables in the layout of the published
//! benchmark (C/S column pairs per attribute, AC, RD), simple PNG line
//! charts for loss and probe curves, and qualitative translation grids.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::{Image, LoadedDataset};
use crate::diagnostics::{AblationReport, ProbeReport};
use crate::evalkit::{percent, round_half_up, AggregateReport, Translator};
use crate::losses::LossReport;
use crate::model::Direction;
use crate::{Result, RiftError};

/// Parse a metrics.jsonl written by the trainer. An empty file is an error
/// naming the path.
pub fn load_metrics(path: &Path) -> Result<Vec<(u64, LossReport)>> {
    let text = std::fs::read_to_string(path).map_err(|e| RiftError::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| RiftError::Invalid(format!("{}: {e}", path.display())))?;
        let step = v["step"]
            .as_u64()
            .ok_or_else(|| RiftError::Invalid(format!("{}: missing step", path.display())))?;
        let losses: LossReport = serde_json::from_value(v["losses"].clone())
            .map_err(|e| RiftError::Invalid(format!("{}: {e}", path.display())))?;
        out.push((step, losses));
    }
    if out.is_empty() {
        return Err(RiftError::Invalid(format!(
            "metrics file {} is empty",
            path.display()
        )));
    }
    Ok(out)
}

fn fmt_cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{}", percent(v)),
        None => "-".into(),
    }
}

/// Benchmark-style table: one C and one S column per attribute, then AC and
/// RD, values in whole percent.
pub fn render_table(rows: &[(&str, &AggregateReport)]) -> String {
    let attrs: Vec<&String> = rows
        .first()
        .map(|(_, r)| r.per_attribute.keys().collect())
        .unwrap_or_default();
    let mut header = String::from("method");
    for a in &attrs {
        write!(header, "\t{a}.C\t{a}.S").unwrap();
    }
    header.push_str("\tAC\tRD\n");
    let mut out = header;
    for (name, report) in rows {
        write!(out, "{name}").unwrap();
        for a in &attrs {
            let s = report.per_attribute.get(a.as_str()).copied().unwrap_or_default();
            write!(out, "\t{}\t{}", fmt_cell(s.common), fmt_cell(s.specific)).unwrap();
        }
        let rd = match report.rd {
            Some(rd) => format!("{}", round_half_up(rd)),
            None => "-".into(),
        };
        writeln!(out, "\t{}\t{}", percent(report.ac), rd).unwrap();
    }
    out
}

/// Side-by-side ablation summary: accuracy aggregates plus probe scalars
/// per variant.
pub fn render_ablation_table(report: &AblationReport) -> String {
    let rows: Vec<(&str, &AggregateReport)> = report
        .runs
        .iter()
        .map(|r| (r.variant.name(), &r.report))
        .collect();
    let mut out = render_table(&rows);
    out.push('\n');
    out.push_str("variant\thiding_score\tsource_dep\tguide_dep\tcap_A_bits\tcap_B_bits\n");
    for run in &report.runs {
        let p = &run.probes;
        writeln!(
            out,
            "{}\t{:.3}\t{:.3}\t{:.3}\t{:.2}\t{:.2}",
            run.variant.name(),
            p.hiding_score,
            p.source_dependence,
            p.guide_dependence,
            p.capacity_bound_bits.get("A").copied().unwrap_or(f64::NAN),
            p.capacity_bound_bits.get("B").copied().unwrap_or(f64::NAN),
        )
        .unwrap();
    }
    out
}

const CHART_W: usize = 640;
const CHART_H: usize = 360;
const MARGIN: usize = 40;
const SERIES_COLORS: [[u8; 3]; 6] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

struct Chart {
    buf: image::RgbImage,
}

impl Chart {
    fn new() -> Self {
        let mut buf = image::RgbImage::from_pixel(
            CHART_W as u32,
            CHART_H as u32,
            image::Rgb([255, 255, 255]),
        );
        for x in MARGIN..CHART_W - MARGIN {
            buf.put_pixel(x as u32, (CHART_H - MARGIN) as u32, image::Rgb([0, 0, 0]));
        }
        for y in MARGIN..CHART_H - MARGIN {
            buf.put_pixel(MARGIN as u32, y as u32, image::Rgb([0, 0, 0]));
        }
        Chart { buf }
    }

    fn to_px(&self, fx: f64, fy: f64) -> (i64, i64) {
        let x = MARGIN as f64 + fx * (CHART_W - 2 * MARGIN) as f64;
        let y = (CHART_H - MARGIN) as f64 - fy * (CHART_H - 2 * MARGIN) as f64;
        (x.round() as i64, y.round() as i64)
    }

    fn line(&mut self, a: (i64, i64), b: (i64, i64), color: [u8; 3]) {
        let steps = (a.0 - b.0).abs().max((a.1 - b.1).abs()).max(1);
        for t in 0..=steps {
            let x = a.0 + (b.0 - a.0) * t / steps;
            let y = a.1 + (b.1 - a.1) * t / steps;
            if (0..CHART_W as i64).contains(&x) && (0..CHART_H as i64).contains(&y) {
                self.buf.put_pixel(x as u32, y as u32, image::Rgb(color));
            }
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.buf.save(path).map_err(|e| RiftError::Image {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Multi-series line chart over a shared x-axis, linear scales, autoscaled.
fn line_chart(
    path: &Path,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    let mut chart = Chart::new();
    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    if points.is_empty() {
        return Err(RiftError::Invalid(format!(
            "no data points to plot for {}",
            path.display()
        )));
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let xs = (x1 - x0).max(1e-12);
    let ys = (y1 - y0).max(1e-12);
    for (i, (_, pts)) in series.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        for w in pts.windows(2) {
            let a = chart.to_px((w[0].0 - x0) / xs, (w[0].1 - y0) / ys);
            let b = chart.to_px((w[1].0 - x0) / xs, (w[1].1 - y0) / ys);
            chart.line(a, b, color);
        }
    }
    chart.save(path)
}

/// Loss curves from a metrics file, one series per reported term.
pub fn plot_losses(metrics_path: &Path, out: &Path) -> Result<()> {
    let metrics = load_metrics(metrics_path)?;
    let keys: Vec<String> = metrics[0].1.keys().cloned().collect();
    let series: Vec<(String, Vec<(f64, f64)>)> = keys
        .iter()
        .map(|k| {
            let pts = metrics
                .iter()
                .filter_map(|(step, losses)| losses.get(k).map(|&v| (*step as f64, v)))
                .collect();
            (k.clone(), pts)
        })
        .collect();
    line_chart(out, &series)
}

/// Cycle-error-vs-amplitude curves of a probe report, one series per
/// direction.
pub fn plot_probe(probe: &ProbeReport, out: &Path) -> Result<()> {
    let series: Vec<(String, Vec<(f64, f64)>)> = probe
        .cycle_error
        .iter()
        .map(|(dir, errs)| {
            let pts = probe
                .amplitudes
                .iter()
                .zip(errs)
                .map(|(&a, &e)| (a, e))
                .collect();
            (dir.clone(), pts)
        })
        .collect();
    line_chart(out, &series)
}

fn to_rgb(img: &Image) -> image::RgbImage {
    let (_, h, w) = img.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            ((img[[c, y as usize, x as usize]] + 1.0) * 127.5)
                .round()
                .clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Qualitative grid: each row is (source, guide, translation) for one
/// sampled pair per direction.
pub fn translation_grid<T: Translator>(
    translator: &T,
    dataset: &LoadedDataset,
    n_rows: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    if n_rows == 0 {
        return Err(RiftError::Config("n_rows must be >= 1".into()));
    }
    let (h, w) = dataset.manifest.split.resolution;
    let pad = 2;
    let total_rows = 2 * n_rows;
    let mut canvas = image::RgbImage::from_pixel(
        (3 * (w + pad) + pad) as u32,
        (total_rows * (h + pad) + pad) as u32,
        image::Rgb([230, 230, 230]),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut row = 0;
    for direction in [Direction::A2B, Direction::B2A] {
        let sources = dataset.indices_in(direction.source_domain());
        let targets = dataset.indices_in(direction.target_domain());
        if sources.is_empty() || targets.is_empty() {
            return Err(RiftError::EmptyBatch);
        }
        for _ in 0..n_rows {
            let s = sources[rng.gen_range(0..sources.len())];
            let g = targets[rng.gen_range(0..targets.len())];
            let outimg =
                translator.translate_one(direction, &dataset.images[s], &dataset.images[g])?;
            for (col, img) in [&dataset.images[s], &dataset.images[g], &outimg]
                .into_iter()
                .enumerate()
            {
                let tile = to_rgb(img);
                let ox = (pad + col * (w + pad)) as u32;
                let oy = (pad + row * (h + pad)) as u32;
                for (x, y, px) in tile.enumerate_pixels() {
                    canvas.put_pixel(ox + x, oy + y, *px);
                }
            }
            row += 1;
        }
    }
    canvas.save(out).map_err(|e| RiftError::Image {
        path: out.display().to_string(),
        message: e.to_string(),
    })
}

/// All ablation artifacts in one directory: summary table, probe curves and
/// a qualitative grid per variant.
pub fn write_ablation_artifacts(
    report: &AblationReport,
    dataset: &LoadedDataset,
    out: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| RiftError::io(out, e))?;
    let table_path = out.join("ablation_table.tsv");
    std::fs::write(&table_path, render_ablation_table(report))
        .map_err(|e| RiftError::io(&table_path, e))?;
    for run in &report.runs {
        plot_probe(
            &run.probes,
            &out.join(format!("probe_{}.png", run.variant.name())),
        )?;
        let (bundle, _) = crate::model::load_checkpoint(&run.checkpoint)?;
        translation_grid(
            &bundle,
            dataset,
            4,
            1,
            &out.join(format!("grid_{}.png", run.variant.name())),
        )?;
        let metrics = run
            .checkpoint
            .parent()
            .map(|p| p.join("metrics.jsonl"))
            .filter(|p| p.exists());
        if let Some(metrics) = metrics {
            plot_losses(
                &metrics,
                &out.join(format!("losses_{}.png", run.variant.name())),
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::AttributeScores;
    use std::collections::BTreeMap;
    use tempfile::TempDir;

    fn scores(pairs: &[(&str, Option<f64>, Option<f64>)]) -> AggregateReport {
        let per_attribute: BTreeMap<String, AttributeScores> = pairs
            .iter()
            .map(|&(n, c, s)| {
                (
                    n.to_string(),
                    AttributeScores {
                        specific: s,
                        common: c,
                    },
                )
            })
            .collect();
        let (ac, rd) = crate::evalkit::overall_scores(&per_attribute);
        AggregateReport {
            per_attribute,
            ac,
            rd,
        }
    }

    #[test]
    fn table_renders_published_row_values() {
        // unrounded aggregates whose rendered row matches the published
        // benchmark numbers
        let report = scores(&[
            ("fc", Some(0.99), Some(0.45)),
            ("oc", Some(0.92), Some(0.095)),
            ("ori", Some(0.98), Some(0.87)),
            ("sh", Some(0.62), Some(0.835)),
            ("sz", Some(0.50), Some(0.23)),
            ("wc", Some(0.99), Some(0.39)),
        ]);
        let table = render_table(&[("rift", &report)]);
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(
            lines[0],
            "method\tfc.C\tfc.S\toc.C\toc.S\tori.C\tori.S\tsh.C\tsh.S\tsz.C\tsz.S\twc.C\twc.S\tAC\tRD"
        );
        assert_eq!(
            lines[1],
            "rift\t99\t45\t92\t10\t98\t87\t62\t84\t50\t23\t99\t39\t66\t33"
        );
    }

    #[test]
    fn undefined_cells_render_as_dashes() {
        let report = scores(&[("x", Some(1.0), None)]);
        let table = render_table(&[("identity", &report)]);
        assert!(table.lines().nth(1).unwrap().contains("100\t-"));
    }

    #[test]
    fn empty_metrics_file_error_names_the_file() {
        let tmp = TempDir::new().unwrap();
        let path = tmp.path().join("metrics.jsonl");
        std::fs::write(&path, "").unwrap();
        let err = load_metrics(&path).unwrap_err();
        assert!(err.to_string().contains("metrics.jsonl"), "{err}");
    }

    #[test]
    fn metrics_round_trip_through_plot() {
        let tmp = TempDir::new().unwrap();
        let path = tmp.path().join("metrics.jsonl");
        let mut text = String::new();
        for step in 0..10 {
            text.push_str(&format!(
                "{{\"step\":{step},\"losses\":{{\"total_G\":{},\"total_D\":{}}}}}\n",
                1.0 / (step + 1) as f64,
                0.5
            ));
        }
        std::fs::write(&path, text).unwrap();
        let metrics = load_metrics(&path).unwrap();
        assert_eq!(metrics.len(), 10);
        assert_eq!(metrics[0].0, 0);
        let out = tmp.path().join("losses.png");
        plot_losses(&path, &out).unwrap();
        let img = image::open(&out).unwrap();
        assert_eq!(img.width() as usize, CHART_W);
    }

    #[test]
    fn translation_grid_has_expected_geometry() {
        use crate::datagen::{build_split, render, stock_split, StockSplit};
        let cfg = stock_split(StockSplit::A, (4, 4), (16, 16), 2);
        let manifest = build_split(&cfg).unwrap();
        let images = manifest
            .records
            .iter()
            .map(|r| render(&r.attrs, cfg.resolution).unwrap())
            .collect();
        let ds = LoadedDataset {
            manifest,
            images,
            dir: std::path::PathBuf::new(),
        };
        struct Id;
        impl Translator for Id {
            fn translate_one(&self, _: Direction, s: &Image, _: &Image) -> Result<Image> {
                Ok(s.clone())
            }
        }
        let tmp = TempDir::new().unwrap();
        let out = tmp.path().join("grid.png");
        translation_grid(&Id, &ds, 2, 0, &out).unwrap();
        let img = image::open(&out).unwrap();
        // 3 columns of 16px + padding; 4 rows (2 per direction)
        assert_eq!(img.width(), (3 * 18 + 2) as u32);
        assert_eq!(img.height(), (4 * 18 + 2) as u32);
    }
}
