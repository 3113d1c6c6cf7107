//! Reporting: per-run markdown summaries, training-curve PNGs, mode-center
//! dumps, and the ablation grid runner with its comparison tables.
//!
//! The grid runner retrains the source model once per bank size, reuses
//! checkpoints wherever a cell only changes adaptation behavior, and
//! verifies that the zero-weight configuration reduces to the plain
//! self-training pipeline bit for bit.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::Serialize;

use crate::error::{DrslError, Result};
use crate::params::dump_centers_csv;
use crate::segnet::{Model, BANK_PARAM};
use crate::trainer::{
    self, adapt, train_source, RoundReport, TrainConfig, Variant, CHECKPOINT_DIR, METRICS_FILE,
    ROUND_REPORTS_FILE,
};

/// Parsed metrics CSV: column names (after `step`) and one row per step.
#[derive(Debug, Clone)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub steps: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

pub fn read_metrics_csv(path: &Path) -> Result<MetricsTable> {
    let text = std::fs::read_to_string(path).map_err(|e| DrslError::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| DrslError::decode(path, "empty metrics file"))?;
    let mut cols = header.split(',');
    if cols.next() != Some("step") {
        return Err(DrslError::decode(path, "first column must be step"));
    }
    let columns: Vec<String> = cols.map(|c| c.to_string()).collect();
    let mut steps = Vec::new();
    let mut rows = Vec::new();
    for (ix, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let step: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| DrslError::decode(path, format!("bad step on data line {ix}")))?;
        let values: Vec<f64> = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| DrslError::decode(path, format!("data line {ix}: {e}")))?;
        if values.len() != columns.len() {
            return Err(DrslError::decode(
                path,
                format!("data line {ix} has {} fields, header {}", values.len(), columns.len()),
            ));
        }
        steps.push(step);
        rows.push(values);
    }
    Ok(MetricsTable {
        columns,
        steps,
        rows,
    })
}

impl MetricsTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let ix = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[ix]).collect())
    }
}

// 3x5 glyphs for axis and legend labels, row-major bitmasks, MSB left.
fn glyph(c: char) -> Option<u16> {
    let bits = match c {
        '0' => 0b111_101_101_101_111,
        '1' => 0b010_110_010_010_111,
        '2' => 0b111_001_111_100_111,
        '3' => 0b111_001_111_001_111,
        '4' => 0b101_101_111_001_001,
        '5' => 0b111_100_111_001_111,
        '6' => 0b111_100_111_101_111,
        '7' => 0b111_001_001_010_010,
        '8' => 0b111_101_111_101_111,
        '9' => 0b111_101_111_001_111,
        '.' => 0b000_000_000_000_010,
        '-' => 0b000_000_111_000_000,
        '+' => 0b000_010_111_010_000,
        '_' => 0b000_000_000_000_111,
        'A' => 0b010_101_111_101_101,
        'B' => 0b110_101_110_101_110,
        'C' => 0b011_100_100_100_011,
        'D' => 0b110_101_101_101_110,
        'E' => 0b111_100_110_100_111,
        'G' => 0b011_100_101_101_011,
        'I' => 0b111_010_010_010_111,
        'L' => 0b100_100_100_100_111,
        'M' => 0b101_111_111_101_101,
        'O' => 0b010_101_101_101_010,
        'P' => 0b110_101_110_100_100,
        'R' => 0b110_101_110_101_101,
        'S' => 0b011_100_010_001_110,
        'T' => 0b111_010_010_010_010,
        'U' => 0b101_101_101_101_111,
        _ => return None,
    };
    Some(bits)
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: Rgb<u8>) {
    let scale = 2i64;
    let mut cx = x;
    for c in text.to_ascii_uppercase().chars() {
        if c == ' ' {
            cx += 4 * scale;
            continue;
        }
        if let Some(bits) = glyph(c) {
            for row in 0..5i64 {
                for col in 0..3i64 {
                    let bit = 14 - (row * 3 + col);
                    if bits >> bit & 1 == 1 {
                        for dy in 0..scale {
                            for dx in 0..scale {
                                let px = cx + col * scale + dx;
                                let py = y + row * scale + dy;
                                if px >= 0
                                    && py >= 0
                                    && (px as u32) < img.width()
                                    && (py as u32) < img.height()
                                {
                                    img.put_pixel(px as u32, py as u32, color);
                                }
                            }
                        }
                    }
                }
            }
        }
        cx += 4 * scale;
    }
}

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: Rgb<u8>) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = x0 + (x1 - x0) * t;
        let y = y0 + (y1 - y0) * t;
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

const PLOT_SERIES: [(&str, Rgb<u8>); 6] = [
    ("total", Rgb([20, 20, 20])),
    ("seg_source", Rgb([31, 119, 180])),
    ("seg_target", Rgb([214, 39, 40])),
    ("emb", Rgb([44, 160, 44])),
    ("cls", Rgb([255, 127, 14])),
    ("mcl", Rgb([148, 103, 189])),
];

/// Renders loss curves from a metrics table to a PNG. Series that are
/// identically zero (unused terms) are left out.
pub fn plot_training_curves(table: &MetricsTable, png_path: &Path) -> Result<()> {
    let (w, h) = (800u32, 420u32);
    let (ml, mr, mt, mb) = (70f64, 15f64, 15f64, 30f64);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let series: Vec<(&str, Rgb<u8>, Vec<f64>)> = PLOT_SERIES
        .iter()
        .filter_map(|&(name, color)| {
            let values = table.column(name)?;
            if values.iter().all(|&v| v == 0.0) {
                None
            } else {
                Some((name, color, values))
            }
        })
        .collect();
    if series.is_empty() || table.steps.is_empty() {
        return Err(DrslError::Config("nothing to plot".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, _, v) in &series {
        for &x in v {
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    if !(hi > lo) {
        lo -= 1.0;
        hi += 1.0;
    }
    let pad = (hi - lo) * 0.05;
    let (lo, hi) = (lo - pad, hi + pad);
    let x_max = *table.steps.last().unwrap() as f64;
    let x_of = |s: f64| ml + (s / x_max.max(1.0)) * (w as f64 - ml - mr);
    let y_of = |v: f64| (h as f64 - mb) - (v - lo) / (hi - lo) * (h as f64 - mt - mb);

    let axis = Rgb([90, 90, 90]);
    let grid = Rgb([225, 225, 225]);
    for g in 0..=4 {
        let v = lo + (hi - lo) * g as f64 / 4.0;
        let y = y_of(v);
        draw_line(&mut img, ml, y, w as f64 - mr, y, grid);
        draw_text(&mut img, 4, y as i64 - 5, &format!("{v:9.3}"), axis);
    }
    draw_line(&mut img, ml, mt, ml, h as f64 - mb, axis);
    draw_line(&mut img, ml, h as f64 - mb, w as f64 - mr, h as f64 - mb, axis);
    draw_text(&mut img, ml as i64, (h - 24) as i64 + 8, "0", axis);
    let end_label = format!("{}", table.steps.last().unwrap());
    draw_text(
        &mut img,
        (w as f64 - mr) as i64 - end_label.len() as i64 * 8,
        (h - 24) as i64 + 8,
        &end_label,
        axis,
    );

    for (s_ix, (name, color, values)) in series.iter().enumerate() {
        for win in 0..values.len().saturating_sub(1) {
            draw_line(
                &mut img,
                x_of(table.steps[win] as f64),
                y_of(values[win]),
                x_of(table.steps[win + 1] as f64),
                y_of(values[win + 1]),
                *color,
            );
        }
        let ly = mt as i64 + 4 + s_ix as i64 * 14;
        let lx = (w - 180) as i64;
        for dy in 0..10 {
            for dx in 0..10 {
                img.put_pixel((lx + dx) as u32, (ly + dy) as u32, *color);
            }
        }
        draw_text(&mut img, lx + 14, ly, name, *color);
    }
    img.save(png_path)
        .map_err(|e| DrslError::decode(png_path, e.to_string()))
}

fn fmt_miou(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.4}", x),
        None => "n/a".to_string(),
    }
}

/// Renders one adaptation (or source) run directory into markdown plus a
/// curve PNG and a mode-center dump.
pub fn write_run_report(run_dir: &Path, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| DrslError::io(out_dir, e))?;
    let table = read_metrics_csv(&run_dir.join(METRICS_FILE))?;
    let mut md = String::from("# Run report\n\n");
    let _ = writeln!(md, "Run directory: `{}`", run_dir.display());
    let _ = writeln!(md, "Steps: {}", table.steps.len());
    if let (Some(first), Some(last)) = (table.rows.first(), table.rows.last()) {
        let total_ix = table.columns.iter().position(|c| c == "total");
        if let Some(ix) = total_ix {
            let _ = writeln!(
                md,
                "Total loss: {:.6} at step 0, {:.6} at the end.",
                first[ix], last[ix]
            );
        }
    }
    if !table.steps.is_empty() {
        plot_training_curves(&table, &out_dir.join("curves.png"))?;
        md.push_str("\nTraining curves: ![curves](curves.png)\n");
    }

    let reports_path = run_dir.join(ROUND_REPORTS_FILE);
    if reports_path.is_file() {
        let text =
            std::fs::read_to_string(&reports_path).map_err(|e| DrslError::io(&reports_path, e))?;
        let reports: Vec<RoundReport> =
            serde_json::from_str(&text).map_err(|e| DrslError::decode(&reports_path, e.to_string()))?;
        md.push_str("\n## Rounds\n\n");
        md.push_str("| round | delta | coverage | PL mIoU | self-entropy | target mIoU |\n");
        md.push_str("|------:|------:|---------:|--------:|-------------:|------------:|\n");
        for r in &reports {
            let (cov, plm, ent) = match &r.pl_quality {
                Some(q) => (
                    format!("{:.4}", q.coverage),
                    fmt_miou(q.pl_miou),
                    format!("{:.4}", q.self_entropy),
                ),
                None => ("n/a".into(), "n/a".into(), "n/a".into()),
            };
            let _ = writeln!(
                md,
                "| {} | {:.2} | {} | {} | {} | {} |",
                r.round,
                r.delta,
                cov,
                plm,
                ent,
                fmt_miou(r.target_miou)
            );
        }
    }

    let ckpt = run_dir.join(CHECKPOINT_DIR);
    if ckpt.is_dir() {
        let model: Model<f32> = Model::load(&ckpt)?;
        let centers_path = out_dir.join("mode_centers.csv");
        let mut buf = Vec::new();
        dump_centers_csv(&model.params, BANK_PARAM, &mut buf)?;
        std::fs::write(&centers_path, buf).map_err(|e| DrslError::io(&centers_path, e))?;
        md.push_str("\nMode centers: [mode_centers.csv](mode_centers.csv)\n");
    }

    let md_path = out_dir.join("report.md");
    std::fs::write(&md_path, md).map_err(|e| DrslError::io(&md_path, e))
}

/// Byte comparison of two checkpoint directories (parameter payloads).
pub fn checkpoints_identical(a: &Path, b: &Path) -> Result<bool> {
    let list = |dir: &Path| -> Result<Vec<String>> {
        let mut names: Vec<String> = std::fs::read_dir(dir)
            .map_err(|e| DrslError::io(dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".bin"))
            .collect();
        names.sort();
        Ok(names)
    };
    let (na, nb) = (list(a)?, list(b)?);
    if na != nb {
        return Ok(false);
    }
    for name in &na {
        let ba = std::fs::read(a.join(name)).map_err(|e| DrslError::io(&a.join(name), e))?;
        let bb = std::fs::read(b.join(name)).map_err(|e| DrslError::io(&b.join(name), e))?;
        if ba != bb {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Verifies that every logged total of a zero-weight run equals the sum
/// of its two segmentation terms exactly (the reduction to plain
/// self-training).
pub fn verify_seg_only_totals(table: &MetricsTable) -> Result<()> {
    let seg_s = table
        .column("seg_source")
        .ok_or_else(|| DrslError::Config("metrics missing seg_source".into()))?;
    let seg_t = table
        .column("seg_target")
        .ok_or_else(|| DrslError::Config("metrics missing seg_target".into()))?;
    let total = table
        .column("total")
        .ok_or_else(|| DrslError::Config("metrics missing total".into()))?;
    for ix in 0..total.len() {
        let expect = (seg_s[ix] as f32) + (seg_t[ix] as f32);
        if (total[ix] as f32).to_bits() != expect.to_bits() {
            return Err(DrslError::Config(format!(
                "step {}: total {} differs from seg sum {}",
                table.steps[ix], total[ix], expect
            )));
        }
    }
    Ok(())
}

/// Results of the ablation grid: every cell's final target mIoU plus the
/// pseudo-label quality trajectories of the with/without pair.
#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub source_miou: Option<f64>,
    pub beta_eta: Vec<(String, Option<f64>)>,
    pub modes: Vec<(usize, Option<f64>)>,
    pub ratios: Vec<(usize, Option<f64>)>,
    pub gammas: Vec<(String, Option<f64>)>,
    pub without_reports: Vec<RoundReport>,
    pub with_reports: Vec<RoundReport>,
    /// Zero-weight run and the variant that builds (then zero-weights)
    /// the extra terms land on identical parameters.
    pub reduction_identical: bool,
}

fn last_miou(reports: &[RoundReport]) -> Option<f64> {
    reports.last().and_then(|r| r.target_miou)
}

/// Runs the full ablation grid under `out_dir`. One source model is
/// trained per bank size; adaptation cells reuse them.
pub fn run_ablation_grid(
    base: &TrainConfig,
    manifest_path: &Path,
    out_dir: &Path,
) -> Result<AblationReport> {
    base.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| DrslError::io(out_dir, e))?;

    let mode_grid = [1usize, 3, 5];
    let ratio_grid = [1usize, 2, 4, 8];
    for r in ratio_grid {
        if base.crop % r != 0 {
            return Err(DrslError::Config(format!(
                "grid needs crop divisible by every ratio in {ratio_grid:?}, got crop {}",
                base.crop
            )));
        }
    }

    // one source model per bank size
    let mut source_dirs = std::collections::BTreeMap::new();
    for &m in &mode_grid {
        let dir = out_dir.join(format!("source_m{m}"));
        let cfg = TrainConfig {
            modes: m,
            ..base.clone()
        };
        train_source(&cfg, manifest_path, &dir)?;
        source_dirs.insert(m, dir.join(CHECKPOINT_DIR));
    }
    let base_source = source_dirs[&base.modes].clone();

    // source-only accuracy for the on/off table
    let (_, target, manifest) = trainer::load_training_data(manifest_path, None)?;
    let eval_labels = trainer::try_load_eval_labels(manifest_path, &manifest);
    let source_miou = match &eval_labels {
        Some(gt) => {
            let model: Model<f32> = Model::load(&base_source)?;
            trainer::eval_miou(&model, &target.images, gt, manifest.spec.num_classes)?
        }
        None => None,
    };

    let run_adapt = |name: &str, cfg: &TrainConfig, source: &Path| -> Result<Vec<RoundReport>> {
        let dir = out_dir.join(name);
        let (_, reports) = adapt(cfg, source, manifest_path, &dir)?;
        Ok(reports)
    };

    // with/without pair at the base bank size
    let without_cfg = TrainConfig {
        beta: 0.0,
        eta: 0.0,
        gamma: 0.0,
        variant: Variant::Drsl,
        ..base.clone()
    };
    let without_reports = run_adapt("adapt_be00", &without_cfg, &base_source)?;
    let with_cfg = TrainConfig {
        variant: Variant::Drsl,
        ..base.clone()
    };
    let with_reports = run_adapt("adapt_base", &with_cfg, &base_source)?;

    // reduction twin: same zero weights, but through the variant that
    // still constructs the consistency term
    let twin_cfg = TrainConfig {
        variant: Variant::DrslPlus,
        ..without_cfg.clone()
    };
    run_adapt("adapt_be00_plus", &twin_cfg, &base_source)?;
    let reduction_identical = checkpoints_identical(
        &out_dir.join("adapt_be00").join(CHECKPOINT_DIR),
        &out_dir.join("adapt_be00_plus").join(CHECKPOINT_DIR),
    )?;
    verify_seg_only_totals(&read_metrics_csv(
        &out_dir.join("adapt_be00").join(METRICS_FILE),
    )?)?;

    let beta_eta = vec![
        ("(0.00, 0.00)".to_string(), last_miou(&without_reports)),
        (
            format!("({:.2}, {:.2})", base.beta, base.eta),
            last_miou(&with_reports),
        ),
    ];

    let mut modes = Vec::new();
    for &m in &mode_grid {
        let miou = if m == base.modes {
            last_miou(&with_reports)
        } else {
            let cfg = TrainConfig {
                modes: m,
                variant: Variant::Drsl,
                ..base.clone()
            };
            last_miou(&run_adapt(&format!("adapt_m{m}"), &cfg, &source_dirs[&m])?)
        };
        modes.push((m, miou));
    }

    let mut ratios = Vec::new();
    for &r in &ratio_grid {
        let miou = if r == base.label_reduction_ratio {
            last_miou(&with_reports)
        } else {
            let cfg = TrainConfig {
                label_reduction_ratio: r,
                variant: Variant::Drsl,
                ..base.clone()
            };
            last_miou(&run_adapt(&format!("adapt_ratio{r}"), &cfg, &base_source)?)
        };
        ratios.push((r, miou));
    }

    let gamma_on = if base.gamma > 0.0 { base.gamma } else { 0.1 };
    let plus_cfg = TrainConfig {
        variant: Variant::DrslPlus,
        gamma: gamma_on,
        ..base.clone()
    };
    let plus_reports = run_adapt("adapt_gamma", &plus_cfg, &base_source)?;
    let gammas = vec![
        ("0.00".to_string(), last_miou(&with_reports)),
        (format!("{gamma_on:.2}"), last_miou(&plus_reports)),
    ];

    let report = AblationReport {
        source_miou,
        beta_eta,
        modes,
        ratios,
        gammas,
        without_reports,
        with_reports,
        reduction_identical,
    };
    write_grid_outputs(&report, out_dir)?;
    Ok(report)
}

fn write_grid_outputs(report: &AblationReport, out_dir: &Path) -> Result<()> {
    let json_path = out_dir.join("ablation.json");
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(&json_path, text).map_err(|e| DrslError::io(&json_path, e))?;

    let mut md = String::from("# Ablation grid\n");

    md.push_str("\n## Loss weights (beta, eta)\n\n| (beta, eta) |");
    for (label, _) in &report.beta_eta {
        let _ = write!(md, " {label} |");
    }
    md.push_str("\n|---|");
    md.push_str(&"---:|".repeat(report.beta_eta.len()));
    md.push_str("\n| target mIoU |");
    for (_, v) in &report.beta_eta {
        let _ = write!(md, " {} |", fmt_miou(*v));
    }
    md.push('\n');

    md.push_str("\n## Distribution head on/off\n\n");
    md.push_str("| | source only | head off | head on |\n|---|---:|---:|---:|\n");
    let _ = writeln!(
        md,
        "| target mIoU | {} | {} | {} |",
        fmt_miou(report.source_miou),
        fmt_miou(report.beta_eta.first().and_then(|(_, v)| *v)),
        fmt_miou(report.beta_eta.last().and_then(|(_, v)| *v)),
    );

    md.push_str("\n## Number of modes\n\n| modes |");
    for (m, _) in &report.modes {
        let _ = write!(md, " M={m} |");
    }
    md.push_str("\n|---|");
    md.push_str(&"---:|".repeat(report.modes.len()));
    md.push_str("\n| target mIoU |");
    for (_, v) in &report.modes {
        let _ = write!(md, " {} |", fmt_miou(*v));
    }
    md.push('\n');

    md.push_str("\n## Label reduction ratio\n\n| ratio |");
    for (r, _) in &report.ratios {
        let _ = write!(md, " {r} |");
    }
    md.push_str("\n|---|");
    md.push_str(&"---:|".repeat(report.ratios.len()));
    md.push_str("\n| target mIoU |");
    for (_, v) in &report.ratios {
        let _ = write!(md, " {} |", fmt_miou(*v));
    }
    md.push('\n');

    md.push_str("\n## Consistency loss weight (gamma)\n\n| gamma |");
    for (g, _) in &report.gammas {
        let _ = write!(md, " {g} |");
    }
    md.push_str("\n|---|");
    md.push_str(&"---:|".repeat(report.gammas.len()));
    md.push_str("\n| target mIoU |");
    for (_, v) in &report.gammas {
        let _ = write!(md, " {} |", fmt_miou(*v));
    }
    md.push('\n');

    md.push_str("\n## Pseudo-label quality by round\n\n");
    md.push_str("| round | delta | mIoU (head off) | entropy (head off) | mIoU (head on) | entropy (head on) |\n");
    md.push_str("|---:|---:|---:|---:|---:|---:|\n");
    let rounds = report.without_reports.len().min(report.with_reports.len());
    for ix in 0..rounds {
        let a = &report.without_reports[ix];
        let b = &report.with_reports[ix];
        let cell = |r: &RoundReport| -> (String, String) {
            match &r.pl_quality {
                Some(q) => (fmt_miou(q.pl_miou), format!("{:.4}", q.self_entropy)),
                None => ("n/a".into(), "n/a".into()),
            }
        };
        let (am, ae) = cell(a);
        let (bm, be) = cell(b);
        let _ = writeln!(md, "| {} | {:.2} | {am} | {ae} | {bm} | {be} |", a.round, a.delta);
    }

    let _ = writeln!(
        md,
        "\nZero-weight reduction check: {}",
        if report.reduction_identical {
            "identical parameters"
        } else {
            "MISMATCH"
        }
    );

    let md_path = out_dir.join("ablation.md");
    std::fs::write(&md_path, md).map_err(|e| DrslError::io(&md_path, e))
}

/// Writes the mode-center matrix of a checkpoint as CSV.
pub fn dump_centers(checkpoint_dir: &Path, out_path: &Path) -> Result<()> {
    let model: Model<f32> = Model::load(checkpoint_dir)?;
    let mut buf = Vec::new();
    dump_centers_csv(&model.params, BANK_PARAM, &mut buf)?;
    std::fs::write(out_path, buf).map_err(|e| DrslError::io(out_path, e))
}

/// Resolves the conventional grid output directory.
pub fn grid_dir(out_dir: &Path) -> PathBuf {
    out_dir.to_path_buf()
}
