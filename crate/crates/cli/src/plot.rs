//! SVG plots of a run's metrics log and of ablation tables.

use std::fs;
use std::path::{Path, PathBuf};

use osmd_core::experiment::{read_metrics_log, LogRow, ABLATION_SUMMARY, ABLATION_TABLE, CONFIG_DIGEST, METRICS_LOG};
use plotters::prelude::*;
use sha2::{Digest, Sha256};

use crate::Failure;

fn io_fail(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure {
        code: 6,
        message: format!("{}: {}", path.display(), e),
    }
}

fn draw_fail(path: &Path, e: impl std::fmt::Debug) -> Failure {
    Failure {
        code: 6,
        message: format!("{}: drawing failed: {:?}", path.display(), e),
    }
}

type Series = (&'static str, RGBColor, Vec<(f64, f64)>);

fn line_chart(path: &Path, title: &str, x_desc: &str, series: &[Series]) -> Result<(), Failure> {
    let pts = series.iter().flat_map(|s| s.2.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_fail(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(|e| draw_fail(path, e))?;
    chart
        .configure_mesh()
        .x_desc(x_desc)
        .draw()
        .map_err(|e| draw_fail(path, e))?;
    for (name, color, data) in series {
        let color = *color;
        chart
            .draw_series(LineSeries::new(data.iter().copied(), color))
            .map_err(|e| draw_fail(path, e))?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| draw_fail(path, e))?;
    root.present().map_err(|e| draw_fail(path, e))
}

fn plot_run(dir: &Path, log: &Path, out: &Path) -> Result<(), Failure> {
    let rows = read_metrics_log(log)?;
    let digest = fs::read_to_string(dir.join(CONFIG_DIGEST))
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|_| hex::encode(Sha256::digest(log.to_string_lossy().as_bytes())));
    let tag = &digest[..digest.len().min(12)];
    let steps: Vec<_> = rows
        .iter()
        .filter_map(|r| match r {
            LogRow::Step { record, .. } => Some(record),
            _ => None,
        })
        .collect();
    if steps.is_empty() {
        println!("{}: no training steps logged, nothing to plot", log.display());
        return Ok(());
    }
    fs::create_dir_all(out).map_err(|e| io_fail(out, e))?;
    let xs = |f: &dyn Fn(&osmd_core::train::StepRecord) -> f64| -> Vec<(f64, f64)> {
        steps.iter().map(|r| (r.step as f64, f(r))).collect()
    };
    let mut written = Vec::new();

    let mut losses: Vec<Series> = vec![("l_ttl", BLUE, xs(&|r| r.report.l_ttl))];
    if steps.iter().any(|r| r.report.alpha != 0.0) {
        losses.push(("l_jdn", RED, xs(&|r| r.report.l_jdn)));
    }
    if steps.iter().any(|r| r.report.beta != 0.0) {
        losses.push(("l_ctn", GREEN, xs(&|r| r.report.l_ctn)));
    }
    let p = out.join(format!("{}-losses.svg", tag));
    line_chart(&p, "loss components", "step", &losses)?;
    written.push(p);

    let mut weights: Vec<Series> = Vec::new();
    if steps.iter().any(|r| r.report.alpha != 0.0) {
        weights.push(("alpha", RED, xs(&|r| r.report.alpha)));
    }
    if steps.iter().any(|r| r.report.beta != 0.0) {
        weights.push(("beta", GREEN, xs(&|r| r.report.beta)));
    }
    if !weights.is_empty() {
        let p = out.join(format!("{}-weights.svg", tag));
        line_chart(&p, "loss weights", "step", &weights)?;
        written.push(p);
    }

    let collapse: Vec<(f64, f64)> = steps
        .iter()
        .filter_map(|r| r.collapse.map(|c| (r.step as f64, c.min())))
        .collect();
    if !collapse.is_empty() {
        let p = out.join(format!("{}-collapse.svg", tag));
        line_chart(&p, "collapse monitor: min mean |T(rep_o)|", "step", &[("collapse", MAGENTA, collapse)])?;
        written.push(p);
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

/// (variant, mean, std) rows of an ablation summary.
fn read_summary(path: &Path) -> Result<Vec<(String, f64, f64)>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_fail(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Failure {
                code: 4,
                message: format!("{}: line {}: expected 4 columns", path.display(), i + 1),
            });
        }
        let num = |s: &str| if s == "NA" { Ok(f64::NAN) } else { s.parse::<f64>() };
        match (num(cols[2]), num(cols[3])) {
            (Ok(m), Ok(s)) => out.push((cols[0].to_string(), m, s)),
            _ => {
                return Err(Failure {
                    code: 4,
                    message: format!("{}: line {}: malformed number", path.display(), i + 1),
                })
            }
        }
    }
    Ok(out)
}

fn plot_ablation(summary: &Path, out: &Path) -> Result<(), Failure> {
    let rows = read_summary(summary)?;
    let rows: Vec<_> = rows.into_iter().filter(|r| r.1.is_finite()).collect();
    if rows.is_empty() {
        println!("{}: no finished variants, nothing to plot", summary.display());
        return Ok(());
    }
    let bytes = fs::read(summary).map_err(|e| io_fail(summary, e))?;
    let tag = &hex::encode(Sha256::digest(&bytes))[..12];
    fs::create_dir_all(out).map_err(|e| io_fail(out, e))?;
    let path = out.join(format!("{}-ablation.svg", tag));
    let top = rows
        .iter()
        .map(|r| r.1 + if r.2.is_finite() { r.2 } else { 0.0 })
        .fold(0.0f64, f64::max)
        * 1.15;
    let n = rows.len();
    let root = SVGBackend::new(&path, (900, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| draw_fail(&path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("mean eval error by variant", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0f64..n as f64, 0f64..top.max(1e-6))
        .map_err(|e| draw_fail(&path, e))?;
    let names: Vec<String> = rows.iter().map(|r| r.0.clone()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| {
            let i = x.floor() as usize;
            if (x - i as f64 - 0.5).abs() < 0.26 {
                names.get(i).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc("eval error")
        .draw()
        .map_err(|e| draw_fail(&path, e))?;
    chart
        .draw_series(rows.iter().enumerate().map(|(i, r)| {
            Rectangle::new([(i as f64 + 0.15, 0.0), (i as f64 + 0.85, r.1)], BLUE.mix(0.6).filled())
        }))
        .map_err(|e| draw_fail(&path, e))?;
    chart
        .draw_series(rows.iter().enumerate().filter(|(_, r)| r.2.is_finite()).map(|(i, r)| {
            let x = i as f64 + 0.5;
            PathElement::new(vec![(x, r.1 - r.2), (x, r.1 + r.2)], BLACK)
        }))
        .map_err(|e| draw_fail(&path, e))?;
    root.present().map_err(|e| draw_fail(&path, e))?;
    println!("{}", path.display());
    Ok(())
}

pub fn cmd_plot(path: &Path, out: Option<&Path>) -> Result<(), Failure> {
    if !path.exists() {
        return Err(io_fail(path, "not found"));
    }
    let dir: PathBuf = if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| dir.join("plots"));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    if path.is_dir() {
        if dir.join(METRICS_LOG).exists() {
            return plot_run(&dir, &dir.join(METRICS_LOG), &out);
        }
        if dir.join(ABLATION_SUMMARY).exists() {
            return plot_ablation(&dir.join(ABLATION_SUMMARY), &out);
        }
        return Err(Failure {
            code: 4,
            message: format!("{}: neither {} nor {} found", dir.display(), METRICS_LOG, ABLATION_SUMMARY),
        });
    }
    match name {
        METRICS_LOG => plot_run(&dir, path, &out),
        ABLATION_SUMMARY => plot_ablation(path, &out),
        ABLATION_TABLE => plot_ablation(&dir.join(ABLATION_SUMMARY), &out),
        _ => Err(Failure {
            code: 4,
            message: format!("{}: not a metrics log or ablation table", path.display()),
        }),
    }
}
