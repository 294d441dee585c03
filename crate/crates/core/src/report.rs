//! Aggregation of per-repetition JSON Lines logs into tables and plots.
//! Everything here is recomputed from the files on disk.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{read_jsonl, ModelKind, VariantInfo};
use crate::metrics::TrainRecord;

pub const RUNS: &str = "runs";
pub const INFO: &str = "info.json";

pub fn run_file(model: ModelKind, repetition: usize) -> String {
    format!("{}_rep{repetition}.jsonl", model.name())
}

fn parse_run_file(name: &str) -> Option<(ModelKind, usize)> {
    let stem = name.strip_suffix(".jsonl")?;
    let (model, rep) = stem.rsplit_once("_rep")?;
    let model = match model {
        "dgcn" => ModelKind::Dgcn,
        "gcn" => ModelKind::Gcn,
        "nn" => ModelKind::Nn,
        _ => return None,
    };
    Some((model, rep.parse().ok()?))
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn test_metric(r: &TrainRecord) -> Option<f64> {
    r.test_accuracy.or(r.test_mse)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub model: ModelKind,
    pub repetitions: usize,
    /// `accuracy` or `mse`.
    pub metric: String,
    pub final_loss_mean: f64,
    pub final_loss_std: f64,
    pub final_metric_mean: Option<f64>,
    pub final_metric_std: Option<f64>,
    pub best_stationarity: Option<f64>,
    /// Scalars exchanged in one training iteration.
    pub messages_per_iteration: u64,
    pub survival: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub variants: Vec<VariantInfo>,
}

impl Summary {
    pub fn row(&self, variant: &str, model: ModelKind) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.variant == variant && r.model == model)
    }
}

type Runs = BTreeMap<(String, ModelKind), Vec<Vec<TrainRecord>>>;

fn collect(out: &Path) -> Result<(Runs, Vec<VariantInfo>)> {
    let runs_dir = out.join(RUNS);
    let mut variants: Vec<_> = fs::read_dir(&runs_dir)
        .map_err(|e| Error::io(&runs_dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    variants.sort_by_key(|e| e.file_name());
    let mut runs = Runs::new();
    let mut infos = Vec::new();
    for entry in variants {
        let variant = entry.file_name().to_string_lossy().into_owned();
        let dir = entry.path();
        let info_path = dir.join(INFO);
        if info_path.is_file() {
            let text = fs::read_to_string(&info_path).map_err(|e| Error::io(&info_path, e))?;
            infos.push(serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: info_path.clone(),
                line: e.line(),
                msg: e.to_string(),
            })?);
        }
        let mut files: Vec<(ModelKind, usize, std::path::PathBuf)> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let (model, rep) = parse_run_file(&e.file_name().to_string_lossy())?;
                Some((model, rep, e.path()))
            })
            .collect();
        files.sort();
        for (model, _, path) in files {
            let records = read_jsonl(&path)?;
            if !records.is_empty() {
                runs.entry((variant.clone(), model)).or_default().push(records);
            }
        }
    }
    Ok((runs, infos))
}

/// Rebuilds `aggregate.csv`, `summary.json`, `survival.csv` and the plots
/// under `out` from `out/runs`.
pub fn report(out: &Path) -> Result<Summary> {
    let (runs, infos) = collect(out)?;
    let mut csv = String::from(
        "variant,model,iteration,n,train_loss_mean,train_loss_std,test_metric_mean,test_metric_std,\
         consensus_residual_mean,consensus_residual_std\n",
    );
    let mut rows = Vec::new();
    let mut curves: BTreeMap<(String, ModelKind), Curves> = BTreeMap::new();
    for ((variant, model), reps) in &runs {
        let mut by_iter: BTreeMap<usize, Vec<&TrainRecord>> = BTreeMap::new();
        for r in reps.iter().flatten() {
            by_iter.entry(r.iteration).or_default().push(r);
        }
        let curve = curves.entry((variant.clone(), *model)).or_default();
        for (t, recs) in &by_iter {
            let losses: Vec<f64> = recs.iter().map(|r| r.train_loss).collect();
            let metrics: Vec<f64> = recs.iter().filter_map(|r| test_metric(r)).collect();
            let residuals: Vec<f64> = recs.iter().map(|r| r.consensus_residual).collect();
            let (lm, ls) = mean_std(&losses);
            let (rm, rs) = mean_std(&residuals);
            let metric = if metrics.is_empty() {
                (String::new(), String::new())
            } else {
                let (mm, ms) = mean_std(&metrics);
                curve.metric.push((*t as f64, mm));
                (format!("{mm:e}"), format!("{ms:e}"))
            };
            curve.loss.push((*t as f64, lm));
            writeln!(
                csv,
                "{variant},{},{t},{},{lm:e},{ls:e},{},{},{rm:e},{rs:e}",
                model.name(),
                recs.len(),
                metric.0,
                metric.1
            )
            .unwrap();
        }
        let finals: Vec<f64> = reps.iter().map(|r| r.last().unwrap().train_loss).collect();
        let final_metrics: Vec<f64> = reps
            .iter()
            .filter_map(|r| r.iter().rev().find_map(test_metric))
            .collect();
        let (flm, fls) = mean_std(&finals);
        let (fmm, fms) = if final_metrics.is_empty() {
            (None, None)
        } else {
            let (a, b) = mean_std(&final_metrics);
            (Some(a), Some(b))
        };
        let metric = if reps[0].iter().any(|r| r.test_accuracy.is_some()) {
            "accuracy"
        } else {
            "mse"
        };
        curve.metric_name = metric.into();
        let first = &reps[0][0];
        rows.push(SummaryRow {
            variant: variant.clone(),
            model: *model,
            repetitions: reps.len(),
            metric: metric.into(),
            final_loss_mean: flm,
            final_loss_std: fls,
            final_metric_mean: fmm,
            final_metric_std: fms,
            best_stationarity: reps
                .iter()
                .filter_map(|r| r.last().unwrap().stationarity_best)
                .reduce(f64::min),
            messages_per_iteration: first.messages_forward + first.messages_backward + first.messages_consensus,
            survival: infos.iter().find(|i| &i.variant == variant).map(|i| i.survival),
        });
    }
    let write = |name: &str, text: String| {
        let path = out.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write("aggregate.csv", csv)?;
    let summary = Summary {
        rows,
        variants: infos,
    };
    write(
        "summary.json",
        serde_json::to_string_pretty(&summary).expect("serializable") + "\n",
    )?;
    let mut survival = String::from("variant,survival,comm_links,spectral_gap,unneeded_links\n");
    for i in &summary.variants {
        writeln!(
            survival,
            "{},{:.4},{},{:.6},{}",
            i.variant,
            i.survival,
            i.comm_links,
            i.spectral_gap,
            i.unneeded_links.len()
        )
        .unwrap();
    }
    write("survival.csv", survival)?;
    write_plots(out, &curves)?;
    Ok(summary)
}

#[derive(Debug, Default)]
struct Curves {
    loss: Vec<(f64, f64)>,
    metric: Vec<(f64, f64)>,
    metric_name: String,
}

fn write_plots(out: &Path, curves: &BTreeMap<(String, ModelKind), Curves>) -> Result<()> {
    let dir = out.join("plots");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let save = |name: String, svg: String| {
        let path = dir.join(name);
        fs::write(&path, svg).map_err(|e| Error::io(&path, e))
    };
    let mut variants: Vec<&String> = curves.keys().map(|(v, _)| v).collect();
    variants.dedup();
    for variant in &variants {
        let mine: Vec<_> = curves.iter().filter(|((v, _), _)| v == *variant).collect();
        let metric_name = mine[0].1.metric_name.clone();
        let loss: Vec<Series> = mine.iter().map(|((_, m), c)| (m.name().to_string(), c.loss.clone())).collect();
        let metric: Vec<Series> = mine
            .iter()
            .map(|((_, m), c)| (m.name().to_string(), c.metric.clone()))
            .collect();
        save(
            format!("{variant}_loss.svg"),
            line_plot(&format!("{variant}: training loss"), "iteration", "loss", &loss, true),
        )?;
        save(
            format!("{variant}_{metric_name}.svg"),
            line_plot(&format!("{variant}: test {metric_name}"), "iteration", &metric_name, &metric, false),
        )?;
    }
    if variants.len() > 1 {
        // the distributed model across variants, or whatever model exists
        let model = if curves.keys().any(|(_, m)| *m == ModelKind::Dgcn) {
            ModelKind::Dgcn
        } else {
            curves.keys().next().unwrap().1
        };
        let mine: Vec<_> = curves.iter().filter(|((_, m), _)| *m == model).collect();
        let metric_name = mine[0].1.metric_name.clone();
        let loss: Vec<Series> = mine.iter().map(|((v, _), c)| (v.clone(), c.loss.clone())).collect();
        let metric: Vec<Series> = mine.iter().map(|((v, _), c)| (v.clone(), c.metric.clone())).collect();
        save(
            "variants_loss.svg".into(),
            line_plot(&format!("{}: training loss", model.name()), "iteration", "loss", &loss, true),
        )?;
        save(
            format!("variants_{metric_name}.svg"),
            line_plot(
                &format!("{}: test {metric_name}", model.name()),
                "iteration",
                &metric_name,
                &metric,
                false,
            ),
        )?;
    }
    Ok(())
}

pub type Series = (String, Vec<(f64, f64)>);

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// A minimal SVG line chart. Non-positive values are skipped on a log axis.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series], log_y: bool) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 130.0, 40.0, 50.0);
    let ty = |y: f64| if log_y { y.log10() } else { y };
    let points: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|(_, p)| p.iter().copied())
        .filter(|&(x, y)| x.is_finite() && y.is_finite() && (!log_y || y > 0.0))
        .map(|(x, y)| (x, ty(y)))
        .collect();
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        (left + w - right) / 2.0,
        escape(title)
    );
    if points.is_empty() {
        svg.push_str("<text x=\"320\" y=\"200\" text-anchor=\"middle\">no data</text>\n</svg>\n");
        return svg;
    }
    let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&(f64, f64)) -> f64| points.iter().map(sel).fold(init, f);
    let (mut x0, mut x1) = (fold(f64::min, f64::INFINITY, |p| p.0), fold(f64::max, f64::NEG_INFINITY, |p| p.0));
    let (mut y0, mut y1) = (fold(f64::min, f64::INFINITY, |p| p.1), fold(f64::max, f64::NEG_INFINITY, |p| p.1));
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        let pad = if y0 == 0.0 { 1.0 } else { y0.abs() * 0.1 };
        y0 -= pad;
        y1 += pad;
    }
    if !log_y && y0 > 0.0 && y0 < 0.5 * y1 {
        y0 = 0.0;
    }
    x0 = x0.min(x1);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;
    writeln!(
        svg,
        "<rect x=\"{left}\" y=\"{top}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#444\"/>"
    )
    .unwrap();
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let ylab = if log_y { format!("{:.2e}", 10f64.powf(yv)) } else { format!("{yv:.3}") };
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.0}</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{ylab}</text>\n\
             <line x1=\"{left}\" x2=\"{:.1}\" y1=\"{:.1}\" y2=\"{:.1}\" stroke=\"#ddd\"/>",
            sx(xv),
            h - bottom + 18.0,
            xv,
            left - 6.0,
            sy(yv) + 4.0,
            left + pw,
            sy(yv),
            sy(yv)
        )
        .unwrap();
    }
    writeln!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}{}</text>",
        left + pw / 2.0,
        h - 10.0,
        escape(x_label),
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label),
        if log_y { " (log)" } else { "" }
    )
    .unwrap();
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|&&(x, y)| x.is_finite() && y.is_finite() && (!log_y || y > 0.0))
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(ty(y))))
            .collect();
        if !path.is_empty() {
            writeln!(
                svg,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
                path.join(" ")
            )
            .unwrap();
        }
        let ly = top + 10.0 + 18.0 * i as f64;
        writeln!(
            svg,
            "<line x1=\"{:.1}\" x2=\"{:.1}\" y1=\"{ly:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\">{}</text>",
            w - right + 10.0,
            w - right + 30.0,
            w - right + 35.0,
            ly + 4.0,
            escape(name)
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_file_names_round_trip() {
        for model in [ModelKind::Dgcn, ModelKind::Gcn, ModelKind::Nn] {
            assert_eq!(parse_run_file(&run_file(model, 12)), Some((model, 12)));
        }
        assert_eq!(parse_run_file("notes.txt"), None);
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn log_plot_skips_nonpositive() {
        let svg = line_plot("t", "x", "y", &[("a".into(), vec![(0.0, 1.0), (1.0, 0.0), (2.0, 0.1)])], true);
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.contains("(log)"));
    }
}
