//! JSON, CSV and SVG writers for evaluation artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::data::ClassDivision;
use crate::error::{Error, Result};
use crate::eval::{AblationTable, EvalReport, ExpertPreference, HardestNegativeHistogram, SweepTable};

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn csv_file(path: &Path) -> Result<csv::Writer<fs::File>> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per class: division, ensemble accuracy, then one column per expert.
pub fn write_per_class_csv(report: &EvalReport, division: &ClassDivision, path: &Path) -> Result<()> {
    let mut w = csv_file(path)?;
    let mut header = vec!["class".to_string(), "division".into(), "accuracy".into()];
    header.extend((0..report.per_expert.len()).map(|m| format!("expert_{m}")));
    w.write_record(&header)?;
    let assignment = division.assignment();
    for (c, acc) in report.per_class.iter().enumerate() {
        let mut row = vec![c.to_string(), assignment[c].name().to_string(), acc.to_string()];
        row.extend(report.per_expert.iter().map(|e| e[c].to_string()));
        w.write_record(&row)?;
    }
    finish(w, path)
}

pub fn write_preference_csv(pref: &ExpertPreference, path: &Path) -> Result<()> {
    let mut w = csv_file(path)?;
    w.write_record(["division", "expert", "ratio"])?;
    for d in crate::data::Division::ALL {
        if let Some(r) = pref.get(d) {
            for (m, v) in r.iter().enumerate() {
                w.write_record([d.name().to_string(), m.to_string(), v.to_string()])?;
            }
        }
    }
    finish(w, path)
}

pub fn write_histogram_csv(h: &HardestNegativeHistogram, path: &Path) -> Result<()> {
    let mut w = csv_file(path)?;
    w.write_record(["lower", "upper", "count"])?;
    for (i, k) in h.counts.iter().enumerate() {
        w.write_record([h.edges[i].to_string(), h.edges[i + 1].to_string(), k.to_string()])?;
    }
    finish(w, path)
}

pub fn write_ablation_csv(t: &AblationTable, path: &Path) -> Result<()> {
    let mut w = csv_file(path)?;
    w.write_record(["moe", "dkf", "mu", "nt", "label", "mean_accuracy", "accuracies", "hard_negative_rate"])?;
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
    for r in &t.rows {
        let f = r.flags;
        w.write_record([
            u8::from(f.use_moe).to_string(),
            u8::from(f.use_dkf).to_string(),
            u8::from(f.use_mu).to_string(),
            u8::from(f.use_nt).to_string(),
            r.label.clone(),
            r.mean.to_string(),
            join(&r.accuracies),
            join(&r.hard_negative_rate),
        ])?;
    }
    finish(w, path)
}

pub fn write_sweep_csv(t: &SweepTable, path: &Path) -> Result<()> {
    let mut w = csv_file(path)?;
    w.write_record(["experts", "arrangement", "mean_accuracy", "accuracies"])?;
    for c in &t.cells {
        let accs = c.accuracies.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";");
        w.write_record([c.num_experts.to_string(), c.arrangement.clone(), c.mean.to_string(), accs])?;
    }
    finish(w, path)
}

/// A minimal bar chart as a standalone SVG document.
pub fn bar_chart_svg(title: &str, labels: &[String], values: &[f64], y_max: f64) -> String {
    let (w, h, pad) = (640.0, 320.0, 40.0);
    let n = values.len().max(1) as f64;
    let bw = (w - 2.0 * pad) / n;
    let top = if y_max > 0.0 { y_max } else { 1.0 };
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = write!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = write!(
        s,
        r#"<text x="{}" y="20" font-size="14" text-anchor="middle" font-family="sans-serif">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let base = h - pad;
    let _ = write!(s, r#"<line x1="{pad}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#, w - pad);
    let _ = write!(s, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{base}" stroke="black"/>"#);
    let _ = write!(
        s,
        r#"<text x="{}" y="{}" font-size="10" text-anchor="end" font-family="sans-serif">{top:.3}</text>"#,
        pad - 4.0,
        pad + 4.0
    );
    for (i, &v) in values.iter().enumerate() {
        let bh = (v / top).clamp(0.0, 1.0) * (base - pad);
        let x = pad + i as f64 * bw;
        let _ = write!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{bh:.2}" fill="steelblue"><title>{}: {v}</title></rect>"#,
            x + 0.1 * bw,
            base - bh,
            0.8 * bw,
            escape(labels.get(i).map(String::as_str).unwrap_or(""))
        );
    }
    let step = (values.len() / 20).max(1);
    for (i, l) in labels.iter().enumerate().step_by(step) {
        let _ = write!(
            s,
            r#"<text x="{:.2}" y="{}" font-size="9" text-anchor="middle" font-family="sans-serif">{}</text>"#,
            pad + (i as f64 + 0.5) * bw,
            base + 12.0,
            escape(l)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn histogram_svg(h: &HardestNegativeHistogram, title: &str) -> String {
    let labels: Vec<String> = h.edges[..h.counts.len()].iter().map(|e| format!("{e:.2}")).collect();
    let values: Vec<f64> = h.counts.iter().map(|&k| k as f64).collect();
    let top = values.iter().cloned().fold(0.0, f64::max);
    bar_chart_svg(title, &labels, &values, top)
}

pub fn per_class_svg(report: &EvalReport, title: &str) -> String {
    let labels: Vec<String> = (0..report.per_class.len()).map(|c| c.to_string()).collect();
    bar_chart_svg(title, &labels, &report.per_class, 1.0)
}

pub fn write_text(text: &str, path: &Path) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
