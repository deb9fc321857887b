use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;

use super::eval::{AblationRow, EvalResult};
use super::study::StudyResult;
use super::{write_atomic, HarnessError};
use crate::attribution::{NormDimension, Space};

pub struct ReportInputs<'a> {
    pub config_hash: String,
    pub space: Space,
    pub norm: NormDimension,
    pub study: Option<&'a StudyResult>,
    pub eval: Option<&'a EvalResult>,
    pub ablation: Option<&'a [AblationRow]>,
    /// (started, finished); only written when present.
    pub timestamps: Option<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportBundle {
    pub dir: PathBuf,
    pub files: Vec<String>,
    pub omitted: Vec<String>,
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

const W: f64 = 560.0;
const H: f64 = 340.0;
const PAD: f64 = 56.0;

fn svg_open(title: &str, width: f64, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n<text x=\"{:.1}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        width / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn axes(out: &mut String, x_label: &str, y_label: &str, y_min: f64, y_max: f64) {
    let (x0, y0, x1, y1) = (PAD, H - PAD, W - PAD / 2.0, PAD);
    let _ = writeln!(out, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>");
    let _ = writeln!(out, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>");
    for k in 0..=4 {
        let v = y_min + (y_max - y_min) * k as f64 / 4.0;
        let y = y0 - (y0 - y1) * k as f64 / 4.0;
        let _ = writeln!(out, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.3}</text>", x0 - 4.0, y + 4.0);
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
        (x0 + x1) / 2.0,
        H - 14.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">{}</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((0.0f64, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi - lo < 1e-12 {
        (lo, lo + 1.0)
    } else {
        (lo, hi)
    }
}

fn line_chart(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let mut out = svg_open(title, W, H);
    let (y_min, y_max) = range(points.iter().map(|p| p.1));
    let (x_min, x_max) = {
        let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        if points.is_empty() || hi - lo < 1e-12 {
            (lo.min(0.0), lo.max(0.0) + 1.0)
        } else {
            (lo, hi)
        }
    };
    axes(&mut out, x_label, y_label, y_min, y_max);
    let px = |x: f64| PAD + (W - 1.5 * PAD) * (x - x_min) / (x_max - x_min);
    let py = |y: f64| (H - PAD) - (H - 2.0 * PAD) * (y - y_min) / (y_max - y_min);
    let path: Vec<String> = points.iter().map(|(x, y)| format!("{:.1},{:.1}", px(*x), py(*y))).collect();
    let _ =
        writeln!(out, "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"{}\"/>", path.join(" "));
    for (x, y) in points {
        let _ = writeln!(out, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"#1f77b4\"/>", px(*x), py(*y));
        let _ =
            writeln!(out, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{x}</text>", px(*x), H - PAD + 14.0);
    }
    out.push_str("</svg>\n");
    out
}

fn bar_chart(title: &str, labels: &[String], values: &[f64]) -> String {
    let mut out = svg_open(title, W, H);
    let (y_min, y_max) = range(values.iter().copied().chain([-100.0, 100.0]));
    axes(&mut out, "segment", "score", y_min, y_max);
    let py = |y: f64| (H - PAD) - (H - 2.0 * PAD) * (y - y_min) / (y_max - y_min);
    let slot = (W - 1.5 * PAD) / labels.len().max(1) as f64;
    for (i, (label, v)) in labels.iter().zip(values).enumerate() {
        let x = PAD + slot * i as f64 + slot * 0.15;
        let (top, bottom) = (py(v.max(0.0)), py(v.min(0.0)));
        let fill = if *v >= 0.0 { "#d62728" } else { "#1f77b4" };
        let _ = writeln!(
            out,
            "<rect x=\"{x:.1}\" y=\"{top:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{fill}\"/>",
            slot * 0.7,
            bottom - top
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"9\">{}</text>",
            x + slot * 0.35,
            H - PAD + 14.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn heatmap(title: &str, rows: &[String], cols: &[String], values: &[Vec<f64>]) -> String {
    let cell = 22.0;
    let left = 130.0;
    let top = 40.0;
    let width = left + cell * cols.len() as f64 + 20.0;
    let height = top + cell * rows.len() as f64 + 90.0;
    let mut out = svg_open(title, width.max(240.0), height);
    let scale = values.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for (i, row) in rows.iter().enumerate() {
        let y = top + cell * i as f64;
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            left - 4.0,
            y + 15.0,
            escape(row)
        );
        for (j, v) in values[i].iter().enumerate() {
            let t = if scale > 0.0 { v / scale } else { 0.0 };
            let fade = (255.0 * (1.0 - t.abs())).round() as u8;
            let color = if t >= 0.0 { format!("rgb(255,{fade},{fade})") } else { format!("rgb({fade},{fade},255)") };
            let _ = writeln!(
                out,
                "<rect x=\"{:.1}\" y=\"{y:.1}\" width=\"{cell}\" height=\"{cell}\" fill=\"{color}\" stroke=\"#ccc\"><title>{v:.4}</title></rect>",
                left + cell * j as f64
            );
        }
    }
    for (j, col) in cols.iter().enumerate() {
        let x = left + cell * j as f64 + cell / 2.0;
        let y = top + cell * rows.len() as f64 + 8.0;
        let _ = writeln!(
            out,
            "<text x=\"{x:.1}\" y=\"{y:.1}\" font-size=\"9\" transform=\"rotate(60 {x:.1} {y:.1})\">{}</text>",
            escape(col)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Writes CSV tables, SVG figures and the run.json manifest into `dir`.
/// Output bytes depend only on the inputs.
pub fn emit_report(dir: &Path, inputs: &ReportInputs<'_>) -> Result<ReportBundle, HarnessError> {
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let mut omitted: Vec<String> = Vec::new();

    match inputs.study {
        Some(study) => {
            let labels: Vec<String> = study.component_scores.iter().map(|(id, _)| id.to_string()).collect();
            let values: Vec<f64> = study.component_scores.iter().map(|(_, v)| *v).collect();
            files.push((
                "component_scores.csv".into(),
                csv_bytes(
                    &["segment", "label", "score"],
                    study
                        .component_scores
                        .iter()
                        .map(|(id, s)| vec![id.to_string(), id.kind.label().to_string(), s.to_string()]),
                ),
            ));
            files.push(("component_scores.svg".into(), bar_chart("Component scores", &labels, &values).into_bytes()));

            files.push((
                "horizon_curve.csv".into(),
                csv_bytes(
                    &["step", "mean_attr", "n_tokens", "n_instances"],
                    study.horizon.iter().map(|p| {
                        vec![
                            p.step.to_string(),
                            p.mean_attr.to_string(),
                            p.n_tokens.to_string(),
                            p.n_instances.to_string(),
                        ]
                    }),
                ),
            ));
            let points: Vec<(f64, f64)> = study.horizon.iter().map(|p| (p.step as f64, p.mean_attr)).collect();
            files.push((
                "horizon_curve.svg".into(),
                line_chart("Question attribution by plan step", "step", "mean attribution", &points).into_bytes(),
            ));

            files.push((
                "pairwise.csv".into(),
                csv_bytes(
                    &["row_segment", "col_action", "step", "value"],
                    study
                        .pairwise
                        .iter()
                        .map(|c| vec![c.row.to_string(), c.action.clone(), c.step.to_string(), c.value.to_string()]),
                ),
            ));
            if study.pairwise.is_empty() {
                omitted.push("pairwise_heatmap.svg: pairwise matrix is empty".into());
            } else {
                let mut rows: Vec<_> = study.pairwise.iter().map(|c| c.row).collect();
                rows.dedup();
                rows.sort();
                rows.dedup();
                let mut cols: Vec<(usize, String)> =
                    study.pairwise.iter().map(|c| (c.step, c.action.clone())).collect();
                cols.sort();
                cols.dedup();
                let values: Vec<Vec<f64>> = rows
                    .iter()
                    .map(|r| {
                        cols.iter()
                            .map(|(s, a)| {
                                study
                                    .pairwise
                                    .iter()
                                    .find(|c| c.row == *r && c.step == *s && &c.action == a)
                                    .map_or(0.0, |c| c.value)
                            })
                            .collect()
                    })
                    .collect();
                let row_labels: Vec<String> = rows.iter().map(|r| r.to_string()).collect();
                let col_labels: Vec<String> = cols.iter().map(|(s, a)| format!("{s}:{a}")).collect();
                files.push((
                    "pairwise_heatmap.svg".into(),
                    heatmap("Segment x action attribution", &row_labels, &col_labels, &values).into_bytes(),
                ));
            }
        }
        None => omitted.push("attribution outputs: no attribution study in this run".into()),
    }

    match inputs.eval {
        Some(eval) => {
            files.push((
                "accuracy_by_steps.csv".into(),
                csv_bytes(
                    &["bin", "total", "correct", "accuracy"],
                    eval.bins.iter().map(|b| {
                        vec![b.bin.to_string(), b.total.to_string(), b.correct.to_string(), b.accuracy.to_string()]
                    }),
                ),
            ));
            let points: Vec<(f64, f64)> = eval.bins.iter().map(|b| (b.bin as f64, b.accuracy)).collect();
            files.push((
                "accuracy_by_steps.svg".into(),
                line_chart("Accuracy by optimal plan length", "optimal steps", "accuracy", &points).into_bytes(),
            ));
        }
        None => omitted.push("accuracy_by_steps: no planning evaluation in this run".into()),
    }

    match inputs.ablation {
        Some(rows) => files.push((
            "ablation.csv".into(),
            csv_bytes(
                &["condition", "accuracy"],
                rows.iter().map(|r| vec![r.condition.clone(), r.accuracy.to_string()]),
            ),
        )),
        None => omitted.push("ablation.csv: no ablation in this run".into()),
    }

    let mut names: Vec<String> = files.iter().map(|(n, _)| n.clone()).collect();
    names.push("run.json".into());
    names.sort();
    let mut manifest = json!({
        "config_hash": inputs.config_hash,
        "space": inputs.space.to_string(),
        "normalization": inputs.norm.to_string(),
        "component_score_normalization": "whole",
        "aggregation": "unweighted mean over instances",
        "horizon_values": "raw attribution, mean per step",
        "word_rollup": "mean",
        "step_binning": "optimal plan length",
        "files": names,
        "omitted": omitted,
    });
    if let Some((started, finished)) = &inputs.timestamps {
        manifest["timestamps"] = json!({"started": started, "finished": finished});
    }
    let mut manifest_text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    manifest_text.push('\n');
    files.push(("run.json".into(), manifest_text.into_bytes()));

    for (name, bytes) in &files {
        write_atomic(&dir.join(name), bytes)?;
    }
    Ok(ReportBundle { dir: dir.to_path_buf(), files: names, omitted })
}
