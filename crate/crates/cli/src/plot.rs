//! SVG charts of a report: a line chart for numeric study variables, grouped
//! bars otherwise. Output depends only on the report, so identical reports
//! give identical bytes.

use std::path::{Path, PathBuf};

use adformer_core::evaluation::{AggregateMetrics, MeanStd};

use crate::error::{LabError, Result};
use crate::runner::ExperimentReport;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 64.0;
const COLORS: [&str; 2] = ["#1f77b4", "#d62728"];

/// Metric pair drawn in one chart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    F1,
    Accuracy,
}

impl Metric {
    fn file(self) -> &'static str {
        match self {
            Metric::F1 => "f1.svg",
            Metric::Accuracy => "accuracy.svg",
        }
    }

    fn title(self) -> &'static str {
        match self {
            Metric::F1 => "macro F1",
            Metric::Accuracy => "accuracy",
        }
    }

    fn pick(self, a: &AggregateMetrics) -> [MeanStd; 2] {
        match self {
            Metric::F1 => [a.sample_f1_macro, a.subject_f1_macro],
            Metric::Accuracy => [a.sample_accuracy, a.subject_accuracy],
        }
    }
}

struct Series {
    labels: Vec<String>,
    values: Vec<[MeanStd; 2]>,
    line: bool,
    variable: String,
}

fn collect(report: &ExperimentReport, metric: Metric) -> Result<Series> {
    let done: Vec<_> = report
        .blocks
        .iter()
        .filter_map(|b| b.aggregate.as_ref().map(|a| (b, a)))
        .collect();
    if done.is_empty() {
        return Err(LabError::Report("report has no completed runs to plot".into()));
    }
    let line = done.len() > 1 && done.iter().all(|(b, _)| b.value.is_number());
    let labels = done
        .iter()
        .map(|(b, _)| match &b.value {
            serde_json::Value::Number(n) => n.to_string(),
            serde_json::Value::String(s) => s.clone(),
            _ => b.label.clone(),
        })
        .collect();
    Ok(Series {
        labels,
        values: done.iter().map(|(_, a)| metric.pick(a)).collect(),
        line,
        variable: done[0].0.variable.clone().unwrap_or_else(|| "run".into()),
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn y_of(v: f64) -> f64 {
    let h = HEIGHT - TOP - BOTTOM;
    TOP + h * (1.0 - v.clamp(0.0, 1.0))
}

/// Renders one chart as an SVG document.
pub fn render(report: &ExperimentReport, metric: Metric) -> Result<String> {
    let s = collect(report, metric)?;
    let mut svg = String::new();
    let w = |svg: &mut String, line: String| {
        svg.push_str(&line);
        svg.push('\n');
    };
    w(
        &mut svg,
        format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#),
    );
    w(&mut svg, format!(r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#));
    w(
        &mut svg,
        format!(
            r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{} vs {}</text>"#,
            WIDTH / 2.0,
            metric.title(),
            escape(&s.variable)
        ),
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let y = y_of(v);
        w(
            &mut svg,
            format!(r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/>"##, WIDTH - RIGHT),
        );
        w(
            &mut svg,
            format!(r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, LEFT - 6.0, y + 4.0),
        );
    }
    let n = s.labels.len();
    let slot = (WIDTH - LEFT - RIGHT) / n as f64;
    let center = |i: usize| LEFT + slot * (i as f64 + 0.5);
    for (i, label) in s.labels.iter().enumerate() {
        w(
            &mut svg,
            format!(
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                center(i),
                HEIGHT - BOTTOM + 18.0,
                escape(label)
            ),
        );
    }
    let names = ["sample level", "subject level"];
    for k in 0..2 {
        let color = COLORS[k];
        if s.line {
            let points: Vec<String> = (0..n)
                .map(|i| format!("{:.1},{:.1}", center(i), y_of(s.values[i][k].mean)))
                .collect();
            w(
                &mut svg,
                format!(r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, points.join(" ")),
            );
            for i in 0..n {
                w(
                    &mut svg,
                    format!(
                        r#"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="{color}"/>"#,
                        center(i),
                        y_of(s.values[i][k].mean)
                    ),
                );
            }
        } else {
            let bar = slot * 0.35;
            for i in 0..n {
                let x = center(i) - bar + k as f64 * bar;
                let y = y_of(s.values[i][k].mean);
                w(
                    &mut svg,
                    format!(
                        r#"<rect x="{x:.1}" y="{y:.1}" width="{bar:.1}" height="{:.1}" fill="{color}"/>"#,
                        y_of(0.0) - y
                    ),
                );
            }
        }
        // standard deviation whiskers
        for i in 0..n {
            let m = s.values[i][k];
            let x = if s.line {
                center(i)
            } else {
                center(i) - slot * 0.35 + (k as f64 + 0.5) * slot * 0.35
            };
            w(
                &mut svg,
                format!(
                    r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#333333"/>"##,
                    y_of(m.mean - m.std),
                    y_of(m.mean + m.std)
                ),
            );
        }
        let ly = HEIGHT - 20.0;
        let lx = LEFT + k as f64 * 150.0;
        w(
            &mut svg,
            format!(r#"<rect x="{lx:.1}" y="{:.1}" width="12" height="12" fill="{color}"/>"#, ly - 10.0),
        );
        w(
            &mut svg,
            format!(r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#, lx + 18.0, names[k]),
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Writes `f1.svg` and `accuracy.svg` into `dir`.
pub fn emit_plots(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let mut out = Vec::new();
    for metric in [Metric::F1, Metric::Accuracy] {
        let path = dir.join(metric.file());
        let svg = render(report, metric)?;
        std::fs::write(&path, svg).map_err(|e| LabError::io(&path, e))?;
        out.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Resolved;
    use crate::runner::{Block, DatasetInfo};

    fn agg(v: f64) -> AggregateMetrics {
        let m = MeanStd { mean: v, std: 0.05 };
        AggregateMetrics {
            seeds: 5,
            sample_accuracy: m,
            sample_f1_macro: m,
            subject_accuracy: m,
            subject_f1_macro: MeanStd { mean: v + 0.1, std: 0.0 },
        }
    }

    fn report(values: &[serde_json::Value]) -> ExperimentReport {
        ExperimentReport {
            tool: "t".into(),
            version: "0".into(),
            study: None,
            config: Resolved::defaults(),
            dataset: DatasetInfo {
                source: "synthetic".into(),
                manifest_sha256: String::new(),
                recordings: 0,
                channels: 4,
                classes: 2,
            },
            blocks: values
                .iter()
                .enumerate()
                .map(|(i, v)| Block {
                    label: format!("b{i}"),
                    variable: Some("window_len".into()),
                    value: v.clone(),
                    config: Resolved::defaults(),
                    segments: 0,
                    too_short: vec![],
                    runs: vec![],
                    aggregate: Some(agg(0.5 + 0.1 * i as f64)),
                })
                .collect(),
            failures: 0,
        }
    }

    #[test]
    fn numeric_study_draws_two_lines() {
        let r = report(&[128.into(), 256.into(), 512.into(), 1024.into()]);
        let svg = render(&r, Metric::F1).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 8);
        for x in ["128", "256", "512", "1024"] {
            assert!(svg.contains(&format!(">{x}</text>")));
        }
    }

    #[test]
    fn categorical_study_draws_grouped_bars() {
        let r = report(&["full".into(), "no_inter".into(), "no_temporal".into(), "no_spatial".into()]);
        let svg = render(&r, Metric::F1).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 0);
        // 4 variants × 2 levels, plus background and legend swatches
        assert_eq!(svg.matches("<rect").count(), 8 + 1 + 2);
    }

    #[test]
    fn bytes_are_deterministic_and_empty_is_rejected() {
        let r = report(&[0.0.into(), 0.5.into()]);
        assert_eq!(render(&r, Metric::Accuracy).unwrap(), render(&r.clone(), Metric::Accuracy).unwrap());
        assert!(render(&report(&[]), Metric::F1).is_err());
    }
}
