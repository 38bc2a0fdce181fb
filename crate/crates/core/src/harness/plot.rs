//! Self-contained SVG plot emission.
//!
//! Plots are simple line charts with one-standard-deviation bands. Every file
//! embeds its data points in a `plot-data` comment as JSON, so the rendered
//! figures are exactly reproducible from `runs.csv` and testable without an
//! image parser.

use serde::{Deserialize, Serialize};

use super::{RunResult, RunStatus};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Series {
    pub label: String,
    /// (x, mean, std) triplets.
    pub points: Vec<(f64, f64, f64)>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn fmt(v: f64) -> String {
    format!("{v:.6e}")
}

/// Renders a line chart; series data rides along in a machine-readable
/// comment between `plot-data` markers.
pub fn line_plot_svg(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in series {
        for &(x, m, sd) in &s.points {
            xs.push(x);
            ys.push(m - sd);
            ys.push(m + sd);
        }
    }
    let (x_min, x_max) = bounds(&xs);
    let (y_min, y_max) = bounds(&ys);
    let x_span = (x_max - x_min).max(1e-12);
    let y_span = (y_max - y_min).max(1e-12);
    let px = |x: f64| MARGIN_L + (x - x_min) / x_span * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |y: f64| HEIGHT - MARGIN_B - (y - y_min) / y_span * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<!-- plot-data\n");
    svg.push_str(&serde_json::to_string(series).expect("series serialize"));
    svg.push_str("\nplot-data -->\n");
    svg.push_str(&format!(
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\" \
         font-family=\"sans-serif\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    ));

    // axes
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B
    ));
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"black\"/>\n",
        HEIGHT - MARGIN_B
    ));
    for i in 0..=4 {
        let fx = x_min + x_span * i as f64 / 4.0;
        let fy = y_min + y_span * i as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\" \
             font-family=\"sans-serif\">{:.3}</text>\n",
            px(fx),
            HEIGHT - MARGIN_B + 18.0,
            fx
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"11\" \
             font-family=\"sans-serif\">{:.3}</text>\n",
            MARGIN_L - 6.0,
            py(fy) + 4.0,
            fy
        ));
        svg.push_str(&format!(
            "<line x1=\"{MARGIN_L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#dddddd\"/>\n",
            py(fy),
            WIDTH - MARGIN_R,
            py(fy)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\" \
         font-family=\"sans-serif\">{}</text>\n",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 12.0,
        escape(xlabel)
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\" \
         font-family=\"sans-serif\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        escape(ylabel)
    ));

    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        if s.points.iter().any(|&(_, _, sd)| sd > 0.0) {
            let mut band = String::new();
            for &(x, m, sd) in &s.points {
                band.push_str(&format!("{},{} ", fmt(px(x)), fmt(py(m + sd))));
            }
            for &(x, m, sd) in s.points.iter().rev() {
                band.push_str(&format!("{},{} ", fmt(px(x)), fmt(py(m - sd))));
            }
            svg.push_str(&format!(
                "<polygon points=\"{}\" fill=\"{}\" opacity=\"0.15\"/>\n",
                band.trim_end(),
                color
            ));
        }
        let line: Vec<String> = s
            .points
            .iter()
            .map(|&(x, m, _)| format!("{},{}", fmt(px(x)), fmt(py(m))))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.8\"/>\n",
            line.join(" "),
            color
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" font-family=\"sans-serif\" \
             fill=\"{}\">{}</text>\n",
            WIDTH - MARGIN_R - 180.0,
            MARGIN_T + 16.0 * si as f64,
            color,
            escape(&s.label)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn bounds(vals: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in vals {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Extracts the embedded series from an SVG produced by `line_plot_svg`.
pub fn extract_plot_data(svg: &str) -> Option<Vec<Series>> {
    let start = svg.find("<!-- plot-data\n")? + "<!-- plot-data\n".len();
    let end = svg[start..].find("\nplot-data -->")? + start;
    serde_json::from_str(&svg[start..end]).ok()
}

/// Per-agent regret traces vs round, grouped by sweep point.
pub fn regret_vs_round_series(results: &[RunResult]) -> Vec<Series> {
    let mut keys: Vec<(super::Algorithm, usize, usize, usize)> = Vec::new();
    for r in results {
        let k = (r.algorithm, r.n_agents, r.d, r.horizon);
        if matches!(r.status, RunStatus::Ok) && !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(alg, n, d, t)| {
            let runs: Vec<&RunResult> = results
                .iter()
                .filter(|r| {
                    matches!(r.status, RunStatus::Ok)
                        && r.algorithm == alg
                        && r.n_agents == n
                        && r.d == d
                        && r.horizon == t
                })
                .collect();
            let len = runs.iter().map(|r| r.checkpoints.len()).min().unwrap_or(0);
            let points = (0..len)
                .map(|idx| {
                    let x = runs[0].checkpoints[idx].t as f64;
                    let vals: Vec<f64> = runs
                        .iter()
                        .map(|r| r.checkpoints[idx].cum_regret / n as f64)
                        .collect();
                    let (m, s) = super::mean_and_std(&vals);
                    (x, m, s)
                })
                .collect();
            Series {
                label: format!("{alg} N={n} d={d} T={t}"),
                points,
            }
        })
        .collect()
}

/// Final communication cost against one sweep axis.
fn comm_vs_axis(results: &[RunResult], axis: fn(&RunResult) -> usize) -> Vec<Series> {
    let mut groups: Vec<(super::Algorithm, usize, usize)> = Vec::new();
    for r in results {
        let key = (r.algorithm, r.horizon, r.k_arms);
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    groups
        .into_iter()
        .map(|(alg, t, _k)| {
            let mut pts: Vec<(f64, f64, f64)> = Vec::new();
            let mut seen_axis: Vec<usize> = Vec::new();
            for r in results {
                if r.algorithm != alg || r.horizon != t {
                    continue;
                }
                let a = axis(r);
                if seen_axis.contains(&a) {
                    continue;
                }
                seen_axis.push(a);
                let vals: Vec<f64> = results
                    .iter()
                    .filter(|x| {
                        matches!(x.status, RunStatus::Ok)
                            && x.algorithm == alg
                            && x.horizon == t
                            && axis(x) == a
                    })
                    .map(|x| x.comm_scalars as f64)
                    .collect();
                let (m, s) = super::mean_and_std(&vals);
                pts.push((a as f64, m, s));
            }
            pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            Series {
                label: format!("{alg} T={t}"),
                points: pts,
            }
        })
        .collect()
}

/// The standard three panels, emitted only when the data varies on the
/// relevant axis.
pub fn standard_plots(results: &[RunResult]) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let regret = regret_vs_round_series(results);
    if regret.iter().any(|s| s.points.len() > 1) {
        out.push((
            "regret_vs_t.svg".to_string(),
            line_plot_svg(
                "Per-agent cumulative regret",
                "round t",
                "regret / N",
                &regret,
            ),
        ));
    }
    let mut n_values: Vec<usize> = results.iter().map(|r| r.n_agents).collect();
    n_values.sort_unstable();
    n_values.dedup();
    if n_values.len() > 1 {
        let series = comm_vs_axis(results, |r| r.n_agents);
        out.push((
            "comm_vs_n.svg".to_string(),
            line_plot_svg(
                "Communication cost vs agents",
                "number of agents N",
                "scalars sent",
                &series,
            ),
        ));
    }
    let mut d_values: Vec<usize> = results.iter().map(|r| r.d).collect();
    d_values.sort_unstable();
    d_values.dedup();
    if d_values.len() > 1 {
        let series = comm_vs_axis(results, |r| r.d);
        out.push((
            "comm_vs_d.svg".to_string(),
            line_plot_svg(
                "Communication cost vs dimension",
                "dimension d",
                "scalars sent",
                &series,
            ),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{parse_runs_csv, run_experiment, runs_csv_text, tests_support_config};

    #[test]
    fn plot_data_round_trips() {
        let series = vec![Series {
            label: "demo".into(),
            points: vec![(1.0, 2.5, 0.3), (2.0, 3.5, 0.4)],
        }];
        let svg = line_plot_svg("t", "x", "y", &series);
        let back = extract_plot_data(&svg).unwrap();
        assert_eq!(back, series);
        assert!(svg.contains("<polyline"));
    }

    #[test]
    fn plot_points_equal_csv_aggregates() {
        let mut cfg = tests_support_config();
        cfg.sweep.n_agents = vec![2, 3];
        cfg.seeds = vec![1, 2];
        let results = run_experiment(&cfg).unwrap();

        // Round-trip the results through the CSV, then recompute comm-vs-N.
        let parsed = parse_runs_csv(&runs_csv_text(&results)).unwrap();
        let from_parsed = comm_vs_axis(&parsed, |r| r.n_agents);
        let plots = standard_plots(&results);
        let comm_plot = plots
            .iter()
            .find(|(name, _)| name == "comm_vs_n.svg")
            .expect("comm plot present");
        let embedded = extract_plot_data(&comm_plot.1).unwrap();
        assert_eq!(embedded, from_parsed);
    }
}
