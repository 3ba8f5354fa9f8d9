//! Self-contained SVG plots. Bars and points carry `data-value` attributes
//! with the plotted numbers so a reader can check them against the CSV.

use std::fmt::Write as _;

use crlnet_core::eval::mean_ci95;

/// Pixel height of accuracy 1.0.
pub const PLOT_HEIGHT: f64 = 260.0;
const TOP: f64 = 40.0;
const LEFT: f64 = 60.0;
const BAR_SLOT: f64 = 90.0;
const BAR_WIDTH: f64 = 50.0;
const CURVE_WIDTH: f64 = 480.0;

fn escape(s: &str) -> String {
    s.chars()
        .map(|c| match c {
            '&' => "&amp;".to_string(),
            '<' => "&lt;".to_string(),
            '>' => "&gt;".to_string(),
            '"' => "&quot;".to_string(),
            '\'' => "&apos;".to_string(),
            c => c.to_string(),
        })
        .collect()
}

fn open(s: &mut String, width: f64, height: f64, title: &str) {
    writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">
<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    )
    .unwrap();
}

fn y_axis(s: &mut String, right: f64, ticks: &[(f64, String)]) {
    let bottom = TOP + PLOT_HEIGHT;
    writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{bottom}" stroke="black"/>"#).unwrap();
    writeln!(s, r#"<line x1="{LEFT}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/>"#).unwrap();
    for (y, label) in ticks {
        writeln!(
            s,
            r#"<line x1="{}" y1="{y}" x2="{LEFT}" y2="{y}" stroke="black"/><text x="{}" y="{}" text-anchor="end">{label}</text>"#,
            LEFT - 4.0,
            LEFT - 6.0,
            y + 4.0
        )
        .unwrap();
    }
}

/// Bar per strategy at its mean accuracy with a 95% CI whisker.
pub fn accuracy_bars(columns: &[(String, Vec<f64>)]) -> String {
    let width = LEFT + BAR_SLOT * columns.len() as f64 + 20.0;
    let height = TOP + PLOT_HEIGHT + 50.0;
    let bottom = TOP + PLOT_HEIGHT;
    let mut s = String::new();
    open(&mut s, width, height, "Per-episode accuracy (mean, 95% CI)");
    let ticks: Vec<_> = (0..=4).map(|i| (bottom - PLOT_HEIGHT * i as f64 / 4.0, format!("{:.2}", i as f64 / 4.0))).collect();
    y_axis(&mut s, width - 10.0, &ticks);
    for (i, (name, values)) in columns.iter().enumerate() {
        let (mean, ci) = mean_ci95(values);
        let h = mean * PLOT_HEIGHT;
        let x = LEFT + BAR_SLOT * i as f64 + (BAR_SLOT - BAR_WIDTH) / 2.0;
        let cx = x + BAR_WIDTH / 2.0;
        let name = escape(name);
        writeln!(
            s,
            r##"<rect class="bar" data-strategy="{name}" data-value="{mean}" data-ci95="{ci}" x="{x}" y="{}" width="{BAR_WIDTH}" height="{h}" fill="#4878a8"/>"##,
            bottom - h
        )
        .unwrap();
        let (lo, hi) = (bottom - (mean - ci) * PLOT_HEIGHT, bottom - (mean + ci) * PLOT_HEIGHT);
        writeln!(
            s,
            r#"<g class="whisker" stroke="black"><line x1="{cx}" y1="{lo}" x2="{cx}" y2="{hi}"/><line x1="{}" y1="{lo}" x2="{}" y2="{lo}"/><line x1="{}" y1="{hi}" x2="{}" y2="{hi}"/></g>"#,
            cx - 8.0,
            cx + 8.0,
            cx - 8.0,
            cx + 8.0
        )
        .unwrap();
        writeln!(s, r#"<text x="{cx}" y="{}" text-anchor="middle" font-size="10">{name}</text>"#, bottom + 16.0).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Mean loss against epoch.
pub fn loss_curve(points: &[(usize, f64)]) -> String {
    let width = LEFT + CURVE_WIDTH + 30.0;
    let height = TOP + PLOT_HEIGHT + 50.0;
    let bottom = TOP + PLOT_HEIGHT;
    let (mut lo, mut hi) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &(_, v)| (a.min(v), b.max(v)));
    if !(hi > lo) {
        lo -= 0.5;
        hi += 0.5;
    }
    let first = points.first().map_or(0, |p| p.0) as f64;
    let span = (points.last().map_or(1, |p| p.0) as f64 - first).max(1.0);
    let px = |e: usize| LEFT + (e as f64 - first) / span * CURVE_WIDTH;
    let py = |v: f64| bottom - (v - lo) / (hi - lo) * PLOT_HEIGHT;

    let mut s = String::new();
    open(&mut s, width, height, "Mean training loss per epoch");
    let ticks: Vec<_> = (0..=4)
        .map(|i| {
            let v = lo + (hi - lo) * i as f64 / 4.0;
            (py(v), format!("{v:.3}"))
        })
        .collect();
    y_axis(&mut s, width - 10.0, &ticks);
    let path: Vec<String> = points.iter().map(|&(e, v)| format!("{},{}", px(e), py(v))).collect();
    writeln!(s, r##"<polyline fill="none" stroke="#c04040" stroke-width="2" points="{}"/>"##, path.join(" ")).unwrap();
    for &(e, v) in points {
        writeln!(s, r##"<circle class="point" data-epoch="{e}" data-value="{v}" cx="{}" cy="{}" r="2.5" fill="#c04040"/>"##, px(e), py(v))
            .unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#, LEFT + CURVE_WIDTH / 2.0, bottom + 32.0).unwrap();
    s.push_str("</svg>\n");
    s
}
