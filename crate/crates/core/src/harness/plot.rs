//! Deterministic SVG figures. All coordinates are printed with fixed
//! precision so identical inputs give byte-identical files.

use std::fmt::Write as _;

use crate::diffusion::SampleBatch;
use crate::oracle::GaussianMixture;
use crate::Point;

const SIZE: f64 = 480.0;
const MARGIN: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

#[derive(Debug, Clone, Copy, PartialEq)]
struct Bounds {
    x: (f64, f64),
    y: (f64, f64),
}

impl Bounds {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone, fallback: Bounds) -> Self {
        let span = |v: &mut dyn Iterator<Item = f64>, fb: (f64, f64)| {
            let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
            if !lo.is_finite() || !hi.is_finite() {
                return fb;
            }
            let pad = ((hi - lo) * 0.05).max(1e-3);
            (lo - pad, hi + pad)
        };
        Self {
            x: span(&mut xs.clone(), fallback.x),
            y: span(&mut ys.clone(), fallback.y),
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (SIZE - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        SIZE - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (SIZE - 2.0 * MARGIN)
    }
}

fn open(title: &str, xlabel: &str, ylabel: &str, b: &Bounds) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="20" text-anchor="middle" font-size="13">{}</text>"#, SIZE / 2.0, escape(title));
    let (x0, x1, y0, y1) = (MARGIN, SIZE - MARGIN, SIZE - MARGIN, MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{x0:.2},{y1:.2} L{x0:.2},{y0:.2} L{x1:.2},{y0:.2}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = b.x.0 + f * (b.x.1 - b.x.0);
        let yv = b.y.0 + f * (b.y.1 - b.y.0);
        let (px, py) = (b.px(xv), b.py(yv));
        let _ = writeln!(s, r#"<line x1="{px:.2}" y1="{y0:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/>"#, y0 + 4.0);
        let _ = writeln!(s, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{xv:.2}</text>"#, y0 + 16.0);
        let _ = writeln!(s, r#"<line x1="{:.2}" y1="{py:.2}" x2="{x0:.2}" y2="{py:.2}" stroke="black"/>"#, x0 - 4.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{yv:.2}</text>"#, x0 - 6.0, py + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, SIZE / 2.0, SIZE - 12.0, escape(xlabel));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{}</text>"#,
        SIZE / 2.0,
        SIZE / 2.0,
        escape(ylabel)
    );
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN + 4.0 + 14.0 * i as f64;
        let x = SIZE - MARGIN - 110.0;
        let _ = writeln!(s, r#"<rect x="{x:.2}" y="{:.2}" width="10" height="10" fill="{}"/>"#, y - 8.0, PALETTE[i % PALETTE.len()]);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, x + 14.0, y + 1.0, escape(name));
    }
}

/// Marching-squares segments of `{f = level}` over a regular grid.
fn contour_segments(grid: &[Vec<f64>], xs: &[f64], ys: &[f64], level: f64) -> Vec<(Point, Point)> {
    let mut out = Vec::new();
    let lerp = |a: f64, b: f64, fa: f64, fb: f64| a + (level - fa) / (fb - fa) * (b - a);
    for i in 0..xs.len() - 1 {
        for j in 0..ys.len() - 1 {
            // corners counterclockwise from bottom-left
            let v = [grid[i][j], grid[i + 1][j], grid[i + 1][j + 1], grid[i][j + 1]];
            let c = [
                Point::new(xs[i], ys[j]),
                Point::new(xs[i + 1], ys[j]),
                Point::new(xs[i + 1], ys[j + 1]),
                Point::new(xs[i], ys[j + 1]),
            ];
            let mut crossings = Vec::with_capacity(4);
            for e in 0..4 {
                let (a, b) = (e, (e + 1) % 4);
                if (v[a] >= level) != (v[b] >= level) {
                    crossings.push(Point::new(
                        lerp(c[a].x, c[b].x, v[a], v[b]),
                        lerp(c[a].y, c[b].y, v[a], v[b]),
                    ));
                }
            }
            if crossings.len() == 2 {
                out.push((crossings[0], crossings[1]));
            } else if crossings.len() == 4 {
                out.push((crossings[0], crossings[1]));
                out.push((crossings[2], crossings[3]));
            }
        }
    }
    out
}

/// Target density contours with one point layer per named batch.
pub fn scatter_overlay(title: &str, target: Option<&GaussianMixture>, layers: &[(&str, &SampleBatch)]) -> String {
    let fallback = Bounds {
        x: (-2.5, 2.5),
        y: (-2.5, 2.5),
    };
    let xs = layers
        .iter()
        .flat_map(|(_, b)| b.points.column(0).to_vec())
        .chain(target.into_iter().flat_map(|m| m.means.iter().map(|p| p.x).collect::<Vec<_>>()));
    let ys = layers
        .iter()
        .flat_map(|(_, b)| b.points.column(1).to_vec())
        .chain(target.into_iter().flat_map(|m| m.means.iter().map(|p| p.y).collect::<Vec<_>>()));
    let b = Bounds::fit(xs, ys, fallback);
    let mut s = open(title, "x", "y", &b);

    if let Some(m) = target {
        const N: usize = 100;
        let gx: Vec<f64> = (0..=N).map(|i| b.x.0 + (b.x.1 - b.x.0) * i as f64 / N as f64).collect();
        let gy: Vec<f64> = (0..=N).map(|j| b.y.0 + (b.y.1 - b.y.0) * j as f64 / N as f64).collect();
        let grid: Vec<Vec<f64>> = gx
            .iter()
            .map(|&x| gy.iter().map(|&y| m.log_density(&Point::new(x, y))).collect())
            .collect();
        let peak = grid.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
        for drop in [1.0, 3.0, 6.0] {
            let mut d = String::new();
            for (p, q) in contour_segments(&grid, &gx, &gy, peak - drop) {
                let _ = write!(d, "M{:.2},{:.2}L{:.2},{:.2}", b.px(p.x), b.py(p.y), b.px(q.x), b.py(q.y));
            }
            let _ = writeln!(s, r##"<path d="{d}" fill="none" stroke="#555555" stroke-width="1"/>"##);
        }
    }
    for (i, (_, batch)) in layers.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<g fill="{color}" fill-opacity="0.5">"#);
        for r in 0..batch.len() {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="1.5"/>"#,
                b.px(batch.points[[r, 0]]),
                b.py(batch.points[[r, 1]])
            );
        }
        s.push_str("</g>\n");
    }
    legend(&mut s, &layers.iter().map(|l| l.0).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Named polylines on shared axes.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let xs = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0).collect::<Vec<_>>());
    let ys = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1).collect::<Vec<_>>());
    let b = Bounds::fit(xs, ys, Bounds { x: (0.0, 1.0), y: (0.0, 1.0) });
    let mut s = open(title, xlabel, ylabel, &b);
    for (i, (_, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", b.px(*x), b.py(*y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            coords.join(" ")
        );
        for c in &coords {
            let (x, y) = c.split_once(',').expect("formatted pair");
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
    }
    legend(&mut s, &series.iter().map(|l| l.0).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Precision and recall against sampling-time w.
pub fn tradeoff_curve(title: &str, points: &[(f64, f64, f64)]) -> String {
    line_chart(
        title,
        "guidance strength w",
        "score",
        &[
            ("precision", points.iter().map(|p| (p.0, p.1)).collect()),
            ("recall", points.iter().map(|p| (p.0, p.2)).collect()),
        ],
    )
}

/// One metric against a schedule threshold, one line per metric name.
pub fn ablation_grid(title: &str, threshold: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    line_chart(title, threshold, "metric", series)
}
