//! Minimal SVG charts for reports: grouped bars, lines and a scatter matrix.

use std::fmt::Write;

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Canvas {
    body: String,
    width: f64,
    height: f64,
}

impl Canvas {
    fn new(width: f64, height: f64) -> Self {
        Self { body: String::new(), width, height }
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(self.body, r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"/>"#);
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) {
        let _ = writeln!(self.body, r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}"/>"#);
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str) {
        let _ = writeln!(self.body, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r}" fill="{fill}" fill-opacity="0.5"/>"#);
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-size="11" font-family="sans-serif" text-anchor="{anchor}">{}</text>"#,
            escape(s)
        );
    }

    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str) {
        let p: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(self.body, r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="2"/>"#, p.join(" "));
    }

    fn legend(&mut self, x: f64, y: f64, names: &[String]) {
        for (i, n) in names.iter().enumerate() {
            let yy = y + 16.0 * i as f64;
            self.rect(x, yy - 9.0, 10.0, 10.0, color(i));
            self.text(x + 14.0, yy, "start", n);
        }
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Bars grouped by category, one bar per series, drawn from a zero baseline.
/// `values[s][c]` is series `s` at category `c`.
pub fn grouped_bars(title: &str, categories: &[String], series: &[String], values: &[Vec<f64>]) -> String {
    let (w, h, left, top, bottom) = (120.0 + 90.0 * categories.len() as f64, 320.0, 50.0, 30.0, 50.0);
    let mut c = Canvas::new(w + 120.0, h);
    c.text(w / 2.0, 18.0, "middle", title);
    let (lo, hi) = extent(values.iter().flatten().copied().chain([0.0]));
    let plot_h = h - top - bottom;
    let y = |v: f64| top + plot_h * (hi - v) / (hi - lo);
    c.line(left, y(0.0), w - 10.0, y(0.0), "#444");
    c.text(left - 4.0, y(hi) + 4.0, "end", &format!("{hi:.1}"));
    c.text(left - 4.0, y(lo) + 4.0, "end", &format!("{lo:.1}"));
    let group_w = (w - left - 10.0) / categories.len().max(1) as f64;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (ci, cat) in categories.iter().enumerate() {
        let gx = left + group_w * ci as f64 + group_w * 0.1;
        for (si, row) in values.iter().enumerate() {
            let v = row.get(ci).copied().unwrap_or(0.0);
            if !v.is_finite() {
                continue;
            }
            let (y0, y1) = (y(0.0), y(v));
            c.rect(gx + bar_w * si as f64, y0.min(y1), bar_w, (y1 - y0).abs(), color(si));
        }
        c.text(gx + group_w * 0.4, h - bottom + 16.0, "middle", cat);
    }
    c.legend(w, top + 10.0, series);
    c.finish()
}

/// Line chart; `x` is shared by all series.
pub fn lines(title: &str, x_label: &str, x: &[f64], series: &[(String, Vec<f64>)]) -> String {
    let (w, h, left, top, bottom) = (480.0, 320.0, 50.0, 30.0, 50.0);
    let mut c = Canvas::new(w + 140.0, h);
    c.text(w / 2.0, 18.0, "middle", title);
    let (x0, x1) = extent(x.iter().copied());
    let (y0, y1) = extent(series.iter().flat_map(|(_, v)| v.iter().copied()));
    let px = |v: f64| left + (w - left - 10.0) * (v - x0) / (x1 - x0);
    let py = |v: f64| top + (h - top - bottom) * (y1 - v) / (y1 - y0);
    c.line(left, h - bottom, w - 10.0, h - bottom, "#444");
    c.line(left, top, left, h - bottom, "#444");
    c.text((left + w) / 2.0, h - 12.0, "middle", x_label);
    c.text(left - 4.0, py(y1) + 4.0, "end", &format!("{y1:.1}"));
    c.text(left - 4.0, py(y0) + 4.0, "end", &format!("{y0:.1}"));
    for &xv in x {
        c.text(px(xv), h - bottom + 14.0, "middle", &format!("{xv}"));
    }
    for (i, (_, v)) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = x.iter().zip(v).filter(|(_, y)| y.is_finite()).map(|(&a, &b)| (px(a), py(b))).collect();
        c.polyline(&pts, color(i));
        for &(a, b) in &pts {
            c.circle(a, b, 3.0, color(i));
        }
    }
    let names: Vec<String> = series.iter().map(|(n, _)| n.clone()).collect();
    c.legend(w + 10.0, top + 10.0, &names);
    c.finish()
}

/// One point cloud per source for the scatter matrix.
pub struct Series {
    pub name: String,
    /// `columns[a][i]`: attribute `a` of record `i`.
    pub columns: Vec<Vec<f64>>,
}

/// Pairwise scatter plots with per-attribute histograms on the diagonal.
pub fn scatter_matrix(names: &[String], series: &[Series]) -> String {
    let k = names.len();
    let (cell, pad) = (110.0, 30.0);
    let size = pad + cell * k as f64;
    let mut c = Canvas::new(size + 120.0, size + pad);
    let ranges: Vec<(f64, f64)> =
        (0..k).map(|a| extent(series.iter().flat_map(|s| s.columns[a].iter().copied()))).collect();
    for a in 0..k {
        c.text(pad + cell * (a as f64 + 0.5), size + 18.0, "middle", &names[a]);
        for b in 0..k {
            let (ox, oy) = (pad + cell * b as f64, cell * a as f64);
            c.line(ox + 4.0, oy + cell - 4.0, ox + cell - 4.0, oy + cell - 4.0, "#bbb");
            let sx = |v: f64| ox + 6.0 + (cell - 12.0) * (v - ranges[b].0) / (ranges[b].1 - ranges[b].0);
            if a == b {
                const BINS: usize = 10;
                for (si, s) in series.iter().enumerate() {
                    let vals: Vec<f64> = s.columns[a].iter().copied().filter(|v| v.is_finite()).collect();
                    let mut counts = [0usize; BINS];
                    for v in &vals {
                        let t = (v - ranges[a].0) / (ranges[a].1 - ranges[a].0);
                        counts[((t * BINS as f64) as usize).min(BINS - 1)] += 1;
                    }
                    let total = vals.len().max(1) as f64;
                    let pts: Vec<(f64, f64)> = counts
                        .iter()
                        .enumerate()
                        .map(|(bi, &n)| (ox + 6.0 + (cell - 12.0) * (bi as f64 + 0.5) / BINS as f64, oy + cell - 6.0 - (cell - 14.0) * n as f64 / total))
                        .collect();
                    c.polyline(&pts, color(si));
                }
            } else {
                let sy = |v: f64| oy + cell - 6.0 - (cell - 12.0) * (v - ranges[a].0) / (ranges[a].1 - ranges[a].0);
                for (si, s) in series.iter().enumerate() {
                    for (&vx, &vy) in s.columns[b].iter().zip(&s.columns[a]) {
                        if vx.is_finite() && vy.is_finite() {
                            c.circle(sx(vx), sy(vy), 1.5, color(si));
                        }
                    }
                }
            }
        }
    }
    let labels: Vec<String> = series.iter().map(|s| s.name.clone()).collect();
    c.legend(size + 10.0, 20.0, &labels);
    c.finish()
}
