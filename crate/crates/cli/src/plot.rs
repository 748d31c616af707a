//! Minimal deterministic SVG emitters for the report command. Every plot is
//! a pure function of parsed CSV rows, so regenerating from the CSV produces
//! byte-identical output.

use std::fmt::Write;

const W: f64 = 720.0;
const H: f64 = 440.0;
const MARGIN: f64 = 60.0;

pub const SERIES_COLORS: [&str; 4] = ["#3366cc", "#dc3912", "#109618", "#ff9900"];

fn header(title: &str) -> String {
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{cx}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" ",
            "font-size=\"16\">{title}</text>\n"
        ),
        w = W,
        h = H,
        cx = W / 2.0,
        title = escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt(v: f64) -> String {
    format!("{v:.3}")
}

fn axes(out: &mut String, y_min: f64, y_max: f64) {
    let x0 = MARGIN;
    let x1 = W - MARGIN / 2.0;
    let y0 = H - MARGIN;
    let y1 = MARGIN;
    let _ = write!(
        out,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n\
         <text x=\"{tx}\" y=\"{tb}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{lo}</text>\n\
         <text x=\"{tx}\" y=\"{tt}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{hi}</text>\n",
        tx = x0 - 6.0,
        tb = y0 + 4.0,
        tt = y1 + 4.0,
        lo = fmt(y_min),
        hi = fmt(y_max),
    );
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let x = MARGIN + 10.0 + 150.0 * i as f64;
        let _ = write!(
            out,
            "<rect x=\"{x}\" y=\"34\" width=\"12\" height=\"12\" fill=\"{c}\"/>\n\
             <text x=\"{tx}\" y=\"44\" font-family=\"sans-serif\" font-size=\"12\">{n}</text>\n",
            c = SERIES_COLORS[i % SERIES_COLORS.len()],
            tx = x + 16.0,
            n = escape(name),
        );
    }
}

/// Grouped bar chart: one group per category, one bar per series.
pub fn bar_chart(title: &str, categories: &[String], series: &[(&str, Vec<f64>)]) -> String {
    let mut out = header(title);
    let y_max = series
        .iter()
        .flat_map(|(_, v)| v.iter())
        .cloned()
        .fold(0.0f64, f64::max)
        .max(1e-9);
    axes(&mut out, 0.0, y_max);
    legend(&mut out, &series.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    let plot_w = W - 1.5 * MARGIN;
    let plot_h = H - 2.0 * MARGIN;
    let group_w = plot_w / categories.len().max(1) as f64;
    let bar_w = (group_w * 0.8) / series.len().max(1) as f64;
    for (ci, cat) in categories.iter().enumerate() {
        let gx = MARGIN + group_w * ci as f64 + group_w * 0.1;
        for (si, (_, values)) in series.iter().enumerate() {
            let v = values.get(ci).cloned().unwrap_or(0.0);
            let bh = plot_h * (v / y_max);
            let x = gx + bar_w * si as f64;
            let y = H - MARGIN - bh;
            let _ = write!(
                out,
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" fill=\"{c}\"/>\n",
                w = bar_w * 0.9,
                h = bh,
                c = SERIES_COLORS[si % SERIES_COLORS.len()],
            );
        }
        let _ = write!(
            out,
            "<text x=\"{x:.2}\" y=\"{y}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"11\">{t}</text>\n",
            x = gx + group_w * 0.4,
            y = H - MARGIN + 16.0,
            t = escape(cat),
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Overlaid histograms with shared bins.
pub fn histogram(title: &str, series: &[(&str, Vec<f64>)], bins: usize) -> String {
    let mut out = header(title);
    let all: Vec<f64> = series.iter().flat_map(|(_, v)| v.iter().cloned()).collect();
    let lo = all.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi > lo {
        (lo, hi)
    } else {
        (0.0, 1.0)
    };
    let counts: Vec<Vec<f64>> = series
        .iter()
        .map(|(_, v)| {
            let mut c = vec![0.0; bins];
            for &x in v {
                let b = (((x - lo) / (hi - lo)) * bins as f64).floor() as usize;
                c[b.min(bins - 1)] += 1.0;
            }
            c
        })
        .collect();
    let y_max = counts
        .iter()
        .flat_map(|c| c.iter())
        .cloned()
        .fold(0.0f64, f64::max)
        .max(1.0);
    axes(&mut out, 0.0, y_max);
    legend(&mut out, &series.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    let plot_w = W - 1.5 * MARGIN;
    let plot_h = H - 2.0 * MARGIN;
    let bw = plot_w / bins as f64;
    for (si, c) in counts.iter().enumerate() {
        for (bi, &count) in c.iter().enumerate() {
            if count == 0.0 {
                continue;
            }
            let bh = plot_h * (count / y_max);
            let _ = write!(
                out,
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" \
                 fill=\"{col}\" fill-opacity=\"0.55\"/>\n",
                x = MARGIN + bw * bi as f64,
                y = H - MARGIN - bh,
                w = bw * 0.95,
                h = bh,
                col = SERIES_COLORS[si % SERIES_COLORS.len()],
            );
        }
    }
    let _ = write!(
        out,
        "<text x=\"{x}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"11\">range [{lo}, {hi}]</text>\n",
        x = MARGIN,
        y = H - MARGIN + 32.0,
        lo = fmt(lo),
        hi = fmt(hi),
    );
    out.push_str("</svg>\n");
    out
}

/// 2-D scatter with per-point class color and size.
pub fn scatter(title: &str, points: &[(f64, f64, usize, f64)], class_names: &[&str]) -> String {
    let mut out = header(title);
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let pad = |lo: f64, hi: f64| {
        let span = (hi - lo).max(1e-9);
        (lo - 0.05 * span, hi + 0.05 * span)
    };
    let (x_lo, x_hi) = pad(
        xs.iter().cloned().fold(f64::INFINITY, f64::min),
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let (y_lo, y_hi) = pad(
        ys.iter().cloned().fold(f64::INFINITY, f64::min),
        ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    axes(&mut out, y_lo, y_hi);
    legend(&mut out, class_names);
    let plot_w = W - 1.5 * MARGIN;
    let plot_h = H - 2.0 * MARGIN;
    for &(x, y, class, size) in points {
        let px = MARGIN + plot_w * (x - x_lo) / (x_hi - x_lo);
        let py = H - MARGIN - plot_h * (y - y_lo) / (y_hi - y_lo);
        let r = 2.0 + 6.0 * size.clamp(0.0, 1.0);
        let _ = write!(
            out,
            "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"{r:.2}\" fill=\"{c}\" fill-opacity=\"0.6\"/>\n",
            c = SERIES_COLORS[class % SERIES_COLORS.len()],
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Heatmap of a rows x cols grid with a blue-to-red ramp.
pub fn heatmap(title: &str, grid: &[Vec<f64>], row_label: &str, col_label: &str) -> String {
    let mut out = header(title);
    let rows = grid.len().max(1);
    let cols = grid.first().map(|r| r.len()).unwrap_or(0).max(1);
    let lo = grid
        .iter()
        .flat_map(|r| r.iter())
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = grid
        .iter()
        .flat_map(|r| r.iter())
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi > lo {
        (lo, hi)
    } else {
        (0.0, 1.0)
    };
    let plot_w = W - 1.5 * MARGIN;
    let plot_h = H - 2.0 * MARGIN;
    let cw = plot_w / cols as f64;
    let ch = plot_h / rows as f64;
    for (ri, row) in grid.iter().enumerate() {
        for (ci, &v) in row.iter().enumerate() {
            let t = (v - lo) / (hi - lo);
            let r = (255.0 * t) as u8;
            let b = (255.0 * (1.0 - t)) as u8;
            let g = 64u8;
            let _ = write!(
                out,
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" \
                 fill=\"rgb({r},{g},{b})\"/>\n",
                x = MARGIN + cw * ci as f64,
                y = MARGIN + ch * ri as f64,
                w = cw,
                h = ch,
            );
        }
    }
    let _ = write!(
        out,
        "<text x=\"{cx}\" y=\"{by}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"12\">{cl}</text>\n\
         <text x=\"16\" y=\"{my}\" font-family=\"sans-serif\" font-size=\"12\" \
         transform=\"rotate(-90 16 {my})\">{rl}</text>\n\
         <text x=\"{cx}\" y=\"{ry}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"11\">range [{lo}, {hi}]</text>\n",
        cx = W / 2.0,
        by = H - MARGIN + 20.0,
        my = H / 2.0,
        cl = escape(col_label),
        rl = escape(row_label),
        ry = H - MARGIN + 36.0,
        lo = fmt(lo),
        hi = fmt(hi),
    );
    out.push_str("</svg>\n");
    out
}
