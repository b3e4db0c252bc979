//! Minimal SVG charts.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 300.0;
const PAD: f64 = 40.0;
const BEFORE: &str = "#d62728";
const AFTER: &str = "#1f77b4";

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn open(out: &mut String, w: f64, h: f64, title: &str) {
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"11\">"
    );
    let _ = writeln!(out, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(out, "<text x=\"{}\" y=\"16\" text-anchor=\"middle\">{}</text>", w / 2.0, escape(title));
}

fn axes(out: &mut String, x_label: &str, y_label: &str) {
    let (x0, y0, x1, y1) = (PAD, H - PAD, W - PAD, PAD);
    let _ = writeln!(out, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>");
    let _ = writeln!(out, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>");
    let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 8.0, escape(x_label));
    let _ = writeln!(
        out,
        "<text x=\"12\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 12 {})\">{}</text>",
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
}

fn legend(out: &mut String, items: &[(&str, &str)]) {
    for (i, (label, color)) in items.iter().enumerate() {
        let y = PAD + 4.0 + 14.0 * i as f64;
        let _ = writeln!(out, "<rect x=\"{}\" y=\"{y}\" width=\"10\" height=\"10\" fill=\"{color}\"/>", W - PAD - 90.0);
        let _ = writeln!(out, "<text x=\"{}\" y=\"{}\">{}</text>", W - PAD - 75.0, y + 9.0, escape(label));
    }
}

/// Side-by-side bars of two histograms over the same bins; `top` is the
/// upper edge of the last bin.
pub fn histogram(title: &str, before: &[usize], after: &[usize], top: f64) -> String {
    let mut out = String::new();
    open(&mut out, W, H, title);
    axes(&mut out, &format!("entropy (0 to {top:.3} nats)"), "count");
    let n = before.len().max(1);
    let peak = before.iter().chain(after).copied().max().unwrap_or(0).max(1) as f64;
    let slot = (W - 2.0 * PAD) / n as f64;
    for (i, (b, a)) in before.iter().zip(after).enumerate() {
        for (k, (v, color)) in [(*b, BEFORE), (*a, AFTER)].into_iter().enumerate() {
            let h = (H - 2.0 * PAD) * v as f64 / peak;
            let x = PAD + slot * i as f64 + slot * 0.5 * k as f64;
            let _ = writeln!(
                out,
                "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"{color}\"/>",
                H - PAD - h,
                slot * 0.5
            );
        }
    }
    legend(&mut out, &[("before", BEFORE), ("after", AFTER)]);
    out.push_str("</svg>\n");
    out
}

fn polyline(out: &mut String, xs: &[f64], ys: &[f64], color: &str) {
    let (xmax, ymax) = (
        xs.iter().copied().fold(1e-12, f64::max),
        ys.iter().copied().fold(1e-12, f64::max),
    );
    let pts: Vec<String> = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| format!("{:.2},{:.2}", PAD + (W - 2.0 * PAD) * x / xmax, H - PAD - (H - 2.0 * PAD) * y / ymax))
        .collect();
    let _ = writeln!(out, "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>", pts.join(" "));
}

/// Mean entropy and error against epochs, each scaled to its own maximum.
pub fn curve(title: &str, epochs: &[f64], entropy: &[f64], error: &[f64]) -> String {
    let mut out = String::new();
    open(&mut out, W, H, title);
    axes(&mut out, "epoch", "relative to maximum");
    polyline(&mut out, epochs, entropy, AFTER);
    if !error.is_empty() {
        polyline(&mut out, epochs, error, BEFORE);
    }
    legend(&mut out, &[("entropy", AFTER), ("error", BEFORE)]);
    out.push_str("</svg>\n");
    out
}

/// One panel per example: class probabilities before and after.
pub fn examples(title: &str, items: &[(usize, usize, Vec<f64>, Vec<f64>)]) -> String {
    let (pw, ph) = (220.0, 120.0);
    let cols = 4usize;
    let rows = items.len().div_ceil(cols).max(1);
    let (w, h) = (pw * cols as f64, 30.0 + ph * rows as f64);
    let mut out = String::new();
    open(&mut out, w, h, title);
    for (i, (index, label, before, after)) in items.iter().enumerate() {
        let (ox, oy) = (pw * (i % cols) as f64, 30.0 + ph * (i / cols) as f64);
        let _ = writeln!(out, "<text x=\"{:.2}\" y=\"{:.2}\">#{index} label {label}</text>", ox + 8.0, oy + 12.0);
        let c = before.len().max(1);
        let slot = (pw - 16.0) / c as f64;
        let base = oy + ph - 12.0;
        for (k, (b, a)) in before.iter().zip(after).enumerate() {
            for (j, (v, color)) in [(*b, BEFORE), (*a, AFTER)].into_iter().enumerate() {
                let bh = (ph - 32.0) * v.clamp(0.0, 1.0);
                let x = ox + 8.0 + slot * k as f64 + slot * 0.5 * j as f64;
                let _ = writeln!(
                    out,
                    "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{bh:.2}\" fill=\"{color}\"/>",
                    base - bh,
                    slot * 0.5
                );
            }
        }
    }
    out.push_str("</svg>\n");
    out
}
