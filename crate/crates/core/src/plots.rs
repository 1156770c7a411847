//! Minimal SVG output for reports: per-machine bars and ROC curves.

use std::fmt::Write;

use crate::metrics::MetricReport;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

fn header(s: &mut String, title: &str) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(s: &mut String) {
    let (x0, y0, x1, y1) = (PAD, H - PAD, W - PAD, PAD);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let y = y0 - v * (y0 - y1);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, x0 - 4.0, y + 4.0);
    }
}

/// Grouped AUC/pAUC bars, one group per machine.
pub fn bar_chart(report: &MetricReport) -> String {
    let mut s = String::new();
    header(&mut s, "AUC and pAUC per machine");
    axes(&mut s);
    let n = report.machines.len().max(1) as f64;
    let slot = (W - 2.0 * PAD) / n;
    let bar = slot * 0.35;
    let plot_h = H - 2.0 * PAD;
    for (i, m) in report.machines.iter().enumerate() {
        let x = PAD + i as f64 * slot + slot * 0.15;
        for (j, (v, color)) in [(m.auc, "#4477aa"), (m.pauc, "#ee6677")].into_iter().enumerate() {
            let h = v.clamp(0.0, 1.0) * plot_h;
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{bar:.1}" height="{h:.1}" fill="{color}"/>"#,
                x + j as f64 * bar,
                H - PAD - h
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            x + bar,
            H - PAD + 16.0,
            escape(&m.machine_type)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// ROC polyline from `(fpr, tpr)` points.
pub fn roc_chart(title: &str, points: &[(f64, f64)]) -> String {
    let mut s = String::new();
    header(&mut s, title);
    axes(&mut s);
    let (pw, ph) = (W - 2.0 * PAD, H - 2.0 * PAD);
    let _ = writeln!(
        s,
        r##"<line x1="{PAD}" y1="{}" x2="{}" y2="{PAD}" stroke="#bbbbbb" stroke-dasharray="4"/>"##,
        H - PAD,
        W - PAD
    );
    let pts: Vec<String> = points
        .iter()
        .map(|(x, y)| format!("{:.1},{:.1}", PAD + x * pw, H - PAD - y * ph))
        .collect();
    let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#228833" stroke-width="2"/>"##, pts.join(" "));
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roc_svg_is_well_formed() {
        let svg = roc_chart("fan <id00>", &[(0.0, 0.0), (0.5, 1.0), (1.0, 1.0)]);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("fan &lt;id00&gt;"));
        assert_eq!(svg.matches("<polyline").count(), 1);
    }
}
