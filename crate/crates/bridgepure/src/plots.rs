//! Minimal SVG bar charts for run reports.

use std::fmt::Write as _;

/// One labeled group of bars; each bar is `(series, value)` with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub label: String,
    pub bars: Vec<(String, f64)>,
}

const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bar chart with a fixed [0, 1] value axis.
pub fn bar_chart(title: &str, y_label: &str, groups: &[Group]) -> String {
    let mut series: Vec<&str> = Vec::new();
    for g in groups {
        for (s, _) in &g.bars {
            if !series.contains(&s.as_str()) {
                series.push(s);
            }
        }
    }
    let bar_w = 18.0;
    let group_w = bar_w * series.len().max(1) as f64 + 24.0;
    let (left, top, plot_h) = (60.0, 40.0, 240.0);
    let width = left + group_w * groups.len().max(1) as f64 + 20.0 + 140.0;
    let height = top + plot_h + 90.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{left}" y="20" font-size="14">{}</text>"#, escape(title));
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let y = top + plot_h * (1.0 - v);
        let _ = writeln!(
            out,
            r##"<line x1="{left}" x2="{:.1}" y1="{y:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            width - 150.0,
            left - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        top + plot_h / 2.0,
        escape(y_label)
    );
    for (gi, g) in groups.iter().enumerate() {
        let x0 = left + 12.0 + gi as f64 * group_w;
        for (s, v) in &g.bars {
            let si = series.iter().position(|x| x == s).unwrap_or(0);
            let h = plot_h * v.clamp(0.0, 1.0);
            let _ = writeln!(
                out,
                r#"<rect x="{:.1}" y="{:.1}" width="{bar_w}" height="{h:.1}" fill="{}"><title>{}: {v:.4}</title></rect>"#,
                x0 + si as f64 * bar_w,
                top + plot_h - h,
                PALETTE[si % PALETTE.len()],
                escape(s)
            );
        }
        let cx = x0 + bar_w * series.len() as f64 / 2.0;
        let _ = writeln!(
            out,
            r#"<text transform="translate({cx:.1} {:.1}) rotate(35)">{}</text>"#,
            top + plot_h + 14.0,
            escape(&g.label)
        );
    }
    let lx = width - 140.0;
    for (si, s) in series.iter().enumerate() {
        let y = top + 14.0 * si as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{lx:.1}" y="{y:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            PALETTE[si % PALETTE.len()],
            lx + 14.0,
            y + 9.0,
            escape(s)
        );
    }
    out.push_str("</svg>\n");
    out
}
