use std::fmt::Write as _;

use crate::results::ResultRow;

const BAR: f64 = 14.0;
const GAP: f64 = 18.0;
const PANEL_H: f64 = 220.0;
const TOP: f64 = 40.0;
const LEFT: f64 = 50.0;
const COLORS: [&str; 3] = ["#4e79a7", "#f28e2b", "#59a14f"];

/// Grouped bar chart of median P/R/F1 per label, one panel per protocol.
pub fn bar_chart_svg(title: &str, medians: &[ResultRow]) -> String {
    let group_w = 3.0 * BAR + GAP;
    let panel_w = medians.len().max(1) as f64 * group_w + GAP;
    let width = LEFT + 2.0 * panel_w + 60.0;
    let height = TOP + PANEL_H + 90.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{LEFT}" y="20" font-size="14">{}</text>"#, escape(title));
    for (panel, name) in ["Point localization", "Multilabel"].iter().enumerate() {
        let x0 = LEFT + panel as f64 * (panel_w + 30.0);
        let base = TOP + PANEL_H;
        let _ = writeln!(s, r#"<text x="{x0:.1}" y="{:.1}">{name}</text>"#, TOP - 6.0);
        for tick in 0..=4 {
            let y = base - PANEL_H * tick as f64 / 4.0;
            let _ = writeln!(
                s,
                r##"<line x1="{x0:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##,
                x0 + panel_w
            );
            if panel == 0 {
                let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, x0 - 4.0, y + 4.0, tick * 25);
            }
        }
        for (g, row) in medians.iter().enumerate() {
            let gx = x0 + GAP + g as f64 * group_w;
            let values = &row.metrics()[panel * 3..panel * 3 + 3];
            for (i, v) in values.iter().enumerate() {
                let v = v.unwrap_or(0.0).clamp(0.0, 1.0);
                let h = PANEL_H * v;
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="{BAR}" height="{h:.1}" fill="{}"/>"#,
                    gx + i as f64 * BAR,
                    base - h,
                    COLORS[i]
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" transform="rotate(40 {0:.1} {1:.1})">{}</text>"#,
                gx + 4.0,
                base + 14.0,
                escape(&row.loss)
            );
        }
        let _ = writeln!(s, r#"<line x1="{x0:.1}" y1="{base:.1}" x2="{:.1}" y2="{base:.1}" stroke="black"/>"#, x0 + panel_w);
    }
    for (i, label) in ["precision", "recall", "F1"].iter().enumerate() {
        let x = LEFT + i as f64 * 90.0;
        let y = height - 14.0;
        let _ = writeln!(s, r#"<rect x="{x:.1}" y="{:.1}" width="10" height="10" fill="{}"/>"#, y - 9.0, COLORS[i]);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{y:.1}">{label}</text>"#, x + 14.0);
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_bar_per_metric() {
        let row = ResultRow {
            loss: "A<B".into(),
            seed: "median".into(),
            loc_p: Some(0.5),
            loc_r: Some(1.0),
            loc_f1: None,
            ml_p: Some(0.1),
            ml_r: Some(0.2),
            ml_f1: Some(0.3),
        };
        let svg = bar_chart_svg("t", &[row.clone(), row]);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<rect").count(), 1 + 12 + 3);
        assert!(svg.contains("A&lt;B"));
        assert!(svg.contains(r#"height="220.0""#));
    }
}
