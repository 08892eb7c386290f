//! Self-contained HTML pages with inline SVG charts.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 4] = ["#3b6ea5", "#d1495b", "#66a182", "#edae49"];

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn frame(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11"><text x="{}" y="16" text-anchor="middle" font-size="13">{}</text><line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="#333"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="#333"/>"##,
        W / 2.0,
        escape(title),
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD
    );
}

fn y_axis(out: &mut String, max: f64, min: f64) {
    for i in 0..=4 {
        let v = min + (max - min) * i as f64 / 4.0;
        let y = H - PAD - (H - 2.0 * PAD) * i as f64 / 4.0;
        let _ = write!(
            out,
            r##"<text x="{}" y="{}" text-anchor="end">{}</text><line x1="{PAD}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##,
            PAD - 4.0,
            y + 4.0,
            fmt_tick(v),
            W - PAD
        );
    }
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 10.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, n) in names.iter().enumerate() {
        let x = W - PAD - 120.0;
        let y = PAD + 14.0 * i as f64;
        let _ = write!(
            out,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            y - 9.0,
            COLORS[i % COLORS.len()],
            x + 14.0,
            y,
            escape(n)
        );
    }
}

/// Grouped bar chart, one group per category.
pub fn bar_chart(title: &str, categories: &[String], series: &[(&str, Vec<f64>)]) -> String {
    let mut out = String::new();
    frame(&mut out, title);
    let max = series
        .iter()
        .flat_map(|s| s.1.iter().copied())
        .fold(0.0_f64, f64::max)
        .max(1e-12);
    y_axis(&mut out, max, 0.0);
    let n = categories.len().max(1) as f64;
    let group_w = (W - 2.0 * PAD) / n;
    let bar_w = group_w * 0.8 / series.len().max(1) as f64;
    for (ci, cat) in categories.iter().enumerate() {
        let gx = PAD + group_w * ci as f64 + group_w * 0.1;
        for (si, (_, vals)) in series.iter().enumerate() {
            let v = vals.get(ci).copied().unwrap_or(0.0);
            let h = (H - 2.0 * PAD) * v / max;
            let _ = write!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>{}: {}</title></rect>"#,
                gx + bar_w * si as f64,
                H - PAD - h,
                bar_w,
                h,
                COLORS[si % COLORS.len()],
                escape(cat),
                v
            );
        }
        if categories.len() <= 24 || ci % (categories.len() / 12).max(1) == 0 {
            let _ = write!(
                out,
                r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
                gx + group_w * 0.4,
                H - PAD + 14.0,
                escape(cat)
            );
        }
    }
    let names: Vec<&str> = series.iter().map(|s| s.0).collect();
    legend(&mut out, &names);
    out.push_str("</svg>");
    out
}

/// Points with vertical interval whiskers, joined by a line.
pub fn line_with_intervals(
    title: &str,
    labels: &[String],
    points: &[Option<(f64, f64, f64)>],
) -> String {
    let mut out = String::new();
    frame(&mut out, title);
    y_axis(&mut out, 1.0, 0.0);
    let n = labels.len().max(1) as f64;
    let step = (W - 2.0 * PAD) / n;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * v.clamp(0.0, 1.0);
    let mut path = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        let x = PAD + step * (i as f64 + 0.5);
        let _ = write!(
            out,
            r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#,
            H - PAD + 14.0,
            escape(label)
        );
        if let Some(Some((v, lo, hi))) = points.get(i) {
            let _ = write!(
                out,
                r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#888"/><circle cx="{x:.2}" cy="{:.2}" r="4" fill="{}"><title>{:.4} [{:.4}, {:.4}]</title></circle>"##,
                y(*lo),
                y(*hi),
                y(*v),
                COLORS[0],
                v,
                lo,
                hi
            );
            path.push(format!("{x:.2},{:.2}", y(*v)));
        }
    }
    if path.len() > 1 {
        let _ = write!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}"/>"#,
            path.join(" "),
            COLORS[0]
        );
    }
    out.push_str("</svg>");
    out
}

pub fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::from("<table><tr>");
    for h in headers {
        let _ = write!(out, "<th>{}</th>", escape(h));
    }
    out.push_str("</tr>");
    for r in rows {
        out.push_str("<tr>");
        for c in r {
            let _ = write!(out, "<td>{}</td>", escape(c));
        }
        out.push_str("</tr>");
    }
    out.push_str("</table>");
    out
}

/// A page of `(heading, html)` sections.
pub fn page(title: &str, sections: &[(String, String)]) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{0}</title><style>body{{font-family:sans-serif;margin:2em;max-width:60em}}table{{border-collapse:collapse}}td,th{{border:1px solid #ccc;padding:2px 8px;text-align:right}}</style></head><body><h1>{0}</h1>\n",
        escape(title)
    );
    for (h, body) in sections {
        let _ = write!(out, "<h2>{}</h2>\n{}\n", escape(h), body);
    }
    out.push_str("</body></html>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escapes_markup() {
        assert_eq!(escape("<a & \"b\">"), "&lt;a &amp; &quot;b&quot;&gt;");
    }

    #[test]
    fn charts_are_closed_svg() {
        let b = bar_chart(
            "t",
            &["a".into(), "b".into()],
            &[("x", vec![1.0, 2.0]), ("y", vec![0.0, 3.0])],
        );
        assert!(b.starts_with("<svg") && b.ends_with("</svg>"));
        assert_eq!(b.matches("<rect").count(), 4 + 2);
        let l = line_with_intervals(
            "t",
            &["p".into(), "q".into()],
            &[Some((0.5, 0.4, 0.6)), None],
        );
        assert_eq!(l.matches("<circle").count(), 1);
        let p = page(
            "Report",
            &[("S".into(), table(&["h"], &[vec!["1".into()]]))],
        );
        assert!(p.contains("<td>1</td>") && p.ends_with("</html>\n"));
    }
}
