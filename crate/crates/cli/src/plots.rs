//! Small deterministic SVG charts. Each chart carries its data table in a
//! leading comment and is written next to a CSV sidecar with the same values.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use vem_core::analysis::PowerLawFit;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const TICKS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Plot {
    pub svg: String,
    pub csv: String,
}

impl Plot {
    /// Writes `<name>.svg` and `<name>.csv` into `dir`.
    pub fn write(&self, dir: &Path, name: &str) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{name}.svg")), &self.svg)?;
        fs::write(dir.join(format!("{name}.csv")), &self.csv)
    }
}

fn csv_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Comment bodies may not contain `--`.
fn comment_safe(s: &str) -> String {
    s.replace("--", "- -")
}

#[derive(Clone, Copy)]
struct Scale {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl Scale {
    fn new(
        values: impl IntoIterator<Item = f64>,
        include_zero: bool,
        px_lo: f64,
        px_hi: f64,
    ) -> Scale {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.into_iter().filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if include_zero {
            lo = lo.min(0.0);
            hi = hi.max(0.0);
        }
        if hi - lo < 1e-12 {
            hi = lo + 1.0;
        }
        let pad = 0.05 * (hi - lo);
        Scale {
            lo: if include_zero && lo == 0.0 {
                0.0
            } else {
                lo - pad
            },
            hi: hi + pad,
            px_lo,
            px_hi,
        }
    }

    fn px(&self, v: f64) -> f64 {
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }
}

struct Canvas {
    body: String,
}

impl Canvas {
    fn new(title: &str, data_comment: &str) -> Canvas {
        let mut body = String::new();
        writeln!(
            body,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
        )
        .unwrap();
        writeln!(body, "<!-- data\n{}-->", comment_safe(data_comment)).unwrap();
        writeln!(body, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
        writeln!(
            body,
            r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            W / 2.0,
            escape(title)
        )
        .unwrap();
        Canvas { body }
    }

    fn y_axis(&mut self, y: &Scale, label: &str) {
        let b = &mut self.body;
        writeln!(
            b,
            r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.2}" stroke="black"/>"#,
            H - BOTTOM
        )
        .unwrap();
        for i in 0..=TICKS {
            let v = y.lo + (y.hi - y.lo) * i as f64 / TICKS as f64;
            let py = y.px(v);
            writeln!(
                b,
                r#"<line x1="{:.2}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="black"/>"#,
                LEFT - 4.0
            )
            .unwrap();
            writeln!(
                b,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"#,
                LEFT - 6.0,
                py + 4.0
            )
            .unwrap();
        }
        writeln!(
            b,
            r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
            (TOP + H - BOTTOM) / 2.0,
            (TOP + H - BOTTOM) / 2.0,
            escape(label)
        )
        .unwrap();
    }

    fn x_axis(&mut self, y_at: f64, label: &str) {
        let b = &mut self.body;
        writeln!(
            b,
            r#"<line x1="{LEFT}" y1="{y_at:.2}" x2="{:.2}" y2="{y_at:.2}" stroke="black"/>"#,
            W - RIGHT
        )
        .unwrap();
        writeln!(
            b,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            (LEFT + W - RIGHT) / 2.0,
            H - 12.0,
            escape(label)
        )
        .unwrap();
    }

    fn x_ticks(&mut self, x: &Scale) {
        for i in 0..=TICKS {
            let v = x.lo + (x.hi - x.lo) * i as f64 / TICKS as f64;
            let px = x.px(v);
            writeln!(
                self.body,
                r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{v:.3}</text>"#,
                H - BOTTOM + 16.0
            )
            .unwrap();
        }
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

/// One bar per label.
pub fn bar_chart(title: &str, y_label: &str, labels: &[String], values: &[f64]) -> Plot {
    assert_eq!(labels.len(), values.len(), "one value per bar");
    let rows: Vec<Vec<String>> = labels
        .iter()
        .zip(values)
        .map(|(l, v)| vec![l.clone(), v.to_string()])
        .collect();
    let csv = csv_table(&["label", "value"], &rows);
    let y = Scale::new(values.iter().copied(), true, H - BOTTOM, TOP);
    let mut c = Canvas::new(title, &csv);
    c.y_axis(&y, y_label);
    c.x_axis(y.px(0.0), "");
    let slot = (W - LEFT - RIGHT) / labels.len().max(1) as f64;
    for (i, (l, &v)) in labels.iter().zip(values).enumerate() {
        let x0 = LEFT + slot * (i as f64 + 0.15);
        let (top, bottom) = (y.px(v.max(0.0)), y.px(v.min(0.0)));
        writeln!(
            c.body,
            r##"<rect class="bar" x="{x0:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="#4477aa"><title>{}: {v}</title></rect>"##,
            slot * 0.7,
            bottom - top,
            escape(l)
        )
        .unwrap();
        writeln!(
            c.body,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            x0 + slot * 0.35,
            H - BOTTOM + 16.0,
            escape(l)
        )
        .unwrap();
    }
    Plot {
        svg: c.finish(),
        csv,
    }
}

/// Points joined in order of `xs`.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, xs: &[f64], ys: &[f64]) -> Plot {
    assert_eq!(xs.len(), ys.len(), "one y per x");
    let rows: Vec<Vec<String>> = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| vec![x.to_string(), y.to_string()])
        .collect();
    let csv = csv_table(&["x", "y"], &rows);
    let x = Scale::new(xs.iter().copied(), false, LEFT, W - RIGHT);
    let y = Scale::new(ys.iter().copied(), true, H - BOTTOM, TOP);
    let mut c = Canvas::new(title, &csv);
    c.y_axis(&y, y_label);
    c.x_axis(H - BOTTOM, x_label);
    c.x_ticks(&x);
    let pts: Vec<String> = xs
        .iter()
        .zip(ys)
        .map(|(&a, &b)| format!("{:.2},{:.2}", x.px(a), y.px(b)))
        .collect();
    writeln!(
        c.body,
        r##"<polyline class="series" points="{}" fill="none" stroke="#4477aa" stroke-width="2"/>"##,
        pts.join(" ")
    )
    .unwrap();
    for p in &pts {
        let (px, py) = p.split_once(',').expect("formatted above");
        writeln!(
            c.body,
            r##"<circle class="point" cx="{px}" cy="{py}" r="3" fill="#4477aa"/>"##
        )
        .unwrap();
    }
    Plot {
        svg: c.finish(),
        csv,
    }
}

/// Labelled points with a fitted `a * x^b + c` curve over their x-range.
pub fn scatter_power_law(
    title: &str,
    x_label: &str,
    y_label: &str,
    labels: &[String],
    xs: &[f64],
    ys: &[f64],
    fit: &PowerLawFit,
) -> Plot {
    assert!(
        labels.len() == xs.len() && xs.len() == ys.len(),
        "ragged scatter input"
    );
    let rows: Vec<Vec<String>> = (0..xs.len())
        .map(|i| {
            vec![
                labels[i].clone(),
                xs[i].to_string(),
                ys[i].to_string(),
                fit.eval(xs[i]).to_string(),
            ]
        })
        .collect();
    let csv = csv_table(&["label", "x", "y", "fitted"], &rows);
    let fit_json = serde_json::to_string(fit).expect("plain numbers");
    let x = Scale::new(xs.iter().copied(), false, LEFT, W - RIGHT);
    let (x_min, x_max) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let curve: Vec<(f64, f64)> = if x_min.is_finite() && x_max > x_min {
        (0..=100)
            .map(|i| {
                let v = x_min + (x_max - x_min) * i as f64 / 100.0;
                (v, fit.eval(v))
            })
            .filter(|(_, f)| f.is_finite())
            .collect()
    } else {
        Vec::new()
    };
    let y = Scale::new(
        ys.iter().copied().chain(curve.iter().map(|p| p.1)),
        false,
        H - BOTTOM,
        TOP,
    );
    let mut c = Canvas::new(title, &csv);
    writeln!(c.body, "<!-- fit {} -->", comment_safe(&fit_json)).unwrap();
    c.y_axis(&y, y_label);
    c.x_axis(H - BOTTOM, x_label);
    c.x_ticks(&x);
    for i in 0..xs.len() {
        writeln!(
            c.body,
            r##"<circle class="point" cx="{:.2}" cy="{:.2}" r="4" fill="#4477aa"><title>{}</title></circle>"##,
            x.px(xs[i]),
            y.px(ys[i]),
            escape(&labels[i])
        )
        .unwrap();
    }
    if !curve.is_empty() {
        let pts: Vec<String> = curve
            .iter()
            .map(|&(a, b)| format!("{:.2},{:.2}", x.px(a), y.px(b)))
            .collect();
        writeln!(
            c.body,
            r##"<polyline class="fit" points="{}" fill="none" stroke="#cc3311" stroke-width="2"/>"##,
            pts.join(" ")
        )
        .unwrap();
    }
    writeln!(
        c.body,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="end">y = {:.4} x^{:.4} + {:.4}, R² = {:.4}, ρ = {:.4}</text>"#,
        W - RIGHT,
        TOP + 12.0,
        fit.a,
        fit.b,
        fit.c,
        fit.r_squared,
        fit.spearman_rho
    )
    .unwrap();
    Plot {
        svg: c.finish(),
        csv,
    }
}

/// Extracts the fit record embedded by [`scatter_power_law`].
pub fn embedded_fit(svg: &str) -> Option<PowerLawFit> {
    let start = svg.find("<!-- fit ")? + "<!-- fit ".len();
    let end = start + svg[start..].find(" -->")?;
    serde_json::from_str(&svg[start..end]).ok()
}

/// Extracts the data table embedded in a chart.
pub fn embedded_data(svg: &str) -> Option<&str> {
    let start = svg.find("<!-- data\n")? + "<!-- data\n".len();
    let end = start + svg[start..].find("-->")?;
    Some(&svg[start..end])
}
