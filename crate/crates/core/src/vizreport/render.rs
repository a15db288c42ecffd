//! Static SVG figures with CSV companions. Output bytes depend only on the
//! input data.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::Boundaries2d;
use crate::actstore::{HeadCoord, JointClass};
use crate::error::{Error, Result};
use crate::task::Task;
use crate::tombench::SweepResult;
use crate::toylab::TokenAttribution;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub svg: String,
    pub csv: String,
}

impl Rendered {
    /// Writes `<stem>.svg` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let svg = dir.join(format!("{stem}.svg"));
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&svg, &self.svg).map_err(|e| Error::io(&svg, e))?;
        fs::write(&csv, &self.csv).map_err(|e| Error::io(&csv, e))?;
        Ok((svg, csv))
    }
}

/// `<task>_<kind>_<params>` with anything outside `[A-Za-z0-9.-]` in
/// `params` replaced by `-`.
pub fn artifact_stem(task: Task, kind: &str, params: &str) -> String {
    let clean: String = params
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '-' })
        .collect();
    if clean.is_empty() {
        format!("{task}_{kind}")
    } else {
        format!("{task}_{kind}_{clean}")
    }
}

type Metric = fn(&crate::tombench::ScoreReport) -> f64;

const CLASS_COLORS: [&str; 4] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52"];
const SERIES_COLORS: [&str; 4] = ["#4c72b0", "#c44e52", "#55a868", "#8c8c8c"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn open_svg(w: f64, h: f64, title: &str) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{:.1}" y="18" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title)).unwrap();
    s
}

/// White-to-blue ramp over `[lo, hi]`; NaN is grey.
fn ramp(v: f64, lo: f64, hi: f64) -> String {
    if !v.is_finite() {
        return "#cccccc".into();
    }
    let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 1.0 };
    let mix = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(247.0, 8.0), mix(251.0, 48.0), mix(255.0, 107.0))
}

/// Layer x head heatmap. Rows are layers (0 at the top), columns heads.
pub fn render_grid(grid: ArrayView2<f64>, title: &str) -> Result<Rendered> {
    let (layers, heads) = grid.dim();
    if layers == 0 || heads == 0 {
        return Err(Error::invalid("empty grid"));
    }
    let finite: Vec<f64> = grid.iter().cloned().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cell = (480.0 / heads.max(layers) as f64).clamp(6.0, 40.0);
    let (left, top) = (50.0, 34.0);
    let w = left + cell * heads as f64 + 20.0;
    let h = top + cell * layers as f64 + 40.0;
    let mut svg = open_svg(w, h, title);
    for l in 0..layers {
        for hd in 0..heads {
            let v = grid[[l, hd]];
            writeln!(
                svg,
                r#"<rect class="cell" x="{:.1}" y="{:.1}" width="{cell:.1}" height="{cell:.1}" fill="{}"><title>L{l} H{hd}: {}</title></rect>"#,
                left + cell * hd as f64,
                top + cell * l as f64,
                ramp(v, lo, hi),
                if v.is_finite() { format!("{v:.4}") } else { "failed".into() }
            )
            .unwrap();
        }
        writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{l}</text>"#,
            left - 4.0,
            top + cell * (l as f64 + 0.5) + 4.0
        )
        .unwrap();
    }
    writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">head</text>"#,
        left + cell * heads as f64 / 2.0,
        top + cell * layers as f64 + 20.0
    )
    .unwrap();
    writeln!(svg, r#"<text x="12" y="{:.1}" transform="rotate(-90 12 {:.1})" text-anchor="middle">layer</text>"#, top + cell * layers as f64 / 2.0, top + cell * layers as f64 / 2.0).unwrap();
    svg.push_str("</svg>\n");

    let mut csv = String::from("layer");
    for hd in 0..heads {
        write!(csv, ",h{hd}").unwrap();
    }
    csv.push('\n');
    for l in 0..layers {
        write!(csv, "{l}").unwrap();
        for hd in 0..heads {
            let v = grid[[l, hd]];
            if v.is_finite() {
                write!(csv, ",{v:.6}").unwrap();
            } else {
                csv.push(',');
            }
        }
        csv.push('\n');
    }
    Ok(Rendered { svg, csv })
}

struct Plot {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
    x: (f64, f64),
    y: (f64, f64),
}

impl Plot {
    fn px(&self, v: f64) -> f64 {
        let span = if self.x.1 > self.x.0 { self.x.1 - self.x.0 } else { 1.0 };
        self.left + (v - self.x.0) / span * self.width
    }

    fn py(&self, v: f64) -> f64 {
        let span = if self.y.1 > self.y.0 { self.y.1 - self.y.0 } else { 1.0 };
        self.top + self.height - (v - self.y.0) / span * self.height
    }

    fn axes(&self, svg: &mut String, x_label: &str, y_label: &str) {
        let (x0, x1, y0, y1) = (self.left, self.left + self.width, self.top, self.top + self.height);
        writeln!(svg, r#"<path d="M{x0:.1} {y0:.1} L{x0:.1} {y1:.1} L{x1:.1} {y1:.1}" fill="none" stroke="black"/>"#).unwrap();
        for (v, anchor) in [(self.x.0, "start"), (self.x.1, "end")] {
            writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="{anchor}">{v:.3}</text>"#, self.px(v), y1 + 14.0).unwrap();
        }
        for v in [self.y.0, self.y.1] {
            writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, x0 - 4.0, self.py(v) + 4.0).unwrap();
        }
        writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, y1 + 30.0, escape(x_label)).unwrap();
        let cy = (y0 + y1) / 2.0;
        writeln!(svg, r#"<text x="14" y="{cy:.1}" transform="rotate(-90 14 {cy:.1})" text-anchor="middle">{}</text>"#, escape(y_label)).unwrap();
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Accuracy and invalid-rate curves over alpha for one `k`.
pub fn render_curves(sweep: &SweepResult, k: usize) -> Result<Rendered> {
    let mut cells: Vec<_> = sweep.cells.iter().filter(|c| c.k == k).collect();
    if cells.is_empty() {
        return Err(Error::invalid(format!("sweep has no cells with k = {k}")));
    }
    cells.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
    let plot = Plot {
        left: 60.0,
        top: 34.0,
        width: 420.0,
        height: 260.0,
        x: bounds(cells.iter().map(|c| c.alpha)),
        y: (0.0, 1.0),
    };
    let mut svg = open_svg(600.0, 340.0, &format!("{} (k = {k})", sweep.kind.label()));
    plot.axes(&mut svg, "alpha", "rate");
    let series: [(&str, Metric); 4] = [
        ("TB", |r| r.tb_accuracy),
        ("FB", |r| r.fb_accuracy),
        ("Both", |r| r.both_accuracy),
        ("invalid", |r| r.invalid_rate),
    ];
    for (i, (name, get)) in series.iter().enumerate() {
        let pts: Vec<String> = cells
            .iter()
            .map(|c| format!("{:.1},{:.1}", plot.px(c.alpha), plot.py(get(&c.report))))
            .collect();
        let color = SERIES_COLORS[i];
        writeln!(svg, r#"<polyline class="series" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" ")).unwrap();
        let ly = 50.0 + 16.0 * i as f64;
        writeln!(svg, r#"<line x1="492" y1="{ly:.1}" x2="508" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="512" y="{:.1}">{name}</text>"#, ly + 4.0).unwrap();
    }
    svg.push_str("</svg>\n");

    let mut csv = String::from("alpha,tb_acc,fb_acc,both_acc,invalid_rate\n");
    for c in &cells {
        let r = &c.report;
        writeln!(csv, "{},{:.6},{:.6},{:.6},{:.6}", c.alpha, r.tb_accuracy, r.fb_accuracy, r.both_accuracy, r.invalid_rate).unwrap();
    }
    Ok(Rendered { svg, csv })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub head: HeadCoord,
    pub x: f64,
    pub y: f64,
}

/// One point per head, e.g. probe accuracy on two tasks.
pub fn render_scatter(points: &[ScatterPoint], x_label: &str, y_label: &str) -> Result<Rendered> {
    if points.is_empty() {
        return Err(Error::invalid("no points to plot"));
    }
    if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::NonFinite("scatter coordinates".into()));
    }
    let plot = Plot {
        left: 60.0,
        top: 34.0,
        width: 360.0,
        height: 300.0,
        x: bounds(points.iter().map(|p| p.x)),
        y: bounds(points.iter().map(|p| p.y)),
    };
    let mut svg = open_svg(460.0, 380.0, &format!("{y_label} vs {x_label}"));
    plot.axes(&mut svg, x_label, y_label);
    let mut csv = String::from("layer,head,x,y\n");
    for p in points {
        writeln!(
            svg,
            r#"<circle class="point" cx="{:.1}" cy="{:.1}" r="3" fill="{}" fill-opacity="0.7"><title>{}</title></circle>"#,
            plot.px(p.x),
            plot.py(p.y),
            CLASS_COLORS[0],
            p.head
        )
        .unwrap();
        writeln!(csv, "{},{},{:.6},{:.6}", p.head.layer, p.head.head, p.x, p.y).unwrap();
    }
    svg.push_str("</svg>\n");
    Ok(Rendered { svg, csv })
}

/// Tokens in reading order, shaded by attribution magnitude.
pub fn render_strip(tokens: &[String], attributions: &[TokenAttribution]) -> Result<Rendered> {
    if tokens.len() != attributions.len() {
        return Err(Error::Dimension {
            expected: tokens.len(),
            got: attributions.len(),
        });
    }
    if tokens.is_empty() {
        return Err(Error::invalid("no tokens to plot"));
    }
    let per_row = 12;
    let (cw, ch) = (64.0, 26.0);
    let rows = tokens.len().div_ceil(per_row);
    let mut svg = open_svg(20.0 + cw * per_row as f64, 40.0 + ch * rows as f64, "token attribution");
    let mut csv = String::from("token_index,token_id,token,magnitude\n");
    for (i, (tok, a)) in tokens.iter().zip(attributions).enumerate() {
        let (x, y) = (10.0 + cw * (i % per_row) as f64, 30.0 + ch * (i / per_row) as f64);
        writeln!(
            svg,
            r##"<rect class="token" x="{x:.1}" y="{y:.1}" width="{:.1}" height="{:.1}" fill="#c44e52" fill-opacity="{:.3}"/><text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
            cw - 2.0,
            ch - 4.0,
            a.magnitude.clamp(0.0, 1.0),
            x + cw / 2.0,
            y + ch / 2.0 + 2.0,
            escape(tok)
        )
        .unwrap();
        let field = if tok.contains([',', '"', '\n']) {
            format!("\"{}\"", tok.replace('"', "\"\""))
        } else {
            tok.clone()
        };
        writeln!(csv, "{},{},{},{:.6}", a.token_index, a.token_id, field, a.magnitude).unwrap();
    }
    svg.push_str("</svg>\n");
    Ok(Rendered { svg, csv })
}

/// Projected points coloured by joint class, with the 2-D probe's class
/// arrows drawn from the origin when `boundaries` is given.
pub fn render_cca(coords: ArrayView2<f64>, classes: &[JointClass], boundaries: Option<&Boundaries2d>) -> Result<Rendered> {
    if coords.ncols() != 2 {
        return Err(Error::Dimension { expected: 2, got: coords.ncols() });
    }
    if coords.nrows() != classes.len() {
        return Err(Error::Dimension {
            expected: coords.nrows(),
            got: classes.len(),
        });
    }
    if coords.nrows() == 0 {
        return Err(Error::invalid("no points to plot"));
    }
    let lim = coords.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9) * 1.05;
    let plot = Plot {
        left: 60.0,
        top: 34.0,
        width: 340.0,
        height: 340.0,
        x: (-lim, lim),
        y: (-lim, lim),
    };
    let mut svg = open_svg(520.0, 420.0, "CCA projection");
    plot.axes(&mut svg, "CCA 1", "CCA 2");
    let mut csv = String::from("x,y,class\n");
    for (row, c) in coords.rows().into_iter().zip(classes) {
        writeln!(
            svg,
            r#"<circle class="point" cx="{:.1}" cy="{:.1}" r="2.5" fill="{}" fill-opacity="0.6"/>"#,
            plot.px(row[0]),
            plot.py(row[1]),
            CLASS_COLORS[c.index()]
        )
        .unwrap();
        writeln!(csv, "{:.6},{:.6},{}", row[0], row[1], c.name()).unwrap();
    }
    if let Some(b) = boundaries {
        let longest = b.arrows.iter().map(|a| a[0].hypot(a[1])).fold(0.0, f64::max);
        let scale = if longest > 0.0 { 0.8 * lim / longest } else { 0.0 };
        for (c, a) in b.arrows.iter().enumerate() {
            writeln!(
                svg,
                r#"<line class="arrow" x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{}" stroke-width="2.5"/>"#,
                plot.px(0.0),
                plot.py(0.0),
                plot.px(a[0] * scale),
                plot.py(a[1] * scale),
                CLASS_COLORS[c]
            )
            .unwrap();
        }
    }
    for (c, color) in CLASS_COLORS.iter().enumerate() {
        let y = 50.0 + 16.0 * c as f64;
        writeln!(
            svg,
            r#"<circle cx="420" cy="{y:.1}" r="4" fill="{}"/><text x="430" y="{:.1}">{}</text>"#,
            color,
            y + 4.0,
            JointClass::new(c)?.name()
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    Ok(Rendered { svg, csv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::steering::{DirectionKind, InterventionSpec, SpecEntry};
    use crate::tombench::{sweep, BenchmarkItem, Condition, OptionLabel, TranscriptRunner};
    use ndarray::array;

    #[test]
    fn grid_has_one_cell_per_head_and_is_stable() {
        let g = array![[0.5, 0.9], [f64::NAN, 0.7]];
        let a = render_grid(g.view(), "oracle").unwrap();
        assert_eq!(a.svg.matches(r#"class="cell""#).count(), 4);
        assert_eq!(a, render_grid(g.view(), "oracle").unwrap());
        assert_eq!(a.csv, "layer,h0,h1\n0,0.500000,0.900000\n1,,0.700000\n");
    }

    #[test]
    fn curve_csv_schema() {
        let item = BenchmarkItem {
            scenario_id: "s".into(),
            task: Task::ForwardBelief,
            condition: Condition::TB,
            story: "x".into(),
            question: "y".into(),
            option_a: "p".into(),
            option_b: "q".into(),
            correct: OptionLabel::A,
        };
        let mut r = TranscriptRunner::new();
        r.insert(item.key(), None, "a)".into());
        r.insert(item.key(), Some((2.0, 1)), "b)".into());
        let spec = InterventionSpec::new(
            DirectionKind::PlusTpfo,
            1.0,
            vec![SpecEntry { layer: 0, head: 0, sigma: 1.0, theta: vec![1.0] }],
        )
        .unwrap();
        let s = sweep(&r, &[item], &spec, &[0.0, 2.0], &[1]).unwrap();
        let out = render_curves(&s, 1).unwrap();
        assert_eq!(out.csv.lines().next().unwrap(), "alpha,tb_acc,fb_acc,both_acc,invalid_rate");
        assert_eq!(out.csv.lines().count(), 3);
        assert_eq!(out.svg.matches(r#"class="series""#).count(), 4);
        assert!(render_curves(&s, 2).is_err());
    }

    #[test]
    fn strip_and_scatter() {
        let toks = vec!["Ravi".to_string(), "a,b".to_string()];
        let attr = vec![
            TokenAttribution { token_index: 0, token_id: 9, magnitude: 1.0 },
            TokenAttribution { token_index: 1, token_id: 12, magnitude: 0.25 },
        ];
        let s = render_strip(&toks, &attr).unwrap();
        assert!(s.csv.contains("1,12,\"a,b\",0.250000"));
        assert!(render_strip(&toks[..1], &attr).is_err());
        let p = [ScatterPoint { head: HeadCoord::new(1, 2), x: 0.5, y: 0.75 }];
        assert_eq!(render_scatter(&p, "belief", "action").unwrap().csv, "layer,head,x,y\n1,2,0.500000,0.750000\n");
    }

    #[test]
    fn stems() {
        assert_eq!(artifact_stem(Task::ForwardBelief, "grid", "binary oracle"), "forward_belief_grid_binary-oracle");
        assert_eq!(artifact_stem(Task::Tomi, "curves", ""), "tomi_curves");
    }
}
