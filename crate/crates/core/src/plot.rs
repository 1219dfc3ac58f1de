//! SVG figures for ablation sweeps.
//!
//! Every plotted value is also written as a `data-value` attribute with the
//! same six-decimal formatting as the CSV tables, so figures can be checked
//! against the numbers they were drawn from.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::experiment::AblationResult;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    Line,
    Bar,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Figure {
    /// Used in the file name `fig_<axis>.svg`.
    pub axis: String,
    pub kind: PlotKind,
    pub levels: Vec<String>,
    pub series: Vec<Series>,
}

/// One value read back from a rendered figure.
#[derive(Clone, Debug, PartialEq)]
pub struct PlottedValue {
    pub series: String,
    pub level: String,
    pub value: f64,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 130.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#222222",
];

impl Figure {
    /// Seed-averaged rows of an ablation: one series per source domain plus
    /// the overall average. Hyper-parameter sweeps become line plots.
    pub fn from_ablation(result: &AblationResult) -> Result<Figure> {
        let kind = if result.spec.axis.is_numeric() {
            PlotKind::Line
        } else {
            PlotKind::Bar
        };
        Figure::from_ablation_csv(&result.to_csv(), &result.spec.axis.name(), kind)
    }

    /// Reads the `mean` rows of an ablation CSV.
    pub fn from_ablation_csv(text: &str, axis: &str, kind: PlotKind) -> Result<Figure> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::input("ablation table is empty"))?
            .split(',')
            .collect();
        if header.len() < 4 || header[0] != "level" || header[1] != "seed" {
            return Err(Error::input("not an ablation table: expected a level,seed,... header"));
        }
        // Skip the trailing coarse_average column.
        let names: Vec<String> = header[2..header.len() - 1].iter().map(|s| s.to_string()).collect();
        let mut series: Vec<Series> = names
            .iter()
            .map(|n| Series {
                name: n.clone(),
                values: Vec::new(),
            })
            .collect();
        let mut levels = Vec::new();
        for line in lines {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != header.len() {
                return Err(Error::input(format!("ablation row has {} cells, header has {}", cells.len(), header.len())));
            }
            if cells[1] != "mean" {
                continue;
            }
            levels.push(cells[0].to_string());
            for (s, c) in series.iter_mut().zip(&cells[2..]) {
                let v: f64 = c
                    .parse()
                    .map_err(|_| Error::input(format!("ablation cell '{c}' is not a number")))?;
                s.values.push(v);
            }
        }
        Ok(Figure {
            axis: axis.to_string(),
            kind,
            levels,
            series,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty() || self.series.is_empty()
    }

    fn value_range(&self) -> (f64, f64) {
        let vals = self.series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            return (0.0, 1.0);
        }
        let lo = if self.kind == PlotKind::Bar { 0.0 } else { lo };
        let pad = ((hi - lo) * 0.1).max(0.01);
        ((lo - pad).max(0.0), (hi + pad).min(1.0).max(lo + pad))
    }

    pub fn to_svg(&self) -> String {
        let (lo, hi) = self.value_range();
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let n = self.levels.len().max(1) as f64;
        let slot = pw / n;
        let y = |v: f64| TOP + ph * (1.0 - (v - lo) / (hi - lo));
        let cx = |i: usize| LEFT + slot * (i as f64 + 0.5);

        let mut s = String::new();
        writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        )
        .unwrap();
        writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
        writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">DSC by {}</text>"#, LEFT + pw / 2.0, esc(&self.axis)).unwrap();
        writeln!(
            s,
            r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.1}" stroke="black"/><line x1="{LEFT}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
            TOP + ph,
            TOP + ph,
            LEFT + pw,
            TOP + ph
        )
        .unwrap();
        for k in 0..=4 {
            let v = lo + (hi - lo) * k as f64 / 4.0;
            writeln!(
                s,
                r##"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text><line x1="{LEFT}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#dddddd"/>"##,
                LEFT - 6.0,
                y(v) + 4.0,
                y(v),
                LEFT + pw,
                y(v)
            )
            .unwrap();
        }
        for (i, l) in self.levels.iter().enumerate() {
            writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, cx(i), TOP + ph + 16.0, esc(l)).unwrap();
        }

        let ns = self.series.len().max(1) as f64;
        let bar = slot * 0.8 / ns;
        for (j, ser) in self.series.iter().enumerate() {
            let color = COLORS[j % COLORS.len()];
            if self.kind == PlotKind::Line {
                let pts: Vec<String> = ser
                    .values
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| v.is_finite())
                    .map(|(i, &v)| format!("{:.1},{:.1}", cx(i), y(v)))
                    .collect();
                writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" ")).unwrap();
            }
            for (i, &v) in ser.values.iter().enumerate() {
                let attrs = format!(
                    r#"data-series="{}" data-level="{}" data-value="{v:.6}""#,
                    esc(&ser.name),
                    esc(&self.levels[i])
                );
                let vy = if v.is_finite() { y(v) } else { TOP + ph };
                match self.kind {
                    PlotKind::Line => {
                        writeln!(s, r#"<circle cx="{:.1}" cy="{vy:.1}" r="3" fill="{color}" {attrs}/>"#, cx(i)).unwrap();
                    }
                    PlotKind::Bar => {
                        let x0 = LEFT + slot * i as f64 + slot * 0.1 + bar * j as f64;
                        writeln!(
                            s,
                            r#"<rect x="{x0:.1}" y="{vy:.1}" width="{bar:.1}" height="{:.1}" fill="{color}" {attrs}/>"#,
                            TOP + ph - vy
                        )
                        .unwrap();
                    }
                }
            }
            let ly = TOP + 14.0 * j as f64;
            writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                WIDTH - RIGHT + 10.0,
                ly,
                WIDTH - RIGHT + 24.0,
                ly + 9.0,
                esc(&ser.name)
            )
            .unwrap();
        }
        s.push_str("</svg>\n");
        s
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn unesc(s: &str) -> String {
    s.replace("&quot;", "\"").replace("&gt;", ">").replace("&lt;", "<").replace("&amp;", "&")
}

fn attr<'a>(element: &'a str, name: &str) -> Option<&'a str> {
    let key = format!(" {name}=\"");
    let start = element.find(&key)? + key.len();
    let len = element[start..].find('"')?;
    Some(&element[start..start + len])
}

/// Every `data-value` mark in a rendered figure, in drawing order.
pub fn read_svg_values(svg: &str) -> Result<Vec<PlottedValue>> {
    let mut out = Vec::new();
    for element in svg.split('<').filter(|e| e.contains(" data-value=\"")) {
        let get = |n| attr(element, n).ok_or_else(|| Error::input(format!("figure mark without {n}")));
        let raw = get("data-value")?;
        out.push(PlottedValue {
            series: unesc(get("data-series")?),
            level: unesc(get("data-level")?),
            value: raw
                .parse()
                .map_err(|_| Error::input(format!("figure value '{raw}' is not a number")))?,
        });
    }
    Ok(out)
}

/// Writes each non-empty figure to `root/run_id/fig_<axis>.svg`. Empty
/// figures are skipped with a warning.
pub fn emit_plots(figures: &[Figure], root: &Path, run_id: &str) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if figures.is_empty() {
        log::warn!("no figures to plot");
    }
    for f in figures {
        if f.is_empty() {
            log::warn!("skipping empty figure for {}", f.axis);
            continue;
        }
        let dir = root.join(run_id);
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("fig_{}.svg", f.axis));
        fs::write(&path, f.to_svg())?;
        written.push(path);
    }
    Ok(written)
}
