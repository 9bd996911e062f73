//! Static SVG rendering of trajectory CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Positions2d,
    Velocities,
}

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(&'static str),
    #[error("row {row}: {message}")]
    BadRow { row: usize, message: String },
    #[error("no data rows")]
    Empty,
    #[error("positions_2d needs two coordinates per agent, found {0}")]
    NotPlanar(usize),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// `series[agent][dim]` is a list of `(t, x, v)` in file order.
#[derive(Debug, Default)]
pub struct Trajectories {
    series: BTreeMap<usize, BTreeMap<usize, Vec<(f64, f64, f64)>>>,
}

impl Trajectories {
    pub fn read<R: std::io::Read>(r: R) -> Result<Self, PlotError> {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        let col = |name: &'static str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or(PlotError::MissingColumn(name))
        };
        let (ct, ca, cd, cx, cv) = (col("t")?, col("agent")?, col("dim")?, col("x")?, col("v")?);
        let mut out = Trajectories::default();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = i + 2;
            let field = |c: usize| -> Result<&str, PlotError> {
                rec.get(c).ok_or_else(|| PlotError::BadRow {
                    row,
                    message: "too few fields".into(),
                })
            };
            let num = |c: usize| -> Result<f64, PlotError> {
                let s = field(c)?;
                s.parse().map_err(|_| PlotError::BadRow {
                    row,
                    message: format!("`{s}` is not a number"),
                })
            };
            let idx = |c: usize| -> Result<usize, PlotError> {
                let s = field(c)?;
                s.parse().map_err(|_| PlotError::BadRow {
                    row,
                    message: format!("`{s}` is not an index"),
                })
            };
            out.series
                .entry(idx(ca)?)
                .or_default()
                .entry(idx(cd)?)
                .or_default()
                .push((num(ct)?, num(cx)?, num(cv)?));
        }
        if out.series.is_empty() {
            return Err(PlotError::Empty);
        }
        Ok(out)
    }

    fn dims(&self) -> usize {
        self.series.values().map(|d| d.len()).max().unwrap_or(0)
    }
}

/// Curves are decimated to at most this many vertices.
const MAX_POINTS: usize = 1500;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Frame {
    fn new(x0: f64, y0: f64, w: f64, h: f64, xr: (f64, f64), yr: (f64, f64)) -> Self {
        Self {
            x0,
            y0,
            w,
            h,
            xr: pad(xr),
            yr: pad(yr),
        }
    }

    fn px(&self, x: f64) -> f64 {
        self.x0 + (x - self.xr.0) / (self.xr.1 - self.xr.0) * self.w
    }

    fn py(&self, y: f64) -> f64 {
        self.y0 + self.h - (y - self.yr.0) / (self.yr.1 - self.yr.0) * self.h
    }

    fn axes(&self, svg: &mut String, xlabel: &str, ylabel: &str) {
        let _ = writeln!(
            svg,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#333"/>"##,
            self.x0, self.y0, self.w, self.h
        );
        for k in 0..=4 {
            let fx = self.xr.0 + (self.xr.1 - self.xr.0) * k as f64 / 4.0;
            let fy = self.yr.0 + (self.yr.1 - self.yr.0) * k as f64 / 4.0;
            let (x, y) = (self.px(fx), self.py(fy));
            let bottom = self.y0 + self.h;
            let _ = writeln!(
                svg,
                r##"<line x1="{x:.2}" y1="{bottom:.2}" x2="{x:.2}" y2="{:.2}" stroke="#333"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
                bottom + 5.0,
                bottom + 18.0,
                tick(fx)
            );
            let _ = writeln!(
                svg,
                r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#333"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
                self.x0 - 5.0,
                self.x0,
                self.x0 - 8.0,
                y + 4.0,
                tick(fy)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{xlabel}</text>"#,
            self.x0 + self.w / 2.0,
            self.y0 + self.h + 36.0
        );
        let (lx, ly) = (self.x0 - 48.0, self.y0 + self.h / 2.0);
        let _ = writeln!(
            svg,
            r#"<text x="{lx:.2}" y="{ly:.2}" text-anchor="middle" transform="rotate(-90 {lx:.2} {ly:.2})">{ylabel}</text>"#
        );
    }

    fn polyline(&self, svg: &mut String, pts: impl Iterator<Item = (f64, f64)>, color: &str) {
        let pts: Vec<_> = pts.filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
        let stride = pts.len().div_ceil(MAX_POINTS).max(1);
        let last = pts.len().saturating_sub(1);
        let mut d = String::new();
        for (x, y) in pts.iter().enumerate().filter(|(i, _)| i % stride == 0 || *i == last).map(|(_, p)| *p) {
            let _ = write!(d, "{:.2},{:.2} ", self.px(x), self.py(y));
        }
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            d.trim_end()
        );
    }
}

fn pad((lo, hi): (f64, f64)) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    let span = hi - lo;
    if span <= 1e-12 * (1.0 + lo.abs()) {
        return (lo - 0.5, hi + 0.5);
    }
    (lo - 0.05 * span, hi + 0.05 * span)
}

fn tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

fn range(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn header(svg: &mut String, w: f64, h: f64, title: &str) {
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, "<!-- optcon {} -->", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{title}</text>"#,
        w / 2.0
    );
}

fn legend(svg: &mut String, x: f64, y: f64, agents: impl Iterator<Item = usize>) {
    for (k, a) in agents.enumerate() {
        let yy = y + 16.0 * k as f64;
        let color = color(a);
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.1}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">agent {a}</text>"#,
            x + 18.0,
            x + 24.0,
            yy + 4.0
        );
    }
}

fn color(agent: usize) -> &'static str {
    PALETTE[(agent.max(1) - 1) % PALETTE.len()]
}

pub fn positions_2d(tr: &Trajectories) -> Result<String, PlotError> {
    let dims = tr.dims();
    if dims != 2 {
        return Err(PlotError::NotPlanar(dims));
    }
    let xy: BTreeMap<usize, Vec<(f64, f64)>> = tr
        .series
        .iter()
        .map(|(&a, d)| {
            let (xs, ys) = (&d[&1], &d[&2]);
            (a, xs.iter().zip(ys).map(|(p, q)| (p.1, q.1)).collect())
        })
        .collect();
    let (w, h) = (640.0, 560.0);
    let f = Frame::new(
        70.0,
        40.0,
        440.0,
        460.0,
        range(xy.values().flatten().map(|p| p.0)),
        range(xy.values().flatten().map(|p| p.1)),
    );
    let mut svg = String::new();
    header(&mut svg, w, h, "Agent positions");
    f.axes(&mut svg, "x1", "x2");
    for (&a, pts) in &xy {
        f.polyline(&mut svg, pts.iter().copied(), color(a));
        if let Some(&(x, y)) = pts.first() {
            let _ = writeln!(
                svg,
                r##"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{}" stroke="#333"/>"##,
                f.px(x),
                f.py(y),
                color(a)
            );
        }
    }
    let finals: Vec<(f64, f64)> = xy.values().filter_map(|p| p.last().copied()).collect();
    let n = finals.len() as f64;
    let (cx, cy) = finals.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.0 / n, sy + p.1 / n));
    let (px, py) = (f.px(cx), f.py(cy));
    let _ = writeln!(
        svg,
        r##"<path d="M{:.2},{:.2}L{:.2},{:.2}M{:.2},{:.2}L{:.2},{:.2}" stroke="#000" stroke-width="2.5"/>"##,
        px - 7.0,
        py - 7.0,
        px + 7.0,
        py + 7.0,
        px - 7.0,
        py + 7.0,
        px + 7.0,
        py - 7.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}">({}, {})</text>"#,
        px + 10.0,
        py - 10.0,
        tick(cx),
        tick(cy)
    );
    legend(&mut svg, 530.0, 60.0, xy.keys().copied());
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn velocities(tr: &Trajectories) -> Result<String, PlotError> {
    let dims = tr.dims();
    let panel_h = 220.0;
    let (w, h) = (720.0, 60.0 + dims as f64 * (panel_h + 60.0));
    let mut svg = String::new();
    header(&mut svg, w, h, "Agent velocities");
    let t_range = range(tr.series.values().flat_map(|d| d.values()).flatten().map(|p| p.0));
    for k in 1..=dims {
        let pts = |a: &BTreeMap<usize, Vec<(f64, f64, f64)>>| a.get(&k).cloned().unwrap_or_default();
        let f = Frame::new(
            80.0,
            40.0 + (k - 1) as f64 * (panel_h + 60.0),
            520.0,
            panel_h,
            t_range,
            range(tr.series.values().flat_map(|d| pts(d)).map(|p| p.2)),
        );
        f.axes(&mut svg, "t", &format!("v{k}"));
        for (&a, d) in &tr.series {
            f.polyline(&mut svg, pts(d).into_iter().map(|p| (p.0, p.2)), color(a));
        }
    }
    legend(&mut svg, 620.0, 60.0, tr.series.keys().copied());
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn render(tr: &Trajectories, kind: Kind) -> Result<String, PlotError> {
    match kind {
        Kind::Positions2d => positions_2d(tr),
        Kind::Velocities => velocities(tr),
    }
}

/// Read `csv`, render, then write `out`. Nothing is written on error.
pub fn plot_file(csv: &Path, kind: Kind, out: &Path) -> Result<(), PlotError> {
    let tr = Trajectories::read(std::fs::File::open(csv)?)?;
    let svg = render(&tr, kind)?;
    std::fs::write(out, svg)?;
    Ok(())
}
