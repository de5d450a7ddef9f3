//! SVG and GeoJSON figures: choropleth, correlation scatter, activity series.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::analytics::{CorrelationReport, StationAggregate, TimeSeries};
use crate::error::{Error, Result};
use crate::geo::{voronoi_geojson, Tessellation};

/// Light end of the ramp, 8-bit RGB.
pub const RAMP_LOW: [u8; 3] = [0xf7, 0xfb, 0xff];
/// Dark end of the ramp.
pub const RAMP_HIGH: [u8; 3] = [0x08, 0x30, 0x6b];
pub const DEFAULT_MARKER: &str = "#808080";
const PALETTE: [&str; 8] = [
    "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#1f78b4",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Indicator {
    Price,
    Age,
}

impl Indicator {
    pub fn value(self, a: &StationAggregate) -> Option<f64> {
        match self {
            Indicator::Price => a.mean_price_eur,
            Indicator::Age => a.mean_age_months,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Indicator::Price => "mean phone price (EUR)",
            Indicator::Age => "mean phone age (months)",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Indicator::Price => "mean_price_eur",
            Indicator::Age => "mean_age_months",
        }
    }
}

impl std::str::FromStr for Indicator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "price" => Ok(Indicator::Price),
            "age" => Ok(Indicator::Age),
            _ => Err(Error::Argument(format!("unknown indicator {s:?} (price|age)"))),
        }
    }
}

/// Ramp colour as `[r, g, b]` percentages for `t` in `[0, 1]`; every channel
/// falls strictly as `t` rises.
pub fn ramp(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    std::array::from_fn(|i| {
        let (lo, hi) = (f64::from(RAMP_LOW[i]), f64::from(RAMP_HIGH[i]));
        (lo + (hi - lo) * t) / 255.0 * 100.0
    })
}

pub fn css_rgb([r, g, b]: [f64; 3]) -> String {
    format!("rgb({r:.6}%,{g:.6}%,{b:.6}%)")
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Linear map from a data interval onto a pixel interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub domain: (f64, f64),
    pub range: (f64, f64),
}

impl Axis {
    /// Padded by 5% on each side; a degenerate domain is widened by one.
    pub fn fit(lo: f64, hi: f64, range: (f64, f64)) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1.0, hi + 1.0) };
        let pad = (hi - lo) * 0.05;
        Self {
            domain: (lo - pad, hi + pad),
            range,
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        let (d0, d1) = self.domain;
        let (r0, r1) = self.range;
        r0 + (v - d0) / (d1 - d0) * (r1 - r0)
    }

    pub fn invert(&self, px: f64) -> f64 {
        let (d0, d1) = self.domain;
        let (r0, r1) = self.range;
        d0 + (px - r0) / (r1 - r0) * (d1 - d0)
    }

    fn attrs(&self, name: &str) -> String {
        format!(
            r#"data-{name}-domain="{} {}" data-{name}-range="{} {}""#,
            self.domain.0, self.domain.1, self.range.0, self.range.1
        )
    }
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 560.0;
const MARGIN: f64 = 60.0;

pub struct Choropleth {
    pub svg: String,
    pub geojson: Value,
}

/// Voronoi polygons coloured by station value, darker meaning higher.
pub fn render_choropleth(
    tessellation: &Tessellation,
    aggregates: &[StationAggregate],
    indicator: Indicator,
) -> Result<Choropleth> {
    let present: BTreeSet<u32> = tessellation.cells.iter().map(|c| c.station_id).collect();
    let mut values = BTreeMap::new();
    for a in aggregates {
        if !present.contains(&a.station_id) {
            return Err(Error::Argument(format!(
                "station {} has no Voronoi polygon",
                a.station_id
            )));
        }
        if let Some(v) = indicator.value(a) {
            values.insert(a.station_id, v);
        }
    }
    let (lo, hi) = values
        .values()
        .fold(None, |acc: Option<(f64, f64)>, &v| {
            Some(acc.map_or((v, v), |(a, b)| (a.min(v), b.max(v))))
        })
        .ok_or_else(|| Error::DataQuality(format!("no station has a {}", indicator.label())))?;
    let t = |v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 1.0 };

    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &[x, y] in &tessellation.clip {
        (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
    let map_w = WIDTH - 2.0 * MARGIN - 120.0;
    let map_h = HEIGHT - 2.0 * MARGIN;
    let scale = (map_w / (x1 - x0)).min(map_h / (y1 - y0));
    let px = |[x, y]: [f64; 2]| (MARGIN + (x - x0) * scale, MARGIN + (y1 - y) * scale);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    svg.push_str(
        "<defs><pattern id=\"nodata\" width=\"6\" height=\"6\" patternUnits=\"userSpaceOnUse\" patternTransform=\"rotate(45)\">\
         <rect width=\"6\" height=\"6\" fill=\"#ffffff\"/><line x1=\"0\" y1=\"0\" x2=\"0\" y2=\"6\" stroke=\"#999999\" stroke-width=\"2\"/></pattern>\
         <linearGradient id=\"ramp\" x1=\"0\" y1=\"1\" x2=\"0\" y2=\"0\">",
    );
    let _ = write!(
        svg,
        r#"<stop offset="0" stop-color="{}"/><stop offset="1" stop-color="{}"/></linearGradient></defs>"#,
        css_rgb(ramp(0.0)),
        css_rgb(ramp(1.0))
    );
    svg.push('\n');
    let _ = writeln!(svg, r#"<title>{}</title>"#, escape(indicator.label()));
    svg.push_str("<g id=\"cells\" stroke=\"#333333\" stroke-width=\"0.5\">\n");
    for (cell, ring) in tessellation.cells.iter().zip(&tessellation.planar) {
        let points: Vec<String> = ring
            .iter()
            .map(|&p| {
                let (x, y) = px(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        match values.get(&cell.station_id) {
            Some(&v) => {
                let _ = writeln!(
                    svg,
                    r#"<polygon data-station="{}" data-value="{v}" fill="{}" points="{}"/>"#,
                    cell.station_id,
                    css_rgb(ramp(t(v))),
                    points.join(" ")
                );
            }
            None => {
                let _ = writeln!(
                    svg,
                    r#"<polygon data-station="{}" class="nodata" fill="url(#nodata)" points="{}"/>"#,
                    cell.station_id,
                    points.join(" ")
                );
            }
        }
    }
    svg.push_str("</g>\n");
    let lx = WIDTH - MARGIN - 60.0;
    let _ = writeln!(
        svg,
        "<g id=\"legend\" font-family=\"sans-serif\" font-size=\"11\">\
         <rect x=\"{lx}\" y=\"{MARGIN}\" width=\"16\" height=\"200\" fill=\"url(#ramp)\" stroke=\"#333333\"/>\
         <text x=\"{}\" y=\"{}\">{hi:.1}</text><text x=\"{}\" y=\"{}\">{lo:.1}</text>\
         <rect x=\"{lx}\" y=\"{}\" width=\"16\" height=\"16\" fill=\"url(#nodata)\" stroke=\"#333333\"/>\
         <text x=\"{}\" y=\"{}\">no data</text></g>",
        lx + 20.0,
        MARGIN + 10.0,
        lx + 20.0,
        MARGIN + 200.0,
        MARGIN + 220.0,
        lx + 20.0,
        MARGIN + 232.0,
    );
    svg.push_str("</svg>\n");

    let by_station: BTreeMap<u32, &StationAggregate> = aggregates.iter().map(|a| (a.station_id, a)).collect();
    let geojson = voronoi_geojson(&tessellation.cells, |id| {
        let mut m = Map::new();
        m.insert("indicator".into(), json!(indicator.key()));
        m.insert("value".into(), json!(values.get(&id)));
        m.insert("n_total".into(), json!(by_station.get(&id).map(|a| a.n_total)));
        m
    });
    Ok(Choropleth { svg, geojson })
}

/// One marker per station, coloured by area; `r` in the title.
pub fn render_scatter(report: &CorrelationReport) -> String {
    let x_axis = axis_over(
        report.points.iter().map(|p| p.mean_price_eur),
        (MARGIN, WIDTH - MARGIN - 120.0),
    );
    let y_axis = axis_over(
        report.points.iter().map(|p| p.mean_age_months),
        (HEIGHT - MARGIN, MARGIN),
    );
    let areas: BTreeSet<&str> = report
        .points
        .iter()
        .map(|p| p.area.as_str())
        .filter(|a| !a.is_empty())
        .collect();
    let colour = |area: &str| {
        areas
            .iter()
            .position(|&a| a == area)
            .map_or(DEFAULT_MARKER, |i| PALETTE[i % PALETTE.len()])
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<title>r = {:.4}, n = {}</title>"#, report.r, report.n);
    let _ = writeln!(
        svg,
        r#"<text id="r" x="{}" y="{}" font-size="14">Pearson r = {:.4} (n = {})</text>"#,
        MARGIN,
        MARGIN - 20.0,
        report.r,
        report.n
    );
    axes(
        &mut svg,
        &x_axis,
        &y_axis,
        "mean phone price (EUR)",
        "mean phone age (months)",
    );
    let _ = writeln!(svg, r#"<g id="plot" {} {}>"#, x_axis.attrs("x"), y_axis.attrs("y"));
    for p in &report.points {
        let _ = writeln!(
            svg,
            r#"<circle class="marker" data-station="{}" data-area="{}" cx="{:.2}" cy="{:.2}" r="4" fill="{}"/>"#,
            p.station_id,
            escape(&p.area),
            x_axis.apply(p.mean_price_eur),
            y_axis.apply(p.mean_age_months),
            colour(&p.area)
        );
    }
    svg.push_str("</g>\n");
    let mut legend: Vec<(&str, &str)> = areas.iter().map(|&a| (a, colour(a))).collect();
    if report.points.iter().any(|p| p.area.is_empty()) {
        legend.push(("unlabelled", DEFAULT_MARKER));
    }
    legend_block(&mut svg, &legend, "circle");
    svg.push_str("</svg>\n");
    svg
}

/// Line plot of one or more series with vertical rules at `rules`.
pub fn render_series(series: &[(String, TimeSeries)], rules: Option<(i64, i64)>) -> Result<String> {
    if series.is_empty() || series.iter().all(|(_, s)| s.counts.is_empty()) {
        return Err(Error::Argument("no series to plot".into()));
    }
    let t0 = series.iter().map(|(_, s)| s.bin_start).min().unwrap_or(0);
    let t1 = series
        .iter()
        .map(|(_, s)| s.bin_start + s.bin_width_s * s.counts.len().saturating_sub(1) as i64)
        .max()
        .unwrap_or(0);
    let (t_lo, t_hi) = match rules {
        Some((a, b)) => (t0.min(a), t1.max(b)),
        None => (t0, t1),
    };
    let x_axis = Axis::fit(t_lo as f64, t_hi as f64, (MARGIN, WIDTH - MARGIN - 120.0));
    let max = series
        .iter()
        .flat_map(|(_, s)| s.counts.iter())
        .copied()
        .max()
        .unwrap_or(0);
    let y_axis = Axis {
        domain: (0.0, (max as f64 * 1.05).max(1.0)),
        range: (HEIGHT - MARGIN, MARGIN),
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    axes(
        &mut svg,
        &x_axis,
        &y_axis,
        "time (epoch seconds, bin start)",
        "records per bin",
    );
    let _ = writeln!(svg, r#"<g id="plot" {} {}>"#, x_axis.attrs("x"), y_axis.attrs("y"));
    let mut legend = Vec::new();
    for (i, (name, s)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = s
            .counts
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let t = s.bin_start + k as i64 * s.bin_width_s;
                format!("{:.2},{:.2}", x_axis.apply(t as f64), y_axis.apply(c as f64))
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="series" data-series="{}" fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
            escape(name),
            points.join(" ")
        );
        legend.push((name.as_str(), colour));
    }
    if let Some((w0, w1)) = rules {
        for (name, t) in [("w0", w0), ("w1", w1)] {
            let x = x_axis.apply(t as f64);
            let _ = writeln!(
                svg,
                "<line class=\"rule\" data-rule=\"{name}\" data-t=\"{t}\" x1=\"{x:.2}\" y1=\"{MARGIN}\" x2=\"{x:.2}\" y2=\"{}\" stroke=\"#000000\" stroke-dasharray=\"4 3\"/>",
                HEIGHT - MARGIN
            );
        }
    }
    svg.push_str("</g>\n");
    legend_block(&mut svg, &legend, "line");
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn axis_over(values: impl Iterator<Item = f64>, range: (f64, f64)) -> Axis {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo.is_finite() {
        Axis::fit(lo, hi, range)
    } else {
        Axis::fit(0.0, 1.0, range)
    }
}

fn axes(svg: &mut String, x: &Axis, y: &Axis, x_label: &str, y_label: &str) {
    let (x0, x1) = x.range;
    let (y0, y1) = y.range;
    let _ = writeln!(
        svg,
        "<g id=\"axes\" stroke=\"#000000\"><line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\"/><line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\"/></g>"
    );
    for k in 0..=4 {
        let f = f64::from(k) / 4.0;
        let (xv, yv) = (x.invert(x0 + f * (x1 - x0)), y.invert(y0 + f * (y1 - y0)));
        let _ = writeln!(
            svg,
            r#"<text class="tick" x="{:.2}" y="{}" text-anchor="middle">{}</text><text class="tick" x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            x0 + f * (x1 - x0),
            y0 + 16.0,
            tick(xv),
            x0 - 6.0,
            y0 + f * (y1 - y0) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text class="axis-label" x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        y0 + 40.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text class="axis-label" transform="translate({},{:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
        x0 - 45.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn tick(v: f64) -> String {
    if v.abs() >= 1e5 {
        format!("{v:.0}")
    } else {
        format!("{v:.1}")
    }
}

fn legend_block(svg: &mut String, entries: &[(&str, &str)], glyph: &str) {
    let x = WIDTH - MARGIN - 100.0;
    svg.push_str("<g id=\"legend\">\n");
    for (i, (name, colour)) in entries.iter().enumerate() {
        let y = MARGIN + 18.0 * i as f64;
        let mark = match glyph {
            "line" => format!(
                r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{colour}" stroke-width="2"/>"#,
                x + 14.0
            ),
            _ => format!(r#"<circle cx="{}" cy="{y}" r="4" fill="{colour}"/>"#, x + 7.0),
        };
        let _ = writeln!(
            svg,
            r#"<g class="legend-entry">{mark}<text x="{}" y="{}">{}</text></g>"#,
            x + 20.0,
            y + 4.0,
            escape(name)
        );
    }
    svg.push_str("</g>\n");
}
