//! A small dual-axis SVG chart renderer.
//!
//! Every data value is placed with the affine map of its [`Axis`]:
//!
//! ```text
//! x_px = MARGIN_LEFT + (x - x_min) / (x_max - x_min) * plot_width
//! y_px = MARGIN_TOP + plot_height - (y - y_min) / (y_max - y_min) * plot_height
//! ```
//!
//! where `plot_width = width_px - MARGIN_LEFT - MARGIN_RIGHT` and
//! `plot_height = height_px - MARGIN_TOP - MARGIN_BOTTOM`. Coordinates are
//! written with two decimals.

use std::fmt::Write as _;

use super::ReportError;

pub const MARGIN_LEFT: f64 = 80.0;
pub const MARGIN_RIGHT: f64 = 80.0;
pub const MARGIN_TOP: f64 = 60.0;
pub const MARGIN_BOTTOM: f64 = 60.0;
pub const DEFAULT_WIDTH: u32 = 960;
pub const DEFAULT_HEIGHT: u32 = 540;

const FONT_SIZE: f64 = 12.0;
const MARKER_FONT_SIZE: f64 = 11.0;
/// Rough advance of one glyph at the marker font size.
const CHAR_WIDTH: f64 = 6.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub start_px: f64,
    pub length_px: f64,
    /// Pixels grow downward, so vertical axes are flipped.
    pub inverted: bool,
}

impl Axis {
    pub fn to_px(&self, v: f64) -> f64 {
        let f = (v - self.min) / (self.max - self.min) * self.length_px;
        if self.inverted {
            self.start_px + self.length_px - f
        } else {
            self.start_px + f
        }
    }

    pub fn from_px(&self, px: f64) -> f64 {
        let f = if self.inverted {
            self.start_px + self.length_px - px
        } else {
            px - self.start_px
        };
        self.min + f / self.length_px * (self.max - self.min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Line,
    Points,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TickFormat {
    Plain,
    /// 1500 -> "1.5k", 2000000 -> "2M".
    Compact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub side: Side,
    pub style: Style,
    pub color: String,
    /// `None` breaks the line.
    pub points: Vec<Option<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VLine {
    pub x: f64,
    pub label: String,
}

/// Shaded x interval, used for steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub start: f64,
    pub end: f64,
    pub label: String,
}

/// `y = intercept + slope * x` drawn over `[x_from, x_to]` on the left axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitLine {
    pub slope: f64,
    pub intercept: f64,
    pub x_from: f64,
    pub x_to: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub width_px: u32,
    pub height_px: u32,
    pub title: String,
    pub x_label: String,
    pub left_label: String,
    pub right_label: Option<String>,
    pub x_range: (f64, f64),
    pub left_range: (f64, f64),
    pub right_range: Option<(f64, f64)>,
    pub x_ticks: TickFormat,
    pub series: Vec<Series>,
    pub vlines: Vec<VLine>,
    pub bands: Vec<Band>,
    pub fit_line: Option<FitLine>,
    pub annotation: Option<String>,
}

impl PlotSpec {
    pub fn new(title: impl Into<String>) -> Self {
        Self {
            width_px: DEFAULT_WIDTH,
            height_px: DEFAULT_HEIGHT,
            title: title.into(),
            x_label: String::new(),
            left_label: String::new(),
            right_label: None,
            x_range: (0.0, 1.0),
            left_range: (0.0, 1.0),
            right_range: None,
            x_ticks: TickFormat::Plain,
            series: Vec::new(),
            vlines: Vec::new(),
            bands: Vec::new(),
            fit_line: None,
            annotation: None,
        }
    }

    pub fn x_axis(&self) -> Axis {
        Axis {
            min: self.x_range.0,
            max: self.x_range.1,
            start_px: MARGIN_LEFT,
            length_px: f64::from(self.width_px) - MARGIN_LEFT - MARGIN_RIGHT,
            inverted: false,
        }
    }

    fn y_axis(&self, range: (f64, f64)) -> Axis {
        Axis {
            min: range.0,
            max: range.1,
            start_px: MARGIN_TOP,
            length_px: f64::from(self.height_px) - MARGIN_TOP - MARGIN_BOTTOM,
            inverted: true,
        }
    }

    pub fn left_axis(&self) -> Axis {
        self.y_axis(self.left_range)
    }

    pub fn right_axis(&self) -> Option<Axis> {
        self.right_range.map(|r| self.y_axis(r))
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        let bad = |m: String| Err(ReportError::InvalidSpec(m));
        if f64::from(self.width_px) <= MARGIN_LEFT + MARGIN_RIGHT
            || f64::from(self.height_px) <= MARGIN_TOP + MARGIN_BOTTOM
        {
            return bad(format!(
                "{}x{} leaves no room for the plot area",
                self.width_px, self.height_px
            ));
        }
        if self.series.is_empty() {
            return bad("at least one series is required".into());
        }
        let ranges = [Some(self.x_range), Some(self.left_range), self.right_range];
        for (lo, hi) in ranges.into_iter().flatten() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return bad(format!("axis range [{lo}, {hi}] is empty or not finite"));
            }
        }
        for s in &self.series {
            if s.side == Side::Right && self.right_range.is_none() {
                return bad(format!(
                    "series `{}` uses the right axis, which has no range",
                    s.name
                ));
            }
            if s.points
                .iter()
                .flatten()
                .any(|(x, y)| !x.is_finite() || !y.is_finite())
            {
                return bad(format!("series `{}` has a non-finite point", s.name));
            }
        }
        if self.vlines.iter().any(|v| !v.x.is_finite())
            || self
                .bands
                .iter()
                .any(|b| !b.start.is_finite() || !b.end.is_finite())
        {
            return bad("non-finite marker position".into());
        }
        if let Some(f) = self.fit_line {
            if ![f.slope, f.intercept, f.x_from, f.x_to]
                .iter()
                .all(|v| v.is_finite())
            {
                return bad("non-finite fit line".into());
            }
        }
        Ok(())
    }
}

pub fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c if (c as u32) < 0x20 && !matches!(c, '\t' | '\n' | '\r') => out.push(' '),
            c => out.push(c),
        }
    }
    out
}

fn c(v: f64) -> String {
    if v.abs() < 0.005 {
        "0.00".into()
    } else {
        format!("{v:.2}")
    }
}

/// 1, 2 or 5 times a power of ten, at least `raw`.
pub fn nice_step(raw: f64) -> f64 {
    if !(raw > 0.0 && raw.is_finite()) {
        return 1.0;
    }
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let nice = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

/// Smallest tick-aligned value at or above `v`.
pub fn nice_upper(v: f64) -> f64 {
    if v <= 0.0 {
        return 1.0;
    }
    let step = nice_step(v / 5.0);
    (v / step).ceil() * step
}

fn ticks(min: f64, max: f64) -> Vec<f64> {
    let step = nice_step((max - min) / 6.0);
    let first = (min / step).ceil() as i64;
    let last = (max / step + 1e-9).floor() as i64;
    (first..=last).map(|k| k as f64 * step).collect()
}

fn tick_label(v: f64, format: TickFormat) -> String {
    let plain = |v: f64| {
        let s = format!("{v:.3}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        if s == "-0" {
            "0".to_string()
        } else {
            s.to_string()
        }
    };
    match format {
        TickFormat::Compact if v.abs() >= 1e6 => format!("{}M", plain(v / 1e6)),
        TickFormat::Compact if v.abs() >= 1e3 => format!("{}k", plain(v / 1e3)),
        _ => plain(v),
    }
}

/// Renders a validated spec to an SVG document.
pub fn render_plot(spec: &PlotSpec) -> Result<String, ReportError> {
    spec.validate()?;
    let (w, h) = (f64::from(spec.width_px), f64::from(spec.height_px));
    let x = spec.x_axis();
    let left = spec.left_axis();
    let right = spec.right_axis();
    let (top, bottom) = (MARGIN_TOP, h - MARGIN_BOTTOM);
    let (x0, x1) = (MARGIN_LEFT, w - MARGIN_RIGHT);

    let mut o = String::new();
    let _ = writeln!(o, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        o,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}" font-family="sans-serif" font-size="{}">"#,
        spec.width_px, spec.height_px, spec.width_px, spec.height_px, FONT_SIZE
    );
    let _ = writeln!(o, "<title>{}</title>", escape(&spec.title));
    let _ = writeln!(
        o,
        r#"<rect class="background" x="0" y="0" width="{}" height="{}" fill="white"/>"#,
        spec.width_px, spec.height_px
    );
    let _ = writeln!(
        o,
        r#"<text class="title" x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
        c(w / 2.0),
        escape(&spec.title)
    );

    if !spec.bands.is_empty() {
        o.push_str("<g class=\"bands\">\n");
        for (i, b) in spec.bands.iter().enumerate() {
            let (bx0, bx1) = (x.to_px(b.start), x.to_px(b.end));
            let _ = writeln!(
                o,
                r##"<rect class="step-band" x="{}" y="{}" width="{}" height="{}" fill="#000000" fill-opacity="{}"><title>{}</title></rect>"##,
                c(bx0),
                c(top),
                c(bx1 - bx0),
                c(bottom - top),
                if i % 2 == 0 { "0.04" } else { "0.00" },
                escape(&b.label)
            );
        }
        o.push_str("</g>\n");
    }

    // Grid and axes.
    o.push_str("<g class=\"axes\" stroke=\"#444444\">\n");
    for t in ticks(left.min, left.max) {
        let py = left.to_px(t);
        let _ = writeln!(
            o,
            r##"<line class="grid" x1="{}" y1="{py}" x2="{}" y2="{py}" stroke="#dddddd"/>"##,
            c(x0),
            c(x1),
            py = c(py)
        );
        let _ = writeln!(
            o,
            r#"<text class="tick" x="{}" y="{}" text-anchor="end" stroke="none">{}</text>"#,
            c(x0 - 6.0),
            c(py + 4.0),
            tick_label(t, TickFormat::Plain)
        );
    }
    if let Some(right) = right {
        for t in ticks(right.min, right.max) {
            let py = right.to_px(t);
            let _ = writeln!(
                o,
                r#"<text class="tick" x="{}" y="{}" text-anchor="start" stroke="none">{}</text>"#,
                c(x1 + 6.0),
                c(py + 4.0),
                tick_label(t, TickFormat::Plain)
            );
        }
        let _ = writeln!(
            o,
            r#"<line class="axis" x1="{x}" y1="{}" x2="{x}" y2="{}"/>"#,
            c(top),
            c(bottom),
            x = c(x1)
        );
    }
    for t in ticks(x.min, x.max) {
        let px = x.to_px(t);
        let _ = writeln!(
            o,
            r#"<text class="tick" x="{}" y="{}" text-anchor="middle" stroke="none">{}</text>"#,
            c(px),
            c(bottom + 18.0),
            tick_label(t, spec.x_ticks)
        );
    }
    let _ = writeln!(
        o,
        r#"<line class="axis" x1="{x}" y1="{}" x2="{x}" y2="{}"/>"#,
        c(top),
        c(bottom),
        x = c(x0)
    );
    let _ = writeln!(
        o,
        r#"<line class="axis" x1="{}" y1="{y}" x2="{}" y2="{y}"/>"#,
        c(x0),
        c(x1),
        y = c(bottom)
    );
    o.push_str("</g>\n");

    let _ = writeln!(
        o,
        r#"<text class="axis-label" x="{}" y="{}" text-anchor="middle">{}</text>"#,
        c((x0 + x1) / 2.0),
        c(h - 16.0),
        escape(&spec.x_label)
    );
    let (ly, lx) = ((top + bottom) / 2.0, 22.0);
    let _ = writeln!(
        o,
        r#"<text class="axis-label" x="{lx}" y="{ly}" text-anchor="middle" transform="rotate(-90 {lx} {ly})">{}</text>"#,
        escape(&spec.left_label),
        lx = c(lx),
        ly = c(ly)
    );
    if let Some(label) = &spec.right_label {
        let rx = w - 22.0;
        let _ = writeln!(
            o,
            r#"<text class="axis-label" x="{rx}" y="{ly}" text-anchor="middle" transform="rotate(90 {rx} {ly})">{}</text>"#,
            escape(label),
            rx = c(rx),
            ly = c(ly)
        );
    }

    for s in &spec.series {
        let y = match s.side {
            Side::Left => left,
            Side::Right => right.expect("validated"),
        };
        let _ = writeln!(
            o,
            r#"<g class="series" data-name="{}" data-axis="{}">"#,
            escape(&s.name),
            if s.side == Side::Left {
                "left"
            } else {
                "right"
            }
        );
        match s.style {
            Style::Points => {
                for &(px, py) in s.points.iter().flatten() {
                    let _ = writeln!(
                        o,
                        r#"<circle class="point" cx="{}" cy="{}" r="4" fill="{}"/>"#,
                        c(x.to_px(px)),
                        c(y.to_px(py)),
                        s.color
                    );
                }
            }
            Style::Line => {
                for run in s.points.split(|p| p.is_none()).filter(|r| !r.is_empty()) {
                    let coords: Vec<String> = run
                        .iter()
                        .flatten()
                        .map(|&(px, py)| format!("{},{}", c(x.to_px(px)), c(y.to_px(py))))
                        .collect();
                    if coords.len() == 1 {
                        let (px, py) = run[0].expect("non-gap run");
                        let _ = writeln!(
                            o,
                            r#"<circle class="isolated" cx="{}" cy="{}" r="1.5" fill="{}"/>"#,
                            c(x.to_px(px)),
                            c(y.to_px(py)),
                            s.color
                        );
                    } else {
                        let _ = writeln!(
                            o,
                            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
                            coords.join(" "),
                            s.color
                        );
                    }
                }
            }
        }
        o.push_str("</g>\n");
    }

    if let Some(f) = spec.fit_line {
        let _ = writeln!(
            o,
            r##"<line class="trend" x1="{}" y1="{}" x2="{}" y2="{}" stroke="#d62728" stroke-width="2" stroke-dasharray="6 4"/>"##,
            c(x.to_px(f.x_from)),
            c(left.to_px(f.intercept + f.slope * f.x_from)),
            c(x.to_px(f.x_to)),
            c(left.to_px(f.intercept + f.slope * f.x_to))
        );
    }

    if !spec.vlines.is_empty() {
        o.push_str("<g class=\"markers\">\n");
        for (i, v) in spec.vlines.iter().enumerate() {
            let px = x.to_px(v.x);
            let next = spec.vlines.get(i + 1).map_or(x1, |n| x.to_px(n.x));
            let label_width = v.label.chars().count() as f64 * CHAR_WIDTH + 6.0;
            let _ = writeln!(
                o,
                r##"<line class="marker" x1="{px}" y1="{}" x2="{px}" y2="{}" stroke="#555555" stroke-dasharray="3 3"/>"##,
                c(top),
                c(bottom),
                px = c(px)
            );
            let (tx, ty) = (px + 3.0, top + 4.0);
            if next - px < label_width {
                let _ = writeln!(
                    o,
                    r#"<text class="marker-label" x="{tx}" y="{ty}" font-size="{MARKER_FONT_SIZE}" text-anchor="end" transform="rotate(-90 {tx} {ty})">{}</text>"#,
                    escape(&v.label),
                    tx = c(tx + 8.0),
                    ty = c(ty)
                );
            } else {
                let _ = writeln!(
                    o,
                    r#"<text class="marker-label" x="{}" y="{}" font-size="{MARKER_FONT_SIZE}">{}</text>"#,
                    c(tx),
                    c(ty + 10.0),
                    escape(&v.label)
                );
            }
        }
        o.push_str("</g>\n");
    }

    o.push_str("<g class=\"legend\">\n");
    let mut lx = x0;
    for s in &spec.series {
        let ly = top - 14.0;
        match s.style {
            Style::Line => {
                let _ = writeln!(
                    o,
                    r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{}" stroke-width="2"/>"#,
                    c(lx),
                    c(lx + 18.0),
                    s.color,
                    ly = c(ly)
                );
            }
            Style::Points => {
                let _ = writeln!(
                    o,
                    r#"<rect x="{}" y="{}" width="8" height="8" fill="{}"/>"#,
                    c(lx + 5.0),
                    c(ly - 4.0),
                    s.color
                );
            }
        }
        let _ = writeln!(
            o,
            r#"<text x="{}" y="{}">{}</text>"#,
            c(lx + 24.0),
            c(ly + 4.0),
            escape(&s.name)
        );
        lx += 24.0 + s.name.chars().count() as f64 * 6.8 + 20.0;
    }
    o.push_str("</g>\n");

    if let Some(text) = &spec.annotation {
        let _ = writeln!(
            o,
            r#"<text class="annotation" x="{}" y="{}" font-size="13">{}</text>"#,
            c(x0 + 12.0),
            c(top + 20.0),
            escape(text)
        );
    }
    o.push_str("</svg>\n");
    Ok(o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line_spec() -> PlotSpec {
        let mut spec = PlotSpec::new("t & <u>");
        spec.x_range = (0.0, 10.0);
        spec.left_range = (0.0, 100.0);
        spec.series.push(Series {
            name: "a".into(),
            side: Side::Left,
            style: Style::Line,
            color: "#000000".into(),
            points: vec![
                Some((0.0, 0.0)),
                Some((1.0, 50.0)),
                None,
                Some((3.0, 10.0)),
                Some((4.0, 20.0)),
                None,
                Some((6.0, 1.0)),
            ],
        });
        spec
    }

    #[test]
    fn nice_numbers() {
        assert_eq!(nice_step(0.7), 1.0);
        assert_eq!(nice_step(1.5), 2.0);
        assert_eq!(nice_step(30.0), 50.0);
        assert_eq!(nice_step(2e5), 2e5);
        assert_eq!(nice_upper(1.05e6), 1.5e6);
        assert_eq!(nice_upper(167.0), 200.0);
        assert_eq!(nice_upper(0.0), 1.0);
        assert_eq!(ticks(0.0, 100.0), vec![0.0, 20.0, 40.0, 60.0, 80.0, 100.0]);
        assert_eq!(tick_label(1_500_000.0, TickFormat::Compact), "1.5M");
        assert_eq!(tick_label(200_000.0, TickFormat::Compact), "200k");
        assert_eq!(tick_label(2.5, TickFormat::Plain), "2.5");
    }

    #[test]
    fn escaping() {
        assert_eq!(escape(r#"a<b>&"c'"#), "a&lt;b&gt;&amp;&quot;c&apos;");
    }

    #[test]
    fn gaps_split_lines() {
        let svg = render_plot(&line_spec()).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let polylines = doc
            .descendants()
            .filter(|n| n.has_tag_name("polyline"))
            .count();
        let isolated = doc
            .descendants()
            .filter(|n| n.attribute("class") == Some("isolated"))
            .count();
        assert_eq!((polylines, isolated), (2, 1));
        assert!(svg.contains("t &amp; &lt;u&gt;"));
    }

    #[test]
    fn invalid_specs() {
        let mut spec = line_spec();
        spec.series[0].points.push(Some((f64::NAN, 1.0)));
        assert!(matches!(
            render_plot(&spec),
            Err(ReportError::InvalidSpec(_))
        ));
        let mut spec = line_spec();
        spec.series.clear();
        assert!(render_plot(&spec).is_err());
        let mut spec = line_spec();
        spec.series[0].side = Side::Right;
        assert!(render_plot(&spec).is_err());
        let mut spec = line_spec();
        spec.x_range = (1.0, 1.0);
        assert!(render_plot(&spec).is_err());
        let mut spec = line_spec();
        spec.width_px = 100;
        assert!(render_plot(&spec).is_err());
    }

    #[test]
    fn label_rotation_depends_on_spacing() {
        let mut spec = line_spec();
        spec.vlines = vec![
            VLine {
                x: 0.0,
                label: "a fairly long phase name".into(),
            },
            VLine {
                x: 0.1,
                label: "b".into(),
            },
        ];
        let svg = render_plot(&spec).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let labels: Vec<_> = doc
            .descendants()
            .filter(|n| n.attribute("class") == Some("marker-label"))
            .collect();
        assert_eq!(labels.len(), 2);
        assert!(labels[0].attribute("transform").is_some());
        assert!(labels[1].attribute("transform").is_none());
    }

    proptest! {
        #[test]
        fn axis_round_trip(min in -1e6f64..1e6, span in 1e-3f64..1e6, f in 0.0f64..=1.0, inverted: bool) {
            let axis = Axis { min, max: min + span, start_px: 60.0, length_px: 420.0, inverted };
            let v = min + f * span;
            let px = axis.to_px(v);
            prop_assert!((60.0..=480.0 + 1e-6).contains(&px));
            prop_assert!((axis.from_px(px) - v).abs() <= 1e-9 * span.max(min.abs()));
        }

        #[test]
        fn points_land_on_transform(ys in prop::collection::vec(0.0f64..100.0, 2..30)) {
            let mut spec = line_spec();
            spec.series[0].style = Style::Points;
            spec.series[0].points = ys.iter().enumerate().map(|(i, &y)| Some((i as f64 / 3.0, y))).collect();
            let svg = render_plot(&spec).unwrap();
            let doc = roxmltree::Document::parse(&svg).unwrap();
            let axis_x = spec.x_axis();
            let axis_y = spec.left_axis();
            let circles: Vec<_> = doc.descendants().filter(|n| n.attribute("class") == Some("point")).collect();
            prop_assert_eq!(circles.len(), ys.len());
            for (i, n) in circles.iter().enumerate() {
                let cx: f64 = n.attribute("cx").unwrap().parse().unwrap();
                let cy: f64 = n.attribute("cy").unwrap().parse().unwrap();
                prop_assert!((axis_x.from_px(cx) - i as f64 / 3.0).abs() * axis_x.length_px / 10.0 <= 1.0);
                prop_assert!((axis_y.from_px(cy) - ys[i]).abs() * axis_y.length_px / 100.0 <= 1.0);
            }
        }
    }
}
