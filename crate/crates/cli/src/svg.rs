//! Minimal SVG line charts for the report: dated series on shared axes with
//! optional shaded spans.

use std::fmt::Write;

use chrono::{Datelike, NaiveDate};

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 360.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 40.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    /// Points with missing values are skipped and break the line.
    pub points: Vec<(NaiveDate, Option<f64>)>,
}

#[derive(Debug, Clone, Default)]
pub struct LineChart {
    pub title: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Date ranges drawn as shaded bands behind the lines.
    pub shaded: Vec<(NaiveDate, NaiveDate)>,
    pub shade_label: Option<String>,
}

fn days(d: NaiveDate) -> f64 {
    d.num_days_from_ce() as f64
}

/// Rounded tick step giving about `target` intervals over `span`.
fn tick_step(span: f64, target: f64) -> f64 {
    let raw = span / target;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let nice = if norm < 1.5 {
        1.0
    } else if norm < 3.0 {
        2.0
    } else if norm < 7.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl LineChart {
    pub fn render(&self) -> String {
        let values = self.series.iter().flat_map(|s| s.points.iter().filter_map(|p| p.1));
        let (mut lo, mut hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let dates: Vec<NaiveDate> = self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
        let (first, last) = match (dates.iter().min(), dates.iter().max()) {
            (Some(a), Some(b)) => (*a, *b),
            _ => return self.empty(),
        };
        if !lo.is_finite() {
            return self.empty();
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        let pad = 0.05 * (hi - lo);
        let (lo, hi) = (lo - pad, hi + pad);
        let (x0, x1) = (days(first), days(last).max(days(first) + 1.0));
        let plot_w = WIDTH - LEFT - RIGHT;
        let plot_h = HEIGHT - TOP - BOTTOM;
        let sx = |d: NaiveDate| LEFT + (days(d) - x0) / (x1 - x0) * plot_w;
        let sy = |v: f64| TOP + (hi - v) / (hi - lo) * plot_h;

        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="22" font-size="14" text-anchor="middle">{}</text>"#,
            WIDTH / 2.0,
            escape(&self.title)
        );
        for (a, b) in &self.shaded {
            let (xa, xb) = (sx(*a), sx(*b));
            let _ = writeln!(
                out,
                r##"<rect x="{xa:.1}" y="{TOP}" width="{:.1}" height="{plot_h}" fill="#999999" fill-opacity="0.2"/>"##,
                (xb - xa).max(1.0)
            );
        }
        let step = tick_step(hi - lo, 5.0);
        let mut tick = (lo / step).ceil() * step;
        while tick <= hi {
            let y = sy(tick);
            let _ = writeln!(
                out,
                r##"<line x1="{LEFT}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#e0e0e0"/>"##,
                LEFT + plot_w
            );
            let _ = writeln!(
                out,
                r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
                LEFT - 6.0,
                y + 4.0,
                fmt_tick(tick, step)
            );
            tick += step;
        }
        for year in first.year()..=last.year() + 1 {
            let Some(d) = NaiveDate::from_ymd_opt(year, 1, 1) else { continue };
            if d < first || d > last {
                continue;
            }
            let x = sx(d);
            let _ =
                writeln!(out, r##"<line x1="{x:.1}" y1="{TOP}" x2="{x:.1}" y2="{}" stroke="#e0e0e0"/>"##, TOP + plot_h);
            let _ = writeln!(out, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{year}</text>"#, TOP + plot_h + 16.0);
        }
        let _ = writeln!(
            out,
            r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            out,
            r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
            TOP + plot_h / 2.0,
            escape(&self.y_label)
        );
        for (k, s) in self.series.iter().enumerate() {
            let colour = PALETTE[k % PALETTE.len()];
            let mut path = String::new();
            let mut pen_down = false;
            for (d, v) in &s.points {
                match v {
                    Some(v) => {
                        let _ = write!(path, "{}{:.1},{:.1} ", if pen_down { "L" } else { "M" }, sx(*d), sy(*v));
                        pen_down = true;
                    }
                    None => pen_down = false,
                }
            }
            let _ =
                writeln!(out, r#"<path d="{}" fill="none" stroke="{colour}" stroke-width="1.2"/>"#, path.trim_end());
            let ly = TOP + 14.0 * k as f64 + 8.0;
            let lx = LEFT + plot_w + 12.0;
            let _ = writeln!(
                out,
                r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"/>"#,
                lx + 18.0
            );
            let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, lx + 24.0, ly + 4.0, escape(&s.name));
        }
        if let Some(label) = &self.shade_label {
            let ly = TOP + 14.0 * self.series.len() as f64 + 8.0;
            let lx = LEFT + plot_w + 12.0;
            let _ = writeln!(
                out,
                r##"<rect x="{lx}" y="{}" width="18" height="10" fill="#999999" fill-opacity="0.3"/>"##,
                ly - 5.0
            );
            let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, lx + 24.0, ly + 4.0, escape(label));
        }
        out.push_str("</svg>\n");
        out
    }

    fn empty(&self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"60\"><text x=\"10\" y=\"30\">{}: no data</text></svg>\n",
            escape(&self.title)
        )
    }
}

fn fmt_tick(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 { 0 } else { (-step.log10().floor()) as usize };
    let v = if v.abs() < step * 1e-9 { 0.0 } else { v };
    format!("{v:.decimals$}")
}

/// Maximal runs of consecutive flagged dates, each ending at the last
/// flagged date of the run.
pub fn spans(dates: &[NaiveDate], flagged: &[bool]) -> Vec<(NaiveDate, NaiveDate)> {
    let mut out = Vec::new();
    let mut start: Option<NaiveDate> = None;
    for (i, (&d, &f)) in dates.iter().zip(flagged).enumerate() {
        if f && start.is_none() {
            start = Some(d);
        }
        if !f {
            if let Some(s) = start.take() {
                out.push((s, dates[i - 1]));
            }
        }
    }
    if let (Some(s), Some(&e)) = (start, dates.last()) {
        out.push((s, e));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 1, day).unwrap()
    }

    #[test]
    fn spans_cover_runs() {
        let dates: Vec<_> = (1..=6).map(d).collect();
        let s = spans(&dates, &[false, true, true, false, true, true]);
        assert_eq!(s, vec![(d(2), d(3)), (d(5), d(6))]);
    }

    #[test]
    fn chart_has_one_path_per_series() {
        let chart = LineChart {
            title: "a < b".into(),
            y_label: "%".into(),
            series: vec![
                Series { name: "x".into(), points: vec![(d(1), Some(1.0)), (d(2), None), (d(3), Some(2.0))] },
                Series { name: "y".into(), points: vec![(d(1), Some(0.5)), (d(3), Some(0.7))] },
            ],
            shaded: vec![(d(2), d(3))],
            shade_label: Some("H".into()),
        };
        let svg = chart.render();
        assert_eq!(svg.matches("<path").count(), 2);
        assert!(svg.contains("a &lt; b"));
        assert!(svg.contains("M") && svg.ends_with("</svg>\n"));
    }
}
