//! Dependency-free SVG line charts of error-vs-step curves.
//!
//! One polyline per recorded subtask series, log-scaled y axis, fully
//! self-contained output. The bytes are a pure function of the metrics, so
//! identical runs produce identical plots.

use std::fmt;

use scalereg_core::harness::RunMetrics;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 50.0;

const SERIES_COLORS: [&str; 3] = ["#1f77b4", "#d62728", "#2ca02c"];

#[derive(Debug)]
pub enum PlotError {
    /// A line chart needs at least two evaluation records.
    TooFewRecords { got: usize },
}

impl fmt::Display for PlotError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::TooFewRecords { got } => {
                write!(f, "need at least 2 evaluation records to plot, got {got}")
            }
        }
    }
}

impl std::error::Error for PlotError {}

struct Series<'a> {
    label: &'a str,
    points: Vec<(f64, f64)>, // (step, error)
}

/// The SVG document for a run's error curves.
pub fn render_svg(metrics: &RunMetrics<f64>) -> Result<String, PlotError> {
    if metrics.records.len() < 2 {
        return Err(PlotError::TooFewRecords {
            got: metrics.records.len(),
        });
    }

    let mut series = Vec::new();
    let collect = |f: &dyn Fn(&scalereg_core::harness::EvalRecord<f64>) -> Option<f64>| {
        metrics
            .records
            .iter()
            .filter_map(|r| f(r).map(|e| (r.step as f64, e)))
            .collect::<Vec<_>>()
    };
    let a = collect(&|r| r.error_a);
    if !a.is_empty() {
        series.push(Series { label: "subtask A", points: a });
    }
    let b = collect(&|r| r.error_b);
    if !b.is_empty() {
        series.push(Series { label: "subtask B", points: b });
    }
    series.push(Series {
        label: "combined",
        points: collect(&|r| Some(r.error_combined)),
    });

    // Log-scale y: clamp non-positive and non-finite errors to the smallest
    // positive value seen so the transform stays defined.
    let positive_floor = series
        .iter()
        .flat_map(|s| s.points.iter().map(|&(_, e)| e))
        .filter(|e| e.is_finite() && *e > 0.0)
        .fold(f64::INFINITY, f64::min);
    let floor = if positive_floor.is_finite() {
        positive_floor / 10.0
    } else {
        1e-12
    };
    let clamp = |e: f64| if e.is_finite() && e > 0.0 { e } else { floor };

    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut x_lo, mut x_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in &series {
        for &(x, e) in &s.points {
            let y = clamp(e).log10();
            y_lo = y_lo.min(y);
            y_hi = y_hi.max(y);
            x_lo = x_lo.min(x);
            x_hi = x_hi.max(x);
        }
    }
    if y_hi - y_lo < 1e-9 {
        y_lo -= 0.5;
        y_hi += 0.5;
    }
    if x_hi - x_lo < 1e-9 {
        x_hi = x_lo + 1.0;
    }

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let sy = |e: f64| {
        let y = clamp(e).log10();
        MARGIN_TOP + (y_hi - y) / (y_hi - y_lo) * plot_h
    };

    let mut svg = String::new();
    svg.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">{} lr={:?} \
         prediction error vs training step</text>\n",
        MARGIN_LEFT,
        metrics.objective,
        metrics.lr
    ));

    // Axes.
    let x_axis_y = MARGIN_TOP + plot_h;
    svg.push_str(&format!(
        "  <line x1=\"{MARGIN_LEFT:.2}\" y1=\"{x_axis_y:.2}\" x2=\"{:.2}\" y2=\"{x_axis_y:.2}\" \
         stroke=\"black\"/>\n",
        MARGIN_LEFT + plot_w
    ));
    svg.push_str(&format!(
        "  <line x1=\"{MARGIN_LEFT:.2}\" y1=\"{MARGIN_TOP:.2}\" x2=\"{MARGIN_LEFT:.2}\" \
         y2=\"{x_axis_y:.2}\" stroke=\"black\"/>\n"
    ));

    // y ticks at integer powers of ten.
    let lo_tick = y_lo.floor() as i64;
    let hi_tick = y_hi.ceil() as i64;
    let tick_stride = (((hi_tick - lo_tick) as f64 / 6.0).ceil() as i64).max(1);
    let mut tick = lo_tick;
    while tick <= hi_tick {
        let y = MARGIN_TOP + (y_hi - tick as f64) / (y_hi - y_lo) * plot_h;
        if (MARGIN_TOP - 1.0..=x_axis_y + 1.0).contains(&y) {
            svg.push_str(&format!(
                "  <line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" \
                 stroke=\"#cccccc\" stroke-dasharray=\"3,3\"/>\n",
                MARGIN_LEFT,
                MARGIN_LEFT + plot_w
            ));
            svg.push_str(&format!(
                "  <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" \
                 text-anchor=\"end\">1e{tick}</text>\n",
                MARGIN_LEFT - 6.0,
                y + 4.0
            ));
        }
        tick += tick_stride;
    }

    // x ticks: first, middle, last step.
    for frac in [0.0, 0.5, 1.0] {
        let x_val = x_lo + frac * (x_hi - x_lo);
        let x = sx(x_val);
        svg.push_str(&format!(
            "  <line x1=\"{x:.2}\" y1=\"{x_axis_y:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" \
             stroke=\"black\"/>\n",
            x_axis_y + 5.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{x:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"middle\">{}</text>\n",
            x_axis_y + 18.0,
            x_val.round() as i64
        ));
    }
    svg.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" \
         text-anchor=\"middle\">training step</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 12.0
    ));
    svg.push_str(&format!(
        "  <text x=\"16\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"12\" \
         transform=\"rotate(-90 16 {:.2})\" text-anchor=\"middle\">mean squared error</text>\n",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    ));

    // Data series.
    for (i, s) in series.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        let points: Vec<String> = s
            .points
            .iter()
            .map(|&(x, e)| format!("{:.2},{:.2}", sx(x), sy(e)))
            .collect();
        svg.push_str(&format!(
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        let legend_y = MARGIN_TOP + 14.0 + 18.0 * i as f64;
        svg.push_str(&format!(
            "  <line x1=\"{:.2}\" y1=\"{legend_y:.2}\" x2=\"{:.2}\" y2=\"{legend_y:.2}\" \
             stroke=\"{color}\" stroke-width=\"2\"/>\n",
            WIDTH - MARGIN_RIGHT + 10.0,
            WIDTH - MARGIN_RIGHT + 34.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            WIDTH - MARGIN_RIGHT + 40.0,
            legend_y + 4.0,
            s.label
        ));
    }

    svg.push_str("</svg>\n");
    Ok(svg)
}
