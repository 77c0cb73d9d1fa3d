//! Per-frame derived features and growth analytics over a run.

use super::distance::gap;
use super::shape::{classify_shape, ShapeClass, ShapeThresholds};
use crate::imaging::MaskU8;
use rayon::prelude::*;
use serde::Serialize;

/// One time-series row: pixel areas, diamond-to-pocket gap, shape evidence,
/// and first-difference growth rates against the previous frame.
///
/// Optional fields are absent when the frame lacks the regions they need;
/// `flags` records why. Rows are never dropped.
#[derive(Debug, Clone, Serialize)]
pub struct FeatureRow {
    pub timestamp_min: u32,
    pub area_top: u64,
    pub area_side: u64,
    pub area_pocket: u64,
    /// Top and side together.
    pub area_diamond: u64,
    pub gap_min: Option<f64>,
    pub gap_mean: Option<f64>,
    pub shape: Option<ShapeClass>,
    pub circularity: Option<f64>,
    pub vertices: Option<usize>,
    pub area_top_rate: Option<f64>,
    pub area_side_rate: Option<f64>,
    pub area_diamond_rate: Option<f64>,
    pub flags: Vec<&'static str>,
}

pub const FEATURES_CSV_HEADER: &str = "timestamp_min,area_top,area_side,area_pocket,\
area_diamond,gap_min,gap_mean,shape,circularity,vertices,area_top_rate,area_side_rate,\
area_diamond_rate,flags";

/// Extracts the feature time series for a run of predicted (or ground-truth)
/// masks. Frames are independent and processed in parallel; output order
/// follows input order. Per-frame failures (a missing region on a degenerate
/// frame) become row flags, never errors.
pub fn run_features(frames: &[(u32, MaskU8)], thresholds: &ShapeThresholds) -> Vec<FeatureRow> {
    let mut rows: Vec<FeatureRow> = frames
        .par_iter()
        .map(|(t, mask)| frame_features(*t, mask, thresholds))
        .collect();

    for i in 1..rows.len() {
        let dt = f64::from(rows[i].timestamp_min) - f64::from(rows[i - 1].timestamp_min);
        if dt <= 0.0 {
            continue;
        }
        let d_top = rows[i].area_top as f64 - rows[i - 1].area_top as f64;
        let d_side = rows[i].area_side as f64 - rows[i - 1].area_side as f64;
        let d_diamond = rows[i].area_diamond as f64 - rows[i - 1].area_diamond as f64;
        rows[i].area_top_rate = Some(d_top / dt);
        rows[i].area_side_rate = Some(d_side / dt);
        rows[i].area_diamond_rate = Some(d_diamond / dt);
    }
    rows
}

fn frame_features(timestamp_min: u32, mask: &MaskU8, thresholds: &ShapeThresholds) -> FeatureRow {
    let counts = mask.class_counts();
    let (area_pocket, area_top, area_side) =
        (counts[1] as u64, counts[2] as u64, counts[3] as u64);

    let mut flags = Vec::new();
    if area_top + area_side == 0 {
        flags.push("no_diamond");
    }
    if area_pocket == 0 {
        flags.push("no_pocket");
    }
    if area_top == 0 {
        flags.push("no_top");
    }

    let (gap_min, gap_mean) = match gap(mask) {
        Ok(stats) => (Some(stats.gap_min), Some(stats.gap_mean)),
        Err(_) => (None, None),
    };
    let (shape, circularity, vertices) = match classify_shape(mask, thresholds) {
        Ok(d) => (Some(d.class), Some(d.circularity), Some(d.vertices)),
        Err(_) => (None, None, None),
    };

    FeatureRow {
        timestamp_min,
        area_top,
        area_side,
        area_pocket,
        area_diamond: area_top + area_side,
        gap_min,
        gap_mean,
        shape,
        circularity,
        vertices,
        area_top_rate: None,
        area_side_rate: None,
        area_diamond_rate: None,
        flags,
    }
}

fn opt_num<T: std::fmt::Display>(v: &Option<T>, precision: usize) -> String {
    match v {
        Some(x) => format!("{x:.precision$}"),
        None => String::new(),
    }
}

/// Serializes the rows as CSV under [`FEATURES_CSV_HEADER`]. Absent values
/// are empty cells; an empty flag list is written as `-`.
pub fn features_csv(rows: &[FeatureRow]) -> String {
    let mut out = String::from(FEATURES_CSV_HEADER);
    out.push('\n');
    for row in rows {
        let shape = row.shape.map(|s| s.as_str()).unwrap_or("");
        let vertices = row
            .vertices
            .map(|v| v.to_string())
            .unwrap_or_default();
        let flags = if row.flags.is_empty() {
            "-".to_string()
        } else {
            row.flags.join(";")
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.timestamp_min,
            row.area_top,
            row.area_side,
            row.area_pocket,
            row.area_diamond,
            opt_num(&row.gap_min, 3),
            opt_num(&row.gap_mean, 3),
            shape,
            opt_num(&row.circularity, 4),
            vertices,
            opt_num(&row.area_top_rate, 3),
            opt_num(&row.area_side_rate, 3),
            opt_num(&row.area_diamond_rate, 3),
            flags,
        ));
    }
    out
}

/// Least-squares line fit. `None` with fewer than two distinct x values.
pub fn fit_line(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom == 0.0 {
        return None;
    }
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    Some((slope, intercept))
}

const CHART_W: f64 = 720.0;
const CHART_H: f64 = 400.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 24.0;
const MARGIN_B: f64 = 44.0;

/// Renders the area time series (top, side, and their union) as a
/// self-contained SVG line chart.
pub fn svg_area_chart(rows: &[FeatureRow]) -> String {
    let series: [(&str, &str, Vec<(f64, f64)>); 3] = [
        (
            "diamond",
            "#1f77b4",
            rows.iter()
                .map(|r| (f64::from(r.timestamp_min), r.area_diamond as f64))
                .collect(),
        ),
        (
            "top",
            "#2ca02c",
            rows.iter()
                .map(|r| (f64::from(r.timestamp_min), r.area_top as f64))
                .collect(),
        ),
        (
            "side",
            "#d62728",
            rows.iter()
                .map(|r| (f64::from(r.timestamp_min), r.area_side as f64))
                .collect(),
        ),
    ];

    let xs: Vec<f64> = rows.iter().map(|r| f64::from(r.timestamp_min)).collect();
    let (x_min, x_max) = bounds(&xs);
    let ys: Vec<f64> = series
        .iter()
        .flat_map(|(_, _, pts)| pts.iter().map(|p| p.1))
        .collect();
    let (y_min, y_max) = bounds(&ys);
    let x_span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let y_span = if y_max > y_min { y_max - y_min } else { 1.0 };

    let px = |x: f64| MARGIN_L + (x - x_min) / x_span * (CHART_W - MARGIN_L - MARGIN_R);
    let py = |y: f64| CHART_H - MARGIN_B - (y - y_min) / y_span * (CHART_H - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {CHART_W} {CHART_H}\" \
         width=\"{CHART_W}\" height=\"{CHART_H}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
        l = MARGIN_L,
        t = MARGIN_T,
        b = CHART_H - MARGIN_B,
        r = CHART_W - MARGIN_R,
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\">{x_min:.0}</text>\n",
        MARGIN_L,
        CHART_H - MARGIN_B + 16.0
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{x_max:.0}</text>\n",
        CHART_W - MARGIN_R,
        CHART_H - MARGIN_B + 16.0
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{y_min:.0}</text>\n",
        MARGIN_L - 6.0,
        CHART_H - MARGIN_B
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{y_max:.0}</text>\n",
        MARGIN_L - 6.0,
        MARGIN_T + 10.0
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\">area (px) vs time (min)</text>\n",
        MARGIN_L,
        MARGIN_T - 8.0
    ));

    for (i, (name, color, pts)) in series.iter().enumerate() {
        if !pts.is_empty() {
            let path: Vec<String> = pts
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                path.join(" ")
            ));
        }
        let ly = MARGIN_T + 14.0 * (i as f64 + 1.0);
        svg.push_str(&format!(
            "<rect x=\"{x}\" y=\"{y}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\
             <text x=\"{tx}\" y=\"{ty}\" font-size=\"12\">{name}</text>\n",
            x = CHART_W - MARGIN_R - 90.0,
            y = ly - 9.0,
            tx = CHART_W - MARGIN_R - 76.0,
            ty = ly
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn bounds(values: &[f64]) -> (f64, f64) {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in values {
        min = min.min(v);
        max = max.max(v);
    }
    if min.is_finite() {
        (min, max)
    } else {
        (0.0, 1.0)
    }
}
