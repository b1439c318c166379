use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{EvalReport, ReportStatus};
use crate::error::{IssError, Result};

/// One plotted bar, mirrored into `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotEntry {
    pub chart: String,
    pub label: String,
    pub status: ReportStatus,
    pub mean: Option<f64>,
    pub ci95: Option<f64>,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotOutput {
    pub files: Vec<PathBuf>,
    pub summary: Vec<PlotEntry>,
}

const BAR: u32 = 48;
const GAP: u32 = 16;
const HEIGHT: u32 = 240;
const MARGIN: u32 = 40;

fn chart_key(r: &EvalReport) -> String {
    format!("{}_{}w{}s", r.protocol.target, r.protocol.ways, r.protocol.shots)
}

fn bar_geometry(i: usize, value: f64) -> (u32, u32) {
    let x = MARGIN + i as u32 * (BAR + GAP);
    let plot_h = (HEIGHT - 2 * MARGIN) as f64;
    (x, HEIGHT - MARGIN - (value.clamp(0.0, 1.0) * plot_h).round() as u32)
}

fn y_of(value: f64) -> u32 {
    bar_geometry(0, value).1
}

fn svg(chart: &str, entries: &[&PlotEntry]) -> String {
    let width = 2 * MARGIN + entries.len() as u32 * (BAR + GAP);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{HEIGHT}\" viewBox=\"0 0 {width} {HEIGHT}\">\n\
         <rect width=\"{width}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{MARGIN}\" y=\"20\" font-family=\"sans-serif\" font-size=\"12\">{chart}</text>\n\
         <line x1=\"{MARGIN}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
        b = HEIGHT - MARGIN,
        r = width - MARGIN,
    );
    for (i, e) in entries.iter().enumerate() {
        let (x, top) = bar_geometry(i, e.mean.unwrap_or(0.0));
        let cx = x + BAR / 2;
        match (e.mean, e.ci95) {
            (Some(m), Some(ci)) => {
                s.push_str(&format!(
                    "<rect x=\"{x}\" y=\"{top}\" width=\"{BAR}\" height=\"{h}\" fill=\"#4c72b0\"/>\n\
                     <line x1=\"{cx}\" y1=\"{lo}\" x2=\"{cx}\" y2=\"{hi}\" stroke=\"black\"/>\n\
                     <text x=\"{cx}\" y=\"{t}\" font-family=\"sans-serif\" font-size=\"9\" text-anchor=\"middle\">{m:.4}</text>\n",
                    h = HEIGHT - MARGIN - top,
                    lo = y_of(m - ci),
                    hi = y_of(m + ci),
                    t = y_of(m + ci).saturating_sub(4),
                ));
            }
            _ => s.push_str(&format!(
                "<text x=\"{cx}\" y=\"{t}\" font-family=\"sans-serif\" font-size=\"9\" text-anchor=\"middle\">N/A</text>\n",
                t = HEIGHT - MARGIN - 4
            )),
        }
        s.push_str(&format!(
            "<text x=\"{cx}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"9\" text-anchor=\"middle\">{}</text>\n",
            e.label,
            y = HEIGHT - MARGIN + 14
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn png(entries: &[&PlotEntry]) -> RgbImage {
    let width = 2 * MARGIN + entries.len() as u32 * (BAR + GAP);
    let mut img: RgbImage = ImageBuffer::from_pixel(width, HEIGHT, Rgb([255, 255, 255]));
    let base = HEIGHT - MARGIN;
    for x in MARGIN..width - MARGIN {
        img.put_pixel(x, base, Rgb([0, 0, 0]));
    }
    for (i, e) in entries.iter().enumerate() {
        let (Some(m), Some(ci)) = (e.mean, e.ci95) else { continue };
        let (x0, top) = bar_geometry(i, m);
        for x in x0..x0 + BAR {
            for y in top..base {
                img.put_pixel(x, y, Rgb([76, 114, 176]));
            }
        }
        let cx = x0 + BAR / 2;
        let (hi, lo) = (y_of(m + ci), y_of(m - ci));
        for y in hi..=lo.min(base) {
            img.put_pixel(cx, y, Rgb([0, 0, 0]));
        }
        for x in cx - 6..=cx + 6 {
            img.put_pixel(x, hi, Rgb([0, 0, 0]));
            img.put_pixel(x, lo.min(base), Rgb([0, 0, 0]));
        }
    }
    img
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect()
}

/// One bar chart (SVG and PNG) per target and episode shape, bars in input
/// order with 95% CI whiskers, plus `summary.json` holding every number.
pub fn emit_plots(reports: &[EvalReport], dir: &Path) -> Result<PlotOutput> {
    if reports.is_empty() {
        return Err(IssError::Validation("no reports to plot".into()));
    }
    fs::create_dir_all(dir).map_err(|e| IssError::io(dir, e))?;
    let summary: Vec<PlotEntry> = reports
        .iter()
        .map(|r| PlotEntry {
            chart: chart_key(r),
            label: r.label.clone(),
            status: r.status,
            mean: r.mean,
            ci95: r.ci95,
            fingerprint: r.fingerprint.clone(),
        })
        .collect();
    let mut charts: BTreeMap<&str, Vec<&PlotEntry>> = BTreeMap::new();
    for e in &summary {
        charts.entry(e.chart.as_str()).or_default().push(e);
    }
    let mut files = Vec::new();
    for (chart, entries) in &charts {
        let stem = sanitize(chart);
        let svg_path = dir.join(format!("{stem}.svg"));
        fs::write(&svg_path, svg(chart, entries)).map_err(|e| IssError::io(&svg_path, e))?;
        let png_path = dir.join(format!("{stem}.png"));
        png(entries).save(&png_path).map_err(|source| IssError::Image { path: png_path.clone(), source })?;
        files.push(svg_path);
        files.push(png_path);
    }
    let summary_path = dir.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)?).map_err(|e| IssError::io(&summary_path, e))?;
    files.push(summary_path);
    Ok(PlotOutput { files, summary })
}
