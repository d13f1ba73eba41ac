//! Minimal SVG renderings. Purely presentational; the CSV files are the
//! contract and every plot here is derived from them.

use std::fmt::Write as _;
use std::path::Path;

use easycore::analysis::{BoundaryRaster, Histogram, Projection2d};
use easycore::error::Result;

const PALETTE: &[&str] = &[
    "#4878cf", "#d65f5f", "#6acc65", "#b47cc7", "#c4ad66", "#77bedb", "#4d4d4d", "#f0e442",
];

fn color(class: usize) -> &'static str {
    PALETTE[class % PALETTE.len()]
}

fn document(width: f64, height: f64, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n<rect width=\"{width}\" height=\"{height}\" \
         fill=\"white\"/>\n{body}</svg>\n"
    )
}

/// Line plot of one series over its index.
pub fn write_line_svg<P: AsRef<Path>>(path: P, values: &[f64], title: &str) -> Result<()> {
    let (w, h, margin) = (640.0, 400.0, 48.0);
    let n = values.len().max(2);
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(lo + 1e-9);
    let x = |i: usize| margin + (w - 2.0 * margin) * i as f64 / (n - 1) as f64;
    let y = |v: f64| h - margin - (h - 2.0 * margin) * (v - lo) / (hi - lo);
    let mut points = String::new();
    for (i, &v) in values.iter().enumerate() {
        let _ = write!(points, "{:.2},{:.2} ", x(i), y(v));
    }
    let mut body = String::new();
    let _ = writeln!(
        body,
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\" \
         text-anchor=\"middle\">{title}</text>",
        w / 2.0
    );
    let _ = writeln!(
        body,
        "<polyline points=\"{points}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>",
        color(0)
    );
    let _ = writeln!(
        body,
        "<line x1=\"{margin}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#999\"/>",
        h - margin,
        w - margin,
        h - margin
    );
    std::fs::write(path, document(w, h, &body))?;
    Ok(())
}

/// Bar rendering of a histogram.
pub fn write_histogram_svg<P: AsRef<Path>>(path: P, histogram: &Histogram, title: &str) -> Result<()> {
    let (w, h, margin) = (640.0, 400.0, 48.0);
    let bins = histogram.densities.len().max(1);
    let peak = histogram
        .densities
        .iter()
        .cloned()
        .fold(f64::MIN_POSITIVE, f64::max);
    let bar_w = (w - 2.0 * margin) / bins as f64;
    let mut body = String::new();
    let _ = writeln!(
        body,
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\" \
         text-anchor=\"middle\">{title}</text>",
        w / 2.0
    );
    for (i, &d) in histogram.densities.iter().enumerate() {
        let bar_h = (h - 2.0 * margin) * d / peak;
        let _ = writeln!(
            body,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
            margin + i as f64 * bar_w,
            h - margin - bar_h,
            bar_w.max(1.0) - 1.0,
            bar_h,
            color(0)
        );
    }
    std::fs::write(path, document(w, h, &body))?;
    Ok(())
}

/// Class heatmap of a boundary raster, one rect per cell.
pub fn write_raster_svg<P: AsRef<Path>>(path: P, raster: &BoundaryRaster, title: &str) -> Result<()> {
    let cell = (800.0 / raster.grid.nx.max(raster.grid.ny) as f64).max(1.0);
    let w = cell * raster.grid.nx as f64;
    let h = cell * raster.grid.ny as f64 + 32.0;
    let mut body = String::new();
    let _ = writeln!(
        body,
        "<text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" \
         text-anchor=\"middle\">{title}</text>",
        w / 2.0
    );
    for iy in 0..raster.grid.ny {
        for ix in 0..raster.grid.nx {
            // Flip y so increasing data-y points up.
            let row = raster.grid.ny - 1 - iy;
            let _ = writeln!(
                body,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
                ix as f64 * cell,
                32.0 + row as f64 * cell,
                cell,
                cell,
                color(raster.class_at(ix, iy))
            );
        }
    }
    std::fs::write(path, document(w, h, &body))?;
    Ok(())
}

/// Scatter plot of a 2D projection, colored by class, centroids in black.
pub fn write_projection_svg<P: AsRef<Path>>(
    path: P,
    projection: &Projection2d,
    labels: &[usize],
    title: &str,
) -> Result<()> {
    let (w, h, margin) = (640.0, 640.0, 48.0);
    let xs: Vec<f64> = projection.coords.iter().map(|c| c.0).collect();
    let ys: Vec<f64> = projection.coords.iter().map(|c| c.1).collect();
    let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (x0, x1) = (min(&xs), max(&xs).max(min(&xs) + 1e-9));
    let (y0, y1) = (min(&ys), max(&ys).max(min(&ys) + 1e-9));
    let sx = |v: f64| margin + (w - 2.0 * margin) * (v - x0) / (x1 - x0);
    let sy = |v: f64| h - margin - (h - 2.0 * margin) * (v - y0) / (y1 - y0);
    let mut body = String::new();
    let _ = writeln!(
        body,
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\" \
         text-anchor=\"middle\">{title}</text>",
        w / 2.0
    );
    for (&(px, py), &label) in projection.coords.iter().zip(labels) {
        let _ = writeln!(
            body,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{}\" fill-opacity=\"0.6\"/>",
            sx(px),
            sy(py),
            color(label)
        );
    }
    for &(cx, cy) in &projection.centroids {
        let _ = writeln!(
            body,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"6\" fill=\"black\"/>",
            sx(cx),
            sy(cy)
        );
    }
    std::fs::write(path, document(w, h, &body))?;
    Ok(())
}
