//! Minimal deterministic line plots rendered straight into PNG buffers.
//! Series metadata goes in a JSON sidecar instead of in-image text.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{LofaError, Result};

const PALETTE: [[u8; 3]; 6] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Render line series into `path` (PNG) with an axes box; writes
/// `<path>.json` describing labels, colors and data ranges.
pub fn line_plot(series: &[Series], path: &Path) -> Result<()> {
    let (w, h) = (640u32, 420u32);
    let margin = 40i64;
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));

    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if all.is_empty() {
        return Err(LofaError::Argument("line_plot with no points".into()));
    }
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &all {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| -> i64 {
        margin + ((x - x0) / (x1 - x0) * (w as i64 - 2 * margin) as f64) as i64
    };
    let py = |y: f64| -> i64 {
        (h as i64 - margin) - ((y - y0) / (y1 - y0) * (h as i64 - 2 * margin) as f64) as i64
    };

    let mut draw = |xa: i64, ya: i64, xb: i64, yb: i64, color: Rgb<u8>, img: &mut RgbImage| {
        let steps = (xb - xa).abs().max((yb - ya).abs()).max(1);
        for s in 0..=steps {
            let x = xa + (xb - xa) * s / steps;
            let y = ya + (yb - ya) * s / steps;
            if x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    };

    // axes box
    let box_color = Rgb([120, 120, 120]);
    draw(margin, margin, w as i64 - margin, margin, box_color, &mut img);
    draw(
        margin,
        h as i64 - margin,
        w as i64 - margin,
        h as i64 - margin,
        box_color,
        &mut img,
    );
    draw(margin, margin, margin, h as i64 - margin, box_color, &mut img);
    draw(
        w as i64 - margin,
        margin,
        w as i64 - margin,
        h as i64 - margin,
        box_color,
        &mut img,
    );

    let mut legend = Vec::new();
    for (i, s) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let color = Rgb(c);
        for pair in s.points.windows(2) {
            draw(
                px(pair[0].0),
                py(pair[0].1),
                px(pair[1].0),
                py(pair[1].1),
                color,
                &mut img,
            );
        }
        for (x, y) in &s.points {
            let (cx, cy) = (px(*x), py(*y));
            for dx in -2i64..=2 {
                for dy in -2i64..=2 {
                    if dx * dx + dy * dy <= 4 {
                        let (x, y) = (cx + dx, cy + dy);
                        if x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h {
                            img.put_pixel(x as u32, y as u32, color);
                        }
                    }
                }
            }
        }
        legend.push(serde_json::json!({
            "label": s.label,
            "color": format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2]),
            "points": s.points,
        }));
    }

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    img.save(path).map_err(|e| LofaError::Format {
        what: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let sidecar = serde_json::json!({
        "x_range": [x0, x1],
        "y_range": [y0, y1],
        "series": legend,
    });
    std::fs::write(
        path.with_extension("png.json"),
        serde_json::to_vec_pretty(&sidecar)?,
    )?;
    Ok(())
}
