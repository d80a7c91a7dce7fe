//! Minimal line-plot rendering to PNG (display-only output).
//!
//! No text: axes, a light grid, and one colored polyline per series. Used
//! by the `plot` CLI subcommand for loss curves and RMSE-vs-density
//! sweeps.

use std::path::Path;

use crate::data::{write_rgb_png, RGBImage};
use crate::error::{Result, SignetError};

/// One polyline.
#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [[f64; 3]; 5] = [
    [0.84, 0.23, 0.19],
    [0.17, 0.41, 0.69],
    [0.20, 0.62, 0.28],
    [0.85, 0.56, 0.10],
    [0.48, 0.25, 0.62],
];

struct Canvas {
    px: Vec<f64>, // 3 planes
    h: usize,
    w: usize,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Canvas {
            px: vec![1.0; 3 * h * w],
            h,
            w,
        }
    }

    fn set(&mut self, y: i64, x: i64, color: [f64; 3]) {
        if y < 0 || x < 0 || y >= self.h as i64 || x >= self.w as i64 {
            return;
        }
        let (y, x) = (y as usize, x as usize);
        for c in 0..3 {
            self.px[c * self.h * self.w + y * self.w + x] = color[c];
        }
    }

    fn line(&mut self, y0: f64, x0: f64, y1: f64, x1: f64, color: [f64; 3]) {
        let steps = ((y1 - y0).abs().max((x1 - x0).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let y = y0 + (y1 - y0) * t;
            let x = x0 + (x1 - x0) * t;
            // 2x2 dot so lines read at small sizes
            for dy in 0..2 {
                for dx in 0..2 {
                    self.set(y.round() as i64 + dy, x.round() as i64 + dx, color);
                }
            }
        }
    }
}

/// Renders the series into an RGB image with axes and a light grid.
pub fn render_line_plot(series: &[Series], height: usize, width: usize) -> Result<RGBImage> {
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(SignetError::EmptyInput {
            context: "nothing to plot".into(),
        });
    }
    let margin = 24.0;
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &(x, y) in &s.points {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
    }
    if xmax == xmin {
        xmax = xmin + 1.0;
    }
    if ymax == ymin {
        ymax = ymin + 1.0;
    }

    let mut canvas = Canvas::new(height, width);
    let to_px = |x: f64, y: f64| -> (f64, f64) {
        let fx = (x - xmin) / (xmax - xmin);
        let fy = (y - ymin) / (ymax - ymin);
        (
            (height as f64 - margin) - fy * (height as f64 - 2.0 * margin),
            margin + fx * (width as f64 - 2.0 * margin),
        )
    };

    // grid
    let grid = [0.9, 0.9, 0.9];
    for i in 1..5 {
        let gx = margin + i as f64 / 5.0 * (width as f64 - 2.0 * margin);
        let gy = margin + i as f64 / 5.0 * (height as f64 - 2.0 * margin);
        canvas.line(margin, gx, height as f64 - margin, gx, grid);
        canvas.line(gy, margin, gy, width as f64 - margin, grid);
    }
    // axes
    let axis = [0.25, 0.25, 0.25];
    canvas.line(margin, margin, height as f64 - margin, margin, axis);
    canvas.line(
        height as f64 - margin,
        margin,
        height as f64 - margin,
        width as f64 - margin,
        axis,
    );

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for pair in s.points.windows(2) {
            let (y0, x0) = to_px(pair[0].0, pair[0].1);
            let (y1, x1) = to_px(pair[1].0, pair[1].1);
            canvas.line(y0, x0, y1, x1, color);
        }
    }
    RGBImage::new(canvas.h, canvas.w, canvas.px)
}

/// Parses a training-log CSV (step,epoch,l_r_mm,l_d_mm,l_t_mm) and plots
/// the three loss curves.
pub fn plot_training_log(csv: &str, out: impl AsRef<Path>) -> Result<()> {
    let mut lr = Vec::new();
    let mut ld = Vec::new();
    let mut lt = Vec::new();
    for (i, line) in csv.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(SignetError::Config(format!(
                "log line {} has {} fields, expected 5",
                i + 1,
                fields.len()
            )));
        }
        let step: f64 = fields[0].parse().map_err(|_| {
            SignetError::Config(format!("bad step value {:?}", fields[0]))
        })?;
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| SignetError::Config(format!("bad loss value {s:?}")))
        };
        lr.push((step, parse(fields[2])?));
        ld.push((step, parse(fields[3])?));
        lt.push((step, parse(fields[4])?));
    }
    let img = render_line_plot(
        &[
            Series {
                label: "l_r".into(),
                points: lr,
            },
            Series {
                label: "l_d".into(),
                points: ld,
            },
            Series {
                label: "l_t".into(),
                points: lt,
            },
        ],
        360,
        640,
    )?;
    write_rgb_png(&img, out)
}

/// Plots aggregate RMSE against density from an evaluation CSV.
pub fn plot_rmse_vs_density(csv: &str, out: impl AsRef<Path>) -> Result<()> {
    let mut points = Vec::new();
    for (i, line) in csv.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() >= 3 && fields[1] == "aggregate" {
            let density: f64 = fields[0].parse().map_err(|_| {
                SignetError::Config(format!("bad density {:?}", fields[0]))
            })?;
            let rmse: f64 = fields[2].parse().map_err(|_| {
                SignetError::Config(format!("bad rmse {:?}", fields[2]))
            })?;
            points.push((density, rmse));
        }
    }
    let img = render_line_plot(
        &[Series {
            label: "rmse".into(),
            points,
        }],
        360,
        640,
    )?;
    write_rgb_png(&img, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_and_saves() {
        let series = vec![Series {
            label: "a".into(),
            points: (0..50).map(|i| (i as f64, (i as f64 * 0.3).sin())).collect(),
        }];
        let img = render_line_plot(&series, 120, 240).unwrap();
        assert_eq!((img.height(), img.width()), (120, 240));
        let dir = std::env::temp_dir().join("signet-plot-tests");
        std::fs::create_dir_all(&dir).unwrap();
        write_rgb_png(&img, dir.join("curve.png")).unwrap();
    }

    #[test]
    fn empty_series_is_error() {
        assert!(render_line_plot(&[], 100, 100).is_err());
    }

    #[test]
    fn training_log_parses() {
        let csv = "step,epoch,l_r_mm,l_d_mm,l_t_mm\n1,0,100,50,105\n2,0,90,40,94\n";
        let dir = std::env::temp_dir().join("signet-plot-tests");
        std::fs::create_dir_all(&dir).unwrap();
        plot_training_log(csv, dir.join("log.png")).unwrap();
    }
}
