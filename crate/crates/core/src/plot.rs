//! Metric-vs-x curves (mean with a ±1 sample-standard-deviation band) from
//! a set of reports, written as CSV and PNG.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Report fields picked up as metrics when present.
pub const METRICS: [&str; 4] = ["mean_accuracy", "detection_rate", "false_positive_rate", "mean_jaccard"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub metric: String,
    pub x: f64,
    pub mean: f64,
    /// Sample standard deviation (n − 1); 0 for a single value.
    pub std: f64,
    pub n: usize,
}

/// Known metric values of one report file (a metrics report or a run summary).
pub fn read_metrics(path: &Path) -> Result<BTreeMap<String, f64>> {
    let v: serde_json::Value = crate::io::read_json(path)?;
    let out: BTreeMap<String, f64> = METRICS
        .iter()
        .filter_map(|&m| v.get(m).and_then(|x| x.as_f64()).map(|x| (m.to_owned(), x)))
        .collect();
    if out.is_empty() {
        return Err(Error::Data(format!("{} holds none of the known metrics", path.display())));
    }
    Ok(out)
}

/// Groups values by `(metric, x)` and reduces them to mean and sample std.
pub fn aggregate(points: &[(f64, BTreeMap<String, f64>)]) -> Result<Vec<CurvePoint>> {
    if points.is_empty() {
        return Err(Error::Param("nothing to plot".into()));
    }
    let mut groups: BTreeMap<(String, u64), (f64, Vec<f64>)> = BTreeMap::new();
    for (x, metrics) in points {
        if !x.is_finite() {
            return Err(Error::Param(format!("x value {x} is not finite")));
        }
        for (m, &v) in metrics {
            // Keyed so that the map iterates in ascending x.
            let key = (m.clone(), order_key(*x));
            groups.entry(key).or_insert((*x, Vec::new())).1.push(v);
        }
    }
    Ok(groups
        .into_iter()
        .map(|((metric, _), (x, vals))| {
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            CurvePoint { metric, x, mean, std, n }
        })
        .collect())
}

fn order_key(x: f64) -> u64 {
    let b = x.to_bits();
    if x.is_sign_negative() {
        !b
    } else {
        b | (1 << 63)
    }
}

pub fn write_csv(curves: &[CurvePoint], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        crate::io::ensure_dir(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for c in curves {
        w.serialize(c)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Pixel mapping of a plot panel.
#[derive(Debug, Clone, Copy)]
pub struct Frame {
    pub width: u32,
    pub height: u32,
    pub margin: u32,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

impl Frame {
    pub fn fit(curve: &[CurvePoint], width: u32, height: u32) -> Self {
        let pad = |lo: f64, hi: f64| {
            if hi > lo {
                let d = 0.05 * (hi - lo);
                (lo - d, hi + d)
            } else {
                (lo - 1.0, hi + 1.0)
            }
        };
        let xs = curve.iter().map(|c| c.x);
        let x_range = pad(xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max));
        let lo = curve.iter().map(|c| c.mean - c.std).fold(f64::INFINITY, f64::min);
        let hi = curve.iter().map(|c| c.mean + c.std).fold(f64::NEG_INFINITY, f64::max);
        Self {
            width,
            height,
            margin: 30,
            x_range,
            y_range: pad(lo, hi),
        }
    }

    pub fn map(&self, x: f64, y: f64) -> (i64, i64) {
        let w = (self.width - 2 * self.margin) as f64;
        let h = (self.height - 2 * self.margin) as f64;
        let px = self.margin as f64 + (x - self.x_range.0) / (self.x_range.1 - self.x_range.0) * w;
        let py = (self.height - self.margin) as f64 - (y - self.y_range.0) / (self.y_range.1 - self.y_range.0) * h;
        (px.round() as i64, py.round() as i64)
    }
}

pub const CURVE: Rgb<u8> = Rgb([20, 60, 160]);
pub const BAND: Rgb<u8> = Rgb([190, 205, 240]);
const AXIS: Rgb<u8> = Rgb([0, 0, 0]);

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        put(img, x0 + ((x1 - x0) as f64 * t).round() as i64, y0 + ((y1 - y0) as f64 * t).round() as i64, c);
    }
}

/// Draws one metric's curve (points sorted by x).
pub fn render(curve: &[CurvePoint], width: u32, height: u32) -> (RgbImage, Frame) {
    let frame = Frame::fit(curve, width, height);
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    // Band: vertical spans interpolated between neighbouring points.
    let band_at = |a: &CurvePoint, b: &CurvePoint, px: i64| {
        let (xa, _) = frame.map(a.x, a.mean);
        let (xb, _) = frame.map(b.x, b.mean);
        let t = if xb == xa { 0.0 } else { (px - xa) as f64 / (xb - xa) as f64 };
        let lo = a.mean - a.std + t * ((b.mean - b.std) - (a.mean - a.std));
        let hi = a.mean + a.std + t * ((b.mean + b.std) - (a.mean + a.std));
        (frame.map(a.x, hi).1, frame.map(a.x, lo).1)
    };
    let segments: Vec<(&CurvePoint, &CurvePoint)> = if curve.len() == 1 {
        vec![(&curve[0], &curve[0])]
    } else {
        curve.windows(2).map(|w| (&w[0], &w[1])).collect()
    };
    for (a, b) in &segments {
        let (xa, _) = frame.map(a.x, a.mean);
        let (xb, _) = frame.map(b.x, b.mean);
        for px in xa..=xb {
            let (top, bottom) = band_at(a, b, px);
            for py in top..=bottom {
                put(&mut img, px, py, BAND);
            }
        }
    }
    let m = frame.margin as i64;
    let (w, h) = (width as i64, height as i64);
    line(&mut img, (m, h - m), (w - m, h - m), AXIS);
    line(&mut img, (m, m), (m, h - m), AXIS);
    for (a, b) in &segments {
        line(&mut img, frame.map(a.x, a.mean), frame.map(b.x, b.mean), CURVE);
    }
    for c in curve {
        let (px, py) = frame.map(c.x, c.mean);
        for dx in -2..=2 {
            for dy in -2..=2 {
                put(&mut img, px + dx, py + dy, CURVE);
            }
        }
    }
    (img, frame)
}

/// Aggregates `points` and writes `curves.csv` plus one `<metric>.png` per
/// metric into `out_dir`.
pub fn plot_results(points: &[(f64, BTreeMap<String, f64>)], out_dir: &Path) -> Result<Vec<CurvePoint>> {
    let curves = aggregate(points)?;
    crate::io::ensure_dir(out_dir)?;
    write_csv(&curves, &out_dir.join("curves.csv"))?;
    let mut by_metric: BTreeMap<&str, Vec<CurvePoint>> = BTreeMap::new();
    for c in &curves {
        by_metric.entry(&c.metric).or_default().push(c.clone());
    }
    for (metric, curve) in by_metric {
        let (img, _) = render(&curve, 640, 400);
        img.save(out_dir.join(format!("{metric}.png")))?;
    }
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(x: f64, m: &str, v: f64) -> (f64, BTreeMap<String, f64>) {
        (x, BTreeMap::from([(m.to_owned(), v)]))
    }

    #[test]
    fn single_report_has_zero_band() {
        let c = aggregate(&[pt(10.0, "mean_jaccard", 0.9)]).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!((c[0].mean, c[0].std, c[0].n), (0.9, 0.0, 1));
        assert!(matches!(aggregate(&[]), Err(Error::Param(_))));
    }

    #[test]
    fn band_is_sample_std() {
        let vals = [0.91, 0.87, 0.95, 0.89, 0.93];
        let pts: Vec<_> = vals.iter().map(|&v| pt(5.0, "mean_accuracy", v)).collect();
        let c = aggregate(&pts).unwrap();
        let mean = vals.iter().sum::<f64>() / 5.0;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!((c[0].std - var.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trips_and_png_marks_the_means() {
        let pts = vec![pt(1.0, "detection_rate", 50.0), pt(1.0, "detection_rate", 70.0), pt(4.0, "detection_rate", 80.0), pt(-2.0, "detection_rate", 10.0)];
        let dir = tempfile::tempdir().unwrap();
        let curves = plot_results(&pts, dir.path()).unwrap();
        assert_eq!(curves.iter().map(|c| c.x).collect::<Vec<_>>(), vec![-2.0, 1.0, 4.0]);
        let back = read_csv(&dir.path().join("curves.csv")).unwrap();
        assert_eq!(back, curves);
        let img = image::open(dir.path().join("detection_rate.png")).unwrap().to_rgb8();
        let (_, frame) = render(&back, 640, 400);
        for c in &back {
            let (x, y) = frame.map(c.x, c.mean);
            assert_eq!(*img.get_pixel(x as u32, y as u32), CURVE);
        }
        // The band spans ±std at a data column.
        let c = &back[1];
        let (x, top) = frame.map(c.x, c.mean + c.std);
        assert_eq!(*img.get_pixel(x as u32, top as u32 + 1), BAND);
    }
}
