//! Static PNG charts and prediction overlays.
//!
//! Charts carry no text; every chart is written next to a CSV holding the
//! same series with their names, and the series colours follow [`PALETTE`]
//! in column order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::io::write_rgb_png;
use crate::labels::BinaryMask;
use crate::training::MetricRecord;

pub const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<u8>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            px: vec![255; w * h * 3],
        }
    }

    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.w && (y as usize) < self.h {
            let i = 3 * (y as usize * self.w + x as usize);
            self.px[i..i + 3].copy_from_slice(&c);
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    fn rect(&mut self, x: i64, y: i64, w: i64, h: i64, c: [u8; 3]) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.set(xx, yy, c);
            }
        }
    }
}

/// Renders series as a line chart. Returns interleaved RGB.
pub fn line_chart(series: &[Series], width: usize, height: usize) -> Vec<u8> {
    let mut cv = Canvas::new(width, height);
    let margin = 24i64;
    let (x0, y0) = (margin, margin);
    let (x1, y1) = (width as i64 - margin, height as i64 - margin);
    let finite = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    if !xmin.is_finite() {
        (xmin, xmax, ymin, ymax) = (0.0, 1.0, 0.0, 1.0);
    }
    if xmax == xmin {
        xmax = xmin + 1.0;
    }
    if ymax == ymin {
        ymax = ymin + 1.0;
    }
    let grid = [232, 232, 232];
    for k in 0..=4 {
        let gy = y0 + (y1 - y0) * k / 4;
        let gx = x0 + (x1 - x0) * k / 4;
        cv.line((x0, gy), (x1, gy), grid);
        cv.line((gx, y0), (gx, y1), grid);
    }
    let axis = [90, 90, 90];
    cv.line((x0, y1), (x1, y1), axis);
    cv.line((x0, y0), (x0, y1), axis);
    let map = |(x, y): (f64, f64)| {
        let px = x0 as f64 + (x - xmin) / (xmax - xmin) * (x1 - x0) as f64;
        let py = y1 as f64 - (y - ymin) / (ymax - ymin) * (y1 - y0) as f64;
        (px.round() as i64, py.round() as i64)
    };
    for (i, s) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let pts: Vec<(i64, i64)> =
            s.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()).map(|&p| map(p)).collect();
        for pair in pts.windows(2) {
            cv.line(pair[0], pair[1], c);
        }
        if pts.len() == 1 {
            cv.rect(pts[0].0 - 1, pts[0].1 - 1, 3, 3, c);
        }
        // legend swatch
        cv.rect(x1 - 10 - 14 * i as i64, 6, 10, 10, c);
    }
    cv.px
}

fn series_csv(series: &[Series]) -> String {
    let mut out = String::from("series,x,y\n");
    for s in series {
        for (x, y) in &s.points {
            let _ = writeln!(out, "{},{x},{y}", s.name);
        }
    }
    out
}

/// Writes `<stem>.png` and `<stem>.csv`.
pub fn save_chart(dir: &Path, stem: &str, series: &[Series]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (w, h) = (480, 320);
    write_rgb_png(&dir.join(format!("{stem}.png")), h, w, &line_chart(series, w, h))?;
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, series_csv(series)).map_err(|e| Error::io(&csv, e))
}

fn epoch_mean(records: &[MetricRecord], get: impl Fn(&crate::training::IterRecord) -> Option<f64>) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64, usize)> = Vec::new();
    for r in records {
        if let MetricRecord::Iter(it) = r {
            if let Some(v) = get(it) {
                match out.last_mut() {
                    Some(last) if last.0 == it.epoch as f64 => {
                        last.1 += v;
                        last.2 += 1;
                    }
                    _ => out.push((it.epoch as f64, v, 1)),
                }
            }
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}

/// Loss curves, σ trajectories, gate utilization and test Dice of one run.
pub fn run_charts(records: &[MetricRecord]) -> Vec<(&'static str, Vec<Series>)> {
    let tasks: Vec<crate::task::Task> = records
        .iter()
        .find_map(|r| match r {
            MetricRecord::Iter(it) => Some(it.loss.sup.keys().copied().collect()),
            _ => None,
        })
        .unwrap_or_default();
    let mut losses = Vec::new();
    let mut sigmas = Vec::new();
    for &t in &tasks {
        losses.push(Series {
            name: format!("sup.{t}"),
            points: epoch_mean(records, |r| r.loss.sup.get(&t).copied()),
        });
        losses.push(Series {
            name: format!("unsup.{t}"),
            points: epoch_mean(records, |r| r.loss.unsup.get(&t).copied()),
        });
        sigmas.push(Series {
            name: format!("sigma.{t}"),
            points: epoch_mean(records, |r| r.loss.sigma.get(&t).copied()),
        });
    }
    losses.retain(|s| !s.points.is_empty());
    let mut gates: Vec<Series> = Vec::new();
    let mut dice = vec![
        Series {
            name: "expert".into(),
            points: Vec::new(),
        },
        Series {
            name: "gate".into(),
            points: Vec::new(),
        },
    ];
    for r in records {
        if let MetricRecord::Eval(e) = r {
            dice[0].points.push((e.epoch as f64, e.dice));
            if let Some(g) = e.gate_dice {
                dice[1].points.push((e.epoch as f64, g));
            }
            for (task, w) in &e.gate_weights {
                for (m, v) in w.iter().enumerate() {
                    let name = format!("gate.{task}.w{m}");
                    match gates.iter_mut().find(|s| s.name == name) {
                        Some(s) => s.points.push((e.epoch as f64, *v)),
                        None => gates.push(Series {
                            name,
                            points: vec![(e.epoch as f64, *v)],
                        }),
                    }
                }
            }
        }
    }
    dice.retain(|s| !s.points.is_empty());
    vec![("losses", losses), ("sigma", sigmas), ("gate_weights", gates), ("dice", dice)]
}

/// Image with true positives tinted green, false positives red and false
/// negatives blue. Interleaved RGB.
pub fn overlay(sample: &Sample, pred: &BinaryMask) -> Result<Vec<u8>> {
    let truth = sample.mask().ok_or_else(|| Error::Data(format!("{} has no mask", sample.id)))?;
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(Error::Shape("overlay mask size differs from the image".into()));
    }
    let mut rgb = sample.to_rgb();
    for (i, (p, t)) in pred.data().iter().zip(truth.data()).enumerate() {
        let tint = match (p, t) {
            (1, 1) => Some([0u8, 200, 0]),
            (1, 0) => Some([230, 0, 0]),
            (0, 1) => Some([0, 60, 230]),
            _ => None,
        };
        if let Some(c) = tint {
            for k in 0..3 {
                let v = &mut rgb[3 * i + k];
                *v = ((u16::from(*v) + u16::from(c[k])) / 2) as u8;
            }
        }
    }
    Ok(rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_draws_series_colours() {
        let s = vec![
            Series {
                name: "a".into(),
                points: vec![(0.0, 0.0), (1.0, 1.0)],
            },
            Series {
                name: "b".into(),
                points: vec![(0.0, 1.0), (1.0, 0.0)],
            },
        ];
        let px = line_chart(&s, 100, 80);
        assert_eq!(px.len(), 100 * 80 * 3);
        let has = |c: [u8; 3]| px.chunks(3).any(|p| p == c);
        assert!(has(PALETTE[0]) && has(PALETTE[1]));
        assert_eq!(line_chart(&s, 100, 80), px);
        assert!(series_csv(&s).starts_with("series,x,y\na,0,0\n"));
    }
}
