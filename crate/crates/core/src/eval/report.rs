//! `report.json`, `report.csv` and optional plots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::ablation::AblationTable;
use super::evaluate::MetricsBundle;
use super::latency::LatencyReport;
use super::memory::MemoryReport;
use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsBundle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory: Option<MemoryReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationTable>,
}

impl Report {
    pub fn new() -> Self {
        Report {
            schema_version: REPORT_SCHEMA_VERSION,
            ..Default::default()
        }
    }

    /// Flat `section,key,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,key,value\n");
        let mut row = |s: &str, k: &str, v: String| {
            let _ = writeln!(out, "{s},{k},{v}");
        };
        if let Some(m) = &self.metrics {
            row("metrics", "detection_map", m.detection_map.to_string());
            for (c, ap) in &m.per_class_ap {
                row("metrics", &format!("ap_{c}"), ap.to_string());
            }
            row("metrics", "height_filter_px", m.height_filter_px.to_string());
            for (tag, im) in [("intent", &m.intent), ("intent_at_truth", &m.intent_at_truth)] {
                if let Some(im) = im {
                    row("metrics", &format!("{tag}_accuracy"), im.accuracy.to_string());
                    row("metrics", &format!("{tag}_f1"), im.f1.to_string());
                    let c = im.confusion;
                    row(
                        "metrics",
                        &format!("{tag}_confusion"),
                        format!("tp={} fp={} tn={} fn={} unmatched={}", c.tp, c.fp, c.tn, c.fn_, c.unmatched),
                    );
                }
            }
        }
        if let Some(l) = &self.latency {
            for p in &l.pipelines {
                for b in &p.buckets {
                    row("latency", &format!("{}_median_ms_{}", p.name, b.count), b.median_ms.to_string());
                    row("latency", &format!("{}_p95_ms_{}", p.name, b.count), b.p95_ms.to_string());
                    row("latency", &format!("{}_invocations_{}", p.name, b.count), b.invocations.to_string());
                }
                row("latency", &format!("{}_slope_ms_per_ped", p.name), p.slope_ms_per_ped.to_string());
                row("latency", &format!("{}_slope_ci_lo", p.name), p.slope_ci.0.to_string());
                row("latency", &format!("{}_slope_ci_hi", p.name), p.slope_ci.1.to_string());
            }
        }
        if let Some(m) = &self.memory {
            for (k, e) in [
                ("detector", m.detector),
                ("aux_head", m.aux_head),
                ("crop_encoder", m.crop_encoder),
                ("recurrent_head", m.recurrent_head),
                ("single_shot_total", m.single_shot_total),
                ("sequential_total", m.sequential_total),
            ] {
                row("memory", &format!("{k}_params"), e.count.to_string());
                row("memory", &format!("{k}_bytes"), e.bytes.to_string());
            }
            row("memory", "delta_bytes", m.delta_bytes.to_string());
            row("memory", "hand_table_agrees", m.hand_table_agrees.to_string());
        }
        if let Some(a) = &self.ablation {
            for r in &a.rows {
                row("ablation", &format!("accuracy_L{}", r.tap_layer), r.accuracy.to_string());
                row("ablation", &format!("f1_L{}", r.tap_layer), r.f1.to_string());
            }
        }
        out
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(&json, e.to_string()))?;
        fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("report.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

const PALETTE: [Rgb<u8>; 4] = [Rgb([31, 119, 180]), Rgb([214, 39, 40]), Rgb([44, 160, 44]), Rgb([255, 127, 14])];

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), c: Rgb<u8>) {
    let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        for (dx, dy) in [(0i64, 0i64), (1, 0), (0, 1)] {
            let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, c);
            }
        }
    }
}

/// Polyline chart, one series per color, axes from zero. No labels.
pub fn line_chart(series: &[Vec<(f64, f64)>], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let m = 30.0;
    let pts = series.iter().flatten();
    let xmax = pts.clone().map(|p| p.0).fold(f64::MIN_POSITIVE, f64::max);
    let ymax = pts.map(|p| p.1).fold(f64::MIN_POSITIVE, f64::max) * 1.05;
    let (w, h) = (width as f64 - 2.0 * m, height as f64 - 2.0 * m);
    let map = |(x, y): (f64, f64)| (m + x / xmax * w, height as f64 - m - y / ymax * h);
    let axis = Rgb([0, 0, 0]);
    line(&mut img, map((0.0, 0.0)), map((xmax, 0.0)), axis);
    line(&mut img, map((0.0, 0.0)), map((0.0, ymax)), axis);
    for (s, c) in series.iter().zip(PALETTE.iter().cycle()) {
        for p in s.windows(2) {
            line(&mut img, map(p[0]), map(p[1]), *c);
        }
    }
    img
}

/// Median latency against pedestrian count, one line per pipeline.
pub fn write_latency_plot(report: &LatencyReport, path: &Path) -> Result<()> {
    let series: Vec<Vec<(f64, f64)>> = report
        .pipelines
        .iter()
        .map(|p| p.buckets.iter().map(|b| (b.count as f64, b.median_ms)).collect())
        .collect();
    save_png(&line_chart(&series, 480, 320), path)
}

/// Training loss per epoch, one line per run.
pub fn write_loss_plot(curves: &[Vec<f64>], path: &Path) -> Result<()> {
    let series: Vec<Vec<(f64, f64)>> = curves
        .iter()
        .map(|c| c.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect())
        .collect();
    save_png(&line_chart(&series, 480, 320), path)
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::latency::{latency_bench, BenchOptions, BenchTarget, FakeClock, RunInfo};

    struct Stub(FakeClock);

    impl BenchTarget for Stub {
        fn name(&self) -> &str {
            "stub"
        }

        fn run(&mut self, count: usize) -> Result<RunInfo> {
            self.0.advance(1_000_000 + 1000 * count as u64);
            Ok(RunInfo::default())
        }
    }

    #[test]
    fn write_read_round_trip() {
        let clock = FakeClock::new(1);
        let mut s = Stub(clock.clone());
        let mut r = Report::new();
        r.latency = Some(latency_bench(&mut [&mut s], &[1, 2, 4], &clock, &BenchOptions::default()).unwrap());
        let dir = tempfile::tempdir().unwrap();
        r.write(dir.path()).unwrap();
        let back = Report::read(&dir.path().join("report.json")).unwrap();
        assert_eq!(back, r);
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert!(csv.starts_with("section,key,value\n"));
        assert!(csv.contains("latency,stub_median_ms_4,"));
        write_latency_plot(r.latency.as_ref().unwrap(), &dir.path().join("plots/latency.png")).unwrap();
        assert!(dir.path().join("plots/latency.png").exists());
    }
}
