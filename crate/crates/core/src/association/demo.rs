//! Annotated PNG of a final frame: box outline colored by predicted intent,
//! filled tag in the top-left corner colored by the ground truth.

use std::path::Path;

use image::{Rgb, RgbImage};

use super::IntentAssignment;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::grid::INTENT_CROSS;
use crate::scenario::{AgentState, ObjectClass};
use crate::tensor::Tensor;

const CROSS: Rgb<u8> = Rgb([230, 40, 40]);
const NOT_CROSS: Rgb<u8> = Rgb([40, 200, 70]);
const UNKNOWN: Rgb<u8> = Rgb([160, 160, 160]);
const TAG: u32 = 4;

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn outline(img: &mut RgbImage, b: &BBox, c: Rgb<u8>) {
    let (x0, y0, x1, y1) = (b.x0().round() as i64, b.y0().round() as i64, b.x1().round() as i64, b.y1().round() as i64);
    for x in x0..=x1 {
        put(img, x, y0, c);
        put(img, x, y1, c);
    }
    for y in y0..=y1 {
        put(img, x0, y, c);
        put(img, x1, y, c);
    }
}

fn tag(img: &mut RgbImage, b: &BBox, c: Rgb<u8>) {
    let (x0, y0) = (b.x0().round() as i64, b.y0().round() as i64);
    for dy in 0..TAG as i64 {
        for dx in 0..TAG as i64 {
            put(img, x0 + dx, y0 + dy, c);
        }
    }
}

/// `frame` is `[3, H, W]` in `[0, 1]`.
pub fn render_demo(frame: &Tensor<f32>, assignments: &[IntentAssignment], truth: &[AgentState]) -> Result<RgbImage> {
    let s = frame.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Input(format!("expected a [3, H, W] frame, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = frame.data();
    let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        let px = |c: usize| (d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    for a in assignments {
        let pred = if a.intent_prob >= 0.5 { CROSS } else { NOT_CROSS };
        outline(&mut img, &a.detection.bbox, pred);
        let gt = truth
            .iter()
            .filter(|t| t.class == ObjectClass::Pedestrian)
            .map(|t| (t.bbox().iou(&a.detection.bbox), t))
            .filter(|(iou, _)| *iou >= 0.5)
            .max_by(|x, y| x.0.total_cmp(&y.0))
            .map(|(_, t)| t.intent.class_index());
        let c = match gt {
            Some(Some(INTENT_CROSS)) => CROSS,
            Some(Some(_)) => NOT_CROSS,
            _ => UNKNOWN,
        };
        tag(&mut img, &a.detection.bbox, c);
    }
    Ok(img)
}

pub fn write_demo_png(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{CellIndex, Detection};
    use crate::scenario::PEDESTRIAN;

    #[test]
    fn draws_prediction_and_truth() {
        let frame = Tensor::<f32>::zeros(&[3, 40, 60]);
        let bbox = BBox::new(30.0, 20.0, 10.0, 20.0);
        let a = IntentAssignment {
            detection: Detection {
                bbox,
                class: PEDESTRIAN,
                score: 0.9,
                cell: CellIndex { i: 0, j: 0, k: 0 },
            },
            intent_prob: 0.8,
            cell: CellIndex { i: 0, j: 0, k: 0 },
        };
        let img = render_demo(&frame, &[a], &[]).unwrap();
        assert_eq!(img.dimensions(), (60, 40));
        assert_eq!(*img.get_pixel(30, 30), CROSS);
        assert_eq!(*img.get_pixel(25, 10), UNKNOWN);
        assert_eq!(*img.get_pixel(30, 20), Rgb([0, 0, 0]));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("demo.png");
        write_demo_png(&p, &img).unwrap();
        assert!(p.exists());
    }
}
