use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixels, stored by center and size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn x0(&self) -> f64 {
        self.cx - 0.5 * self.w
    }

    pub fn y0(&self) -> f64 {
        self.cy - 0.5 * self.h
    }

    pub fn x1(&self) -> f64 {
        self.cx + 0.5 * self.w
    }

    pub fn y1(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x1().min(other.x1()) - self.x0().max(other.x0())).max(0.0);
        let h = (self.y1().min(other.y1()) - self.y0().max(other.y0())).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Clips to `[0, width] x [0, height]`; `None` when nothing remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let x0 = self.x0().max(0.0);
        let y0 = self.y0().max(0.0);
        let x1 = self.x1().min(width);
        let y1 = self.y1().min(height);
        (x1 > x0 && y1 > y0).then(|| BBox::from_corners(x0, y0, x1, y1))
    }
}

/// IoU of two boxes sharing a center, the anchor-matching criterion.
pub fn centered_iou(w: f64, h: f64, aw: f64, ah: f64) -> f64 {
    let inter = w.min(aw) * h.min(ah);
    inter / (w * h + aw * ah - inter)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_of_half_overlap() {
        let a = BBox::from_corners(0.0, 0.0, 10.0, 10.0);
        let b = BBox::from_corners(5.0, 0.0, 15.0, 10.0);
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-12);
        assert_eq!(a.iou(&BBox::from_corners(20.0, 20.0, 30.0, 30.0)), 0.0);
    }

    #[test]
    fn clip_drops_boxes_outside() {
        let b = BBox::new(-10.0, 5.0, 4.0, 4.0);
        assert!(b.clip(100.0, 100.0).is_none());
        let c = BBox::new(1.0, 1.0, 4.0, 4.0).clip(100.0, 100.0).unwrap();
        assert_eq!((c.x0(), c.y0(), c.x1(), c.y1()), (0.0, 0.0, 3.0, 3.0));
    }
}
