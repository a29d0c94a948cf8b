use serde::{Deserialize, Serialize};

/// Axis-aligned box in image pixels with a score and a class label (0 = background).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub score: f64,
    pub label: usize,
}

pub type BoxSet = Vec<BBox>;

/// Regression offsets `(dx, dy, dw, dh)`: centre shift in units of the reference size and
/// log-scale size ratios.
pub type Deltas = [f64; 4];

/// `exp` argument clamp for decoded sizes, so a wild prediction cannot overflow.
const MAX_LOG_SCALE: f64 = 4.135; // ln(1000 / 16)

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox {
            x1,
            y1,
            x2,
            y2,
            score: 1.0,
            label: 1,
        }
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = label;
        self
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn from_coords(c: [f64; 4]) -> Self {
        BBox::new(c[0], c[1], c[2], c[3])
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        self.x2 > self.x1
            && self.y2 > self.y1
            && (0.0..=1.0).contains(&self.score)
            && [self.x1, self.y1, self.x2, self.y2]
                .iter()
                .all(|v| v.is_finite())
    }

    /// Clamps to `[0, width] x [0, height]`.
    pub fn clip(mut self, width: f64, height: f64) -> Self {
        self.x1 = self.x1.clamp(0.0, width);
        self.x2 = self.x2.clamp(0.0, width);
        self.y1 = self.y1.clamp(0.0, height);
        self.y2 = self.y2.clamp(0.0, height);
        self
    }

    /// Mirror about the vertical centre line of an image of the given width.
    pub fn flip_horizontal(mut self, width: f64) -> Self {
        let (x1, x2) = (width - self.x2, width - self.x1);
        self.x1 = x1;
        self.x2 = x2;
        self
    }

    /// Offsets that move `reference` onto `self`.
    pub fn encode(&self, reference: &BBox) -> Deltas {
        let (cx, cy) = self.center();
        let (rx, ry) = reference.center();
        let (rw, rh) = (reference.width(), reference.height());
        [
            (cx - rx) / rw,
            (cy - ry) / rh,
            (self.width() / rw).ln(),
            (self.height() / rh).ln(),
        ]
    }

    /// Applies offsets to `self` (the reference box). Score and label are carried over.
    pub fn decode(&self, d: Deltas) -> BBox {
        let (rx, ry) = self.center();
        let (rw, rh) = (self.width(), self.height());
        let cx = rx + d[0] * rw;
        let cy = ry + d[1] * rh;
        let w = rw * d[2].min(MAX_LOG_SCALE).exp();
        let h = rh * d[3].min(MAX_LOG_SCALE).exp();
        BBox {
            x1: cx - 0.5 * w,
            y1: cy - 0.5 * h,
            x2: cx + 0.5 * w,
            y2: cy + 0.5 * h,
            ..*self
        }
    }
}

/// Intersection over union; 0 when either box is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}
