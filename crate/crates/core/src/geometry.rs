//! Axis-aligned box algebra in continuous scene coordinates.
//!
//! Boxes use corner form `(x1, y1, x2, y2)` with no `+1` pixel correction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

/// Width and height of the scene canvas. Boxes are clipped to `[0, width] x [0, height]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Canvas {
    pub width: f64,
    pub height: f64,
}

impl Canvas {
    pub fn new(width: f64, height: f64) -> Self {
        Self { width, height }
    }

    pub fn bounds(&self) -> BBox {
        BBox::new(0.0, 0.0, self.width, self.height)
    }
}

/// Axis-aligned bounding box. `x1 <= x2` and `y1 <= y2` always hold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    /// Builds a box from two corners, swapping coordinates so the invariants hold.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        let (x1, x2) = if x1 <= x2 { (x1, x2) } else { (x2, x1) };
        let (y1, y2) = if y1 <= y2 { (y1, y2) } else { (y2, y1) };
        Self { x1, y1, x2, y2 }
    }

    /// Like [`BBox::new`] but rejects non-finite coordinates.
    pub fn try_new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        if [x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            Ok(Self::new(x1, y1, x2, y2))
        } else {
            Err(GeometryError::NonFinite([x1, y1, x2, y2]))
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    #[inline]
    pub fn x1(&self) -> f64 {
        self.x1
    }
    #[inline]
    pub fn y1(&self) -> f64 {
        self.y1
    }
    #[inline]
    pub fn x2(&self) -> f64 {
        self.x2
    }
    #[inline]
    pub fn y2(&self) -> f64 {
        self.y2
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_coords(c: [f64; 4]) -> Self {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn is_degenerate(&self) -> bool {
        self.width() <= 0.0 || self.height() <= 0.0
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    pub fn clip(&self, canvas: Canvas) -> Self {
        let cx = |v: f64| v.clamp(0.0, canvas.width);
        let cy = |v: f64| v.clamp(0.0, canvas.height);
        Self {
            x1: cx(self.x1),
            y1: cy(self.y1),
            x2: cx(self.x2),
            y2: cy(self.y2),
        }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        Self::try_new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.coords()
    }
}

#[inline]
pub fn area(b: &BBox) -> f64 {
    b.width() * b.height()
}

pub fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let h = a.y2.min(b.y2) - a.y1.max(b.y1);
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

/// Intersection over union. Returns 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Offsets every coordinate by an independent uniform draw in `[-fraction, +fraction]`
/// of the box width (x) or height (y), then repairs inverted pairs and clips to the canvas.
pub fn jitter<R: Rng + ?Sized>(b: &BBox, fraction: f64, canvas: Canvas, rng: &mut R) -> BBox {
    let (w, h) = (b.width(), b.height());
    let mut draw = || {
        if fraction > 0.0 {
            rng.random_range(-fraction..=fraction)
        } else {
            0.0
        }
    };
    let dx1 = draw() * w;
    let dy1 = draw() * h;
    let dx2 = draw() * w;
    let dy2 = draw() * h;
    BBox::new(b.x1 + dx1, b.y1 + dy1, b.x2 + dx2, b.y2 + dy2).clip(canvas)
}

/// Index and IoU of the target with the largest overlap, if any reaches `min_iou`.
/// Ties go to the first target.
pub fn best_match(b: &BBox, targets: &[BBox], min_iou: f64) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in targets.iter().enumerate() {
        let v = iou(b, t);
        if v >= min_iou && best.is_none_or(|(_, bv)| v > bv) {
            best = Some((i, v));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const CANVAS: Canvas = Canvas {
        width: 40.0,
        height: 40.0,
    };

    #[test]
    fn area_examples() {
        assert_eq!(area(&BBox::new(0.0, 0.0, 2.0, 2.0)), 4.0);
        assert_eq!(area(&BBox::new(1.0, 1.0, 1.0, 5.0)), 0.0);
        assert_eq!(area(&BBox::new(0.5, 0.25, 2.5, 1.25)), 2.0);
    }

    #[test]
    fn constructor_normalizes_and_rejects() {
        let b = BBox::new(3.0, 4.0, 1.0, 2.0);
        assert_eq!(b.coords(), [1.0, 2.0, 3.0, 4.0]);
        assert!(BBox::try_new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        assert!(serde_json::from_str::<BBox>("[0.0, 0.0, 1.0, 2.0]").is_ok());
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        let b = BBox::new(1.0, 1.0, 3.0, 3.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
        let d = BBox::new(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&d, &d), 0.0);
    }

    #[test]
    fn zero_jitter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = BBox::new(10.0, 10.0, 20.0, 20.0);
        assert_eq!(jitter(&b, 0.0, CANVAS, &mut rng), b);
    }

    #[test]
    fn jitter_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = BBox::new(10.0, 10.0, 20.0, 20.0);
        for _ in 0..1000 {
            let j = jitter(&b, 0.06, CANVAS, &mut rng);
            for (a, o) in j.coords().iter().zip(b.coords()) {
                assert!((a - o).abs() <= 0.6 + 1e-12);
            }
        }
    }

    #[test]
    fn jitter_offsets_have_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = BBox::new(10.0, 10.0, 20.0, 20.0);
        let n = 10_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += jitter(&b, 0.06, CANVAS, &mut rng).x1() - b.x1();
        }
        let mean = sum / n as f64;
        // uniform on [-0.6, 0.6] has sd 0.6/sqrt(3)
        let se = 0.6 / 3f64.sqrt() / (n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean offset {mean} exceeds 3 se {se}");
    }

    #[test]
    fn best_match_picks_highest_overlap() {
        let b = BBox::new(0.0, 0.0, 2.0, 2.0);
        let targets = [
            BBox::new(1.0, 1.0, 3.0, 3.0),
            BBox::new(0.0, 0.0, 2.0, 2.1),
            BBox::new(0.0, 0.0, 2.0, 2.0),
        ];
        assert_eq!(best_match(&b, &targets, 0.5).map(|m| m.0), Some(2));
        assert_eq!(best_match(&b, &targets[..1], 0.5), None);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..30.0f64, 0.0..30.0f64, 0.0..10.0f64, 0.0..10.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn iou_self_is_one(a in arb_box()) {
            prop_assume!(!a.is_degenerate());
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn iou_translation_invariant(a in arb_box(), b in arb_box(), dx in -5.0..5.0f64, dy in -5.0..5.0f64) {
            let moved = iou(&a.translate(dx, dy), &b.translate(dx, dy));
            prop_assert!((moved - iou(&a, &b)).abs() < 1e-9);
        }

        #[test]
        fn jitter_output_valid(a in arb_box(), f in 0.0..0.5f64, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let j = jitter(&a, f, CANVAS, &mut rng);
            prop_assert!(j.x1() <= j.x2() && j.y1() <= j.y2());
            prop_assert!(j.x1() >= 0.0 && j.x2() <= CANVAS.width);
            prop_assert!(j.y1() >= 0.0 && j.y2() <= CANVAS.height);
        }
    }
}
