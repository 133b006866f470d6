//! Bounding-box geometry: the 11-class spatial relation classifier and the
//! relative geometry feature used by implicit attention.
//!
//! Spatial class codes (subject `i`, object `j`):
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | no relation (centers too far apart) |
//! | 1 | `i` inside `j` |
//! | 2 | `i` covers `j` |
//! | 3 | overlap (IoU ≥ 0.5, or coincident centers) |
//! | 4..=11 | `i` lies in octant `code − 4` around `j`, counter-clockwise from east, y axis up |

use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const DEFAULT_FAR_THRESHOLD: f64 = 4.0;
pub const DEFAULT_LOG_EPS: f64 = 1e-3;

/// Axis-aligned box, `(x, y)` is the top-left corner in image coordinates (y grows downward).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = BBox { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.h > 0.0) || !(self.x.is_finite() && self.y.is_finite()) || !self.w.is_finite() || !self.h.is_finite() {
            return Err(Error::Validation(alloc::format!(
                "degenerate box [{}, {}, {}, {}]: width and height must be positive",
                self.x,
                self.y,
                self.w,
                self.h
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    fn right(&self) -> f64 {
        self.x + self.w
    }

    fn bottom(&self) -> f64 {
        self.y + self.h
    }

    /// `self` lies within `other` (shared edges allowed).
    pub fn within(&self, other: &BBox) -> bool {
        other.x <= self.x && other.y <= self.y && self.right() <= other.right() && self.bottom() <= other.bottom()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        inter / (self.area() + other.area() - inter)
    }
}

/// Spatial relation code in `0..=11`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SpatialClass(u8);

impl SpatialClass {
    pub const NO_RELATION: SpatialClass = SpatialClass(0);
    pub const INSIDE: SpatialClass = SpatialClass(1);
    pub const COVER: SpatialClass = SpatialClass(2);
    pub const OVERLAP: SpatialClass = SpatialClass(3);
    /// Number of relation classes, excluding no-relation.
    pub const COUNT: usize = 11;

    pub fn new(code: u8) -> Result<Self> {
        if code as usize > Self::COUNT {
            return Err(Error::Validation(alloc::format!("spatial class {code} outside 0..=11")));
        }
        Ok(SpatialClass(code))
    }

    /// Directional class for octant `k` (45° bins, counter-clockwise from east).
    pub fn octant(k: u8) -> Self {
        SpatialClass(4 + k % 8)
    }

    pub fn code(self) -> u8 {
        self.0
    }

    pub fn is_relation(self) -> bool {
        self.0 != 0
    }

    /// Octant index for directional classes.
    pub fn direction(self) -> Option<u8> {
        (self.0 >= 4).then(|| self.0 - 4)
    }

    /// The class of the reversed pair: 1↔2, 3↔3, octant k ↔ k+4, 0↔0.
    pub fn inverse(self) -> Self {
        match self.0 {
            0 | 3 => self,
            1 => Self::COVER,
            2 => Self::INSIDE,
            c => Self::octant((c - 4) + 4),
        }
    }

    /// Subject lies east of the object (octants 7 and 0).
    pub fn is_right_of(self) -> bool {
        matches!(self.direction(), Some(0 | 7))
    }

    pub fn is_above(self) -> bool {
        matches!(self.direction(), Some(1 | 2))
    }

    pub fn is_left_of(self) -> bool {
        matches!(self.direction(), Some(3 | 4))
    }

    pub fn is_below(self) -> bool {
        matches!(self.direction(), Some(5 | 6))
    }
}

/// Octant of the vector `(a, b)` (x right, y up) in half-open 45° bins; `None` for the zero vector.
///
/// Only sign and magnitude comparisons are used, so `(−a, −b)` lands exactly four octants away.
fn octant_of(a: f64, b: f64) -> Option<u8> {
    let k = if b >= 0.0 && a > 0.0 {
        if b < a {
            0
        } else {
            1
        }
    } else if a <= 0.0 && b > 0.0 {
        if -a < b {
            2
        } else {
            3
        }
    } else if b <= 0.0 && a < 0.0 {
        if -b < -a {
            4
        } else {
            5
        }
    } else if a >= 0.0 && b < 0.0 {
        if a < -b {
            6
        } else {
            7
        }
    } else {
        return None;
    };
    Some(k)
}

/// Classifies the position of `subject` relative to `object`.
///
/// Tests run in order: containment, overlap, distance, direction. The distance test
/// normalizes by the larger of the two boxes, so a pair is unrelated in both directions or in neither.
pub fn classify_spatial(subject: &BBox, object: &BBox, far_threshold: f64) -> Result<SpatialClass> {
    subject.validate()?;
    object.validate()?;
    if !(far_threshold > 0.0) {
        return Err(Error::Config(alloc::format!("far_threshold must be positive, got {far_threshold}")));
    }
    let identical = subject == object;
    if !identical && subject.within(object) {
        return Ok(SpatialClass::INSIDE);
    }
    if !identical && object.within(subject) {
        return Ok(SpatialClass::COVER);
    }
    let inter = subject.intersection_area(object);
    let union = subject.area() + object.area() - inter;
    if 2.0 * inter >= union {
        return Ok(SpatialClass::OVERLAP);
    }
    // doubled center offsets keep integer-grid inputs exact
    let dx2 = (2.0 * subject.x + subject.w) - (2.0 * object.x + object.w);
    let dy2 = (2.0 * subject.y + subject.h) - (2.0 * object.y + object.h);
    let dist2x4 = dx2 * dx2 + dy2 * dy2;
    let scale = subject.area().max(object.area());
    if dist2x4 > 4.0 * far_threshold * far_threshold * scale {
        return Ok(SpatialClass::NO_RELATION);
    }
    Ok(match octant_of(dx2, -dy2) {
        Some(k) => SpatialClass::octant(k),
        None => SpatialClass::OVERLAP,
    })
}

/// `(log(|xᵢ−xⱼ|/wᵢ), log(|yᵢ−yⱼ|/hᵢ), log(wⱼ/wᵢ), log(hⱼ/hᵢ))` over box centers, with `|Δ|`
/// clamped below at `eps`.
///
/// Each ratio is evaluated as a difference of logarithms so that swapping the boxes negates
/// the last two components exactly.
pub fn relative_geometry(bi: &BBox, bj: &BBox, eps: f64) -> Result<[f64; 4]> {
    bi.validate()?;
    bj.validate()?;
    if !(eps > 0.0) {
        return Err(Error::Config(alloc::format!("log clamp eps must be positive, got {eps}")));
    }
    let ln = libm::log;
    Ok([
        ln(((bi.x + bi.w / 2.0) - (bj.x + bj.w / 2.0)).abs().max(eps)) - ln(bi.w),
        ln(((bi.y + bi.h / 2.0) - (bj.y + bj.h / 2.0)).abs().max(eps)) - ln(bi.h),
        ln(bj.w) - ln(bi.w),
        ln(bj.h) - ln(bi.h),
    ])
}

/// Embeds the 4-d geometry feature into `d_h` dimensions with sine/cosine pairs.
///
/// Component `c` owns a contiguous block of `d_h / 4` entries; pair `t` of that block is
/// `(sin(c / 1000^(8t/d_h)), cos(c / 1000^(8t/d_h)))`.
pub fn sinusoidal_embed(raw: &[f64; 4], d_h: usize) -> Result<Vec<f64>> {
    if d_h == 0 || d_h % 8 != 0 {
        return Err(Error::Config(alloc::format!("geometry embedding dimension {d_h} must be a positive multiple of 8")));
    }
    let pairs = d_h / 8;
    let mut out = Vec::with_capacity(d_h);
    for &c in raw {
        for t in 0..pairs {
            let wavelength = libm::pow(1000.0, (8 * t) as f64 / d_h as f64);
            let arg = c / wavelength;
            out.push(libm::sin(arg));
            out.push(libm::cos(arg));
        }
    }
    Ok(out)
}

/// Relative geometry of a box pair, raw and embedded.
#[derive(Debug, Clone, PartialEq)]
pub struct GeomFeature {
    pub raw: [f64; 4],
    pub embedded: Vec<f64>,
}

impl GeomFeature {
    pub fn new(bi: &BBox, bj: &BBox, eps: f64, d_h: usize) -> Result<Self> {
        let raw = relative_geometry(bi, bj, eps)?;
        let embedded = sinusoidal_embed(&raw, d_h)?;
        Ok(GeomFeature { raw, embedded })
    }
}
