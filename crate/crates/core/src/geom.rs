//! Convex polygon helpers for gaze footprints.

use alloc::vec::Vec;

use crate::image::PixelCoord;
use crate::warp::{Gaze, PatchGrid};

/// Corners of the warped patch footprint, counter-clockwise.
pub fn gaze_quad(u: &Gaze, grid: &PatchGrid) -> [PixelCoord; 4] {
    grid.footprint().map(|p| u.warp(p))
}

/// Signed shoelace area; positive for counter-clockwise in a y-up frame.
pub fn signed_area(poly: &[PixelCoord]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        acc += p.x * q.y - q.x * p.y;
    }
    0.5 * acc
}

pub fn area(poly: &[PixelCoord]) -> f64 {
    signed_area(poly).abs()
}

fn oriented(poly: &[PixelCoord]) -> Vec<PixelCoord> {
    let mut v = poly.to_vec();
    if signed_area(&v) < 0.0 {
        v.reverse();
    }
    v
}

/// Sutherland–Hodgman clipping of `subject` against the convex `clip`.
pub fn clip_convex(subject: &[PixelCoord], clip: &[PixelCoord]) -> Vec<PixelCoord> {
    let clip = oriented(clip);
    let mut out = oriented(subject);
    let n = clip.len();
    for i in 0..n {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % n]);
        let side = |p: PixelCoord| (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
        let input = core::mem::take(&mut out);
        let m = input.len();
        for j in 0..m {
            let (p, q) = (input[j], input[(j + 1) % m]);
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push(PixelCoord::new(
                    p.x + t * (q.x - p.x),
                    p.y + t * (q.y - p.y),
                ));
            }
        }
    }
    out
}

/// Intersection-over-union of two convex polygons; 0 if either is degenerate.
pub fn convex_iou(a: &[PixelCoord], b: &[PixelCoord]) -> f64 {
    let (area_a, area_b) = (area(a), area(b));
    if !(area_a > 0.0 && area_b > 0.0) {
        return 0.0;
    }
    let inter = area(&clip_convex(a, b));
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Fraction of the polygon's area inside the rectangle `[x0, x1] × [y0, y1]`.
pub fn fraction_inside(poly: &[PixelCoord], x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let a = area(poly);
    if a <= 0.0 {
        return 0.0;
    }
    let rect = [
        PixelCoord::new(x0, y0),
        PixelCoord::new(x1, y0),
        PixelCoord::new(x1, y1),
        PixelCoord::new(x0, y1),
    ];
    area(&clip_convex(poly, &rect)) / a
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> [PixelCoord; 4] {
        [
            PixelCoord::new(x0, y0),
            PixelCoord::new(x1, y0),
            PixelCoord::new(x1, y1),
            PixelCoord::new(x0, y1),
        ]
    }

    #[test]
    fn rectangle_overlaps() {
        let a = rect(0.0, 0.0, 2.0, 2.0);
        assert!((convex_iou(&a, &a) - 1.0).abs() < 1e-15);
        let b = rect(1.0, 0.0, 3.0, 2.0);
        assert!((convex_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        let c = rect(5.0, 5.0, 6.0, 6.0);
        assert_eq!(convex_iou(&a, &c), 0.0);
        let mut rev = b;
        rev.reverse();
        assert!((convex_iou(&a, &rev) - 1.0 / 3.0).abs() < 1e-15);
        assert!((fraction_inside(&b, 0.0, 0.0, 2.0, 2.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn degenerate_polygon_has_zero_iou() {
        let a = rect(0.0, 0.0, 2.0, 2.0);
        let flat = rect(0.0, 1.0, 2.0, 1.0);
        assert_eq!(convex_iou(&a, &flat), 0.0);
    }
}
