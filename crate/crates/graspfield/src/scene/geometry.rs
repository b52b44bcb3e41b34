//! Planar polygon math: containment, distances, insets and intersection
//! tests. Everything is f64; these functions define the ground truth the
//! learned field is evaluated against.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A planar region bounded by one outer contour (counter-clockwise) and
/// zero or more hole contours (clockwise). Every contour is a simple
/// polygon; holes make ring-like objects representable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasePolygon {
    pub outer: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub holes: Vec<Vec<[f64; 2]>>,
}

impl BasePolygon {
    pub fn simple(outer: Vec<[f64; 2]>) -> Self {
        BasePolygon { outer, holes: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.outer.len() < 3 {
            return Err(Error::InvalidConfig("outer contour needs at least 3 vertices".into()));
        }
        if !is_simple_ring(&self.outer) {
            return Err(Error::InvalidConfig("outer contour self-intersects".into()));
        }
        if signed_area(&self.outer) <= 0.0 {
            return Err(Error::InvalidConfig("outer contour must wind counter-clockwise".into()));
        }
        for h in &self.holes {
            if h.len() < 3 || !is_simple_ring(h) {
                return Err(Error::InvalidConfig("hole contour is degenerate".into()));
            }
            if signed_area(h) >= 0.0 {
                return Err(Error::InvalidConfig("hole contours must wind clockwise".into()));
            }
        }
        Ok(())
    }

    /// Reorders contours to the canonical winding.
    pub fn normalized(mut self) -> Self {
        if signed_area(&self.outer) < 0.0 {
            self.outer.reverse();
        }
        for h in &mut self.holes {
            if signed_area(h) > 0.0 {
                h.reverse();
            }
        }
        self
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        if !point_in_ring(p, &self.outer) {
            return false;
        }
        !self.holes.iter().any(|h| point_in_ring(p, h))
    }

    /// Distance from a point to the nearest contour segment.
    pub fn boundary_distance(&self, p: [f64; 2]) -> f64 {
        let mut d = ring_distance(p, &self.outer);
        for h in &self.holes {
            d = d.min(ring_distance(p, h));
        }
        d
    }

    /// Region area: outer minus holes.
    pub fn area(&self) -> f64 {
        let mut a = signed_area(&self.outer);
        for h in &self.holes {
            a += signed_area(h); // holes are clockwise, negative area
        }
        a
    }

    /// The region eroded by `r`: every contour's edges shift toward the
    /// material side. Valid while every feature is wider than `2r`, which
    /// holds for the shipped object table (3 cm bars, 2 mm insets).
    pub fn inset(&self, r: f64) -> BasePolygon {
        BasePolygon {
            outer: inset_ring(&self.outer, r),
            holes: self.holes.iter().map(|h| inset_ring(h, r)).collect(),
        }
    }

    pub fn bbox(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for v in &self.outer {
            for a in 0..2 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        (lo, hi)
    }
}

/// Shoelace area; positive for counter-clockwise winding.
pub fn signed_area(ring: &[[f64; 2]]) -> f64 {
    let n = ring.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        acc += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * acc
}

/// Even-odd containment test; boundary points count as inside closely
/// enough for sampling purposes.
pub fn point_in_ring(p: [f64; 2], ring: &[[f64; 2]]) -> bool {
    let n = ring.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = (ring[i][0], ring[i][1]);
        let (xj, yj) = (ring[j][0], ring[j][1]);
        if (yi > p[1]) != (yj > p[1]) {
            let x_cross = (xj - xi) * (p[1] - yi) / (yj - yi) + xi;
            if p[0] < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

pub fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1]];
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
}

pub fn ring_distance(p: [f64; 2], ring: &[[f64; 2]]) -> f64 {
    let n = ring.len();
    let mut d = f64::INFINITY;
    for i in 0..n {
        d = d.min(segment_distance(p, ring[i], ring[(i + 1) % n]));
    }
    d
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0]) - 1e-12
        && p[0] <= a[0].max(b[0]) + 1e-12
        && p[1] >= a[1].min(b[1]) - 1e-12
        && p[1] <= a[1].max(b[1]) + 1e-12
}

pub fn segments_intersect(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let o1 = orient(a, b, c);
    let o2 = orient(a, b, d);
    let o3 = orient(c, d, a);
    let o4 = orient(c, d, b);
    if ((o1 > 0.0) != (o2 > 0.0)) && ((o3 > 0.0) != (o4 > 0.0)) && o1 != 0.0 && o2 != 0.0 && o3 != 0.0 && o4 != 0.0 {
        return true;
    }
    (o1 == 0.0 && on_segment(a, b, c))
        || (o2 == 0.0 && on_segment(a, b, d))
        || (o3 == 0.0 && on_segment(c, d, a))
        || (o4 == 0.0 && on_segment(c, d, b))
}

fn is_simple_ring(ring: &[[f64; 2]]) -> bool {
    let n = ring.len();
    for i in 0..n {
        let (a1, a2) = (ring[i], ring[(i + 1) % n]);
        for j in i + 1..n {
            // skip segments sharing an endpoint
            if j == i || (j + 1) % n == i || j == (i + 1) % n {
                continue;
            }
            let (b1, b2) = (ring[j], ring[(j + 1) % n]);
            if segments_intersect(a1, a2, b1, b2) {
                return false;
            }
        }
    }
    true
}

/// True when the polygons overlap: any edges cross, or one contains the
/// other. The exact oracle used to audit spawned scenes.
pub fn rings_intersect(a: &[[f64; 2]], b: &[[f64; 2]]) -> bool {
    let na = a.len();
    let nb = b.len();
    for i in 0..na {
        for j in 0..nb {
            if segments_intersect(a[i], a[(i + 1) % na], b[j], b[(j + 1) % nb]) {
                return true;
            }
        }
    }
    point_in_ring(a[0], b) || point_in_ring(b[0], a)
}

/// Shifts every edge of a contour toward its left side by `r` and
/// re-intersects consecutive edges. For a counter-clockwise outer contour
/// the left side is the interior (the contour shrinks); for a clockwise
/// hole it is the material (the hole grows).
pub fn inset_ring(ring: &[[f64; 2]], r: f64) -> Vec<[f64; 2]> {
    let n = ring.len();
    let mut shifted: Vec<([f64; 2], [f64; 2])> = Vec::with_capacity(n);
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        let d = [b[0] - a[0], b[1] - a[1]];
        let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
        let dir = [d[0] / len, d[1] / len];
        let normal = [-dir[1], dir[0]];
        shifted.push(([a[0] + r * normal[0], a[1] + r * normal[1]], dir));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let prev = (i + n - 1) % n;
        let (p1, d1) = shifted[prev];
        let (p2, d2) = shifted[i];
        let cross = d1[0] * d2[1] - d1[1] * d2[0];
        if cross.abs() < 1e-12 {
            out.push(p2);
        } else {
            let t = ((p2[0] - p1[0]) * d2[1] - (p2[1] - p1[1]) * d2[0]) / cross;
            out.push([p1[0] + t * d1[0], p1[1] + t * d1[1]]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(half: f64) -> Vec<[f64; 2]> {
        vec![[-half, -half], [half, -half], [half, half], [-half, half]]
    }

    #[test]
    fn shoelace_signs_follow_winding() {
        let sq = square(1.0);
        assert!((signed_area(&sq) - 4.0).abs() < 1e-12);
        let mut rev = sq.clone();
        rev.reverse();
        assert!((signed_area(&rev) + 4.0).abs() < 1e-12);
    }

    #[test]
    fn containment_with_holes() {
        let base = BasePolygon {
            outer: square(0.04),
            holes: vec![{
                let mut h = square(0.02);
                h.reverse();
                h
            }],
        };
        base.validate().unwrap();
        assert!(base.contains([0.03, 0.0]));
        assert!(!base.contains([0.0, 0.0])); // in the hole
        assert!(!base.contains([0.05, 0.0])); // outside
        assert!((base.area() - (0.08 * 0.08 - 0.04 * 0.04)).abs() < 1e-12);
    }

    #[test]
    fn square_inset_shrinks_to_the_expected_area() {
        let base = BasePolygon::simple(square(0.03));
        let inset = base.inset(0.002);
        assert!((inset.area() - 0.056 * 0.056).abs() < 1e-12);
        assert!(inset.contains([0.025, 0.025]));
        assert!(!inset.contains([0.0295, 0.0295]));
    }

    #[test]
    fn ring_inset_grows_the_hole() {
        let base = BasePolygon {
            outer: square(0.04),
            holes: vec![{
                let mut h = square(0.02);
                h.reverse();
                h
            }],
        };
        let inset = base.inset(0.002);
        let outer_want = 0.076 * 0.076;
        let hole_want = 0.044 * 0.044;
        assert!((inset.area() - (outer_want - hole_want)).abs() < 1e-12);
        assert!(!inset.contains([0.021, 0.0])); // swallowed by the grown hole
        assert!(inset.contains([0.03, 0.0]));
    }

    #[test]
    fn nonconvex_inset_preserves_vertex_count_and_containment() {
        // L-shape: inset corners stay where shifted edges meet
        let l = vec![
            [0.0, 0.0],
            [0.09, 0.0],
            [0.09, 0.03],
            [0.03, 0.03],
            [0.03, 0.09],
            [0.0, 0.09],
        ];
        assert!(signed_area(&l) > 0.0);
        let inset = inset_ring(&l, 0.002);
        assert_eq!(inset.len(), l.len());
        // both edges at the reflex corner shift into the material
        assert!((inset[3][0] - 0.028).abs() < 1e-12);
        assert!((inset[3][1] - 0.028).abs() < 1e-12);
        // convex corner shifts diagonally inward
        assert!((inset[0][0] - 0.002).abs() < 1e-12);
        assert!((inset[0][1] - 0.002).abs() < 1e-12);
        let base = BasePolygon::simple(inset);
        assert!(base.contains([0.045, 0.015]));
        assert!(!base.contains([0.001, 0.001]));
    }

    #[test]
    fn segment_distance_basics() {
        let d = segment_distance([0.0, 1.0], [-1.0, 0.0], [1.0, 0.0]);
        assert!((d - 1.0).abs() < 1e-12);
        let d = segment_distance([3.0, 0.0], [-1.0, 0.0], [1.0, 0.0]);
        assert!((d - 2.0).abs() < 1e-12);
    }

    #[test]
    fn intersection_oracle_detects_overlap_and_containment() {
        let a = square(1.0);
        let mut b = square(0.5);
        assert!(rings_intersect(&a, &b)); // contained
        for v in &mut b {
            v[0] += 3.0;
        }
        assert!(!rings_intersect(&a, &b)); // disjoint
        for v in &mut b {
            v[0] -= 1.6;
        }
        assert!(rings_intersect(&a, &b)); // crossing edges
    }

    #[test]
    fn self_intersecting_ring_is_rejected() {
        let bowtie = vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        assert!(!is_simple_ring(&bowtie));
        assert!(BasePolygon::simple(bowtie).validate().is_err());
    }
}
