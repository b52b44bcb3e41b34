//! Ground-truth grasp oracles: valid top-surface regions, positive/negative
//! sampling and the nearest-valid-grasp distance that defines translation
//! error.

use super::geometry::BasePolygon;
use super::{GraspCandidate, GraspLabel, SceneSpec, NEGATIVE_CLEARANCE, TOP_INSET};
use crate::error::{Error, Result};
use rand::Rng;

/// Per-object valid region: the top face eroded by [`TOP_INSET`], at the
/// object's top height.
fn valid_regions(scene: &SceneSpec) -> Vec<(BasePolygon, f64)> {
    scene
        .objects
        .iter()
        .map(|o| (o.spec.base.inset(TOP_INSET), scene.table_height + o.spec.height))
        .collect()
}

/// Exact Euclidean distance from a world point to the nearest point of the
/// union of valid top-surface regions.
///
/// Inside a region's footprint the nearest point is straight below/above;
/// outside it sits on the region boundary lifted to the top height.
pub fn nearest_valid_distance(x: [f64; 3], scene: &SceneSpec) -> Result<f64> {
    if scene.objects.is_empty() {
        return Err(Error::EmptyScene);
    }
    let mut best = f64::INFINITY;
    for (obj, (region, top)) in scene.objects.iter().zip(valid_regions(scene)) {
        let local = obj.world_to_local([x[0], x[1]]);
        let dz = x[2] - top;
        let d = if region.contains(local) {
            dz.abs()
        } else {
            let d2 = region.boundary_distance(local);
            (d2 * d2 + dz * dz).sqrt()
        };
        best = best.min(d);
    }
    Ok(best)
}

/// Samples a valid grasp: uniform over the union of inset top surfaces,
/// approach direction straight down.
pub fn sample_positive_grasp(scene: &SceneSpec, rng: &mut impl Rng) -> Result<GraspLabel> {
    if scene.objects.is_empty() {
        return Err(Error::EmptyScene);
    }
    let regions = valid_regions(scene);
    let areas: Vec<f64> = regions.iter().map(|(r, _)| r.area().max(0.0)).collect();
    let total: f64 = areas.iter().sum();
    if total <= 0.0 {
        return Err(Error::EmptyScene);
    }
    let mut pick = rng.gen_range(0.0..total);
    let mut idx = 0;
    for (i, &a) in areas.iter().enumerate() {
        if pick < a {
            idx = i;
            break;
        }
        pick -= a;
        idx = i;
    }
    let (region, top) = &regions[idx];
    let obj = &scene.objects[idx];
    let (lo, hi) = region.bbox();
    // rejection sampling inside the eroded region is uniform over it
    loop {
        let p = [rng.gen_range(lo[0]..hi[0]), rng.gen_range(lo[1]..hi[1])];
        if region.contains(p) {
            let w = obj.local_to_world(p);
            return Ok(GraspLabel {
                pose: GraspCandidate { x: [w[0], w[1], *top], d: GraspCandidate::DOWN },
                success: 1,
            });
        }
    }
}

/// Samples `n` failing grasps uniformly over the workspace volume, all with
/// the fixed downward direction; draws within [`NEGATIVE_CLEARANCE`] of the
/// valid set are re-drawn.
pub fn sample_negative_grasps(scene: &SceneSpec, n: usize, rng: &mut impl Rng) -> Result<Vec<GraspLabel>> {
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one negative sample".into()));
    }
    let (lo, hi) = scene.volume_box();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x = [
            rng.gen_range(lo[0]..hi[0]),
            rng.gen_range(lo[1]..hi[1]),
            rng.gen_range(lo[2]..hi[2]),
        ];
        if !scene.objects.is_empty() && nearest_valid_distance(x, scene)? < NEGATIVE_CLEARANCE {
            continue;
        }
        out.push(GraspLabel {
            pose: GraspCandidate { x, d: GraspCandidate::DOWN },
            success: 0,
        });
    }
    Ok(out)
}
