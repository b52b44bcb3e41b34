//! Synthetic tabletop world: prismatic object sets, random scene spawning,
//! ground-truth ray-cast rendering and grasp oracles.

pub mod geometry;
mod objects;
mod oracle;
mod render;
mod spawn;

pub use objects::{make_object_set, object_set_names, ObjectSetName, OBJECT_TABLE_VERSION};
pub use oracle::{nearest_valid_distance, sample_negative_grasps, sample_positive_grasp};
pub use render::{render_scene, Image};
pub use spawn::spawn_scene;

use crate::camera::{CameraExtrinsics, CameraIntrinsics};
use crate::error::{Error, Result};
use geometry::BasePolygon;
use serde::{Deserialize, Serialize};

/// Positives are sampled at least this far from top-surface edges, and the
/// valid-grasp region is eroded by the same amount.
pub const TOP_INSET: f64 = 0.002;
/// Negative grasp samples are re-drawn until they clear the valid set by
/// this margin.
pub const NEGATIVE_CLEARANCE: f64 = 0.005;
/// Height of the sampling volume above the table.
pub const VOLUME_HEIGHT: f64 = 0.1;
/// Fractional inflation applied to the workspace box for ray near/far
/// bounds and optimizer clamping.
pub const BOX_INFLATION: f64 = 0.1;

/// A prismatic object: a base polygon extruded to `height`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub name: String,
    pub base: BasePolygon,
    /// Meters.
    pub height: f64,
    /// RGB in [0, 1].
    pub color: [f32; 3],
}

impl ObjectSpec {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.height <= 0.0 {
            return Err(Error::InvalidConfig(format!("object {} has height {}", self.name, self.height)));
        }
        Ok(())
    }

    /// Radius of the smallest origin-centered circle containing the base.
    pub fn footprint_radius(&self) -> f64 {
        self.base
            .outer
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1]).sqrt())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedObject {
    pub spec: ObjectSpec,
    /// Workspace coordinates of the object origin, meters.
    pub position: [f64; 2],
    /// Radians.
    pub yaw: f64,
}

impl PlacedObject {
    pub fn world_to_local(&self, p: [f64; 2]) -> [f64; 2] {
        let dx = p[0] - self.position[0];
        let dy = p[1] - self.position[1];
        let (s, c) = self.yaw.sin_cos();
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn local_to_world(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [
            c * p[0] - s * p[1] + self.position[0],
            s * p[0] + c * p[1] + self.position[1],
        ]
    }

    /// Outer contour in world coordinates.
    pub fn world_outer(&self) -> Vec<[f64; 2]> {
        self.spec.base.outer.iter().map(|&v| self.local_to_world(v)).collect()
    }
}

/// Axis-aligned workspace bounds in the table plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkspaceBounds {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl WorkspaceBounds {
    /// The 0.5 m x 0.5 m desk workspace centered on the origin.
    pub fn desk() -> Self {
        WorkspaceBounds { min: [-0.25, -0.25], max: [0.25, 0.25] }
    }

    pub fn extent(&self) -> [f64; 2] {
        [self.max[0] - self.min[0], self.max[1] - self.min[1]]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<PlacedObject>,
    pub workspace: WorkspaceBounds,
    pub table_height: f64,
    pub background_color: [f32; 3],
}

impl SceneSpec {
    /// 3D box candidates and negatives are sampled from: the workspace
    /// footprint between the table and `VOLUME_HEIGHT` above it.
    pub fn volume_box(&self) -> ([f64; 3], [f64; 3]) {
        (
            [self.workspace.min[0], self.workspace.min[1], self.table_height],
            [self.workspace.max[0], self.workspace.max[1], self.table_height + VOLUME_HEIGHT],
        )
    }

    /// The volume box inflated by `BOX_INFLATION` per axis; rays sample
    /// inside it and the pose optimizer clamps to it.
    pub fn inflated_box(&self) -> ([f64; 3], [f64; 3]) {
        let (lo, hi) = self.volume_box();
        let mut ilo = [0.0; 3];
        let mut ihi = [0.0; 3];
        for a in 0..3 {
            let pad = (hi[a] - lo[a]) * BOX_INFLATION * 0.5;
            ilo[a] = lo[a] - pad;
            ihi[a] = hi[a] + pad;
        }
        (ilo, ihi)
    }

    pub fn validate(&self) -> Result<()> {
        for o in &self.objects {
            o.spec.validate()?;
        }
        for (i, a) in self.objects.iter().enumerate() {
            for b in self.objects.iter().skip(i + 1) {
                if geometry::rings_intersect(&a.world_outer(), &b.world_outer()) {
                    return Err(Error::InvalidConfig(format!(
                        "footprints of {} and {} intersect",
                        a.spec.name, b.spec.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A grasp pose: position plus unit approach direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspCandidate {
    /// Meters, world frame.
    pub x: [f64; 3],
    /// Unit vector.
    pub d: [f64; 3],
}

impl GraspCandidate {
    /// Straight-down grasp, the fixed direction for 3DoF tasks.
    pub const DOWN: [f64; 3] = [0.0, 0.0, -1.0];

    pub fn validate(&self) -> Result<()> {
        let n = (self.d[0] * self.d[0] + self.d[1] * self.d[1] + self.d[2] * self.d[2]).sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!("grasp direction norm {n} != 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspLabel {
    pub pose: GraspCandidate,
    /// 1 for a valid grasp, 0 otherwise.
    pub success: u8,
}

/// Inflated sampling/clamping box of the default desk workspace, for
/// callers that have a camera but no scene at hand.
pub fn desk_inflated_box() -> ([f64; 3], [f64; 3]) {
    SceneSpec {
        objects: vec![],
        workspace: WorkspaceBounds::desk(),
        table_height: 0.0,
        background_color: [0.0; 3],
    }
    .inflated_box()
}

/// The three fixed cameras: 0.8 m from the workspace center, pitched 45
/// degrees down, 120 degrees apart in azimuth.
pub fn standard_cameras(width: usize, height: usize) -> Vec<(CameraIntrinsics, CameraExtrinsics)> {
    let radius = 0.8;
    let pitch = std::f64::consts::FRAC_PI_4;
    let fx = 85.0 * width as f64 / 96.0;
    let fy = 85.0 * height as f64 / 96.0;
    let k = CameraIntrinsics {
        fx,
        fy,
        cx: (width as f64 - 1.0) / 2.0,
        cy: (height as f64 - 1.0) / 2.0,
        width,
        height,
    };
    (0..3)
        .map(|i| {
            let az = 2.0 * std::f64::consts::PI * i as f64 / 3.0;
            let eye = [
                radius * pitch.cos() * az.cos(),
                radius * pitch.cos() * az.sin(),
                radius * pitch.sin(),
            ];
            let rt = CameraExtrinsics::look_at(eye, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0])
                .expect("standard camera pose is well formed");
            (k, rt)
        })
        .collect()
}

/// Camera pose on the standard viewing sphere, for novel-view rendering.
pub fn orbit_camera(
    width: usize,
    height: usize,
    azimuth_deg: f64,
    pitch_deg: f64,
    radius: f64,
) -> Result<(CameraIntrinsics, CameraExtrinsics)> {
    if radius <= 0.05 {
        return Err(Error::InvalidConfig(format!("orbit radius {radius} too small")));
    }
    let az = azimuth_deg.to_radians();
    let pitch = pitch_deg.to_radians();
    let k = CameraIntrinsics {
        fx: 85.0 * width as f64 / 96.0,
        fy: 85.0 * height as f64 / 96.0,
        cx: (width as f64 - 1.0) / 2.0,
        cy: (height as f64 - 1.0) / 2.0,
        width,
        height,
    };
    let eye = [
        radius * pitch.cos() * az.cos(),
        radius * pitch.cos() * az.sin(),
        radius * pitch.sin(),
    ];
    let rt = CameraExtrinsics::look_at(eye, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0])?;
    Ok((k, rt))
}
