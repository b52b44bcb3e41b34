//! Pinhole camera model: projection, ray generation and sampling of points
//! along rays.
//!
//! Convention: extrinsics map world to camera coordinates, camera looks
//! down +Z, +X is right in the image and +Y is down. Pixel centers sit at
//! integer coordinates and (u, v) stay continuous throughout.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidConfig(format!("focal lengths must be positive: {} {}", self.fx, self.fy)));
        }
        if self.cx < 0.0 || self.cx >= self.width as f64 || self.cy < 0.0 || self.cy >= self.height as f64 {
            return Err(Error::InvalidConfig(format!(
                "principal point ({}, {}) outside {}x{}",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }
}

/// World-to-camera rotation and translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraExtrinsics {
    /// Row-major 3x3 orthonormal matrix.
    pub rotation: [[f64; 3]; 3],
    /// Meters.
    pub translation: [f64; 3],
}

impl CameraExtrinsics {
    pub fn identity() -> Self {
        CameraExtrinsics {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
        }
    }

    /// Checks R^T R = I and det R = +1 to 1e-6.
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(Error::InvalidConfig(format!(
                        "rotation is not orthonormal: (R^T R)[{i}][{j}] = {dot}"
                    )));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!("rotation determinant {det} != 1")));
        }
        Ok(())
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// Applies R^T (camera direction to world direction).
    pub fn rotate_to_world(&self, d: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * d[0] + r[1][0] * d[1] + r[2][0] * d[2],
            r[0][1] * d[0] + r[1][1] * d[1] + r[2][1] * d[2],
            r[0][2] * d[0] + r[1][2] * d[1] + r[2][2] * d[2],
        ]
    }

    /// Camera center in world coordinates, -R^T t.
    pub fn center(&self) -> [f64; 3] {
        let t = self.translation;
        let w = self.rotate_to_world(t);
        [-w[0], -w[1], -w[2]]
    }

    /// World-to-camera pose for a camera at `eye` looking at `target` with
    /// `up` roughly opposing the image's downward axis.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3]) -> Result<Self> {
        let fwd = normalize(sub(target, eye))?;
        let right = normalize(cross(fwd, up))?;
        let down = cross(fwd, right);
        let rotation = [right, down, fwd];
        let mut ext = CameraExtrinsics { rotation, translation: [0.0; 3] };
        let re = [
            rotation[0][0] * eye[0] + rotation[0][1] * eye[1] + rotation[0][2] * eye[2],
            rotation[1][0] * eye[0] + rotation[1][1] * eye[1] + rotation[1][2] * eye[2],
            rotation[2][0] * eye[0] + rotation[2][1] * eye[1] + rotation[2][2] * eye[2],
        ];
        ext.translation = [-re[0], -re[1], -re[2]];
        ext.validate()?;
        Ok(ext)
    }
}

/// Serialized camera description, the on-disk JSON format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraJson {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// 9 row-major values.
    pub rotation: Vec<f64>,
    /// 3 values, meters.
    pub translation: Vec<f64>,
}

impl CameraJson {
    pub fn pack(k: &CameraIntrinsics, rt: &CameraExtrinsics) -> Self {
        CameraJson {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            rotation: rt.rotation.iter().flatten().copied().collect(),
            translation: rt.translation.to_vec(),
        }
    }

    pub fn unpack(&self) -> Result<(CameraIntrinsics, CameraExtrinsics)> {
        if self.rotation.len() != 9 || self.translation.len() != 3 {
            return Err(Error::InvalidConfig("camera JSON needs 9 rotation and 3 translation values".into()));
        }
        let k = CameraIntrinsics {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        };
        let rt = CameraExtrinsics {
            rotation: [
                [self.rotation[0], self.rotation[1], self.rotation[2]],
                [self.rotation[3], self.rotation[4], self.rotation[5]],
                [self.rotation[6], self.rotation[7], self.rotation[8]],
            ],
            translation: [self.translation[0], self.translation[1], self.translation[2]],
        };
        k.validate()?;
        rt.validate()?;
        Ok((k, rt))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    /// Unit length.
    pub direction: [f64; 3],
}

/// Points sampled along one ray, ordered by distance from the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub positions: Vec<[f64; 3]>,
    /// Segment lengths; the last one closes the interval to `far`.
    pub deltas: Vec<f64>,
    pub near: f64,
    pub far: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Bin midpoints; deterministic.
    Uniform,
    /// One uniform draw per bin.
    Stratified,
}

/// Projects a world point to continuous pixel coordinates.
pub fn project(x: [f64; 3], k: &CameraIntrinsics, rt: &CameraExtrinsics) -> Result<(f64, f64)> {
    let c = rt.to_camera(x);
    if c[2] <= 0.0 {
        return Err(Error::BehindCamera { z: c[2] });
    }
    Ok((k.fx * c[0] / c[2] + k.cx, k.fy * c[1] / c[2] + k.cy))
}

/// Ray through a pixel: `project(origin + s * direction) == (u, v)` for all s > 0.
pub fn ray_for_pixel(u: f64, v: f64, k: &CameraIntrinsics, rt: &CameraExtrinsics) -> Ray {
    let dir_cam = [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0];
    let dir_world = rt.rotate_to_world(dir_cam);
    let n = (dir_world[0] * dir_world[0] + dir_world[1] * dir_world[1] + dir_world[2] * dir_world[2]).sqrt();
    Ray {
        origin: rt.center(),
        direction: [dir_world[0] / n, dir_world[1] / n, dir_world[2] / n],
    }
}

/// Samples `n` points in `[near, far]` along the ray. Stratified mode draws
/// one uniform offset per bin from `rng`.
pub fn sample_along_ray(
    ray: &Ray,
    near: f64,
    far: f64,
    n: usize,
    mode: SampleMode,
    rng: &mut impl Rng,
) -> Result<RaySamples> {
    if !(0.0 < near && near < far) {
        return Err(Error::InvalidConfig(format!("need 0 < near < far, got {near}..{far}")));
    }
    if n < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 samples, got {n}")));
    }
    let bin = (far - near) / n as f64;
    let mut ts = Vec::with_capacity(n);
    for i in 0..n {
        let offset = match mode {
            SampleMode::Uniform => 0.5,
            SampleMode::Stratified => rng.gen::<f64>(),
        };
        ts.push(near + (i as f64 + offset) * bin);
    }
    // one sample per bin, so each sample's quadrature weight is the bin
    // width; for midpoint sampling this equals the successive distances.
    // Either way the deltas telescope to exactly far - near.
    let deltas = vec![bin; n];
    let positions = ts
        .iter()
        .map(|&t| {
            [
                ray.origin[0] + t * ray.direction[0],
                ray.origin[1] + t * ray.direction[1],
                ray.origin[2] + t * ray.direction[2],
            ]
        })
        .collect();
    Ok(RaySamples { positions, deltas, near, far })
}

/// Bilinear interpolation in an `[h*w, c]` feature map at continuous pixel
/// coordinates; outside coordinates clamp to the border.
pub fn bilinear_sample(map: &crate::tensor::Tensor, height: usize, width: usize, u: f32, v: f32) -> Result<Vec<f32>> {
    if map.rows() != height * width || height == 0 || width == 0 {
        return Err(Error::ShapeMismatch {
            op: "bilinear_sample",
            detail: format!("map {:?} vs {}x{}", map.shape(), height, width),
        });
    }
    let c = map.cols();
    let lk = crate::tensor::lookup_bilinear(u, v, height, width);
    let (w00, w01, w10, w11) = lk.weights();
    let d = map.data();
    let mut out = vec![0.0f32; c];
    for j in 0..c {
        out[j] = w00 * d[lk.i00 * c + j] + w01 * d[lk.i01 * c + j] + w10 * d[lk.i10 * c + j] + w11 * d[lk.i11 * c + j];
    }
    Ok(out)
}

/// Ray/axis-aligned-box intersection; returns the `[near, far]` span inside
/// the box or `None` when the ray misses it.
pub fn ray_box_span(ray: &Ray, lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, f64)> {
    let mut t0 = 1e-4f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let inv = 1.0 / ray.direction[a];
        let (mut ta, mut tb) = ((lo[a] - ray.origin[a]) * inv, (hi[a] - ray.origin[a]) * inv);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 >= t1 {
            return None;
        }
    }
    Some((t0, t1))
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> Result<[f64; 3]> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n < 1e-12 {
        return Err(Error::InvalidConfig("cannot normalize a zero vector".into()));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}
