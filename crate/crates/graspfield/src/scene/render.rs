//! Ground-truth renderer: per-pixel ray casting against the prisms with
//! flat Lambertian shading, one directional light, nearest hit wins.

use super::spawn::TABLE_COLOR;
use super::SceneSpec;
use crate::camera::{ray_for_pixel, CameraExtrinsics, CameraIntrinsics, Ray};
use crate::error::{Error, Result};
use crate::parallel::for_each_row_chunk;
use crate::tensor::Tensor;

const AMBIENT: f32 = 0.35;
const DIFFUSE: f32 = 0.65;
/// Unit vector toward the light.
const LIGHT: [f64; 3] = [-0.330_17, 0.235_84, 0.913_98];

/// Row-major RGB image with components in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, pixels: vec![0.0; width * height * 3] }
    }

    pub fn rgb_at(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// `[h*w, 3]` tensor view of the pixels.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.width * self.height, 3], self.pixels.clone()).expect("pixel count matches")
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, data: &[u8]) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::BadDataset(format!(
                "rgb8 buffer {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Image {
            width,
            height,
            pixels: data.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }
}

struct Wall {
    a: [f64; 2],
    /// Unit edge direction and edge length.
    dir: [f64; 2],
    len: f64,
    /// Outward horizontal normal.
    normal: [f64; 2],
}

struct Prism {
    top: f64,
    bottom: f64,
    color: [f32; 3],
    walls: Vec<Wall>,
    /// World-space contours for the top-face containment test.
    outer: Vec<[f64; 2]>,
    holes: Vec<Vec<[f64; 2]>>,
}

fn build_prisms(scene: &SceneSpec) -> Vec<Prism> {
    scene
        .objects
        .iter()
        .map(|obj| {
            let outer: Vec<[f64; 2]> = obj.spec.base.outer.iter().map(|&v| obj.local_to_world(v)).collect();
            let holes: Vec<Vec<[f64; 2]>> = obj
                .spec
                .base
                .holes
                .iter()
                .map(|h| h.iter().map(|&v| obj.local_to_world(v)).collect())
                .collect();
            let mut walls = Vec::new();
            for ring in std::iter::once(&outer).chain(holes.iter()) {
                let n = ring.len();
                for i in 0..n {
                    let a = ring[i];
                    let b = ring[(i + 1) % n];
                    let d = [b[0] - a[0], b[1] - a[1]];
                    let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
                    let dir = [d[0] / len, d[1] / len];
                    walls.push(Wall { a, dir, len, normal: [dir[1], -dir[0]] });
                }
            }
            Prism {
                top: scene.table_height + obj.spec.height,
                bottom: scene.table_height,
                color: obj.spec.color,
                walls,
                outer,
                holes,
            }
        })
        .collect()
}

fn in_contours(p: [f64; 2], outer: &[[f64; 2]], holes: &[Vec<[f64; 2]>]) -> bool {
    super::geometry::point_in_ring(p, outer) && !holes.iter().any(|h| super::geometry::point_in_ring(p, h))
}

fn shade(albedo: [f32; 3], normal: [f64; 3]) -> [f32; 3] {
    let ndotl = (normal[0] * LIGHT[0] + normal[1] * LIGHT[1] + normal[2] * LIGHT[2]).max(0.0) as f32;
    let k = AMBIENT + DIFFUSE * ndotl;
    [albedo[0] * k, albedo[1] * k, albedo[2] * k]
}

fn trace(ray: &Ray, scene: &SceneSpec, prisms: &[Prism]) -> [f32; 3] {
    let mut best_t = f64::INFINITY;
    let mut color = scene.background_color;

    // table plane over the workspace
    if ray.direction[2].abs() > 1e-12 {
        let t = (scene.table_height - ray.origin[2]) / ray.direction[2];
        if t > 1e-9 && t < best_t {
            let p = [ray.origin[0] + t * ray.direction[0], ray.origin[1] + t * ray.direction[1]];
            if scene.workspace.contains(p) {
                best_t = t;
                color = shade(TABLE_COLOR, [0.0, 0.0, 1.0]);
            }
        }
    }

    for prism in prisms {
        // top face
        if ray.direction[2].abs() > 1e-12 {
            let t = (prism.top - ray.origin[2]) / ray.direction[2];
            if t > 1e-9 && t < best_t {
                let p = [ray.origin[0] + t * ray.direction[0], ray.origin[1] + t * ray.direction[1]];
                if in_contours(p, &prism.outer, &prism.holes) {
                    best_t = t;
                    color = shade(prism.color, [0.0, 0.0, 1.0]);
                }
            }
        }
        // side walls
        for wall in &prism.walls {
            let denom = wall.normal[0] * ray.direction[0] + wall.normal[1] * ray.direction[1];
            if denom.abs() < 1e-12 {
                continue;
            }
            let t = (wall.normal[0] * (wall.a[0] - ray.origin[0]) + wall.normal[1] * (wall.a[1] - ray.origin[1])) / denom;
            if t <= 1e-9 || t >= best_t {
                continue;
            }
            let q = [
                ray.origin[0] + t * ray.direction[0],
                ray.origin[1] + t * ray.direction[1],
                ray.origin[2] + t * ray.direction[2],
            ];
            if q[2] < prism.bottom || q[2] > prism.top {
                continue;
            }
            let s = (q[0] - wall.a[0]) * wall.dir[0] + (q[1] - wall.a[1]) * wall.dir[1];
            if s < 0.0 || s > wall.len {
                continue;
            }
            best_t = t;
            color = shade(prism.color, [wall.normal[0], wall.normal[1], 0.0]);
        }
    }
    color
}

/// Renders the scene from a camera. Deterministic: same scene and camera
/// produce a bit-identical image.
pub fn render_scene(scene: &SceneSpec, k: &CameraIntrinsics, rt: &CameraExtrinsics) -> Result<Image> {
    k.validate()?;
    rt.validate()?;
    let prisms = build_prisms(scene);
    let mut img = Image::new(k.width, k.height);
    let row_width = k.width * 3;
    for_each_row_chunk(&mut img.pixels, row_width, |first_row, chunk| {
        for (dy, row) in chunk.chunks_mut(row_width).enumerate() {
            let y = first_row + dy;
            for x in 0..k.width {
                let ray = ray_for_pixel(x as f64, y as f64, k, rt);
                let c = trace(&ray, scene, &prisms);
                row[x * 3..x * 3 + 3].copy_from_slice(&c);
            }
        }
    });
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{make_object_set, spawn_scene, standard_cameras, ObjectSetName, PlacedObject, WorkspaceBounds};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn empty_scene() -> SceneSpec {
        SceneSpec {
            objects: vec![],
            workspace: WorkspaceBounds::desk(),
            table_height: 0.0,
            background_color: super::super::spawn::DEFAULT_BACKGROUND,
        }
    }

    #[test]
    fn empty_scene_is_table_and_background_only() {
        let (k, rt) = &standard_cameras(48, 48)[0];
        let img = render_scene(&empty_scene(), k, rt).unwrap();
        let table = shade(TABLE_COLOR, [0.0, 0.0, 1.0]);
        let bg = super::super::spawn::DEFAULT_BACKGROUND;
        for y in 0..48 {
            for x in 0..48 {
                let c = img.rgb_at(x, y);
                let is_table = (0..3).all(|i| (c[i] - table[i]).abs() < 1e-6);
                let is_bg = (0..3).all(|i| (c[i] - bg[i]).abs() < 1e-6);
                assert!(is_table || is_bg, "pixel ({x},{y}) = {c:?}");
            }
        }
        // the center of the workspace is table
        let c = img.rgb_at(24, 24);
        assert!((0..3).all(|i| (c[i] - table[i]).abs() < 1e-6));
    }

    #[test]
    fn top_down_camera_sees_the_top_face_color() {
        let set = make_object_set(ObjectSetName::MultiA).unwrap();
        let square = set[1].clone(); // green square
        let mut scene = empty_scene();
        scene.objects.push(PlacedObject { spec: square.clone(), position: [0.0, 0.0], yaw: 0.0 });
        let (k, rt) = crate::scene::orbit_camera(64, 64, 0.0, 89.9, 0.8).unwrap();
        let img = render_scene(&scene, &k, &rt).unwrap();
        let c = img.rgb_at(31, 31);
        let want = shade(square.color, [0.0, 0.0, 1.0]);
        for i in 0..3 {
            assert!((c[i] - want[i]).abs() < 1e-5, "{c:?} vs {want:?}");
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let set = make_object_set(ObjectSetName::MultiB).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scene = spawn_scene(&set, 5, &mut rng).unwrap();
        let (k, rt) = &standard_cameras(96, 96)[1];
        let a = render_scene(&scene, k, rt).unwrap();
        let b = render_scene(&scene, k, rt).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn doubling_the_base_doubles_the_silhouette() {
        // a near-orthographic camera far above the table
        let mk_square = |half: f64| crate::scene::ObjectSpec {
            name: "probe".into(),
            base: crate::scene::geometry::BasePolygon::simple(vec![
                [-half, -half],
                [half, -half],
                [half, half],
                [-half, half],
            ]),
            height: 0.02,
            color: [1.0, 0.0, 0.0],
        };
        let k = CameraIntrinsics {
            fx: 8000.0,
            fy: 8000.0,
            cx: 63.5,
            cy: 63.5,
            width: 128,
            height: 128,
        };
        let rt = CameraExtrinsics::look_at([0.0, 1e-6, 8.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]).unwrap();
        let extent = |half: f64| -> usize {
            let mut scene = empty_scene();
            scene.objects.push(PlacedObject { spec: mk_square(half), position: [0.0, 0.0], yaw: 0.0 });
            let img = render_scene(&scene, &k, &rt).unwrap();
            (0..128)
                .filter(|&x| {
                    let c = img.rgb_at(x, 64);
                    c[0] > 0.5 && c[1] < 0.3
                })
                .count()
        };
        let small = extent(0.01);
        let large = extent(0.02);
        assert!(small > 5, "small silhouette {small}px");
        assert!(
            (large as i64 - 2 * small as i64).abs() <= 1,
            "{large} vs 2x{small}"
        );
    }

    #[test]
    fn ring_hole_shows_table_through_it() {
        let set = make_object_set(ObjectSetName::MultiC).unwrap();
        let ring = set[3].clone();
        let mut scene = empty_scene();
        scene.objects.push(PlacedObject { spec: ring.clone(), position: [0.0, 0.0], yaw: 0.0 });
        let (k, rt) = crate::scene::orbit_camera(96, 96, 0.0, 89.9, 0.8).unwrap();
        let img = render_scene(&scene, &k, &rt).unwrap();
        let center = img.rgb_at(47, 47);
        let table = shade(TABLE_COLOR, [0.0, 0.0, 1.0]);
        for i in 0..3 {
            assert!((center[i] - table[i]).abs() < 1e-5, "center {center:?}");
        }
        // a point over the ring material is purple-ish
        let (u, v) = crate::camera::project([0.03, 0.0, 0.05], &k, &rt).unwrap();
        let c = img.rgb_at(u.round() as usize, v.round() as usize);
        let want = shade(ring.color, [0.0, 0.0, 1.0]);
        for i in 0..3 {
            assert!((c[i] - want[i]).abs() < 1e-5, "ring {c:?} vs {want:?}");
        }
    }
}
