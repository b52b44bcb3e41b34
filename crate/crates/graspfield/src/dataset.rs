//! On-disk artifacts: scene datasets (`scenes/<id>/meta.json` plus
//! `cam{0,1,2}.png`), run manifests, and PNG encode/decode. PNG is the only
//! image format.

use crate::camera::CameraJson;
use crate::error::{Error, Result};
use crate::field::CameraObservation;
use crate::scene::{
    render_scene, sample_positive_grasp, spawn_scene, standard_cameras, GraspLabel, Image,
    ObjectSpec, SceneSpec,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// One scene with its fixed-camera observations and grasp labels; the
/// in-memory form of a `scenes/<id>/` directory.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub id: String,
    pub scene: SceneSpec,
    pub observations: Vec<CameraObservation>,
    pub labels: Vec<GraspLabel>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneMeta {
    format_version: u32,
    scene: SceneSpec,
    cameras: Vec<CameraJson>,
    labels: Vec<GraspLabel>,
}

pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), image.width as u32, image.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&image.to_rgb8())?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Image> {
    let file = fs::File::open(path)?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::BadDataset(format!("{} is not 8-bit RGB", path.display())));
    }
    Image::from_rgb8(info.width as usize, info.height as usize, &buf[..info.buffer_size()])
}

/// Writes one scene directory.
pub fn save_scene_sample(dir: &Path, sample: &SceneSample) -> Result<()> {
    fs::create_dir_all(dir)?;
    let cameras: Vec<CameraJson> = sample
        .observations
        .iter()
        .map(|o| CameraJson::pack(&o.intrinsics, &o.extrinsics))
        .collect();
    let meta = SceneMeta {
        format_version: DATASET_FORMAT_VERSION,
        scene: sample.scene.clone(),
        cameras,
        labels: sample.labels.clone(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    for (i, obs) in sample.observations.iter().enumerate() {
        write_png(&dir.join(format!("cam{i}.png")), &obs.image)?;
    }
    Ok(())
}

pub fn load_scene_sample(dir: &Path) -> Result<SceneSample> {
    let meta: SceneMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    if meta.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: meta.format_version,
            supported: DATASET_FORMAT_VERSION,
        });
    }
    let mut observations = Vec::with_capacity(meta.cameras.len());
    for (i, cam) in meta.cameras.iter().enumerate() {
        let (k, rt) = cam.unpack()?;
        let image = read_png(&dir.join(format!("cam{i}.png")))?;
        let obs = CameraObservation { image, intrinsics: k, extrinsics: rt };
        obs.validate()?;
        observations.push(obs);
    }
    let id = dir.file_name().and_then(|s| s.to_str()).unwrap_or("scene").to_string();
    Ok(SceneSample { id, scene: meta.scene, observations, labels: meta.labels })
}

/// Builds one scene in memory: spawn, render the three fixed cameras,
/// sample one positive grasp.
pub fn synth_scene(
    set: &[ObjectSpec],
    objects: usize,
    width: usize,
    height: usize,
    rng: &mut ChaCha8Rng,
    id: String,
) -> Result<SceneSample> {
    let scene = spawn_scene(set, objects, rng)?;
    let mut observations = Vec::with_capacity(3);
    for (k, rt) in standard_cameras(width, height) {
        let image = render_scene(&scene, &k, &rt)?;
        observations.push(CameraObservation { image, intrinsics: k, extrinsics: rt });
    }
    let positive = sample_positive_grasp(&scene, rng)?;
    Ok(SceneSample { id, scene, observations, labels: vec![positive] })
}

/// Configuration echo written next to every command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub code_version: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_clock_secs: f64,
}

/// Tracks a command run and writes `run_manifest.json` on completion.
pub struct RunScope {
    manifest: RunManifest,
    started: Instant,
    dir: PathBuf,
}

impl RunScope {
    pub fn begin(dir: &Path, command: &str, seed: u64, config: serde_json::Value) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(RunScope {
            manifest: RunManifest {
                format_version: DATASET_FORMAT_VERSION,
                command: command.to_string(),
                config,
                seed,
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                wall_clock_secs: 0.0,
            },
            started: Instant::now(),
            dir: dir.to_path_buf(),
        })
    }

    pub fn record_input(&mut self, path: &Path) {
        self.manifest.inputs.push(path.display().to_string());
    }

    pub fn record_output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    pub fn finish(mut self) -> Result<()> {
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        fs::write(self.dir.join("run_manifest.json"), serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(())
    }
}

/// Generates `scenes` scene directories under `out/scenes/`.
pub fn synth_dataset(
    out: &Path,
    set: &[ObjectSpec],
    scenes: usize,
    objects_per_scene: usize,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dirs = Vec::with_capacity(scenes);
    for i in 0..scenes {
        let id = format!("scene_{i:04}");
        let sample = synth_scene(set, objects_per_scene, width, height, &mut rng, id.clone())?;
        let dir = out.join("scenes").join(&id);
        save_scene_sample(&dir, &sample)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Loads every scene under `root/scenes/`, sorted by directory name.
pub fn load_dataset(root: &Path) -> Result<Vec<SceneSample>> {
    let scenes_dir = root.join("scenes");
    let mut dirs: Vec<PathBuf> = fs::read_dir(&scenes_dir)
        .map_err(|e| Error::BadDataset(format!("{}: {e}", scenes_dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::BadDataset(format!("no scenes under {}", scenes_dir.display())));
    }
    dirs.iter().map(|d| load_scene_sample(d)).collect()
}

/// Pixel indices (row-major) whose rays intersect the scene's sampling box.
pub fn rays_hitting_box(
    k: &crate::camera::CameraIntrinsics,
    rt: &crate::camera::CameraExtrinsics,
    scene: &SceneSpec,
) -> Vec<usize> {
    let (lo, hi) = scene.inflated_box();
    let mut out = Vec::new();
    for pix in 0..k.width * k.height {
        let (x, y) = (pix % k.width, pix / k.width);
        let ray = crate::camera::ray_for_pixel(x as f64, y as f64, k, rt);
        if let Some((near, far)) = crate::camera::ray_box_span(&ray, lo, hi) {
            if far > near + 1e-6 {
                out.push(pix);
            }
        }
    }
    out
}
