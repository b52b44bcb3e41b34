//! Task runner and metrics: translation error against the valid-grasp
//! oracle, best-success and lowest-from-5 per snapshot, episode
//! decomposition for multi-object tasks, and report tables.

use crate::error::{Error, Result};
use crate::field::{CameraObservation, ModelParams};
use crate::optim::{optimize, CandidateTrajectory, ObjectiveKind, OptimizerRunConfig};
use crate::scene::{
    make_object_set, nearest_valid_distance, render_scene, spawn_scene, standard_cameras,
    ObjectSetName, SceneSpec,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SingleObject,
    MultiA,
    MultiB,
    MultiC,
}

impl TaskKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "single_object" | "single" => Ok(TaskKind::SingleObject),
            "multi_A" | "multi_a" => Ok(TaskKind::MultiA),
            "multi_B" | "multi_b" => Ok(TaskKind::MultiB),
            "multi_C" | "multi_c" => Ok(TaskKind::MultiC),
            other => Err(Error::InvalidConfig(format!("unknown task {other}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::SingleObject => "single_object",
            TaskKind::MultiA => "multi_A",
            TaskKind::MultiB => "multi_B",
            TaskKind::MultiC => "multi_C",
        }
    }

    /// Table row label.
    pub fn short(&self) -> &'static str {
        match self {
            TaskKind::SingleObject => "so",
            TaskKind::MultiA => "mo-A",
            TaskKind::MultiB => "mo-B",
            TaskKind::MultiC => "mo-C",
        }
    }

    pub fn object_set(&self) -> ObjectSetName {
        match self {
            TaskKind::SingleObject => ObjectSetName::Single,
            TaskKind::MultiA => ObjectSetName::MultiA,
            TaskKind::MultiB => ObjectSetName::MultiB,
            TaskKind::MultiC => ObjectSetName::MultiC,
        }
    }

    fn default_objects(&self) -> usize {
        match self {
            TaskKind::SingleObject => 1,
            _ => 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Scene evaluations; multi-object tasks decompose episodes into 5
    /// scenes each, so this must be a multiple of 5 there.
    pub n_scenes: usize,
    pub seed: u64,
    /// Override for the initial objects per episode.
    pub objects_per_scene: Option<usize>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_scenes == 0 {
            return Err(Error::InvalidConfig("n_scenes must be >= 1".into()));
        }
        let objects = self.objects_per_scene.unwrap_or_else(|| self.kind.default_objects());
        if self.kind != TaskKind::SingleObject {
            if self.n_scenes % objects != 0 {
                return Err(Error::InvalidConfig(format!(
                    "{} scenes do not decompose into {}-scene episodes",
                    self.n_scenes, objects
                )));
            }
        } else if objects != 1 {
            return Err(Error::InvalidConfig("single-object task spawns one object".into()));
        }
        Ok(())
    }
}

/// Distance from a predicted grasp position to the nearest valid grasp.
pub fn translation_error(x: [f64; 3], scene: &SceneSpec) -> Result<f64> {
    nearest_valid_distance(x, scene)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Top5Entry {
    pub candidate: usize,
    pub position: [f64; 3],
    pub score: f32,
    pub translation_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scene_id: String,
    pub snapshot_iter: usize,
    /// Highest-scoring five candidates at this snapshot, score-descending.
    pub top5: Vec<Top5Entry>,
    /// Error of the single highest-scoring candidate.
    pub best_success_error: f64,
    /// Lowest error among the five.
    pub lowest_from_5_error: f64,
}

/// best-success and lowest-from-5 from a sorted top-5 slice.
pub fn score_snapshot(top5: &[Top5Entry]) -> Result<(f64, f64)> {
    if top5.len() != 5 {
        return Err(Error::InvalidConfig(format!("expected 5 entries, got {}", top5.len())));
    }
    for w in top5.windows(2) {
        if w[0].score < w[1].score {
            return Err(Error::InvalidConfig("top-5 entries must be sorted by score, descending".into()));
        }
    }
    let best_success = top5[0].translation_error;
    let lowest = top5.iter().map(|e| e.translation_error).fold(f64::INFINITY, f64::min);
    Ok((best_success, lowest))
}

/// Top five candidates of one snapshot iteration across trajectories.
fn snapshot_top5(trajectories: &[CandidateTrajectory], iter: usize, scene: &SceneSpec) -> Result<Vec<Top5Entry>> {
    let mut entries: Vec<(usize, [f64; 3], f32)> = trajectories
        .iter()
        .filter_map(|t| {
            t.snapshots
                .iter()
                .find(|s| s.iter == iter)
                .map(|s| (t.candidate, s.position, s.score))
        })
        .collect();
    if entries.len() < 5 {
        return Err(Error::InvalidConfig(format!(
            "only {} candidates survive at snapshot {iter}",
            entries.len()
        )));
    }
    entries.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    entries
        .into_iter()
        .take(5)
        .map(|(candidate, position, score)| {
            Ok(Top5Entry {
                candidate,
                position,
                score,
                translation_error: translation_error(position, scene)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: TaskKind,
    pub objective: ObjectiveKind,
    pub records: Vec<EvalRecord>,
    /// Mean/median errors (meters) keyed by snapshot iteration.
    pub mean_best_success: BTreeMap<usize, f64>,
    pub mean_lowest_from_5: BTreeMap<usize, f64>,
    pub median_best_success: BTreeMap<usize, f64>,
    pub median_lowest_from_5: BTreeMap<usize, f64>,
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn aggregate(task: TaskKind, objective: ObjectiveKind, records: Vec<EvalRecord>) -> TaskResult {
    let mut by_iter: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &records {
        let slot = by_iter.entry(r.snapshot_iter).or_default();
        slot.0.push(r.best_success_error);
        slot.1.push(r.lowest_from_5_error);
    }
    let mut mean_best = BTreeMap::new();
    let mut mean_low = BTreeMap::new();
    let mut med_best = BTreeMap::new();
    let mut med_low = BTreeMap::new();
    for (iter, (mut best, mut low)) in by_iter {
        mean_best.insert(iter, best.iter().sum::<f64>() / best.len() as f64);
        mean_low.insert(iter, low.iter().sum::<f64>() / low.len() as f64);
        med_best.insert(iter, median(&mut best));
        med_low.insert(iter, median(&mut low));
    }
    TaskResult {
        task,
        objective,
        records,
        mean_best_success: mean_best,
        mean_lowest_from_5: mean_low,
        median_best_success: med_best,
        median_lowest_from_5: med_low,
    }
}

fn evaluate_scene(
    scene: &SceneSpec,
    scene_id: &str,
    params: &ModelParams,
    opt: &OptimizerRunConfig,
) -> Result<(Vec<EvalRecord>, [f64; 3])> {
    let cams = standard_cameras(params.config.image_width, params.config.image_height);
    let observations: Vec<CameraObservation> = cams
        .iter()
        .map(|(k, rt)| {
            Ok(CameraObservation {
                image: render_scene(scene, k, rt)?,
                intrinsics: *k,
                extrinsics: *rt,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let trajectories = optimize(params, &observations, scene, opt)?;
    let mut records = Vec::with_capacity(opt.snapshot_iters.len());
    let mut final_best = None;
    let mut iters = opt.snapshot_iters.clone();
    iters.sort_unstable();
    for &iter in &iters {
        let top5 = snapshot_top5(&trajectories, iter, scene)?;
        let (best_success, lowest) = score_snapshot(&top5)?;
        if iter == *iters.last().unwrap() {
            final_best = Some(top5[0].position);
        }
        records.push(EvalRecord {
            scene_id: scene_id.to_string(),
            snapshot_iter: iter,
            top5,
            best_success_error: best_success,
            lowest_from_5_error: lowest,
        });
    }
    Ok((records, final_best.expect("at least one snapshot")))
}

/// Index of the object whose valid region lies nearest to a position.
fn nearest_object(scene: &SceneSpec, x: [f64; 3]) -> Result<usize> {
    let mut best = (f64::INFINITY, 0);
    for i in 0..scene.objects.len() {
        let single = SceneSpec {
            objects: vec![scene.objects[i].clone()],
            ..scene.clone()
        };
        let d = nearest_valid_distance(x, &single)?;
        if d < best.0 {
            best = (d, i);
        }
    }
    Ok(best.1)
}

/// Runs a task: spawns scenes (multi-object tasks run 5-scene removal
/// episodes), renders the three fixed cameras, optimizes grasp candidates
/// and scores every configured snapshot.
pub fn run_task(task: &TaskSpec, params: &ModelParams, opt: &OptimizerRunConfig) -> Result<TaskResult> {
    task.validate()?;
    opt.validate()?;
    let set = make_object_set(task.kind.object_set())?;
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let mut records = Vec::new();

    if task.kind == TaskKind::SingleObject {
        for i in 0..task.n_scenes {
            let scene = spawn_scene(&set, 1, &mut rng)?;
            // per-scene optimizer seeds derive from the task seed
            let scene_opt = OptimizerRunConfig { seed: task.seed.wrapping_add(i as u64 + 1), ..opt.clone() };
            let (recs, _) = evaluate_scene(&scene, &format!("scene_{i:04}"), params, &scene_opt)?;
            records.extend(recs);
        }
    } else {
        let episode_len = task.objects_per_scene.unwrap_or_else(|| task.kind.default_objects());
        let episodes = task.n_scenes / episode_len;
        for e in 0..episodes {
            let mut scene = spawn_scene(&set, episode_len, &mut rng)?;
            for step in 0..episode_len {
                let id = format!("episode_{e:02}_step_{step}");
                let scene_opt = OptimizerRunConfig {
                    seed: task.seed.wrapping_add((e * episode_len + step) as u64 + 1),
                    ..opt.clone()
                };
                let (recs, best) = evaluate_scene(&scene, &id, params, &scene_opt)?;
                records.extend(recs);
                if step + 1 < episode_len {
                    // remove the object nearest the best-success grasp
                    let idx = nearest_object(&scene, best)?;
                    scene.objects.remove(idx);
                }
            }
        }
    }
    Ok(aggregate(task.kind, opt.objective, records))
}

/// Long-form report rows: task, model, objective, snapshot, metric, mm.
pub fn write_eval_report_csv(path: &Path, model_label: &str, result: &TaskResult) -> Result<()> {
    let mut text = String::from("task,model,objective,snapshot_iter,metric,value_mm\n");
    let blocks: [(&str, &BTreeMap<usize, f64>); 4] = [
        ("best_success_mean", &result.mean_best_success),
        ("lowest_from_5_mean", &result.mean_lowest_from_5),
        ("best_success_median", &result.median_best_success),
        ("lowest_from_5_median", &result.median_lowest_from_5),
    ];
    for (metric, map) in blocks {
        for (iter, value) in map {
            text.push_str(&format!(
                "{},{},{},{},{},{}\n",
                result.task.as_str(),
                model_label,
                result.objective.as_str(),
                iter,
                metric,
                value * 1000.0
            ));
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Wide table mirroring the per-task mean errors at the final snapshot for
/// the 3-views objective: one block per metric, rows are tasks, columns
/// are model labels, cells in mm with two decimals.
pub fn aggregate_report(inputs: &[std::path::PathBuf], out: &Path) -> Result<()> {
    // (task, model, metric) -> value at the largest snapshot
    let mut cells: BTreeMap<(String, String, String), (usize, f64)> = BTreeMap::new();
    let mut models: Vec<String> = Vec::new();
    let mut tasks: Vec<String> = Vec::new();
    for path in inputs {
        let text = std::fs::read_to_string(path)?;
        for line in text.lines().skip(1) {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 6 {
                return Err(Error::BadDataset(format!("malformed report row: {line}")));
            }
            let (task, model, objective, iter, metric, value) =
                (parts[0], parts[1], parts[2], parts[3], parts[4], parts[5]);
            if objective != "3-views" {
                continue;
            }
            if !metric.ends_with("_mean") {
                continue;
            }
            let iter: usize = iter
                .parse()
                .map_err(|_| Error::BadDataset(format!("bad snapshot column: {line}")))?;
            let value: f64 = value
                .parse()
                .map_err(|_| Error::BadDataset(format!("bad value column: {line}")))?;
            let key = (task.to_string(), model.to_string(), metric.to_string());
            let slot = cells.entry(key).or_insert((0, 0.0));
            if iter >= slot.0 {
                *slot = (iter, value);
            }
            if !models.contains(&model.to_string()) {
                models.push(model.to_string());
            }
            if !tasks.contains(&task.to_string()) {
                tasks.push(task.to_string());
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::BadDataset("no 3-views mean rows found in the inputs".into()));
    }
    let mut text = String::new();
    for (metric, title) in [
        ("best_success_mean", "best-success"),
        ("lowest_from_5_mean", "lowest-from-5"),
    ] {
        text.push_str(&format!("{title},{}\n", models.join(",")));
        for task in &tasks {
            let short = TaskKind::parse(task).map(|k| k.short().to_string()).unwrap_or_else(|_| task.clone());
            let row: Vec<String> = models
                .iter()
                .map(|m| {
                    cells
                        .get(&(task.clone(), m.clone(), metric.to_string()))
                        .map(|(_, v)| format!("{v:.2}"))
                        .unwrap_or_default()
                })
                .collect();
            text.push_str(&format!("{},{}\n", short, row.join(",")));
        }
    }
    std::fs::write(out, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{GraspCandidate, WorkspaceBounds};
    use rand::Rng;

    fn entry(score: f32, err_mm: f64) -> Top5Entry {
        Top5Entry {
            candidate: 0,
            position: [0.0; 3],
            score,
            translation_error: err_mm / 1000.0,
        }
    }

    #[test]
    fn snapshot_metrics_follow_their_definitions() {
        let top5 = vec![
            entry(0.9, 4.0),
            entry(0.8, 1.0),
            entry(0.7, 2.0),
            entry(0.6, 9.0),
            entry(0.5, 5.0),
        ];
        let (best, low) = score_snapshot(&top5).unwrap();
        assert!((best - 0.004).abs() < 1e-12);
        assert!((low - 0.001).abs() < 1e-12);
    }

    #[test]
    fn equal_errors_make_the_metrics_agree() {
        let top5: Vec<Top5Entry> = (0..5).map(|i| entry(1.0 - i as f32 * 0.1, 3.0)).collect();
        let (best, low) = score_snapshot(&top5).unwrap();
        assert_eq!(best, low);
    }

    #[test]
    fn lowest_from_5_never_exceeds_best_success() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let mut scores: Vec<f32> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
            scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let top5: Vec<Top5Entry> = scores
                .iter()
                .map(|&s| entry(s, rng.gen_range(0.0..30.0)))
                .collect();
            let (best, low) = score_snapshot(&top5).unwrap();
            assert!(low <= best);
        }
    }

    #[test]
    fn wrong_count_or_unsorted_input_is_rejected() {
        let four: Vec<Top5Entry> = (0..4).map(|i| entry(1.0 - i as f32 * 0.1, 1.0)).collect();
        assert!(score_snapshot(&four).is_err());
        let unsorted = vec![entry(0.1, 1.0), entry(0.9, 1.0), entry(0.5, 1.0), entry(0.4, 1.0), entry(0.3, 1.0)];
        assert!(score_snapshot(&unsorted).is_err());
    }

    #[test]
    fn translation_error_delegates_to_the_oracle() {
        let set = make_object_set(ObjectSetName::Single).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let scene = spawn_scene(&set, 1, &mut rng).unwrap();
        let c = scene.objects[0].position;
        assert!(translation_error([c[0], c[1], 0.05], &scene).unwrap() < 1e-12);
        let d = translation_error([c[0], c[1], 0.053], &scene).unwrap();
        assert!((d - 0.003).abs() < 1e-12);
    }

    #[test]
    fn task_validation_enforces_episode_decomposition() {
        let bad = TaskSpec { kind: TaskKind::MultiA, n_scenes: 7, seed: 0, objects_per_scene: None };
        assert!(bad.validate().is_err());
        let good = TaskSpec { kind: TaskKind::MultiA, n_scenes: 10, seed: 0, objects_per_scene: None };
        good.validate().unwrap();
    }

    #[test]
    fn aggregate_means_match_an_independent_pass() {
        let recs: Vec<EvalRecord> = (0..10)
            .map(|i| EvalRecord {
                scene_id: format!("s{i}"),
                snapshot_iter: 16,
                top5: vec![],
                best_success_error: 0.001 * (i + 1) as f64,
                lowest_from_5_error: 0.0005 * (i + 1) as f64,
            })
            .collect();
        let want_best: f64 = recs.iter().map(|r| r.best_success_error).sum::<f64>() / 10.0;
        let want_low: f64 = recs.iter().map(|r| r.lowest_from_5_error).sum::<f64>() / 10.0;
        let result = aggregate(TaskKind::SingleObject, ObjectiveKind::ThreeViews, recs);
        assert!((result.mean_best_success[&16] - want_best).abs() < 1e-12);
        assert!((result.mean_lowest_from_5[&16] - want_low).abs() < 1e-12);
        assert!((result.median_best_success[&16] - 0.0055).abs() < 1e-12);
    }

    #[test]
    fn report_table_carries_two_decimal_mm_cells() {
        let dir = std::env::temp_dir().join(format!("gf_report_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let recs = vec![EvalRecord {
            scene_id: "s0".into(),
            snapshot_iter: 16,
            top5: vec![],
            best_success_error: 0.00341,
            lowest_from_5_error: 0.00105,
        }];
        let result = aggregate(TaskKind::MultiB, ObjectiveKind::ThreeViews, recs);
        let long = dir.join("eval_report.csv");
        write_eval_report_csv(&long, "frozen", &result).unwrap();
        let table = dir.join("table1.csv");
        aggregate_report(&[long], &table).unwrap();
        let text = std::fs::read_to_string(&table).unwrap();
        assert!(text.contains("best-success,frozen"), "{text}");
        assert!(text.contains("mo-B,3.41"), "{text}");
        assert!(text.contains("lowest-from-5"), "{text}");
        assert!(text.contains("mo-B,1.05"), "{text}");
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn episode_removal_targets_the_nearest_object() {
        let set = make_object_set(ObjectSetName::MultiA).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let scene = spawn_scene(&set, 5, &mut rng).unwrap();
        // probe directly above each object's centroid-ish position
        for (i, obj) in scene.objects.iter().enumerate() {
            let p = obj.position;
            let x = [p[0], p[1], scene.table_height + obj.spec.height];
            // the cross/L/T shapes all contain their bbox center, so the
            // nearest object to a point on its own top face is itself
            assert_eq!(nearest_object(&scene, x).unwrap(), i);
        }
        let _ = (GraspCandidate::DOWN, WorkspaceBounds::desk());
    }
}
