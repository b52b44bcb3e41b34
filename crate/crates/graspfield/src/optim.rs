//! Gradient-based grasp pose optimization: a population of candidates
//! descends `-score` with per-candidate Adam and a decaying learning rate,
//! keeping the approach direction fixed and clamping positions to the
//! inflated workspace box.

use crate::error::{Error, Result};
use crate::field::{
    build_pose_bundle, compute_feature_map, stamp_params, theta_for_view, CameraObservation,
    FeatureSource, ModelParams, PoseInput, Trainable,
};
use crate::scene::{GraspCandidate, SceneSpec};
use crate::tensor::{adam_step, AdamHyper, AdamState, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Score under the first observation only.
    OneView,
    /// Sum of scores over exactly three observations.
    ThreeViews,
}

impl ObjectiveKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ObjectiveKind::OneView => "1-view",
            ObjectiveKind::ThreeViews => "3-views",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerRunConfig {
    pub n_candidates: usize,
    pub max_iters: usize,
    pub lr0: f64,
    pub decay: f64,
    pub snapshot_iters: Vec<usize>,
    pub objective: ObjectiveKind,
    pub fixed_direction: [f64; 3],
    pub seed: u64,
    /// Candidates evaluated per tape; affects memory only.
    pub chunk_size: usize,
}

impl Default for OptimizerRunConfig {
    fn default() -> Self {
        OptimizerRunConfig {
            n_candidates: 1 << 13,
            max_iters: 16,
            lr0: 0.05,
            decay: 0.8,
            snapshot_iters: vec![8, 12, 16],
            objective: ObjectiveKind::ThreeViews,
            fixed_direction: GraspCandidate::DOWN,
            seed: 0,
            chunk_size: 2048,
        }
    }
}

impl OptimizerRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_candidates == 0 || self.max_iters == 0 || self.chunk_size == 0 {
            return Err(Error::InvalidConfig("candidates, iters and chunk size must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidConfig(format!("decay {} outside (0, 1]", self.decay)));
        }
        if self.lr0 <= 0.0 {
            return Err(Error::InvalidConfig("lr0 must be positive".into()));
        }
        for &s in &self.snapshot_iters {
            if s == 0 || s > self.max_iters {
                return Err(Error::InvalidConfig(format!(
                    "snapshot iteration {s} outside 1..={}",
                    self.max_iters
                )));
            }
        }
        let d = self.fixed_direction;
        let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!("fixed direction norm {n} != 1")));
        }
        Ok(())
    }

    /// Learning rate at iteration `t` (0-based): `lr0 * decay^t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        self.lr0 * self.decay.powi(t as i32)
    }
}

/// A differentiable score field over positions; the pose optimizer only
/// sees this interface, so the learned field and closed-form test fields
/// run the identical recipe.
pub trait ScoreField {
    /// Scores for each position and, when requested, d(score)/d(position).
    fn scores_and_grads(&self, xs: &[[f64; 3]], want_grads: bool)
        -> Result<(Vec<f32>, Option<Vec<[f64; 3]>>)>;
}

/// The learned objective: grasp score summed over the selected views.
pub struct FieldObjective<'a> {
    params: &'a ModelParams,
    views: Vec<&'a CameraObservation>,
    maps: Vec<Tensor>,
    direction: [f64; 3],
    chunk_size: usize,
}

impl<'a> FieldObjective<'a> {
    pub fn new(
        params: &'a ModelParams,
        observations: &'a [CameraObservation],
        kind: ObjectiveKind,
        direction: [f64; 3],
        chunk_size: usize,
    ) -> Result<Self> {
        let views: Vec<&CameraObservation> = match kind {
            ObjectiveKind::OneView => {
                if observations.is_empty() {
                    return Err(Error::InvalidConfig("1-view objective needs an observation".into()));
                }
                vec![&observations[0]]
            }
            ObjectiveKind::ThreeViews => {
                if observations.len() != 3 {
                    return Err(Error::InvalidConfig(format!(
                        "3-views objective needs exactly 3 observations, got {}",
                        observations.len()
                    )));
                }
                observations.iter().collect()
            }
        };
        let maps = views
            .iter()
            .map(|o| {
                o.validate()?;
                compute_feature_map(params, &o.image)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FieldObjective { params, views, maps, direction, chunk_size })
    }

    fn eval_chunk(
        &self,
        xs: &[[f64; 3]],
        want_grads: bool,
        scores: &mut [f32],
        grads: Option<&mut [[f64; 3]]>,
    ) -> Result<()> {
        let cfg = &self.params.config;
        let flat: Vec<f32> = xs.iter().flat_map(|p| p.iter().map(|&v| v as f32)).collect();
        let mut grad_acc = vec![[0.0f64; 3]; if want_grads { xs.len() } else { 0 }];
        for (view, map) in self.views.iter().zip(self.maps.iter()) {
            let mut tape = Tape::new();
            let nodes = stamp_params(
                &mut tape,
                self.params,
                Trainable { encoder: false, core: false, head: false },
            );
            let x = tape.leaf(Tensor::new(vec![xs.len(), 3], flat.clone())?, want_grads);
            let bundle = build_pose_bundle(&mut tape, cfg, PoseInput::Node(x), self.direction)?;
            let theta = theta_for_view(
                &mut tape,
                cfg,
                &nodes,
                &bundle,
                &view.intrinsics,
                &view.extrinsics,
                FeatureSource::Cached(map),
            )?;
            for (s, &v) in scores.iter_mut().zip(tape.value(theta).data()) {
                *s += v;
            }
            if want_grads {
                // descending -score: each row's score depends only on its
                // own position, so the batch gradient decomposes per row
                let neg = tape.neg(theta)?;
                let loss = tape.sum_all(neg)?;
                let g = tape.backward(loss)?;
                let gx = g.or_zeros(&tape, x);
                for (row, acc) in gx.data().chunks(3).zip(grad_acc.iter_mut()) {
                    acc[0] += row[0] as f64;
                    acc[1] += row[1] as f64;
                    acc[2] += row[2] as f64;
                }
            }
        }
        if let Some(gout) = grads {
            gout.copy_from_slice(&grad_acc);
        }
        Ok(())
    }
}

impl ScoreField for FieldObjective<'_> {
    fn scores_and_grads(
        &self,
        xs: &[[f64; 3]],
        want_grads: bool,
    ) -> Result<(Vec<f32>, Option<Vec<[f64; 3]>>)> {
        let mut scores = vec![0.0f32; xs.len()];
        let mut grads = if want_grads { vec![[0.0f64; 3]; xs.len()] } else { Vec::new() };
        let mut start = 0;
        while start < xs.len() {
            let end = (start + self.chunk_size).min(xs.len());
            let g = if want_grads { Some(&mut grads[start..end]) } else { None };
            self.eval_chunk(&xs[start..end], want_grads, &mut scores[start..end], g)?;
            start = end;
        }
        Ok((scores, if want_grads { Some(grads) } else { None }))
    }
}

/// The differentiable objective value for one candidate pose.
pub fn objective(
    g: &GraspCandidate,
    observations: &[CameraObservation],
    kind: ObjectiveKind,
    params: &ModelParams,
) -> Result<f32> {
    g.validate()?;
    let field = FieldObjective::new(params, observations, kind, g.d, 1)?;
    let (scores, _) = field.scores_and_grads(&[g.x], false)?;
    Ok(scores[0])
}

/// Position and score of one candidate after a given iteration count.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Snapshot {
    pub iter: usize,
    pub position: [f64; 3],
    pub score: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateTrajectory {
    /// Original candidate index; the ranking tie-break.
    pub candidate: usize,
    pub snapshots: Vec<Snapshot>,
    pub final_score: f32,
    /// Position in the final descending-score order.
    pub rank: usize,
}

/// Runs the optimization recipe against any score field: uniform candidate
/// initialization in `volume`, per-candidate Adam on positions with
/// `lr0 * decay^t`, positions clamped into `clamp_box` after every step,
/// snapshots recorded after the configured iteration counts. Candidates
/// that ever produce a non-finite score or gradient are dropped from the
/// ranking. The result is sorted by final score, descending.
pub fn optimize_with(
    field: &dyn ScoreField,
    volume: ([f64; 3], [f64; 3]),
    clamp_box: ([f64; 3], [f64; 3]),
    config: &OptimizerRunConfig,
) -> Result<Vec<CandidateTrajectory>> {
    config.validate()?;
    let n = config.n_candidates;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // positions are f32, matching the tensor substrate the scores come from
    let mut params: Vec<f32> = (0..n)
        .flat_map(|_| {
            [
                rng.gen_range(volume.0[0]..volume.1[0]) as f32,
                rng.gen_range(volume.0[1]..volume.1[1]) as f32,
                rng.gen_range(volume.0[2]..volume.1[2]) as f32,
            ]
        })
        .collect();
    let mut xs: Vec<[f64; 3]> = params
        .chunks(3)
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect();
    let mut alive = vec![true; n];
    let mut state = AdamState::new(n * 3);
    let mut snaps: Vec<Vec<Snapshot>> = vec![Vec::new(); n];

    let eval_guarded = |xs: &[[f64; 3]], alive: &mut [bool], want_grads: bool| -> Result<(Vec<f32>, Vec<[f64; 3]>)> {
        // a non-finite anywhere fails the whole batch, so bisect down to
        // the offending candidates and drop just those
        let mut scores = vec![f32::NAN; xs.len()];
        let mut grads = vec![[0.0f64; 3]; xs.len()];
        let mut stack: Vec<(usize, usize)> = vec![(0, xs.len())];
        while let Some((start, end)) = stack.pop() {
            let idx: Vec<usize> = (start..end).filter(|&i| alive[i]).collect();
            if idx.is_empty() {
                continue;
            }
            let pts: Vec<[f64; 3]> = idx.iter().map(|&i| xs[i]).collect();
            match field.scores_and_grads(&pts, want_grads) {
                Ok((s, g)) => {
                    for (j, &i) in idx.iter().enumerate() {
                        scores[i] = s[j];
                        if let Some(g) = &g {
                            grads[i] = g[j];
                        }
                    }
                    let bad: Vec<usize> = idx
                        .iter()
                        .copied()
                        .filter(|&i| {
                            !scores[i].is_finite()
                                || grads[i].iter().any(|v| !v.is_finite())
                        })
                        .collect();
                    for i in bad {
                        alive[i] = false;
                    }
                }
                Err(Error::NonFinite { .. }) if end - start > 1 => {
                    let mid = start + (end - start) / 2;
                    stack.push((start, mid));
                    stack.push((mid, end));
                }
                Err(Error::NonFinite { .. }) => {
                    alive[start] = false;
                }
                Err(e) => return Err(e),
            }
        }
        Ok((scores, grads))
    };

    for t in 0..config.max_iters {
        let (scores, grads) = eval_guarded(&xs, &mut alive, true)?;
        if config.snapshot_iters.contains(&t) {
            for i in 0..n {
                if alive[i] {
                    snaps[i].push(Snapshot { iter: t, position: xs[i], score: scores[i] });
                }
            }
        }
        let lr = config.lr_at(t);
        let hyper = AdamHyper::with_lr(lr as f32);
        // shared step counter; per-element moments keep candidates
        // decoupled, and dead candidates receive zero gradients
        let g32: Vec<f32> = (0..n)
            .flat_map(|i| {
                let g = if alive[i] { grads[i] } else { [0.0; 3] };
                [g[0] as f32, g[1] as f32, g[2] as f32]
            })
            .collect();
        adam_step(&mut params, &g32, &mut state, &hyper)?;
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            for a in 0..3 {
                let v = (params[i * 3 + a] as f64).clamp(clamp_box.0[a], clamp_box.1[a]);
                params[i * 3 + a] = v as f32;
                xs[i][a] = v;
            }
        }
    }
    let (final_scores, _) = eval_guarded(&xs, &mut alive, false)?;
    if config.snapshot_iters.contains(&config.max_iters) {
        for i in 0..n {
            if alive[i] {
                snaps[i].push(Snapshot {
                    iter: config.max_iters,
                    position: xs[i],
                    score: final_scores[i],
                });
            }
        }
    }

    let mut out: Vec<CandidateTrajectory> = (0..n)
        .filter(|&i| alive[i])
        .map(|i| CandidateTrajectory {
            candidate: i,
            snapshots: snaps[i].clone(),
            final_score: final_scores[i],
            rank: 0,
        })
        .collect();
    out.sort_by(|a, b| {
        b.final_score
            .total_cmp(&a.final_score)
            .then(a.candidate.cmp(&b.candidate))
    });
    for (rank, traj) in out.iter_mut().enumerate() {
        traj.rank = rank;
    }
    Ok(out)
}

/// Optimizes grasp candidates against a trained model on one scene.
pub fn optimize(
    params: &ModelParams,
    observations: &[CameraObservation],
    scene: &SceneSpec,
    config: &OptimizerRunConfig,
) -> Result<Vec<CandidateTrajectory>> {
    config.validate()?;
    let field = FieldObjective::new(
        params,
        observations,
        config.objective,
        config.fixed_direction,
        config.chunk_size,
    )?;
    optimize_with(&field, scene.volume_box(), scene.inflated_box(), config)
}

/// The `k` trajectories with the highest final scores; ties break toward
/// the lower candidate index.
pub fn top_k(trajectories: &[CandidateTrajectory], k: usize) -> Result<Vec<CandidateTrajectory>> {
    if trajectories.len() < k {
        return Err(Error::InvalidConfig(format!(
            "need at least {k} candidates, {} survived",
            trajectories.len()
        )));
    }
    let mut sorted: Vec<&CandidateTrajectory> = trajectories.iter().collect();
    sorted.sort_by(|a, b| {
        b.final_score
            .total_cmp(&a.final_score)
            .then(a.candidate.cmp(&b.candidate))
    });
    Ok(sorted.into_iter().take(k).cloned().collect())
}
