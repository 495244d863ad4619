//! Lifting 2D keypoint observations to bone-length-feasible 3D poses.
//!
//! The camera model is orthographic: a 3D joint (x, y, z) projects to the
//! observation (x, y). Depth is recovered by projected gradient descent on
//! a confidence-weighted reprojection objective with a squared depth-change
//! prior between consecutive frames; after every step the pose is projected
//! back onto the constraint set by rescaling bones from the root outward.
//! Depth sign is inherently ambiguous, so new chains start on the positive
//! branch and the finished sequence is flipped if needed so the mean joint
//! depth does not sit behind the root.

use crate::error::{Error, Result};
use crate::skeleton::{PoseFrame, PoseSequence, SkeletonTopology};

/// One observed keypoint: image position plus detector confidence in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub u: f64,
    pub v: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame2D {
    pub points: Vec<Point2>,
}

impl Frame2D {
    /// True when the detector produced nothing usable for this frame.
    pub fn is_blank(&self) -> bool {
        self.points.iter().all(|p| p.confidence == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence2D {
    joint_count: usize,
    fps: f64,
    frames: Vec<Frame2D>,
}

impl Sequence2D {
    pub fn new(joint_count: usize, fps: f64, frames: Vec<Frame2D>) -> Result<Sequence2D> {
        if joint_count == 0 {
            return Err(Error::contract("2d sequence: zero joints"));
        }
        if !(fps > 0.0) || !fps.is_finite() {
            return Err(Error::contract(format!("2d sequence: fps {fps}")));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.points.len() != joint_count {
                return Err(Error::dim(format!(
                    "2d sequence: frame {i} has {} points, expected {joint_count}",
                    f.points.len()
                )));
            }
            for p in &f.points {
                if !(0.0..=1.0).contains(&p.confidence) {
                    return Err(Error::contract(format!(
                        "2d sequence: confidence {} outside [0, 1]",
                        p.confidence
                    )));
                }
            }
        }
        Ok(Sequence2D {
            joint_count,
            fps,
            frames,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Frame2D] {
        &self.frames
    }
}

/// Drop depth, keep x and y, full confidence everywhere.
pub fn project_orthographic(seq: &PoseSequence) -> Sequence2D {
    let frames = seq
        .frames()
        .iter()
        .map(|f| Frame2D {
            points: f
                .joints
                .iter()
                .map(|j| Point2 {
                    u: j[0],
                    v: j[1],
                    confidence: 1.0,
                })
                .collect(),
        })
        .collect();
    Sequence2D::new(seq.joint_count(), seq.fps(), frames).expect("projection keeps shape")
}

/// Project joint positions onto the bone-length constraint set: the root
/// keeps its position, every bone is rescaled to canonical length walking
/// root outward along the original directions, then the whole pose is
/// translated so its mean stays where it was. Already-feasible poses come
/// back unchanged up to rounding.
pub fn ik_refine(positions: &[[f64; 3]], topo: &SkeletonTopology) -> Result<Vec<[f64; 3]>> {
    if positions.len() != topo.joint_count() {
        return Err(Error::dim(format!(
            "ik refine: {} positions for {} joints",
            positions.len(),
            topo.joint_count()
        )));
    }
    let mut out = vec![[0.0f64; 3]; positions.len()];
    out[topo.root()] = positions[topo.root()];
    for b in topo.bones() {
        let p_old = positions[b.parent];
        let c_old = positions[b.child];
        let mut dir = [
            c_old[0] - p_old[0],
            c_old[1] - p_old[1],
            c_old[2] - p_old[2],
        ];
        let mut norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        if norm < 1e-12 {
            // degenerate bone: reuse the parent's incoming direction, or
            // point down the depth axis when the parent is the root
            dir = match topo.parent_of(b.parent) {
                Some(gp) => {
                    let d = [
                        out[b.parent][0] - out[gp][0],
                        out[b.parent][1] - out[gp][1],
                        out[b.parent][2] - out[gp][2],
                    ];
                    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    if n < 1e-12 {
                        [0.0, 0.0, 1.0]
                    } else {
                        [d[0] / n, d[1] / n, d[2] / n]
                    }
                }
                None => [0.0, 0.0, 1.0],
            };
            norm = 1.0;
        } else {
            dir = [dir[0] / norm, dir[1] / norm, dir[2] / norm];
            norm = 1.0;
        }
        let _ = norm;
        let p_new = out[b.parent];
        out[b.child] = [
            p_new[0] + b.length * dir[0],
            p_new[1] + b.length * dir[1],
            p_new[2] + b.length * dir[2],
        ];
    }
    // restore the centroid so the projection is a pure shape correction
    let n = positions.len() as f64;
    let mut shift = [0.0f64; 3];
    for (old, new) in positions.iter().zip(&out) {
        for k in 0..3 {
            shift[k] += (old[k] - new[k]) / n;
        }
    }
    for p in &mut out {
        for k in 0..3 {
            p[k] += shift[k];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
pub struct LiftConfig {
    pub max_iterations: usize,
    /// Relative objective decrease below which a frame counts as converged.
    pub tolerance: f64,
    /// Initial gradient step; backtracking halves it per rejection.
    pub step_size: f64,
    /// Weight of the squared depth-change prior between frames.
    pub depth_weight: f64,
}

impl Default for LiftConfig {
    fn default() -> Self {
        LiftConfig {
            max_iterations: 200,
            tolerance: 1e-10,
            step_size: 0.1,
            depth_weight: 0.1,
        }
    }
}

#[derive(Debug)]
pub struct LiftResult {
    pub sequence: PoseSequence,
    /// Objective value per accepted iterate, one trace per solved frame.
    /// Each trace is non-increasing.
    pub frame_traces: Vec<Vec<f64>>,
    pub converged: bool,
    /// Frames that carried no observations and were interpolated instead.
    pub interpolated_frames: Vec<usize>,
}

fn objective(
    x: &[[f64; 3]],
    obs: &Frame2D,
    prev_z: Option<&[f64]>,
    depth_weight: f64,
) -> f64 {
    let mut f = 0.0;
    for (xi, p) in x.iter().zip(&obs.points) {
        f += p.confidence * ((xi[0] - p.u).powi(2) + (xi[1] - p.v).powi(2));
    }
    if let Some(pz) = prev_z {
        for (xi, z) in x.iter().zip(pz) {
            f += depth_weight * (xi[2] - z).powi(2);
        }
    }
    f
}

fn gradient(
    x: &[[f64; 3]],
    obs: &Frame2D,
    prev_z: Option<&[f64]>,
    depth_weight: f64,
) -> Vec<[f64; 3]> {
    let mut g = vec![[0.0f64; 3]; x.len()];
    for ((gi, xi), p) in g.iter_mut().zip(x).zip(&obs.points) {
        gi[0] = 2.0 * p.confidence * (xi[0] - p.u);
        gi[1] = 2.0 * p.confidence * (xi[1] - p.v);
    }
    if let Some(pz) = prev_z {
        for (gi, (xi, z)) in g.iter_mut().zip(x.iter().zip(pz)) {
            gi[2] += 2.0 * depth_weight * (xi[2] - z);
        }
    }
    g
}

/// Feasible starting pose: the root sits at its observation with depth
/// zero and every bone follows its observed image offset, clamped to bone
/// length, taking the positive depth branch for the remainder.
fn initial_pose(obs: &Frame2D, topo: &SkeletonTopology) -> Vec<[f64; 3]> {
    let mut x = vec![[0.0f64; 3]; obs.points.len()];
    let r = topo.root();
    x[r] = [obs.points[r].u, obs.points[r].v, 0.0];
    for b in topo.bones() {
        let pu = obs.points[b.parent].u;
        let pv = obs.points[b.parent].v;
        let du = obs.points[b.child].u - pu;
        let dv = obs.points[b.child].v - pv;
        let planar = (du * du + dv * dv).sqrt();
        let parent = x[b.parent];
        if planar >= b.length {
            let s = b.length / planar;
            x[b.child] = [parent[0] + du * s, parent[1] + dv * s, parent[2]];
        } else if planar < 1e-12 {
            x[b.child] = [parent[0], parent[1], parent[2] + b.length];
        } else {
            let dz = (b.length * b.length - planar * planar).sqrt();
            x[b.child] = [parent[0] + du, parent[1] + dv, parent[2] + dz];
        }
    }
    x
}

fn solve_frame(
    obs: &Frame2D,
    topo: &SkeletonTopology,
    prev_z: Option<&[f64]>,
    cfg: &LiftConfig,
) -> Result<(Vec<[f64; 3]>, Vec<f64>, bool)> {
    let mut x = ik_refine(&initial_pose(obs, topo), topo)?;
    let mut f = objective(&x, obs, prev_z, cfg.depth_weight);
    let mut trace = vec![f];
    let mut converged = false;
    for _ in 0..cfg.max_iterations {
        let g = gradient(&x, obs, prev_z, cfg.depth_weight);
        let mut alpha = cfg.step_size;
        let mut accepted = None;
        while alpha > 1e-14 {
            let candidate: Vec<[f64; 3]> = x
                .iter()
                .zip(&g)
                .map(|(xi, gi)| [xi[0] - alpha * gi[0], xi[1] - alpha * gi[1], xi[2] - alpha * gi[2]])
                .collect();
            let projected = ik_refine(&candidate, topo)?;
            let f_new = objective(&projected, obs, prev_z, cfg.depth_weight);
            if f_new < f {
                accepted = Some((projected, f_new));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((x_new, f_new)) => {
                let drop = f - f_new;
                x = x_new;
                f = f_new;
                trace.push(f);
                if drop < cfg.tolerance * f.max(1.0) {
                    converged = true;
                    break;
                }
            }
            None => {
                // no descent direction survives projection: local optimum
                converged = true;
                break;
            }
        }
    }
    Ok((x, trace, converged))
}

/// Lift a 2D observation sequence onto the skeleton. Blank frames (zero
/// confidence everywhere) are interpolated from their solved neighbours and
/// re-projected to stay feasible. Output counters follow the canonical
/// (t+1)/T ramp and fps carries over from the observations.
pub fn lift_sequence(
    obs: &Sequence2D,
    topo: &SkeletonTopology,
    cfg: &LiftConfig,
) -> Result<LiftResult> {
    if obs.joint_count() != topo.joint_count() {
        return Err(Error::dim(format!(
            "lift: {} observed joints, topology has {}",
            obs.joint_count(),
            topo.joint_count()
        )));
    }
    if obs.is_empty() {
        return Err(Error::contract("lift: empty sequence"));
    }
    let blank: Vec<bool> = obs.frames().iter().map(|f| f.is_blank()).collect();
    if blank.iter().all(|&b| b) {
        return Err(Error::Degenerate(
            "lift: no frame carries any observation".into(),
        ));
    }
    let n = obs.len();
    let mut solved: Vec<Option<Vec<[f64; 3]>>> = vec![None; n];
    let mut traces = Vec::new();
    let mut all_converged = true;
    let mut prev_z: Option<Vec<f64>> = None;
    for t in 0..n {
        if blank[t] {
            continue;
        }
        let (x, trace, converged) =
            solve_frame(&obs.frames()[t], topo, prev_z.as_deref(), cfg)?;
        prev_z = Some(x.iter().map(|p| p[2]).collect());
        solved[t] = Some(x);
        traces.push(trace);
        all_converged &= converged;
    }
    // fill blanks from solved neighbours
    let mut interpolated = Vec::new();
    let mut frames: Vec<Vec<[f64; 3]>> = Vec::with_capacity(n);
    for t in 0..n {
        match &solved[t] {
            Some(x) => frames.push(x.clone()),
            None => {
                let before = (0..t).rev().find(|&i| solved[i].is_some());
                let after = (t + 1..n).find(|&i| solved[i].is_some());
                let filled = match (before, after) {
                    (Some(b), Some(a)) => {
                        let wa = (t - b) as f64 / (a - b) as f64;
                        let xb = solved[b].as_ref().unwrap();
                        let xa = solved[a].as_ref().unwrap();
                        let blend: Vec<[f64; 3]> = xb
                            .iter()
                            .zip(xa)
                            .map(|(pb, pa)| {
                                [
                                    pb[0] + (pa[0] - pb[0]) * wa,
                                    pb[1] + (pa[1] - pb[1]) * wa,
                                    pb[2] + (pa[2] - pb[2]) * wa,
                                ]
                            })
                            .collect();
                        ik_refine(&blend, topo)?
                    }
                    (Some(b), None) => solved[b].as_ref().unwrap().clone(),
                    (None, Some(a)) => solved[a].as_ref().unwrap().clone(),
                    (None, None) => unreachable!("at least one frame is solved"),
                };
                interpolated.push(t);
                frames.push(filled);
            }
        }
    }
    // resolve the global depth ambiguity: joints should not sit behind the
    // root on average
    let root = topo.root();
    let mut mean_z = 0.0;
    let mut mean_root_z = 0.0;
    for f in &frames {
        mean_root_z += f[root][2];
        for p in f {
            mean_z += p[2];
        }
    }
    mean_z /= (n * topo.joint_count()) as f64;
    mean_root_z /= n as f64;
    if mean_z < mean_root_z {
        for f in &mut frames {
            let rz = f[root][2];
            for p in f.iter_mut() {
                p[2] = 2.0 * rz - p[2];
            }
        }
    }
    let pose_frames: Vec<PoseFrame> = frames
        .into_iter()
        .enumerate()
        .map(|(t, joints)| PoseFrame::new(joints, (t + 1) as f64 / n as f64))
        .collect();
    Ok(LiftResult {
        sequence: PoseSequence::new(obs.joint_count(), obs.fps(), pose_frames)?,
        frame_traces: traces,
        converged: all_converged,
        interpolated_frames: interpolated,
    })
}

/// Largest absolute deviation of any bone from its canonical length.
pub fn max_bone_length_error(seq: &PoseSequence, topo: &SkeletonTopology) -> Result<f64> {
    if seq.joint_count() != topo.joint_count() {
        return Err(Error::dim("bone error: joint count mismatch".to_string()));
    }
    let mut worst = 0.0f64;
    for f in seq.frames() {
        for b in topo.bones() {
            let p = f.joints[b.parent];
            let c = f.joints[b.child];
            let len = ((c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2) + (c[2] - p[2]).powi(2))
                .sqrt();
            worst = worst.max((len - b.length).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::skeleton::Bone;

    fn tree_topo() -> SkeletonTopology {
        // small fork: 0 root, arms 0-1-2 and 0-3, lengths varied
        SkeletonTopology::new(
            4,
            0,
            vec![
                Bone { parent: 0, child: 1, length: 1.0 },
                Bone { parent: 1, child: 2, length: 0.5 },
                Bone { parent: 0, child: 3, length: 0.8 },
            ],
            (0, 1),
        )
        .unwrap()
    }

    /// Random feasible pose with non-negative depth offsets per bone, so the
    /// positive-branch solver can recover it exactly up to the global flip.
    fn random_pose(topo: &SkeletonTopology, rng: &mut Rng) -> Vec<[f64; 3]> {
        let mut joints = vec![[0.0f64; 3]; topo.joint_count()];
        joints[topo.root()] = [rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0), 0.0];
        for b in topo.bones() {
            // direction with dz >= 0.2 so planar never exceeds bone length
            let dz = rng.uniform_range(0.2, 1.0);
            let du = rng.uniform_range(-1.0, 1.0);
            let dv = rng.uniform_range(-1.0, 1.0);
            let norm = (du * du + dv * dv + dz * dz).sqrt();
            let p = joints[b.parent];
            joints[b.child] = [
                p[0] + b.length * du / norm,
                p[1] + b.length * dv / norm,
                p[2] + b.length * dz / norm,
            ];
        }
        joints
    }

    fn as_sequence(joints: Vec<Vec<[f64; 3]>>, jc: usize) -> PoseSequence {
        let n = joints.len();
        let frames = joints
            .into_iter()
            .enumerate()
            .map(|(t, j)| PoseFrame::new(j, (t + 1) as f64 / n as f64))
            .collect();
        PoseSequence::new(jc, 25.0, frames).unwrap()
    }

    #[test]
    fn ik_refine_keeps_feasible_poses() {
        let topo = tree_topo();
        let mut rng = Rng::seed_from_u64(1);
        for _ in 0..10 {
            let pose = random_pose(&topo, &mut rng);
            let refined = ik_refine(&pose, &topo).unwrap();
            for (a, b) in pose.iter().zip(&refined) {
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 1e-9, "{a:?} vs {b:?}");
                }
            }
        }
    }

    #[test]
    fn ik_refine_restores_bone_lengths() {
        let topo = tree_topo();
        let mut rng = Rng::seed_from_u64(2);
        let mut pose = random_pose(&topo, &mut rng);
        for p in &mut pose {
            p[0] += rng.uniform_range(-0.3, 0.3);
            p[1] += rng.uniform_range(-0.3, 0.3);
            p[2] += rng.uniform_range(-0.3, 0.3);
        }
        let refined = ik_refine(&pose, &topo).unwrap();
        let seq = as_sequence(vec![refined.clone()], 4);
        assert!(max_bone_length_error(&seq, &topo).unwrap() < 1e-9);
        // centroid preserved
        for k in 0..3 {
            let old: f64 = pose.iter().map(|p| p[k]).sum::<f64>() / 4.0;
            let new: f64 = refined.iter().map(|p| p[k]).sum::<f64>() / 4.0;
            assert!((old - new).abs() < 1e-9);
        }
    }

    #[test]
    fn ik_refine_handles_collapsed_bones() {
        let topo = tree_topo();
        let pose = vec![[0.0, 0.0, 0.0]; 4];
        let refined = ik_refine(&pose, &topo).unwrap();
        let seq = as_sequence(vec![refined], 4);
        assert!(max_bone_length_error(&seq, &topo).unwrap() < 1e-9);
    }

    #[test]
    fn lift_recovers_clean_projections() {
        let topo = tree_topo();
        let mut rng = Rng::seed_from_u64(7);
        for trial in 0..20 {
            let pose = random_pose(&topo, &mut rng);
            let truth = as_sequence(vec![pose.clone()], 4);
            let obs = project_orthographic(&truth);
            let lifted = lift_sequence(&obs, &topo, &LiftConfig::default()).unwrap();
            assert!(max_bone_length_error(&lifted.sequence, &topo).unwrap() < 1e-3);
            // compare up to the global depth flip about the root
            let got = &lifted.sequence.frames()[0].joints;
            let rz = got[topo.root()][2];
            let err = |flip: bool| -> f64 {
                got.iter()
                    .zip(&pose)
                    .map(|(g, p)| {
                        let gz = if flip { 2.0 * rz - g[2] } else { g[2] };
                        ((g[0] - p[0]).powi(2) + (g[1] - p[1]).powi(2) + (gz - p[2]).powi(2))
                            .sqrt()
                    })
                    .fold(0.0, f64::max)
            };
            let best = err(false).min(err(true));
            assert!(best < 1e-2, "trial {trial}: joint error {best}");
        }
    }

    #[test]
    fn traces_are_monotone_under_noise() {
        let topo = tree_topo();
        let mut rng = Rng::seed_from_u64(11);
        let poses: Vec<Vec<[f64; 3]>> = (0..4).map(|_| random_pose(&topo, &mut rng)).collect();
        let truth = as_sequence(poses, 4);
        let clean = project_orthographic(&truth);
        let noisy_frames: Vec<Frame2D> = clean
            .frames()
            .iter()
            .map(|f| Frame2D {
                points: f
                    .points
                    .iter()
                    .map(|p| Point2 {
                        u: p.u + rng.normal(0.0, 0.05),
                        v: p.v + rng.normal(0.0, 0.05),
                        confidence: 0.9,
                    })
                    .collect(),
            })
            .collect();
        let noisy = Sequence2D::new(4, 25.0, noisy_frames).unwrap();
        let lifted = lift_sequence(&noisy, &topo, &LiftConfig::default()).unwrap();
        assert_eq!(lifted.frame_traces.len(), 4);
        for trace in &lifted.frame_traces {
            for w in trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "trace must not increase: {w:?}");
            }
        }
        assert!(max_bone_length_error(&lifted.sequence, &topo).unwrap() < 1e-6);
    }

    #[test]
    fn blank_frames_are_interpolated_and_feasible() {
        let topo = tree_topo();
        let mut rng = Rng::seed_from_u64(3);
        let a = random_pose(&topo, &mut rng);
        let b = random_pose(&topo, &mut rng);
        let truth = as_sequence(vec![a, b.clone(), b], 4);
        let mut obs_frames: Vec<Frame2D> = project_orthographic(&truth).frames().to_vec();
        obs_frames[1] = Frame2D {
            points: vec![Point2 { u: 0.0, v: 0.0, confidence: 0.0 }; 4],
        };
        let obs = Sequence2D::new(4, 25.0, obs_frames).unwrap();
        let lifted = lift_sequence(&obs, &topo, &LiftConfig::default()).unwrap();
        assert_eq!(lifted.interpolated_frames, vec![1]);
        assert!(max_bone_length_error(&lifted.sequence, &topo).unwrap() < 1e-6);
        // interpolant sits between its neighbours in x
        let f = lifted.sequence.frames();
        for j in 0..4 {
            let lo = f[0].joints[j][0].min(f[2].joints[j][0]) - 0.3;
            let hi = f[0].joints[j][0].max(f[2].joints[j][0]) + 0.3;
            assert!(f[1].joints[j][0] >= lo && f[1].joints[j][0] <= hi);
        }
    }

    #[test]
    fn all_blank_input_is_degenerate() {
        let topo = tree_topo();
        let frames = vec![
            Frame2D {
                points: vec![Point2 { u: 0.0, v: 0.0, confidence: 0.0 }; 4],
            };
            3
        ];
        let obs = Sequence2D::new(4, 25.0, frames).unwrap();
        assert!(matches!(
            lift_sequence(&obs, &topo, &LiftConfig::default()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn zero_confidence_joint_still_lands_on_the_bone_sphere() {
        let topo = tree_topo();
        let mut rng = Rng::seed_from_u64(9);
        let pose = random_pose(&topo, &mut rng);
        let truth = as_sequence(vec![pose], 4);
        let mut frames: Vec<Frame2D> = project_orthographic(&truth).frames().to_vec();
        // joint 2 unobserved with garbage coordinates
        frames[0].points[2] = Point2 { u: 1e6, v: -1e6, confidence: 0.0 };
        let obs = Sequence2D::new(4, 25.0, frames).unwrap();
        let lifted = lift_sequence(&obs, &topo, &LiftConfig::default()).unwrap();
        assert!(max_bone_length_error(&lifted.sequence, &topo).unwrap() < 1e-6);
    }

    #[test]
    fn depth_sign_prefers_joints_in_front_of_root() {
        let topo = tree_topo();
        let mut rng = Rng::seed_from_u64(13);
        let pose = random_pose(&topo, &mut rng);
        let truth = as_sequence(vec![pose], 4);
        let obs = project_orthographic(&truth);
        let lifted = lift_sequence(&obs, &topo, &LiftConfig::default()).unwrap();
        let f = &lifted.sequence.frames()[0];
        let rz = f.joints[topo.root()][2];
        let mean: f64 = f.joints.iter().map(|j| j[2]).sum::<f64>() / 4.0;
        assert!(mean >= rz - 1e-9);
    }

    #[test]
    fn counters_follow_the_standard_ramp() {
        let topo = tree_topo();
        let mut rng = Rng::seed_from_u64(17);
        let poses: Vec<Vec<[f64; 3]>> = (0..5).map(|_| random_pose(&topo, &mut rng)).collect();
        let truth = as_sequence(poses, 4);
        let lifted = lift_sequence(&project_orthographic(&truth), &topo, &LiftConfig::default())
            .unwrap();
        let counters: Vec<f64> = lifted.sequence.frames().iter().map(|f| f.counter).collect();
        assert_eq!(counters, vec![0.2, 0.4, 0.6, 0.8, 1.0]);
    }
}
