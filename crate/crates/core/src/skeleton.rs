//! Pose sequence types, the skeleton tree and the pose text format.
//!
//! Conventions used throughout the crate: joints are (x, y, z) with y
//! growing downward as in image coordinates, every frame carries a progress
//! counter in [0, 1], and a sequence with T frames uses counter (t+1)/T for
//! frame t. Normalised sequences have the root joint at the origin and unit
//! mean distance between the two scale-pair joints.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// One directed bone of the skeleton tree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bone {
    pub parent: usize,
    pub child: usize,
    /// Canonical 3D length in scale-pair units, used as the rigidity
    /// constraint when lifting 2D observations.
    pub length: f64,
}

/// A rooted tree over joints with canonical bone lengths. Bones are stored
/// in breadth-first order from the root so a single forward pass can place
/// children after parents.
#[derive(Debug, Clone)]
pub struct SkeletonTopology {
    joint_count: usize,
    root: usize,
    bones: Vec<Bone>,
    scale_pair: (usize, usize),
}

impl SkeletonTopology {
    pub fn new(
        joint_count: usize,
        root: usize,
        bones: Vec<Bone>,
        scale_pair: (usize, usize),
    ) -> Result<Self> {
        if joint_count == 0 {
            return Err(Error::contract("topology: no joints"));
        }
        if root >= joint_count {
            return Err(Error::contract(format!(
                "topology: root {root} out of {joint_count} joints"
            )));
        }
        if bones.len() != joint_count - 1 {
            return Err(Error::contract(format!(
                "topology: {} bones cannot span {} joints",
                bones.len(),
                joint_count
            )));
        }
        if scale_pair.0 >= joint_count || scale_pair.1 >= joint_count || scale_pair.0 == scale_pair.1
        {
            return Err(Error::contract("topology: invalid scale pair"));
        }
        let mut parent_of: Vec<Option<usize>> = vec![None; joint_count];
        let mut length_of: Vec<f64> = vec![0.0; joint_count];
        for b in &bones {
            if b.parent >= joint_count || b.child >= joint_count {
                return Err(Error::contract(format!(
                    "topology: bone {}->{} out of range",
                    b.parent, b.child
                )));
            }
            if b.child == root {
                return Err(Error::contract("topology: root cannot be a bone child"));
            }
            if !(b.length > 0.0) || !b.length.is_finite() {
                return Err(Error::contract(format!(
                    "topology: bone {}->{} has non-positive length",
                    b.parent, b.child
                )));
            }
            if parent_of[b.child].is_some() {
                return Err(Error::contract(format!(
                    "topology: joint {} has two parents",
                    b.child
                )));
            }
            parent_of[b.child] = Some(b.parent);
            length_of[b.child] = b.length;
        }
        // breadth-first order doubles as the connectivity check
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); joint_count];
        for b in &bones {
            children[b.parent].push(b.child);
        }
        for c in &mut children {
            c.sort_unstable();
        }
        let mut ordered = Vec::with_capacity(bones.len());
        let mut seen = vec![false; joint_count];
        seen[root] = true;
        let mut queue = VecDeque::from([root]);
        while let Some(j) = queue.pop_front() {
            for &c in &children[j] {
                if seen[c] {
                    return Err(Error::contract("topology: cycle detected"));
                }
                seen[c] = true;
                ordered.push(Bone {
                    parent: j,
                    child: c,
                    length: length_of[c],
                });
                queue.push_back(c);
            }
        }
        if ordered.len() != bones.len() {
            return Err(Error::contract(
                "topology: bones do not connect every joint to the root",
            ));
        }
        Ok(SkeletonTopology {
            joint_count,
            root,
            bones: ordered,
            scale_pair,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn root(&self) -> usize {
        self.root
    }

    /// Bones in breadth-first order from the root.
    pub fn bones(&self) -> &[Bone] {
        &self.bones
    }

    /// The two joints whose mean distance defines the sequence scale; the
    /// shoulders in the full signing topology.
    pub fn scale_pair(&self) -> (usize, usize) {
        self.scale_pair
    }

    pub fn parent_of(&self, joint: usize) -> Option<usize> {
        self.bones
            .iter()
            .find(|b| b.child == joint)
            .map(|b| b.parent)
    }

    /// Upper body plus two 21-point hands, 50 joints total. Canonical
    /// lengths are in shoulder-to-shoulder units (the scale pair spans 1.0).
    pub fn signing_default() -> SkeletonTopology {
        const NECK: usize = 1;
        let mut bones = vec![
            Bone { parent: NECK, child: 0, length: 0.40 }, // nose
            Bone { parent: NECK, child: 2, length: 0.50 }, // right shoulder
            Bone { parent: 2, child: 3, length: 0.70 },    // right elbow
            Bone { parent: 3, child: 4, length: 0.65 },    // right wrist
            Bone { parent: NECK, child: 5, length: 0.50 }, // left shoulder
            Bone { parent: 5, child: 6, length: 0.70 },    // left elbow
            Bone { parent: 6, child: 7, length: 0.65 },    // left wrist
        ];
        // 21-joint hands: a hand wrist then five 4-joint finger chains.
        let finger_lengths: [[f64; 4]; 5] = [
            [0.10, 0.09, 0.07, 0.06], // thumb
            [0.22, 0.10, 0.07, 0.05], // index
            [0.21, 0.11, 0.08, 0.05], // middle
            [0.20, 0.10, 0.07, 0.05], // ring
            [0.19, 0.08, 0.06, 0.04], // little
        ];
        // left hand occupies joints 8..=28, right hand 29..=49, matching the
        // body-then-left-then-right keypoint file layout
        for (arm_wrist, base) in [(7usize, 8usize), (4usize, 29usize)] {
            bones.push(Bone {
                parent: arm_wrist,
                child: base,
                length: 0.08,
            });
            for (f, lengths) in finger_lengths.iter().enumerate() {
                let mut prev = base;
                for (s, &len) in lengths.iter().enumerate() {
                    let child = base + 1 + f * 4 + s;
                    bones.push(Bone {
                        parent: prev,
                        child,
                        length: len,
                    });
                    prev = child;
                }
            }
        }
        SkeletonTopology::new(50, NECK, bones, (2, 5)).expect("built-in topology is valid")
    }

    /// Straight chain rooted at joint 0, handy for small tests and toy data.
    pub fn chain(joint_count: usize, bone_length: f64) -> Result<SkeletonTopology> {
        if joint_count < 2 {
            return Err(Error::contract("chain topology needs at least 2 joints"));
        }
        let bones = (0..joint_count - 1)
            .map(|i| Bone {
                parent: i,
                child: i + 1,
                length: bone_length,
            })
            .collect();
        SkeletonTopology::new(joint_count, 0, bones, (0, 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseFrame {
    pub joints: Vec<[f64; 3]>,
    /// Progress through the sequence, (t+1)/T for frame t of T.
    pub counter: f64,
}

impl PoseFrame {
    pub fn new(joints: Vec<[f64; 3]>, counter: f64) -> PoseFrame {
        PoseFrame { joints, counter }
    }

    pub fn zero(joint_count: usize) -> PoseFrame {
        PoseFrame {
            joints: vec![[0.0; 3]; joint_count],
            counter: 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.joints
            .iter()
            .all(|j| j[0] == 0.0 && j[1] == 0.0 && j[2] == 0.0)
    }

    pub fn has_non_finite(&self) -> bool {
        !self.counter.is_finite()
            || self
                .joints
                .iter()
                .any(|j| j.iter().any(|v| !v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    joint_count: usize,
    fps: f64,
    frames: Vec<PoseFrame>,
}

impl PoseSequence {
    pub fn new(joint_count: usize, fps: f64, frames: Vec<PoseFrame>) -> Result<PoseSequence> {
        if joint_count == 0 {
            return Err(Error::contract("pose sequence: zero joints"));
        }
        if !(fps > 0.0) || !fps.is_finite() {
            return Err(Error::contract(format!("pose sequence: fps {fps}")));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.joints.len() != joint_count {
                return Err(Error::dim(format!(
                    "pose sequence: frame {i} has {} joints, expected {joint_count}",
                    f.joints.len()
                )));
            }
        }
        Ok(PoseSequence {
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

    pub fn frames(&self) -> &[PoseFrame] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [PoseFrame] {
        &mut self.frames
    }

    pub fn into_frames(self) -> Vec<PoseFrame> {
        self.frames
    }

    /// Reset counters to the canonical (t+1)/T ramp.
    pub fn set_standard_counters(&mut self) {
        let n = self.frames.len();
        for (t, f) in self.frames.iter_mut().enumerate() {
            f.counter = (t + 1) as f64 / n as f64;
        }
    }

    /// Features per frame: x, y, z per joint then the counter, 3J+1 wide.
    pub fn feature_dim(&self) -> usize {
        3 * self.joint_count + 1
    }

    pub fn to_feature_rows(&self) -> Vec<f64> {
        let fd = self.feature_dim();
        let mut out = Vec::with_capacity(self.frames.len() * fd);
        for f in &self.frames {
            for j in &f.joints {
                out.extend_from_slice(j);
            }
            out.push(f.counter);
        }
        out
    }

    pub fn from_feature_rows(
        joint_count: usize,
        fps: f64,
        rows: &[f64],
    ) -> Result<PoseSequence> {
        let fd = 3 * joint_count + 1;
        if rows.len() % fd != 0 {
            return Err(Error::dim(format!(
                "feature rows: {} values not divisible by frame width {fd}",
                rows.len()
            )));
        }
        let frames = rows
            .chunks_exact(fd)
            .map(|row| {
                let joints = row[..3 * joint_count]
                    .chunks_exact(3)
                    .map(|c| [c[0], c[1], c[2]])
                    .collect();
                PoseFrame::new(joints, row[fd - 1])
            })
            .collect();
        PoseSequence::new(joint_count, fps, frames)
    }
}

/// Per-frame findings from `validate_sequence`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrameFlags {
    pub non_finite: bool,
    pub zero: bool,
}

impl FrameFlags {
    pub fn flagged(&self) -> bool {
        self.non_finite || self.zero
    }
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub frames: Vec<FrameFlags>,
}

impl ValidationReport {
    pub fn flagged_count(&self) -> usize {
        self.frames.iter().filter(|f| f.flagged()).count()
    }

    pub fn is_clean(&self) -> bool {
        self.flagged_count() == 0
    }
}

/// Flag frames holding non-finite values or with every joint at the origin
/// (the all-zero frames dropped-detection cameras emit).
pub fn validate_sequence(seq: &PoseSequence) -> ValidationReport {
    ValidationReport {
        frames: seq
            .frames()
            .iter()
            .map(|f| FrameFlags {
                non_finite: f.has_non_finite(),
                zero: f.is_zero(),
            })
            .collect(),
    }
}

/// Centre the root at the origin in every frame and scale uniformly so the
/// mean scale-pair distance over frames is exactly 1. Counters and fps pass
/// through untouched. Errors when the scale pair coincides in every frame.
pub fn normalize_sequence(
    seq: &PoseSequence,
    topo: &SkeletonTopology,
) -> Result<PoseSequence> {
    if seq.joint_count() != topo.joint_count() {
        return Err(Error::dim(format!(
            "normalize: sequence has {} joints, topology {}",
            seq.joint_count(),
            topo.joint_count()
        )));
    }
    if seq.is_empty() {
        return Err(Error::contract("normalize: empty sequence"));
    }
    let (a, b) = topo.scale_pair();
    let mean_dist = seq
        .frames()
        .iter()
        .map(|f| {
            let pa = f.joints[a];
            let pb = f.joints[b];
            ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2) + (pa[2] - pb[2]).powi(2)).sqrt()
        })
        .sum::<f64>()
        / seq.len() as f64;
    if mean_dist == 0.0 {
        return Err(Error::Degenerate(
            "scale pair joints coincide in every frame".into(),
        ));
    }
    let scale = 1.0 / mean_dist;
    let root = topo.root();
    let frames = seq
        .frames()
        .iter()
        .map(|f| {
            let r = f.joints[root];
            let joints = f
                .joints
                .iter()
                .map(|j| {
                    [
                        (j[0] - r[0]) * scale,
                        (j[1] - r[1]) * scale,
                        (j[2] - r[2]) * scale,
                    ]
                })
                .collect();
            PoseFrame::new(joints, f.counter)
        })
        .collect();
    PoseSequence::new(seq.joint_count(), seq.fps(), frames)
}

// ----- pose text format -----

/// Canonical float form used in pose files: 9 significant digits,
/// exponent notation, locale independent.
pub fn fmt_sig9(v: f64) -> String {
    format!("{:.8e}", v)
}

/// Write the pose text format: a `J <joints> FPS <fps>` header line, then
/// one line per frame holding 3J+1 floats (x y z per joint, counter last),
/// LF line endings throughout.
pub fn write_pose_text(seq: &PoseSequence, path: &Path) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::contract("write pose: empty sequence"));
    }
    let mut out = String::new();
    out.push_str(&format!("J {} FPS {}\n", seq.joint_count(), seq.fps()));
    for f in seq.frames() {
        let mut fields = Vec::with_capacity(seq.feature_dim());
        for j in &f.joints {
            fields.push(fmt_sig9(j[0]));
            fields.push(fmt_sig9(j[1]));
            fields.push(fmt_sig9(j[2]));
        }
        fields.push(fmt_sig9(f.counter));
        out.push_str(&fields.join(" "));
        out.push('\n');
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Parse the pose text format. Lines starting with `#` and blank lines are
/// skipped; every other line after the header must hold exactly 3J+1 floats.
pub fn parse_pose_text(path: &Path) -> Result<PoseSequence> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let path_str = path.display().to_string();
    let mut header: Option<(usize, f64)> = None;
    let mut frames: Vec<PoseFrame> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match header {
            None => {
                if toks.len() != 4 || toks[0] != "J" || toks[2] != "FPS" {
                    return Err(Error::Parse {
                        path: path_str,
                        line: line_no,
                        message: "expected header `J <joints> FPS <fps>`".into(),
                    });
                }
                let joints: usize = toks[1].parse().map_err(|_| Error::Parse {
                    path: path_str.clone(),
                    line: line_no,
                    message: format!("bad joint count {}", toks[1]),
                })?;
                let fps: f64 = toks[3].parse().map_err(|_| Error::Parse {
                    path: path_str.clone(),
                    line: line_no,
                    message: format!("bad fps {}", toks[3]),
                })?;
                if joints == 0 {
                    return Err(Error::Parse {
                        path: path_str,
                        line: line_no,
                        message: "joint count must be positive".into(),
                    });
                }
                if !(fps > 0.0) || !fps.is_finite() {
                    return Err(Error::Parse {
                        path: path_str,
                        line: line_no,
                        message: format!("fps must be positive, got {fps}"),
                    });
                }
                header = Some((joints, fps));
            }
            Some((joints, _)) => {
                let want = 3 * joints + 1;
                if toks.len() != want {
                    return Err(Error::Parse {
                        path: path_str,
                        line: line_no,
                        message: format!("expected {want} floats, got {}", toks.len()),
                    });
                }
                let mut vals = Vec::with_capacity(want);
                for t in &toks {
                    vals.push(t.parse::<f64>().map_err(|_| Error::Parse {
                        path: path_str.clone(),
                        line: line_no,
                        message: format!("bad float {t}"),
                    })?);
                }
                let joints_vec = vals[..3 * joints]
                    .chunks_exact(3)
                    .map(|c| [c[0], c[1], c[2]])
                    .collect();
                frames.push(PoseFrame::new(joints_vec, vals[want - 1]));
            }
        }
    }
    let (joints, fps) = header.ok_or_else(|| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        message: "missing header".into(),
    })?;
    if frames.is_empty() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            message: "no frames".into(),
        });
    }
    PoseSequence::new(joints, fps, frames)
}
