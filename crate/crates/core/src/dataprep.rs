//! Corpus preparation: keypoint JSON ingestion, sequence cleaning, text
//! tokenization, vocabulary handling, manifests, the packed dataset file,
//! and padded training batches with their augmentations.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::lifting::{Frame2D, Point2, Sequence2D};
use crate::rng::Rng;
use crate::skeleton::{validate_sequence, PoseSequence};

/// Joint layout consumed from detector output: nose, neck, right arm
/// (shoulder, elbow, wrist), left arm, then 21 left-hand and 21 right-hand
/// keypoints. Matches `SkeletonTopology::signing_default`.
pub const BODY_JOINTS: usize = 8;
pub const HAND_JOINTS: usize = 21;
pub const TOTAL_JOINTS: usize = BODY_JOINTS + 2 * HAND_JOINTS;

fn triples(raw: &[serde_json::Value], what: &str) -> Result<Vec<(f64, f64, f64)>> {
    if raw.len() % 3 != 0 {
        return Err(Error::format(format!(
            "{what}: {} values is not a multiple of 3",
            raw.len()
        )));
    }
    let mut out = Vec::with_capacity(raw.len() / 3);
    for chunk in raw.chunks(3) {
        let mut v = [0.0f64; 3];
        for (k, item) in chunk.iter().enumerate() {
            v[k] = item.as_f64().ok_or_else(|| {
                Error::format(format!("{what}: non-numeric entry {item}"))
            })?;
        }
        out.push((v[0], v[1], v[2]));
    }
    Ok(out)
}

fn place(points: &mut [Point2], offset: usize, count: usize, kps: &[(f64, f64, f64)]) {
    for j in 0..count {
        let p = &mut points[offset + j];
        match kps.get(j) {
            Some(&(x, y, c)) if x.is_finite() && y.is_finite() && c.is_finite() && c > 0.0 => {
                *p = Point2 {
                    u: x,
                    v: y,
                    confidence: c.clamp(0.0, 1.0),
                };
            }
            _ => {
                *p = Point2 {
                    u: 0.0,
                    v: 0.0,
                    confidence: 0.0,
                };
            }
        }
    }
}

/// Parse one detector frame. Only the first person is used; missing keypoint
/// arrays leave their joints at zero confidence, and an empty people list
/// yields a fully blank frame.
pub fn parse_keypoint_json(text: &str) -> Result<Frame2D> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::format(format!("keypoint json: {e}")))?;
    let mut points = vec![
        Point2 {
            u: 0.0,
            v: 0.0,
            confidence: 0.0
        };
        TOTAL_JOINTS
    ];
    let person = value
        .get("people")
        .and_then(|p| p.as_array())
        .and_then(|p| p.first());
    if let Some(person) = person {
        let arr = |key: &str| -> Result<Vec<(f64, f64, f64)>> {
            match person.get(key).and_then(|v| v.as_array()) {
                Some(raw) => triples(raw, key),
                None => Ok(Vec::new()),
            }
        };
        place(&mut points, 0, BODY_JOINTS, &arr("pose_keypoints_2d")?);
        place(
            &mut points,
            BODY_JOINTS,
            HAND_JOINTS,
            &arr("hand_left_keypoints_2d")?,
        );
        place(
            &mut points,
            BODY_JOINTS + HAND_JOINTS,
            HAND_JOINTS,
            &arr("hand_right_keypoints_2d")?,
        );
    }
    Ok(Frame2D { points })
}

pub fn read_keypoint_json(path: &Path) -> Result<Frame2D> {
    let text = fs::read_to_string(path)?;
    parse_keypoint_json(&text).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Collect `<clip>_<twelve digit frame index>_keypoints.json` files for one
/// clip from a directory, ordered by frame index.
pub fn read_keypoint_dir(dir: &Path, clip_id: &str, fps: f64) -> Result<Sequence2D> {
    let prefix = format!("{clip_id}_");
    let suffix = "_keypoints.json";
    let mut indexed: Vec<(u64, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let name = match name.to_str() {
            Some(n) => n,
            None => continue,
        };
        if !name.starts_with(&prefix) || !name.ends_with(suffix) {
            continue;
        }
        let digits = &name[prefix.len()..name.len() - suffix.len()];
        if digits.len() != 12 || !digits.bytes().all(|b| b.is_ascii_digit()) {
            continue;
        }
        let index: u64 = digits.parse().expect("twelve ascii digits fit u64");
        indexed.push((index, entry.path()));
    }
    if indexed.is_empty() {
        return Err(Error::contract(format!(
            "no keypoint files for clip {clip_id} in {}",
            dir.display()
        )));
    }
    indexed.sort();
    let mut frames = Vec::with_capacity(indexed.len());
    for (_, path) in &indexed {
        frames.push(read_keypoint_json(path)?);
    }
    Sequence2D::new(TOTAL_JOINTS, fps, frames)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CleanPolicy {
    /// Replace flagged frames coordinate-wise with the median over clean
    /// frames, then reset counters.
    MedianReplace,
    /// Remove flagged frames and reset counters.
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CleanReport {
    pub total: usize,
    pub flagged: usize,
}

fn median(sorted: &mut [f64]) -> f64 {
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Repair frames flagged by `validate_sequence` (non-finite values or the
/// all-zero frames dropped detections produce). Median replacement works per
/// joint coordinate: in a non-finite frame only the broken coordinates are
/// replaced, while an all-zero frame (a dropped detection) is rebuilt
/// entirely, each coordinate taking its median over the unflagged frames.
/// Counters are reset to the canonical ramp afterwards. Errors when no clean
/// frame remains or the repaired sequence is still flagged.
pub fn clean_sequence(
    seq: &PoseSequence,
    policy: CleanPolicy,
) -> Result<(PoseSequence, CleanReport)> {
    let report = validate_sequence(seq);
    let flagged = report.flagged_count();
    if flagged == seq.len() {
        return Err(Error::Degenerate(
            "clean: every frame is flagged".into(),
        ));
    }
    let stats = CleanReport {
        total: seq.len(),
        flagged,
    };
    let mut frames = seq.frames().to_vec();
    match policy {
        CleanPolicy::Drop => {
            frames = frames
                .into_iter()
                .zip(&report.frames)
                .filter(|(_, flag)| !flag.flagged())
                .map(|(f, _)| f)
                .collect();
        }
        CleanPolicy::MedianReplace => {
            if flagged > 0 {
                let jc = seq.joint_count();
                let mut median_joints = vec![[0.0f64; 3]; jc];
                let mut column = Vec::with_capacity(seq.len() - flagged);
                for (j, slot) in median_joints.iter_mut().enumerate() {
                    for k in 0..3 {
                        column.clear();
                        for (f, flag) in frames.iter().zip(&report.frames) {
                            if !flag.flagged() {
                                column.push(f.joints[j][k]);
                            }
                        }
                        slot[k] = median(&mut column);
                    }
                }
                for (f, flag) in frames.iter_mut().zip(&report.frames) {
                    if !flag.flagged() {
                        continue;
                    }
                    for (j, joint) in f.joints.iter_mut().enumerate() {
                        for k in 0..3 {
                            if flag.zero || !joint[k].is_finite() {
                                joint[k] = median_joints[j][k];
                            }
                        }
                    }
                }
            }
        }
    }
    let mut cleaned = PoseSequence::new(seq.joint_count(), seq.fps(), frames)?;
    cleaned.set_standard_counters();
    if validate_sequence(&cleaned).flagged_count() > 0 {
        return Err(Error::Degenerate(
            "clean: repaired frames are still flagged".into(),
        ));
    }
    Ok((cleaned, stats))
}

/// Lowercase, split on whitespace, strip ASCII punctuation from token edges.
/// Tokens that are pure punctuation disappear.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let t = raw
                .trim_matches(|c: char| c.is_ascii_punctuation())
                .to_lowercase();
            if t.is_empty() {
                None
            } else {
                Some(t)
            }
        })
        .collect()
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Specials first, then the sorted unique tokens of the given texts.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Vocabulary {
        let mut unique: Vec<String> = texts
            .into_iter()
            .flat_map(|t| tokenize(t))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.append(&mut unique);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// bos, token ids (unknowns map to unk), eos.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(tokenize(text).iter().map(|t| self.id(t)));
        ids.push(EOS);
        ids
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("id\ttoken\n");
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(&format!("{i}\t{t}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = fs::read_to_string(path)?;
        let mut tokens = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 {
                continue;
            }
            let mut parts = line.splitn(2, '\t');
            let id = parts.next().unwrap_or("");
            let token = parts.next().ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: "expected id<TAB>token".into(),
            })?;
            let id: usize = id.parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: format!("bad id {id}"),
            })?;
            if id != tokens.len() {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    message: format!("ids must be contiguous, got {id}"),
                });
            }
            tokens.push(token.to_string());
        }
        if tokens.len() < SPECIALS.len()
            || SPECIALS.iter().zip(&tokens).any(|(s, t)| s != t)
        {
            return Err(Error::format(format!(
                "vocabulary {} must start with the special tokens",
                path.display()
            )));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocabulary { tokens, index })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::format(format!("unknown split {other:?}"))),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Dev => 1,
            Split::Test => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Split> {
        match tag {
            0 => Ok(Split::Train),
            1 => Ok(Split::Dev),
            2 => Ok(Split::Test),
            other => Err(Error::format(format!("bad split tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub split: Split,
    pub pose_path: PathBuf,
    pub text: String,
}

/// Tab-separated manifest: `clip_id  split  pose_path  text` with a header
/// row. Pose paths are taken as written; resolve them against the manifest
/// directory before loading.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            let expect = "clip_id\tsplit\tpose_path\ttext";
            if line != expect {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: 1,
                    message: format!("header must be {expect:?}"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(4, '\t').collect();
        if parts.len() != 4 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: format!("expected 4 tab-separated fields, got {}", parts.len()),
            });
        }
        entries.push(ManifestEntry {
            clip_id: parts[0].to_string(),
            split: Split::parse(parts[1]).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                message: e.to_string(),
            })?,
            pose_path: PathBuf::from(parts[2]),
            text: parts[3].to_string(),
        });
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::from("clip_id\tsplit\tpose_path\ttext\n");
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.clip_id,
            e.split.as_str(),
            e.pose_path.display(),
            e.text
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct DatasetClip {
    pub clip_id: String,
    pub split: Split,
    pub tokens: Vec<usize>,
    pub pose: PoseSequence,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub clips: Vec<DatasetClip>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscardReason {
    /// Pose file absent or unreadable.
    MissingPose,
    /// Nothing usable left after cleaning.
    Degenerate,
    /// Clip exceeds the frame budget.
    TooLong,
}

impl DiscardReason {
    pub fn describe(&self) -> &'static str {
        match self {
            DiscardReason::MissingPose => "missing pose file",
            DiscardReason::Degenerate => "degenerate after cleaning",
            DiscardReason::TooLong => "over the frame limit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildReport {
    pub kept: usize,
    /// Discarded clips in manifest order with the reason each was dropped.
    pub discarded: Vec<(String, DiscardReason)>,
}

impl BuildReport {
    pub fn count(&self, reason: DiscardReason) -> usize {
        self.discarded.iter().filter(|(_, r)| *r == reason).count()
    }
}

pub const DEFAULT_MAX_FRAMES: usize = 400;

/// Assemble the packed dataset from manifest entries: encode each text
/// against the given vocabulary, load and clean each pose file, and drop
/// clips longer than `max_frames`. Entries whose pose file is missing or
/// whose pose degenerates under cleaning are discarded and counted rather
/// than failing the build; a split left empty by the discards is an error.
pub fn build_dataset(
    entries: &[ManifestEntry],
    base_dir: &Path,
    vocab: &Vocabulary,
    policy: CleanPolicy,
    max_frames: usize,
) -> Result<(Dataset, BuildReport)> {
    if entries.is_empty() {
        return Err(Error::contract("build dataset: empty manifest"));
    }
    let mut clips = Vec::new();
    let mut discarded = Vec::new();
    for e in entries {
        let path = base_dir.join(&e.pose_path);
        if !path.is_file() {
            discarded.push((e.clip_id.clone(), DiscardReason::MissingPose));
            continue;
        }
        let pose = crate::skeleton::parse_pose_text(&path)?;
        let pose = match clean_sequence(&pose, policy) {
            Ok((cleaned, _)) => cleaned,
            Err(Error::Degenerate(_)) => {
                discarded.push((e.clip_id.clone(), DiscardReason::Degenerate));
                continue;
            }
            Err(other) => return Err(other),
        };
        if pose.len() > max_frames {
            discarded.push((e.clip_id.clone(), DiscardReason::TooLong));
            continue;
        }
        clips.push(DatasetClip {
            clip_id: e.clip_id.clone(),
            split: e.split,
            tokens: vocab.encode(&e.text),
            pose,
        });
    }
    for split in [Split::Train, Split::Dev, Split::Test] {
        let requested = entries.iter().filter(|e| e.split == split).count();
        let kept = clips.iter().filter(|c| c.split == split).count();
        if requested > 0 && kept == 0 {
            return Err(Error::Degenerate(format!(
                "build dataset: no {} clip survived ({requested} discarded)",
                split.as_str()
            )));
        }
    }
    let report = BuildReport {
        kept: clips.len(),
        discarded,
    };
    Ok((
        Dataset {
            vocab: vocab.clone(),
            clips,
        },
        report,
    ))
}

const DATASET_MAGIC: &[u8; 4] = b"SGDS";
const DATASET_VERSION: u32 = 1;

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    if bytes.len() > u16::MAX as usize {
        return Err(Error::format(format!("string too long: {} bytes", bytes.len())));
    }
    buf.extend_from_slice(&(bytes.len() as u16).to_le_bytes());
    buf.extend_from_slice(bytes);
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::format(format!(
                "{}: truncated at byte {}",
                self.path, self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format(format!("{}: invalid utf-8 string", self.path)))
    }
}

impl Dataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.vocab.len() as u32).to_le_bytes());
        for t in &self.vocab.tokens {
            put_str(&mut buf, t)?;
        }
        buf.extend_from_slice(&(self.clips.len() as u32).to_le_bytes());
        for c in &self.clips {
            put_str(&mut buf, &c.clip_id)?;
            buf.push(c.split.tag());
            buf.extend_from_slice(&(c.tokens.len() as u32).to_le_bytes());
            for &t in &c.tokens {
                buf.extend_from_slice(&(t as u32).to_le_bytes());
            }
            buf.extend_from_slice(&(c.pose.joint_count() as u32).to_le_bytes());
            buf.extend_from_slice(&c.pose.fps().to_le_bytes());
            buf.extend_from_slice(&(c.pose.len() as u32).to_le_bytes());
            for v in c.pose.to_feature_rows() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut data = Vec::new();
        fs::File::open(path)?.read_to_end(&mut data)?;
        let mut r = Reader {
            data: &data,
            pos: 0,
            path: path.display().to_string(),
        };
        if r.take(4)? != DATASET_MAGIC {
            return Err(Error::format(format!(
                "{}: not a dataset file",
                path.display()
            )));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::format(format!(
                "{}: unsupported dataset version {version}",
                path.display()
            )));
        }
        let vocab_len = r.u32()? as usize;
        let mut tokens = Vec::with_capacity(vocab_len);
        for _ in 0..vocab_len {
            tokens.push(r.string()?);
        }
        if tokens.len() < SPECIALS.len()
            || SPECIALS.iter().zip(&tokens).any(|(s, t)| s != t)
        {
            return Err(Error::format(format!(
                "{}: vocabulary missing special tokens",
                path.display()
            )));
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let vocab = Vocabulary { tokens, index };
        let clip_count = r.u32()? as usize;
        let mut clips = Vec::with_capacity(clip_count);
        for _ in 0..clip_count {
            let clip_id = r.string()?;
            let split = Split::from_tag(r.u8()?)?;
            let token_count = r.u32()? as usize;
            let mut toks = Vec::with_capacity(token_count);
            for _ in 0..token_count {
                let id = r.u32()? as usize;
                if id >= vocab.len() {
                    return Err(Error::format(format!(
                        "{}: token id {id} outside vocabulary",
                        path.display()
                    )));
                }
                toks.push(id);
            }
            let joint_count = r.u32()? as usize;
            let fps = r.f64()?;
            let frame_count = r.u32()? as usize;
            let fd = 3 * joint_count + 1;
            let mut rows = Vec::with_capacity(frame_count * fd);
            for _ in 0..frame_count * fd {
                rows.push(r.f64()?);
            }
            clips.push(DatasetClip {
                clip_id,
                split,
                tokens: toks,
                pose: PoseSequence::from_feature_rows(joint_count, fps, &rows)?,
            });
        }
        if r.pos != data.len() {
            return Err(Error::format(format!(
                "{}: {} trailing bytes",
                path.display(),
                data.len() - r.pos
            )));
        }
        Ok(Dataset { vocab, clips })
    }

    pub fn clips_for(&self, split: Split) -> Vec<&DatasetClip> {
        self.clips.iter().filter(|c| c.split == split).collect()
    }
}

/// One padded training batch, flat row-major buffers throughout.
/// `tgt_in` is `tgt_out` shifted one frame right with a zero first row; the
/// model swaps that row for its learned start frame. `tgt_mask` holds one
/// bit per frame position: 1 over each clip's real length, 0 over padding.
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    pub size: usize,
    pub src_len: usize,
    pub frame_len: usize,
    pub feature_dim: usize,
    pub pad_index: usize,
    pub src: Vec<usize>,
    pub src_mask: Vec<f64>,
    pub tgt_in: Vec<f64>,
    pub tgt_out: Vec<f64>,
    pub tgt_mask: Vec<f64>,
    /// Clips cut down to the batch length caps during the build.
    pub truncated: usize,
}

impl PaddedBatch {
    /// Real frame count of one batch row; mask rows are 1-prefixes.
    pub fn real_frames(&self, b: usize) -> usize {
        self.tgt_mask[b * self.frame_len..(b + 1) * self.frame_len]
            .iter()
            .take_while(|&&m| m == 1.0)
            .count()
    }

    /// Real token count of one batch row.
    pub fn real_tokens(&self, b: usize) -> usize {
        self.src_mask[b * self.src_len..(b + 1) * self.src_len]
            .iter()
            .take_while(|&&m| m == 1.0)
            .count()
    }
}

/// Element mask: 1 where the value differs from the padding value.
pub fn make_mask(values: &[f64], pad_value: f64) -> Vec<f64> {
    values
        .iter()
        .map(|&v| if v != pad_value { 1.0 } else { 0.0 })
        .collect()
}

/// Pack clips into one fixed-width batch. Every field is allocated once and
/// filled in place; over-long token or frame sequences are truncated to the
/// caps and counted in `truncated`.
pub fn build_batch(
    clips: &[&DatasetClip],
    max_src_len: usize,
    max_frames: usize,
) -> Result<PaddedBatch> {
    if clips.is_empty() {
        return Err(Error::contract("batch: no clips"));
    }
    if max_src_len == 0 || max_frames == 0 {
        return Err(Error::contract("batch: zero length cap"));
    }
    let feature_dim = clips[0].pose.feature_dim();
    for c in clips {
        if c.pose.feature_dim() != feature_dim {
            return Err(Error::dim(format!(
                "batch: clip {} has feature dim {}, expected {feature_dim}",
                c.clip_id,
                c.pose.feature_dim()
            )));
        }
        if c.pose.len() == 0 || c.tokens.is_empty() {
            return Err(Error::contract(format!("batch: clip {} is empty", c.clip_id)));
        }
    }
    let size = clips.len();
    let mut truncated = 0usize;
    for c in clips {
        if c.tokens.len() > max_src_len || c.pose.len() > max_frames {
            truncated += 1;
        }
    }
    let src_len = clips
        .iter()
        .map(|c| c.tokens.len().min(max_src_len))
        .max()
        .unwrap();
    let frame_len = clips
        .iter()
        .map(|c| c.pose.len().min(max_frames))
        .max()
        .unwrap();
    let mut src = vec![PAD; size * src_len];
    let mut tgt_out = vec![0.0; size * frame_len * feature_dim];
    let mut tgt_in = vec![0.0; size * frame_len * feature_dim];
    let mut tgt_mask = vec![0.0; size * frame_len];
    for (b, c) in clips.iter().enumerate() {
        for (i, &t) in c.tokens.iter().take(src_len).enumerate() {
            src[b * src_len + i] = t;
        }
        let frames = c.pose.len().min(frame_len);
        let rows = c.pose.to_feature_rows();
        let start = b * frame_len * feature_dim;
        tgt_out[start..start + frames * feature_dim]
            .copy_from_slice(&rows[..frames * feature_dim]);
        for t in 0..frames {
            tgt_mask[b * frame_len + t] = 1.0;
        }
    }
    for b in 0..size {
        let base = b * frame_len * feature_dim;
        for t in 1..frame_len {
            let (dst, src_row) = (
                base + t * feature_dim,
                base + (t - 1) * feature_dim,
            );
            for k in 0..feature_dim {
                tgt_in[dst + k] = tgt_out[src_row + k];
            }
        }
    }
    let src_values: Vec<f64> = src.iter().map(|&t| t as f64).collect();
    let src_mask = make_mask(&src_values, PAD as f64);
    Ok(PaddedBatch {
        size,
        src_len,
        frame_len,
        feature_dim,
        pad_index: PAD,
        src,
        src_mask,
        tgt_in,
        tgt_out,
        tgt_mask,
        truncated,
    })
}

/// Add zero-mean gaussian noise to every coordinate of the unmasked decoder
/// input rows. The counter column and padding rows stay untouched.
pub fn augment_gaussian_noise(batch: &mut PaddedBatch, sigma: f64, rng: &mut Rng) {
    if sigma == 0.0 {
        return;
    }
    let fd = batch.feature_dim;
    for b in 0..batch.size {
        for t in 0..batch.frame_len {
            if batch.tgt_mask[b * batch.frame_len + t] != 1.0 {
                continue;
            }
            let row = (b * batch.frame_len + t) * fd;
            for k in 0..fd - 1 {
                batch.tgt_in[row + k] += rng.normal(0.0, sigma);
            }
        }
    }
}

/// Blank every decoder input channel except the counter.
pub fn augment_just_counter(batch: &mut PaddedBatch) {
    let fd = batch.feature_dim;
    for (i, v) in batch.tgt_in.iter_mut().enumerate() {
        if i % fd != fd - 1 {
            *v = 0.0;
        }
    }
}

/// Future prediction: position t is retargeted to frame t+k while the
/// decoder inputs stay as they are, and the last k positions of each clip
/// drop out of the mask. Clips shorter than k+1 frames are left unchanged;
/// the returned count says how many were skipped that way.
pub fn augment_future_prediction(batch: &mut PaddedBatch, k: usize) -> usize {
    if k == 0 {
        return 0;
    }
    let fd = batch.feature_dim;
    let mut skipped = 0usize;
    for b in 0..batch.size {
        let len = batch.real_frames(b);
        if k >= len {
            skipped += 1;
            continue;
        }
        let base = b * batch.frame_len * fd;
        for t in 0..len - k {
            let dst = base + t * fd;
            let from = base + (t + k) * fd;
            for f in 0..fd {
                batch.tgt_out[dst + f] = batch.tgt_out[from + f];
            }
        }
        for t in len - k..len {
            let row = base + t * fd;
            for f in 0..fd {
                batch.tgt_out[row + f] = 0.0;
            }
            batch.tgt_mask[b * batch.frame_len + t] = 0.0;
        }
    }
    skipped
}

pub const DEFAULT_NOISE_SIGMA: f64 = 0.01;
pub const DEFAULT_FUTURE_SHIFT: usize = 10;
