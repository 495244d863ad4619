//! Subcommand bodies. Each op validates its inputs up front so missing
//! files fail as user errors with the offending path named, then leans on
//! the core crate for the actual work.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use signforge_core::dataprep::{
    build_dataset, clean_sequence, read_keypoint_dir, read_manifest, CleanPolicy, Dataset,
    Split, Vocabulary, TOTAL_JOINTS,
};
use signforge_core::diffusion::{
    prepare_condition, resample_nearest, DenoiserConfig, DiffusionModel, DiffusionSample,
};
use signforge_core::dtw::{
    histogram, score_outputs, write_histogram_tsv, write_report_tsv, DtwConfig, FrameCost,
};
use signforge_core::frnet::{condition_pair, GrayImage};
use signforge_core::lifting::{lift_sequence, Frame2D, LiftConfig, Point2, Sequence2D};
use signforge_core::metrics::{
    hand_keypoint_distance, hand_ssim, read_hand_boxes, read_hand_keypoints, ssim,
};
use signforge_core::rng::Rng;
use signforge_core::skeleton::{
    normalize_sequence, parse_pose_text, write_pose_text, PoseSequence, SkeletonTopology,
};
use signforge_core::translator::{translate_corpus, TranslatorConfig, TranslatorModel};
use signforge_core::Error;

use crate::{cfg, Failure, OpResult};
use crate::{
    EvalDtwArgs, FrArgs, MetricsArgs, PrepArgs, SampleArgs, TrainDiffArgs, TrainPoseArgs,
    TranslateArgs,
};

fn need_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::user(format!("{what} not found: {}", path.display())))
    }
}

fn need_dir(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::user(format!("{what} not found: {}", path.display())))
    }
}

fn ensure_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::internal(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text)
        .map_err(|e| Failure::internal(format!("cannot write {}: {e}", path.display())))
}

/// File names in `dir` with the given suffix, sorted for determinism.
fn sorted_files(dir: &Path, suffix: &str) -> Result<Vec<String>, Failure> {
    let entries = fs::read_dir(dir)
        .map_err(|e| Failure::internal(format!("cannot read {}: {e}", dir.display())))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry =
            entry.map_err(|e| Failure::internal(format!("cannot read {}: {e}", dir.display())))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(suffix) && entry.path().is_file() {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Keep the exit class of the underlying error but name the pipeline stage.
fn stage_fail(stage: &str, e: Error) -> Failure {
    match Failure::from(e) {
        Failure::User(m) => Failure::User(format!("{stage}: {m}")),
        Failure::Internal(m) => Failure::Internal(format!("{stage}: {m}")),
    }
}

fn frame_fail(index: usize, e: Error) -> Failure {
    match Failure::from(e) {
        Failure::User(m) => Failure::User(format!("frame {index}: {m}")),
        Failure::Internal(m) => Failure::Internal(format!("frame {index}: {m}")),
    }
}

fn parse_policy(name: &str) -> Result<CleanPolicy, Failure> {
    match name {
        "median" => Ok(CleanPolicy::MedianReplace),
        "drop" => Ok(CleanPolicy::Drop),
        _ => Err(Failure::user(format!(
            "policy must be median or drop, got {name:?}"
        ))),
    }
}

/// Zero out detector points that are not finite so one corrupt value marks
/// the point as unobserved instead of poisoning the lift.
fn sanitize_2d(seq: &Sequence2D) -> signforge_core::Result<Sequence2D> {
    let frames = seq
        .frames()
        .iter()
        .map(|f| Frame2D {
            points: f
                .points
                .iter()
                .map(|p| {
                    let ok = p.u.is_finite()
                        && p.v.is_finite()
                        && p.confidence.is_finite()
                        && p.confidence > 0.0;
                    if ok {
                        *p
                    } else {
                        Point2 {
                            u: 0.0,
                            v: 0.0,
                            confidence: 0.0,
                        }
                    }
                })
                .collect(),
        })
        .collect();
    Sequence2D::new(seq.joint_count(), seq.fps(), frames)
}

/// Ingest, lift, clean and normalise one clip. Per-clip failures report the
/// stage that rejected the clip; the caller drops it and carries on.
fn prep_clip(
    clip_id: &str,
    keypoints: &Path,
    fps: f64,
    policy: CleanPolicy,
    topo: &SkeletonTopology,
) -> Result<(PoseSequence, usize), (&'static str, Error)> {
    let raw = read_keypoint_dir(keypoints, clip_id, fps).map_err(|e| ("ingest", e))?;
    let raw = sanitize_2d(&raw).map_err(|e| ("ingest", e))?;
    let lifted = lift_sequence(&raw, topo, &LiftConfig::default()).map_err(|e| ("lift", e))?;
    let mut flagged = lifted.interpolated_frames.len();
    let (cleaned, report) =
        clean_sequence(&lifted.sequence, policy).map_err(|e| ("clean", e))?;
    flagged += report.flagged;
    let normalized = normalize_sequence(&cleaned, topo).map_err(|e| ("normalize", e))?;
    Ok((normalized, flagged))
}

pub fn prep(a: &PrepArgs) -> OpResult {
    need_file(&a.manifest, "manifest")?;
    need_dir(&a.keypoints, "keypoint directory")?;
    let policy = parse_policy(&a.policy)?;
    let entries = read_manifest(&a.manifest).map_err(|e| stage_fail("manifest", e))?;
    if entries.is_empty() {
        return Err(Failure::user("manifest: no clips listed"));
    }
    ensure_out(&a.out)?;

    let topo = SkeletonTopology::signing_default();
    let mut drop_detail: BTreeMap<String, String> = BTreeMap::new();
    let mut flagged_total = 0usize;
    for e in &entries {
        match prep_clip(&e.clip_id, &a.keypoints, a.fps, policy, &topo) {
            Ok((seq, flagged)) => {
                flagged_total += flagged;
                let path = a.out.join(&e.pose_path);
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent).map_err(|err| {
                        Failure::internal(format!("write: cannot create {}: {err}", parent.display()))
                    })?;
                }
                write_pose_text(&seq, &path).map_err(|err| stage_fail("write", err))?;
            }
            Err((stage, err)) => {
                drop_detail.insert(e.clip_id.clone(), format!("{stage}: {err}"));
            }
        }
    }

    // The vocabulary comes from training text only so dev/test wording
    // cannot leak into the token table.
    let train_texts: Vec<&str> = entries
        .iter()
        .filter(|e| e.split == Split::Train)
        .map(|e| e.text.as_str())
        .collect();
    let vocab = if train_texts.is_empty() {
        Vocabulary::build(entries.iter().map(|e| e.text.as_str()))
    } else {
        Vocabulary::build(train_texts)
    };

    let (dataset, report) = build_dataset(&entries, &a.out, &vocab, policy, a.max_frames)
        .map_err(|e| stage_fail("build", e))?;
    dataset
        .save(&a.out.join("dataset.sgds"))
        .map_err(|e| stage_fail("write", e))?;
    vocab
        .save(&a.out.join("vocab.tsv"))
        .map_err(|e| stage_fail("write", e))?;
    for (id, reason) in &report.discarded {
        drop_detail
            .entry(id.clone())
            .or_insert_with(|| format!("build: {}", reason.describe()));
    }

    let mut tsv = String::from("clip_id\tstatus\tdetail\n");
    for e in &entries {
        match drop_detail.get(&e.clip_id) {
            Some(detail) => tsv.push_str(&format!("{}\tdropped\t{detail}\n", e.clip_id)),
            None => tsv.push_str(&format!("{}\tkept\t-\n", e.clip_id)),
        }
    }
    write_text(&a.out.join("prep_report.tsv"), &tsv)?;

    for e in &entries {
        if let Some(detail) = drop_detail.get(&e.clip_id) {
            println!("dropped {}: {detail}", e.clip_id);
        }
    }
    println!("ingested {}", entries.len());
    println!("flagged {flagged_total}");
    println!("dropped {}", drop_detail.len());
    println!("retained {}/{}", report.kept, entries.len());
    Ok(())
}

pub fn train_pose(a: &TrainPoseArgs, seed: u64) -> OpResult {
    need_file(&a.dataset, "dataset")?;
    if a.epochs == 0 {
        return Err(Failure::user("epochs must be at least 1"));
    }
    let split = Split::parse(&a.split).map_err(Failure::from)?;
    let ds = Dataset::load(&a.dataset).map_err(Failure::from)?;
    let clips = ds.clips_for(split);
    if clips.is_empty() {
        return Err(Failure::user(format!(
            "dataset has no {} clips",
            split.as_str()
        )));
    }
    let joints = clips[0].pose.joint_count();
    let mut tc = TranslatorConfig::new(ds.vocab.len(), joints);
    if let Some(path) = &a.config {
        need_file(path, "config")?;
        cfg::apply_translator(path, &mut tc).map_err(Failure::from)?;
    }
    ensure_out(&a.out)?;
    let mut rng = Rng::seed_from_u64(seed);
    let mut model = TranslatorModel::new(tc, &mut rng).map_err(Failure::from)?;
    let report = model
        .train(&clips, a.epochs, Some(&a.out), &mut rng)
        .map_err(Failure::from)?;
    for e in &report.epochs {
        println!("epoch {} masked {:.6} total {:.6}", e.epoch, e.masked, e.total);
    }
    if report.future_skipped > 0 {
        println!("future_skipped {}", report.future_skipped);
    }
    if report.truncated > 0 {
        println!("truncated {}", report.truncated);
    }
    if let Some(path) = &report.final_checkpoint {
        println!("checkpoint {}", path.display());
    }
    Ok(())
}

pub fn translate(a: &TranslateArgs, seed: u64) -> OpResult {
    need_file(&a.checkpoint, "checkpoint")?;
    need_file(&a.dataset, "dataset")?;
    need_file(&a.text, "text input")?;
    let ds = Dataset::load(&a.dataset).map_err(Failure::from)?;
    if ds.clips.is_empty() {
        return Err(Failure::user("dataset has no clips"));
    }
    let joints = ds.clips[0].pose.joint_count();
    let mut tc = TranslatorConfig::new(ds.vocab.len(), joints);
    if let Some(path) = &a.config {
        need_file(path, "config")?;
        cfg::apply_translator(path, &mut tc).map_err(Failure::from)?;
    }
    let mut rng = Rng::seed_from_u64(seed);
    let model = TranslatorModel::new(tc, &mut rng).map_err(Failure::from)?;
    model.load_checkpoint(&a.checkpoint).map_err(Failure::from)?;

    let text = fs::read_to_string(&a.text)
        .map_err(|e| Failure::internal(format!("cannot read {}: {e}", a.text.display())))?;
    let items: Vec<(String, Vec<usize>)> = text
        .lines()
        .enumerate()
        .map(|(i, line)| (format!("line_{:04}", i + 1), ds.vocab.encode(line)))
        .collect();
    if items.is_empty() {
        return Err(Failure::user(format!(
            "text input is empty: {}",
            a.text.display()
        )));
    }
    ensure_out(&a.out)?;
    let snapshot = model.snapshot();
    let mut written = 0usize;
    for (id, result) in translate_corpus(&snapshot, &items) {
        let seq = result.map_err(|e| stage_fail(&id, e))?;
        write_pose_text(&seq, &a.out.join(format!("{id}.pose")))
            .map_err(|e| stage_fail(&id, e))?;
        written += 1;
    }
    println!("wrote {written} pose files");
    Ok(())
}

pub fn eval_dtw(a: &EvalDtwArgs) -> OpResult {
    need_dir(&a.pred, "prediction directory")?;
    need_dir(&a.gt, "reference directory")?;
    let dtw_cfg = DtwConfig {
        frame_cost: FrameCost::parse(&a.cost).map_err(Failure::from)?,
        normalize_by_path_length: !a.raw,
    };
    let names = sorted_files(&a.gt, ".pose")?;
    if names.is_empty() {
        return Err(Failure::user(format!(
            "no .pose files in {}",
            a.gt.display()
        )));
    }
    let mut items = Vec::with_capacity(names.len());
    for name in &names {
        let id = name.trim_end_matches(".pose").to_string();
        let gt_seq = parse_pose_text(&a.gt.join(name)).map_err(Failure::from)?;
        let pred_path = a.pred.join(name);
        let pred_seq = if pred_path.is_file() {
            parse_pose_text(&pred_path)
        } else {
            Err(Error::format(format!(
                "missing prediction {}",
                pred_path.display()
            )))
        };
        items.push((id, pred_seq, gt_seq));
    }
    let scores = score_outputs(&items, &dtw_cfg).map_err(Failure::from)?;
    ensure_out(&a.out)?;
    write_report_tsv(&scores, &a.out.join("dtw_report.tsv")).map_err(Failure::from)?;
    let values: Vec<f64> = scores.clips.iter().map(|c| c.dtw).collect();
    let bins = histogram(&values, a.bin_width).map_err(Failure::from)?;
    write_histogram_tsv(&bins, &a.out.join("dtw_histogram.tsv")).map_err(Failure::from)?;
    println!("clips {}", scores.clips.len());
    println!("failed {}", scores.failed.len());
    for id in &scores.failed {
        println!("failed_clip {id}");
    }
    println!("mean {:.6}", scores.mean);
    println!("median {:.6}", scores.median);
    Ok(())
}

pub fn fr(a: &FrArgs) -> OpResult {
    need_file(&a.pose, "pose file")?;
    if let Some(photos) = &a.photos {
        need_dir(photos, "photo directory")?;
    }
    let seq = parse_pose_text(&a.pose).map_err(Failure::from)?;
    let topo = if seq.joint_count() == TOTAL_JOINTS {
        SkeletonTopology::signing_default()
    } else {
        SkeletonTopology::chain(seq.joint_count(), 1.0).map_err(Failure::from)?
    };
    ensure_out(&a.out)?;
    for (t, frame) in seq.frames().iter().enumerate() {
        let index = t + 1;
        let photo = match &a.photos {
            Some(dir) => {
                let path = dir.join(format!("frame_{index:04}.pgm"));
                if path.is_file() {
                    Some(GrayImage::read_pgm(&path).map_err(|e| frame_fail(index, e))?)
                } else {
                    None
                }
            }
            None => None,
        };
        let (c, d) = condition_pair(
            frame,
            &topo,
            photo.as_ref(),
            a.width,
            a.height,
            a.window,
            a.offset,
        )
        .map_err(|e| frame_fail(index, e))?;
        c.write_pgm(&a.out.join(format!("c_{index:04}.pgm")))
            .map_err(|e| frame_fail(index, e))?;
        d.write_pgm(&a.out.join(format!("d_{index:04}.pgm")))
            .map_err(|e| frame_fail(index, e))?;
    }
    println!(
        "wrote {} condition images for {} frames",
        2 * seq.len(),
        seq.len()
    );
    Ok(())
}

pub fn train_diff(a: &TrainDiffArgs, seed: u64) -> OpResult {
    need_dir(&a.images, "image directory")?;
    if a.epochs == 0 {
        return Err(Failure::user("epochs must be at least 1"));
    }
    let mut dc = DenoiserConfig::default();
    if let Some(path) = &a.config {
        need_file(path, "config")?;
        cfg::apply_denoiser(path, &mut dc).map_err(Failure::from)?;
    }
    let xs: Vec<String> = sorted_files(&a.images, ".pgm")?
        .into_iter()
        .filter(|n| n.starts_with("x_"))
        .collect();
    if xs.is_empty() {
        return Err(Failure::user(format!(
            "no x_*.pgm training images in {}",
            a.images.display()
        )));
    }
    let mut samples = Vec::with_capacity(xs.len());
    for name in &xs {
        let suffix = &name[2..];
        let c_path = a.images.join(format!("c_{suffix}"));
        let d_path = a.images.join(format!("d_{suffix}"));
        need_file(&c_path, "condition image")?;
        need_file(&d_path, "condition image")?;
        let x = GrayImage::read_pgm(&a.images.join(name)).map_err(Failure::from)?;
        let x = if x.width() == dc.size && x.height() == dc.size {
            x
        } else {
            resample_nearest(&x, dc.size, dc.size).map_err(Failure::from)?
        };
        let c = GrayImage::read_pgm(&c_path).map_err(Failure::from)?;
        let d = GrayImage::read_pgm(&d_path).map_err(Failure::from)?;
        samples.push(DiffusionSample {
            image: x.signed_scale(),
            c: prepare_condition(&c, dc.size).map_err(Failure::from)?,
            d: prepare_condition(&d, dc.size).map_err(Failure::from)?,
        });
    }
    ensure_out(&a.out)?;
    let mut rng = Rng::seed_from_u64(seed);
    let mut model = DiffusionModel::new(dc, &mut rng).map_err(Failure::from)?;
    let curve = model
        .train(&samples, a.epochs, &mut rng)
        .map_err(Failure::from)?;
    let mut tsv = String::from("epoch\tloss\n");
    for e in &curve {
        println!("epoch {} loss {:.6}", e.epoch, e.loss);
        tsv.push_str(&format!("{}\t{:.6}\n", e.epoch, e.loss));
    }
    write_text(&a.out.join("diffusion_loss.tsv"), &tsv)?;
    let checkpoint = a.out.join("diffusion.sgnf");
    model.save(&checkpoint).map_err(Failure::from)?;
    println!("checkpoint {}", checkpoint.display());
    Ok(())
}

pub fn sample(a: &SampleArgs, seed: u64) -> OpResult {
    need_file(&a.checkpoint, "checkpoint")?;
    need_file(&a.cond_c, "condition image")?;
    need_file(&a.cond_d, "condition image")?;
    if a.count == 0 {
        return Err(Failure::user("count must be at least 1"));
    }
    let mut dc = DenoiserConfig::default();
    if let Some(path) = &a.config {
        need_file(path, "config")?;
        cfg::apply_denoiser(path, &mut dc).map_err(Failure::from)?;
    }
    // Parameters come from the checkpoint, so the init seed is irrelevant;
    // the sampling rng below is what --seed controls.
    let mut init = Rng::seed_from_u64(0);
    let model = DiffusionModel::new(dc, &mut init).map_err(Failure::from)?;
    model.load_checkpoint(&a.checkpoint).map_err(Failure::from)?;
    let size = model.config().size;
    let c_img = GrayImage::read_pgm(&a.cond_c).map_err(Failure::from)?;
    let d_img = GrayImage::read_pgm(&a.cond_d).map_err(Failure::from)?;
    let c = prepare_condition(&c_img, size).map_err(Failure::from)?;
    let d = prepare_condition(&d_img, size).map_err(Failure::from)?;
    ensure_out(&a.out)?;
    let base = Rng::seed_from_u64(seed);
    for i in 0..a.count {
        let mut rng = base.fork(i as u64);
        let values = model.sample_signed(&c, &d, &mut rng).map_err(Failure::from)?;
        let img = GrayImage::from_signed(size, size, &values).map_err(Failure::from)?;
        img.write_pgm(&a.out.join(format!("sample_{:04}.pgm", i + 1)))
            .map_err(Failure::from)?;
    }
    println!("wrote {} samples", a.count);
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "-".to_string(),
    }
}

fn mean_of(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

pub fn metrics(a: &MetricsArgs) -> OpResult {
    need_dir(&a.pred, "prediction directory")?;
    need_dir(&a.gt, "reference directory")?;
    if a.pred_hands.is_some() != a.gt_hands.is_some() {
        return Err(Failure::user(
            "hand keypoint distance needs both --pred-hands and --gt-hands",
        ));
    }
    let boxes = match &a.boxes {
        Some(path) => {
            need_file(path, "hand box sidecar")?;
            Some(read_hand_boxes(path).map_err(Failure::from)?)
        }
        None => None,
    };
    let load_kp = |path: &Option<std::path::PathBuf>| -> Result<_, Failure> {
        match path {
            Some(p) => {
                need_file(p, "hand keypoint sidecar")?;
                Ok(Some(read_hand_keypoints(p).map_err(Failure::from)?))
            }
            None => Ok(None),
        }
    };
    let kp_pred = load_kp(&a.pred_hands)?;
    let kp_gt = load_kp(&a.gt_hands)?;

    let names = sorted_files(&a.gt, ".pgm")?;
    if names.is_empty() {
        return Err(Failure::user(format!(
            "no .pgm frames in {}",
            a.gt.display()
        )));
    }
    let mut rows = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let index = i + 1;
        let gt_img = GrayImage::read_pgm(&a.gt.join(name)).map_err(|e| frame_fail(index, e))?;
        let pred_path = a.pred.join(name);
        if !pred_path.is_file() {
            return Err(Failure::user(format!(
                "frame {index}: prediction missing: {}",
                pred_path.display()
            )));
        }
        let pred_img = GrayImage::read_pgm(&pred_path).map_err(|e| frame_fail(index, e))?;
        let s = ssim(&pred_img, &gt_img).map_err(|e| frame_fail(index, e))?;
        let hand = match &boxes {
            Some(map) => match map.get(&index) {
                Some(list) => {
                    Some(hand_ssim(&pred_img, &gt_img, list).map_err(|e| frame_fail(index, e))?)
                }
                None => None,
            },
            None => None,
        };
        let dist = match (&kp_pred, &kp_gt) {
            (Some(p), Some(g)) => match (p.get(&index), g.get(&index)) {
                (Some(kp), Some(kg)) => {
                    Some(hand_keypoint_distance(kp, kg).map_err(|e| frame_fail(index, e))?)
                }
                _ => None,
            },
            _ => None,
        };
        rows.push((index, name.clone(), s, hand, dist));
    }

    let ssim_mean = mean_of(&rows.iter().map(|r| r.2).collect::<Vec<_>>());
    let hand_mean = mean_of(&rows.iter().filter_map(|r| r.3).collect::<Vec<_>>());
    let dist_mean = mean_of(&rows.iter().filter_map(|r| r.4).collect::<Vec<_>>());

    let mut tsv = String::from("frame\tfile\tssim\thand_ssim\thand_distance\n");
    for (index, name, s, hand, dist) in &rows {
        tsv.push_str(&format!(
            "{index}\t{name}\t{:.6}\t{}\t{}\n",
            s,
            fmt_opt(*hand),
            fmt_opt(*dist)
        ));
    }
    tsv.push_str(&format!(
        "mean\t-\t{}\t{}\t{}\n",
        fmt_opt(ssim_mean),
        fmt_opt(hand_mean),
        fmt_opt(dist_mean)
    ));
    ensure_out(&a.out)?;
    write_text(&a.out.join("metrics.tsv"), &tsv)?;

    println!("frames {}", rows.len());
    println!("mean_ssim {}", fmt_opt(ssim_mean));
    if hand_mean.is_some() {
        println!("mean_hand_ssim {}", fmt_opt(hand_mean));
    }
    if dist_mean.is_some() {
        println!("mean_hand_distance {}", fmt_opt(dist_mean));
    }
    Ok(())
}
