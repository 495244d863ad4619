//! End-to-end checks of the `signforge` binary: every subcommand is driven
//! through `std::process::Command` against synthetic fixtures, asserting
//! artifacts, stdout counters and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use signforge_core::frnet::GrayImage;
use signforge_core::lifting::project_orthographic;
use signforge_core::rng::Rng;
use signforge_core::skeleton::{
    parse_pose_text, write_pose_text, PoseFrame, PoseSequence, SkeletonTopology,
};
use tempfile::tempdir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_signforge"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn signforge")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "expected success, got {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        stdout_of(out),
        stderr_of(out)
    );
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        stdout_of(out),
        stderr_of(out)
    );
}

/// Random pose with exact bone lengths: each child joint is placed on a
/// sphere of the bone's length around its parent.
fn feasible_frames(topo: &SkeletonTopology, frames: usize, rng: &mut Rng) -> PoseSequence {
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let mut joints = vec![[0.0f64; 3]; topo.joint_count()];
        joints[topo.root()] = [0.3 + 0.01 * t as f64, 0.4, 0.0];
        for bone in topo.bones() {
            let dir = loop {
                let v = [
                    rng.normal(0.0, 1.0),
                    rng.normal(0.0, 1.0),
                    rng.normal(0.0, 1.0),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-6 {
                    break [v[0] / n, v[1] / n, v[2] / n];
                }
            };
            let p = joints[bone.parent];
            joints[bone.child] = [
                p[0] + bone.length * dir[0],
                p[1] + bone.length * dir[1],
                p[2] + bone.length * dir[2],
            ];
        }
        out.push(PoseFrame::new(joints, (t + 1) as f64 / frames as f64));
    }
    PoseSequence::new(topo.joint_count(), 25.0, out).unwrap()
}

/// Write detector json files for one clip, one per frame. `blank` drops all
/// confidences to zero, mimicking a detector that saw nothing.
fn write_keypoint_files(dir: &Path, clip_id: &str, seq: &PoseSequence, blank: bool) {
    let obs = project_orthographic(seq);
    for (t, frame) in obs.frames().iter().enumerate() {
        let slice = |lo: usize, hi: usize| -> String {
            let vals: Vec<f64> = frame.points[lo..hi]
                .iter()
                .flat_map(|p| {
                    if blank {
                        [0.0, 0.0, 0.0]
                    } else {
                        [p.u, p.v, p.confidence]
                    }
                })
                .collect();
            format!("{vals:?}")
        };
        let json = format!(
            "{{\"people\":[{{\"pose_keypoints_2d\":{},\"hand_left_keypoints_2d\":{},\"hand_right_keypoints_2d\":{}}}]}}",
            slice(0, 8),
            slice(8, 29),
            slice(29, 50)
        );
        let name = format!("{clip_id}_{:012}_keypoints.json", t + 1);
        fs::write(dir.join(name), json).unwrap();
    }
}

fn write_manifest(path: &Path, rows: &[(&str, &str, &str)]) {
    let mut text = String::from("clip_id\tsplit\tpose_path\ttext\n");
    for (id, split, words) in rows {
        text.push_str(&format!("{id}\t{split}\t{id}.pose\t{words}\n"));
    }
    fs::write(path, text).unwrap();
}

/// prep fixture: three valid train clips, optionally one of them blank.
fn prep_fixture(root: &Path, blank_second: bool) -> (std::path::PathBuf, std::path::PathBuf) {
    let keypoints = root.join("keypoints");
    fs::create_dir_all(&keypoints).unwrap();
    let topo = SkeletonTopology::signing_default();
    let mut rng = Rng::seed_from_u64(11);
    for (i, id) in ["clip_a", "clip_b", "clip_c"].iter().enumerate() {
        let seq = feasible_frames(&topo, 4, &mut rng);
        write_keypoint_files(&keypoints, id, &seq, blank_second && i == 1);
    }
    let manifest = root.join("manifest.tsv");
    write_manifest(
        &manifest,
        &[
            ("clip_a", "train", "wave hello now"),
            ("clip_b", "train", "point left then right"),
            ("clip_c", "train", "wave goodbye now"),
        ],
    );
    (manifest, keypoints)
}

const TINY_TRANSLATOR: &str = "layers = 1\nheads = 2\nmodel_dim = 8\nff_dim = 8\n\
                               max_src_len = 8\nmax_frames = 8\nbatch_size = 2\n";

#[test]
fn prep_keeps_three_valid_clips() {
    let dir = tempdir().unwrap();
    let (manifest, keypoints) = prep_fixture(dir.path(), false);
    let out = dir.path().join("out");
    let res = run(&[
        "prep",
        "--manifest",
        manifest.to_str().unwrap(),
        "--keypoints",
        keypoints.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_ok(&res);
    let text = stdout_of(&res);
    assert!(text.contains("ingested 3"), "{text}");
    assert!(text.contains("retained 3/3"), "{text}");
    for id in ["clip_a", "clip_b", "clip_c"] {
        let pose = parse_pose_text(&out.join(format!("{id}.pose"))).unwrap();
        assert_eq!(pose.joint_count(), 50);
        assert_eq!(pose.len(), 4);
    }
    assert!(out.join("dataset.sgds").is_file());
    assert!(out.join("vocab.tsv").is_file());
    assert!(out.join("prep_report.tsv").is_file());
}

#[test]
fn prep_drops_and_names_the_blank_clip() {
    let dir = tempdir().unwrap();
    let (manifest, keypoints) = prep_fixture(dir.path(), true);
    let out = dir.path().join("out");
    let res = run(&[
        "prep",
        "--manifest",
        manifest.to_str().unwrap(),
        "--keypoints",
        keypoints.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_ok(&res);
    let text = stdout_of(&res);
    assert!(text.contains("retained 2/3"), "{text}");
    assert!(text.contains("dropped clip_b"), "{text}");
    assert!(!out.join("clip_b.pose").exists());
    let report = fs::read_to_string(out.join("prep_report.tsv")).unwrap();
    assert!(report.contains("clip_b\tdropped"), "{report}");
    assert!(report.contains("clip_a\tkept"), "{report}");
}

#[test]
fn prep_missing_manifest_is_a_user_error_naming_the_path() {
    let dir = tempdir().unwrap();
    fs::create_dir_all(dir.path().join("kp")).unwrap();
    let res = run(&[
        "prep",
        "--manifest",
        dir.path().join("ghost.tsv").to_str().unwrap(),
        "--keypoints",
        dir.path().join("kp").to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_exit(&res, 2);
    assert!(stderr_of(&res).contains("ghost.tsv"), "{}", stderr_of(&res));
}

#[test]
fn prep_reports_the_failing_stage_when_a_split_dies() {
    let dir = tempdir().unwrap();
    let keypoints = dir.path().join("keypoints");
    fs::create_dir_all(&keypoints).unwrap();
    let topo = SkeletonTopology::signing_default();
    let mut rng = Rng::seed_from_u64(3);
    let seq = feasible_frames(&topo, 3, &mut rng);
    write_keypoint_files(&keypoints, "only", &seq, true);
    let manifest = dir.path().join("manifest.tsv");
    write_manifest(&manifest, &[("only", "train", "nothing to see")]);
    let res = run(&[
        "prep",
        "--manifest",
        manifest.to_str().unwrap(),
        "--keypoints",
        keypoints.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_exit(&res, 2);
    assert!(stderr_of(&res).contains("build"), "{}", stderr_of(&res));
}

/// Shared prep -> train fixture for the translator commands.
fn trained_translator(root: &Path) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    let (manifest, keypoints) = prep_fixture(root, false);
    let data = root.join("data");
    assert_ok(&run(&[
        "prep",
        "--manifest",
        manifest.to_str().unwrap(),
        "--keypoints",
        keypoints.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]));
    let cfg = root.join("tiny.cfg");
    fs::write(&cfg, TINY_TRANSLATOR).unwrap();
    let run_dir = root.join("run");
    let res = run(&[
        "train-pose",
        "--dataset",
        data.join("dataset.sgds").to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--epochs",
        "1",
    ]);
    assert_ok(&res);
    (data.join("dataset.sgds"), cfg, run_dir.join("epoch_0001.sgnf"))
}

#[test]
fn train_pose_one_epoch_writes_one_checkpoint_and_one_loss_row() {
    let dir = tempdir().unwrap();
    let (_, _, checkpoint) = trained_translator(dir.path());
    let run_dir = checkpoint.parent().unwrap();
    let checkpoints: Vec<String> = fs::read_dir(run_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".sgnf"))
        .collect();
    assert_eq!(checkpoints, vec!["epoch_0001.sgnf".to_string()]);
    let tsv = fs::read_to_string(run_dir.join("training_loss.tsv")).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[0], "epoch\tmasked_loss\ttotal_loss");
    assert_eq!(lines.len(), 2, "{tsv}");
}

#[test]
fn translate_writes_one_pose_file_per_text_line() {
    let dir = tempdir().unwrap();
    let (dataset, cfg, checkpoint) = trained_translator(dir.path());
    let text = dir.path().join("lines.txt");
    fs::write(&text, "wave hello now\npoint left then right\n").unwrap();
    let out = dir.path().join("translated");
    let res = run(&[
        "translate",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--text",
        text.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_ok(&res);
    assert!(stdout_of(&res).contains("wrote 2 pose files"));
    for name in ["line_0001.pose", "line_0002.pose"] {
        let seq = parse_pose_text(&out.join(name)).unwrap();
        assert_eq!(seq.joint_count(), 50);
        assert!(seq.len() >= 1);
    }
}

#[test]
fn translate_missing_checkpoint_is_a_user_error() {
    let dir = tempdir().unwrap();
    let (dataset, cfg, _) = trained_translator(dir.path());
    let text = dir.path().join("lines.txt");
    fs::write(&text, "wave\n").unwrap();
    let res = run(&[
        "translate",
        "--checkpoint",
        dir.path().join("ghost.sgnf").to_str().unwrap(),
        "--dataset",
        dataset.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--text",
        text.to_str().unwrap(),
        "--out",
        dir.path().join("t").to_str().unwrap(),
    ]);
    assert_exit(&res, 2);
    assert!(stderr_of(&res).contains("ghost.sgnf"), "{}", stderr_of(&res));
}

#[test]
fn unknown_config_key_is_a_user_error() {
    let dir = tempdir().unwrap();
    let (dataset, _, _) = trained_translator(dir.path());
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "layrs = 2\n").unwrap();
    let res = run(&[
        "train-pose",
        "--dataset",
        dataset.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--epochs",
        "1",
    ]);
    assert_exit(&res, 2);
    assert!(stderr_of(&res).contains("unknown key"), "{}", stderr_of(&res));
}

/// Directory of simple pose files for the evaluation commands.
fn pose_dir(root: &Path, n: usize) -> std::path::PathBuf {
    let dir = root.join("poses");
    fs::create_dir_all(&dir).unwrap();
    let topo = SkeletonTopology::chain(3, 0.5).unwrap();
    let mut rng = Rng::seed_from_u64(5);
    for i in 0..n {
        let seq = feasible_frames(&topo, 4 + i, &mut rng);
        write_pose_text(&seq, &dir.join(format!("clip_{i}.pose"))).unwrap();
    }
    dir
}

#[test]
fn eval_dtw_identity_oracle_scores_zero() {
    let dir = tempdir().unwrap();
    let poses = pose_dir(dir.path(), 3);
    let out = dir.path().join("eval");
    let res = run(&[
        "eval-dtw",
        "--pred",
        poses.to_str().unwrap(),
        "--gt",
        poses.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_ok(&res);
    let text = stdout_of(&res);
    assert!(text.contains("mean 0.000000"), "{text}");
    assert!(text.contains("median 0.000000"), "{text}");
    let report = fs::read_to_string(out.join("dtw_report.tsv")).unwrap();
    assert_eq!(report.lines().count(), 4, "{report}");
    assert!(out.join("dtw_histogram.tsv").is_file());
}

#[test]
fn eval_dtw_records_missing_predictions_as_failures() {
    let dir = tempdir().unwrap();
    let gt = pose_dir(dir.path(), 3);
    let pred = dir.path().join("pred");
    fs::create_dir_all(&pred).unwrap();
    for name in ["clip_0.pose", "clip_2.pose"] {
        fs::copy(gt.join(name), pred.join(name)).unwrap();
    }
    let res = run(&[
        "eval-dtw",
        "--pred",
        pred.to_str().unwrap(),
        "--gt",
        gt.to_str().unwrap(),
        "--out",
        dir.path().join("eval").to_str().unwrap(),
    ]);
    assert_ok(&res);
    let text = stdout_of(&res);
    assert!(text.contains("failed 1"), "{text}");
    assert!(text.contains("failed_clip clip_1"), "{text}");
}

#[test]
fn fr_writes_both_condition_images_per_frame() {
    let dir = tempdir().unwrap();
    let topo = SkeletonTopology::signing_default();
    let mut rng = Rng::seed_from_u64(7);
    let seq = feasible_frames(&topo, 10, &mut rng);
    let pose = dir.path().join("clip.pose");
    write_pose_text(&seq, &pose).unwrap();
    let out = dir.path().join("cond");
    let res = run(&[
        "fr",
        "--pose",
        pose.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--width",
        "32",
        "--height",
        "32",
    ]);
    assert_ok(&res);
    let pgms: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(pgms.len(), 20);
    for t in 1..=10 {
        let c = GrayImage::read_pgm(&out.join(format!("c_{t:04}.pgm"))).unwrap();
        let d = GrayImage::read_pgm(&out.join(format!("d_{t:04}.pgm"))).unwrap();
        assert_eq!((c.width(), c.height()), (32, 32));
        assert_eq!((d.width(), d.height()), (32, 32));
    }
}

#[test]
fn fr_rejects_a_photo_of_the_wrong_size_naming_the_frame() {
    let dir = tempdir().unwrap();
    let topo = SkeletonTopology::chain(3, 0.5).unwrap();
    let mut rng = Rng::seed_from_u64(8);
    let seq = feasible_frames(&topo, 2, &mut rng);
    let pose = dir.path().join("clip.pose");
    write_pose_text(&seq, &pose).unwrap();
    let photos = dir.path().join("photos");
    fs::create_dir_all(&photos).unwrap();
    GrayImage::filled(16, 16, 128)
        .unwrap()
        .write_pgm(&photos.join("frame_0002.pgm"))
        .unwrap();
    let res = run(&[
        "fr",
        "--pose",
        pose.to_str().unwrap(),
        "--out",
        dir.path().join("cond").to_str().unwrap(),
        "--photos",
        photos.to_str().unwrap(),
        "--width",
        "32",
        "--height",
        "32",
    ]);
    assert_exit(&res, 2);
    assert!(stderr_of(&res).contains("frame 2"), "{}", stderr_of(&res));
}

/// Tiny diffusion fixture: two image/condition triples on an 8x8 grid.
fn diff_fixture(root: &Path) -> std::path::PathBuf {
    let images = root.join("images");
    fs::create_dir_all(&images).unwrap();
    for (i, bright_left) in [(1usize, true), (2usize, false)] {
        let mut x = GrayImage::filled(8, 8, 0).unwrap();
        let mut c = GrayImage::filled(8, 8, 0).unwrap();
        for y in 0..8 {
            for xx in 0..8 {
                let lit = if bright_left { xx < 4 } else { xx >= 4 };
                if lit {
                    x.set(xx, y, 200);
                    c.set(xx, y, 255);
                }
            }
        }
        x.write_pgm(&images.join(format!("x_{i:04}.pgm"))).unwrap();
        c.write_pgm(&images.join(format!("c_{i:04}.pgm"))).unwrap();
        c.write_pgm(&images.join(format!("d_{i:04}.pgm"))).unwrap();
    }
    images
}

const TINY_DENOISER: &str = "size = 8\nchannels = 2\nsteps = 4\nbatch_size = 2\n";

#[test]
fn diffusion_round_trip_trains_and_samples_deterministically() {
    let dir = tempdir().unwrap();
    let images = diff_fixture(dir.path());
    let cfg = dir.path().join("diff.cfg");
    fs::write(&cfg, TINY_DENOISER).unwrap();
    let run_dir = dir.path().join("diff");
    let res = run(&[
        "train-diff",
        "--images",
        images.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--epochs",
        "2",
    ]);
    assert_ok(&res);
    let curve = fs::read_to_string(run_dir.join("diffusion_loss.tsv")).unwrap();
    assert_eq!(curve.lines().count(), 3, "{curve}");
    let checkpoint = run_dir.join("diffusion.sgnf");
    assert!(checkpoint.is_file());

    let draw = |out: &Path, seed: &str| {
        let res = run(&[
            "sample",
            "--checkpoint",
            checkpoint.to_str().unwrap(),
            "--cond-c",
            images.join("c_0001.pgm").to_str().unwrap(),
            "--cond-d",
            images.join("d_0001.pgm").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--count",
            "2",
            "--seed",
            seed,
        ]);
        assert_ok(&res);
    };
    let (s1, s2, s3) = (
        dir.path().join("s1"),
        dir.path().join("s2"),
        dir.path().join("s3"),
    );
    draw(&s1, "7");
    draw(&s2, "7");
    draw(&s3, "8");
    for name in ["sample_0001.pgm", "sample_0002.pgm"] {
        let a = fs::read(s1.join(name)).unwrap();
        let b = fs::read(s2.join(name)).unwrap();
        assert_eq!(a, b, "same seed must reproduce {name}");
    }
    let a = fs::read(s1.join("sample_0001.pgm")).unwrap();
    let c = fs::read(s3.join("sample_0001.pgm")).unwrap();
    assert_ne!(a, c, "different seeds should differ");
}

#[test]
fn metrics_on_identical_sets_is_unit_ssim() {
    let dir = tempdir().unwrap();
    let frames = dir.path().join("frames");
    fs::create_dir_all(&frames).unwrap();
    let mut rng = Rng::seed_from_u64(17);
    for i in 1..=3 {
        let pixels: Vec<u8> = (0..24 * 24).map(|_| rng.below(256) as u8).collect();
        GrayImage::new(24, 24, pixels)
            .unwrap()
            .write_pgm(&frames.join(format!("f_{i:04}.pgm")))
            .unwrap();
    }
    let out = dir.path().join("metrics");
    let res = run(&[
        "metrics",
        "--pred",
        frames.to_str().unwrap(),
        "--gt",
        frames.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_ok(&res);
    assert!(stdout_of(&res).contains("mean_ssim 1.000000"));
    let tsv = fs::read_to_string(out.join("metrics.tsv")).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[0], "frame\tfile\tssim\thand_ssim\thand_distance");
    assert_eq!(lines.len(), 5, "{tsv}");
    for line in &lines[1..4] {
        assert!(line.contains("\t1.000000\t-\t-"), "{line}");
    }
    assert!(lines[4].starts_with("mean\t-\t1.000000"), "{tsv}");
}

#[test]
fn metrics_dimension_mismatch_names_the_frame_and_exits_2() {
    let dir = tempdir().unwrap();
    let gt = dir.path().join("gt");
    let pred = dir.path().join("pred");
    fs::create_dir_all(&gt).unwrap();
    fs::create_dir_all(&pred).unwrap();
    for i in 1..=2 {
        GrayImage::filled(16, 16, 90)
            .unwrap()
            .write_pgm(&gt.join(format!("f_{i:04}.pgm")))
            .unwrap();
    }
    GrayImage::filled(16, 16, 90)
        .unwrap()
        .write_pgm(&pred.join("f_0001.pgm"))
        .unwrap();
    GrayImage::filled(12, 16, 90)
        .unwrap()
        .write_pgm(&pred.join("f_0002.pgm"))
        .unwrap();
    let res = run(&[
        "metrics",
        "--pred",
        pred.to_str().unwrap(),
        "--gt",
        gt.to_str().unwrap(),
        "--out",
        dir.path().join("m").to_str().unwrap(),
    ]);
    assert_exit(&res, 2);
    assert!(stderr_of(&res).contains("frame 2"), "{}", stderr_of(&res));
}

#[test]
fn metrics_with_hand_sidecars_fills_every_column() {
    let dir = tempdir().unwrap();
    let frames = dir.path().join("frames");
    fs::create_dir_all(&frames).unwrap();
    for i in 1..=2 {
        GrayImage::filled(24, 24, (40 * i) as u8)
            .unwrap()
            .write_pgm(&frames.join(format!("f_{i:04}.pgm")))
            .unwrap();
    }
    let boxes = dir.path().join("boxes.tsv");
    fs::write(
        &boxes,
        "frame_index\tside\tx\ty\twidth\theight\n1\tleft\t2\t2\t12\t12\n2\tleft\t2\t2\t12\t12\n",
    )
    .unwrap();
    let hands = dir.path().join("hands.tsv");
    fs::write(
        &hands,
        "frame_index\tside\tk\tx\ty\n1\tleft\t0\t3\t4\n2\tleft\t0\t6\t8\n",
    )
    .unwrap();
    let out = dir.path().join("m");
    let res = run(&[
        "metrics",
        "--pred",
        frames.to_str().unwrap(),
        "--gt",
        frames.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--boxes",
        boxes.to_str().unwrap(),
        "--pred-hands",
        hands.to_str().unwrap(),
        "--gt-hands",
        hands.to_str().unwrap(),
    ]);
    assert_ok(&res);
    let text = stdout_of(&res);
    assert!(text.contains("mean_hand_ssim 1.000000"), "{text}");
    assert!(text.contains("mean_hand_distance 0.000000"), "{text}");
    let tsv = fs::read_to_string(out.join("metrics.tsv")).unwrap();
    assert!(!tsv.contains("\t-\t-"), "{tsv}");
}

#[test]
fn thread_cap_does_not_change_artifacts() {
    let dir = tempdir().unwrap();
    let poses = pose_dir(dir.path(), 4);
    let run_eval = |out: &Path, threads: Option<&str>| {
        let mut cmd = bin();
        cmd.args([
            "eval-dtw",
            "--pred",
            poses.to_str().unwrap(),
            "--gt",
            poses.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        if let Some(t) = threads {
            cmd.env("SIGNFORGE_THREADS", t);
        }
        let res = cmd.output().unwrap();
        assert_ok(&res);
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_eval(&a, Some("1"));
    run_eval(&b, None);
    assert_eq!(
        fs::read(a.join("dtw_report.tsv")).unwrap(),
        fs::read(b.join("dtw_report.tsv")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("dtw_histogram.tsv")).unwrap(),
        fs::read(b.join("dtw_histogram.tsv")).unwrap()
    );
}

#[test]
fn bad_thread_env_is_a_user_error() {
    let res = bin()
        .args(["eval-dtw", "--pred", "x", "--gt", "y", "--out", "z"])
        .env("SIGNFORGE_THREADS", "soon")
        .output()
        .unwrap();
    assert_exit(&res, 2);
    assert!(
        stderr_of(&res).contains("SIGNFORGE_THREADS"),
        "{}",
        stderr_of(&res)
    );
}
