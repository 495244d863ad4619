//! Image similarity metrics for generated frames: structural similarity
//! over full frames, the same metric restricted to hand crops, and mean
//! keypoint displacement between hand keypoint sets.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::frnet::GrayImage;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
/// Stabilisers for a 0..255 dynamic range: (0.01 L)^2 and (0.03 L)^2.
pub const SSIM_C1: f64 = 6.5025;
pub const SSIM_C2: f64 = 58.5225;

/// Normalised 1D Gaussian tap weights for the metric window.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - c) * (i as f64 - c)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut g {
        *v /= sum;
    }
    g
}

/// Valid-mode separable Gaussian filter; output is (w-10) x (h-10).
fn gaussian_filter_valid(values: &[f64], w: usize, h: usize) -> Vec<f64> {
    let taps = gaussian_taps();
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, t) in taps.iter().enumerate() {
                acc += t * values[y * w + x + j];
            }
            horiz[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, t) in taps.iter().enumerate() {
                acc += t * horiz[(y + j) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Mean structural similarity between two equally sized images, Gaussian
/// 11x11 window with sigma 1.5, valid mode (windows fully inside the image),
/// pixel range 0..255. Identical images score exactly 1.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::dim(format!(
            "ssim: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim: image {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let av: Vec<f64> = a.pixels().iter().map(|&p| p as f64).collect();
    let bv: Vec<f64> = b.pixels().iter().map(|&p| p as f64).collect();
    let aa: Vec<f64> = av.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = bv.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = av.iter().zip(&bv).map(|(x, y)| x * y).collect();

    let mu_a = gaussian_filter_valid(&av, w, h);
    let mu_b = gaussian_filter_valid(&bv, w, h);
    let e_aa = gaussian_filter_valid(&aa, w, h);
    let e_bb = gaussian_filter_valid(&bb, w, h);
    let e_ab = gaussian_filter_valid(&ab, w, h);

    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let ma = mu_a[i];
        let mb = mu_b[i];
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let numer = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let denom = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
        total += numer / denom;
    }
    Ok(total / mu_a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum HandSide {
    Left,
    Right,
}

impl HandSide {
    pub fn parse(name: &str) -> Result<HandSide> {
        match name {
            "left" => Ok(HandSide::Left),
            "right" => Ok(HandSide::Right),
            other => Err(Error::format(format!(
                "hand side must be left or right, got {other}"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HandSide::Left => "left",
            HandSide::Right => "right",
        }
    }
}

/// Pixel-aligned hand bounding box, image coordinates, width and height in
/// pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HandBox {
    pub x: i64,
    pub y: i64,
    pub w: usize,
    pub h: usize,
    pub side: HandSide,
}

/// Clip the box to the image, then grow undersized boxes to the metric
/// window (centred, clamped back inside). Fails when the box misses the
/// image entirely or the image itself is smaller than the window.
fn resolve_box(b: &HandBox, width: usize, height: usize) -> Result<(usize, usize, usize, usize)> {
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "hand crop: image {width}x{height} smaller than the metric window"
        )));
    }
    let x0 = b.x.max(0);
    let y0 = b.y.max(0);
    let x1 = (b.x + b.w as i64).min(width as i64);
    let y1 = (b.y + b.h as i64).min(height as i64);
    if x0 >= x1 || y0 >= y1 {
        return Err(Error::contract(format!(
            "hand crop: box ({}, {}, {}, {}) outside {}x{} image",
            b.x, b.y, b.w, b.h, width, height
        )));
    }
    let (mut x0, mut y0) = (x0 as usize, y0 as usize);
    let (mut cw, mut ch) = ((x1 - x0 as i64) as usize, (y1 - y0 as i64) as usize);
    if cw < SSIM_WINDOW {
        let centre = x0 as i64 + cw as i64 / 2;
        x0 = (centre - SSIM_WINDOW as i64 / 2).clamp(0, (width - SSIM_WINDOW) as i64) as usize;
        cw = SSIM_WINDOW;
    }
    if ch < SSIM_WINDOW {
        let centre = y0 as i64 + ch as i64 / 2;
        y0 = (centre - SSIM_WINDOW as i64 / 2).clamp(0, (height - SSIM_WINDOW) as i64) as usize;
        ch = SSIM_WINDOW;
    }
    Ok((x0, y0, cw, ch))
}

fn crop(img: &GrayImage, x0: usize, y0: usize, w: usize, h: usize) -> GrayImage {
    let mut pixels = Vec::with_capacity(w * h);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            pixels.push(img.get(x, y));
        }
    }
    GrayImage::new(w, h, pixels).expect("crop bounds validated")
}

/// Structural similarity restricted to hand regions: the mean of per-box
/// scores. Both images are cropped with the same resolved box per hand so
/// the comparison stays aligned.
pub fn hand_ssim(a: &GrayImage, b: &GrayImage, hands: &[HandBox]) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::dim(format!(
            "hand ssim: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    if hands.is_empty() {
        return Err(Error::contract("hand ssim: no boxes"));
    }
    let mut total = 0.0;
    for hand in hands {
        let (x0, y0, w, h) = resolve_box(hand, a.width(), a.height())?;
        total += ssim(&crop(a, x0, y0, w, h), &crop(b, x0, y0, w, h))?;
    }
    Ok(total / hands.len() as f64)
}

/// Mean Euclidean distance between corresponding 2D hand keypoints.
pub fn hand_keypoint_distance(a: &[(f64, f64)], b: &[(f64, f64)]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::contract("hand keypoint distance: empty point set"));
    }
    if a.len() != b.len() {
        return Err(Error::dim(format!(
            "hand keypoint distance: {} vs {} points",
            a.len(),
            b.len()
        )));
    }
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt())
        .sum();
    Ok(total / a.len() as f64)
}

fn sidecar_lines(path: &Path, header: &str) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter(|l| !l.starts_with(header))
        .map(str::to_owned)
        .collect())
}

/// Read a per-frame hand-box sidecar: `frame_index side x y w h`,
/// tab-separated, optional header line. Boxes keep file order per frame.
pub fn read_hand_boxes(path: &Path) -> Result<BTreeMap<usize, Vec<HandBox>>> {
    let mut out: BTreeMap<usize, Vec<HandBox>> = BTreeMap::new();
    for line in sidecar_lines(path, "frame_index")? {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::format(format!(
                "{}: hand box row needs 6 fields, got {}",
                path.display(),
                fields.len()
            )));
        }
        let bad = |what: &str| Error::format(format!("{}: bad {what} in {line:?}", path.display()));
        let frame: usize = fields[0].parse().map_err(|_| bad("frame index"))?;
        let side = HandSide::parse(fields[1])?;
        let x: i64 = fields[2].parse().map_err(|_| bad("x"))?;
        let y: i64 = fields[3].parse().map_err(|_| bad("y"))?;
        let w: usize = fields[4].parse().map_err(|_| bad("width"))?;
        let h: usize = fields[5].parse().map_err(|_| bad("height"))?;
        out.entry(frame).or_default().push(HandBox { x, y, w, h, side });
    }
    Ok(out)
}

/// Read a per-frame hand-keypoint sidecar: `frame_index side k_index x y`,
/// tab-separated, optional header line. Points are ordered by (side,
/// keypoint index) per frame so two files with the same layout correspond.
pub fn read_hand_keypoints(path: &Path) -> Result<BTreeMap<usize, Vec<(f64, f64)>>> {
    let mut staged: BTreeMap<usize, Vec<(HandSide, usize, f64, f64)>> = BTreeMap::new();
    for line in sidecar_lines(path, "frame_index")? {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::format(format!(
                "{}: keypoint row needs 5 fields, got {}",
                path.display(),
                fields.len()
            )));
        }
        let bad = |what: &str| Error::format(format!("{}: bad {what} in {line:?}", path.display()));
        let frame: usize = fields[0].parse().map_err(|_| bad("frame index"))?;
        let side = HandSide::parse(fields[1])?;
        let k: usize = fields[2].parse().map_err(|_| bad("keypoint index"))?;
        let x: f64 = fields[3].parse().map_err(|_| bad("x"))?;
        let y: f64 = fields[4].parse().map_err(|_| bad("y"))?;
        staged.entry(frame).or_default().push((side, k, x, y));
    }
    let mut out = BTreeMap::new();
    for (frame, mut rows) in staged {
        rows.sort_by_key(|r| (r.0, r.1));
        for pair in rows.windows(2) {
            if pair[0].0 == pair[1].0 && pair[0].1 == pair[1].1 {
                return Err(Error::format(format!(
                    "{}: duplicate keypoint {} {} in frame {frame}",
                    path.display(),
                    pair[0].0.name(),
                    pair[0].1
                )));
            }
        }
        out.insert(frame, rows.into_iter().map(|r| (r.2, r.3)).collect());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Independent per-window reference: builds the 2D kernel explicitly and
    /// evaluates every window with scalar loops.
    fn ssim_reference(a: &GrayImage, b: &GrayImage) -> f64 {
        let taps = gaussian_taps();
        let mut kernel = [[0.0; SSIM_WINDOW]; SSIM_WINDOW];
        for i in 0..SSIM_WINDOW {
            for j in 0..SSIM_WINDOW {
                kernel[i][j] = taps[i] * taps[j];
            }
        }
        let (w, h) = (a.width(), a.height());
        let ow = w - SSIM_WINDOW + 1;
        let oh = h - SSIM_WINDOW + 1;
        let mut total = 0.0;
        for wy in 0..oh {
            for wx in 0..ow {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        ma += kernel[i][j] * a.get(wx + j, wy + i) as f64;
                        mb += kernel[i][j] * b.get(wx + j, wy + i) as f64;
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..SSIM_WINDOW {
                    for j in 0..SSIM_WINDOW {
                        let pa = a.get(wx + j, wy + i) as f64;
                        let pb = b.get(wx + j, wy + i) as f64;
                        va += kernel[i][j] * pa * pa;
                        vb += kernel[i][j] * pb * pb;
                        cov += kernel[i][j] * pa * pb;
                    }
                }
                va -= ma * ma;
                vb -= mb * mb;
                cov -= ma * mb;
                let numer = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let denom = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
                total += numer / denom;
            }
        }
        total / (ow * oh) as f64
    }

    fn random_image(rng: &mut Rng, w: usize, h: usize) -> GrayImage {
        GrayImage::new(w, h, (0..w * h).map(|_| rng.below(256) as u8).collect()).unwrap()
    }

    #[test]
    fn identical_images_score_exactly_one() {
        let mut rng = Rng::seed_from_u64(21);
        let img = random_image(&mut rng, 20, 14);
        assert_eq!(ssim(&img, &img).unwrap(), 1.0);
    }

    #[test]
    fn black_versus_white_matches_closed_form() {
        let black = GrayImage::filled(16, 16, 0).unwrap();
        let white = GrayImage::filled(16, 16, 255).unwrap();
        let s = ssim(&black, &white).unwrap();
        let expected = SSIM_C1 / (255.0 * 255.0 + SSIM_C1);
        assert!((s - expected).abs() < 1e-15, "{s} vs {expected}");
        assert!((s - 9.999e-5).abs() < 1e-7);
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut rng = Rng::seed_from_u64(5);
        let a = random_image(&mut rng, 24, 18);
        let b = random_image(&mut rng, 24, 18);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
    }

    #[test]
    fn ssim_decreases_with_noise_level(){
        let mut rng = Rng::seed_from_u64(8);
        let base = random_image(&mut rng, 32, 32);
        let perturb = |img: &GrayImage, amp: i64, rng: &mut Rng| {
            let pixels = img
                .pixels()
                .iter()
                .map(|&p| {
                    let jitter = rng.below((2 * amp + 1) as usize) as i64 - amp;
                    (p as i64 + jitter).clamp(0, 255) as u8
                })
                .collect();
            GrayImage::new(32, 32, pixels).unwrap()
        };
        let slightly = perturb(&base, 8, &mut rng);
        let heavily = perturb(&base, 90, &mut rng);
        let s_light = ssim(&base, &slightly).unwrap();
        let s_heavy = ssim(&base, &heavily).unwrap();
        assert!(s_light > s_heavy, "{s_light} vs {s_heavy}");
        assert!(s_light < 1.0);
    }

    #[test]
    fn separable_filter_matches_per_window_reference() {
        let mut rng = Rng::seed_from_u64(77);
        for _ in 0..10 {
            let w = SSIM_WINDOW + rng.below(20);
            let h = SSIM_WINDOW + rng.below(20);
            let a = random_image(&mut rng, w, h);
            let b = random_image(&mut rng, w, h);
            let fast = ssim(&a, &b).unwrap();
            let slow = ssim_reference(&a, &b);
            assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
        }
    }

    #[test]
    fn ssim_rejects_mismatched_or_tiny_images() {
        let a = GrayImage::filled(16, 16, 0).unwrap();
        let b = GrayImage::filled(17, 16, 0).unwrap();
        assert!(ssim(&a, &b).is_err());
        let tiny = GrayImage::filled(8, 8, 0).unwrap();
        assert!(ssim(&tiny, &tiny).is_err());
    }

    fn boxed(x: i64, y: i64, w: usize, h: usize, side: HandSide) -> HandBox {
        HandBox { x, y, w, h, side }
    }

    #[test]
    fn hand_crop_identity_scores_one() {
        let mut rng = Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 48, 48);
        let boxes = [
            boxed(10, 12, 20, 16, HandSide::Left),
            boxed(30, 28, 14, 14, HandSide::Right),
        ];
        assert_eq!(hand_ssim(&img, &img, &boxes).unwrap(), 1.0);
        assert!(hand_ssim(&img, &img, &[]).is_err());
    }

    #[test]
    fn two_boxes_average_their_crop_scores() {
        let mut rng = Rng::seed_from_u64(11);
        let a = random_image(&mut rng, 48, 48);
        let b = random_image(&mut rng, 48, 48);
        let left = boxed(2, 2, 16, 16, HandSide::Left);
        let right = boxed(28, 26, 14, 18, HandSide::Right);
        let s1 = hand_ssim(&a, &b, &[left]).unwrap();
        let s2 = hand_ssim(&a, &b, &[right]).unwrap();
        let both = hand_ssim(&a, &b, &[left, right]).unwrap();
        assert!((both - 0.5 * (s1 + s2)).abs() < 1e-12);
    }

    #[test]
    fn undersized_boxes_inflate_to_the_window() {
        let mut rng = Rng::seed_from_u64(4);
        let a = random_image(&mut rng, 32, 32);
        let mut bp = a.pixels().to_vec();
        // difference far away from the box; an inflated 11x11 crop at the
        // corner must not see it
        bp[31 * 32 + 31] = bp[31 * 32 + 31].wrapping_add(40);
        let b = GrayImage::new(32, 32, bp).unwrap();
        let tiny = boxed(1, 1, 3, 3, HandSide::Left);
        assert_eq!(hand_ssim(&a, &b, &[tiny]).unwrap(), 1.0);
    }

    #[test]
    fn boxes_clamp_at_image_edges() {
        let mut rng = Rng::seed_from_u64(6);
        let img = random_image(&mut rng, 24, 24);
        // partially outside
        let edge = boxed(20, -4, 30, 10, HandSide::Right);
        assert!(hand_ssim(&img, &img, &[edge]).is_ok());
        // fully outside
        let gone = boxed(40, 40, 5, 5, HandSide::Left);
        assert!(hand_ssim(&img, &img, &[gone]).is_err());
    }

    #[test]
    fn hand_box_sidecar_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("boxes.tsv");
        std::fs::write(
            &path,
            "frame_index\tside\tx\ty\tw\th\n0\tleft\t2\t3\t12\t14\n0\tright\t20\t3\t12\t14\n2\tleft\t-1\t0\t11\t11\n",
        )
        .unwrap();
        let boxes = read_hand_boxes(&path).unwrap();
        assert_eq!(boxes.len(), 2);
        assert_eq!(boxes[&0].len(), 2);
        assert_eq!(boxes[&0][1].side, HandSide::Right);
        assert_eq!(boxes[&2][0].x, -1);
        std::fs::write(&path, "0\tcenter\t0\t0\t9\t9\n").unwrap();
        assert!(read_hand_boxes(&path).is_err());
        std::fs::write(&path, "0\tleft\t0\t0\t9\n").unwrap();
        assert!(read_hand_boxes(&path).is_err());
    }

    #[test]
    fn keypoint_sidecar_orders_by_side_then_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kp.tsv");
        std::fs::write(
            &path,
            "frame_index\tside\tk_index\tx\ty\n0\tright\t0\t9.0\t9.5\n0\tleft\t1\t2.0\t2.5\n0\tleft\t0\t1.0\t1.5\n",
        )
        .unwrap();
        let pts = read_hand_keypoints(&path).unwrap();
        assert_eq!(
            pts[&0],
            vec![(1.0, 1.5), (2.0, 2.5), (9.0, 9.5)],
            "left keypoints sorted by index come before right"
        );
        std::fs::write(&path, "0\tleft\t0\t1\t1\n0\tleft\t0\t2\t2\n").unwrap();
        assert!(read_hand_keypoints(&path).is_err(), "duplicate keypoint");
    }

    #[test]
    fn keypoint_distance_is_mean_euclidean() {
        let a = vec![(0.0, 0.0), (3.0, 4.0)];
        let b = vec![(0.0, 1.0), (0.0, 0.0)];
        // distances 1 and 5
        assert!((hand_keypoint_distance(&a, &b).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn keypoint_distance_rejects_bad_inputs() {
        assert!(hand_keypoint_distance(&[], &[]).is_err());
        assert!(hand_keypoint_distance(&[(0.0, 0.0)], &[(0.0, 0.0), (1.0, 1.0)]).is_err());
    }

    #[test]
    fn identical_points_have_zero_distance() {
        let pts = vec![(1.5, -2.0), (0.25, 8.0), (5.0, 5.0)];
        assert_eq!(hand_keypoint_distance(&pts, &pts).unwrap(), 0.0);
    }
}
