//! Frame conditioning filters: grayscale image container, binary PGM I/O,
//! mean-offset adaptive thresholding and 5x5 binary erosion. The outputs
//! form the condition pair (c, d) consumed by the diffusion model: c is a
//! rasterised skeleton, d a thresholded and eroded photo of the same frame.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::skeleton::{PoseFrame, SkeletonTopology};

/// Default adaptive-threshold window side.
pub const DEFAULT_WINDOW: usize = 11;
/// Default mean offset for the adaptive threshold.
pub const DEFAULT_OFFSET: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<GrayImage> {
        if width == 0 || height == 0 {
            return Err(Error::contract("image: zero dimension"));
        }
        if pixels.len() != width * height {
            return Err(Error::dim(format!(
                "image: {}x{} needs {} pixels, got {}",
                width,
                height,
                width * height,
                pixels.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<GrayImage> {
        GrayImage::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    /// Pixels mapped to [0, 1].
    pub fn unit_scale(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 255.0).collect()
    }

    /// Pixels mapped to [-1, 1], the range the diffusion model works in.
    pub fn signed_scale(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 127.5 - 1.0).collect()
    }

    /// Inverse of `signed_scale` with clamping and round-to-nearest.
    pub fn from_signed(width: usize, height: usize, values: &[f64]) -> Result<GrayImage> {
        let pixels = values
            .iter()
            .map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
            .collect();
        GrayImage::new(width, height, pixels)
    }

    /// Write binary PGM (P5, maxval 255).
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        write!(f, "P5\n{} {}\n255\n", self.width, self.height)?;
        f.write_all(&self.pixels)?;
        Ok(())
    }

    /// Read binary PGM. Header comments (`#` to end of line) are allowed,
    /// maxval must be 255.
    pub fn read_pgm(path: &Path) -> Result<GrayImage> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let mut next_token = |bytes: &[u8]| -> Result<String> {
            // skip whitespace and comments
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format(format!(
                    "{}: truncated PGM header",
                    path.display()
                )));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = next_token(&bytes)?;
        if magic != "P5" {
            return Err(Error::format(format!(
                "{}: not a binary PGM (magic {magic})",
                path.display()
            )));
        }
        let width: usize = next_token(&bytes)?
            .parse()
            .map_err(|_| Error::format(format!("{}: bad width", path.display())))?;
        let height: usize = next_token(&bytes)?
            .parse()
            .map_err(|_| Error::format(format!("{}: bad height", path.display())))?;
        let maxval: usize = next_token(&bytes)?
            .parse()
            .map_err(|_| Error::format(format!("{}: bad maxval", path.display())))?;
        if maxval != 255 {
            return Err(Error::format(format!(
                "{}: unsupported maxval {maxval}",
                path.display()
            )));
        }
        // exactly one whitespace byte separates header from data
        pos += 1;
        if bytes.len() < pos || bytes.len() - pos < width * height {
            return Err(Error::format(format!(
                "{}: truncated pixel data",
                path.display()
            )));
        }
        GrayImage::new(width, height, bytes[pos..pos + width * height].to_vec())
    }
}

/// Summed-area table with one row and column of leading zeros.
fn integral(values: &[f64], width: usize, height: usize) -> Vec<f64> {
    let w1 = width + 1;
    let mut table = vec![0.0; w1 * (height + 1)];
    for y in 0..height {
        let mut row = 0.0;
        for x in 0..width {
            row += values[y * width + x];
            table[(y + 1) * w1 + x + 1] = table[y * w1 + x + 1] + row;
        }
    }
    table
}

fn window_sum(table: &[f64], w1: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> f64 {
    // inclusive pixel box [x0, x1] x [y0, y1]
    table[(y1 + 1) * w1 + x1 + 1] + table[y0 * w1 + x0]
        - table[y0 * w1 + x1 + 1]
        - table[(y1 + 1) * w1 + x0]
}

/// Mean-offset adaptive threshold: a pixel turns foreground (255) exactly
/// when its intensity exceeds the local window mean minus `c`. The window
/// is square with odd side length and the border replicates edge pixels.
pub fn adaptive_threshold(img: &GrayImage, window: usize, c: f64) -> Result<GrayImage> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::contract(format!(
            "adaptive threshold: window {window} must be odd and positive"
        )));
    }
    let r = window / 2;
    let (w, h) = (img.width(), img.height());
    // replicate the border once so the integral image sees the same pixels
    // a clamped sampler would
    let pw = w + 2 * r;
    let ph = h + 2 * r;
    let mut padded = vec![0.0f64; pw * ph];
    for y in 0..ph {
        let sy = (y as i64 - r as i64).clamp(0, h as i64 - 1) as usize;
        for x in 0..pw {
            let sx = (x as i64 - r as i64).clamp(0, w as i64 - 1) as usize;
            padded[y * pw + x] = img.get(sx, sy) as f64;
        }
    }
    let table = integral(&padded, pw, ph);
    let area = (window * window) as f64;
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            // window around (x, y) in padded coordinates
            let sum = window_sum(&table, pw + 1, x, y, x + 2 * r, y + 2 * r);
            let mean = sum / area;
            if img.get(x, y) as f64 > mean - c {
                out[y * w + x] = 255;
            }
        }
    }
    GrayImage::new(w, h, out)
}

/// Binary erosion with a 5x5 all-ones structuring element. A pixel stays
/// foreground only when every pixel under the kernel is foreground; the
/// region outside the image counts as background, so a 2-pixel border always
/// erodes away. Foreground is exactly 255, anything else is background.
pub fn erode5x5(img: &GrayImage) -> Result<GrayImage> {
    const R: i64 = 2;
    let (w, h) = (img.width(), img.height());
    let binary: Vec<f64> = img
        .pixels()
        .iter()
        .map(|&p| if p == 255 { 1.0 } else { 0.0 })
        .collect();
    let table = integral(&binary, w, h);
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            let x0 = x as i64 - R;
            let y0 = y as i64 - R;
            let x1 = x as i64 + R;
            let y1 = y as i64 + R;
            if x0 < 0 || y0 < 0 || x1 >= w as i64 || y1 >= h as i64 {
                continue; // kernel sticks out, outside counts as background
            }
            let sum = window_sum(&table, w + 1, x0 as usize, y0 as usize, x1 as usize, y1 as usize);
            if sum == 25.0 {
                out[y * w + x] = 255;
            }
        }
    }
    GrayImage::new(w, h, out)
}

/// Threshold-then-erode filter chain producing the binary condition frame
/// `d` from a grayscale photo.
pub fn fr_condition(img: &GrayImage, window: usize, offset: f64) -> Result<GrayImage> {
    erode5x5(&adaptive_threshold(img, window, offset)?)
}

/// Rasterise one pose frame as a binary skeleton image (condition `c`).
/// The xy bounding box of the joints is fitted to the canvas with a 10%
/// margin on every side (uniform scale, centered), making the raster
/// invariant to translation and uniform scaling of the pose. Bones are
/// one-pixel line segments, joints 3x3 squares. A pose whose bounding box
/// collapses to a point becomes a single centered pixel.
pub fn render_condition(
    frame: &PoseFrame,
    topo: &SkeletonTopology,
    width: usize,
    height: usize,
) -> Result<GrayImage> {
    if frame.joints.len() != topo.joint_count() {
        return Err(Error::dim(format!(
            "render: frame has {} joints, topology {}",
            frame.joints.len(),
            topo.joint_count()
        )));
    }
    if width < 3 || height < 3 {
        return Err(Error::contract("render: canvas must be at least 3x3"));
    }
    let finite: Vec<&[f64; 3]> = frame
        .joints
        .iter()
        .filter(|j| j[0].is_finite() && j[1].is_finite())
        .collect();
    let mut img = GrayImage::filled(width, height, 0)?;
    if finite.is_empty() {
        return Err(Error::contract("render: no finite joints"));
    }
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for j in &finite {
        min_x = min_x.min(j[0]);
        max_x = max_x.max(j[0]);
        min_y = min_y.min(j[1]);
        max_y = max_y.max(j[1]);
    }
    let bw = max_x - min_x;
    let bh = max_y - min_y;
    if bw <= 0.0 && bh <= 0.0 {
        img.set(width / 2, height / 2, 255);
        return Ok(img);
    }
    // usable span leaves a 10% margin at each edge of the canvas
    let span_x = 0.8 * (width - 1) as f64;
    let span_y = 0.8 * (height - 1) as f64;
    let mut scale = f64::INFINITY;
    if bw > 0.0 {
        scale = scale.min(span_x / bw);
    }
    if bh > 0.0 {
        scale = scale.min(span_y / bh);
    }
    let off_x = ((width - 1) as f64 - bw * scale) / 2.0;
    let off_y = ((height - 1) as f64 - bh * scale) / 2.0;
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let u = off_x + (x - min_x) * scale;
        let v = off_y + (y - min_y) * scale;
        (
            (u.round() as i64).clamp(0, width as i64 - 1),
            (v.round() as i64).clamp(0, height as i64 - 1),
        )
    };
    for b in topo.bones() {
        let p = frame.joints[b.parent];
        let c = frame.joints[b.child];
        if !p[0].is_finite() || !p[1].is_finite() || !c[0].is_finite() || !c[1].is_finite() {
            continue;
        }
        let (x0, y0) = to_px(p[0], p[1]);
        let (x1, y1) = to_px(c[0], c[1]);
        draw_line(&mut img, x0, y0, x1, y1);
    }
    for j in &finite {
        let (x, y) = to_px(j[0], j[1]);
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let px = x + dx;
                let py = y + dy;
                if px >= 0 && py >= 0 && px < width as i64 && py < height as i64 {
                    img.set(px as usize, py as usize, 255);
                }
            }
        }
    }
    Ok(img)
}

fn draw_line(img: &mut GrayImage, x0: i64, y0: i64, x1: i64, y1: i64) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let (mut x, mut y) = (x0, y0);
    loop {
        img.set(x as usize, y as usize, 255);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Build the condition pair for one pose frame: `c` is the rasterised
/// skeleton, `d` the thresholded and eroded photo. Without a photo the
/// filter chain runs on the rendering itself so downstream stages always
/// receive both channels.
pub fn condition_pair(
    frame: &PoseFrame,
    topo: &SkeletonTopology,
    photo: Option<&GrayImage>,
    width: usize,
    height: usize,
    window: usize,
    threshold_c: f64,
) -> Result<(GrayImage, GrayImage)> {
    let c_img = render_condition(frame, topo, width, height)?;
    let source = match photo {
        Some(p) => {
            if p.width() != width || p.height() != height {
                return Err(Error::dim(format!(
                    "condition pair: photo {}x{}, expected {}x{}",
                    p.width(),
                    p.height(),
                    width,
                    height
                )));
            }
            p.clone()
        }
        None => c_img.clone(),
    };
    let d_img = fr_condition(&source, window, threshold_c)?;
    Ok((c_img, d_img))
}
