//! Miniature denoising diffusion model for pose-conditioned frame
//! generation. Images live on a small square grid in signed scale [-1, 1].
//! Two condition rasters in [0, 1] steer the model: c, the drawn skeleton,
//! and d, the reinforced frame regions. Their clamped superposition enters
//! through a dual branch whose trainable copy is gated by zero-initialised
//! 1x1 convolutions, so at initialisation the conditions have exactly zero
//! influence and the first gradient signal lands on the output gate.

use crate::compute::{backward, Optimizer, ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::frnet::GrayImage;
use crate::rng::Rng;

/// Noise schedule with linearly spaced betas and cached alpha products.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
        if steps == 0 {
            return Err(Error::contract("schedule: zero steps"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::contract(format!(
                "schedule: betas {beta_start}..{beta_end} outside (0, 1)"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        Ok(DiffusionSchedule { betas, alpha_bars })
    }

    pub fn standard() -> DiffusionSchedule {
        DiffusionSchedule::linear(50, 1e-4, 0.02).expect("valid constants")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// Beta at step t, t in 1..=steps.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// Product of alphas up to and including step t.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }
}

/// Closed-form forward noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
pub fn forward_diffuse(
    x0: &[f64],
    noise: &[f64],
    t: usize,
    schedule: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    if x0.len() != noise.len() {
        return Err(Error::dim(format!(
            "forward diffuse: {} values, {} noise entries",
            x0.len(),
            noise.len()
        )));
    }
    if t == 0 || t > schedule.steps() {
        return Err(Error::contract(format!(
            "forward diffuse: step {t} outside 1..={}",
            schedule.steps()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0
        .iter()
        .zip(noise)
        .map(|(&x, &n)| a * x + b * n)
        .collect())
}

#[derive(Debug, Clone)]
pub struct DenoiserConfig {
    /// Side length of the square working grid.
    pub size: usize,
    pub channels: usize,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub learning_rate: f64,
    pub clip_norm: Option<f64>,
    pub batch_size: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            size: 16,
            channels: 16,
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            learning_rate: 1e-3,
            clip_norm: Some(1.0),
            batch_size: 8,
        }
    }
}

impl DenoiserConfig {
    fn validate(&self) -> Result<()> {
        if self.size == 0 || self.channels == 0 || self.batch_size == 0 {
            return Err(Error::contract("denoiser config: zero-sized component"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::contract("denoiser config: learning rate"));
        }
        Ok(())
    }
}

/// One training example: target image in signed scale plus the two
/// condition rasters in [0, 1], all flattened on the working grid.
#[derive(Debug, Clone)]
pub struct DiffusionSample {
    pub image: Vec<f64>,
    /// Skeleton raster.
    pub c: Vec<f64>,
    /// Reinforced frame regions.
    pub d: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionEpoch {
    pub epoch: usize,
    pub loss: f64,
}

pub struct DiffusionModel {
    cfg: DenoiserConfig,
    schedule: DiffusionSchedule,
    store: ParameterStore,
}

fn conv_init(rng: &mut Rng, c_out: usize, c_in: usize, k: usize) -> Vec<f64> {
    let fan = (c_in + c_out) * k * k;
    let bound = (6.0 / fan as f64).sqrt();
    (0..c_out * c_in * k * k)
        .map(|_| rng.uniform_range(-bound, bound))
        .collect()
}

fn time_vector(t: usize, dim: usize) -> Tensor {
    let mut vals = vec![0.0f64; dim];
    for i in 0..dim / 2 {
        let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        vals[2 * i] = (t as f64 * rate).sin();
        vals[2 * i + 1] = (t as f64 * rate).cos();
    }
    Tensor::constant(&[1, dim], vals).expect("shape matches")
}

impl DiffusionModel {
    pub fn new(cfg: DenoiserConfig, rng: &mut Rng) -> Result<DiffusionModel> {
        cfg.validate()?;
        let ch = cfg.channels;
        let schedule = DiffusionSchedule::linear(cfg.steps, cfg.beta_start, cfg.beta_end)?;
        let mut store = ParameterStore::new();
        store.register(
            "denoiser.conv1.weight",
            Tensor::parameter(&[ch, 1, 3, 3], conv_init(rng, ch, 1, 3))?,
        )?;
        store.register("denoiser.conv1.bias", Tensor::parameter(&[ch], vec![0.0; ch])?)?;
        let bound = (6.0 / (2 * ch) as f64).sqrt();
        store.register(
            "denoiser.time.weight",
            Tensor::parameter(
                &[ch, ch],
                (0..ch * ch).map(|_| rng.uniform_range(-bound, bound)).collect(),
            )?,
        )?;
        store.register("denoiser.time.bias", Tensor::parameter(&[ch], vec![0.0; ch])?)?;
        store.register(
            "denoiser.conv2.weight",
            Tensor::parameter(&[ch, ch, 3, 3], conv_init(rng, ch, ch, 3))?,
        )?;
        store.register("denoiser.conv2.bias", Tensor::parameter(&[ch], vec![0.0; ch])?)?;
        // dual condition block: the locked branch is a frozen copy of the
        // backbone weights, the trainable branch starts identical, and both
        // gates start at exactly zero
        let backbone = conv_init(rng, ch, ch, 3);
        store.register(
            "denoiser.block.locked.weight",
            Tensor::constant(&[ch, ch, 3, 3], backbone.clone())?,
        )?;
        store.register(
            "denoiser.block.locked.bias",
            Tensor::constant(&[ch], vec![0.0; ch])?,
        )?;
        store.register(
            "denoiser.block.trainable.weight",
            Tensor::parameter(&[ch, ch, 3, 3], backbone)?,
        )?;
        store.register(
            "denoiser.block.trainable.bias",
            Tensor::parameter(&[ch], vec![0.0; ch])?,
        )?;
        store.register(
            "denoiser.block.zero_in.weight",
            Tensor::parameter(&[ch, 1, 1, 1], vec![0.0; ch])?,
        )?;
        store.register(
            "denoiser.block.zero_in.bias",
            Tensor::parameter(&[ch], vec![0.0; ch])?,
        )?;
        store.register(
            "denoiser.block.zero_out.weight",
            Tensor::parameter(&[ch, ch, 1, 1], vec![0.0; ch * ch])?,
        )?;
        store.register(
            "denoiser.block.zero_out.bias",
            Tensor::parameter(&[ch], vec![0.0; ch])?,
        )?;
        store.register(
            "denoiser.conv3.weight",
            Tensor::parameter(&[ch, ch, 3, 3], conv_init(rng, ch, ch, 3))?,
        )?;
        store.register("denoiser.conv3.bias", Tensor::parameter(&[ch], vec![0.0; ch])?)?;
        store.register(
            "denoiser.conv4.weight",
            Tensor::parameter(&[1, ch, 3, 3], conv_init(rng, 1, ch, 3))?,
        )?;
        store.register("denoiser.conv4.bias", Tensor::parameter(&[1], vec![0.0; 1])?)?;
        Ok(DiffusionModel {
            cfg,
            schedule,
            store,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.schedule
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.store.save(path)
    }

    pub fn load_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        self.store.load_into(path)
    }

    fn p(&self, name: &str) -> Result<Tensor> {
        self.store.get(name)
    }

    /// Superpose the two condition rasters: pixel-wise sum clamped to [0, 1].
    /// Both must already live on the working grid in unit scale.
    fn superpose(&self, c: &[f64], d: &[f64]) -> Result<Tensor> {
        let s = self.cfg.size;
        let n = s * s;
        if c.len() != n || d.len() != n {
            return Err(Error::dim(format!(
                "conditions: {} and {} values, expected {n}",
                c.len(),
                d.len()
            )));
        }
        for (name, vals) in [("c", c), ("d", d)] {
            if vals.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::contract(format!(
                    "condition {name} has values outside [0, 1]"
                )));
            }
        }
        let e: Vec<f64> = c
            .iter()
            .zip(d)
            .map(|(&a, &b)| (a + b).clamp(0.0, 1.0))
            .collect();
        Tensor::constant(&[1, s, s], e)
    }

    /// The frozen body alone: F(x; locked).
    pub fn locked_forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(
            &self.p("denoiser.block.locked.weight")?,
            Some(&self.p("denoiser.block.locked.bias")?),
            1,
        )
    }

    /// Dual-branch conditioned block on a feature map x: the frozen body
    /// plus the gated trainable copy fed with the superposed conditions,
    /// locked(x) + zero_out(trainable(x + zero_in(e))).
    pub fn block_forward(&self, x: &Tensor, c: &[f64], d: &[f64]) -> Result<Tensor> {
        let (s, ch) = (self.cfg.size, self.cfg.channels);
        if x.shape() != [ch, s, s] {
            return Err(Error::dim(format!(
                "block: feature shape {:?}, expected [{ch}, {s}, {s}]",
                x.shape()
            )));
        }
        let e = self.superpose(c, d)?;
        let locked = self.locked_forward(x)?;
        let gate_in = e.conv2d(
            &self.p("denoiser.block.zero_in.weight")?,
            Some(&self.p("denoiser.block.zero_in.bias")?),
            0,
        )?;
        let trainable = x.add(&gate_in)?.conv2d(
            &self.p("denoiser.block.trainable.weight")?,
            Some(&self.p("denoiser.block.trainable.bias")?),
            1,
        )?;
        let gated = trainable.conv2d(
            &self.p("denoiser.block.zero_out.weight")?,
            Some(&self.p("denoiser.block.zero_out.bias")?),
            0,
        )?;
        locked.add(&gated)
    }

    /// Predicted noise for a noisy image at step t under the two condition
    /// rasters. Inputs are flat grids in the configured size.
    pub fn predict_noise(
        &self,
        noisy: &Tensor,
        t: usize,
        c: &[f64],
        d: &[f64],
    ) -> Result<Tensor> {
        let s = self.cfg.size;
        let ch = self.cfg.channels;
        if noisy.shape() != [1, s, s] {
            return Err(Error::dim(format!(
                "predict noise: shape {:?}, expected [1, {s}, {s}]",
                noisy.shape()
            )));
        }
        if t == 0 || t > self.schedule.steps() {
            return Err(Error::contract(format!(
                "predict noise: step {t} outside 1..={}",
                self.schedule.steps()
            )));
        }
        let h = noisy
            .conv2d(
                &self.p("denoiser.conv1.weight")?,
                Some(&self.p("denoiser.conv1.bias")?),
                1,
            )?
            .gelu();
        let temb = time_vector(t, ch)
            .matmul(&self.p("denoiser.time.weight")?)?
            .add_bias_row(&self.p("denoiser.time.bias")?)?
            .reshape(&[ch])?;
        let h = h
            .add_channel_bias(&temb)?
            .conv2d(
                &self.p("denoiser.conv2.weight")?,
                Some(&self.p("denoiser.conv2.bias")?),
                1,
            )?
            .gelu();
        let h = self.block_forward(&h, c, d)?.gelu();
        let h = h
            .conv2d(
                &self.p("denoiser.conv3.weight")?,
                Some(&self.p("denoiser.conv3.bias")?),
                1,
            )?
            .gelu();
        h.conv2d(
            &self.p("denoiser.conv4.weight")?,
            Some(&self.p("denoiser.conv4.bias")?),
            1,
        )
    }

    fn check_sample(&self, sample: &DiffusionSample) -> Result<()> {
        let n = self.cfg.size * self.cfg.size;
        if sample.image.len() != n || sample.c.len() != n || sample.d.len() != n {
            return Err(Error::dim(format!(
                "sample: image {} / c {} / d {} values, expected {n}",
                sample.image.len(),
                sample.c.len(),
                sample.d.len()
            )));
        }
        Ok(())
    }

    /// Noise-prediction loss for one sample at a fixed step and noise draw.
    pub fn sample_loss(
        &self,
        sample: &DiffusionSample,
        t: usize,
        noise: &[f64],
    ) -> Result<Tensor> {
        self.check_sample(sample)?;
        let s = self.cfg.size;
        let noisy = forward_diffuse(&sample.image, noise, t, &self.schedule)?;
        let noisy = Tensor::constant(&[1, s, s], noisy)?;
        let predicted = self.predict_noise(&noisy, t, &sample.c, &sample.d)?;
        let target = Tensor::constant(&[1, s, s], noise.to_vec())?;
        let diff = predicted.sub(&target)?;
        Ok(diff.mul(&diff)?.mean())
    }

    /// Train with uniformly drawn steps and fresh gaussian noise per sample.
    pub fn train(
        &mut self,
        samples: &[DiffusionSample],
        epochs: usize,
        rng: &mut Rng,
    ) -> Result<Vec<DiffusionEpoch>> {
        if samples.is_empty() {
            return Err(Error::contract("diffusion train: no samples"));
        }
        for sample in samples {
            self.check_sample(sample)?;
        }
        let n = self.cfg.size * self.cfg.size;
        let mut opt = Optimizer::adam(self.cfg.learning_rate, self.cfg.clip_norm);
        let mut report = Vec::with_capacity(epochs);
        for epoch in 1..=epochs {
            let order = rng.shuffled_indices(samples.len());
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(self.cfg.batch_size) {
                self.store.zero_grads();
                let mut total: Option<Tensor> = None;
                for &i in chunk {
                    let t = 1 + rng.below(self.schedule.steps());
                    let noise: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 1.0)).collect();
                    let loss = self.sample_loss(&samples[i], t, &noise)?;
                    total = Some(match total {
                        Some(acc) => acc.add(&loss)?,
                        None => loss,
                    });
                }
                let total = total.expect("chunk non-empty").scale(1.0 / chunk.len() as f64);
                let value = total.item()?;
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batches,
                    });
                }
                backward(&total)?;
                opt.step(&self.store)?;
                epoch_loss += value;
                batches += 1;
            }
            report.push(DiffusionEpoch {
                epoch,
                loss: epoch_loss / batches as f64,
            });
        }
        Ok(report)
    }

    /// Ancestral sampling from pure noise. The final step adds no noise;
    /// only the finished image is clamped to the signed range, intermediate
    /// iterates roam freely. The draw is a pure function of the rng state.
    pub fn sample_signed(&self, c: &[f64], d: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let s = self.cfg.size;
        let n = s * s;
        self.superpose(c, d)?;
        let mut x: Vec<f64> = (0..n).map(|_| rng.normal(0.0, 1.0)).collect();
        for t in (1..=self.schedule.steps()).rev() {
            let xt = Tensor::constant(&[1, s, s], x.clone())?;
            let eps = self.predict_noise(&xt, t, c, d)?;
            let ev = eps.values();
            let alpha = self.schedule.alpha(t);
            let ab = self.schedule.alpha_bar(t);
            let k = (1.0 - alpha) / (1.0 - ab).sqrt();
            let inv_sqrt_alpha = 1.0 / alpha.sqrt();
            let sigma = self.schedule.beta(t).sqrt();
            for i in 0..n {
                let mean = inv_sqrt_alpha * (x[i] - k * ev[i]);
                let z = if t > 1 { rng.normal(0.0, 1.0) } else { 0.0 };
                x[i] = mean + sigma * z;
            }
        }
        for v in &mut x {
            *v = v.clamp(-1.0, 1.0);
        }
        Ok(x)
    }

    pub fn sample_image(
        &self,
        c_img: &GrayImage,
        d_img: &GrayImage,
        rng: &mut Rng,
    ) -> Result<GrayImage> {
        let s = self.cfg.size;
        let c = prepare_condition(c_img, s)?;
        let d = prepare_condition(d_img, s)?;
        let x = self.sample_signed(&c, &d, rng)?;
        GrayImage::from_signed(s, s, &x)
    }
}

/// Nearest-neighbour resampling onto a new grid.
pub fn resample_nearest(img: &GrayImage, width: usize, height: usize) -> Result<GrayImage> {
    if width == 0 || height == 0 {
        return Err(Error::contract("resample: zero dimension"));
    }
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        let sy = ((y as f64 + 0.5) * img.height() as f64 / height as f64) as usize;
        let sy = sy.min(img.height() - 1);
        for x in 0..width {
            let sx = ((x as f64 + 0.5) * img.width() as f64 / width as f64) as usize;
            let sx = sx.min(img.width() - 1);
            out.push(img.get(sx, sy));
        }
    }
    GrayImage::new(width, height, out)
}

/// Bring a condition raster onto the working grid in unit scale: nearest
/// resampling to size x size, intensities mapped to [0, 1].
pub fn prepare_condition(img: &GrayImage, size: usize) -> Result<Vec<f64>> {
    let fitted = if img.width() == size && img.height() == size {
        img.clone()
    } else {
        resample_nearest(img, size, size)?
    };
    Ok(fitted.unit_scale())
}
