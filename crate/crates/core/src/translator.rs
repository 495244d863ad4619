//! Text to pose translation: a small pre-norm encoder/decoder transformer
//! that emits pose feature rows autoregressively. Each output row carries
//! 3J joint coordinates plus a progress counter squashed through a sigmoid;
//! decoding stops once the counter crosses `COUNTER_STOP` or the frame
//! budget runs out.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::compute::{backward, Optimizer, OptimizerKind, ParameterStore, Tensor};
use crate::dataprep::{
    augment_future_prediction, augment_gaussian_noise, augment_just_counter, build_batch,
    DatasetClip, PaddedBatch,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::skeleton::{PoseFrame, PoseSequence};

/// Decoding halts when the predicted counter reaches this value.
pub const COUNTER_STOP: f64 = 0.98;

const NORM_EPS: f64 = 1e-5;
const ATTN_NEG: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct TranslatorConfig {
    pub vocab_size: usize,
    pub joints: usize,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub max_src_len: usize,
    pub max_frames: usize,
    pub output_fps: f64,
    pub dropout: f64,
    /// Gaussian noise on decoder inputs; 0 disables the augmentation.
    pub noise_sigma: f64,
    /// Blank all decoder input channels except the counter.
    pub just_counter: bool,
    /// Train against targets shifted this many frames into the future.
    pub future_shift: Option<usize>,
    /// Divide the batch loss by every target element instead of the masked
    /// frame count; padding then dilutes the mean.
    pub literal_mean: bool,
    pub loss_scale: f64,
    pub lv_lambda: f64,
    pub learning_rate: f64,
    pub clip_norm: Option<f64>,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl TranslatorConfig {
    pub fn new(vocab_size: usize, joints: usize) -> TranslatorConfig {
        TranslatorConfig {
            vocab_size,
            joints,
            layers: 2,
            heads: 4,
            model_dim: 128,
            ff_dim: 256,
            max_src_len: 64,
            max_frames: 400,
            output_fps: 25.0,
            dropout: 0.0,
            noise_sigma: 0.0,
            just_counter: false,
            future_shift: None,
            literal_mean: false,
            loss_scale: 1.0,
            lv_lambda: 0.01,
            learning_rate: 1e-2,
            clip_norm: Some(5.0),
            batch_size: 8,
            optimizer: OptimizerKind::Adam,
        }
    }

    pub fn feature_dim(&self) -> usize {
        3 * self.joints + 1
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::contract("config: vocabulary below special tokens"));
        }
        if self.joints == 0 || self.layers == 0 || self.heads == 0 || self.ff_dim == 0 {
            return Err(Error::contract("config: zero-sized component"));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::contract(format!(
                "config: model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.model_dim % 2 != 0 {
            return Err(Error::contract("config: model_dim must be even"));
        }
        if self.max_frames == 0 || self.max_src_len == 0 || self.batch_size == 0 {
            return Err(Error::contract("config: zero-sized limit"));
        }
        if !(self.output_fps > 0.0) {
            return Err(Error::contract("config: fps must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract("config: dropout outside [0, 1)"));
        }
        if self.future_shift == Some(0) {
            return Err(Error::contract("config: future shift must be at least 1"));
        }
        Ok(())
    }
}

/// Sinusoidal position rows, constant with respect to the graph.
fn positional_encoding(rows: usize, dim: usize) -> Tensor {
    let mut vals = vec![0.0f64; rows * dim];
    for pos in 0..rows {
        for i in 0..dim / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            let angle = pos as f64 * rate;
            vals[pos * dim + 2 * i] = angle.sin();
            vals[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::constant(&[rows, dim], vals).expect("shape matches values")
}

/// Additive causal mask: zero on and below the diagonal, large negative above.
fn causal_mask(rows: usize) -> Tensor {
    let mut vals = vec![0.0f64; rows * rows];
    for r in 0..rows {
        for c in r + 1..rows {
            vals[r * rows + c] = ATTN_NEG;
        }
    }
    Tensor::constant(&[rows, rows], vals).expect("shape matches values")
}

fn xavier(rng: &mut Rng, rows: usize, cols: usize) -> Vec<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols)
        .map(|_| rng.uniform_range(-bound, bound))
        .collect()
}

/// Per-forward state: a dropout source when training with dropout enabled.
struct Ctx<'a> {
    drop_rng: Option<&'a mut Rng>,
    dropout: f64,
}

impl<'a> Ctx<'a> {
    fn inference() -> Ctx<'static> {
        Ctx {
            drop_rng: None,
            dropout: 0.0,
        }
    }

    fn apply(&mut self, t: &Tensor) -> Tensor {
        match &mut self.drop_rng {
            Some(rng) if self.dropout > 0.0 => {
                let keep = 1.0 - self.dropout;
                let mask: Vec<f64> = (0..t.len())
                    .map(|_| if rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let mask = Tensor::constant(&t.shape(), mask).expect("mask shape");
                t.mul(&mask).expect("same shape")
            }
            _ => t.clone(),
        }
    }
}

pub struct TranslatorModel {
    cfg: TranslatorConfig,
    store: ParameterStore,
}

impl TranslatorModel {
    pub fn new(cfg: TranslatorConfig, rng: &mut Rng) -> Result<TranslatorModel> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let f = cfg.feature_dim();
        let mut store = ParameterStore::new();
        let mat = |store: &mut ParameterStore, name: String, rows: usize, cols: usize, rng: &mut Rng| -> Result<()> {
            store.register(&name, Tensor::parameter(&[rows, cols], xavier(rng, rows, cols))?)?;
            Ok(())
        };
        let vec_param = |store: &mut ParameterStore, name: String, len: usize, fill: f64| -> Result<()> {
            store.register(&name, Tensor::parameter(&[len], vec![fill; len])?)?;
            Ok(())
        };
        mat(&mut store, "encoder.embed.weight".into(), cfg.vocab_size, d, rng)?;
        let dk = d / cfg.heads;
        for l in 0..cfg.layers {
            for (side, blocks) in [("encoder", vec!["self"]), ("decoder", vec!["self", "cross"])] {
                for block in blocks {
                    for h in 0..cfg.heads {
                        for proj in ["q", "k", "v"] {
                            mat(
                                &mut store,
                                format!("{side}.l{l}.{block}.h{h}.{proj}.weight"),
                                d,
                                dk,
                                rng,
                            )?;
                        }
                    }
                    mat(&mut store, format!("{side}.l{l}.{block}.out.weight"), d, d, rng)?;
                    vec_param(&mut store, format!("{side}.l{l}.{block}.out.bias"), d, 0.0)?;
                    vec_param(&mut store, format!("{side}.l{l}.{block}.norm.gain"), d, 1.0)?;
                    vec_param(&mut store, format!("{side}.l{l}.{block}.norm.bias"), d, 0.0)?;
                }
                mat(&mut store, format!("{side}.l{l}.ff.w1.weight"), d, cfg.ff_dim, rng)?;
                vec_param(&mut store, format!("{side}.l{l}.ff.w1.bias"), cfg.ff_dim, 0.0)?;
                mat(&mut store, format!("{side}.l{l}.ff.w2.weight"), cfg.ff_dim, d, rng)?;
                vec_param(&mut store, format!("{side}.l{l}.ff.w2.bias"), d, 0.0)?;
                vec_param(&mut store, format!("{side}.l{l}.ff.norm.gain"), d, 1.0)?;
                vec_param(&mut store, format!("{side}.l{l}.ff.norm.bias"), d, 0.0)?;
            }
        }
        for side in ["encoder", "decoder"] {
            vec_param(&mut store, format!("{side}.final.norm.gain"), d, 1.0)?;
            vec_param(&mut store, format!("{side}.final.norm.bias"), d, 0.0)?;
        }
        mat(&mut store, "decoder.in.weight".into(), f, d, rng)?;
        vec_param(&mut store, "decoder.in.bias".into(), d, 0.0)?;
        mat(&mut store, "decoder.out.weight".into(), d, f, rng)?;
        vec_param(&mut store, "decoder.out.bias".into(), f, 0.0)?;
        store.register("decoder.start_frame", Tensor::parameter(&[1, f], vec![0.0; f])?)?;
        Ok(TranslatorModel { cfg, store })
    }

    pub fn config(&self) -> &TranslatorConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    pub fn load_checkpoint(&self, path: &Path) -> Result<()> {
        self.store.load_into(path)
    }

    fn p(&self, name: &str) -> Result<Tensor> {
        self.store.get(name)
    }

    fn attention(
        &self,
        prefix: &str,
        queries: &Tensor,
        keys_values: &Tensor,
        additive: Option<&Tensor>,
    ) -> Result<Tensor> {
        let dk = self.cfg.model_dim / self.cfg.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let q = queries.matmul(&self.p(&format!("{prefix}.h{h}.q.weight"))?)?;
            let k = keys_values.matmul(&self.p(&format!("{prefix}.h{h}.k.weight"))?)?;
            let v = keys_values.matmul(&self.p(&format!("{prefix}.h{h}.v.weight"))?)?;
            let mut scores = q.matmul(&k.transpose()?)?.scale(scale);
            if let Some(m) = additive {
                scores = scores.add(m)?;
            }
            heads.push(scores.softmax()?.matmul(&v)?);
        }
        Tensor::concat_cols(&heads)?
            .matmul(&self.p(&format!("{prefix}.out.weight"))?)?
            .add_bias_row(&self.p(&format!("{prefix}.out.bias"))?)
    }

    fn norm(&self, x: &Tensor, prefix: &str) -> Result<Tensor> {
        x.layer_norm(
            &self.p(&format!("{prefix}.gain"))?,
            &self.p(&format!("{prefix}.bias"))?,
            NORM_EPS,
        )
    }

    fn feed_forward(&self, x: &Tensor, prefix: &str) -> Result<Tensor> {
        x.matmul(&self.p(&format!("{prefix}.w1.weight"))?)?
            .add_bias_row(&self.p(&format!("{prefix}.w1.bias"))?)?
            .relu()
            .matmul(&self.p(&format!("{prefix}.w2.weight"))?)?
            .add_bias_row(&self.p(&format!("{prefix}.w2.bias"))?)
    }

    fn encode(&self, ids: &[usize], ctx: &mut Ctx) -> Result<Tensor> {
        let d = self.cfg.model_dim;
        let e = Tensor::embedding(&self.p("encoder.embed.weight")?, ids)?;
        let mut x = e.add(&positional_encoding(ids.len(), d))?;
        for l in 0..self.cfg.layers {
            let pre = self.norm(&x, &format!("encoder.l{l}.self.norm"))?;
            let attn = self.attention(&format!("encoder.l{l}.self"), &pre, &pre, None)?;
            x = x.add(&ctx.apply(&attn))?;
            let pre = self.norm(&x, &format!("encoder.l{l}.ff.norm"))?;
            let ff = self.feed_forward(&pre, &format!("encoder.l{l}.ff"))?;
            x = x.add(&ctx.apply(&ff))?;
        }
        self.norm(&x, "encoder.final.norm")
    }

    /// Map decoder input feature rows through the stack to output feature
    /// rows. Row t may attend to rows 0..=t of itself and all of `memory`.
    /// The sigmoid applies to the counter column only.
    fn decode(&self, rows: &Tensor, memory: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let d = self.cfg.model_dim;
        let f = self.cfg.feature_dim();
        let t = rows.shape()[0];
        let mut x = rows
            .matmul(&self.p("decoder.in.weight")?)?
            .add_bias_row(&self.p("decoder.in.bias")?)?
            .add(&positional_encoding(t, d))?;
        let causal = causal_mask(t);
        for l in 0..self.cfg.layers {
            let pre = self.norm(&x, &format!("decoder.l{l}.self.norm"))?;
            let attn =
                self.attention(&format!("decoder.l{l}.self"), &pre, &pre, Some(&causal))?;
            x = x.add(&ctx.apply(&attn))?;
            let pre = self.norm(&x, &format!("decoder.l{l}.cross.norm"))?;
            let attn = self.attention(&format!("decoder.l{l}.cross"), &pre, memory, None)?;
            x = x.add(&ctx.apply(&attn))?;
            let pre = self.norm(&x, &format!("decoder.l{l}.ff.norm"))?;
            let ff = self.feed_forward(&pre, &format!("decoder.l{l}.ff"))?;
            x = x.add(&ctx.apply(&ff))?;
        }
        let lin = self
            .norm(&x, "decoder.final.norm")?
            .matmul(&self.p("decoder.out.weight")?)?
            .add_bias_row(&self.p("decoder.out.bias")?)?;
        let mut data_ind = vec![1.0; f];
        data_ind[f - 1] = 0.0;
        let mut counter_ind = vec![0.0; f];
        counter_ind[f - 1] = 1.0;
        let data = lin.mul_cols(&Tensor::constant(&[f], data_ind)?)?;
        let counter = lin.sigmoid().mul_cols(&Tensor::constant(&[f], counter_ind)?)?;
        data.add(&counter)
    }

    /// Contextual features for a token sequence, no dropout.
    pub fn encode_tokens(&self, ids: &[usize]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::contract("encode: empty token sequence"));
        }
        self.encode(ids, &mut Ctx::inference())
    }

    /// Run the decoder stack over explicit input rows, no dropout.
    pub fn decode_rows(&self, rows: &Tensor, memory: &Tensor) -> Result<Tensor> {
        self.decode(rows, memory, &mut Ctx::inference())
    }

    /// Masked regression loss over one padded batch. Masked-in frames form a
    /// prefix of each row, so sequences are cropped to that prefix before
    /// entering the graph and padding never costs compute. The divisor is the
    /// masked element count, or the full tensor size under `literal_mean`.
    fn batch_loss(&self, batch: &PaddedBatch, ctx: &mut Ctx) -> Result<Tensor> {
        let f = batch.feature_dim;
        if f != self.cfg.feature_dim() {
            return Err(Error::dim(format!(
                "batch feature dim {f} does not match model {}",
                self.cfg.feature_dim()
            )));
        }
        let mut total: Option<Tensor> = None;
        let mut masked_elems = 0.0f64;
        for b in 0..batch.size {
            let src_row = &batch.src[b * batch.src_len..(b + 1) * batch.src_len];
            let ids = &src_row[..batch.real_tokens(b)];
            let frames = batch.real_frames(b);
            if frames == 0 || ids.is_empty() {
                return Err(Error::contract(format!("batch: example {b} is empty")));
            }
            let base = b * batch.frame_len * f;
            let memory = self.encode(ids, ctx)?;
            let start = self.p("decoder.start_frame")?;
            let dec_in = if frames == 1 {
                start
            } else {
                let rest = Tensor::constant(
                    &[frames - 1, f],
                    batch.tgt_in[base + f..base + frames * f].to_vec(),
                )?;
                Tensor::concat_rows(&[start, rest])?
            };
            let predicted = self.decode(&dec_in, &memory, ctx)?;
            let target = Tensor::constant(
                &[frames, f],
                batch.tgt_out[base..base + frames * f].to_vec(),
            )?;
            masked_elems += (frames * f) as f64;
            let diff = predicted.sub(&target)?;
            let sq = diff.mul(&diff)?.sum();
            total = Some(match total {
                Some(t) => t.add(&sq)?,
                None => sq,
            });
        }
        if masked_elems == 0.0 {
            return Err(Error::Degenerate("batch: mask is all zero".into()));
        }
        let divisor = if self.cfg.literal_mean {
            (batch.size * batch.frame_len * f) as f64
        } else {
            masked_elems
        };
        Ok(total.expect("batch is non-empty").scale(1.0 / divisor))
    }

    /// Loss on a batch without dropout; the training objective before the
    /// weight-norm term.
    pub fn evaluate_batch(&self, batch: &PaddedBatch) -> Result<f64> {
        self.batch_loss(batch, &mut Ctx::inference())?.item()
    }

    /// Differentiable training objective for one batch, including the
    /// weight-norm term. Exposed for gradient verification.
    pub fn training_loss(&self, batch: &PaddedBatch) -> Result<Tensor> {
        let base = self.batch_loss(batch, &mut Ctx::inference())?;
        long_video_loss(&base, &self.store, self.cfg.loss_scale, self.cfg.lv_lambda)
    }

    pub fn train(
        &mut self,
        clips: &[&DatasetClip],
        epochs: usize,
        out_dir: Option<&Path>,
        rng: &mut Rng,
    ) -> Result<TrainReport> {
        if clips.is_empty() {
            return Err(Error::contract("train: no clips"));
        }
        let mut opt = match self.cfg.optimizer {
            OptimizerKind::Sgd => Optimizer::sgd(self.cfg.learning_rate, self.cfg.clip_norm),
            OptimizerKind::Adam => Optimizer::adam(self.cfg.learning_rate, self.cfg.clip_norm),
        };
        let mut report = TrainReport {
            epochs: Vec::with_capacity(epochs),
            future_skipped: 0,
            truncated: 0,
            final_checkpoint: None,
        };
        for epoch in 1..=epochs {
            let order = rng.shuffled_indices(clips.len());
            let mut masked_sum = 0.0;
            let mut total_sum = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(self.cfg.batch_size) {
                let refs: Vec<&DatasetClip> = chunk.iter().map(|&i| clips[i]).collect();
                let mut batch =
                    build_batch(&refs, self.cfg.max_src_len, self.cfg.max_frames)?;
                report.truncated += batch.truncated;
                report.future_skipped += apply_augmentations(&mut batch, &self.cfg, rng);
                self.store.zero_grads();
                let mut ctx = Ctx {
                    drop_rng: if self.cfg.dropout > 0.0 { Some(rng) } else { None },
                    dropout: self.cfg.dropout,
                };
                let base = self.batch_loss(&batch, &mut ctx)?;
                let total = long_video_loss(
                    &base,
                    &self.store,
                    self.cfg.loss_scale,
                    self.cfg.lv_lambda,
                )?;
                let masked_value = base.item()?;
                let value = total.item()?;
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batches,
                    });
                }
                backward(&total)?;
                opt.step(&self.store)?;
                masked_sum += masked_value;
                total_sum += value;
                batches += 1;
            }
            report.epochs.push(EpochStats {
                epoch,
                masked: masked_sum / batches as f64,
                total: total_sum / batches as f64,
            });
            if let Some(dir) = out_dir {
                let path = dir.join(format!("epoch_{epoch:04}.sgnf"));
                self.store.save(&path)?;
                report.final_checkpoint = Some(path);
            }
        }
        if let Some(dir) = out_dir {
            let mut tsv = String::from("epoch\tmasked_loss\ttotal_loss\n");
            for e in &report.epochs {
                tsv.push_str(&format!("{}\t{:.6}\t{:.6}\n", e.epoch, e.masked, e.total));
            }
            std::fs::write(dir.join("training_loss.tsv"), tsv)?;
        }
        Ok(report)
    }

    /// Greedy autoregressive decode. Deterministic: no sampling anywhere.
    /// The predicted counter only steers termination; the emitted sequence
    /// carries the exact ramp (t+1)/T for its realized length T.
    pub fn translate(&self, tokens: &[usize]) -> Result<PoseSequence> {
        if tokens.is_empty() {
            return Err(Error::contract("translate: empty token sequence"));
        }
        let ids = &tokens[..tokens.len().min(self.cfg.max_src_len)];
        let mut ctx = Ctx::inference();
        let memory = self.encode(ids, &mut ctx)?;
        let f = self.cfg.feature_dim();
        let mut dec_rows = self.p("decoder.start_frame")?.values();
        let mut generated: Vec<f64> = Vec::new();
        for step in 1..=self.cfg.max_frames {
            let dec = Tensor::constant(&[step, f], dec_rows.clone())?;
            let out = self.decode(&dec, &memory, &mut ctx)?;
            let vals = out.values();
            let row = &vals[(step - 1) * f..step * f];
            generated.extend_from_slice(row);
            let counter = row[f - 1];
            if counter >= COUNTER_STOP || step == self.cfg.max_frames {
                break;
            }
            dec_rows.extend_from_slice(row);
        }
        let frames = generated.len() / f;
        let mut pose_frames = Vec::with_capacity(frames);
        for t in 0..frames {
            let row = &generated[t * f..(t + 1) * f];
            let joints = (0..self.cfg.joints)
                .map(|j| [row[3 * j], row[3 * j + 1], row[3 * j + 2]])
                .collect();
            pose_frames.push(PoseFrame::new(joints, row[f - 1]));
        }
        let mut seq = PoseSequence::new(self.cfg.joints, self.cfg.output_fps, pose_frames)?;
        seq.set_standard_counters();
        Ok(seq)
    }

    /// Plain-data copy of the parameters for cross-thread rebuilds.
    pub fn snapshot(&self) -> ModelSnapshot {
        let tensors = self
            .store
            .iter()
            .map(|(name, t)| (name.clone(), t.shape(), t.values()))
            .collect();
        ModelSnapshot {
            config: self.cfg.clone(),
            tensors,
        }
    }

    pub fn from_snapshot(snap: &ModelSnapshot) -> Result<TranslatorModel> {
        snap.config.validate()?;
        let mut store = ParameterStore::new();
        for (name, shape, values) in &snap.tensors {
            store.register(name, Tensor::parameter(shape, values.clone())?)?;
        }
        Ok(TranslatorModel {
            cfg: snap.config.clone(),
            store,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean masked regression loss across the epoch's batches.
    pub masked: f64,
    /// Mean full objective including the weight-norm term.
    pub total: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Batch rows the future-shift regime left unshifted for being too short,
    /// accumulated over every batch of every epoch.
    pub future_skipped: usize,
    /// Clips that exceeded a length cap and were cut down, same accumulation.
    pub truncated: usize,
    pub final_checkpoint: Option<PathBuf>,
}

/// Mutate a batch according to the augmentation flags, in the fixed order
/// future shift, counter-only blanking, gaussian noise. Returns how many
/// batch rows were too short for the future shift.
pub fn apply_augmentations(
    batch: &mut PaddedBatch,
    cfg: &TranslatorConfig,
    rng: &mut Rng,
) -> usize {
    let mut skipped = 0;
    if let Some(k) = cfg.future_shift {
        skipped = augment_future_prediction(batch, k);
    }
    if cfg.just_counter {
        augment_just_counter(batch);
    }
    if cfg.noise_sigma > 0.0 {
        augment_gaussian_noise(batch, cfg.noise_sigma, rng);
    }
    skipped
}

/// Plain-data model state; `Send + Sync`, safe to share across workers.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    pub config: TranslatorConfig,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

/// Mean squared error over unmasked frames. Predictions and targets are
/// frame rows; the mask carries one bit per frame and broadcasts across the
/// feature axis, so the divisor is the masked-in frame count times the
/// features per frame.
pub fn masked_regression_loss(
    predicted: &Tensor,
    target: &Tensor,
    frame_mask: &Tensor,
) -> Result<Tensor> {
    if predicted.shape() != target.shape() {
        return Err(Error::dim(format!(
            "masked loss: prediction shape {:?} vs target {:?}",
            predicted.shape(),
            target.shape()
        )));
    }
    let shape = predicted.shape();
    let (rows, features) = match shape.len() {
        1 => (shape[0], 1),
        2 => (shape[0], shape[1]),
        _ => {
            return Err(Error::dim(format!(
                "masked loss: expected rows or rows x features, got {shape:?}"
            )))
        }
    };
    let mask_vals = frame_mask.values();
    if mask_vals.len() != rows {
        return Err(Error::dim(format!(
            "masked loss: {rows} frames but {} mask bits",
            mask_vals.len()
        )));
    }
    let ones: f64 = mask_vals.iter().sum();
    if ones == 0.0 {
        return Err(Error::Degenerate("masked loss: mask is all zero".into()));
    }
    let mut expanded = Vec::with_capacity(rows * features);
    for &m in &mask_vals {
        expanded.extend(std::iter::repeat(m).take(features));
    }
    let mask = Tensor::constant(&shape, expanded)?;
    let diff = predicted.sub(target)?;
    Ok(diff
        .mul(&diff)?
        .mul(&mask)?
        .sum()
        .scale(1.0 / (ones * features as f64)))
}

/// Full training objective: scaled base loss plus `lambda` times the sum of
/// Frobenius norms of every parameter whose name contains "weight".
pub fn long_video_loss(
    base: &Tensor,
    store: &ParameterStore,
    loss_scale: f64,
    lambda: f64,
) -> Result<Tensor> {
    base.scale(loss_scale)
        .add(&store.weight_norm_sum("weight")?.scale(lambda))
}

/// Translate a batch of token sequences in parallel. Each worker rebuilds
/// the model from the snapshot once; output order matches input order and
/// one failed clip does not take down the rest.
pub fn translate_corpus(
    snapshot: &ModelSnapshot,
    items: &[(String, Vec<usize>)],
) -> Vec<(String, Result<PoseSequence>)> {
    items
        .par_iter()
        .map_init(
            || TranslatorModel::from_snapshot(snapshot),
            |model, (id, tokens)| {
                let out = match model {
                    Ok(m) => m.translate(tokens),
                    Err(e) => Err(Error::contract(e.to_string())),
                };
                (id.clone(), out)
            },
        )
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::finite_diff_check;
    use crate::dataprep::Split;
    use crate::skeleton::PoseFrame;
    use tempfile::tempdir;

    fn tiny_config() -> TranslatorConfig {
        let mut cfg = TranslatorConfig::new(8, 1);
        cfg.layers = 1;
        cfg.heads = 2;
        cfg.model_dim = 8;
        cfg.ff_dim = 8;
        cfg.max_src_len = 8;
        cfg.max_frames = 8;
        cfg.batch_size = 4;
        cfg
    }

    fn clip(id: &str, tokens: Vec<usize>, frames: usize) -> DatasetClip {
        let fr: Vec<PoseFrame> = (0..frames)
            .map(|t| {
                PoseFrame::new(
                    vec![[0.3 + t as f64 * 0.1, 0.5, 0.7]],
                    (t + 1) as f64 / frames as f64,
                )
            })
            .collect();
        DatasetClip {
            clip_id: id.to_string(),
            split: Split::Train,
            tokens,
            pose: PoseSequence::new(1, 25.0, fr).unwrap(),
        }
    }

    #[test]
    fn masked_loss_matches_hand_computation() {
        let p = Tensor::constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let t = Tensor::constant(&[3], vec![0.5, 7.0, 2.0]).unwrap();
        let m = Tensor::constant(&[3], vec![1.0, 0.0, 1.0]).unwrap();
        let loss = masked_regression_loss(&p, &t, &m).unwrap();
        assert_eq!(loss.item().unwrap(), 0.625);
    }

    #[test]
    fn masked_loss_broadcasts_over_features() {
        // two frames of two features, second frame masked out
        let p = Tensor::constant(&[2, 2], vec![1.0, 3.0, 9.0, 9.0]).unwrap();
        let t = Tensor::constant(&[2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let m = Tensor::constant(&[2], vec![1.0, 0.0]).unwrap();
        let loss = masked_regression_loss(&p, &t, &m).unwrap();
        // (1 + 4) / (1 frame x 2 features)
        assert_eq!(loss.item().unwrap(), 2.5);
    }

    #[test]
    fn masked_loss_is_bit_invariant_to_masked_rows() {
        let p = Tensor::constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let m = Tensor::constant(&[3], vec![1.0, 0.0, 1.0]).unwrap();
        let t1 = Tensor::constant(&[3], vec![0.5, 7.0, 2.0]).unwrap();
        let t2 = Tensor::constant(&[3], vec![0.5, -4e18, 2.0]).unwrap();
        let a = masked_regression_loss(&p, &t1, &m).unwrap().item().unwrap();
        let b = masked_regression_loss(&p, &t2, &m).unwrap().item().unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn masked_loss_rejects_empty_mask() {
        let p = Tensor::constant(&[2], vec![1.0, 2.0]).unwrap();
        let t = Tensor::constant(&[2], vec![1.0, 2.0]).unwrap();
        let m = Tensor::constant(&[2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            masked_regression_loss(&p, &t, &m),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn long_video_loss_matches_hand_computation() {
        let mut store = ParameterStore::new();
        store
            .register("w.weight", Tensor::parameter(&[1, 2], vec![3.0, 4.0]).unwrap())
            .unwrap();
        store
            .register("norm.gain", Tensor::parameter(&[2], vec![100.0, 100.0]).unwrap())
            .unwrap();
        let base = Tensor::constant(&[1], vec![0.5]).unwrap();
        let total = long_video_loss(&base, &store, 1.0, 0.01).unwrap();
        assert_eq!(total.item().unwrap(), 0.55);
        let scaled = long_video_loss(&base, &store, 2.0, 0.01).unwrap();
        assert_eq!(scaled.item().unwrap(), 1.05);
    }

    #[test]
    fn long_video_loss_scales_linearly_and_grows_with_lambda() {
        let mut store = ParameterStore::new();
        store
            .register("w.weight", Tensor::parameter(&[1, 2], vec![3.0, 4.0]).unwrap())
            .unwrap();
        let base = Tensor::constant(&[1], vec![0.7]).unwrap();
        let at = |scale: f64, lambda: f64| {
            long_video_loss(&base, &store, scale, lambda)
                .unwrap()
                .item()
                .unwrap()
        };
        for s in [0.5, 1.0, 3.0] {
            let expect = s * 0.7 + 0.01 * 5.0;
            assert!((at(s, 0.01) - expect).abs() < 1e-12, "scale {s}");
        }
        let mut prev = f64::NEG_INFINITY;
        for l in [0.0, 0.01, 0.5] {
            let v = at(1.0, l);
            assert!((v - (0.7 + l * 5.0)).abs() < 1e-12, "lambda {l}");
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn forward_loss_is_finite_and_positive() {
        let mut rng = Rng::seed_from_u64(1);
        let model = TranslatorModel::new(tiny_config(), &mut rng).unwrap();
        let a = clip("a", vec![1, 4, 2], 3);
        let b = clip("b", vec![1, 5, 6, 2], 2);
        let batch = build_batch(&[&a, &b], 8, 8).unwrap();
        let loss = model.evaluate_batch(&batch).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
    }

    #[test]
    fn pad_tail_content_does_not_affect_loss() {
        let mut rng = Rng::seed_from_u64(21);
        let model = TranslatorModel::new(tiny_config(), &mut rng).unwrap();
        let a = clip("a", vec![1, 4, 2], 3);
        let b = clip("b", vec![1, 5, 6, 7, 2], 2);
        let mut batch = build_batch(&[&a, &b], 8, 8).unwrap();
        let before = model.evaluate_batch(&batch).unwrap();
        // scribble over the padded token positions of clip a
        for i in 3..batch.src_len {
            batch.src[i] = 6;
        }
        let after = model.evaluate_batch(&batch).unwrap();
        assert_eq!(before.to_bits(), after.to_bits());
    }

    #[test]
    fn literal_mean_dilutes_by_padding() {
        let mut rng = Rng::seed_from_u64(22);
        let model = TranslatorModel::new(tiny_config(), &mut rng).unwrap();
        let mut cfg = tiny_config();
        cfg.literal_mean = true;
        let mut rng2 = Rng::seed_from_u64(22);
        let literal = TranslatorModel::new(cfg, &mut rng2).unwrap();
        let a = clip("a", vec![1, 4, 2], 3);
        let b = clip("b", vec![1, 5, 2], 2);
        let batch = build_batch(&[&a, &b], 8, 8).unwrap();
        let masked = model.evaluate_batch(&batch).unwrap();
        let diluted = literal.evaluate_batch(&batch).unwrap();
        // same numerator, divisor 2x3 padded frames instead of 3+2 real ones
        assert!((diluted - masked * 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn decoder_output_ignores_future_rows() {
        let mut rng = Rng::seed_from_u64(23);
        let model = TranslatorModel::new(tiny_config(), &mut rng).unwrap();
        let f = model.config().feature_dim();
        let memory = model.encode_tokens(&[1, 4, 5, 2]).unwrap();
        let rows: Vec<f64> = (0..3 * f).map(|i| (i as f64 * 0.37).sin()).collect();
        let short = Tensor::constant(&[3, f], rows.clone()).unwrap();
        let mut extended = rows;
        extended.extend((0..2 * f).map(|i| 1e6 - i as f64));
        let long = Tensor::constant(&[5, f], extended).unwrap();
        let a = model.decode_rows(&short, &memory).unwrap().values();
        let b = model.decode_rows(&long, &memory).unwrap().values();
        assert_eq!(a[..], b[..3 * f]);
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = Rng::seed_from_u64(2);
        let model = TranslatorModel::new(tiny_config(), &mut rng).unwrap();
        let a = clip("a", vec![1, 4, 2], 3);
        let b = clip("b", vec![1, 5, 2], 2);
        let batch = build_batch(&[&a, &b], 8, 8).unwrap();
        let mut loss_fn = || model.training_loss(&batch);
        let mut check_rng = Rng::seed_from_u64(3);
        let report =
            finite_diff_check(model.store(), &mut loss_fn, 64, 1e-4, &mut check_rng).unwrap();
        assert_eq!(report.checked, 64);
        assert!(
            report.max_rel_err < 1e-3,
            "worst {} at {}[{}]: analytic {} vs numeric {}",
            report.max_rel_err,
            report.worst_param,
            report.worst_index,
            report.worst_analytic,
            report.worst_numeric
        );
    }

    #[test]
    fn translation_is_deterministic() {
        let mut rng = Rng::seed_from_u64(4);
        let model = TranslatorModel::new(tiny_config(), &mut rng).unwrap();
        let a = model.translate(&[1, 4, 5, 2]).unwrap();
        let b = model.translate(&[1, 4, 5, 2]).unwrap();
        assert_eq!(a.to_feature_rows(), b.to_feature_rows());
        assert_eq!(a.len(), b.len());
    }

    #[test]
    fn translation_respects_frame_budget() {
        let mut rng = Rng::seed_from_u64(5);
        let mut cfg = tiny_config();
        cfg.max_frames = 4;
        let model = TranslatorModel::new(cfg, &mut rng).unwrap();
        let seq = model.translate(&[1, 4, 2]).unwrap();
        assert!(seq.len() <= 4 && seq.len() >= 1);
    }

    #[test]
    fn saturated_counter_stops_decoding_immediately() {
        let mut rng = Rng::seed_from_u64(6);
        let model = TranslatorModel::new(tiny_config(), &mut rng).unwrap();
        // push the counter bias far positive: sigmoid saturates at 1
        let bias = model.store().get("decoder.out.bias").unwrap();
        let f = model.config().feature_dim();
        bias.set_value_at(f - 1, 50.0).unwrap();
        let seq = model.translate(&[1, 4, 2]).unwrap();
        assert_eq!(seq.len(), 1);
        assert!(seq.frames()[0].counter >= COUNTER_STOP);
    }

    #[test]
    fn translation_counters_follow_the_standard_ramp() {
        let mut rng = Rng::seed_from_u64(16);
        let model = TranslatorModel::new(tiny_config(), &mut rng).unwrap();
        let seq = model.translate(&[1, 5, 2]).unwrap();
        let n = seq.len() as f64;
        for (t, f) in seq.frames().iter().enumerate() {
            assert_eq!(f.counter, (t + 1) as f64 / n);
        }
    }

    #[test]
    fn training_reduces_loss_on_tiny_data() {
        let mut rng = Rng::seed_from_u64(7);
        let mut cfg = tiny_config();
        cfg.optimizer = OptimizerKind::Adam;
        cfg.learning_rate = 3e-3;
        let mut model = TranslatorModel::new(cfg, &mut rng).unwrap();
        let clips = vec![clip("a", vec![1, 4, 2], 3), clip("b", vec![1, 5, 2], 4)];
        let refs: Vec<&DatasetClip> = clips.iter().collect();
        let report = model.train(&refs, 30, None, &mut rng).unwrap();
        assert_eq!(report.epochs.len(), 30);
        let first = report.epochs.first().unwrap().masked;
        let last = report.epochs.last().unwrap().masked;
        assert!(last.is_finite() && first.is_finite());
        assert!(last < first, "loss should drop: {first} -> {last}");
        for e in &report.epochs {
            assert!(e.total > e.masked, "weight norm term must be positive");
        }
    }

    #[test]
    fn same_seed_reproduces_the_loss_curve() {
        let clips = vec![clip("a", vec![1, 4, 2], 3), clip("b", vec![1, 5, 2], 4)];
        let refs: Vec<&DatasetClip> = clips.iter().collect();
        let mut curves = Vec::new();
        for _ in 0..2 {
            let mut rng = Rng::seed_from_u64(77);
            let mut cfg = tiny_config();
            cfg.noise_sigma = 0.05;
            let mut model = TranslatorModel::new(cfg, &mut rng).unwrap();
            let report = model.train(&refs, 3, None, &mut rng).unwrap();
            curves.push(report.epochs);
        }
        assert_eq!(curves[0], curves[1]);
    }

    #[test]
    fn training_writes_checkpoints_and_loss_table() {
        let dir = tempdir().unwrap();
        let mut rng = Rng::seed_from_u64(8);
        let mut model = TranslatorModel::new(tiny_config(), &mut rng).unwrap();
        let clips = vec![clip("a", vec![1, 4, 2], 2)];
        let refs: Vec<&DatasetClip> = clips.iter().collect();
        let report = model.train(&refs, 2, Some(dir.path()), &mut rng).unwrap();
        assert!(dir.path().join("epoch_0001.sgnf").is_file());
        assert!(dir.path().join("epoch_0002.sgnf").is_file());
        assert_eq!(
            report.final_checkpoint.as_deref(),
            Some(dir.path().join("epoch_0002.sgnf").as_path())
        );
        let tsv = std::fs::read_to_string(dir.path().join("training_loss.tsv")).unwrap();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], "epoch\tmasked_loss\ttotal_loss");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1\t"));
        assert_eq!(lines[1].split('\t').count(), 3);
    }

    #[test]
    fn checkpoint_roundtrip_reproduces_translations() {
        let dir = tempdir().unwrap();
        let mut rng = Rng::seed_from_u64(9);
        let model = TranslatorModel::new(tiny_config(), &mut rng).unwrap();
        let before = model.translate(&[1, 6, 2]).unwrap();
        let path = dir.path().join("m.sgnf");
        model.save(&path).unwrap();
        let mut rng2 = Rng::seed_from_u64(999);
        let fresh = TranslatorModel::new(tiny_config(), &mut rng2).unwrap();
        fresh.load_checkpoint(&path).unwrap();
        let after = fresh.translate(&[1, 6, 2]).unwrap();
        assert_eq!(before.to_feature_rows(), after.to_feature_rows());
    }

    #[test]
    fn snapshot_rebuild_is_exact_and_parallel_decode_preserves_order() {
        let mut rng = Rng::seed_from_u64(10);
        let model = TranslatorModel::new(tiny_config(), &mut rng).unwrap();
        let snap = model.snapshot();
        let rebuilt = TranslatorModel::from_snapshot(&snap).unwrap();
        let a = model.translate(&[1, 4, 2]).unwrap();
        let b = rebuilt.translate(&[1, 4, 2]).unwrap();
        assert_eq!(a.to_feature_rows(), b.to_feature_rows());

        let items: Vec<(String, Vec<usize>)> = (0..6)
            .map(|i| (format!("c{i}"), vec![1, 4 + (i % 4), 2]))
            .collect();
        let out = translate_corpus(&snap, &items);
        assert_eq!(out.len(), 6);
        for (i, (id, seq)) in out.iter().enumerate() {
            assert_eq!(id, &format!("c{i}"));
            let direct = model.translate(&items[i].1).unwrap();
            let seq = seq.as_ref().unwrap();
            assert_eq!(seq.to_feature_rows(), direct.to_feature_rows());
        }
    }

    #[test]
    fn corpus_translation_reports_failures_per_item() {
        let mut rng = Rng::seed_from_u64(25);
        let model = TranslatorModel::new(tiny_config(), &mut rng).unwrap();
        let items = vec![
            ("good".to_string(), vec![1, 4, 2]),
            ("bad".to_string(), vec![]),
        ];
        let out = translate_corpus(&model.snapshot(), &items);
        assert!(out[0].1.is_ok());
        assert!(out[1].1.is_err());
    }

    #[test]
    fn future_shift_skips_short_clips_per_batch() {
        let mut rng = Rng::seed_from_u64(11);
        let mut cfg = tiny_config();
        cfg.future_shift = Some(2);
        let mut model = TranslatorModel::new(cfg, &mut rng).unwrap();
        let clips = vec![clip("long", vec![1, 4, 2], 5), clip("short", vec![1, 5, 2], 2)];
        let refs: Vec<&DatasetClip> = clips.iter().collect();
        let report = model.train(&refs, 3, None, &mut rng).unwrap();
        assert_eq!(report.future_skipped, 3, "the short clip skips once per epoch");

        // a shift longer than every clip leaves all targets unshifted
        let mut cfg = tiny_config();
        cfg.future_shift = Some(10);
        let mut rng = Rng::seed_from_u64(12);
        let mut model = TranslatorModel::new(cfg, &mut rng).unwrap();
        let report = model.train(&refs, 1, None, &mut rng).unwrap();
        assert_eq!(report.future_skipped, 2);
    }

    #[test]
    fn non_finite_loss_aborts_with_location() {
        let mut rng = Rng::seed_from_u64(13);
        let mut model = TranslatorModel::new(tiny_config(), &mut rng).unwrap();
        let w = model.store().get("decoder.out.weight").unwrap();
        w.set_value_at(0, f64::NAN).unwrap();
        let clips = vec![clip("a", vec![1, 4, 2], 2)];
        let refs: Vec<&DatasetClip> = clips.iter().collect();
        match model.train(&refs, 1, None, &mut rng) {
            Err(Error::NonFiniteLoss { epoch, batch }) => {
                assert_eq!(epoch, 1);
                assert_eq!(batch, 0);
            }
            other => panic!("expected non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn dropout_training_stays_finite() {
        let mut rng = Rng::seed_from_u64(14);
        let mut cfg = tiny_config();
        cfg.dropout = 0.3;
        let mut model = TranslatorModel::new(cfg, &mut rng).unwrap();
        let clips = vec![clip("a", vec![1, 4, 2], 3)];
        let refs: Vec<&DatasetClip> = clips.iter().collect();
        let report = model.train(&refs, 3, None, &mut rng).unwrap();
        assert!(report.epochs.iter().all(|e| e.total.is_finite()));
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let mut rng = Rng::seed_from_u64(15);
        let mut cfg = tiny_config();
        cfg.model_dim = 9;
        assert!(TranslatorModel::new(cfg, &mut rng).is_err());
        let mut cfg = tiny_config();
        cfg.vocab_size = 3;
        assert!(TranslatorModel::new(cfg, &mut rng).is_err());
        let mut cfg = tiny_config();
        cfg.dropout = 1.0;
        assert!(TranslatorModel::new(cfg, &mut rng).is_err());
        let mut cfg = tiny_config();
        cfg.future_shift = Some(0);
        assert!(TranslatorModel::new(cfg, &mut rng).is_err());
    }
}
