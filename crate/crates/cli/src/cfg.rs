//! `key = value` config files shared by the training commands. One
//! assignment per line, `#` starts a comment. Unknown keys are rejected so
//! a typo fails loudly instead of silently training with defaults.

use std::path::Path;

use signforge_core::compute::OptimizerKind;
use signforge_core::diffusion::DenoiserConfig;
use signforge_core::translator::TranslatorConfig;
use signforge_core::{Error, Result};

struct Assignment {
    line: usize,
    key: String,
    value: String,
}

fn parse_error(path: &Path, line: usize, message: String) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message,
    }
}

fn assignments(path: &Path) -> Result<Vec<Assignment>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            parse_error(path, i + 1, format!("expected `key = value`, got {raw:?}"))
        })?;
        out.push(Assignment {
            line: i + 1,
            key: key.trim().to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

fn parse_usize(path: &Path, a: &Assignment) -> Result<usize> {
    a.value.parse().map_err(|_| {
        parse_error(
            path,
            a.line,
            format!("{}: expected an integer, got {:?}", a.key, a.value),
        )
    })
}

fn parse_f64(path: &Path, a: &Assignment) -> Result<f64> {
    a.value.parse().map_err(|_| {
        parse_error(
            path,
            a.line,
            format!("{}: expected a number, got {:?}", a.key, a.value),
        )
    })
}

fn parse_bool(path: &Path, a: &Assignment) -> Result<bool> {
    match a.value.as_str() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(parse_error(
            path,
            a.line,
            format!("{}: expected true or false, got {:?}", a.key, a.value),
        )),
    }
}

/// `none` disables the option, any integer sets it.
fn parse_opt_usize(path: &Path, a: &Assignment) -> Result<Option<usize>> {
    if a.value == "none" {
        Ok(None)
    } else {
        parse_usize(path, a).map(Some)
    }
}

fn parse_opt_f64(path: &Path, a: &Assignment) -> Result<Option<f64>> {
    if a.value == "none" {
        Ok(None)
    } else {
        parse_f64(path, a).map(Some)
    }
}

/// Apply a translator config file over `cfg`. Model width is derived from
/// the dataset, so `vocab_size` and `joints` are refused by name.
pub fn apply_translator(path: &Path, cfg: &mut TranslatorConfig) -> Result<()> {
    for a in assignments(path)? {
        match a.key.as_str() {
            "layers" => cfg.layers = parse_usize(path, &a)?,
            "heads" => cfg.heads = parse_usize(path, &a)?,
            "model_dim" => cfg.model_dim = parse_usize(path, &a)?,
            "ff_dim" => cfg.ff_dim = parse_usize(path, &a)?,
            "max_src_len" => cfg.max_src_len = parse_usize(path, &a)?,
            "max_frames" => cfg.max_frames = parse_usize(path, &a)?,
            "output_fps" => cfg.output_fps = parse_f64(path, &a)?,
            "dropout" => cfg.dropout = parse_f64(path, &a)?,
            "noise_sigma" => cfg.noise_sigma = parse_f64(path, &a)?,
            "just_counter" => cfg.just_counter = parse_bool(path, &a)?,
            "future_shift" => cfg.future_shift = parse_opt_usize(path, &a)?,
            "literal_mean" => cfg.literal_mean = parse_bool(path, &a)?,
            "loss_scale" => cfg.loss_scale = parse_f64(path, &a)?,
            "lv_lambda" => cfg.lv_lambda = parse_f64(path, &a)?,
            "learning_rate" => cfg.learning_rate = parse_f64(path, &a)?,
            "clip_norm" => cfg.clip_norm = parse_opt_f64(path, &a)?,
            "batch_size" => cfg.batch_size = parse_usize(path, &a)?,
            "optimizer" => {
                cfg.optimizer = match a.value.as_str() {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam,
                    _ => {
                        return Err(parse_error(
                            path,
                            a.line,
                            format!("optimizer: expected sgd or adam, got {:?}", a.value),
                        ))
                    }
                }
            }
            "vocab_size" | "joints" => {
                return Err(parse_error(
                    path,
                    a.line,
                    format!("{} is derived from the dataset and cannot be set", a.key),
                ))
            }
            other => {
                return Err(parse_error(
                    path,
                    a.line,
                    format!("unknown key {other:?}"),
                ))
            }
        }
    }
    Ok(())
}

pub fn apply_denoiser(path: &Path, cfg: &mut DenoiserConfig) -> Result<()> {
    for a in assignments(path)? {
        match a.key.as_str() {
            "size" => cfg.size = parse_usize(path, &a)?,
            "channels" => cfg.channels = parse_usize(path, &a)?,
            "steps" => cfg.steps = parse_usize(path, &a)?,
            "beta_start" => cfg.beta_start = parse_f64(path, &a)?,
            "beta_end" => cfg.beta_end = parse_f64(path, &a)?,
            "learning_rate" => cfg.learning_rate = parse_f64(path, &a)?,
            "clip_norm" => cfg.clip_norm = parse_opt_f64(path, &a)?,
            "batch_size" => cfg.batch_size = parse_usize(path, &a)?,
            other => {
                return Err(parse_error(
                    path,
                    a.line,
                    format!("unknown key {other:?}"),
                ))
            }
        }
    }
    Ok(())
}
