//! Browser demo: three small experiments exported to JavaScript. Each returns
//! a JSON string; the `*_json` functions are the same computations callable
//! from Rust.

use cimste::config::DiagnoseConfig;
use cimste::diagnostics::{self, LayerLoss, NoiseModel};
use cimste::noise::{self, NoiseCounter, Source};
use cimste::quant::{quant_int8, split_input};
use cimste::train::{self, SplitKind};
use cimste::{Config, GradMode, NoiseConfig, Tensor};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Histogram {
    level: f64,
    sigma: f64,
    /// Left edge of each bin of `ln(g / g_target)`.
    edges: Vec<f64>,
    counts: Vec<u32>,
}

/// Histogram of programmed conductances relative to their targets for a
/// `rows × cols` array at mid-scale.
pub fn noise_histogram_json(level: f64, rows: usize, cols: usize, bins: usize) -> cimste::Result<String> {
    let bins = bins.clamp(4, 200);
    let x = quant_int8(&Tensor::new(&[1, rows], vec![1.0; rows])?)?;
    let w = quant_int8(&Tensor::new(&[cols, rows], vec![0.5; rows * cols])?)?;
    let split = split_input(&x, &w)?;
    let cfg = NoiseConfig::only(&[Source::Programming]).with_level(level);
    let prog = noise::program(&split, &vec![0; cols], 1.0, &cfg, NoiseCounter::new(0, 0))?;

    let sigma = cfg.sigma_prog();
    let half = 4.0 * sigma.max(1e-3);
    let width = 2.0 * half / bins as f64;
    let mut counts = vec![0u32; bins];
    for (g, &t) in prog.g_plus.iter().zip(&split.w_plus) {
        let r = (g / f64::from(t)).ln();
        let b = ((r + half) / width).floor();
        if b >= 0.0 && (b as usize) < bins {
            counts[b as usize] += 1;
        }
    }
    let edges = (0..bins).map(|i| -half + i as f64 * width).collect();
    Ok(to_json(&Histogram {
        level,
        sigma,
        edges,
        counts,
    }))
}

#[derive(Serialize)]
struct CosinePoint {
    level: f64,
    cos_mean: f64,
    cos_std: f64,
    cos_predicted: f64,
    mag_ratio: f64,
}

/// Agreement between the straight-through gradient and finite-difference
/// gradients of the noisy layer at each level.
pub fn cosine_vs_level_json(levels: &[f64], crossbar: bool, samples: usize) -> cimste::Result<String> {
    let dc = DiagnoseConfig {
        samples: samples.clamp(1, 64),
        noise_model: if crossbar {
            NoiseModel::Crossbar
        } else {
            NoiseModel::Continuous
        },
        loss: LayerLoss::SquaredError,
        ..DiagnoseConfig::default()
    };
    let points = levels
        .iter()
        .map(|&level| {
            let noise = if level == 0.0 {
                NoiseConfig::ideal()
            } else {
                NoiseConfig::default().with_level(level)
            };
            let r = diagnostics::diagnose(&dc, &noise, 0)?.report;
            Ok(CosinePoint {
                level,
                cos_mean: r.cos_mean,
                cos_std: r.cos_std,
                cos_predicted: r.cos_predicted,
                mag_ratio: r.mag_ratio,
            })
        })
        .collect::<cimste::Result<Vec<_>>>()?;
    Ok(to_json(&points))
}

#[derive(Serialize)]
struct Curve {
    mode: GradMode,
    steps: Vec<u64>,
    train_loss: Vec<f64>,
    eval_accuracy: Vec<f64>,
}

/// Training curves on the spirals task for each gradient mode.
pub fn train_curves_json(level: f64, steps: u64, seed: u64) -> cimste::Result<String> {
    let mut cfg = Config::default();
    cfg.noise.level = level;
    cfg.train.steps = steps.min(5000);
    cfg.train.seed = seed;
    cfg.train.eval_interval = (cfg.train.steps / 20).max(1);
    cfg.train.eval_redraws = 1;
    cfg.model.hidden = vec![32, 32];
    cfg.train.alpha = 3e-3;
    let curves = [GradMode::Baseline, GradMode::Detached, GradMode::Full]
        .into_iter()
        .map(|mode| {
            let mut c = cfg.clone();
            c.train.grad_mode = mode;
            let log = train::run_experiment(&c)?;
            let train_rows: Vec<_> = log.rows_of(SplitKind::Train).collect();
            Ok(Curve {
                mode,
                steps: train_rows.iter().map(|r| r.step).collect(),
                train_loss: train_rows.iter().map(|r| r.loss).collect(),
                eval_accuracy: log.rows_of(SplitKind::Eval).map(|r| r.accuracy).collect(),
            })
        })
        .collect::<cimste::Result<Vec<_>>>()?;
    Ok(to_json(&curves))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

fn js(r: cimste::Result<String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn noise_histogram(level: f64, rows: usize, cols: usize, bins: usize) -> Result<String, JsError> {
    js(noise_histogram_json(level, rows, cols, bins))
}

#[wasm_bindgen]
pub fn cosine_vs_level(levels: Vec<f64>, crossbar: bool, samples: usize) -> Result<String, JsError> {
    js(cosine_vs_level_json(&levels, crossbar, samples))
}

#[wasm_bindgen]
pub fn train_curves(level: f64, steps: u32, seed: u32) -> Result<String, JsError> {
    js(train_curves_json(level, u64::from(steps), u64::from(seed)))
}
