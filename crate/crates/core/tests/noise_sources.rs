use cimste::noise::{self, CrossbarProgram, NoiseConfig, NoiseCounter, Source, G_MID};
use cimste::quant::{adc_fullscale, quant_int8, split_input, SplitInput};
use cimste::{GradMode, Mlp, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ROWS: usize = 9;
const COLS: usize = 5;
const BATCH: usize = 3;
const GAIN: f64 = 0.37;

fn split(seed: u64) -> SplitInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let x = quant_int8(&t(&[BATCH, ROWS])).unwrap();
    let w = quant_int8(&t(&[COLS, ROWS])).unwrap();
    split_input(&x, &w).unwrap()
}

fn configured(source: Source) -> NoiseConfig {
    let mut cfg = NoiseConfig::only(&[source]).with_level(2.0).with_seed(77);
    cfg.delta_t = 40.0;
    cfg.retention_t = 3.0e5;
    cfg.ir_gamma = 0.3;
    cfg.nonlin_beta = 0.8;
    cfg.dac_bits = 5;
    cfg.adc_bits = 6;
    cfg
}

/// Independent per-cell, per-element evaluation of one crossbar read.
fn reference(s: &SplitInput, bias: &[i32], cfg: &NoiseConfig, prog: &CrossbarProgram, read: u64) -> Vec<f64> {
    let on = |src| cfg.enabled(src);
    let cell = |g: f64, half: u64, e: usize| {
        let mut g = g;
        if on(Source::Programming) && g != 0.0 {
            let z = noise::sample_noise_stream(prog.program_seed, [half, 0, e as u64]);
            g *= (cfg.level * cfg.sigma_prog_base * z).exp();
        }
        if on(Source::Thermal) {
            g = (g * (1.0 + cfg.thermal_kappa * cfg.delta_t)).max(0.0);
        }
        if on(Source::Retention) {
            g = G_MID + (g - G_MID) * (-cfg.retention_t / cfg.retention_tau).exp();
        }
        g
    };
    let readout = |g: f64, half: u64, e: usize| {
        let mut g = g;
        if on(Source::Read) && g != 0.0 {
            let z = noise::sample_noise_stream(prog.program_seed, [2 + half, read, e as u64]);
            g *= (1.0 + cfg.sigma_read * z).max(0.0);
        }
        if on(Source::IrDrop) {
            let (i, j) = (e / COLS, e % COLS);
            let pos = i as f64 / ROWS as f64 + j as f64 / COLS as f64;
            g *= (1.0 - cfg.ir_gamma * pos / 2.0).max(0.0);
        }
        g
    };
    let full = adc_fullscale(cfg.adc_bits);
    let mut out = Vec::new();
    for b in 0..BATCH {
        for j in 0..COLS {
            let mut acc = 0.0;
            for i in 0..ROWS {
                let e = i * COLS + j;
                let mut x = f64::from(s.x_uint8[b * ROWS + i]);
                if on(Source::Dac) {
                    let step = f64::from(1u32 << (8 - cfg.dac_bits));
                    x = ((x / step).round_ties_even() * step).clamp(0.0, 255.0 - step + 1.0);
                }
                let gp = readout(cell(f64::from(s.w_plus[e]), 0, e), 0, e);
                let gm = readout(cell(f64::from(s.w_minus[e]), 1, e), 1, e);
                acc += x * (gp - gm);
            }
            let mut v = (acc - f64::from(s.offset_correction[j]) + f64::from(bias[j])) * GAIN;
            if on(Source::Nonlinearity) {
                let limit = full / cfg.nonlin_beta;
                v = limit * (v / limit).tanh();
            }
            if on(Source::Adc) {
                v = v.round_ties_even().clamp(-full, full);
            }
            out.push(v);
        }
    }
    out
}

#[test]
fn every_source_in_isolation_matches_scalar_reference() {
    let bias = [3, -7, 0, 12, -1];
    for (k, &source) in Source::ALL.iter().enumerate() {
        let s = split(k as u64);
        let cfg = configured(source);
        let prog = noise::program(&s, &bias, GAIN, &cfg, NoiseCounter::new(1, 5)).unwrap();
        for read in [0u64, 9] {
            let got = noise::infer(&prog, &s.x_uint8, BATCH, &cfg, read).unwrap();
            let want = reference(&s, &bias, &cfg, &prog, read);
            for (g, w) in got.data().iter().zip(&want) {
                let tol = 1e-9 * w.abs().max(1.0);
                assert!((g - w).abs() <= tol, "{source:?} read {read}: {g} vs {w}");
            }
        }
    }
}

#[test]
fn read_and_ir_off_gives_programming_only_result() {
    let s = split(40);
    let bias = [0; COLS];
    let mut only = NoiseConfig::only(&[Source::Programming]).with_level(1.5).with_seed(3);
    only.enabled_sources.extend([Source::Read, Source::IrDrop]);
    only.sigma_read = 0.0;
    only.ir_gamma = 0.0;
    let base = NoiseConfig::only(&[Source::Programming]).with_level(1.5).with_seed(3);
    let c = NoiseCounter::new(0, 2);
    let a = noise::program(&s, &bias, GAIN, &only, c).unwrap();
    let b = noise::program(&s, &bias, GAIN, &base, c).unwrap();
    let ya = noise::infer(&a, &s.x_uint8, BATCH, &only, 4).unwrap();
    let yb = noise::infer(&b, &s.x_uint8, BATCH, &base, 4).unwrap();
    assert_eq!(ya.data(), yb.data());
}

fn output_mse(level: f64, counters: u64) -> f64 {
    let layer = Mlp::new(&[32, 16], 5).unwrap().layers.remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::new(&[8, 32], (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let cfg = NoiseConfig::only(&[Source::Programming, Source::Read]).with_level(level);
    let mut total = 0.0;
    for step in 0..counters {
        let mut tape = Tape::new();
        let clean = tape.linear(&x, &layer.weight, layer.bias.as_ref()).unwrap();
        let y = cimste::noisy_linear(
            &mut tape,
            &x,
            &layer,
            &cfg,
            true,
            GradMode::Isolated,
            NoiseCounter::new(0, step),
        )
        .unwrap();
        total += y
            .data()
            .iter()
            .zip(clean.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / y.numel() as f64;
    }
    total / counters as f64
}

#[test]
fn output_error_grows_with_level() {
    let mse: Vec<f64> = [0.0, 0.5, 1.0, 2.0, 3.0]
        .iter()
        .map(|&l| output_mse(l, 16))
        .collect();
    for w in mse.windows(2) {
        assert!(w[0] < w[1], "not increasing: {mse:?}");
    }
}

#[test]
fn log_conductance_spread_follows_level() {
    // 32 768 cells at mid-scale; the log ratio is exactly σ·z
    let rows = 256;
    let cols = 64;
    let x = quant_int8(&Tensor::new(&[1, rows], vec![1.0; rows]).unwrap()).unwrap();
    let w = quant_int8(&Tensor::new(&[cols, rows], vec![0.5; rows * cols]).unwrap()).unwrap();
    let s = split_input(&x, &w).unwrap();
    for level in [1.0, 3.0] {
        let cfg = NoiseConfig::only(&[Source::Programming]).with_level(level);
        let prog = noise::program(&s, &vec![0; cols], 1.0, &cfg, NoiseCounter::new(0, 0)).unwrap();
        let logs: Vec<f64> = prog
            .g_plus
            .iter()
            .zip(&s.w_plus)
            .map(|(g, &w0)| (g / f64::from(w0)).ln())
            .collect();
        let n = logs.len() as f64;
        let mean = logs.iter().sum::<f64>() / n;
        let sd = (logs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let want = level * cfg.sigma_prog_base;
        assert!((sd / want - 1.0).abs() < 0.03, "level {level}: sd {sd}");
        assert!(prog.g_minus.iter().all(|&g| g == 0.0));
    }
}
