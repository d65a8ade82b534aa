//! Crossbar non-ideality simulator.
//!
//! Programming applies, per conductance and in this order: lognormal
//! programming noise, linear thermal drift, then exponential retention
//! relaxation toward mid-conductance. Each read applies DAC requantization,
//! multiplicative cycle-to-cycle read noise, positional IR-drop attenuation,
//! the differential accumulation, a tanh column non-linearity and finally the
//! ADC. Disabled sources are the identity.
//!
//! Randomness comes from [`stream`]: every draw is keyed by the seed, the
//! layer/step counter and the element index, so results never depend on
//! evaluation order.

pub mod stream;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{adc_fullscale, SplitInput};
use crate::tensor::{Precision, QuantizerGrad, Storage, Tape, Tensor};

/// Conductance at the middle of the 0..127 programming range.
pub const G_MID: f64 = 64.0;

/// Keeps the non-linearity's saturation level finite as `nonlin_beta → 0`.
const BETA_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Programming,
    Read,
    Thermal,
    Retention,
    IrDrop,
    Nonlinearity,
    Adc,
    Dac,
}

impl Source {
    pub const ALL: [Source; 8] = [
        Source::Programming,
        Source::Read,
        Source::Thermal,
        Source::Retention,
        Source::IrDrop,
        Source::Nonlinearity,
        Source::Adc,
        Source::Dac,
    ];
}

/// Parameters of every modelled non-ideality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Noise level; the programming log-σ is `level * sigma_prog_base`.
    pub level: f64,
    pub sigma_prog_base: f64,
    pub sigma_read: f64,
    /// Relative conductance change per kelvin.
    pub thermal_kappa: f64,
    #[serde(rename = "delta_T")]
    pub delta_t: f64,
    /// Retention time constant in seconds.
    pub retention_tau: f64,
    /// Time since programming in seconds.
    pub retention_t: f64,
    pub ir_gamma: f64,
    pub nonlin_beta: f64,
    pub adc_bits: u32,
    pub dac_bits: u32,
    pub seed: u64,
    pub enabled_sources: BTreeSet<Source>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            level: 1.0,
            sigma_prog_base: 0.05,
            sigma_read: 0.02,
            thermal_kappa: 0.002,
            delta_t: 0.0,
            retention_tau: 1.0e6,
            retention_t: 0.0,
            ir_gamma: 0.05,
            nonlin_beta: 0.1,
            adc_bits: 8,
            dac_bits: 8,
            seed: 0,
            enabled_sources: Source::ALL.into_iter().collect(),
        }
    }
}

impl NoiseConfig {
    /// Defaults with every source switched off.
    pub fn ideal() -> Self {
        NoiseConfig {
            enabled_sources: BTreeSet::new(),
            ..Default::default()
        }
    }

    /// Defaults with exactly the given sources switched on.
    pub fn only(sources: &[Source]) -> Self {
        NoiseConfig {
            enabled_sources: sources.iter().copied().collect(),
            ..Default::default()
        }
    }

    pub fn with_level(mut self, level: f64) -> Self {
        self.level = level;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn enabled(&self, source: Source) -> bool {
        self.enabled_sources.contains(&source)
    }

    /// Effective log-σ of programming noise.
    pub fn sigma_prog(&self) -> f64 {
        self.level * self.sigma_prog_base
    }

    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("level", self.level),
            ("sigma_prog_base", self.sigma_prog_base),
            ("sigma_read", self.sigma_read),
            ("thermal_kappa", self.thermal_kappa),
            ("retention_t", self.retention_t),
            ("ir_gamma", self.ir_gamma),
            ("nonlin_beta", self.nonlin_beta),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !self.delta_t.is_finite() {
            return Err(Error::Config(format!(
                "delta_T must be finite, got {}",
                self.delta_t
            )));
        }
        if !(self.retention_tau.is_finite() && self.retention_tau > 0.0) {
            return Err(Error::Config(format!(
                "retention_tau must be > 0, got {}",
                self.retention_tau
            )));
        }
        for (name, bits) in [("adc_bits", self.adc_bits), ("dac_bits", self.dac_bits)] {
            if !(2..=16).contains(&bits) {
                return Err(Error::Config(format!(
                    "{name} must be in 2..=16, got {bits}"
                )));
            }
        }
        Ok(())
    }
}

/// Identifies the noise draws of one layer at one step. Programming noise is
/// keyed by the derived program seed; read noise additionally by the read
/// index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NoiseCounter {
    pub layer: u32,
    pub step: u64,
}

impl NoiseCounter {
    pub fn new(layer: u32, step: u64) -> Self {
        NoiseCounter { layer, step }
    }

    pub fn program_seed(&self, seed: u64) -> u64 {
        stream::hash_key(seed, &[0x5052_4F47, u64::from(self.layer), self.step])
    }
}

/// Which half of the differential pair a conductance array belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Half {
    Plus = 0,
    Minus = 1,
}

const READ_TAG: u64 = 2;

/// A programmed crossbar: noisy conductances plus the digital terms applied
/// at readout.
#[derive(Clone, Debug)]
pub struct CrossbarProgram {
    pub rows: usize,
    pub cols: usize,
    /// `[rows × cols]`, non-negative.
    pub g_plus: Vec<f64>,
    pub g_minus: Vec<f64>,
    pub bias_q: Vec<i32>,
    pub offset_correction: Vec<i32>,
    pub gain: f64,
    pub program_seed: u64,
}

// ----- scalar kernels -----------------------------------------------------------

/// The program-time chain with the enabled sources resolved once.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProgramChain {
    sigma: Option<f64>,
    thermal: Option<f64>,
    decay: Option<f64>,
}

impl ProgramChain {
    pub fn new(cfg: &NoiseConfig) -> Self {
        ProgramChain {
            sigma: cfg.enabled(Source::Programming).then(|| cfg.sigma_prog()),
            thermal: cfg
                .enabled(Source::Thermal)
                .then(|| 1.0 + cfg.thermal_kappa * cfg.delta_t),
            decay: cfg
                .enabled(Source::Retention)
                .then(|| (-cfg.retention_t / cfg.retention_tau).exp()),
        }
    }

    /// Whether the chain consumes a programming draw.
    pub fn draws(&self) -> bool {
        self.sigma.is_some()
    }

    /// Programmed value of conductance `g` given its draw `z`.
    #[inline]
    pub fn apply(&self, g: f64, z: f64) -> f64 {
        let mut g = g;
        match self.sigma {
            Some(sigma) if g != 0.0 => g *= (sigma * z).exp(),
            _ => {}
        }
        if let Some(f) = self.thermal {
            g = (g * f).max(0.0);
        }
        if let Some(d) = self.decay {
            g = G_MID + (g - G_MID) * d;
        }
        g
    }

    /// `d apply / d g`.
    fn slope(&self, g: f64, z: f64) -> f64 {
        let mut s = 1.0;
        if let Some(sigma) = self.sigma {
            s *= (sigma * z).exp();
        }
        if let Some(f) = self.thermal {
            s = if g * s * f > 0.0 { s * f } else { 0.0 };
        }
        if let Some(d) = self.decay {
            s *= d;
        }
        s
    }
}

/// Program-time chain for one conductance given its programming draw `z`.
pub fn program_cell(g: f64, z: f64, cfg: &NoiseConfig) -> f64 {
    ProgramChain::new(cfg).apply(g, z)
}

/// Multiplicative read factor `max(0, 1 + σ·z)`.
#[inline]
pub fn read_factor(z: f64, sigma_read: f64) -> f64 {
    (1.0 + sigma_read * z).max(0.0)
}

/// Attenuation of cell `(row, col)`: `max(0, 1 − γ·(row/rows + col/cols)/2)`.
#[inline]
pub fn ir_factor(row: usize, col: usize, rows: usize, cols: usize, gamma: f64) -> f64 {
    let pos = row as f64 / rows as f64 + col as f64 / cols as f64;
    (1.0 - gamma * pos / 2.0).max(0.0)
}

/// [`ir_factor`] for every cell, row-major.
fn ir_factors(rows: usize, cols: usize, gamma: f64) -> Vec<f64> {
    let col_pos: Vec<f64> = (0..cols).map(|j| j as f64 / cols as f64).collect();
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        let r = i as f64 / rows as f64;
        out.extend(
            col_pos
                .iter()
                .map(|c| (1.0 - gamma * (r + c) / 2.0).max(0.0)),
        );
    }
    out
}

/// DAC requantization of an offset-binary activation to `bits` bits.
#[inline]
pub fn dac_value(x: f64, bits: u32) -> f64 {
    if bits >= 8 {
        return x;
    }
    let step = f64::from(1u32 << (8 - bits));
    let top = f64::from((1u32 << bits) - 1) * step;
    ((x / step).round_ties_even() * step).clamp(0.0, top)
}

/// Saturation level of the column non-linearity in gained units.
pub fn nonlin_limit(cfg: &NoiseConfig) -> f64 {
    adc_fullscale(cfg.adc_bits) / cfg.nonlin_beta.max(BETA_FLOOR)
}

#[inline]
pub fn adc_value(v: f64, adc_bits: u32) -> f64 {
    let a = adc_fullscale(adc_bits);
    v.round_ties_even().clamp(-a, a)
}

// ----- tape forms ---------------------------------------------------------------

/// Element-wise scaling by constant per-cell factors.
fn cell_scale(tape: &mut Tape, g: &Tensor, factors: Vec<f64>) -> Tensor {
    let data = g.data().iter().zip(&factors).map(|(v, f)| v * f).collect();
    if !tape.tracks(g) {
        return tape.constant(g.shape(), data);
    }
    let factors = Storage::new(factors, Precision::F64);
    tape.record(&[g], g.shape(), data, move |go| {
        vec![Some(
            go.iter().zip(factors.data()).map(|(a, f)| a * f).collect(),
        )]
    })
}

/// Program-time noise on one half of the differential pair.
pub(crate) fn program_on(
    tape: &mut Tape,
    g: &Tensor,
    cfg: &NoiseConfig,
    program_seed: u64,
    half: Half,
) -> Tensor {
    let chain = ProgramChain::new(cfg);
    let draws = stream::Stream::new(program_seed, [half as u64, 0]);
    if !tape.tracks(g) {
        // A zero conductance stays zero whatever its draw, so skip it.
        let data = g
            .data()
            .iter()
            .enumerate()
            .map(|(e, &v)| {
                let z = if chain.draws() && v != 0.0 {
                    draws.normal(e as u64)
                } else {
                    0.0
                };
                chain.apply(v, z)
            })
            .collect();
        return tape.constant(g.shape(), data);
    }
    let z: Vec<f64> = if chain.draws() {
        (0..g.numel() as u64).map(|e| draws.normal(e)).collect()
    } else {
        vec![0.0; g.numel()]
    };
    let data = g
        .data()
        .iter()
        .zip(&z)
        .map(|(&v, &zi)| chain.apply(v, zi))
        .collect();
    let slopes = g
        .data()
        .iter()
        .zip(&z)
        .map(|(&v, &zi)| chain.slope(v, zi))
        .collect();
    // saved for backward, so it counts toward the tape's footprint
    let slopes = Storage::new(slopes, Precision::F64);
    tape.record(&[g], g.shape(), data, move |go| {
        vec![Some(
            go.iter().zip(slopes.data()).map(|(a, s)| a * s).collect(),
        )]
    })
}

/// Untracked `read(g⁺) − read(g⁻)` in one pass; same arithmetic as the
/// recorded form.
fn read_difference(
    g_plus: &Tensor,
    g_minus: &Tensor,
    cfg: &NoiseConfig,
    program_seed: u64,
    read_index: u64,
    ir: Option<&[f64]>,
) -> Vec<f64> {
    let read = cfg.enabled(Source::Read);
    let plus = stream::Stream::new(program_seed, [READ_TAG + Half::Plus as u64, read_index]);
    let minus = stream::Stream::new(program_seed, [READ_TAG + Half::Minus as u64, read_index]);
    let cell = |v: f64, draws: &stream::Stream, e: usize| {
        let mut v = v;
        if read && v != 0.0 {
            v *= read_factor(draws.normal(e as u64), cfg.sigma_read);
        }
        if let Some(f) = ir {
            v *= f[e];
        }
        v
    };
    g_plus
        .data()
        .iter()
        .zip(g_minus.data())
        .enumerate()
        .map(|(e, (&p, &m))| cell(p, &plus, e) - cell(m, &minus, e))
        .collect()
}

/// Inputs of one crossbar read, all in tape form.
pub(crate) struct ReadInputs<'a> {
    /// Offset-binary activations, `[batch × rows]`.
    pub x: &'a Tensor,
    pub g_plus: &'a Tensor,
    pub g_minus: &'a Tensor,
    /// Negated offset correction, `[cols]`.
    pub neg_correction: &'a Tensor,
    pub bias_q: &'a Tensor,
    pub gain: &'a Tensor,
}

/// One noisy read. Output is in gained ADC units, `[batch × cols]`.
pub(crate) fn infer_on(
    tape: &mut Tape,
    inp: ReadInputs<'_>,
    cfg: &NoiseConfig,
    program_seed: u64,
    read_index: u64,
    quantizers: QuantizerGrad,
) -> Result<Tensor> {
    let (rows, cols) = match inp.g_plus.shape() {
        [r, c] => (*r, *c),
        other => return Err(Error::dim("infer", other, inp.x.shape())),
    };
    if inp.x.shape().len() != 2 || inp.x.shape()[1] != rows {
        return Err(Error::dim("infer", inp.x.shape(), inp.g_plus.shape()));
    }

    let x = if cfg.enabled(Source::Dac) && cfg.dac_bits < 8 {
        let data = inp
            .x
            .data()
            .iter()
            .map(|&v| dac_value(v, cfg.dac_bits))
            .collect();
        tape.quantizer(&[inp.x], inp.x.shape(), data, quantizers)
    } else {
        inp.x.clone()
    };

    let ir = cfg
        .enabled(Source::IrDrop)
        .then(|| ir_factors(rows, cols, cfg.ir_gamma));
    let read = |tape: &mut Tape, g: &Tensor, half: Half| -> Tensor {
        let mut g = g.clone();
        if cfg.enabled(Source::Read) {
            let need_all = tape.tracks(&g);
            let draws = stream::Stream::new(program_seed, [READ_TAG + half as u64, read_index]);
            let factors = g
                .data()
                .iter()
                .enumerate()
                .map(|(e, &v)| {
                    if v == 0.0 && !need_all {
                        return 1.0;
                    }
                    read_factor(draws.normal(e as u64), cfg.sigma_read)
                })
                .collect();
            g = cell_scale(tape, &g, factors);
        }
        if let Some(factors) = &ir {
            g = cell_scale(tape, &g, factors.clone());
        }
        g
    };
    let diff = if tape.tracks(inp.g_plus) || tape.tracks(inp.g_minus) {
        let gp = read(tape, inp.g_plus, Half::Plus);
        let gm = read(tape, inp.g_minus, Half::Minus);
        tape.sub(&gp, &gm)?
    } else {
        let data = read_difference(
            inp.g_plus,
            inp.g_minus,
            cfg,
            program_seed,
            read_index,
            ir.as_deref(),
        );
        tape.constant(inp.g_plus.shape(), data)
    };

    let acc = tape.matmul(&x, &diff)?;
    drop(diff);
    let acc = tape.add_bias(&acc, inp.neg_correction)?;
    let acc = tape.add_bias(&acc, inp.bias_q)?;
    let mut v = tape.mul(&acc, inp.gain)?;
    drop(acc);

    if cfg.enabled(Source::Nonlinearity) {
        let limit = nonlin_limit(cfg);
        let t = tape.scale(&v, 1.0 / limit);
        let t = tape.tanh(&t);
        v = tape.scale(&t, limit);
    }
    if cfg.enabled(Source::Adc) {
        let data = v
            .data()
            .iter()
            .map(|&y| adc_value(y, cfg.adc_bits))
            .collect();
        v = tape.quantizer(&[&v], v.shape(), data, quantizers);
    }
    Ok(v)
}

// ----- standalone operations -------------------------------------------------

fn u8_tensor(shape: &[usize], values: &[u8]) -> Tensor {
    Tensor::new(shape, values.iter().map(|&v| f64::from(v)).collect()).expect("shape checked")
}

/// Programs split weights onto a crossbar.
pub fn program(
    split: &SplitInput,
    bias_q: &[i32],
    gain: f64,
    cfg: &NoiseConfig,
    counter: NoiseCounter,
) -> Result<CrossbarProgram> {
    cfg.validate()?;
    if bias_q.len() != split.cols {
        return Err(Error::dim("program", &[bias_q.len()], &[split.cols]));
    }
    if !(gain > 0.0 && gain.is_finite()) {
        return Err(Error::Contract(format!(
            "gain must be positive, got {gain}"
        )));
    }
    let shape = [split.rows, split.cols];
    let program_seed = counter.program_seed(cfg.seed);
    let mut tape = Tape::new();
    let g_plus = program_on(
        &mut tape,
        &u8_tensor(&shape, &split.w_plus),
        cfg,
        program_seed,
        Half::Plus,
    );
    let g_minus = program_on(
        &mut tape,
        &u8_tensor(&shape, &split.w_minus),
        cfg,
        program_seed,
        Half::Minus,
    );
    Ok(CrossbarProgram {
        rows: split.rows,
        cols: split.cols,
        g_plus: g_plus.data().to_vec(),
        g_minus: g_minus.data().to_vec(),
        bias_q: bias_q.to_vec(),
        offset_correction: split.offset_correction.clone(),
        gain,
        program_seed,
    })
}

/// One read of a programmed crossbar with `x_uint8` of shape
/// `[batch × rows]`. Returns gained ADC-domain outputs `[batch × cols]`.
pub fn infer(
    prog: &CrossbarProgram,
    x_uint8: &[u8],
    batch: usize,
    cfg: &NoiseConfig,
    read_index: u64,
) -> Result<Tensor> {
    cfg.validate()?;
    if x_uint8.len() != batch * prog.rows {
        return Err(Error::dim(
            "infer",
            &[batch, x_uint8.len() / batch.max(1)],
            &[prog.rows, prog.cols],
        ));
    }
    let shape = [prog.rows, prog.cols];
    let to_tensor = |v: &[f64]| Tensor::new(&shape, v.to_vec()).expect("shape checked");
    let ints = |v: &[i32], neg: bool| {
        let sign = if neg { -1.0 } else { 1.0 };
        Tensor::new(&[v.len()], v.iter().map(|&c| sign * f64::from(c)).collect())
            .expect("non-empty")
    };
    let mut tape = Tape::new();
    infer_on(
        &mut tape,
        ReadInputs {
            x: &u8_tensor(&[batch, prog.rows], x_uint8),
            g_plus: &to_tensor(&prog.g_plus),
            g_minus: &to_tensor(&prog.g_minus),
            neg_correction: &ints(&prog.offset_correction, true),
            bias_q: &ints(&prog.bias_q, false),
            gain: &Tensor::scalar(prog.gain),
        },
        cfg,
        prog.program_seed,
        read_index,
        QuantizerGrad::Cut,
    )
}

/// Standard normal draw of the counter-based stream.
pub fn sample_noise_stream(seed: u64, key: [u64; 3]) -> f64 {
    stream::standard_normal(seed, key)
}
