//! Noise-injected linear layers trained with a straight-through estimator.
//!
//! The forward value of a noisy layer is the crossbar simulation; its
//! gradient is the gradient of the clean float layer. How much of the
//! simulation is recorded on the tape depends on [`GradMode`].

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{self, Half, NoiseConfig, NoiseCounter, ReadInputs};
use crate::quant::{self, INPUT_OFFSET};
use crate::tensor::{QuantizerGrad, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradMode {
    /// No noise at all.
    Baseline,
    /// The whole noise path is recorded and its output is used directly;
    /// quantizers have zero derivative.
    Full,
    /// The noise path runs with recording switched off.
    Isolated,
    /// The noise path is recorded, then cut off with a detach.
    Detached,
}

impl GradMode {
    pub const ALL: [GradMode; 4] = [
        GradMode::Baseline,
        GradMode::Full,
        GradMode::Isolated,
        GradMode::Detached,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradMode::Baseline => "baseline",
            GradMode::Full => "full",
            GradMode::Isolated => "isolated",
            GradMode::Detached => "detached",
        }
    }
}

impl fmt::Display for GradMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown grad mode {s:?} (expected baseline, full, isolated or detached)"
                ))
            })
    }
}

/// Weight `[out × in]` and optional bias `[out]`.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LinearLayer {
    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let out = match weight.shape() {
            [o, _] => *o,
            other => return Err(Error::dim("linear layer", other, &[])),
        };
        if let Some(b) = &bias {
            if b.shape() != [out] {
                return Err(Error::dim("linear layer", weight.shape(), b.shape()));
            }
        }
        Ok(LinearLayer { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Crossbar simulation of `x·wᵀ + b` in real units. Recording follows
/// whatever scope the tape is in; quantizers follow `quantizers`.
fn noise_path(
    tape: &mut Tape,
    x: &Tensor,
    y_clean: &Tensor,
    layer: &LinearLayer,
    cfg: &NoiseConfig,
    counter: NoiseCounter,
    quantizers: QuantizerGrad,
) -> Result<Tensor> {
    if let Some(bad) = x.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "non-finite activation {bad} entering a noisy layer"
        )));
    }
    let w = &layer.weight;
    let sx = quant::scale_on(tape, x);
    let sw = quant::scale_on(tape, w);
    let x_q = quant::quantize_on(tape, x, &sx, quantizers);
    let w_q = quant::quantize_on(tape, w, &sw, quantizers);
    let (cols, rows) = (layer.out_features(), layer.in_features());

    let x_u8 = tape.add_scalar(&x_q, f64::from(INPUT_OFFSET));
    let w_t = tape.transpose(&w_q)?;
    let w_plus = tape.relu(&w_t);
    let neg = tape.scale(&w_t, -1.0);
    let w_minus = tape.relu(&neg);
    drop((w_t, neg));

    let mut neg_corr = vec![0.0; cols];
    for (j, c) in neg_corr.iter_mut().enumerate() {
        let sum: f64 = w_q.data()[j * rows..(j + 1) * rows].iter().sum();
        *c = -f64::from(INPUT_OFFSET) * sum;
    }
    let neg_corr = tape.constant(&[cols], neg_corr);
    let bias_q = match &layer.bias {
        Some(b) => quant::bias_on(tape, b, &sx, &sw, quantizers)?,
        None => tape.constant(&[cols], vec![0.0; cols]),
    };
    let gain = quant::gain_on(tape, &sx, &sw, y_clean, cfg.adc_bits);

    let program_seed = counter.program_seed(cfg.seed);
    let g_plus = noise::program_on(tape, &w_plus, cfg, program_seed, Half::Plus);
    let g_minus = noise::program_on(tape, &w_minus, cfg, program_seed, Half::Minus);
    drop((w_plus, w_minus));
    let v = noise::infer_on(
        tape,
        ReadInputs {
            x: &x_u8,
            g_plus: &g_plus,
            g_minus: &g_minus,
            neg_correction: &neg_corr,
            bias_q: &bias_q,
            gain: &gain,
        },
        cfg,
        program_seed,
        counter.step,
        quantizers,
    )?;
    Ok(quant::rescale_on(tape, &v, &gain, &sx, &sw))
}

/// Linear layer whose forward value comes from the crossbar simulation when
/// `with_noise` is set. `x` is `[batch × in]`.
pub fn noisy_linear(
    tape: &mut Tape,
    x: &Tensor,
    layer: &LinearLayer,
    cfg: &NoiseConfig,
    with_noise: bool,
    mode: GradMode,
    counter: NoiseCounter,
) -> Result<Tensor> {
    let y_clean = tape.linear(x, &layer.weight, layer.bias.as_ref())?;
    if !with_noise || mode == GradMode::Baseline {
        return Ok(y_clean);
    }
    match mode {
        GradMode::Baseline => unreachable!(),
        GradMode::Full => noise_path(tape, x, &y_clean, layer, cfg, counter, QuantizerGrad::Zero),
        GradMode::Isolated => {
            let y_scaled = tape.grad_scope(false, |t| {
                noise_path(t, x, &y_clean, layer, cfg, counter, QuantizerGrad::Cut)
            })?;
            tape.straight_through(&y_clean, &y_scaled)
        }
        GradMode::Detached => {
            // The path is recorded as in full mode; once its value is cut
            // loose nothing refers to those nodes and they are released.
            let mark = tape.len();
            let y_scaled =
                noise_path(tape, x, &y_clean, layer, cfg, counter, QuantizerGrad::Zero)?.detach();
            tape.truncate(mark);
            tape.straight_through(&y_clean, &y_scaled)
        }
    }
}

/// Fully connected ReLU network.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
}

impl Mlp {
    /// PyTorch-style init: weights and biases uniform in `±1/√fan_in`.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer sizes need at least two non-zero entries, got {sizes:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|pair| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let k = 1.0 / (fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-k, k);
                let w = (0..fan_in * fan_out)
                    .map(|_| dist.sample(&mut rng))
                    .collect();
                let b = (0..fan_out).map(|_| dist.sample(&mut rng)).collect();
                LinearLayer::new(
                    Tensor::param(&[fan_out, fan_in], w)?,
                    Some(Tensor::param(&[fan_out], b)?),
                )
            })
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].in_features()];
        s.extend(self.layers.iter().map(LinearLayer::out_features));
        s
    }

    /// Named parameters in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.weight"), &l.weight));
            if let Some(b) = &l.bias {
                out.push((format!("layer{i}.bias"), b));
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.weight"), &mut l.weight));
            if let Some(b) = &mut l.bias {
                out.push((format!("layer{i}.bias"), b));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.parameters() {
            p.zero_grad();
        }
    }

    /// Logits for `x` `[batch × in]`. With `noise`, every layer runs through
    /// the crossbar simulation with counters `(layer, step)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        noise: Option<&NoiseConfig>,
        mode: GradMode,
        step: u64,
    ) -> Result<Tensor> {
        let ideal;
        let (cfg, with_noise) = match noise {
            Some(cfg) => (cfg, true),
            None => {
                ideal = NoiseConfig::ideal();
                (&ideal, false)
            }
        };
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let counter = NoiseCounter::new(i as u32, step);
            let y = noisy_linear(tape, &h, layer, cfg, with_noise, mode, counter)?;
            h = if i == last { y } else { tape.relu(&y) };
        }
        Ok(h)
    }
}

pub fn build_model(sizes: &[usize], seed: u64) -> Result<Mlp> {
    Mlp::new(sizes, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::Source;

    fn layer(out: usize, inp: usize, seed: u64) -> LinearLayer {
        let mut m = Mlp::new(&[inp, out], seed).unwrap();
        m.layers.remove(0)
    }

    fn input(b: usize, n: usize) -> Tensor {
        Tensor::new(
            &[b, n],
            (0..b * n)
                .map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0)
                .collect(),
        )
        .unwrap()
    }

    fn grads_after(mode: GradMode, cfg: &NoiseConfig) -> (Vec<f64>, Vec<f64>) {
        let l = layer(3, 4, 1);
        let mut tape = Tape::new();
        let y = noisy_linear(
            &mut tape,
            &input(2, 4),
            &l,
            cfg,
            true,
            mode,
            NoiseCounter::new(0, 3),
        )
        .unwrap();
        let loss = tape.sum(&y);
        tape.backward(&loss).unwrap();
        (
            l.weight.grad().unwrap().data().to_vec(),
            l.bias.as_ref().unwrap().grad().unwrap().data().to_vec(),
        )
    }

    #[test]
    fn param_count_of_small_mlp() {
        assert_eq!(build_model(&[2, 8, 2], 0).unwrap().param_count(), 42);
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let a = build_model(&[16, 4], 5).unwrap();
        let b = build_model(&[16, 4], 5).unwrap();
        assert_eq!(a.layers[0].weight.data(), b.layers[0].weight.data());
        assert!(a.layers[0].weight.data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn ste_gradients_match_clean_layer_bitwise() {
        let cfg = NoiseConfig::default().with_level(2.0);
        let (bw, bb) = grads_after(GradMode::Baseline, &cfg);
        for mode in [GradMode::Isolated, GradMode::Detached] {
            let (w, b) = grads_after(mode, &cfg);
            let same =
                |a: &[f64], c: &[f64]| a.iter().zip(c).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same(&w, &bw), "{mode} weight grads differ");
            assert!(same(&b, &bb), "{mode} bias grads differ");
        }
    }

    #[test]
    fn node_counts_are_ordered() {
        let cfg = NoiseConfig::default();
        let x = input(2, 4);
        let n: Vec<usize> = GradMode::ALL
            .into_iter()
            .map(|m| {
                let mlp = Mlp::new(&[4, 5, 3], 7).unwrap();
                let mut tape = Tape::new();
                let y = mlp.forward(&mut tape, &x, Some(&cfg), m, 0).unwrap();
                let loss = tape.sum(&y);
                tape.backward(&loss).unwrap();
                tape.peak_len()
            })
            .collect();
        // GradMode::ALL is baseline, full, isolated, detached
        assert!(n[0] < n[2] && n[2] < n[3] && n[3] < n[1], "{n:?}");
    }

    #[test]
    fn noisy_forward_differs_but_clean_forward_does_not() {
        let l = layer(3, 4, 2);
        let x = input(2, 4);
        let mut tape = Tape::new();
        let clean = tape.linear(&x, &l.weight, l.bias.as_ref()).unwrap();
        let cfg = NoiseConfig::default().with_level(2.0);
        let off = noisy_linear(
            &mut tape,
            &x,
            &l,
            &cfg,
            false,
            GradMode::Detached,
            NoiseCounter::new(0, 0),
        )
        .unwrap();
        assert_eq!(off.data(), clean.data());
        let on = noisy_linear(
            &mut tape,
            &x,
            &l,
            &cfg,
            true,
            GradMode::Detached,
            NoiseCounter::new(0, 0),
        )
        .unwrap();
        assert_ne!(on.data(), clean.data());
    }

    #[test]
    fn adc_only_output_is_close_to_clean() {
        let l = layer(5, 6, 3);
        let x = input(3, 6);
        let mut tape = Tape::new();
        let clean = tape.linear(&x, &l.weight, l.bias.as_ref()).unwrap();
        let cfg = NoiseConfig::only(&[Source::Adc]);
        let y = noisy_linear(
            &mut tape,
            &x,
            &l,
            &cfg,
            true,
            GradMode::Isolated,
            NoiseCounter::new(0, 0),
        )
        .unwrap();
        let top = clean.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in y.data().iter().zip(clean.data()) {
            assert!((a - b).abs() < 0.05 * top, "{a} vs {b}");
        }
    }

    #[test]
    fn grad_mode_names_round_trip() {
        for m in GradMode::ALL {
            assert_eq!(m.name().parse::<GradMode>().unwrap(), m);
        }
        assert!("fast".parse::<GradMode>().is_err());
    }
}
