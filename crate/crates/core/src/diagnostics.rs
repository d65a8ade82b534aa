//! Gradient diagnostics and training-cost profiling.
//!
//! The STE gradient `g̃` of a single layer is compared with an oracle
//! gradient `g*` obtained by central finite differences of the noisy loss,
//! holding every noise draw fixed on both sides of the difference. The
//! spread of `δ = g* − g̃` over draws gives the cosine, variance and
//! magnitude statistics of [`GradReport`].

use std::time::Instant;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DiagnoseConfig, ProfileConfig};
use crate::error::{Error, Result};
use crate::noise::{self, stream, NoiseConfig, NoiseCounter, Source};
use crate::ste::{self, GradMode, LinearLayer, Mlp};
use crate::tensor::{memory, Tape, Tensor};
use crate::train::{cross_entropy, AdamParams, AdamState};

/// How the noisy forward of the oracle is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// No noise: the oracle reproduces the clean gradient.
    Clean,
    /// Multiplicative float perturbations of the weights for the
    /// programming, thermal, retention, read and IR-drop sources; the
    /// quantizing sources are ignored. Differentiable almost everywhere.
    Continuous,
    /// The full quantized crossbar pipeline.
    Crossbar,
}

/// Scalar objective on a layer output `y` `[batch × out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerLoss {
    /// `Σ r ⊙ y` for a fixed random `r`.
    Linear,
    /// `mean (y − t)²` for a fixed random target `t`.
    SquaredError,
    /// Cross-entropy against fixed random labels.
    CrossEntropy,
}

/// A loss with its fixed random coefficients.
#[derive(Clone, Debug)]
pub struct Objective {
    pub kind: LayerLoss,
    pub coeffs: Vec<f64>,
    pub labels: Vec<usize>,
    shape: [usize; 2],
}

impl Objective {
    pub fn new(kind: LayerLoss, batch: usize, out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Uniform::new_inclusive(-1.0, 1.0);
        Objective {
            kind,
            coeffs: (0..batch * out).map(|_| unit.sample(&mut rng)).collect(),
            labels: (0..batch).map(|_| rng.gen_range(0..out)).collect(),
            shape: [batch, out],
        }
    }

    pub fn on_tape(&self, tape: &mut Tape, y: &Tensor) -> Result<Tensor> {
        if y.shape() != self.shape {
            return Err(Error::dim("objective", y.shape(), &self.shape));
        }
        let c = tape.constant(&self.shape, self.coeffs.clone());
        match self.kind {
            LayerLoss::Linear => {
                let p = tape.mul(y, &c)?;
                Ok(tape.sum(&p))
            }
            LayerLoss::SquaredError => {
                let d = tape.sub(y, &c)?;
                let sq = tape.mul(&d, &d)?;
                Ok(tape.mean(&sq))
            }
            LayerLoss::CrossEntropy => cross_entropy(tape, y, &self.labels),
        }
    }

    fn value(&self, y: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        tape.grad_scope(false, |t| self.on_tape(t, y))
            .map(|l| l.item())
    }
}

/// A copy of `layer` with fresh gradient buffers.
fn fresh(layer: &LinearLayer) -> Result<LinearLayer> {
    LinearLayer::new(
        Tensor::param(layer.weight.shape(), layer.weight.data().to_vec())?,
        match &layer.bias {
            Some(b) => Some(Tensor::param(b.shape(), b.data().to_vec())?),
            None => None,
        },
    )
}

/// Gradient of the clean loss with respect to the weight, flattened
/// row-major. This is exactly the weight gradient of a noise-injected layer
/// in isolated or detached mode.
pub fn ste_gradient(layer: &LinearLayer, x: &Tensor, objective: &Objective) -> Result<Vec<f64>> {
    let l = fresh(layer)?;
    let mut tape = Tape::new();
    let y = tape.linear(x, &l.weight, l.bias.as_ref())?;
    let loss = objective.on_tape(&mut tape, &y)?;
    tape.backward(&loss)?;
    Ok(l.weight
        .grad()
        .map_or_else(|| vec![0.0; l.weight.numel()], |g| g.data().to_vec()))
}

/// Noisy layer output for one frozen draw `sample`.
fn noisy_forward(
    layer: &LinearLayer,
    x: &Tensor,
    cfg: &NoiseConfig,
    model: NoiseModel,
    sample: u64,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    tape.grad_scope(false, |t| match model {
        NoiseModel::Clean => t.linear(x, &layer.weight, layer.bias.as_ref()),
        NoiseModel::Crossbar => ste::noisy_linear(
            t,
            x,
            layer,
            cfg,
            true,
            GradMode::Isolated,
            NoiseCounter::new(0, sample),
        ),
        NoiseModel::Continuous => {
            let factors = continuous_factors(layer, cfg, sample);
            let w: Vec<f64> = layer
                .weight
                .data()
                .iter()
                .zip(&factors)
                .map(|(w, f)| w * f)
                .collect();
            let w = Tensor::new(layer.weight.shape(), w)?;
            t.linear(x, &w, layer.bias.as_ref())
        }
    })
}

/// Per-weight multiplicative factors of the continuous noise model.
pub fn continuous_factors(layer: &LinearLayer, cfg: &NoiseConfig, sample: u64) -> Vec<f64> {
    let (out, inp) = (layer.out_features(), layer.in_features());
    let seed = NoiseCounter::new(0, sample).program_seed(cfg.seed);
    let mut f = vec![1.0; out * inp];
    for (k, fk) in f.iter_mut().enumerate() {
        let (j, i) = (k / inp, k % inp);
        if cfg.enabled(Source::Programming) {
            *fk *= (cfg.sigma_prog() * stream::standard_normal(seed, [0, 0, k as u64])).exp();
        }
        if cfg.enabled(Source::Thermal) {
            *fk *= 1.0 + cfg.thermal_kappa * cfg.delta_t;
        }
        if cfg.enabled(Source::Retention) {
            *fk *= (-cfg.retention_t / cfg.retention_tau).exp();
        }
        if cfg.enabled(Source::Read) {
            let z = stream::standard_normal(seed, [2, sample, k as u64]);
            *fk *= noise::read_factor(z, cfg.sigma_read);
        }
        if cfg.enabled(Source::IrDrop) {
            // crossbar rows are inputs, columns outputs
            *fk *= noise::ir_factor(i, j, inp, out, cfg.ir_gamma);
        }
    }
    f
}

/// Oracle gradient draws with the coordinates whose estimate changed by
/// more than 10% between step `h` and `h/2`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleSamples {
    pub samples: Vec<Vec<f64>>,
    pub discontinuous: Vec<Vec<usize>>,
}

fn central_difference(
    layer: &LinearLayer,
    x: &Tensor,
    objective: &Objective,
    cfg: &NoiseConfig,
    model: NoiseModel,
    sample: u64,
    h: f64,
) -> Result<Vec<f64>> {
    let mut probe = layer.clone();
    let n = probe.weight.numel();
    let mut g = vec![0.0; n];
    for (k, gk) in g.iter_mut().enumerate() {
        let w0 = layer.weight.data()[k];
        probe.weight.data_mut()[k] = w0 + h;
        let up = objective.value(&noisy_forward(&probe, x, cfg, model, sample)?)?;
        probe.weight.data_mut()[k] = w0 - h;
        let down = objective.value(&noisy_forward(&probe, x, cfg, model, sample)?)?;
        probe.weight.data_mut()[k] = w0;
        *gk = (up - down) / (2.0 * h);
    }
    Ok(g)
}

/// Finite-difference gradients of the noisy loss, one per frozen draw
/// `0..n_samples`. A noise config with no enabled source makes the noisy
/// forward the clean layer.
#[allow(clippy::too_many_arguments)]
pub fn oracle_true_gradient(
    layer: &LinearLayer,
    x: &Tensor,
    objective: &Objective,
    cfg: &NoiseConfig,
    model: NoiseModel,
    n_samples: usize,
    h: f64,
    max_weights: usize,
) -> Result<OracleSamples> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Contract(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    if n_samples == 0 {
        return Err(Error::Contract("oracle needs at least one sample".into()));
    }
    let n = layer.weight.numel();
    if n > max_weights {
        return Err(Error::Resource(format!(
            "layer has {n} weights, above the oracle cap of {max_weights}; \
             use a smaller layer or probe a subset of coordinates"
        )));
    }
    cfg.validate()?;
    let model = if cfg.enabled_sources.is_empty() {
        NoiseModel::Clean
    } else {
        model
    };
    let mut samples = Vec::with_capacity(n_samples);
    let mut discontinuous = Vec::with_capacity(n_samples);
    for s in 0..n_samples as u64 {
        let g = central_difference(layer, x, objective, cfg, model, s, h)?;
        let g_half = central_difference(layer, x, objective, cfg, model, s, h / 2.0)?;
        let flagged = g
            .iter()
            .zip(&g_half)
            .enumerate()
            .filter(|(_, (a, b))| {
                let scale = a.abs().max(b.abs());
                scale > 1e-12 && (*a - *b).abs() > 0.1 * scale
            })
            .map(|(k, _)| k)
            .collect();
        samples.push(g);
        discontinuous.push(flagged);
    }
    Ok(OracleSamples {
        samples,
        discontinuous,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub g_tilde: Vec<f64>,
    pub g_star_samples: Vec<Vec<f64>>,
    pub delta_samples: Vec<Vec<f64>>,
    /// Cosine between `g̃` and each `g*` draw.
    pub cos_samples: Vec<f64>,
    pub cos_mean: f64,
    pub cos_std: f64,
    /// `‖g̃‖ / √(‖g̃‖² + mean‖δ‖²)`.
    pub cos_predicted: f64,
    /// `mean‖δ‖² − ‖mean δ‖²`.
    pub var_gstar: f64,
    /// The same variance as a sum of per-coordinate sample variances of `g*`.
    pub var_gstar_coordinatewise: f64,
    /// `mean (‖g*‖² − ‖g̃‖²) / ‖g̃‖²`.
    pub mag_ratio: f64,
    /// `‖mean δ‖`.
    pub delta_mean_norm: f64,
    /// Mean normalized inner product `⟨g̃, δ⟩ / (‖g̃‖‖δ‖)`; the predicted
    /// cosine assumes this is near zero.
    pub delta_correlation: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine of the angle between two vectors via `1 − ½‖â − b̂‖²`, which is
/// exactly 1 for parallel inputs. Zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let d2: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x / na - y / nb).powi(2))
        .sum();
    (1.0 - 0.5 * d2).clamp(-1.0, 1.0)
}

pub fn analyze(g_tilde: &[f64], g_star_samples: &[Vec<f64>]) -> Result<GradReport> {
    if g_star_samples.is_empty() {
        return Err(Error::Contract(
            "analysis needs at least one oracle sample".into(),
        ));
    }
    if let Some(s) = g_star_samples.iter().find(|s| s.len() != g_tilde.len()) {
        return Err(Error::dim("analyze", &[g_tilde.len()], &[s.len()]));
    }
    let gn2 = dot(g_tilde, g_tilde);
    if gn2 == 0.0 || !gn2.is_finite() {
        return Err(Error::Degenerate(format!(
            "STE gradient has norm {}",
            gn2.sqrt()
        )));
    }
    let n = g_star_samples.len() as f64;
    let dim = g_tilde.len();
    let deltas: Vec<Vec<f64>> = g_star_samples
        .iter()
        .map(|s| s.iter().zip(g_tilde).map(|(a, b)| a - b).collect())
        .collect();

    let cos_samples: Vec<f64> = g_star_samples.iter().map(|s| cosine(g_tilde, s)).collect();
    let cos_mean = cos_samples.iter().sum::<f64>() / n;
    let cos_std = (cos_samples
        .iter()
        .map(|c| (c - cos_mean).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();

    let mean_d2 = deltas.iter().map(|d| dot(d, d)).sum::<f64>() / n;
    let mut mean_delta = vec![0.0; dim];
    for d in &deltas {
        for (m, v) in mean_delta.iter_mut().zip(d) {
            *m += v / n;
        }
    }
    let var_gstar = (mean_d2 - dot(&mean_delta, &mean_delta)).max(0.0);

    let mut var_coord = 0.0;
    for k in 0..dim {
        let mean = g_star_samples.iter().map(|s| s[k]).sum::<f64>() / n;
        var_coord += g_star_samples
            .iter()
            .map(|s| (s[k] - mean).powi(2))
            .sum::<f64>()
            / n;
    }

    let mag_ratio = deltas
        .iter()
        .map(|d| (2.0 * dot(g_tilde, d) + dot(d, d)) / gn2)
        .sum::<f64>()
        / n;
    let gnorm = gn2.sqrt();
    let delta_correlation = deltas
        .iter()
        .map(|d| {
            let dn = norm(d);
            if dn == 0.0 {
                0.0
            } else {
                dot(g_tilde, d) / (gnorm * dn)
            }
        })
        .sum::<f64>()
        / n;

    Ok(GradReport {
        g_tilde: g_tilde.to_vec(),
        g_star_samples: g_star_samples.to_vec(),
        cos_samples,
        cos_mean,
        cos_std,
        cos_predicted: gnorm / (gn2 + mean_d2).sqrt(),
        var_gstar,
        var_gstar_coordinatewise: var_coord,
        mag_ratio,
        delta_mean_norm: norm(&mean_delta),
        delta_correlation,
        delta_samples: deltas,
    })
}

/// Everything `diagnose` produces for one configuration.
#[derive(Clone, Debug)]
pub struct Diagnosis {
    pub report: GradReport,
    pub discontinuous: Vec<Vec<usize>>,
}

/// Builds a random layer, input and objective from `seed` and runs the STE
/// and oracle gradients through [`analyze`].
pub fn diagnose(dc: &DiagnoseConfig, noise: &NoiseConfig, seed: u64) -> Result<Diagnosis> {
    let mut mlp = Mlp::new(
        &[dc.in_features, dc.out_features],
        stream::hash_key(seed, &[10]),
    )?;
    let layer = mlp.layers.remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(stream::hash_key(seed, &[11]));
    let unit = Uniform::new_inclusive(-1.0, 1.0);
    let x = Tensor::new(
        &[dc.batch, dc.in_features],
        (0..dc.batch * dc.in_features)
            .map(|_| unit.sample(&mut rng))
            .collect(),
    )?;
    let objective = Objective::new(
        dc.loss,
        dc.batch,
        dc.out_features,
        stream::hash_key(seed, &[12]),
    );
    let g_tilde = ste_gradient(&layer, &x, &objective)?;
    let oracle = oracle_true_gradient(
        &layer,
        &x,
        &objective,
        noise,
        dc.noise_model,
        dc.samples,
        dc.h,
        dc.max_weights,
    )?;
    Ok(Diagnosis {
        report: analyze(&g_tilde, &oracle.samples)?,
        discontinuous: oracle.discontinuous,
    })
}

// ----- cost profiling ------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub mode: GradMode,
    /// Median over the measured steps.
    pub wall_ms_per_step: f64,
    /// Largest per-step high-water mark of tensor and tape bytes above the
    /// bytes live before the step.
    pub peak_bytes: usize,
    pub tape_nodes: usize,
}

pub const PROFILE_CSV_HEADER: &str = "mode,wall_ms,peak_bytes,tape_nodes";

pub fn profile_csv(reports: &[CostReport]) -> String {
    let mut s = format!("{PROFILE_CSV_HEADER}\n");
    for r in reports {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.mode, r.wall_ms_per_step, r.peak_bytes, r.tape_nodes
        ));
    }
    s
}

/// One mode's training state on the profiling workload.
struct Workload {
    mode: GradMode,
    model: Mlp,
    opt: AdamState,
    x: Tensor,
    labels: Vec<usize>,
    times: Vec<f64>,
    peak: usize,
    nodes: usize,
}

impl Workload {
    fn new(mode: GradMode, wl: &ProfileConfig, seed: u64) -> Result<Self> {
        let model = Mlp::new(&wl.sizes, stream::hash_key(seed, &[20]))?;
        let opt = AdamState::new(
            model.parameters().into_iter().map(|(_, p)| p),
            AdamParams::default(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(stream::hash_key(seed, &[21]));
        let unit = Uniform::new_inclusive(-1.0, 1.0);
        let inp = wl.sizes[0];
        let x = Tensor::new(
            &[wl.batch, inp],
            (0..wl.batch * inp).map(|_| unit.sample(&mut rng)).collect(),
        )?;
        let classes = *wl.sizes.last().expect("validated sizes");
        let labels = (0..wl.batch).map(|_| rng.gen_range(0..classes)).collect();
        Ok(Workload {
            mode,
            model,
            opt,
            x,
            labels,
            times: Vec::new(),
            peak: 0,
            nodes: 0,
        })
    }

    fn step(&mut self, noise: &NoiseConfig, step: u64, measure: bool) -> Result<()> {
        let live = memory::live_bytes();
        memory::reset_peak();
        let t0 = Instant::now();
        {
            let mut tape = Tape::new();
            let logits = self
                .model
                .forward(&mut tape, &self.x, Some(noise), self.mode, step)?;
            let loss = cross_entropy(&mut tape, &logits, &self.labels)?;
            self.model.zero_grad();
            tape.backward(&loss)?;
            self.nodes = tape.peak_len();
        }
        self.opt.step(self.model.parameters_mut())?;
        let elapsed = t0.elapsed().as_secs_f64() * 1e3;
        if measure {
            self.times.push(elapsed);
            self.peak = self.peak.max(memory::peak_bytes().saturating_sub(live));
        }
        Ok(())
    }

    fn report(&self) -> CostReport {
        let mut t = self.times.clone();
        t.sort_by(f64::total_cmp);
        let median = if t.is_empty() {
            0.0
        } else if t.len() % 2 == 1 {
            t[t.len() / 2]
        } else {
            (t[t.len() / 2 - 1] + t[t.len() / 2]) / 2.0
        };
        CostReport {
            mode: self.mode,
            wall_ms_per_step: median,
            peak_bytes: self.peak,
            tape_nodes: self.nodes,
        }
    }
}

/// Profiles the given modes on one workload. All modes start from the same
/// weights and data; measured steps are taken round-robin across modes so
/// slow drifts of the machine affect every mode alike.
pub fn profile_modes(
    modes: &[GradMode],
    wl: &ProfileConfig,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<Vec<CostReport>> {
    noise.validate()?;
    let mut states = modes
        .iter()
        .map(|&m| Workload::new(m, wl, seed))
        .collect::<Result<Vec<_>>>()?;
    for s in 0..wl.warmup as u64 {
        for st in &mut states {
            st.step(noise, s, false)?;
        }
    }
    for s in 0..wl.steps as u64 {
        for st in &mut states {
            st.step(noise, wl.warmup as u64 + s, true)?;
        }
    }
    Ok(states.iter().map(Workload::report).collect())
}

/// Cost of training `mode` on the workload.
pub fn profile(
    mode: GradMode,
    wl: &ProfileConfig,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<CostReport> {
    Ok(profile_modes(&[mode], wl, noise, seed)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_layer() -> (LinearLayer, Tensor) {
        let mut m = Mlp::new(&[3, 2], 4).unwrap();
        let x = Tensor::new(&[2, 3], vec![0.5, -1.0, 0.25, 1.0, 0.75, -0.5]).unwrap();
        (m.layers.remove(0), x)
    }

    #[test]
    fn sum_loss_with_ones_gives_unit_gradient() {
        let mut m = Mlp::new(&[3, 2], 0).unwrap();
        let layer = m.layers.remove(0);
        let x = Tensor::new(&[1, 3], vec![1.0; 3]).unwrap();
        let obj = Objective {
            kind: LayerLoss::Linear,
            coeffs: vec![1.0, 1.0],
            labels: vec![0],
            shape: [1, 2],
        };
        assert_eq!(ste_gradient(&layer, &x, &obj).unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn analyze_known_vectors() {
        let r = analyze(&[1.0, 0.0], &[vec![1.0, 1.0]]).unwrap();
        assert!((r.cos_mean - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((r.cos_predicted - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.var_gstar, 0.0);

        let r = analyze(&[1.0, 2.0], &[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!((r.cos_mean, r.var_gstar, r.mag_ratio), (1.0, 0.0, 0.0));
    }

    #[test]
    fn analyze_rejects_degenerate_input() {
        assert!(matches!(
            analyze(&[0.0, 0.0], &[vec![1.0, 0.0]]),
            Err(Error::Degenerate(_))
        ));
        assert!(analyze(&[1.0], &[]).is_err());
        assert!(analyze(&[1.0], &[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn oracle_cap_is_a_resource_error() {
        let (layer, x) = small_layer();
        let obj = Objective::new(LayerLoss::Linear, 2, 2, 0);
        let cfg = NoiseConfig::default();
        let err = oracle_true_gradient(&layer, &x, &obj, &cfg, NoiseModel::Crossbar, 1, 1e-4, 4);
        assert!(matches!(err, Err(Error::Resource(_))));
    }

    #[test]
    fn clean_oracle_matches_ste_gradient() {
        let (layer, x) = small_layer();
        let obj = Objective::new(LayerLoss::CrossEntropy, 2, 2, 1);
        let g = ste_gradient(&layer, &x, &obj).unwrap();
        let o = oracle_true_gradient(
            &layer,
            &x,
            &obj,
            &NoiseConfig::ideal(),
            NoiseModel::Crossbar,
            2,
            1e-4,
            64,
        )
        .unwrap();
        for s in &o.samples {
            for (a, b) in s.iter().zip(&g) {
                assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-3), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn cosine_of_parallel_vectors_is_exactly_one() {
        assert_eq!(cosine(&[0.1, 0.2, 0.3], &[0.2, 0.4, 0.6]), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[-1.0, 0.0]), -1.0);
    }
}
