use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            alpha: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Moment buffers for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub hyper: AdamParams,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, hyper: AdamParams) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::numel).collect();
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            hyper,
        }
    }

    /// One bias-corrected update using each parameter's accumulated
    /// gradient; a parameter with no gradient counts as zero gradient.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        let mut grads = Vec::with_capacity(params.len());
        for (i, (name, p)) in params.iter().enumerate() {
            if p.numel() != self.m[i].len() {
                return Err(Error::dim("adam", &[self.m[i].len()], p.shape()));
            }
            let g = p.grad();
            if let Some(g) = &g {
                if let Some(k) = g.data().iter().position(|v| !v.is_finite()) {
                    return Err(Error::Training(format!(
                        "non-finite gradient in {name} at element {k}"
                    )));
                }
            }
            grads.push(g);
        }

        self.t += 1;
        let AdamParams {
            alpha,
            beta1,
            beta2,
            epsilon,
        } = self.hyper;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, ((_, p), g)) in params.into_iter().zip(grads).enumerate() {
            let Some(g) = g else {
                // zero gradient still decays the moments
                for (m, v) in self.m[i].iter_mut().zip(self.v[i].iter_mut()) {
                    *m *= beta1;
                    *v *= beta2;
                }
                apply(p.data_mut(), &self.m[i], &self.v[i], alpha, c1, c2, epsilon);
                continue;
            };
            for ((m, v), &gk) in self.m[i].iter_mut().zip(self.v[i].iter_mut()).zip(g.data()) {
                *m = beta1 * *m + (1.0 - beta1) * gk;
                *v = beta2 * *v + (1.0 - beta2) * gk * gk;
            }
            apply(p.data_mut(), &self.m[i], &self.v[i], alpha, c1, c2, epsilon);
        }
        Ok(())
    }
}

fn apply(w: &mut [f64], m: &[f64], v: &[f64], alpha: f64, c1: f64, c2: f64, eps: f64) {
    for ((w, &m), &v) in w.iter_mut().zip(m).zip(v) {
        let m_hat = m / c1;
        let v_hat = v / c2;
        *w -= alpha * m_hat / (v_hat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn set_grad(p: &Tensor, g: f64) {
        let mut tape = Tape::new();
        let s = tape.sum(p);
        let l = tape.scale(&s, g);
        tape.backward(&l).unwrap();
    }

    #[test]
    fn first_step_moves_by_alpha() {
        let mut p = Tensor::param(&[1], vec![0.5]).unwrap();
        set_grad(&p, 1.0);
        let hyper = AdamParams {
            alpha: 0.1,
            ..Default::default()
        };
        let mut st = AdamState::new([&p], hyper);
        st.step(vec![("p".into(), &mut p)]).unwrap();
        assert!((p.data()[0] - (0.5 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::param(&[3], vec![1.0, -2.0, 3.0]).unwrap();
        set_grad(&p, 0.0);
        let mut st = AdamState::new([&p], AdamParams::default());
        st.step(vec![("p".into(), &mut p)]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = Tensor::param(&[1], vec![1.0]).unwrap();
        set_grad(&p, f64::NAN);
        let mut st = AdamState::new([&p], AdamParams::default());
        let err = st.step(vec![("layer2.bias".into(), &mut p)]).unwrap_err();
        assert!(err.to_string().contains("layer2.bias"), "{err}");
        assert_eq!(st.t, 0);
        assert_eq!(p.data(), &[1.0]);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(AdamParams {
            beta1: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AdamParams {
            alpha: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
