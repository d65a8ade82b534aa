//! Symmetric int8 quantization and the integer mapping onto a differential
//! crossbar: offset-binary activations, split weights, integer bias, ADC gain
//! and the inverse rescale.
//!
//! Each stage has a standalone form working on plain values and a tape form
//! (`*_on`) used inside the noisy layer. Both go through the same scalar
//! kernels so they agree bit for bit.

use crate::error::{Error, Result};
use crate::tensor::{kernels, QuantizerGrad, Tape, Tensor};

/// Largest int8 magnitude produced; -128 is never used so the range is
/// symmetric.
pub const QMAX: f64 = 127.0;

/// Offset added to signed activations to make them unsigned DAC codes.
pub const INPUT_OFFSET: i32 = 128;

/// Signed int8 values with a positive per-tensor scale (`real = scale * q`).
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    values: Vec<i8>,
    scale: f64,
}

impl QuantizedTensor {
    pub fn new(shape: &[usize], values: Vec<i8>, scale: f64) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} does not describe {} values",
                values.len()
            )));
        }
        if values.contains(&i8::MIN) {
            return Err(Error::Range(
                "-128 is outside the symmetric int8 range".into(),
            ));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Range(format!("scale must be positive, got {scale}")));
        }
        Ok(QuantizedTensor {
            shape: shape.to_vec(),
            values,
            scale,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|&q| self.scale * f64::from(q))
            .collect()
    }
}

/// `max|x| / 127`, or 1.0 for an all-zero input.
pub fn scale_for(data: &[f64]) -> f64 {
    let m = kernels::max_abs(data);
    if m == 0.0 {
        1.0
    } else {
        m / QMAX
    }
}

/// Round-half-to-even of `v / scale`, clamped to [-127, 127].
#[inline]
pub fn quantize_value(v: f64, scale: f64) -> f64 {
    (v / scale).round_ties_even().clamp(-QMAX, QMAX)
}

pub fn quant_int8(x: &Tensor) -> Result<QuantizedTensor> {
    if let Some(bad) = x.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "cannot quantize non-finite value {bad}"
        )));
    }
    let scale = scale_for(x.data());
    let values = x
        .data()
        .iter()
        .map(|&v| quantize_value(v, scale) as i8)
        .collect();
    QuantizedTensor::new(x.shape(), values, scale)
}

/// Integer operands as programmed onto a differential crossbar.
///
/// Rows of the crossbar are input lines and columns are output lines, so the
/// weight halves are stored `[rows × cols]`, transposed from the usual
/// `[out × in]` weight layout.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitInput {
    pub batch: usize,
    pub rows: usize,
    pub cols: usize,
    /// `x_q + 128`, `[batch × rows]`.
    pub x_uint8: Vec<u8>,
    pub w_plus: Vec<u8>,
    pub w_minus: Vec<u8>,
    /// `128 * Σ_rows w_q` per column.
    pub offset_correction: Vec<i32>,
}

impl SplitInput {
    /// Exact integer accumulation `Σ x_uint8·(w_plus − w_minus) − correction`,
    /// `[batch × cols]`. Equals `x_q · w_qᵀ`.
    pub fn integer_matvec(&self) -> Vec<i64> {
        let mut out = vec![0i64; self.batch * self.cols];
        for b in 0..self.batch {
            for j in 0..self.cols {
                let mut acc = 0i64;
                for i in 0..self.rows {
                    let x = i64::from(self.x_uint8[b * self.rows + i]);
                    let w = i64::from(self.w_plus[i * self.cols + j])
                        - i64::from(self.w_minus[i * self.cols + j]);
                    acc += x * w;
                }
                out[b * self.cols + j] = acc - i64::from(self.offset_correction[j]);
            }
        }
        out
    }
}

/// Splits quantized activations `[batch × in]` (or `[in]`) and weights
/// `[out × in]` into offset-binary inputs and a differential weight pair.
pub fn split_input(x_q: &QuantizedTensor, w_q: &QuantizedTensor) -> Result<SplitInput> {
    let (rows, cols) = match w_q.shape() {
        [out, inp] => (*inp, *out),
        other => return Err(Error::dim("split_input", x_q.shape(), other)),
    };
    let batch = match x_q.shape() {
        [n] if *n == rows => 1,
        [b, n] if *n == rows => *b,
        other => return Err(Error::dim("split_input", other, w_q.shape())),
    };
    let x_uint8 = x_q
        .values()
        .iter()
        .map(|&q| (i32::from(q) + INPUT_OFFSET) as u8)
        .collect();
    let mut w_plus = vec![0u8; rows * cols];
    let mut w_minus = vec![0u8; rows * cols];
    let mut offset_correction = vec![0i32; cols];
    for j in 0..cols {
        for i in 0..rows {
            let w = i32::from(w_q.values()[j * rows + i]);
            let cell = i * cols + j;
            if w >= 0 {
                w_plus[cell] = w as u8;
            } else {
                w_minus[cell] = (-w) as u8;
            }
            offset_correction[j] += INPUT_OFFSET * w;
        }
    }
    Ok(SplitInput {
        batch,
        rows,
        cols,
        x_uint8,
        w_plus,
        w_minus,
        offset_correction,
    })
}

#[inline]
pub fn bias_value(bias: f64, scale_x: f64, scale_w: f64) -> f64 {
    (bias / (scale_x * scale_w)).round_ties_even()
}

fn check_scales(scale_x: f64, scale_w: f64) -> Result<()> {
    if scale_x > 0.0 && scale_w > 0.0 {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "scales must be positive, got {scale_x} and {scale_w}"
        )))
    }
}

/// Bias on the integer accumulator axis: `round(bias / (scale_x·scale_w))`.
pub fn quant_bias(bias: &[f64], scale_x: f64, scale_w: f64) -> Result<Vec<i32>> {
    check_scales(scale_x, scale_w)?;
    bias.iter()
        .map(|&b| {
            let v = bias_value(b, scale_x, scale_w);
            if v.is_finite() && v.abs() <= f64::from(i32::MAX) {
                Ok(v as i32)
            } else {
                Err(Error::Range(format!(
                    "bias {b} quantizes to {v}, outside the 32-bit accumulator"
                )))
            }
        })
        .collect()
}

/// `2^(bits-1) - 1`.
pub fn adc_fullscale(adc_bits: u32) -> f64 {
    f64::from((1u32 << (adc_bits - 1)) - 1)
}

#[inline]
pub fn gain_from_max(scale_x: f64, scale_w: f64, max_abs_y: f64, adc_bits: u32) -> f64 {
    adc_fullscale(adc_bits) / (max_abs_y / (scale_x * scale_w)).max(1.0)
}

/// Gain mapping the largest expected integer accumulation onto the ADC
/// full-scale, floored so near-zero outputs do not blow it up.
pub fn compute_gain(scale_x: f64, scale_w: f64, y_clean: &Tensor, adc_bits: u32) -> f64 {
    gain_from_max(scale_x, scale_w, kernels::max_abs(y_clean.data()), adc_bits)
}

#[inline]
pub fn rescale_value(y: f64, gain: f64, scale_x: f64, scale_w: f64) -> f64 {
    y * scale_x * scale_w / gain
}

/// Maps gained crossbar output back to real units: `y·scale_x·scale_w / g`.
pub fn rescale(y_noisy: &Tensor, gain: f64, scale_x: f64, scale_w: f64) -> Tensor {
    let data = y_noisy
        .data()
        .iter()
        .map(|&y| rescale_value(y, gain, scale_x, scale_w))
        .collect();
    Tensor::new(y_noisy.shape(), data).expect("shape preserved")
}

// ----- tape forms -------------------------------------------------------------

/// Quantization scale of `x` as a one-element tensor.
pub(crate) fn scale_on(tape: &mut Tape, x: &Tensor) -> Tensor {
    let idx = kernels::argmax_abs(x.data());
    let top = x.data()[idx];
    let n = x.numel();
    tape.record(&[x], &[1], vec![scale_for(x.data())], move |g| {
        let mut gx = vec![0.0; n];
        if top != 0.0 {
            gx[idx] = g[0] * top.signum() / QMAX;
        }
        vec![Some(gx)]
    })
}

pub(crate) fn quantize_on(
    tape: &mut Tape,
    x: &Tensor,
    scale: &Tensor,
    grad: QuantizerGrad,
) -> Tensor {
    let s = scale.item();
    let data = x.data().iter().map(|&v| quantize_value(v, s)).collect();
    tape.quantizer(&[x, scale], x.shape(), data, grad)
}

pub(crate) fn bias_on(
    tape: &mut Tape,
    bias: &Tensor,
    scale_x: &Tensor,
    scale_w: &Tensor,
    grad: QuantizerGrad,
) -> Result<Tensor> {
    let values = quant_bias(bias.data(), scale_x.item(), scale_w.item())?;
    let data = values.into_iter().map(f64::from).collect();
    Ok(tape.quantizer(&[bias, scale_x, scale_w], bias.shape(), data, grad))
}

pub(crate) fn gain_on(
    tape: &mut Tape,
    scale_x: &Tensor,
    scale_w: &Tensor,
    y_clean: &Tensor,
    adc_bits: u32,
) -> Tensor {
    let (sx, sw) = (scale_x.item(), scale_w.item());
    let idx = kernels::argmax_abs(y_clean.data());
    let top = y_clean.data()[idx];
    let m = top.abs();
    let g = gain_from_max(sx, sw, m, adc_bits);
    let floored = m / (sx * sw) <= 1.0;
    let n = y_clean.numel();
    tape.record(&[scale_x, scale_w, y_clean], &[1], vec![g], move |go| {
        let mut gy = vec![0.0; n];
        if floored {
            return vec![Some(vec![0.0]), Some(vec![0.0]), Some(gy)];
        }
        // g = A·sx·sw / M above the floor
        gy[idx] = -go[0] * g / m * top.signum();
        vec![
            Some(vec![go[0] * g / sx]),
            Some(vec![go[0] * g / sw]),
            Some(gy),
        ]
    })
}

pub(crate) fn rescale_on(
    tape: &mut Tape,
    y: &Tensor,
    gain: &Tensor,
    scale_x: &Tensor,
    scale_w: &Tensor,
) -> Tensor {
    let (g, sx, sw) = (gain.item(), scale_x.item(), scale_w.item());
    let data = y
        .data()
        .iter()
        .map(|&v| rescale_value(v, g, sx, sw))
        .collect();
    let need_scalars = tape.tracks(gain) || tape.tracks(scale_x) || tape.tracks(scale_w);
    let saved = need_scalars.then(|| y.detach());
    tape.record(&[y, gain, scale_x, scale_w], y.shape(), data, move |go| {
        let k = sx * sw / g;
        let gy = go.iter().map(|v| v * k).collect();
        let Some(saved) = saved.as_ref() else {
            return vec![Some(gy), None, None, None];
        };
        let dot: f64 = go.iter().zip(saved.data()).map(|(a, b)| a * b).sum();
        vec![
            Some(gy),
            Some(vec![-dot * sx * sw / (g * g)]),
            Some(vec![dot * sw / g]),
            Some(vec![dot * sx / g]),
        ]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn all_zero_gets_unit_scale() {
        let q = quant_int8(&Tensor::zeros(&[3, 3]).unwrap()).unwrap();
        assert_eq!(q.scale(), 1.0);
        assert!(q.values().iter().all(|&v| v == 0));
    }

    #[test]
    fn small_vector_matches_hand_evaluation() {
        // 0.5 * 127 = 63.5 rounds to even 64
        let q = quant_int8(&tensor(&[3], &[-1.0, 0.5, 1.0])).unwrap();
        assert_eq!(q.scale(), 1.0 / 127.0);
        assert_eq!(q.values(), &[-127, 64, 127]);
    }

    #[test]
    fn non_finite_input_is_a_data_error() {
        assert!(matches!(
            quant_int8(&tensor(&[2], &[1.0, f64::NAN])),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            quant_int8(&tensor(&[1], &[f64::INFINITY])),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn split_single_cell() {
        let x = QuantizedTensor::new(&[1], vec![0], 1.0).unwrap();
        let w = QuantizedTensor::new(&[1, 1], vec![5], 1.0).unwrap();
        let s = split_input(&x, &w).unwrap();
        assert_eq!(s.x_uint8, vec![128]);
        assert_eq!(s.w_plus, vec![5]);
        assert_eq!(s.w_minus, vec![0]);
        assert_eq!(s.offset_correction, vec![640]);

        let w = QuantizedTensor::new(&[1, 1], vec![-3], 1.0).unwrap();
        let s = split_input(&x, &w).unwrap();
        assert_eq!((s.w_plus[0], s.w_minus[0]), (0, 3));
    }

    #[test]
    fn split_rejects_mismatched_shapes() {
        let x = QuantizedTensor::new(&[2, 3], vec![0; 6], 1.0).unwrap();
        let w = QuantizedTensor::new(&[4, 2], vec![0; 8], 1.0).unwrap();
        assert!(split_input(&x, &w).is_err());
    }

    #[test]
    fn bias_quantization() {
        assert_eq!(quant_bias(&[0.0], 0.3, 0.7).unwrap(), vec![0]);
        assert_eq!(quant_bias(&[1.0], 0.1, 0.1).unwrap(), vec![100]);
        assert!(matches!(
            quant_bias(&[1e300], 1e-3, 1e-3),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            quant_bias(&[1.0], 0.0, 1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn gain_cases() {
        let zero = Tensor::zeros(&[2, 2]).unwrap();
        assert_eq!(compute_gain(0.1, 0.1, &zero, 8), 127.0);
        // max|y| / (sx·sw) = 127 maps exactly onto full-scale
        let y = tensor(&[1], &[127.0 * 0.5 * 0.25]);
        assert_eq!(compute_gain(0.5, 0.25, &y, 8), 1.0);
        let y2 = tensor(&[1], &[2.0 * 127.0 * 0.5 * 0.25]);
        assert_eq!(compute_gain(0.5, 0.25, &y2, 8), 0.5);
    }

    #[test]
    fn rescale_zero_is_zero() {
        let y = Tensor::zeros(&[2, 3]).unwrap();
        assert!(rescale(&y, 3.0, 0.2, 0.4).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adc_fullscale_values() {
        assert_eq!(adc_fullscale(8), 127.0);
        assert_eq!(adc_fullscale(2), 1.0);
        assert_eq!(adc_fullscale(16), 32767.0);
    }
}
