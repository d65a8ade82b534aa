//! Small built-in datasets: two interleaved spirals, and next-character
//! prediction over a bundled text.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Public-domain English verse and prose, about 50 KB.
pub const BUNDLED_CORPUS: &[u8] = include_bytes!("../../data/corpus.txt");

pub const SPIRAL_TRAIN: usize = 1024;
pub const SPIRAL_TEST: usize = 256;
const SPIRAL_TURNS: f64 = 1.25;
const SPIRAL_JITTER: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Spirals,
    Chars,
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Spirals => "spirals",
            DatasetKind::Chars => "chars",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spirals" => Ok(DatasetKind::Spirals),
            "chars" => Ok(DatasetKind::Chars),
            _ => Err(Error::Config(format!(
                "unknown dataset {s:?} (expected spirals or chars)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
enum Features {
    Dense {
        dim: usize,
        data: Vec<f64>,
    },
    /// One-hot context windows built on demand from token ids.
    Windows {
        tokens: Vec<u16>,
        offsets: Vec<usize>,
        context: usize,
        vocab: usize,
    },
}

/// Inputs and integer targets of one split.
#[derive(Clone, Debug)]
pub struct Split {
    features: Features,
    labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn input_dim(&self) -> usize {
        match &self.features {
            Features::Dense { dim, .. } => *dim,
            Features::Windows { context, vocab, .. } => context * vocab,
        }
    }

    /// Dense feature row `i`.
    pub fn row(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.input_dim()];
        self.fill_row(i, &mut out);
        out
    }

    fn fill_row(&self, i: usize, out: &mut [f64]) {
        match &self.features {
            Features::Dense { dim, data } => out.copy_from_slice(&data[i * dim..(i + 1) * dim]),
            Features::Windows {
                tokens,
                offsets,
                context,
                vocab,
            } => {
                out.fill(0.0);
                let start = offsets[i];
                for (k, &tok) in tokens[start..start + context].iter().enumerate() {
                    out[k * vocab + usize::from(tok)] = 1.0;
                }
            }
        }
    }

    /// Inputs `[n × dim]` and labels for the given example indices.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let dim = self.input_dim();
        let mut data = vec![0.0; idx.len() * dim];
        for (row, &i) in data.chunks_mut(dim).zip(idx) {
            self.fill_row(i, row);
        }
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::new(&[idx.len(), dim], data).expect("non-empty batch"),
            labels,
        )
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub classes: usize,
    pub train: Split,
    pub test: Split,
    /// Byte value of each token id (chars only).
    pub vocab: Vec<u8>,
}

impl Dataset {
    pub fn input_dim(&self) -> usize {
        self.train.input_dim()
    }
}

#[derive(Clone, Debug, Default)]
pub struct DataOptions {
    /// Context window for `chars`.
    pub context: usize,
    /// Text for `chars`; the bundled corpus when `None`.
    pub corpus: Option<PathBuf>,
}

pub fn make_dataset(kind: DatasetKind, seed: u64, opts: &DataOptions) -> Result<Dataset> {
    match kind {
        DatasetKind::Spirals => Ok(spirals(seed)),
        DatasetKind::Chars => {
            let text = match &opts.corpus {
                Some(path) => read_corpus(path)?,
                None => BUNDLED_CORPUS.to_vec(),
            };
            chars(&text, opts.context.max(1))
        }
    }
}

fn read_corpus(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn spiral_points(n: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<usize>) {
    let unit = Uniform::new(0.0, 1.0);
    let jitter = Normal::new(0.0, SPIRAL_JITTER).expect("positive std");
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let class = k % 2;
        let t: f64 = unit.sample(rng);
        let r = 0.1 + 0.9 * t;
        let theta = t * SPIRAL_TURNS * 2.0 * PI + class as f64 * PI;
        data.push(r * theta.cos() + jitter.sample(rng));
        data.push(r * theta.sin() + jitter.sample(rng));
        labels.push(class);
    }
    (data, labels)
}

/// Two interleaved spirals in the unit disc, classes alternating.
pub fn spirals(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train_x, train_y) = spiral_points(SPIRAL_TRAIN, &mut rng);
    let (test_x, test_y) = spiral_points(SPIRAL_TEST, &mut rng);
    Dataset {
        kind: DatasetKind::Spirals,
        classes: 2,
        train: Split {
            features: Features::Dense {
                dim: 2,
                data: train_x,
            },
            labels: train_y,
        },
        test: Split {
            features: Features::Dense {
                dim: 2,
                data: test_x,
            },
            labels: test_y,
        },
        vocab: Vec::new(),
    }
}

/// Next-byte prediction. The last tenth of the text is held out.
pub fn chars(text: &[u8], context: usize) -> Result<Dataset> {
    let vocab: Vec<u8> = text
        .iter()
        .copied()
        .collect::<BTreeSet<u8>>()
        .into_iter()
        .collect();
    let mut id = [0u16; 256];
    for (i, &b) in vocab.iter().enumerate() {
        id[usize::from(b)] = i as u16;
    }
    let tokens: Vec<u16> = text.iter().map(|&b| id[usize::from(b)]).collect();
    let windows = tokens.len().saturating_sub(context);
    let cut = windows * 9 / 10;
    // held-out windows start after the last training target
    let test_start = cut + context;
    if cut == 0 || test_start >= windows {
        return Err(Error::Data(format!(
            "text of {} bytes is too short for context {context}",
            text.len()
        )));
    }
    let split = |range: std::ops::Range<usize>| Split {
        labels: range
            .clone()
            .map(|i| usize::from(tokens[i + context]))
            .collect(),
        features: Features::Windows {
            tokens: tokens.clone(),
            offsets: range.collect(),
            context,
            vocab: vocab.len(),
        },
    };
    Ok(Dataset {
        kind: DatasetKind::Chars,
        classes: vocab.len(),
        train: split(0..cut),
        test: split(test_start..windows),
        vocab,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spirals_are_seeded_and_balanced() {
        let a = spirals(3);
        let b = spirals(3);
        assert_eq!(a.train.row(17), b.train.row(17));
        assert_ne!(a.train.row(17), spirals(4).train.row(17));
        assert_eq!(a.train.len(), 1024);
        assert_eq!(a.test.len(), 256);
        assert_eq!(a.train.labels().iter().filter(|&&l| l == 1).count(), 512);
    }

    #[test]
    fn char_windows_are_one_hot() {
        let d = chars(&b"abc".repeat(20), 3).unwrap();
        assert_eq!(d.classes, 3);
        assert_eq!(d.input_dim(), 9);
        let (x, y) = d.train.batch(&[0, 1]);
        assert_eq!(&x.data()[..9], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        assert_eq!(y, vec![0, 1]);
    }

    #[test]
    fn short_text_is_rejected() {
        assert!(chars(b"abc", 16).is_err());
    }

    #[test]
    fn missing_corpus_names_the_path() {
        let opts = DataOptions {
            context: 4,
            corpus: Some("/nonexistent/corpus.txt".into()),
        };
        let err = make_dataset(DatasetKind::Chars, 0, &opts).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/corpus.txt"), "{err}");
    }
}
