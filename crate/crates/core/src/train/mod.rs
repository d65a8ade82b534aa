//! Training harness: optimizer, loss, datasets, the training loop with
//! periodic noisy and clean evaluation, and the noise-level sweep.

pub mod adam;
pub mod checkpoint;
pub mod data;
pub mod loss;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::noise::stream::hash_key;
use crate::noise::NoiseConfig;
use crate::ste::{GradMode, Mlp};
use crate::tensor::Tape;

pub use adam::{AdamParams, AdamState};
pub use data::{make_dataset, DataOptions, Dataset, DatasetKind};
pub use loss::cross_entropy;

pub const CSV_HEADER: &str = "step,split,level,mode,loss,accuracy,perplexity,wall_ms,tape_nodes";

/// Counter namespaces keeping evaluation draws apart from training draws.
const EVAL_NS: u64 = 1 << 63;
const TRAIN_EVAL_NS: u64 = 1 << 62;
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    /// Training set under the training-time forward.
    Train,
    /// Held-out set with noise on, averaged over redraws.
    Eval,
    /// Held-out set with noise off.
    EvalClean,
}

impl SplitKind {
    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Eval => "eval",
            SplitKind::EvalClean => "eval_clean",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub split: SplitKind,
    pub level: f64,
    pub mode: GradMode,
    pub loss: f64,
    pub accuracy: f64,
    pub perplexity: f64,
    pub wall_ms: f64,
    pub tape_nodes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum RunStatus {
    Completed,
    Diverged { step: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
    pub status: RunStatus,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.step,
                r.split.name(),
                r.level,
                r.mode,
                r.loss,
                r.accuracy,
                r.perplexity,
                r.wall_ms,
                r.tape_nodes
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn rows_of(&self, split: SplitKind) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn first(&self, split: SplitKind) -> Option<&MetricsRow> {
        self.rows_of(split).next()
    }

    pub fn last(&self, split: SplitKind) -> Option<&MetricsRow> {
        self.rows_of(split).last()
    }
}

/// Result of one training run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub model: Mlp,
    pub log: MetricsLog,
}

struct EvalStats {
    loss: f64,
    accuracy: f64,
}

/// Mean loss and accuracy of `model` on the first `limit` examples of a
/// split, one forward pass per chunk with recording off.
fn evaluate(
    model: &Mlp,
    split: &data::Split,
    limit: usize,
    noise: Option<&NoiseConfig>,
    step: u64,
) -> Result<EvalStats> {
    let n = split.len().min(limit.max(1));
    let mut tape = Tape::new();
    let mode = if noise.is_some() {
        GradMode::Isolated
    } else {
        GradMode::Baseline
    };
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = split.batch(chunk);
        let (loss, logits) = tape.grad_scope(false, |t| -> Result<_> {
            let logits = model.forward(t, &x, noise, mode, step)?;
            Ok((cross_entropy(t, &logits, &y)?, logits))
        })?;
        loss_sum += loss.item() * chunk.len() as f64;
        correct += loss::argmax_rows(&logits)
            .iter()
            .zip(&y)
            .filter(|(p, t)| p == t)
            .count();
    }
    Ok(EvalStats {
        loss: loss_sum / n as f64,
        accuracy: correct as f64 / n as f64,
    })
}

/// Trains the configured model and returns it with its metrics.
pub fn train(cfg: &Config) -> Result<RunOutput> {
    cfg.validate()?;
    let tc = &cfg.train;
    let data = make_dataset(
        tc.dataset,
        tc.seed,
        &DataOptions {
            context: tc.context,
            corpus: tc.corpus.clone(),
        },
    )?;
    let mut sizes = vec![data.input_dim()];
    sizes.extend(&cfg.model.hidden);
    sizes.push(data.classes);
    let mut model = Mlp::new(&sizes, hash_key(tc.seed, &[1]))?;
    let mut opt = AdamState::new(model.parameters().into_iter().map(|(_, p)| p), tc.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(hash_key(tc.seed, &[2]));

    let noise = cfg.run_noise();
    let level = noise.level;
    let noisy = cfg.noise_active();
    let eval_noise = noisy.then_some(&noise);
    let train_noise = (noisy && tc.grad_mode != GradMode::Baseline).then_some(&noise);
    let mode = tc.grad_mode;

    let mut train_ms = 0.0;
    let mut nodes;
    let mut rows = Vec::new();
    let log_point = |step: u64,
                     model: &Mlp,
                     train_ms: f64,
                     nodes: usize,
                     rows: &mut Vec<MetricsRow>|
     -> Result<()> {
        let wall_ms = if tc.wall_time { train_ms } else { 0.0 };
        let mut push = |split, s: EvalStats| {
            rows.push(MetricsRow {
                step,
                split,
                level,
                mode,
                loss: s.loss,
                accuracy: s.accuracy,
                perplexity: s.loss.exp(),
                wall_ms,
                tape_nodes: nodes,
            })
        };
        let tr = evaluate(
            model,
            &data.train,
            tc.eval_samples,
            train_noise,
            TRAIN_EVAL_NS | step,
        )?;
        push(SplitKind::Train, tr);
        let redraws = if eval_noise.is_some() {
            tc.eval_redraws.max(1)
        } else {
            1
        };
        let (mut l, mut a) = (0.0, 0.0);
        for r in 0..redraws {
            let s = evaluate(
                model,
                &data.test,
                tc.eval_samples,
                eval_noise,
                EVAL_NS | (step << 8) | r as u64,
            )?;
            l += s.loss;
            a += s.accuracy;
        }
        push(
            SplitKind::Eval,
            EvalStats {
                loss: l / redraws as f64,
                accuracy: a / redraws as f64,
            },
        );
        let clean = evaluate(model, &data.test, tc.eval_samples, None, 0)?;
        push(SplitKind::EvalClean, clean);
        Ok(())
    };

    log_point(0, &model, 0.0, 0, &mut rows)?;
    let mut status = RunStatus::Completed;
    let n = data.train.len();
    for step in 1..=tc.steps {
        let t0 = tc.wall_time.then(Instant::now);
        let idx: Vec<usize> = (0..tc.batch_size).map(|_| rng.gen_range(0..n)).collect();
        let (x, y) = data.train.batch(&idx);
        let mut tape = Tape::new();
        let logits = model.forward(&mut tape, &x, train_noise, mode, step)?;
        let loss = cross_entropy(&mut tape, &logits, &y)?;
        if !loss.item().is_finite() {
            rows.push(MetricsRow {
                step,
                split: SplitKind::Train,
                level,
                mode,
                loss: loss.item(),
                accuracy: f64::NAN,
                perplexity: f64::NAN,
                wall_ms: if tc.wall_time { train_ms } else { 0.0 },
                tape_nodes: tape.peak_len(),
            });
            status = RunStatus::Diverged { step };
            break;
        }
        model.zero_grad();
        tape.backward(&loss)?;
        nodes = tape.peak_len();
        drop(tape);
        opt.step(model.parameters_mut())?;
        if let Some(t0) = t0 {
            train_ms += t0.elapsed().as_secs_f64() * 1e3;
        }
        if step % tc.eval_interval == 0 || step == tc.steps {
            log_point(step, &model, train_ms, nodes, &mut rows)?;
        }
    }
    Ok(RunOutput {
        model,
        log: MetricsLog { rows, status },
    })
}

/// Trains per `cfg` and returns the metrics.
pub fn run_experiment(cfg: &Config) -> Result<MetricsLog> {
    Ok(train(cfg)?.log)
}

/// One run of a sweep.
#[derive(Clone, Debug)]
pub struct SweepRun {
    pub level: f64,
    pub mode: GradMode,
    pub log: MetricsLog,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepSummary {
    pub level: f64,
    /// Final noisy-eval accuracy of the model trained without noise.
    pub clean_trained_accuracy: f64,
    /// Final noisy-eval accuracy of the model trained with noise injection.
    pub ste_accuracy: f64,
    pub delta: f64,
}

#[derive(Clone, Debug)]
pub struct Sweep {
    pub runs: Vec<SweepRun>,
    pub summary: Vec<SweepSummary>,
}

impl Sweep {
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("level,clean_trained_accuracy,ste_accuracy,delta\n");
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.level, r.clean_trained_accuracy, r.ste_accuracy, r.delta
            );
        }
        s
    }
}

/// Modes compared by the sweep: clean training, then noise-injected
/// training.
pub const SWEEP_MODES: [GradMode; 2] = [GradMode::Baseline, GradMode::Detached];

fn final_eval_accuracy(log: &MetricsLog) -> f64 {
    log.last(SplitKind::Eval).map_or(f64::NAN, |r| r.accuracy)
}

/// For every level, trains one model without noise and one with noise
/// injection and evaluates both under noise at that level. Runs are spread
/// over `jobs` threads.
pub fn noise_sweep(cfg: &Config, levels: &[f64], jobs: usize) -> Result<Sweep> {
    if levels.is_empty() {
        return Err(Error::Config("sweep needs at least one noise level".into()));
    }
    let plan: Vec<(f64, GradMode)> = levels
        .iter()
        .flat_map(|&l| SWEEP_MODES.map(|m| (l, m)))
        .collect();
    let configs: Vec<Config> = plan
        .iter()
        .map(|&(level, mode)| {
            let mut c = cfg.clone();
            c.noise.level = level;
            c.train.grad_mode = mode;
            c.validate().map(|_| c)
        })
        .collect::<Result<_>>()?;

    let jobs = jobs.max(1).min(configs.len());
    let mut logs: Vec<Option<Result<MetricsLog>>> = (0..configs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let configs = &configs;
                scope.spawn(move || {
                    (j..configs.len())
                        .step_by(jobs)
                        .map(|i| (i, run_experiment(&configs[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("sweep worker panicked") {
                logs[i] = Some(r);
            }
        }
    });

    let mut runs = Vec::with_capacity(plan.len());
    for ((level, mode), log) in plan.into_iter().zip(logs) {
        runs.push(SweepRun {
            level,
            mode,
            log: log.expect("every run scheduled")?,
        });
    }
    let summary = runs
        .chunks(SWEEP_MODES.len())
        .map(|pair| {
            let clean = final_eval_accuracy(&pair[0].log);
            let ste = final_eval_accuracy(&pair[1].log);
            SweepSummary {
                level: pair[0].level,
                clean_trained_accuracy: clean,
                ste_accuracy: ste,
                delta: ste - clean,
            }
        })
        .collect();
    Ok(Sweep { runs, summary })
}

/// File name of a sweep run's metrics.
pub fn sweep_run_file(level: f64, mode: GradMode) -> PathBuf {
    PathBuf::from(format!("metrics_level{level}_{mode}.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Config {
        let mut c = Config::default();
        c.train.steps = 20;
        c.train.eval_interval = 10;
        c.train.batch_size = 16;
        c.model.hidden = vec![8];
        c
    }

    #[test]
    fn zero_steps_gives_only_the_initial_point() {
        let mut c = tiny();
        c.train.steps = 0;
        let log = run_experiment(&c).unwrap();
        assert_eq!(log.rows.len(), 3);
        assert!(log.rows.iter().all(|r| r.step == 0));
    }

    #[test]
    fn rows_per_eval_point() {
        let log = run_experiment(&tiny()).unwrap();
        let steps: Vec<u64> = log.rows_of(SplitKind::Eval).map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 10, 20]);
        assert_eq!(log.status, RunStatus::Completed);
        for r in &log.rows {
            assert_eq!(r.perplexity, r.loss.exp());
        }
    }

    #[test]
    fn csv_has_header_and_one_line_per_row() {
        let log = run_experiment(&tiny()).unwrap();
        let csv = log.to_csv();
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), log.rows.len() + 1);
    }

    #[test]
    fn sweep_shape() {
        let mut c = tiny();
        c.train.steps = 5;
        let s = noise_sweep(&c, &[1.0, 2.0], 2).unwrap();
        assert_eq!(s.runs.len(), 4);
        assert_eq!(s.summary.len(), 2);
        assert!(noise_sweep(&c, &[], 1).is_err());
    }
}
