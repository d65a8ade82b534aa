use cimste::train::{self, checkpoint, data, AdamParams, AdamState, DatasetKind, SplitKind};
use cimste::{Config, GradMode, Tape, Tensor};

fn small(steps: u64) -> Config {
    let mut c = Config::default();
    c.train.steps = steps;
    c.train.eval_interval = 25;
    c.train.batch_size = 32;
    c.model.hidden = vec![16, 16];
    c
}

#[test]
fn adam_follows_scalar_recomputation_for_ten_steps() {
    let target = [0.5, -1.25, 3.0];
    let start = [2.0, 0.0, -1.0];
    let hyper = AdamParams {
        alpha: 0.05,
        ..AdamParams::default()
    };
    let mut w = Tensor::param(&[3], start.to_vec()).unwrap();
    let mut opt = AdamState::new([&w], hyper);

    let mut rw = start;
    let (mut rm, mut rv) = ([0.0f64; 3], [0.0f64; 3]);
    for t in 1..=10 {
        w.zero_grad();
        let mut tape = Tape::new();
        let c = tape.constant(&[3], target.to_vec());
        let d = tape.sub(&w, &c).unwrap();
        let sq = tape.mul(&d, &d).unwrap();
        let loss = tape.sum(&sq);
        tape.backward(&loss).unwrap();
        drop(tape);
        opt.step(vec![("w".into(), &mut w)]).unwrap();

        for k in 0..3 {
            let g = 2.0 * (rw[k] - target[k]);
            rm[k] = hyper.beta1 * rm[k] + (1.0 - hyper.beta1) * g;
            rv[k] = hyper.beta2 * rv[k] + (1.0 - hyper.beta2) * g * g;
            let m_hat = rm[k] / (1.0 - hyper.beta1.powi(t));
            let v_hat = rv[k] / (1.0 - hyper.beta2.powi(t));
            rw[k] -= hyper.alpha * m_hat / (v_hat.sqrt() + hyper.epsilon);
        }
        let got: Vec<u64> = w.data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = rw.iter().map(|v| v.to_bits()).collect();
        assert_eq!(got, want, "step {t}");
    }
}

#[test]
fn chars_vocabulary_is_the_set_of_distinct_bytes() {
    let mut seen = [false; 256];
    for &b in data::BUNDLED_CORPUS {
        seen[usize::from(b)] = true;
    }
    let distinct = seen.iter().filter(|&&s| s).count();
    let ds = data::make_dataset(DatasetKind::Chars, 0, &data::DataOptions {
        context: 8,
        corpus: None,
    })
    .unwrap();
    assert_eq!(ds.classes, distinct);
    assert_eq!(ds.vocab.len(), distinct);
    assert!(ds.vocab.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn spirals_are_balanced() {
    let ds = data::spirals(3);
    let ones = ds.train.labels().iter().filter(|&&l| l == 1).count();
    assert_eq!((ds.train.len(), ones), (1024, 512));
}

#[test]
fn identical_configs_give_identical_logs() {
    let mut c = small(60);
    c.train.grad_mode = GradMode::Detached;
    c.noise.level = 2.0;
    let a = train::run_experiment(&c).unwrap();
    let b = train::run_experiment(&c).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    c.train.seed += 1;
    assert_ne!(train::run_experiment(&c).unwrap().to_csv(), a.to_csv());
}

#[test]
fn zero_steps_logs_only_the_initial_evaluation() {
    let log = train::run_experiment(&small(0)).unwrap();
    assert!(log.rows.iter().all(|r| r.step == 0));
    assert_eq!(log.rows_of(SplitKind::Eval).count(), 1);
}

#[test]
fn level_zero_sweep_has_no_gap() {
    let sweep = train::noise_sweep(&small(50), &[0.0], 2).unwrap();
    assert_eq!(sweep.runs.len(), 2);
    assert_eq!(sweep.summary[0].delta, 0.0);
}

#[test]
fn char_model_reports_perplexity_of_its_loss() {
    let mut c = small(20);
    c.train.dataset = DatasetKind::Chars;
    c.train.eval_samples = 300;
    let log = train::run_experiment(&c).unwrap();
    for r in &log.rows {
        assert!((r.perplexity - r.loss.exp()).abs() <= 1e-12 * r.perplexity);
    }
}

#[test]
fn checkpoint_restores_the_trained_weights() {
    let run = train::train(&small(30)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &run.model.parameters()).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    let saved = run.model.parameters();
    assert_eq!(loaded.len(), saved.len());
    for ((ln, lt), (sn, st)) in loaded.iter().zip(&saved) {
        assert_eq!(ln, sn);
        assert_eq!(lt.shape(), st.shape());
        assert_eq!(lt.data(), st.data());
    }
}

#[test]
fn noise_injected_spirals_reach_calibrated_accuracy_at_level_one() {
    let mut c = Config::default();
    c.train.grad_mode = GradMode::Detached;
    c.noise.level = 1.0;
    let log = train::run_experiment(&c).unwrap();
    let acc = log.last(SplitKind::Eval).unwrap().accuracy;
    assert!(acc >= 0.90, "final noisy accuracy {acc}");
}
