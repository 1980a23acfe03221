use std::fs;

use otc_core::corpus::{generate_corpus, CorpusConfig, CorpusSplit, Example};
use otc_core::encoder::{Model, PaddedBatch};
use otc_core::eval_stats::{emit_reports, evaluate};
use otc_core::par::ExecMode;
use otc_core::sampler::plan;
use otc_core::sweep::{run_sweep, OtcSetting, SweepSpec};
use otc_core::tensor::{ParamSet, Tensor};
use otc_core::trainer::{
    adamw_step, batch_objective, train_on, AdamWConfig, OptimizerState, RunConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_corpus(k: usize, groups: usize) -> CorpusSplit {
    generate_corpus(&CorpusConfig {
        num_languages: k,
        groups_per_language: groups,
        test_groups_per_language: 50,
        probe_groups_per_language: 10,
        ..Default::default()
    })
    .unwrap()
    .split
}

fn config(epochs: usize) -> RunConfig {
    RunConfig {
        epochs,
        ..RunConfig::desk_scale()
    }
}

#[test]
fn training_is_deterministic() {
    let c = small_corpus(2, 100);
    let a = train_on(&c, &config(2), None).unwrap();
    let b = train_on(&c, &config(2), None).unwrap();
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.metrics, b.metrics);
    let other = train_on(
        &c,
        &RunConfig {
            seed: 1,
            ..config(2)
        },
        None,
    )
    .unwrap();
    assert_ne!(a.model.params, other.model.params);
}

#[test]
fn losses_fall_during_training() {
    let c = small_corpus(2, 200);
    let out = train_on(&c, &config(5), None).unwrap();
    let last = out.last_epoch();
    assert_eq!(last, 5);
    let ce = out.epoch_mean(last, |m| m.loss_ce).unwrap();
    assert!(ce < 5f64.ln(), "final CE {ce}");
    let otc_first = out.epoch_mean(1, |m| m.loss_otc).unwrap();
    let otc_last = out.epoch_mean(last, |m| m.loss_otc).unwrap();
    assert!(otc_last < otc_first, "{otc_first} -> {otc_last}");
    assert!(out
        .metrics
        .iter()
        .all(|m| m.loss_total.is_finite() && m.tau > 0.0));
}

#[test]
fn alpha_is_inert_without_otc() {
    let c = small_corpus(2, 50);
    let off = |alpha| RunConfig {
        use_otc: false,
        alpha_otc: alpha,
        ..config(1)
    };
    let a = train_on(&c, &off(0.4), None).unwrap();
    let b = train_on(&c, &off(3.0), None).unwrap();
    assert_eq!(a.model.params, b.model.params);
    assert!(a
        .metrics
        .iter()
        .all(|m| m.loss_otc == 0.0 && m.loss_total == m.loss_ce));
}

#[test]
fn adamw_matches_scalar_recurrence() {
    let cfg = AdamWConfig::default();
    let mut p = ParamSet::new();
    let id = p.insert("w", Tensor::scalar(0.5)).unwrap();
    let mut state = OptimizerState::new(&p, cfg);
    let grads_seq = [0.3, -1.2, 0.05, 2.0, -0.7, 0.0, 0.9];
    let lrs = [1e-3, 2e-3, 3e-3, 3e-3, 2.5e-3, 1e-3, 5e-4];
    let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
    for (t, (&g, &lr)) in grads_seq.iter().zip(&lrs).enumerate() {
        let mut grads = otc_core::tensor::Gradients::zeros_like(&p);
        grads.get_mut(id).data_mut()[0] = g;
        adamw_step(&mut p, &grads, &mut state, lr).unwrap();

        let t = (t + 1) as i32;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let m_hat = m / (1.0 - 0.9f64.powi(t));
        let v_hat = v / (1.0 - 0.999f64.powi(t));
        w -= lr * (m_hat / (v_hat.sqrt() + 1e-8) + 0.01 * w);
        assert!((p.get(id).item().unwrap() - w).abs() < 1e-12);
    }
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn mean_ce(rows: &[Vec<f64>], targets: &[usize]) -> f64 {
    rows.iter()
        .zip(targets)
        .map(|(r, &t)| -softmax(r)[t].max(1e-12).ln())
        .sum::<f64>()
        / rows.len() as f64
}

#[test]
fn objective_matches_standalone_recomputation() {
    let c = small_corpus(3, 50);
    let cfg = config(1);
    let model = Model::init_aligned(&cfg.resolved_model(&c).unwrap(), 3, &c.alignment).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batches = plan(&c, &cfg.sampler(), &mut rng).unwrap();
    for batch in batches.iter().take(3) {
        let obj = batch_objective(&model, batch, &cfg.otc(), None).unwrap();

        let rows = batch.rows();
        assert_eq!(rows.len(), 32);
        let seqs: Vec<&[u32]> = rows.iter().map(|e| e.tokens.as_slice()).collect();
        let out = model
            .predict(&PaddedBatch::new(&seqs, None).unwrap())
            .unwrap();
        let classes: Vec<usize> = rows.iter().map(|e| e.class()).collect();
        let ce = mean_ce(&out.logits.to_rows(), &classes);

        let z = out.cls_normalized.to_rows();
        let (o, t) = z.split_at(16);
        let tau = model.tau();
        let s: Vec<Vec<f64>> = o
            .iter()
            .map(|a| {
                t.iter()
                    .map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / tau)
                    .collect()
            })
            .collect();
        let st: Vec<Vec<f64>> = (0..16)
            .map(|j| (0..16).map(|i| s[i][j]).collect())
            .collect();
        let diag: Vec<usize> = (0..16).collect();
        let otc = 0.4 * 0.5 * (mean_ce(&s, &diag) + mean_ce(&st, &diag));

        assert!((obj.loss_ce - ce).abs() < 1e-10, "{} vs {ce}", obj.loss_ce);
        assert!(
            (obj.loss_otc - otc).abs() < 1e-10,
            "{} vs {otc}",
            obj.loss_otc
        );
        assert!((obj.loss_total - (ce + otc)).abs() < 1e-10);
    }
}

#[test]
fn untrained_model_is_near_chance() {
    let c = generate_corpus(&CorpusConfig {
        test_groups_per_language: 400,
        ..Default::default()
    })
    .unwrap()
    .split;
    let model = Model::init(&config(1).resolved_model(&c).unwrap(), 0).unwrap();
    for m in evaluate(&model, &c.test, ExecMode::Sequential).unwrap() {
        assert_eq!(m.n_examples, 400);
        assert!(
            (m.f1_micro - 0.2).abs() < 0.08,
            "{}: {}",
            m.language,
            m.f1_micro
        );
    }
}

#[test]
fn trained_language_beats_an_unseen_one() {
    let c = small_corpus(2, 300);
    let cfg = RunConfig {
        baseline: true,
        use_otc: false,
        ..config(8)
    };
    let out = train_on(&c, &cfg, None).unwrap();
    let m = evaluate(&out.model, &c.test, ExecMode::Sequential).unwrap();
    let f1 = |l: &str| m.iter().find(|x| x.language == l).unwrap().f1_micro;
    assert!(
        f1("en") > f1("fr") + 0.05,
        "en {} fr {}",
        f1("en"),
        f1("fr")
    );
}

#[test]
fn duplicated_test_set_scores_the_same() {
    let c = small_corpus(2, 50);
    let out = train_on(&c, &config(1), None).unwrap();
    let once = evaluate(&out.model, &c.test, ExecMode::Parallel).unwrap();
    let doubled: Vec<Example> = c.test.iter().chain(&c.test).cloned().collect();
    let twice = evaluate(&out.model, &doubled, ExecMode::Sequential).unwrap();
    for (a, b) in once.iter().zip(&twice) {
        assert_eq!(a.f1_micro, b.f1_micro);
        assert_eq!(2 * a.n_examples, b.n_examples);
    }
}

#[test]
fn sweep_resumes_and_reports_are_reproducible() {
    let c = small_corpus(2, 50);
    let dir = tempfile::tempdir().unwrap();
    let spec = SweepSpec {
        languages: vec!["en".into(), "fr".into()],
        otc: OtcSetting::Both,
        seeds: vec![0, 1, 2],
        baseline: true,
        base: config(1),
    };
    let first = run_sweep(&c, &spec, dir.path(), ExecMode::Parallel).unwrap();
    assert_eq!(first.trained.len(), 18);
    let again = run_sweep(&c, &spec, dir.path(), ExecMode::Sequential).unwrap();
    assert!(again.trained.is_empty());
    assert_eq!(again.skipped.len(), 18);
    assert_eq!(first.results, again.results);

    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    let a = emit_reports(&first.results, &r1).unwrap();
    let mut reversed = first.results.clone();
    reversed.reverse();
    let b = emit_reports(&reversed, &r2).unwrap();
    assert_eq!(a.written.len(), b.written.len());
    for (x, y) in a.written.iter().zip(&b.written) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{x:?}");
    }
    assert!(a
        .tables
        .table1
        .cells
        .iter()
        .flatten()
        .all(|cell| cell.mean.is_some()));
}
