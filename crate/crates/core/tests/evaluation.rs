use otc_core::eval_stats::{
    f1_micro, paired_permutation_test, retrieval_accuracy, sign_flip_test, ConfusionMatrix,
};
use otc_core::loss::pairing_distributions;
use otc_core::tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

fn normalize(rows: &mut [Vec<f64>]) {
    for r in rows {
        let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        r.iter_mut().for_each(|x| *x /= n);
    }
}

/// Orthonormal basis from Gram-Schmidt on Gaussian vectors.
fn random_orthonormal(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    for mut v in gaussian(d, d, rng) {
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        normalize(std::slice::from_mut(&mut v));
        basis.push(v);
    }
    basis
}

fn rotate(rows: &[Vec<f64>], q: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            (0..q.len())
                .map(|j| r.iter().zip(&q[j]).map(|(x, y)| x * y).sum())
                .collect()
        })
        .collect()
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

proptest! {
    #[test]
    fn single_label_micro_f1_is_accuracy(counts in prop::collection::vec(0u64..50, 25)) {
        prop_assume!(counts.iter().sum::<u64>() > 0);
        let mut cm = ConfusionMatrix::default();
        for (i, c) in counts.iter().enumerate() {
            cm.counts[i / 5][i % 5] = *c;
        }
        prop_assert!((cm.f1_micro().unwrap() - cm.accuracy().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn retrieval_ignores_a_shared_rotation(seed in any::<u64>(), m in 2usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut o = gaussian(m, 8, &mut rng);
        let mut t = gaussian(m, 8, &mut rng);
        normalize(&mut o);
        normalize(&mut t);
        let q = random_orthonormal(8, &mut rng);
        let plain = retrieval_accuracy(&tensor(&o), &tensor(&t)).unwrap();
        let rotated = retrieval_accuracy(&tensor(&rotate(&o, &q)), &tensor(&rotate(&t, &q))).unwrap();
        prop_assert_eq!(plain, rotated);
    }

    #[test]
    fn retrieval_of_a_permutation_counts_fixed_points(seed in any::<u64>(), m in 2usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = random_orthonormal(16, &mut rng);
        let o: Vec<Vec<f64>> = basis[..m].to_vec();
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let t: Vec<Vec<f64>> = perm.iter().map(|&p| o[p].clone()).collect();
        let fixed = perm.iter().enumerate().filter(|(i, p)| i == *p).count();
        let acc = retrieval_accuracy(&tensor(&o), &tensor(&t)).unwrap();
        prop_assert!((acc - fixed as f64 / m as f64).abs() < 1e-12);
    }

    #[test]
    fn permutation_test_matches_sign_flip_on_differences(
        pairs in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 5..14),
        seed in any::<u64>(),
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let p = paired_permutation_test(&a, &b, seed).unwrap();
        let s = sign_flip_test(&d, seed, 0).unwrap();
        prop_assert_eq!(p.p_value, s.p_value);
        prop_assert!(p.p_value > 0.0 && p.p_value <= 1.0);
    }
}

#[test]
fn pairing_distributions_are_row_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let m = rng.gen_range(1..12);
        let s: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let tau: f64 = rng.gen_range(0.01..2.0);
        let mut tape = Tape::new();
        let sv = tape.constant(tensor(&s));
        let lt = tape.constant(Tensor::scalar(tau.ln()));
        let d = pairing_distributions(&mut tape, sv, lt).unwrap();
        for p in [tape.value(d.p_o2t), tape.value(d.p_t2o)] {
            for r in 0..m {
                let row = p.row_slice(r);
                assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn random_unit_vectors_retrieve_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let trials = 400;
    let mut total = 0.0;
    for _ in 0..trials {
        let mut o = gaussian(16, 32, &mut rng);
        let mut t = gaussian(16, 32, &mut rng);
        normalize(&mut o);
        normalize(&mut t);
        total += retrieval_accuracy(&tensor(&o), &tensor(&t)).unwrap();
    }
    let mean = total / trials as f64;
    assert!((mean - 1.0 / 16.0).abs() < 0.01, "{mean}");
}

#[test]
fn random_predictions_score_one_fifth() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let golds: Vec<u8> = (0..5000).map(|i| (i % 5) as u8 + 1).collect();
    let preds: Vec<u8> = (0..5000).map(|_| rng.gen_range(1..=5)).collect();
    let f1 = f1_micro(&preds, &golds).unwrap();
    assert!((f1 - 0.2).abs() < 0.03, "{f1}");
}

#[test]
fn null_p_values_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 400;
    let mut ps: Vec<f64> = (0..n)
        .map(|i| {
            let d: Vec<f64> = (0..12).map(|_| StandardNormal.sample(&mut rng)).collect();
            sign_flip_test(&d, i, 0).unwrap().p_value
        })
        .collect();
    ps.sort_by(f64::total_cmp);
    let ks = ps
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            ((i + 1) as f64 / n as f64 - p)
                .abs()
                .max((p - i as f64 / n as f64).abs())
        })
        .fold(0.0, f64::max);
    // 1% critical value of the one-sample Kolmogorov-Smirnov statistic
    assert!(ks < 1.63 / (n as f64).sqrt(), "D = {ks}");
}

#[test]
fn sampled_branch_is_close_to_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d: Vec<f64> = (0..24).map(|_| rng.gen_range(-0.5..1.0)).collect();
    let a = sign_flip_test(&d, 1, 20_000).unwrap();
    let b = sign_flip_test(&d, 2, 20_000).unwrap();
    assert!(!a.exact && a.seed == Some(1));
    assert!((a.p_value - b.p_value).abs() < 0.01);
}
