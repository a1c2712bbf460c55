mod common;

use cftwin::diffusion::{posterior_params, predict_x0, q_sample, q_step, NoiseSchedule, ScheduleConfig};
use cftwin::rng::normals;
use common::quadrature_posterior;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn schedule(steps: usize) -> NoiseSchedule {
    ScheduleConfig { steps, beta_start: 1e-4, beta_end: 0.1 }.build().unwrap()
}

fn moments(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
}

#[test]
fn chained_and_closed_form_corruption_agree_in_distribution() {
    let sched = schedule(50);
    let t = 50;
    let g0 = vec![3.0; 8];
    let draws = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (mut chained, mut closed) = (Vec::new(), Vec::new());
    for _ in 0..draws {
        let mut g = g0.clone();
        for s in 1..=t {
            g = q_step(&g, s, &normals(&mut rng, g.len()), &sched).unwrap();
        }
        chained.extend(g);
        closed.extend(q_sample(&g0, t, &normals(&mut rng, g0.len()), &sched).unwrap());
    }
    let ab = sched.alpha_bar(t);
    let (mean, var) = (3.0 * ab.sqrt(), 1.0 - ab);
    for (name, v) in [("chained", &chained), ("closed", &closed)] {
        let (m, s2) = moments(v);
        assert!((m - mean).abs() <= 0.01 * mean, "{name} mean {m} vs {mean}");
        assert!((s2 - var).abs() <= 0.03 * var, "{name} variance {s2} vs {var}");
    }
    let ((mc, vc), (mq, vq)) = (moments(&chained), moments(&closed));
    assert!((mc - mq).abs() <= 0.01 * mq);
    assert!((vc - vq).abs() <= 0.03 * vq);
}

#[test]
fn clean_estimate_inverts_corruption() {
    let sched = schedule(100);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for t in 1..=100 {
        let g0: Vec<f64> = (0..32).map(|_| rng.random_range(0.0..1.0)).collect();
        let eps = normals(&mut rng, 32);
        let back = predict_x0(&q_sample(&g0, t, &eps, &sched).unwrap(), &eps, t, &sched).unwrap();
        for (a, b) in back.iter().zip(&g0) {
            assert!((a - b).abs() <= 1e-5);
        }
    }
}

#[test]
fn posterior_matches_numerical_bayes() {
    let sched = schedule(100);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let t = rng.random_range(2..=100);
        let g0 = rng.random_range(-1.0..2.0);
        let gt = q_sample(&[g0], t, &normals(&mut rng, 1), &sched).unwrap()[0];
        let (mean, var) = posterior_params(&[gt], &[g0], t, &sched).unwrap();
        let (qm, qv) = quadrature_posterior(gt, g0, t, &sched);
        assert!((mean[0] - qm).abs() <= 1e-6, "t={t}: mean {} vs {qm}", mean[0]);
        assert!((var - qv).abs() <= 1e-6, "t={t}: variance {var} vs {qv}");
    }
}
