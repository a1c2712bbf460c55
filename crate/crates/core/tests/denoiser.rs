mod common;

use cftwin::denoiser::{res_plus_forward, self_attention_forward, time_embedding, Denoiser};
use cftwin_autograd::Tensor;
use common::{naive_attention, naive_res_plus, random, res_shapes, small_spec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn res_plus_zero_weights_is_identity_or_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[4, 5, 5], &mut rng, 2.0);
    let temb = Tensor::new(&[6], time_embedding(3.0, 6).unwrap());
    let zeros = |cin, cout| -> Vec<Tensor<f64>> {
        res_shapes(cin, cout, 6)
            .iter()
            .enumerate()
            .map(|(i, s)| if i == 0 || i == 8 { Tensor::full(s, 1.0) } else { Tensor::zeros(s) })
            .collect()
    };
    assert_eq!(res_plus_forward(&x, &temb, &zeros(4, 4), 32).unwrap(), x);
    let y = res_plus_forward(&x, &temb, &zeros(4, 8), 32).unwrap();
    assert_eq!(y.shape(), &[8, 5, 5]);
    assert!(y.data().iter().all(|&v| v == 0.0));
    assert!(res_plus_forward(&x, &temb, &zeros(3, 4), 32).is_err());
}

#[test]
fn res_plus_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (cin, cout) in [(2, 2), (2, 3), (8, 8)] {
        let x = random(&[cin, 4, 4], &mut rng, 1.0);
        let temb = random(&[4], &mut rng, 1.0);
        let p: Vec<Tensor<f64>> = res_shapes(cin, cout, 4).iter().map(|s| random(s, &mut rng, 0.7)).collect();
        let got = res_plus_forward(&x, &temb, &p, 32).unwrap();
        let want = naive_res_plus(x.data(), cin, cout, 4, temb.data(), &p);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn attention_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (z, wq, wk, wv) = (random(&[3, 4], &mut rng, 1.0), random(&[4, 4], &mut rng, 1.0), random(&[4, 4], &mut rng, 1.0), random(&[4, 4], &mut rng, 1.0));
    let (out, probs) = self_attention_forward(&z, &wq, &wk, &wv).unwrap();
    let want = naive_attention(z.data(), 3, 4, wq.data(), wk.data(), wv.data(), 4);
    for (a, b) in out.data().iter().zip(&want) {
        assert!((a - b).abs() <= 1e-6);
    }
    for row in probs.data().chunks(3) {
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }

    let single = random(&[1, 4], &mut rng, 1.0);
    let (out, probs) = self_attention_forward(&single, &wq, &wk, &wv).unwrap();
    assert_eq!(probs.data(), &[1.0]);
    for c in 0..4 {
        let expect: f64 = (0..4).map(|i| single.data()[i] * wv.data()[i * 4 + c]).sum::<f64>();
        assert!((out.data()[c] - expect).abs() <= 1e-12);
    }

    assert!(self_attention_forward(&z, &random(&[3, 4], &mut rng, 1.0), &wk, &wv).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn attention_is_permutation_equivariant(seed in any::<u64>(), m in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let z = random(&[m, d], &mut rng, 1.0);
        let (wq, wk, wv) = (random(&[d, 2], &mut rng, 1.0), random(&[d, 2], &mut rng, 1.0), random(&[d, d], &mut rng, 1.0));
        let mut perm: Vec<usize> = (0..m).collect();
        perm.rotate_left(seed as usize % m);
        perm.swap(0, m - 1);
        let pz = Tensor::new(&[m, d], perm.iter().flat_map(|&r| z.data()[r * d..(r + 1) * d].to_vec()).collect());
        let (a, _) = self_attention_forward(&z, &wq, &wk, &wv).unwrap();
        let (b, _) = self_attention_forward(&pz, &wq, &wk, &wv).unwrap();
        for (i, &r) in perm.iter().enumerate() {
            for c in 0..d {
                prop_assert!((b.data()[i * d + c] - a.data()[r * d + c]).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let (good, total) = common::gradient_agreement(&small_spec(), 4, 1e-3, 1e-3);
    assert!(good as f64 >= 0.95 * total as f64, "{good}/{total} parameters within tolerance");
}

#[test]
fn forward_is_finite_on_random_inputs() {
    let spec = small_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = Denoiser::<f32>::new(&spec, &mut rng).unwrap();
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.1f32..0.1);
        }
    }
    for _ in 0..20 {
        let n = 50;
        let cond = Tensor::new(&[n, 1, 8, 8], (0..n * 64).map(|_| rng.random_range(0.0f32..1.0)).collect());
        let noisy = Tensor::new(&[n, 1, 8, 8], (0..n * 64).map(|_| rng.random_range(-4.0f32..4.0)).collect());
        let steps: Vec<usize> = (0..n).map(|_| rng.random_range(1..=1000)).collect();
        let eps = model.predict(&cond, &noisy, &steps).unwrap();
        assert_eq!(eps.shape(), noisy.shape());
        assert!(eps.is_finite());
    }
}
