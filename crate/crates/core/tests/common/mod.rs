//! Independent reference implementations shared by the test suites.
#![allow(dead_code)]

use std::collections::BTreeSet;

use cftwin::denoiser::{norm_groups, Denoiser, DenoiserSpec, ForwardMode};
use cftwin::diffusion::NoiseSchedule;
use cftwin_autograd::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], rng: &mut impl Rng, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

pub fn res_shapes(cin: usize, cout: usize, ct: usize) -> Vec<Vec<usize>> {
    let mut s = vec![
        vec![cin],
        vec![cin],
        vec![cout, cin, 3, 3],
        vec![cout],
        vec![cout, ct],
        vec![cout],
        vec![cout, cout],
        vec![cout],
        vec![cout],
        vec![cout],
        vec![cout, cout, 3, 3],
        vec![cout],
    ];
    if cin != cout {
        s.push(vec![cout, cin, 1, 1]);
        s.push(vec![cout]);
    }
    s
}

// Straightforward per-element reference implementations.

pub fn naive_gn(x: &[f64], c: usize, hw: usize, groups: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let per = c / groups;
    let mut out = vec![0.0; x.len()];
    for gi in 0..groups {
        let vals: Vec<f64> = (gi * per..(gi + 1) * per).flat_map(|ch| x[ch * hw..(ch + 1) * hw].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        for ch in gi * per..(gi + 1) * per {
            for p in 0..hw {
                out[ch * hw + p] = (x[ch * hw + p] - mean) / (var + 1e-5).sqrt() * gamma[ch] + beta[ch];
            }
        }
    }
    out
}

pub fn swish(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

pub fn naive_conv(x: &[f64], cin: usize, h: usize, w: usize, wt: &[f64], b: &[f64], cout: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        for i in 0..h {
            for j in 0..w {
                let mut acc = b[o];
                for c in 0..cin {
                    for di in 0..k {
                        for dj in 0..k {
                            let (ii, jj) = (i as isize + di as isize - pad, j as isize + dj as isize - pad);
                            if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                acc += wt[((o * cin + c) * k + di) * k + dj] * x[(c * h + ii as usize) * w + jj as usize];
                            }
                        }
                    }
                }
                out[(o * h + i) * w + j] = acc;
            }
        }
    }
    out
}

pub fn naive_fc(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    b.iter().enumerate().map(|(o, &bo)| bo + x.iter().enumerate().map(|(i, &xi)| w[o * x.len() + i] * xi).sum::<f64>()).collect()
}

pub fn naive_res_plus(x: &[f64], cin: usize, cout: usize, h: usize, temb: &[f64], p: &[Tensor<f64>]) -> Vec<f64> {
    let hw = h * h;
    let g1 = norm_groups(cin, 32);
    let g2 = norm_groups(cout, 32);
    let a: Vec<f64> = naive_gn(x, cin, hw, g1, p[0].data(), p[1].data()).into_iter().map(swish).collect();
    let mut z = naive_conv(&a, cin, h, h, p[2].data(), p[3].data(), cout, 3);
    let m: Vec<f64> = naive_fc(temb, p[4].data(), p[5].data()).into_iter().map(swish).collect();
    let m = naive_fc(&m, p[6].data(), p[7].data());
    for c in 0..cout {
        for v in &mut z[c * hw..(c + 1) * hw] {
            *v += m[c];
        }
    }
    let a: Vec<f64> = naive_gn(&z, cout, hw, g2, p[8].data(), p[9].data()).into_iter().map(swish).collect();
    let z = naive_conv(&a, cout, h, h, p[10].data(), p[11].data(), cout, 3);
    let short = if cin == cout { x.to_vec() } else { naive_conv(x, cin, h, h, p[12].data(), p[13].data(), cout, 1) };
    z.iter().zip(short).map(|(a, b)| a + b).collect()
}

pub fn naive_attention(z: &[f64], m: usize, d: usize, wq: &[f64], wk: &[f64], wv: &[f64], dk: usize) -> Vec<f64> {
    let proj = |w: &[f64], od: usize| -> Vec<f64> {
        let mut out = vec![0.0; m * od];
        for t in 0..m {
            for o in 0..od {
                out[t * od + o] = (0..d).map(|i| z[t * d + i] * w[i * od + o]).sum();
            }
        }
        out
    };
    let (q, k, v) = (proj(wq, dk), proj(wk, dk), proj(wv, d));
    let mut out = vec![0.0; m * d];
    for a in 0..m {
        let s: Vec<f64> = (0..m).map(|b| (0..dk).map(|i| q[a * dk + i] * k[b * dk + i]).sum::<f64>() / (dk as f64).sqrt()).collect();
        let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
        let tot: f64 = e.iter().sum();
        for b in 0..m {
            for c in 0..d {
                out[a * d + c] += e[b] / tot * v[b * d + c];
            }
        }
    }
    out
}

pub fn small_spec() -> DenoiserSpec {
    DenoiserSpec {
        resolution: 8,
        base_channels: 4,
        channel_multipliers: vec![1, 2],
        blocks_per_stage: 1,
        time_embed_dim: 8,
        attention_max_side: 4,
        ..DenoiserSpec::default()
    }
}

/// Compares analytic loss gradients with central differences of step `h`; returns
/// `(within tolerance, total)` over every scalar parameter.
pub fn gradient_agreement(spec: &DenoiserSpec, seed: u64, h: f64, tol: f64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Denoiser::<f64>::new(spec, &mut rng).unwrap();
    // Perturb every parameter so no gradient path is trivially zero.
    for t in model.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let r = spec.resolution;
    let cond = random(&[2, 1, r, r], &mut rng, 1.0);
    let noisy = random(&[2, 1, r, r], &mut rng, 1.0);
    let target = random(&[2, 1, r, r], &mut rng, 1.0);
    let steps = [3, 17];
    let loss = |m: &Denoiser<f64>| {
        let eps = m.predict(&cond, &noisy, &steps).unwrap();
        eps.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / eps.numel() as f64
    };

    let mut g = Graph::new();
    let vars = model.bind(&mut g, true);
    let (c, x, tv) = (g.input(cond.clone()), g.input(noisy.clone()), g.input(target.clone()));
    let out = model.forward_graph(&mut g, &vars, c, x, &steps, ForwardMode::Eval, &BTreeSet::new()).unwrap();
    let l = g.mse(out.eps, tv);
    let mut grads = g.backward(l);
    let analytic: Vec<Tensor<f64>> = vars.iter().zip(model.params().tensors()).map(|(v, t)| grads.take_or_zeros(*v, t.shape())).collect();

    let (mut total, mut good) = (0usize, 0usize);
    for (pi, grad) in analytic.iter().enumerate() {
        for k in 0..grad.numel() {
            let mut probe = model.clone();
            let orig = probe.params().tensors().nth(pi).unwrap().data()[k];
            probe.params_mut().tensors_mut().nth(pi).unwrap().data_mut()[k] = orig + h;
            let up = loss(&probe);
            probe.params_mut().tensors_mut().nth(pi).unwrap().data_mut()[k] = orig - h;
            let down = loss(&probe);
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[k];
            let err = (a - numeric).abs();
            total += 1;
            if err <= tol * a.abs().max(numeric.abs()) || err <= 1e-9 {
                good += 1;
            }
        }
    }
    (good, total)
}

// Moments of p(x | g_t, g0) ∝ q(g_t | x)·q(x | g0) by trapezoidal quadrature.
pub fn quadrature_posterior(gt: f64, g0: f64, t: usize, sched: &NoiseSchedule) -> (f64, f64) {
    let (a, b) = (sched.alpha(t), sched.beta(t));
    let (prior_mean, prior_var) = (sched.alpha_bar(t - 1).sqrt() * g0, 1.0 - sched.alpha_bar(t - 1));
    let (lik_mode, lik_sd) = (gt / a.sqrt(), (b / a).sqrt());
    let lo = (prior_mean - 12.0 * prior_var.sqrt()).min(lik_mode - 12.0 * lik_sd);
    let hi = (prior_mean + 12.0 * prior_var.sqrt()).max(lik_mode + 12.0 * lik_sd);
    let log_density = |x: f64| -(gt - a.sqrt() * x).powi(2) / (2.0 * b) - (x - prior_mean).powi(2) / (2.0 * prior_var);
    let n = 400_000;
    let h = (hi - lo) / n as f64;
    let xs: Vec<f64> = (0..=n).map(|i| lo + i as f64 * h).collect();
    let peak = xs.iter().map(|&x| log_density(x)).fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for (i, &x) in xs.iter().enumerate() {
        let w = if i == 0 || i == n { 0.5 } else { 1.0 } * (log_density(x) - peak).exp();
        z += w;
        s1 += w * x;
        s2 += w * x * x;
    }
    let mean = s1 / z;
    (mean, s2 / z - mean * mean)
}

// Raw-moment form of the single-window index, written out term by term.
pub fn ssim_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..x.len() {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        syy += y[i] * y[i];
        sxy += x[i] * y[i];
    }
    let (ux, uy) = (sx / n, sy / n);
    let vx = sxx / n - ux * ux;
    let vy = syy / n - uy * uy;
    let cxy = sxy / n - ux * uy;
    let c1 = 2.55f64 * 2.55;
    let c2 = 7.65f64 * 7.65;
    let luminance = (2.0 * ux * uy + c1) / (ux * ux + uy * uy + c1);
    let contrast_structure = (2.0 * cxy + c2) / (vx + vy + c2);
    luminance * contrast_structure
}

pub fn brute_force(values: &[f64], weights: &[usize], budget: usize) -> f64 {
    let n = values.len();
    (0u32..1 << n)
        .filter(|mask| (0..n).filter(|i| mask >> i & 1 == 1).map(|i| weights[i]).sum::<usize>() >= budget)
        .map(|mask| (0..n).filter(|i| mask >> i & 1 == 1).map(|i| values[i]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}
