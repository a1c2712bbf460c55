use crate::{Scalar, Tensor};

/// Adam optimizer state for an ordered list of parameter tensors.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, shapes: &[&[usize]]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// Applies one bias-corrected update in place.
    pub fn update<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor<T>>, grads: &[Tensor<T>]) {
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        let (b1, b2) = (self.beta1, self.beta2);
        let mut count = 0;
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            count += 1;
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                let gf = gv.f64();
                let mn = b1 * mv.f64() + (1.0 - b1) * gf;
                let vn = b2 * vv.f64() + (1.0 - b2) * gf * gf;
                *mv = T::of(mn);
                *vv = T::of(vn);
                let upd = self.lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *pv = T::of(pv.f64() - upd);
            }
        }
        assert_eq!(count, self.m.len(), "parameter count changed");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = vec![Tensor::new(&[3], vec![1.0f64, -2.0, 0.5])];
        let grads = vec![Tensor::new(&[3], vec![0.3, -4.0, 1e-3])];
        let mut opt = Adam::new(0.01, &[&[3]]);
        opt.update(&mut params, &grads);
        // With bias correction the first step is lr * g / (|g| + eps).
        let step = |g: f64| 0.01 * g / (g.abs() + 1e-8);
        let expect = [1.0 - step(0.3), -2.0 - step(-4.0), 0.5 - step(1e-3)];
        for (p, e) in params[0].data().iter().zip(expect) {
            assert!((p - e).abs() < 1e-12, "{p} vs {e}");
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = vec![Tensor::new(&[2], vec![3.0f64, -1.5])];
        let mut opt = Adam::new(0.05, &[&[2]]);
        for _ in 0..2000 {
            let g = params[0].map(|v| 2.0 * (v - 0.25));
            opt.update(&mut params, &[g]);
        }
        for &p in params[0].data() {
            assert!((p - 0.25).abs() < 1e-3, "{p}");
        }
    }
}
