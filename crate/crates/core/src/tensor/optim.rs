use super::Matrix;

/// Adam with bias correction, used only for pre-training the toy models.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(shapes: impl IntoIterator<Item = (usize, usize)>, lr: f64) -> Self {
        let (m, v): (Vec<_>, Vec<_>) =
            shapes.into_iter().map(|(r, c)| (Matrix::zeros(r, c), Matrix::zeros(r, c))).unzip();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m, v }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one update to `params` in order.
    pub fn update<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Matrix>, grads: &[Matrix]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, p) in params.into_iter().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                *w -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut x = Matrix::row_vector(&[3.0, -2.0]);
        let mut opt = Adam::new([(1, 2)], 0.1);
        for _ in 0..500 {
            let g = x.scale(2.0);
            opt.update([&mut x], &[g]);
        }
        assert!(x.max_abs() < 1e-3);
    }
}
