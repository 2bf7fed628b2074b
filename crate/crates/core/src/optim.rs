use crate::scalar::Scalar;

/// Adam: momentum plus per-coordinate adaptive scaling.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(len: usize, lr: T) -> Self {
        Self {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One descent step on `params` (minimizing).
    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.t);
        let c2 = one - self.beta2.powi(self.t);
        let step = self.lr * c2.sqrt() / c1;
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() + self.eps);
        }
    }
}

/// One [`Adam`] per parameter buffer.
#[derive(Debug, Clone)]
pub struct AdamGroup<T> {
    parts: Vec<Adam<T>>,
}

impl<T: Scalar> AdamGroup<T> {
    pub fn new(lens: impl IntoIterator<Item = usize>, lr: T) -> Self {
        Self {
            parts: lens.into_iter().map(|n| Adam::new(n, lr)).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [T]>, grads: &[Vec<T>]) {
        for ((opt, p), g) in self.parts.iter_mut().zip(params).zip(grads) {
            opt.step(p, g);
        }
    }
}
