use super::{AutodiffError, Gradients, ParamStore};

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter. Nothing is modified
    /// when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<(), AutodiffError> {
        for (id, g) in grads.iter() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(AutodiffError::NonFiniteGradient(store.get(id).name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (((x, gi), mi), vi) in p.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn setup() -> (ParamStore, crate::autodiff::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![1.0, -2.0, 0.5])).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, id) = setup();
        let before = s.tensor(id).clone();
        let mut opt = Adam::new(&s, 0.1);
        let g = Gradients::zeros_like(&s);
        opt.step(&mut s, &g).unwrap();
        assert_eq!(s.tensor(id), &before);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let (mut s, id) = setup();
        let mut g = Gradients::zeros_like(&s);
        g.get_mut(id).copy_from_slice(&[3.0, -0.25, 1e-3]);
        let mut opt = Adam::new(&s, 0.01);
        opt.step(&mut s, &g).unwrap();
        // at t=1 the bias-corrected ratio is g/(|g| + eps)
        let expect = [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01];
        for (x, e) in s.tensor(id).data().iter().zip(expect) {
            assert!((x - e).abs() < 1e-7, "{x} vs {e}");
        }
    }

    #[test]
    fn zero_lr_is_identity() {
        let (mut s, id) = setup();
        let before = s.tensor(id).clone();
        let mut g = Gradients::zeros_like(&s);
        g.get_mut(id).copy_from_slice(&[1.0, 2.0, 3.0]);
        Adam::new(&s, 0.0).step(&mut s, &g).unwrap();
        assert_eq!(s.tensor(id), &before);
    }

    #[test]
    fn non_finite_gradient_names_param() {
        let (mut s, id) = setup();
        let mut g = Gradients::zeros_like(&s);
        g.get_mut(id)[1] = f64::NAN;
        let err = Adam::new(&s, 0.1).step(&mut s, &g).unwrap_err();
        assert_eq!(err, AutodiffError::NonFiniteGradient("w".into()));
    }

    #[test]
    fn frozen_params_do_not_move() {
        let (mut s, id) = setup();
        s.get_mut(id).trainable = false;
        let before = s.tensor(id).clone();
        let mut g = Gradients::zeros_like(&s);
        g.get_mut(id).copy_from_slice(&[1.0, 2.0, 3.0]);
        Adam::new(&s, 0.1).step(&mut s, &g).unwrap();
        assert_eq!(s.tensor(id), &before);
    }
}
