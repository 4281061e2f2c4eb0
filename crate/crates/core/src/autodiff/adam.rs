use super::params::{ParamGrads, ParamKind, ParamStore};
use super::real::Real;
use crate::error::{ensure, Result};

/// Adam optimizer state with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub step: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    /// Zeroed moments for every entry of `params` with the usual defaults
    /// (lr 1e-3, betas 0.9 / 0.999, eps 1e-8).
    pub fn new(params: &ParamStore<T>) -> Self {
        Self::with_lr(params, T::cst(1e-3))
    }

    pub fn with_lr(params: &ParamStore<T>, lr: T) -> Self {
        let zeros = || {
            params
                .entries()
                .iter()
                .map(|e| vec![T::zero(); e.value.len()])
                .collect()
        };
        AdamState {
            step: 0,
            lr,
            beta1: T::cst(0.9),
            beta2: T::cst(0.999),
            eps: T::cst(1e-8),
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One Adam update of every trainable entry of `params`.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &ParamGrads<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    ensure!(
        grads.len() == params.len() && state.m.len() == params.len(),
        "adam: {} gradients / {} moment slots for {} parameters",
        grads.len(),
        state.m.len(),
        params.len()
    );
    for (i, entry) in params.entries().iter().enumerate() {
        if entry.kind != ParamKind::Trainable {
            continue;
        }
        let g = grads[i]
            .as_ref()
            .ok_or_else(|| crate::Error::contract(format!("adam: no gradient for {}", entry.name)))?;
        ensure!(
            g.shape() == entry.value.shape(),
            "adam: gradient shape {:?} for parameter {} of shape {:?}",
            g.shape(),
            entry.name,
            entry.value.shape()
        );
    }
    state.step += 1;
    let t = state.step as i32;
    let one = T::one();
    let bc1 = one - state.beta1.powi(t);
    let bc2 = one - state.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        if params.entries()[i].kind != ParamKind::Trainable {
            continue;
        }
        let g = g.as_ref().expect("checked above").data();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = params.get_mut(i).data_mut();
        for k in 0..p.len() {
            m[k] = state.beta1 * m[k] + (one - state.beta1) * g[k];
            v[k] = state.beta2 * v[k] + (one - state.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn single(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", ParamKind::Trainable, Tensor::scalar(w));
        s
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = single(1.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &vec![Some(Tensor::scalar(1.0))], &mut st).unwrap();
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
        let w = p.get(0).data()[0];
        assert!((w - (1.0 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-15, "{w}");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = single(0.7);
        let mut st = AdamState::new(&p);
        for _ in 0..10 {
            adam_step(&mut p, &vec![Some(Tensor::scalar(0.0))], &mut st).unwrap();
        }
        assert_eq!(p.get(0).data()[0], 0.7);
        assert_eq!(st.step, 10);
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        let mut p = single(0.0);
        let mut st = AdamState::with_lr(&p, 1e-2);
        for _ in 0..5000 {
            let w = p.get(0).data()[0];
            adam_step(&mut p, &vec![Some(Tensor::scalar(2.0 * (w - 3.0)))], &mut st).unwrap();
        }
        assert!((p.get(0).data()[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn rejects_shape_mismatch_and_missing_grads() {
        let mut p = single(0.0);
        let mut st = AdamState::new(&p);
        assert!(adam_step(&mut p, &vec![Some(Tensor::zeros(&[2]))], &mut st).is_err());
        assert!(adam_step(&mut p, &vec![None], &mut st).is_err());
        assert_eq!(st.step, 0);
    }
}
