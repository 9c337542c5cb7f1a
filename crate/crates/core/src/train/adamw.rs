//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::model::{is_decay_exempt, Gradients, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments per parameter plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = |i| vec![T::zero(); params.get(i).len()];
        AdamWState {
            m: (0..params.len()).map(zeros).collect(),
            v: (0..params.len()).map(zeros).collect(),
            t: 0,
        }
    }
}

/// One update: `θ ← θ(1 − lr·wd) − lr·m̂/(√v̂ + ε)`. Biases and norm
/// parameters skip the decay term. A non-finite gradient aborts before any
/// parameter changes.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamWState<T>,
    lr: f64,
    hp: &AdamWParams,
) -> Result<()> {
    for (i, g) in grads.bufs.iter().enumerate() {
        if g.len() != params.get(i).len() {
            return Err(Error::Shape(format!(
                "gradient for {} has {} values, parameter has {}",
                params.name(i),
                g.len(),
                params.get(i).len()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(params.name(i).to_string()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let b1 = T::from_f64_lossy(hp.beta1);
    let b2 = T::from_f64_lossy(hp.beta2);
    let one = T::one();
    let bc1 = T::from_f64_lossy(1.0 - hp.beta1.powi(t));
    let bc2 = T::from_f64_lossy(1.0 - hp.beta2.powi(t));
    let lr_t = T::from_f64_lossy(lr);
    let eps = T::from_f64_lossy(hp.eps);

    for i in 0..params.len() {
        let decay = if is_decay_exempt(params.name(i)) {
            one
        } else {
            T::from_f64_lossy(1.0 - lr * hp.weight_decay)
        };
        let g = &grads.bufs[i];
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let theta = params.get_mut(i).data_mut();
        for j in 0..theta.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            theta[j] = theta[j] * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.push("w.weight".into(), Tensor::new(vec![vals.len()], vals.to_vec()).unwrap());
        s
    }

    fn grads(vals: &[f64]) -> Gradients<f64> {
        Gradients {
            bufs: vec![vals.to_vec()],
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = store(&[0.5, -1.5]);
        let mut st = AdamWState::new(&p);
        let hp = AdamWParams {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut p, &grads(&[0.0, 0.0]), &mut st, 1e-3, &hp).unwrap();
        assert_eq!(p.data(0), &[0.5, -1.5]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = store(&[1.0, 1.0, 1.0]);
        let mut st = AdamWState::new(&p);
        let hp = AdamWParams {
            weight_decay: 0.0,
            ..Default::default()
        };
        let lr = 1e-2;
        adamw_step(&mut p, &grads(&[3.0, -0.2, 1e-3]), &mut st, lr, &hp).unwrap();
        let expect = [1.0 - lr, 1.0 + lr, 1.0 - lr];
        for (a, b) in p.data(0).iter().zip(expect) {
            assert!((a - b).abs() < lr * 1e-3);
        }
    }

    #[test]
    fn decay_only_with_zero_gradient_is_exact() {
        let mut p = store(&[0.7, -2.0]);
        let mut st = AdamWState::new(&p);
        let hp = AdamWParams::default();
        let lr = 1e-3;
        adamw_step(&mut p, &grads(&[0.0, 0.0]), &mut st, lr, &hp).unwrap();
        assert_eq!(p.data(0), &[0.7 * (1.0 - lr * 0.01), -2.0 * (1.0 - lr * 0.01)]);
    }

    #[test]
    fn exempt_parameters_are_not_decayed() {
        let mut p = ParamStore::new();
        p.push("l.bias".into(), Tensor::new(vec![1], vec![3.0]).unwrap());
        p.push("x_norm.weight".into(), Tensor::new(vec![1], vec![1.0]).unwrap());
        let mut st = AdamWState::new(&p);
        let g = Gradients {
            bufs: vec![vec![0.0], vec![0.0]],
        };
        adamw_step(&mut p, &g, &mut st, 0.1, &AdamWParams::default()).unwrap();
        assert_eq!(p.data(0), &[3.0]);
        assert_eq!(p.data(1), &[1.0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = store(&[1.0]);
        let mut st = AdamWState::new(&p);
        let err = adamw_step(&mut p, &grads(&[f64::NAN]), &mut st, 1e-3, &AdamWParams::default())
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w.weight"));
        assert_eq!(p.data(0), &[1.0]);
        assert_eq!(st.t, 0);
    }

    /// Textbook Adam written independently, for the `wd = 0` equivalence.
    fn adam_oracle(theta: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: i32, lr: f64) {
        for i in 0..theta.len() {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t));
            let vh = v[i] / (1.0 - 0.999f64.powi(t));
            theta[i] -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }

    #[test]
    fn matches_adam_without_decay_on_quadratic() {
        let target = [1.0, -2.0, 0.5];
        let mut p = store(&[0.0, 0.0, 0.0]);
        let mut st = AdamWState::new(&p);
        let hp = AdamWParams {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut theta = [0.0; 3];
        let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
        for t in 1..=200 {
            let g: Vec<f64> = p.data(0).iter().zip(target).map(|(x, c)| 2.0 * (x - c)).collect();
            adamw_step(&mut p, &grads(&g), &mut st, 0.05, &hp).unwrap();
            let go: Vec<f64> = theta.iter().zip(target).map(|(x, c)| 2.0 * (x - c)).collect();
            adam_oracle(&mut theta, &go, &mut m, &mut v, t, 0.05);
        }
        for (a, b) in p.data(0).iter().zip(theta) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
