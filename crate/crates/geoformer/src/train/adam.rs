//! Adam with bias correction. Moment tensors mirror the parameter set entry
//! for entry; the update arithmetic runs in f64 regardless of the training
//! element type.

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::tensor::Elem;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<E: Elem>(params: &ParamSet<E>) -> Self {
        let m = params
            .entries()
            .iter()
            .map(|e| vec![0.0; e.values.len()])
            .collect::<Vec<_>>();
        AdamState {
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Gradients are checked for finiteness
    /// first; on any NaN/Inf the step aborts with parameters and state
    /// untouched.
    pub fn step<E: Elem>(
        &mut self,
        params: &mut ParamSet<E>,
        grads: &[Vec<E>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "{} gradient tensors for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        for (g, e) in grads.iter().zip(params.entries()) {
            if g.len() != e.values.len() {
                return Err(Error::Contract(format!(
                    "gradient for {} has {} values, expected {}",
                    e.name,
                    g.len(),
                    e.values.len()
                )));
            }
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {bad:?} for parameter {}; step aborted",
                    e.name
                )));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for ((entry, grad), (m, v)) in params
            .entries_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..grad.len() {
                let g = grad[i].as_f64();
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let p = entry.values[i].as_f64() - lr * m_hat / (v_hat.sqrt() + EPSILON);
                entry.values[i] = E::from_f64(p);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamEntry;

    fn scalar_params(x: f64) -> ParamSet<f64> {
        ParamSet::from_entries(vec![ParamEntry {
            name: "x".to_string(),
            shape: vec![1],
            values: vec![x],
        }])
    }

    /// Independent scalar reference: the textbook update sequence.
    struct ScalarAdamOracle {
        m: f64,
        v: f64,
        t: u64,
    }

    impl ScalarAdamOracle {
        fn new() -> Self {
            ScalarAdamOracle {
                m: 0.0,
                v: 0.0,
                t: 0,
            }
        }

        fn update(&mut self, x: f64, g: f64, lr: f64) -> f64 {
            self.t += 1;
            self.m = 0.9 * self.m + 0.1 * g;
            self.v = 0.999 * self.v + 0.001 * g * g;
            let m_hat = self.m / (1.0 - 0.9f64.powi(self.t as i32));
            let v_hat = self.v / (1.0 - 0.999f64.powi(self.t as i32));
            x - lr * m_hat / (v_hat.sqrt() + 1e-8)
        }
    }

    #[test]
    fn first_step_moves_by_about_lr_times_sign() {
        let mut params = scalar_params(5.0);
        let mut st = AdamState::new(&params);
        let before: Vec<Vec<f64>> = params.entries().iter().map(|e| e.values.clone()).collect();
        let grads: Vec<Vec<f64>> = params
            .entries()
            .iter()
            .map(|e| vec![0.37; e.values.len()])
            .collect();
        st.step(&mut params, &grads, 0.1).unwrap();
        for (e, b) in params.entries().iter().zip(&before) {
            for (after, before) in e.values.iter().zip(b) {
                let delta = after - before;
                assert!((delta + 0.1).abs() < 1e-7, "delta {delta}");
            }
        }
    }

    #[test]
    fn hundred_steps_match_scalar_oracle() {
        // minimize f(x) = x^2 from x = 5 with lr = 0.1
        let mut params = scalar_params(5.0);
        let mut st = AdamState::new(&params);
        let mut oracle = ScalarAdamOracle::new();
        let mut x_ref = 5.0f64;
        for _ in 0..100 {
            let x = params.entries()[0].values[0];
            let mut grads: Vec<Vec<f64>> = params
                .entries()
                .iter()
                .map(|e| vec![0.0; e.values.len()])
                .collect();
            grads[0][0] = 2.0 * x;
            st.step(&mut params, &grads, 0.1).unwrap();
            x_ref = oracle.update(x_ref, 2.0 * x_ref, 0.1);
            let got = params.entries()[0].values[0];
            assert!((got - x_ref).abs() <= 1e-12, "{got} vs {x_ref}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = scalar_params(1.25);
        let mut st = AdamState::new(&params);
        let before: Vec<Vec<f64>> = params.entries().iter().map(|e| e.values.clone()).collect();
        let grads: Vec<Vec<f64>> = params
            .entries()
            .iter()
            .map(|e| vec![0.0; e.values.len()])
            .collect();
        st.step(&mut params, &grads, 0.1).unwrap();
        for (e, b) in params.entries().iter().zip(&before) {
            assert_eq!(&e.values, b);
        }
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn non_finite_gradient_aborts_without_state_change() {
        let mut params = scalar_params(1.0);
        let mut st = AdamState::new(&params);
        let before = params.entries()[0].values.clone();
        let mut grads: Vec<Vec<f64>> = params
            .entries()
            .iter()
            .map(|e| vec![1.0; e.values.len()])
            .collect();
        grads[0][0] = f64::NAN;
        let err = st.step(&mut params, &grads, 0.1).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(params.entries()[0].values, before);
        assert_eq!(st.step_count(), 0);
    }
}
