//! Training objectives: L1 (mean absolute error) and the force-matching
//! loss, both built from tape primitives so they train end to end.

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// Mean absolute error between predictions and constant targets.
pub fn l1_loss<E: Elem>(pred: &Tensor<E>, target: &Tensor<E>) -> Result<Tensor<E>> {
    if pred.shape() != target.shape() {
        return Err(Error::Contract(format!(
            "prediction shape {:?} vs target shape {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.numel();
    if n == 0 {
        return Err(Error::Contract("l1 loss over an empty batch".to_string()));
    }
    Ok(pred.sub(target)?.abs().sum_all()?.scale(1.0 / n as f64))
}

/// Property MAE plus (rho / 3) times the per-(atom, component) mean absolute
/// force error over real atoms. Differentiable through the predicted forces,
/// which are themselves a backward pass.
#[allow(clippy::too_many_arguments)]
pub fn force_loss<E: Elem>(
    pred_p: &Tensor<E>,
    target_p: &Tensor<E>,
    pred_f: &Tensor<E>,
    target_f: &Tensor<E>,
    mask3: &Tensor<E>,
    rho: f64,
    real_atoms: usize,
) -> Result<Tensor<E>> {
    if rho < 0.0 {
        return Err(Error::Config(format!("force coefficient rho = {rho} < 0")));
    }
    if pred_f.shape() != target_f.shape() || pred_f.shape() != mask3.shape() {
        return Err(Error::Contract(format!(
            "force shapes disagree: {:?} vs {:?} vs mask {:?}",
            pred_f.shape(),
            target_f.shape(),
            mask3.shape()
        )));
    }
    if real_atoms == 0 {
        return Err(Error::Contract("force loss over zero atoms".to_string()));
    }
    let base = l1_loss(pred_p, target_p)?;
    if rho == 0.0 {
        return Ok(base);
    }
    let abs_err = pred_f.sub(target_f)?.abs().mul(mask3)?.sum_all()?;
    let mean = abs_err.scale(1.0 / (3.0 * real_atoms as f64));
    base.add(&mean.scale(rho / 3.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn perfect_prediction_is_zero() {
        let tape: Tape<f64> = Tape::new();
        let p = tape.constant(vec![1.0, -2.0], &[2]).unwrap();
        let t = tape.constant(vec![1.0, -2.0], &[2]).unwrap();
        assert_eq!(l1_loss(&p, &t).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn hand_example() {
        let tape: Tape<f64> = Tape::new();
        let p = tape.constant(vec![1.0, 3.0], &[2]).unwrap();
        let t = tape.constant(vec![0.0, 0.0], &[2]).unwrap();
        assert_eq!(l1_loss(&p, &t).unwrap().item().unwrap(), 2.0);
    }

    #[test]
    fn empty_batch_is_a_contract_error() {
        let tape: Tape<f64> = Tape::new();
        let p = tape.zeros(&[0]);
        let t = tape.zeros(&[0]);
        assert!(l1_loss(&p, &t).is_err());
    }

    #[test]
    fn gradient_is_sign_over_count() {
        let tape: Tape<f64> = Tape::new();
        let p = tape.leaf(vec![1.0, -3.0, 2.0, 2.0], &[4]).unwrap();
        let t = tape.constant(vec![0.0, 0.0, 5.0, 2.0], &[4]).unwrap();
        let loss = l1_loss(&p, &t).unwrap();
        let g = tape.backward(&loss).unwrap().get(&p).unwrap().values();
        // sign(pred - target) / B, with subgradient 0 at the tie
        assert_eq!(g, vec![0.25, -0.25, -0.25, 0.0]);
    }

    #[test]
    fn rho_zero_reduces_to_l1() {
        let tape: Tape<f64> = Tape::new();
        let p = tape.constant(vec![1.0], &[1]).unwrap();
        let t = tape.constant(vec![0.0], &[1]).unwrap();
        let f = tape.constant(vec![9.0, 9.0, 9.0], &[1, 1, 3]).unwrap();
        let ft = tape.zeros(&[1, 1, 3]);
        let m = tape.ones(&[1, 1, 3]);
        let loss = force_loss(&p, &t, &f, &ft, &m, 0.0, 1).unwrap();
        assert_eq!(loss.item().unwrap(), 1.0);
    }

    #[test]
    fn single_atom_hand_value() {
        // rho = 1e3, force error (1,1,1), property error 0:
        // (1e3/3) * ((1+1+1)/3) = 333.33...
        let tape: Tape<f64> = Tape::new();
        let p = tape.constant(vec![0.0], &[1]).unwrap();
        let t = tape.constant(vec![0.0], &[1]).unwrap();
        let f = tape.ones(&[1, 1, 3]);
        let ft = tape.zeros(&[1, 1, 3]);
        let m = tape.ones(&[1, 1, 3]);
        let loss = force_loss(&p, &t, &f, &ft, &m, 1e3, 1).unwrap();
        let expected = 1e3 / 3.0;
        assert!((loss.item().unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let tape: Tape<f64> = Tape::new();
        let p = tape.zeros(&[1]);
        let t = tape.zeros(&[1]);
        let f = tape.zeros(&[1, 2, 3]);
        let ft = tape.zeros(&[1, 1, 3]);
        let m = tape.zeros(&[1, 1, 3]);
        assert!(force_loss(&p, &t, &f, &ft, &m, 1.0, 1).is_err());
    }
}
