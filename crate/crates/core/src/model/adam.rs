//! Adam with bias correction over the four parameter tensors.

use crate::matrix::Matrix;
use crate::Scalar;

use super::{ModelError, ModelGrads, NicaModel};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    pub first: ModelGrads<S>,
    pub second: ModelGrads<S>,
    pub steps: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(model: &NicaModel<S>) -> Self {
        let zeros = || ModelGrads {
            w1: Matrix::zeros(model.w1.rows(), model.w1.cols()),
            b1: Matrix::zeros(model.b1.rows(), model.b1.cols()),
            w2: Matrix::zeros(model.w2.rows(), model.w2.cols()),
            b2: Matrix::zeros(model.b2.rows(), model.b2.cols()),
        };
        AdamState { first: zeros(), second: zeros(), steps: 0 }
    }
}

/// One bias-corrected update. Parameters are visited in the fixed order
/// w1, b1, w2, b2; non-finite gradients abort training.
pub fn adam_step<S: Scalar>(
    model: &mut NicaModel<S>,
    grads: &ModelGrads<S>,
    state: &mut AdamState<S>,
    learning_rate: f64,
) -> Result<(), ModelError> {
    if !grads.all_finite() {
        return Err(ModelError::NonFiniteGradient);
    }
    state.steps += 1;
    let t = state.steps as i32;
    let b1 = S::from_f64(BETA1).unwrap();
    let b2 = S::from_f64(BETA2).unwrap();
    let eps = S::from_f64(EPSILON).unwrap();
    let lr = S::from_f64(learning_rate).unwrap();
    let c1 = S::one() - b1.powi(t);
    let c2 = S::one() - b2.powi(t);
    let one_minus_b1 = S::one() - b1;
    let one_minus_b2 = S::one() - b2;

    let tensors: [(&mut Matrix<S>, &Matrix<S>, &mut Matrix<S>, &mut Matrix<S>); 4] = [
        (&mut model.w1, &grads.w1, &mut state.first.w1, &mut state.second.w1),
        (&mut model.b1, &grads.b1, &mut state.first.b1, &mut state.second.b1),
        (&mut model.w2, &grads.w2, &mut state.first.w2, &mut state.second.w2),
        (&mut model.b2, &grads.b2, &mut state.first.b2, &mut state.second.b2),
    ];
    for (param, grad, first, second) in tensors {
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(first.data_mut().iter_mut())
            .zip(second.data_mut().iter_mut())
        {
            *m = b1 * *m + one_minus_b1 * g;
            *v = b2 * *v + one_minus_b2 * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NicaConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_setup() -> (NicaModel<f64>, AdamState<f64>) {
        let cfg = NicaConfig { hidden_multiplier: 1, ..NicaConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = NicaModel::init(1, cfg, &mut rng);
        let state = AdamState::new(&model);
        (model, state)
    }

    fn grad_of(model: &NicaModel<f64>, g: f64) -> ModelGrads<f64> {
        let mut grads = ModelGrads {
            w1: Matrix::zeros(model.w1.rows(), model.w1.cols()),
            b1: Matrix::zeros(model.b1.rows(), model.b1.cols()),
            w2: Matrix::zeros(model.w2.rows(), model.w2.cols()),
            b2: Matrix::zeros(model.b2.rows(), model.b2.cols()),
        };
        grads.w1.set(0, 0, g);
        grads
    }

    #[test]
    fn first_step_closed_form() {
        let (mut model, mut state) = unit_setup();
        let before = model.w1.get(0, 0);
        let grads = grad_of(&model, 1.0);
        adam_step(&mut model, &grads, &mut state, 1e-3).unwrap();
        // m_hat = v_hat = g on the first step, so the move is lr/(1 + eps).
        let delta = model.w1.get(0, 0) - before;
        let expect = -1e-3 / (1.0 + EPSILON);
        assert!((delta - expect).abs() < 1e-15, "delta {delta}");
        assert_eq!(state.steps, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut model, mut state) = unit_setup();
        let w1 = model.w1.clone();
        let grads = grad_of(&model, 0.0);
        adam_step(&mut model, &grads, &mut state, 1e-3).unwrap();
        assert_eq!(model.w1, w1);
        assert_eq!(model.b1, Matrix::zeros(1, 1));
    }

    #[test]
    fn first_step_magnitude_is_lr_regardless_of_gradient_scale() {
        for g in [1e-3, 1.0, 1e3] {
            let (mut model, mut state) = unit_setup();
            let before = model.w1.get(0, 0);
            let grads = grad_of(&model, g);
            adam_step(&mut model, &grads, &mut state, 1e-3).unwrap();
            let step = (model.w1.get(0, 0) - before).abs();
            assert!((step / 1e-3 - 1.0).abs() < 1e-4, "g = {g}, step = {step}");
        }
    }

    #[test]
    fn non_finite_gradient_is_a_training_error() {
        let (mut model, mut state) = unit_setup();
        let grads = grad_of(&model, f64::NAN);
        let res = adam_step(&mut model, &grads, &mut state, 1e-3);
        assert!(matches!(res, Err(ModelError::NonFiniteGradient)));
    }
}
