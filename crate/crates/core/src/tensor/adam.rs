//! Bias-corrected Adam.

use super::{Tensor, TensorError};

/// Per-parameter first/second moment accumulators plus the step counter.
/// One state drives one list of parameters; order must stay fixed across
/// steps.
#[derive(Debug, Clone)]
pub struct AdamState {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::with_hyperparams(0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(beta1: f64, beta2: f64, epsilon: f64) -> Self {
        assert!((0.0..1.0).contains(&beta1), "beta1 must be in [0, 1)");
        assert!((0.0..1.0).contains(&beta2), "beta2 must be in [0, 1)");
        AdamState {
            beta1,
            beta2,
            epsilon,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState::new()
    }
}

/// One bias-corrected Adam update over a parameter list.
///
/// `names` label parameters in error messages; it must parallel `params`.
/// Accumulators are allocated on the first call and shape-checked on
/// every subsequent one.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    names: &[String],
    lr: f64,
) -> Result<(), TensorError> {
    assert!(lr > 0.0, "learning rate must be positive");
    assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
    assert_eq!(params.len(), names.len(), "params/names length mismatch");

    if state.first.is_empty() {
        for p in params.iter() {
            state.first.push(Tensor::zeros(p.rows(), p.cols()));
            state.second.push(Tensor::zeros(p.rows(), p.cols()));
        }
    }
    if state.first.len() != params.len() {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step state",
            lhs: (state.first.len(), 1),
            rhs: (params.len(), 1),
        });
    }

    for ((p, g), name) in params.iter().zip(grads).zip(names) {
        if p.shape() != g.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step grad",
                lhs: p.shape(),
                rhs: g.shape(),
            });
        }
        if !g.all_finite() {
            return Err(TensorError::NonFinite {
                context: format!("gradient of parameter `{name}`"),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if state.first[i].shape() != p.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step accumulator",
                lhs: state.first[i].shape(),
                rhs: p.shape(),
            });
        }
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        let pd = p.data_mut();
        for j in 0..pd.len() {
            let gj = g.data()[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            pd[j] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut state = AdamState::new();
        let mut p = Tensor::from_rows(&[&[1.0, -2.0]]);
        let before = p.clone();
        let g = Tensor::zeros(1, 2);
        adam_step(&mut state, &mut [&mut p], &[g], &names(1), 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_lr() {
        // bias correction makes m_hat = v_hat = 1 at step 1
        let mut state = AdamState::new();
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        adam_step(&mut state, &mut [&mut p], &[g], &names(1), 0.05).unwrap();
        assert!((p.item() + 0.05).abs() < 1e-9, "delta {}", p.item());
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(w) = w^2, grad = 2w
        let mut state = AdamState::new();
        let mut w = Tensor::scalar(1.0);
        for _ in 0..200 {
            let g = Tensor::scalar(2.0 * w.item());
            adam_step(&mut state, &mut [&mut w], &[g], &names(1), 0.1).unwrap();
        }
        assert!(w.item().abs() < 0.05, "w = {}", w.item());
        assert_eq!(state.step_count(), 200);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut state = AdamState::new();
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(f64::NAN);
        let err = adam_step(
            &mut state,
            &mut [&mut p],
            &[g],
            &["decoder.w1".to_string()],
            0.1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("decoder.w1"), "{err}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut state = AdamState::new();
        let mut p = Tensor::zeros(2, 2);
        let g = Tensor::zeros(2, 3);
        assert!(matches!(
            adam_step(&mut state, &mut [&mut p], &[g], &names(1), 0.1),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }
}
