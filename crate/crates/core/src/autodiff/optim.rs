use super::tensor::{Tensor, TensorError};

/// First and second moment estimates of the adaptive-moment optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimState {
    pub fn for_params(params: &[Tensor]) -> Self {
        Self {
            first_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update using the gradient stored on each parameter.
///
/// Every parameter must carry a gradient; nothing is modified if one is
/// missing.
pub fn optimizer_step(
    params: &mut [Tensor],
    state: &mut OptimState,
    cfg: &AdamConfig,
) -> Result<(), TensorError> {
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(TensorError::MissingGrad(i));
    }
    if state.first_moment.len() != params.len() {
        return Err(TensorError::InvalidArgument {
            op: "optimizer_step",
            detail: format!(
                "optimizer state tracks {} tensors but {} were supplied",
                state.first_moment.len(),
                params.len()
            ),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in params
        .iter_mut()
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        let grad = p.grad.take().expect("checked above");
        for (k, value) in p.values_mut().iter_mut().enumerate() {
            let g = grad[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            *value -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        p.grad = Some(grad);
    }
    Ok(())
}
