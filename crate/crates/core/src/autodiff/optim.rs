use super::{AutodiffError, Tensor};

fn check_shapes(params: &[Tensor], grads: &[Tensor]) -> Result<(), AutodiffError> {
    if params.len() != grads.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "optimizer",
            detail: format!("{} params vs {} grads", params.len(), grads.len()),
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "optimizer",
                detail: format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            });
        }
    }
    Ok(())
}

/// `p -= lr * g`.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<(), AutodiffError> {
    check_shapes(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// Bias-corrected Adam update.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), AutodiffError> {
    check_shapes(params, grads)?;
    if state.m.len() != params.len() {
        *state = AdamState::new(params);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_on_square() {
        let mut p = vec![Tensor::scalar(1.0)];
        let g = vec![Tensor::scalar(2.0)];
        sgd_step(&mut p, &g, 0.1).unwrap();
        assert!((p[0].item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_converges_on_square() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig { lr: 0.05, ..Default::default() };
        let mut reached = None;
        for step in 0..500 {
            let g = vec![Tensor::scalar(2.0 * p[0].item())];
            adam_step(&mut p, &g, &mut st, &cfg).unwrap();
            if reached.is_none() && p[0].item().abs() < 1e-3 {
                reached = Some(step);
            }
        }
        assert!(reached.is_some(), "final x = {}", p[0].item());
        assert_eq!(st.step, 500);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::from_vec(vec![0.3, -0.7])];
        let g = vec![Tensor::zeros(&[2])];
        sgd_step(&mut p, &g, 0.5).unwrap();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p[0].data(), &[0.3, -0.7]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Tensor::zeros(&[2])];
        let g = vec![Tensor::zeros(&[3])];
        assert!(matches!(sgd_step(&mut p, &g, 0.1), Err(AutodiffError::ShapeMismatch { .. })));
        let mut st = AdamState::new(&p);
        assert!(adam_step(&mut p, &g, &mut st, &AdamConfig::default()).is_err());
    }
}
