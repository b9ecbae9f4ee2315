//! Parameter update rules. Each optimizer owns the state for exactly the
//! tensors it is handed, in the order it is handed them.

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub hyper: AdamHyper,
    /// Steps taken so far.
    pub t: u64,
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
}

impl AdamState {
    pub fn new(lr: f64, hyper: AdamHyper) -> Self {
        Self {
            lr,
            hyper,
            t: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }
}

fn check_aligned(params: &[&mut Matrix], grads: &[&Matrix]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Contract(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Contract(format!(
                "parameter {i} is {:?} but its gradient is {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    Ok(())
}

/// Bias-corrected Adam update. Moments are created on the first step and
/// must keep matching the parameter shapes afterwards.
pub fn adam_step(params: &mut [&mut Matrix], grads: &[&Matrix], state: &mut AdamState) -> Result<()> {
    check_aligned(params, grads)?;
    if state.first_moment.is_empty() && state.t == 0 {
        state.first_moment = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        state.second_moment = state.first_moment.clone();
    }
    if state.first_moment.len() != params.len()
        || state
            .first_moment
            .iter()
            .zip(params.iter())
            .any(|(m, p)| m.shape() != p.shape())
    {
        return Err(Error::Contract(
            "adam state does not match the parameter list".into(),
        ));
    }

    state.t += 1;
    let AdamHyper { beta1, beta2, eps } = state.hyper;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        let p = p.as_mut_slice();
        let (m, v) = (m.as_mut_slice(), v.as_mut_slice());
        for (i, &gi) in g.as_slice().iter().enumerate() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= state.lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `θ ← θ − lr·g`.
pub fn sgd_step(params: &mut [&mut Matrix], grads: &[&Matrix], lr: f64) -> Result<()> {
    check_aligned(params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        for (pi, gi) in p.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *pi -= lr * gi;
        }
    }
    Ok(())
}

/// A configured update rule together with its state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Adam(AdamState),
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, hyper: AdamHyper) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(lr, hyper)),
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
        }
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) -> Result<()> {
        match self {
            Optimizer::Adam(state) => adam_step(params, grads, state),
            Optimizer::Sgd { lr } => sgd_step(params, grads, *lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(m: &Matrix) -> Vec<u64> {
        m.as_slice().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut theta = Matrix::scalar(1.0);
        let g = Matrix::scalar(4.0);
        let mut st = AdamState::new(0.1, AdamHyper::default());
        adam_step(&mut [&mut theta], &[&g], &mut st).unwrap();
        let moved = 1.0 - theta.as_slice()[0];
        assert!((moved - 0.1).abs() <= 1e-8, "{moved}");
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_leaves_params_but_counts_step() {
        let mut theta = Matrix::from_rows(&[[0.3, -2.0]]).unwrap();
        let before = theta.clone();
        let g = Matrix::zeros(1, 2);
        let mut st = AdamState::new(0.1, AdamHyper::default());
        adam_step(&mut [&mut theta], &[&g], &mut st).unwrap();
        adam_step(&mut [&mut theta], &[&g], &mut st).unwrap();
        assert_eq!(bits(&theta), bits(&before));
        assert_eq!(st.t, 2);
    }

    #[test]
    fn independent_states_do_not_interact() {
        let mut a = Matrix::scalar(1.0);
        let mut b = Matrix::scalar(-1.0);
        let mut sa = AdamState::new(0.01, AdamHyper::default());
        let mut sb = AdamState::new(0.01, AdamHyper::default());
        adam_step(&mut [&mut b], &[&Matrix::scalar(0.5)], &mut sb).unwrap();
        let (b_before, sb_before) = (b.clone(), sb.clone());
        for _ in 0..5 {
            adam_step(&mut [&mut a], &[&Matrix::scalar(2.0)], &mut sa).unwrap();
        }
        assert_eq!(bits(&b), bits(&b_before));
        assert_eq!(sb, sb_before);
        assert_eq!(
            serde_json::to_vec(&sb).unwrap(),
            serde_json::to_vec(&sb_before).unwrap()
        );
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = Matrix::from_rows(&[[0.1, 0.2], [0.3, 0.4]]).unwrap();
            let g = Matrix::from_rows(&[[1.0, -0.5], [0.25, 3.0]]).unwrap();
            let mut st = AdamState::new(1e-3, AdamHyper::default());
            for _ in 0..3 {
                adam_step(&mut [&mut p], &[&g], &mut st).unwrap();
            }
            (p, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let mut p = Matrix::zeros(2, 2);
        let g = Matrix::zeros(1, 2);
        let mut st = AdamState::new(0.1, AdamHyper::default());
        assert!(matches!(
            adam_step(&mut [&mut p], &[&g], &mut st),
            Err(Error::Contract(_))
        ));
        assert!(matches!(sgd_step(&mut [&mut p], &[], 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn sgd_scalar() {
        let mut p = Matrix::scalar(2.0);
        sgd_step(&mut [&mut p], &[&Matrix::scalar(1.0)], 0.5).unwrap();
        assert_eq!(p.as_slice(), &[1.5]);
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let mut p = Matrix::from_rows(&[[0.1, -0.7]]).unwrap();
        let before = p.clone();
        sgd_step(&mut [&mut p], &[&Matrix::from_rows(&[[3.0, 9.0]]).unwrap()], 0.0).unwrap();
        assert_eq!(bits(&p), bits(&before));
    }

    #[test]
    fn sgd_two_by_two_hand_step() {
        let mut p = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let g = Matrix::from_rows(&[[0.5, -1.0], [2.0, 0.0]]).unwrap();
        sgd_step(&mut [&mut p], &[&g], 0.1).unwrap();
        // 1-0.05, 2+0.1, 3-0.2, 4-0
        assert_eq!(p, Matrix::from_rows(&[[0.95, 2.1], [2.8, 4.0]]).unwrap());
    }
}
