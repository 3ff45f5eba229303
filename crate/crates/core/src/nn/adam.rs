use serde::{Deserialize, Serialize};

use super::{MlpParams, TrainConfig};
use crate::{Error, Result};

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: MlpParams,
    pub v: MlpParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        AdamState { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut MlpParams, grad: &MlpParams, state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    if !params.same_shape(grad) || !params.same_shape(&state.m) || !params.same_shape(&state.v) {
        return Err(Error::invalid("grad", "shape differs from parameters"));
    }
    state.step += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let step = i32::try_from(state.step).unwrap_or(i32::MAX);
    let c1 = 1.0 - b1.powi(step);
    let c2 = 1.0 - b2.powi(step);
    let lr = config.learning_rate;
    for (((p, g), m), v) in params.iter_mut().zip(grad.iter()).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + config.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;

    fn scalar(v: f64) -> MlpParams {
        MlpParams { layers: vec![Dense { inputs: 1, outputs: 1, weights: vec![v], biases: vec![0.0] }] }
    }

    fn config(lr: f64) -> TrainConfig {
        TrainConfig { learning_rate: lr, ..TrainConfig::default() }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar(1.5);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &scalar(0.0), &mut st, &config(0.1)).unwrap();
        assert_eq!(p, scalar(1.5));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn converges_on_quadratic() {
        // f(w) = (w - 3)^2
        let mut p = scalar(0.0);
        let mut st = AdamState::new(&p);
        for _ in 0..200 {
            let w = p.layers[0].weights[0];
            let mut g = scalar(2.0 * (w - 3.0));
            g.layers[0].biases[0] = 0.0;
            adam_step(&mut p, &g, &mut st, &config(0.1)).unwrap();
        }
        assert!((p.layers[0].weights[0] - 3.0).abs() < 1e-3, "{}", p.layers[0].weights[0]);
    }

    #[test]
    fn matches_scalar_recurrence() {
        // Two parameters: weight and bias of a 1x1 layer.
        let cfg = config(0.01);
        let mut p = scalar(0.5);
        p.layers[0].biases[0] = -0.25;
        let mut st = AdamState::new(&p);
        let grads = [(0.3, -1.2), (-0.1, 0.4), (0.7, 0.0)];
        let mut expect = [0.5f64, -0.25];
        let mut m = [0.0f64; 2];
        let mut v = [0.0f64; 2];
        for (k, (gw, gb)) in grads.iter().enumerate() {
            let mut g = scalar(*gw);
            g.layers[0].biases[0] = *gb;
            adam_step(&mut p, &g, &mut st, &cfg).unwrap();
            let t = (k + 1) as i32;
            for (i, gi) in [*gw, *gb].into_iter().enumerate() {
                m[i] = 0.9 * m[i] + 0.1 * gi;
                v[i] = 0.999 * v[i] + 0.001 * gi * gi;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                expect[i] -= 0.01 * mh / (vh.sqrt() + 1e-8);
            }
            assert_eq!(p.layers[0].weights[0], expect[0]);
            assert_eq!(p.layers[0].biases[0], expect[1]);
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut p = scalar(0.0);
        let mut st = AdamState::new(&p);
        let g = MlpParams::zeros(&[2, 1]).unwrap();
        assert!(adam_step(&mut p, &g, &mut st, &config(0.1)).is_err());
    }
}
