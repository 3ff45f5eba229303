use std::borrow::Borrow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, loss_and_grad, output_loss, AdamState, Example, Head, MlpParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 1e-3, batch_size: 32, epochs: 100, beta1: 0.9, beta2: 0.999, eps: 1e-8, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid(name, "must lie in (0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("eps", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn mean_loss<B: Borrow<Example>>(params: &MlpParams, examples: &[B], head: Head) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty("examples"));
    }
    let mut total = 0.0;
    for ex in examples {
        let ex = ex.borrow();
        let out = params.forward(&ex.x)?;
        total += output_loss(&out, ex.target, head)?.0;
    }
    Ok(total / examples.len() as f64)
}

/// Minibatch Adam over shuffled epochs; deterministic for a fixed seed.
pub fn fit(params: &mut MlpParams, examples: &[Example], head: Head, config: &TrainConfig) -> Result<FitReport> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let initial_loss = mean_loss(params, examples, head)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamState::new(params);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut batch: Vec<&Example> = Vec::with_capacity(config.batch_size);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| &examples[i]));
            let (loss, grad) = loss_and_grad(params, &batch, head)?;
            adam_step(params, &grad, &mut state, config)?;
            sum += loss;
            n_batches += 1;
        }
        epoch_losses.push(sum / n_batches as f64);
    }
    let final_loss = mean_loss(params, examples, head)?;
    Ok(FitReport { initial_loss, final_loss, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_mlp;

    #[test]
    fn separable_toy_problem_is_solved() {
        // Two classes split by the sign of x0 + x1.
        let examples: Vec<Example> = (0..40)
            .map(|i| {
                let a = (i as f64 * 0.37).sin();
                let b = (i as f64 * 0.91).cos();
                Example::class(vec![a, b], usize::from(a + b > 0.0))
            })
            .collect();
        let mut p = init_mlp(&[2, 8, 2], 3).unwrap();
        let cfg = TrainConfig { learning_rate: 0.01, batch_size: 8, epochs: 500, seed: 1, ..TrainConfig::default() };
        let report = fit(&mut p, &examples, Head::SoftmaxCrossEntropy, &cfg).unwrap();
        assert!(report.final_loss < report.initial_loss);
        let correct = examples
            .iter()
            .filter(|ex| {
                let out = p.forward(&ex.x).unwrap();
                let pred = usize::from(out[1] > out[0]);
                ex.target == super::super::Target::Class(pred)
            })
            .count();
        assert_eq!(correct, examples.len());
    }

    #[test]
    fn fit_is_deterministic() {
        let examples: Vec<Example> = (0..10).map(|i| Example::value(vec![i as f64 / 10.0], 0, i as f64)).collect();
        let cfg = TrainConfig { epochs: 5, batch_size: 3, seed: 9, ..TrainConfig::default() };
        let mut a = init_mlp(&[1, 4, 1], 0).unwrap();
        let mut b = a.clone();
        let ra = fit(&mut a, &examples, Head::SquaredError, &cfg).unwrap();
        let rb = fit(&mut b, &examples, Head::SquaredError, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = TrainConfig { beta1: 1.0, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        let mut p = init_mlp(&[1, 1], 0).unwrap();
        assert!(fit(&mut p, &[], Head::SquaredError, &TrainConfig::default()).is_err());
    }
}
