//! Seeded minibatch SGD loop shared by every training path.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{sgd_step, OptimizerState, SgdConfig, Tensor};

/// Optimizer state plus shuffle stream, advanced one epoch at a time.
pub struct EpochTrainer {
    rng: ChaCha8Rng,
    state: OptimizerState,
    batch_size: usize,
    sgd: SgdConfig,
}

impl EpochTrainer {
    pub fn new(params: &[Tensor], batch_size: usize, sgd: SgdConfig, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: OptimizerState::new(params),
            batch_size: batch_size.max(1),
            sgd,
        }
    }

    /// One pass over `n` examples in fresh random order.
    ///
    /// `grad_fn` receives the current parameters and the batch positions (into
    /// `0..n`) and returns the batch mean loss and gradients. Returns the
    /// sample-weighted mean loss seen during the pass.
    pub fn run_epoch<F>(&mut self, params: &mut [Tensor], n: usize, mut grad_fn: F) -> Result<f64>
    where
        F: FnMut(&[Tensor], &[usize]) -> Result<(f64, Vec<Tensor>)>,
    {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for batch in order.chunks(self.batch_size) {
            let (loss, grads) = grad_fn(params, batch)?;
            total += loss * batch.len() as f64;
            sgd_step(params, &grads, &mut self.state, &self.sgd)?;
        }
        self.state.next_epoch();
        Ok(if n > 0 { total / n as f64 } else { 0.0 })
    }
}

/// `epochs` calls of [`EpochTrainer::run_epoch`]; returns the per-epoch losses.
pub fn train_minibatch<F>(
    params: &mut [Tensor],
    n: usize,
    epochs: usize,
    batch_size: usize,
    sgd: &SgdConfig,
    seed: u64,
    mut grad_fn: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&[Tensor], &[usize]) -> Result<(f64, Vec<Tensor>)>,
{
    let mut trainer = EpochTrainer::new(params, batch_size, *sgd, seed);
    (0..epochs)
        .map(|_| trainer.run_epoch(params, n, &mut grad_fn))
        .collect()
}
