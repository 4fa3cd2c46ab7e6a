//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcil_core::calib::LabeledLogits;
use tcil_core::cil::train_task;
use tcil_core::datagen::gen_gaussian_stream;
use tcil_core::nnet::Architecture;
use tcil_core::{ClassId, IncrementalState, Result, StreamConfig, TaskStream, TrainConfig};

/// `n` uniformly random logit vectors over `k` classes with random labels.
pub fn random_logits(n: usize, k: usize, seed: u64) -> Vec<LabeledLogits> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let z = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
            LabeledLogits::new(z, ClassId(rng.random_range(1..=k)))
        })
        .collect()
}

/// Default stream trained through every task with a short schedule.
pub fn trained_state(
    memory_capacity: usize,
    epochs: usize,
) -> Result<(IncrementalState, TaskStream)> {
    let stream = gen_gaussian_stream(&StreamConfig::default())?;
    let arch = Architecture::desk_scale(stream.input_dim(), 0);
    let mut state = IncrementalState::new(&arch, memory_capacity, 0)?;
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    for t in 1..=stream.num_tasks() {
        train_task(&mut state, t, stream.classes(t), stream.train(t), &cfg)?;
        state
            .memory
            .update(stream.train(t), stream.classes(t), t as u64)?;
    }
    Ok((state, stream))
}
