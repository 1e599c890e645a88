//! Tiny stream and configuration shared by integration tests.
#![allow(dead_code)]

use tfmoe::config::{DataSource, ExperimentConfig, LearningRates, Protocol};
use tfmoe::data::{generate_stream, StreamSpec, TaskDataset};

pub fn spec(seed: u64) -> StreamSpec {
    StreamSpec {
        num_tasks: 3,
        initial_nodes: 10,
        nodes_per_task: 4,
        num_clusters: 2,
        steps_per_day: 4,
        days_per_task: 28,
        noise_level: 0.05,
        jitter: 0.05,
        drift: 0.1,
        seed,
        ..Default::default()
    }
}

pub fn config(protocol: Protocol, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        protocol,
        seed,
        num_experts: 2,
        pretrain_latent: 3,
        pretrain_hidden: [8, 4],
        latent: 3,
        reconstructor_hidden: [8, 4],
        embed: 3,
        input_steps: 4,
        output_steps: 4,
        horizons: vec![1, 4],
        pretrain_epochs: 20,
        dec_epochs: 5,
        reconstructor_epochs: 20,
        epochs_first: 2,
        epochs_later: 2,
        batch_size: 16,
        sample_fraction: 0.2,
        replay_fraction: 0.2,
        lr: LearningRates { pretrain: 1e-3, reconstructor: 1e-3, predictor: 1e-2 },
        data: DataSource::Synthetic(spec(seed)),
        ..Default::default()
    }
}

pub fn tasks(seed: u64) -> Vec<TaskDataset> {
    generate_stream(&spec(seed)).unwrap().tasks
}
