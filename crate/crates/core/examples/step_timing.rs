//! Times forward and backward passes of both default models on one batch.
//! `REPS` sets the repetition count.

use std::time::Instant;

use modicl_core::models::{Model, ModelConfig};
use modicl_core::taskgen::{init_teacher, mask_set, sample_batch, DistributionName, Support, TeacherDims};

fn main() {
    let teacher = init_teacher(0, TeacherDims::default()).unwrap();
    let dist = mask_set(DistributionName::Train(Support::ConnectedPlus), 6).unwrap();
    let batch = sample_batch(&teacher, &dist, 32, 1, 128).unwrap();
    for cfg in [ModelConfig::vanilla(), ModelConfig::hyper()] {
        let model = Model::new(cfg.clone(), 0).unwrap();
        let reps: usize = std::env::var("REPS").ok().and_then(|v| v.parse().ok()).unwrap_or(5);
        let start = Instant::now();
        for _ in 0..reps {
            model.predict(&batch).unwrap();
        }
        let fwd = start.elapsed().as_secs_f64() / reps as f64;
        let start = Instant::now();
        for _ in 0..reps {
            model.loss_and_grads(&batch).unwrap();
        }
        let step = start.elapsed().as_secs_f64() / reps as f64;
        println!("{:?}: forward {fwd:.3} s, forward+backward {step:.3} s", cfg.kind);
    }
}
