//! Trajectory loss between demonstrations of the same task and of
//! different concepts.

use dme::dtw::trajectory_loss;
use dme::eval::{gen_synthetic, SyntheticConfig};

fn main() -> dme::Result<()> {
    let s = gen_synthetic(&SyntheticConfig {
        concepts: 3,
        tasks_per_concept: 2,
        ..Default::default()
    })?;
    let ds = &s.dataset;
    // the generator stores weights calibrated to its concepts
    let w = ds.dtw_weights;
    for task in ds.tasks().iter().take(3) {
        let optimal = ds.trajectory(&task.optimal).expect("optimal demo");
        for id in &task.demos {
            let t = ds.trajectory(id).expect("demo");
            println!("{:>12} vs {:>12}: {:7.3}", task.optimal, id, trajectory_loss(optimal, t, &w)?);
        }
    }
    Ok(())
}
