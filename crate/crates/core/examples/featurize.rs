//! Fixed-length inputs of one task: compact occupancy grids of the part,
//! a bag of words of the instruction and the normalized trajectory.

use dme::eval::{gen_synthetic, SyntheticConfig};
use dme::features::{bag_of_words, compact_grids, trajectory_vector, voxelize, FeatureSpec, Vocabulary};

fn main() -> dme::Result<()> {
    let s = gen_synthetic(&SyntheticConfig {
        concepts: 2,
        tasks_per_concept: 2,
        ..Default::default()
    })?;
    let ds = &s.dataset;
    let spec = FeatureSpec::default();
    let r = ds.resolve(&ds.tasks()[0]);

    let grid = voxelize(&r.scene.cloud, r.part, &spec.grid)?;
    let occupied = grid.values.iter().filter(|&&v| v > 0.0).count();
    println!("part {}: {} points, {} occupied cells of {}", r.part.id, r.part.point_indices.len(), occupied, grid.values.len());
    let compact = compact_grids(&grid, &spec.compact)?;
    println!("compact grids: {} values", compact.flattened().len());

    let vocab = Vocabulary::build(ds.instructions().iter().map(|l| l.text.as_str()));
    let bag = bag_of_words(&r.instruction.text, &vocab);
    println!("\"{}\" -> {} of {} terms", r.instruction.text, bag.counts.iter().filter(|&&c| c > 0.0).count(), vocab.len());

    let traj = trajectory_vector(r.optimal, &spec.trajectory)?;
    println!("trajectory {} with {} waypoints -> {} values", r.optimal.id, r.optimal.waypoints.len(), traj.len());
    Ok(())
}
