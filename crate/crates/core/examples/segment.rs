//! Generates part candidates in a scene and assigns one to each manual
//! step, ranking against parts of the other scenes.

use dme::data::iou;
use dme::eval::{gen_synthetic, SyntheticConfig};
use dme::segment::{ranking_grid, select_parts, RankWeights, RankingPool, SegmentationParams};

fn main() -> dme::Result<()> {
    let s = gen_synthetic(&SyntheticConfig::default())?;
    let ds = &s.dataset;
    let scene = &ds.scenes()[0];
    let others: Vec<usize> = (0..ds.tasks().len())
        .filter(|&t| ds.part(&ds.tasks()[t].part_id).is_some_and(|p| p.scene_id != scene.id))
        .collect();
    let pool = RankingPool::build(ds, &others, &ranking_grid())?;

    let manual = ds.manuals().iter().find(|m| m.scene_id == scene.id).expect("scene has a manual");
    let steps = ds.manual_steps(&manual.id);
    let texts: Vec<&str> = steps.iter().map(|l| l.text.as_str()).collect();
    let params = [SegmentationParams::default(), SegmentationParams::coarse()];
    let sel = select_parts(scene, &texts, &pool, &params, &RankWeights::default())?;
    println!("{}: {} points, {} candidates", scene.id, scene.cloud.points.len(), sel.candidates.len());

    for (step, chosen) in steps.iter().zip(&sel.chosen) {
        let task = ds.tasks().iter().find(|t| t.instruction_id == step.id).expect("step has a task");
        let planted = &ds.part(&task.part_id).expect("part").point_indices;
        match chosen {
            Some(c) => println!("\"{}\" -> candidate {c}, IoU with planted part {:.2}", step.text, iou(&sel.candidates[*c], planted)),
            None => println!("\"{}\" -> no candidate", step.text),
        }
    }
    Ok(())
}
