//! Generates the synthetic benchmark and saves it as a dataset file.

use dme::data::{load_dataset, save_dataset, LoadOptions};
use dme::eval::{gen_synthetic, SyntheticConfig};

fn main() -> dme::Result<()> {
    let s = gen_synthetic(&SyntheticConfig::default())?;
    let ds = &s.dataset;
    println!(
        "{} scenes, {} parts, {} instructions, {} trajectories, {} tasks",
        ds.scenes().len(),
        ds.parts().len(),
        ds.instructions().len(),
        ds.trajectories().len(),
        ds.tasks().len()
    );
    println!("loss weights scaled by {:.4}", s.calibration.scale);

    let path = std::env::temp_dir().join("dme_synthetic.json");
    save_dataset(ds, &path)?;
    let back = load_dataset(&path, LoadOptions::default())?;
    println!("saved to {} and reloaded {} tasks", path.display(), back.tasks().len());
    Ok(())
}
