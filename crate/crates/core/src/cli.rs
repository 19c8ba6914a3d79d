//! Command-line front end. Every command shares the config options, writes
//! TSV reports and echoes its resolved settings next to its outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{load_dataset, save_dataset, Dataset, LoadOptions};
use crate::dtw::trajectory_loss;
use crate::error::{Error, Result};
use crate::eval::{
    cross_validate, evaluate_model, export_embeddings, gen_synthetic, library_of, make_folds, task_inputs, Baseline, CvReport, FoldSplit,
};
use crate::features::{bag_of_words, FeatureSpec, Vocabulary};
use crate::model::EmbeddingModel;
use crate::retrieval::{bench, build_index_from_vectors, Retriever, TrajectoryIndex};
use crate::segment::{fit_rank_weights, planted_steps, ranking_grid, select_parts, RankingPool};
use crate::train::{finetune_h3, init_model, pretrain_h2pl, pretrain_h2tau, pretrain_sda, prepare, train, FeatureCache, TrainLog, TrainingData};

#[derive(Debug, Args)]
pub struct Common {
    /// key = value settings file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// override one setting, e.g. --set alpha=0.3
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// worker threads (0 = all cores)
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// ordered reductions for bit-identical reruns
    #[arg(long, global = true, value_name = "BOOL")]
    pub deterministic: Option<bool>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a dataset and check its integrity.
    Validate { dataset: PathBuf },
    /// Write part, trajectory and vocabulary features.
    Featurize {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss between two trajectories of a dataset.
    Dtw {
        #[arg(long)]
        dataset: PathBuf,
        a: String,
        b: String,
    },
    /// Generate a synthetic dataset.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Autoencoder pre-training of the lower layers.
    PretrainSda(TrainArgs),
    /// Margin pre-training of the intermediate spaces.
    PretrainMetric(TrainArgs),
    /// Fine-tuning of the joint space (the whole pipeline without --init).
    Finetune(TrainArgs),
    /// Embed the training library of a fold.
    Index {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve a trajectory for tasks (default: the test fold).
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long = "task")]
        tasks: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time indexed against exhaustive inference.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate and rank part candidates for a manual.
    Segment {
        scene: String,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        manual: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated metrics of a checkpoint or a method.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// checkpoint scored on the configured fold
        #[arg(long)]
        model: Option<PathBuf>,
        /// method trained and scored per fold when no checkpoint is given
        #[arg(long, default_value = "full", value_parser = parse_baseline)]
        baseline: Baseline,
        /// every fold instead of the configured one
        #[arg(long)]
        all_folds: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Task and trajectory embeddings as TSV.
    ExportEmbeddings {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// checkpoint to continue from
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Parser)]
#[command(name = "dme", version, about = "Multimodal embeddings for manipulation trajectory transfer")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_baseline(s: &str) -> std::result::Result<Baseline, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn resolve_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &c.config {
        cfg.apply_file(p)?;
    }
    cfg.apply_overrides(&c.overrides)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(w) = c.workers {
        cfg.train.workers = w;
    }
    if let Some(d) = c.deterministic {
        cfg.train.deterministic = d;
    }
    cfg.resolve()
}

fn load(path: &Path) -> Result<Dataset> {
    load_dataset(path, LoadOptions::default())
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the resolved settings beside an output file.
fn echo_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config");
    write(&out.with_file_name(name), &cfg.to_text())
}

struct Prepared {
    cache: FeatureCache,
    split: FoldSplit,
}

fn prepare_fold(ds: &Dataset, cfg: &RunConfig) -> Result<Prepared> {
    let cache = FeatureCache::build(ds, &FeatureSpec::default())?;
    let split = make_folds(ds, cfg.seed)?;
    Ok(Prepared { cache, split })
}

fn training_data(ds: &Dataset, p: &Prepared, cfg: &RunConfig) -> Result<TrainingData> {
    prepare(ds, &p.cache, &p.split.train(cfg.fold), p.split.validation(cfg.fold), &cfg.train)
}

fn load_matching(path: &Path, vocab: &Vocabulary) -> Result<EmbeddingModel> {
    let model = EmbeddingModel::load(path)?;
    if &model.vocab != vocab {
        return Err(Error::Config(format!(
            "checkpoint {} was trained on another split or dataset (vocabulary differs)",
            path.display()
        )));
    }
    Ok(model)
}

fn save_training(out: &Path, model: &EmbeddingModel, log: &TrainLog, cfg: &RunConfig) -> Result<()> {
    model.save(out)?;
    log::info!("saved {} ({} parameters, vocabulary of {})", out.display(), model.num_params(), model.vocab.len());
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".log.tsv");
    write(&out.with_file_name(name), &log.to_tsv())?;
    echo_config(out, cfg)
}

fn fold_library(ds: &Dataset, p: &Prepared, fold: usize) -> (Vec<String>, Vec<Vec<f64>>) {
    let lib = library_of(ds, &p.split.training_portion(fold));
    (
        lib.iter().map(|&i| ds.trajectories()[i].id.clone()).collect(),
        lib.iter().map(|&i| p.cache.trajectories[i].clone()).collect(),
    )
}

fn emit(out: Option<&Path>, text: &str, cfg: &RunConfig) -> Result<()> {
    match out {
        Some(p) => {
            write(p, text)?;
            echo_config(p, cfg)
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run_command(command: Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::Validate { dataset } => {
            let ds = load(&dataset)?;
            println!(
                "ok\tscenes={}\tparts={}\tmanuals={}\tinstructions={}\ttrajectories={}\ttasks={}",
                ds.scenes().len(),
                ds.parts().len(),
                ds.manuals().len(),
                ds.instructions().len(),
                ds.trajectories().len(),
                ds.tasks().len()
            );
        }
        Command::Featurize { dataset, out } => {
            let ds = load(&dataset)?;
            let cache = FeatureCache::build(&ds, &FeatureSpec::default())?;
            let table = |ids: Vec<&str>, rows: &[Vec<f64>]| {
                let mut s = String::new();
                for (id, r) in ids.iter().zip(rows) {
                    s.push_str(id);
                    for v in r {
                        let _ = write!(s, "\t{v}");
                    }
                    s.push('\n');
                }
                s
            };
            write(&out.join("parts.tsv"), &table(ds.parts().iter().map(|p| p.id.as_str()).collect(), &cache.parts))?;
            write(
                &out.join("trajectories.tsv"),
                &table(ds.trajectories().iter().map(|t| t.id.as_str()).collect(), &cache.trajectories),
            )?;
            let vocab = Vocabulary::build(ds.instructions().iter().map(|l| l.text.as_str()));
            let bags: Vec<Vec<f64>> = ds.instructions().iter().map(|l| bag_of_words(&l.text, &vocab).counts).collect();
            write(&out.join("instructions.tsv"), &table(ds.instructions().iter().map(|l| l.id.as_str()).collect(), &bags))?;
            write(&out.join("vocabulary.txt"), &(vocab.terms().join("\n") + "\n"))?;
            write(&out.join("config.txt"), &cfg.to_text())?;
        }
        Command::Dtw { dataset, a, b } => {
            let ds = load(&dataset)?;
            let ta = ds.trajectory(&a).ok_or_else(|| Error::NotFound(a.clone()))?;
            let tb = ds.trajectory(&b).ok_or_else(|| Error::NotFound(b.clone()))?;
            println!("{}", trajectory_loss(ta, tb, &ds.dtw_weights)?);
        }
        Command::GenSynth { out } => {
            let s = gen_synthetic(&cfg.synth)?;
            save_dataset(&s.dataset, &out)?;
            echo_config(&out, cfg)?;
            log::info!(
                "wrote {} tasks, {} trajectories; loss weight scale {:.4}",
                s.dataset.tasks().len(),
                s.dataset.trajectories().len(),
                s.calibration.scale
            );
        }
        Command::PretrainSda(a) => {
            let ds = load(&a.dataset)?;
            let p = prepare_fold(&ds, cfg)?;
            let data = training_data(&ds, &p, cfg)?;
            let mut model = match &a.init {
                Some(path) => load_matching(path, &data.vocab)?,
                None => init_model(&data, p.cache.spec, &cfg.train)?,
            };
            let mut log = TrainLog::default();
            cfg.train.install(|| pretrain_sda(&mut model, &data, &cfg.train, &mut log))??;
            save_training(&a.out, &model, &log, cfg)?;
        }
        Command::PretrainMetric(a) => {
            let ds = load(&a.dataset)?;
            let p = prepare_fold(&ds, cfg)?;
            let data = training_data(&ds, &p, cfg)?;
            let mut model = match &a.init {
                Some(path) => load_matching(path, &data.vocab)?,
                None => init_model(&data, p.cache.spec, &cfg.train)?,
            };
            let mut log = TrainLog::default();
            cfg.train.install(|| -> Result<()> {
                pretrain_h2pl(&mut model, &data, &cfg.train, &mut log)?;
                pretrain_h2tau(&mut model, &data, &cfg.train, &mut log)?;
                Ok(())
            })??;
            save_training(&a.out, &model, &log, cfg)?;
        }
        Command::Finetune(a) => {
            let ds = load(&a.dataset)?;
            let p = prepare_fold(&ds, cfg)?;
            let (model, log, summary) = match &a.init {
                Some(path) => {
                    let data = training_data(&ds, &p, cfg)?;
                    let mut model = load_matching(path, &data.vocab)?;
                    let mut log = TrainLog::default();
                    let summary = cfg.train.install(|| finetune_h3(&mut model, &data, &cfg.train, &mut log))??;
                    (model, log, summary)
                }
                None => {
                    let o = train(&ds, &p.cache, &p.split.train(cfg.fold), p.split.validation(cfg.fold), &cfg.train)?;
                    (o.model, o.log, o.summary)
                }
            };
            log::info!(
                "best epoch {} of {}; validation accuracy {:?}",
                summary.best_epoch,
                summary.epochs_run,
                summary.best_val_accuracy
            );
            save_training(&a.out, &model, &log, cfg)?;
        }
        Command::Index { model, dataset, out } => {
            let ds = load(&dataset)?;
            let model = EmbeddingModel::load(&model)?;
            let p = prepare_fold(&ds, cfg)?;
            let (ids, vectors) = fold_library(&ds, &p, cfg.fold);
            let index = build_index_from_vectors(&model, ids, &vectors)?;
            index.save(&out)?;
            echo_config(&out, cfg)?;
            log::info!("indexed {} trajectories", index.len());
        }
        Command::Infer { model, index, dataset, tasks, out } => {
            let ds = load(&dataset)?;
            let model = EmbeddingModel::load(&model)?;
            let index = TrajectoryIndex::load(&index)?;
            let r = Retriever::new(&index, &model)?;
            let cache = FeatureCache::build(&ds, &FeatureSpec::default())?;
            let which: Vec<usize> = if tasks.is_empty() {
                make_folds(&ds, cfg.seed)?.test(cfg.fold).to_vec()
            } else {
                tasks
                    .iter()
                    .map(|id| ds.tasks().iter().position(|t| &t.id == id).ok_or_else(|| Error::NotFound(id.clone())))
                    .collect::<Result<_>>()?
            };
            let mut s = String::from("task\ttrajectory\tsimilarity\n");
            for t in which {
                let (pc, lang) = task_inputs(&model, &ds, &cache, t)?;
                let (id, sim) = r.infer_id(&pc, &lang)?;
                let _ = writeln!(s, "{}\t{id}\t{sim}", ds.tasks()[t].id);
            }
            emit(out.as_deref(), &s, cfg)?;
        }
        Command::Bench { model, dataset, out } => {
            let ds = load(&dataset)?;
            let model = EmbeddingModel::load(&model)?;
            let cache = FeatureCache::build(&ds, &FeatureSpec::default())?;
            let ids: Vec<String> = ds.trajectories().iter().map(|t| t.id.clone()).collect();
            let index = build_index_from_vectors(&model, ids, &cache.trajectories)?;
            let r = Retriever::new(&index, &model)?;
            let queries = (0..ds.tasks().len()).map(|t| task_inputs(&model, &ds, &cache, t)).collect::<Result<Vec<_>>>()?;
            let report = bench(&r, &cache.trajectories, &queries, cfg.bench_reps)?;
            log::info!("speed-up {:.1}x over {} trajectories", report.speedup, report.library);
            emit(out.as_deref(), &report.to_tsv(), cfg)?;
        }
        Command::Segment { scene, dataset, manual, out } => {
            let ds = load(&dataset)?;
            let sc = ds.scene(&scene).ok_or_else(|| Error::NotFound(scene.clone()))?;
            let steps = ds.manual_steps(&manual);
            if steps.is_empty() {
                return Err(Error::NotFound(manual));
            }
            let others: Vec<usize> = (0..ds.tasks().len())
                .filter(|&t| ds.part(&ds.tasks()[t].part_id).is_some_and(|p| p.scene_id != scene))
                .collect();
            let pool = RankingPool::build(&ds, &others, &ranking_grid())?;
            let rank = if cfg.fit_rank_weights {
                let (rw, rate) = fit_rank_weights(&ds, &others, &pool, &cfg.segmentation, &cfg.rank, 40)?;
                log::info!("fitted feature weights {:?} (training step accuracy {rate:.3})", rw.w);
                rw
            } else {
                cfg.rank.clone()
            };
            let texts: Vec<&str> = steps.iter().map(|l| l.text.as_str()).collect();
            let sel = select_parts(sc, &texts, &pool, &cfg.segmentation, &rank)?;
            let mut s = String::from("candidate\tpoints\tindices");
            for l in &steps {
                let _ = write!(s, "\tpsi_hat:{}", l.id);
            }
            s.push_str("\tselected_for\n");
            for (i, c) in sel.candidates.iter().enumerate() {
                let total: f64 = sel.psi[i].iter().sum();
                let idx: Vec<String> = c.iter().map(usize::to_string).collect();
                let _ = write!(s, "{i}\t{}\t{}", c.len(), idx.join(","));
                for v in &sel.psi[i] {
                    let _ = write!(s, "\t{:.6}", if total > 0.0 { v * v / total } else { 0.0 });
                }
                let chosen: Vec<&str> = steps.iter().zip(&sel.chosen).filter(|(_, c)| **c == Some(i)).map(|(l, _)| l.id.as_str()).collect();
                let _ = writeln!(s, "\t{}", if chosen.is_empty() { "-".to_owned() } else { chosen.join(",") });
            }
            let planted = planted_steps(&ds, &scene, &(0..ds.tasks().len()).collect::<Vec<_>>());
            log::info!("{} candidates for {} steps ({} with a known part)", sel.candidates.len(), steps.len(), planted.len());
            write(&out, &s)?;
            echo_config(&out, cfg)?;
        }
        Command::Eval {
            dataset,
            model,
            baseline,
            all_folds,
            out,
        } => {
            let ds = load(&dataset)?;
            let p = prepare_fold(&ds, cfg)?;
            let folds: Vec<usize> = if all_folds { (0..p.split.folds.len()).collect() } else { vec![cfg.fold] };
            let report = match model {
                Some(path) => {
                    let model = EmbeddingModel::load(&path)?;
                    let mut r = CvReport {
                        label: path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned()),
                        folds: Vec::new(),
                    };
                    for &k in &folds {
                        let lib = library_of(&ds, &p.split.training_portion(k));
                        r.folds.push((k, evaluate_model(&model, &ds, &p.cache, p.split.test(k), &lib, cfg.train.accuracy_threshold)?));
                    }
                    r
                }
                None => cross_validate(&ds, &p.cache, &p.split, &folds, &cfg.train, &[baseline])?.remove(0),
            };
            let (acc, sd) = report.accuracy();
            log::info!("{}: accuracy {acc:.3} ± {sd:.3}", report.label);
            write(&out, &report.to_tsv())?;
            let mut curve = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
            curve.push(".curve.tsv");
            write(&out.with_file_name(curve), &report.curve_tsv())?;
            let mut outcomes = String::new();
            for (k, r) in &report.folds {
                for line in r.outcomes_tsv().lines().skip(usize::from(!outcomes.is_empty())) {
                    let _ = writeln!(outcomes, "{}\t{line}", if line.starts_with("task\t") { "fold".to_owned() } else { k.to_string() });
                }
            }
            let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
            name.push(".outcomes.tsv");
            write(&out.with_file_name(name), &outcomes)?;
            echo_config(&out, cfg)?;
        }
        Command::ExportEmbeddings { model, dataset, out } => {
            let ds = load(&dataset)?;
            let model = EmbeddingModel::load(&model)?;
            let cache = FeatureCache::build(&ds, &FeatureSpec::default())?;
            export_embeddings(&model, &ds, &cache, &out)?;
            echo_config(&out, cfg)?;
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let full = match Cli::try_parse_from(args) {
        Ok(f) => f,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let cfg = match resolve_config(&full.common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    log::info!("resolved configuration:\n{}", cfg.to_text().trim_end());
    match run_command(full.command, &cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Entry point of the `dme` binary.
pub fn main() -> ! {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    std::process::exit(run(std::env::args_os()))
}
