//! Implementations of the CLI commands. Each writes human-readable lines to
//! `out` and machine-readable artifacts under the experiment output directory.

use std::io::Write;
use std::path::{Path, PathBuf};

use peft_forge::analysis::{bench_speedup, head_correlation, layer_sweep, mean_ci95};
use peft_forge::archive::WeightArchive;
use peft_forge::data::{load_image_folder, sample_episode, synth_dataset, Dataset, Episode};
use peft_forge::finetune::{finetune_episode, select_lr};
use peft_forge::peft::PeftSpec;
use peft_forge::prefit::{prefit, PrefitConfig};
use peft_forge::rng;
use peft_forge::vit::ViTModel;
use serde::Serialize;

use crate::config::{streams, DatasetSection, ExperimentConfig, Weights};
use crate::error::CliError;
use crate::store::{read_store, ResultsStore, StoredReport};
use crate::summary::summarize;

pub type Out<'a> = &'a mut dyn Write;

pub fn load_backbone(cfg: &ExperimentConfig) -> Result<ViTModel<f32>, CliError> {
    Ok(match &cfg.weights {
        Weights::Random(seed) => ViTModel::random(cfg.vit.clone(), *seed)?,
        Weights::Archive(path) => WeightArchive::load(path)?.into_model(&cfg.vit)?,
        Weights::Prefit(section) => {
            let seed = rng::split(cfg.seed, streams::PREFIT);
            let base = synth_dataset(&section.base, "prefit-base", &mut rng::rng(rng::split(seed, 0)));
            let train = PrefitConfig { seed: rng::split(seed, 1), ..section.train.clone() };
            log::info!("pre-fitting backbone for {} steps", train.steps);
            prefit(&cfg.vit, &base, &train)?
        }
    })
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Vec<Dataset>, CliError> {
    let mut out = Vec::with_capacity(cfg.datasets.len());
    for (i, section) in cfg.datasets.iter().enumerate() {
        let ds = match section {
            DatasetSection::Synthetic { domain, synth } => {
                synth_dataset(synth, domain, &mut rng::rng(rng::split(cfg.seed, streams::DATASET + i as u64)))
            }
            DatasetSection::Folder { .. } => {
                let (path, opts) = section.folder_options(cfg.vit.image_size).expect("folder section");
                let (ds, manifest) = load_image_folder(&path, &opts)?;
                let dir = cfg.output_dir.join("manifests");
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join(format!("{}.json", manifest.domain)), manifest.to_json()?)?;
                ds
            }
        };
        out.push(ds);
    }
    Ok(out)
}

fn require_datasets(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.datasets.is_empty() {
        return Err(CliError::Config(vec!["this command needs at least one [[datasets]] entry".into()]));
    }
    Ok(())
}

fn require_methods(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.specs.is_empty() {
        return Err(CliError::Config(vec!["no methods given (config `methods` or --method)".into()]));
    }
    Ok(())
}

/// `n` tasks starting at task index `offset` of the experiment's sampler stream.
pub fn draw_episodes(ds: &Dataset, cfg: &ExperimentConfig, offset: usize, n: usize) -> Result<Vec<Episode>, CliError> {
    (0..n)
        .map(|i| Ok(sample_episode(ds, &cfg.sampler, cfg.sampler.task_seed(offset + i))?))
        .collect()
}

fn validation_lr(model: &ViTModel<f32>, spec: &PeftSpec, ds: &Dataset, cfg: &ExperimentConfig) -> Result<f64, CliError> {
    if cfg.finetune.lr_grid.len() == 1 {
        return Ok(cfg.finetune.lr_grid[0]);
    }
    let val = draw_episodes(ds, cfg, streams::VALIDATION_OFFSET, cfg.finetune.n_validation_tasks)?;
    Ok(select_lr(model, spec, &val, &cfg.finetune)?.lr)
}

fn create_out_dir(cfg: &ExperimentConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| CliError::Io(format!("cannot create output directory {}: {e}", cfg.output_dir.display())))
}

/// Refuses to append to a store whose records of this experiment carry another hash.
fn check_store_hash(cfg: &ExperimentConfig, hash: &str) -> Result<(), CliError> {
    let path = cfg.store_path();
    if !path.exists() {
        return Ok(());
    }
    let contents = read_store(&path)?;
    match contents.records.iter().find(|r| r.experiment == cfg.name && r.config_hash != hash) {
        Some(r) => Err(CliError::Integrity(format!(
            "{} holds experiment `{}` with config hash {}, this config hashes to {}",
            path.display(),
            cfg.name,
            &r.config_hash[..r.config_hash.len().min(12)],
            &hash[..12]
        ))),
        None => Ok(()),
    }
}

pub fn finetune(cfg: &ExperimentConfig, out: Out) -> Result<(), CliError> {
    require_methods(cfg)?;
    require_datasets(cfg)?;
    let hash = cfg.hash();
    check_store_hash(cfg, &hash)?;
    let mut store = ResultsStore::open(cfg.store_path())?;
    if cfg.episodes == 0 {
        writeln!(out, "0 episodes requested; nothing to run")?;
        return Ok(());
    }
    let model = load_backbone(cfg)?;
    let datasets = load_datasets(cfg)?;
    for ds in &datasets {
        let episodes = draw_episodes(ds, cfg, 0, cfg.episodes)?;
        for spec in &cfg.specs {
            let lr = validation_lr(&model, spec, ds, cfg)?;
            let mut accs = Vec::with_capacity(episodes.len());
            for ep in &episodes {
                let report = finetune_episode(&model, spec, ep, &cfg.finetune, lr)?;
                accs.push(report.accuracy);
                store.append(&StoredReport { experiment: cfg.name.clone(), config_hash: hash.clone(), report })?;
            }
            let m = mean_ci95(&accs);
            writeln!(out, "{}\t{}\tlr={}\taccuracy={:.4}\tci95={:.4}\tn={}", ds.domain, spec, lr, m.mean, m.ci95, m.n)?;
        }
    }
    writeln!(out, "results appended to {}", store.path().display())?;
    Ok(())
}

pub fn sweep_layers(cfg: &ExperimentConfig, out: Out) -> Result<(), CliError> {
    require_methods(cfg)?;
    require_datasets(cfg)?;
    create_out_dir(cfg)?;
    let model = load_backbone(cfg)?;
    let datasets = load_datasets(cfg)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["domain", "spec", "position", "layers", "lr", "mean_accuracy", "ci95", "episodes"]).map_err(csv_err)?;
    for ds in &datasets {
        let episodes = draw_episodes(ds, cfg, 0, cfg.episodes)?;
        for spec in &cfg.specs {
            let lr = validation_lr(&model, spec, ds, cfg)?;
            for row in layer_sweep(spec, &model, &episodes, &cfg.finetune, lr)? {
                let layers = row.layers.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
                writeln!(out, "{}\t{}\tlayers={}\taccuracy={:.4}\tci95={:.4}", ds.domain, spec, layers, row.mean_accuracy, row.ci95)?;
                w.write_record([
                    ds.domain.clone(),
                    spec.to_string(),
                    row.position.to_string(),
                    layers,
                    lr.to_string(),
                    row.mean_accuracy.to_string(),
                    row.ci95.to_string(),
                    row.accuracies.len().to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    write_artifact(&cfg.output_dir.join("sweep_layers.csv"), &w.into_inner().map_err(|e| CliError::Io(e.to_string()))?, out)
}

#[derive(Serialize)]
struct HeadRecord {
    domain: String,
    layer: usize,
    heads: usize,
    examples: usize,
    mean_off_diagonal: f64,
    values: Vec<f64>,
}

pub fn analyze_heads(cfg: &ExperimentConfig, out: Out) -> Result<(), CliError> {
    require_datasets(cfg)?;
    create_out_dir(cfg)?;
    let model = load_backbone(cfg)?;
    let datasets = load_datasets(cfg)?;
    let mut records = Vec::new();
    for ds in &datasets {
        let episodes = draw_episodes(ds, cfg, 0, cfg.analysis.head_episodes)?;
        for layer in 0..cfg.vit.depth {
            let m = head_correlation(&model, &episodes, layer)?;
            let h = m.heads;
            let off = if h > 1 {
                (0..h).flat_map(|i| (0..h).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m.get(i, j)).sum::<f64>()
                    / (h * (h - 1)) as f64
            } else {
                f64::NAN
            };
            writeln!(out, "{}\tlayer={}\tmean_off_diagonal={:.4}\texamples={}", ds.domain, layer, off, m.examples)?;
            records.push(HeadRecord { domain: ds.domain.clone(), layer, heads: h, examples: m.examples, mean_off_diagonal: off, values: m.values });
        }
    }
    let json = serde_json::to_vec_pretty(&records).map_err(peft_forge::Error::from)?;
    write_artifact(&cfg.output_dir.join("head_correlation.json"), &json, out)
}

pub fn bench_speed(cfg: &ExperimentConfig, out: Out) -> Result<(), CliError> {
    require_methods(cfg)?;
    require_datasets(cfg)?;
    create_out_dir(cfg)?;
    let model = load_backbone(cfg)?;
    let datasets = load_datasets(cfg)?;
    let episodes = draw_episodes(&datasets[0], cfg, 0, cfg.analysis.bench_episodes)?;
    let rows = bench_speedup(&cfg.specs, &model, &episodes, &cfg.finetune, &cfg.analysis.bench)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["spec", "median_step_ms", "ratio_vs_full", "steps_timed"]).map_err(csv_err)?;
    for r in &rows {
        writeln!(out, "{}\tmedian_step_ms={:.3}\tratio_vs_full={:.2}", r.spec, r.median_step_secs * 1e3, r.ratio)?;
        w.write_record([r.spec.clone(), (r.median_step_secs * 1e3).to_string(), r.ratio.to_string(), r.steps_timed.to_string()])
            .map_err(csv_err)?;
    }
    write_artifact(&cfg.output_dir.join("bench_speed.csv"), &w.into_inner().map_err(|e| CliError::Io(e.to_string()))?, out)
}

pub fn count_params(cfg: &ExperimentConfig, out: Out) -> Result<(), CliError> {
    require_methods(cfg)?;
    writeln!(out, "spec\tadded\ttrainable\ttotal\tratio")?;
    for spec in &cfg.specs {
        let c = spec.count_report(&cfg.vit, cfg.max_way());
        writeln!(out, "{}\t{}\t{}\t{}\t{:.6}", spec, c.added_params, c.trainable_params, c.total_params, c.ratio)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TaskRecord<'a> {
    domain: &'a str,
    index: usize,
    seed: u64,
    num_classes: usize,
    classes: Vec<&'a str>,
    support: &'a [usize],
    query: &'a [usize],
}

pub fn sample_tasks(cfg: &ExperimentConfig, out: Out) -> Result<(), CliError> {
    require_datasets(cfg)?;
    create_out_dir(cfg)?;
    let datasets = load_datasets(cfg)?;
    let mut lines = Vec::new();
    for ds in &datasets {
        for (index, ep) in draw_episodes(ds, cfg, 0, cfg.episodes)?.iter().enumerate() {
            let rec = TaskRecord {
                domain: &ds.domain,
                index,
                seed: ep.seed,
                num_classes: ep.num_classes,
                classes: ep.classes.iter().map(|&c| ds.class_names()[c].as_str()).collect(),
                support: &ep.support,
                query: &ep.query,
            };
            let line = serde_json::to_string(&rec).map_err(peft_forge::Error::from)?;
            writeln!(out, "{line}")?;
            lines.extend_from_slice(line.as_bytes());
            lines.push(b'\n');
        }
    }
    let path = cfg.output_dir.join("tasks.jsonl");
    std::fs::write(&path, lines).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Aggregates `store` into `summary.csv` in `out_dir` and prints the table.
pub fn summarize_store(store: &Path, out_dir: &Path, out: Out) -> Result<(), CliError> {
    let contents = read_store(store)?;
    if !contents.malformed.is_empty() {
        log::warn!("skipped {} malformed line(s) in {}", contents.malformed.len(), store.display());
    }
    let table = summarize(&contents.records);
    write!(out, "{}", table.to_text())?;
    std::fs::create_dir_all(out_dir)?;
    write_artifact(&out_dir.join("summary.csv"), table.to_csv()?.as_bytes(), out)
}

fn write_artifact(path: &PathBuf, bytes: &[u8], out: Out) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    writeln!(out, "wrote {}", path.display())?;
    Ok(())
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(format!("csv: {e}"))
}
