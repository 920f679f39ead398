//! Command implementations: generate, train, infer, evaluate and the
//! iteration-sweep ablation. Every command writes its artifacts plus the
//! resolved config under the run directory and is reproducible bit-for-bit
//! from that echo.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use sgvi_core::factor_graph::{NodeId, NodeKind};
use sgvi_core::inference::{derive_seed, infer_graph, EmdConfig, NodeInference, NodePosterior, TraceEntry};
use sgvi_core::learning::{curve_to_csv, train, Checkpoint};
use sgvi_core::metrics::{
    build_report, ground_truth_triplets, rank_triplets, GroundTruthTriplet, MatchMode,
    RecallReport, TripletPrediction,
};
use sgvi_core::scoring::{FeatureModel, ModelArch};
use sgvi_core::synthdata::{
    category_repeat_factors, drop_instances, generate_dataset, group_split, load_dataset,
    oversample_plan, save_dataset, seeded_rng, Dataset, Sample, SplitTag,
};

use crate::config::{Echo, ExperimentConfig, Setting};

/// Which manifest split a consuming command reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitChoice {
    Train,
    Eval,
    All,
}

// Seed salts keeping the stages' RNG streams disjoint.
const SALT_MODEL_INIT: u64 = 0x01;
const SALT_RESAMPLE: u64 = 0x02;
const SALT_INFER_BASE: u64 = 0x1000;

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .context("building worker pool")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn run_generate(config: &ExperimentConfig, out: &Path) -> Result<()> {
    let dataset = generate_dataset(&config.generator, config.count, config.eval_fraction)?;
    fs::create_dir_all(out)?;
    save_dataset(&dataset, out)?;
    crate::config::write_echo(out, &Echo { command: "generate", data: None, model: None, config })?;
    let eval = dataset.manifest.split.iter().filter(|&&t| t == SplitTag::Eval).count();
    println!(
        "generate: {} instances ({} train, {eval} eval) under {}",
        dataset.samples.len(),
        dataset.samples.len() - eval,
        out.display()
    );
    Ok(())
}

fn model_arch(config: &ExperimentConfig) -> ModelArch {
    ModelArch::new(config.generator.d, config.generator.vocab(), config.hidden.clone())
        .with_pair_mode(config.pair_score_mode)
}

/// Bi-level resampling of the training split: instance-level over-sampling by
/// repeat factor, then per-copy predicate drop-out.
fn resample_train_set(config: &ExperimentConfig, train_set: &[Sample]) -> Result<Vec<Sample>> {
    let plan = oversample_plan(train_set, &config.resample)?;
    let counts =
        sgvi_core::synthdata::category_counts(train_set, config.generator.v_p);
    let factors = category_repeat_factors(&counts, config.resample.repeat_factor);
    let mut out = Vec::with_capacity(plan.len());
    for (copy, &index) in plan.iter().enumerate() {
        let sample = &train_set[index];
        if sample.instance.num_predicates() == 0 {
            out.push(sample.clone());
            continue;
        }
        let mut rng = seeded_rng(derive_seed(config.seed, SALT_RESAMPLE + copy as u64));
        out.push(drop_instances(sample, &factors, &config.resample, &mut rng)?);
    }
    Ok(out)
}

pub fn run_train(config: &ExperimentConfig, data: &Path, out: &Path) -> Result<()> {
    let dataset = load_dataset(data)?;
    let train_refs = dataset.split_samples(SplitTag::Train);
    let eval_refs = dataset.split_samples(SplitTag::Eval);
    let mut train_set: Vec<Sample> = train_refs.into_iter().cloned().collect();
    if config.resample_enabled {
        train_set = resample_train_set(config, &train_set)?;
    }
    let eval_set: Vec<Sample> = eval_refs.into_iter().cloned().collect();

    let model = FeatureModel::init(model_arch(config), derive_seed(config.seed, SALT_MODEL_INIT))?;
    let output = train(
        &model,
        &train_set,
        if eval_set.is_empty() { None } else { Some(&eval_set) },
        &config.train,
    )?;

    let checkpoint = Checkpoint {
        model: output.model,
        optimizer: Some(output.optimizer),
        epochs_trained: config.train.epochs,
    };
    fs::create_dir_all(out)?;
    write_text(&out.join("checkpoint.json"), &checkpoint.to_json()?)?;
    write_text(&out.join("loss_curve.csv"), &curve_to_csv(&output.curve))?;
    crate::config::write_echo(
        out,
        &Echo { command: "train", data: Some(data.display().to_string()), model: None, config },
    )?;
    let first = output.curve.first().unwrap();
    let last = output.curve.last().unwrap();
    println!(
        "train: {} instances, loss {:.4} -> {:.4} over {} epochs",
        train_set.len(),
        first.train_loss,
        last.train_loss,
        config.train.epochs
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<FeatureModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    // accept either a checkpoint or a bare model file
    if let Ok(checkpoint) = Checkpoint::from_json(&text) {
        return Ok(checkpoint.model);
    }
    Ok(FeatureModel::from_json(&text)?)
}

fn split_indices(dataset: &Dataset, split: SplitChoice) -> Vec<usize> {
    dataset
        .manifest
        .split
        .iter()
        .enumerate()
        .filter(|(_, &tag)| match split {
            SplitChoice::Train => tag == SplitTag::Train,
            SplitChoice::Eval => tag == SplitTag::Eval,
            SplitChoice::All => true,
        })
        .map(|(i, _)| i)
        .collect()
}

/// Per-node inference over the chosen instances, parallel across instances
/// with per-instance seeds derived from the master seed and instance id.
fn infer_split(
    config: &ExperimentConfig,
    emd: &EmdConfig,
    dataset: &Dataset,
    indices: &[usize],
    model: &FeatureModel,
) -> Result<Vec<BTreeMap<NodeId, NodeInference>>> {
    let pool = thread_pool(config.workers)?;
    let results: Vec<sgvi_core::Result<BTreeMap<NodeId, NodeInference>>> = pool.install(|| {
        indices
            .par_iter()
            .map(|&i| {
                let seed = derive_seed(config.seed, SALT_INFER_BASE + i as u64);
                infer_graph(model, &dataset.samples[i].instance, emd, seed)
            })
            .collect()
    });
    results.into_iter().collect::<sgvi_core::Result<Vec<_>>>().map_err(Into::into)
}

#[derive(Serialize)]
struct NodeReport<'a> {
    id: usize,
    kind: &'a str,
    map_label: usize,
    log_posterior: &'a [f64],
    iterations_used: usize,
    elbo_trace: &'a [TraceEntry],
}

#[derive(Serialize)]
struct InstanceReport<'a> {
    instance: usize,
    nodes: Vec<NodeReport<'a>>,
}

pub fn run_infer(
    config: &ExperimentConfig,
    data: &Path,
    model_path: &Path,
    split: SplitChoice,
    out: &Path,
) -> Result<()> {
    let dataset = load_dataset(data)?;
    let model = load_model(model_path)?;
    let indices = split_indices(&dataset, split);
    let results = infer_split(config, &config.emd, &dataset, &indices, &model)?;

    fs::create_dir_all(out.join("inference"))?;
    for (&index, inferences) in indices.iter().zip(&results) {
        let nodes: Vec<NodeReport> = inferences
            .iter()
            .map(|(node, inference)| NodeReport {
                id: node.index,
                kind: node.kind.name(),
                map_label: inference.posterior.map_label,
                log_posterior: &inference.posterior.log_posterior,
                iterations_used: inference.state.iterations_used,
                elbo_trace: &inference.state.trace,
            })
            .collect();
        let report = InstanceReport { instance: index, nodes };
        write_text(
            &out.join("inference").join(format!("{index:05}.json")),
            &serde_json::to_string_pretty(&report)?,
        )?;
    }
    crate::config::write_echo(
        out,
        &Echo {
            command: "infer",
            data: Some(data.display().to_string()),
            model: Some(model_path.display().to_string()),
            config,
        },
    )?;
    println!("infer: wrote {} reports under {}", indices.len(), out.display());
    Ok(())
}

/// Replaces a node's posterior with a one-hot at the ground-truth label.
fn clamp_to_ground_truth(posterior: &mut NodePosterior, label: usize) {
    let len = posterior.log_posterior.len();
    let mut one_hot = vec![f64::NEG_INFINITY; len];
    one_hot[label] = 0.0;
    posterior.surrogate_logit = one_hot.clone();
    posterior.log_posterior = one_hot;
    posterior.map_label = label;
}

fn apply_setting(
    inferences: &BTreeMap<NodeId, NodeInference>,
    setting: Setting,
    sample: &Sample,
) -> BTreeMap<NodeId, NodePosterior> {
    let mut posteriors: BTreeMap<NodeId, NodePosterior> = inferences
        .iter()
        .map(|(node, inference)| (*node, inference.posterior.clone()))
        .collect();
    if setting == Setting::Predcls {
        for (node, posterior) in posteriors.iter_mut() {
            if node.kind == NodeKind::Object {
                clamp_to_ground_truth(posterior, sample.labels.object_labels[node.index]);
            }
        }
    }
    posteriors
}

fn evaluate_inner(
    config: &ExperimentConfig,
    emd: &EmdConfig,
    dataset: &Dataset,
    indices: &[usize],
    model: &FeatureModel,
) -> Result<RecallReport> {
    let results = infer_split(config, emd, dataset, indices, model)?;
    let mut per_instance: Vec<(Vec<TripletPrediction>, Vec<GroundTruthTriplet>)> = Vec::new();
    for (&index, inferences) in indices.iter().zip(&results) {
        let sample = &dataset.samples[index];
        if sample.instance.num_predicates() == 0 {
            continue;
        }
        let posteriors = apply_setting(inferences, config.setting, sample);
        let predictions = rank_triplets(&posteriors, &sample.instance)?;
        let truths = ground_truth_triplets(&sample.instance, &sample.labels)?;
        per_instance.push((predictions, truths));
    }
    if per_instance.is_empty() {
        bail!("no predicates in the selected split: recall is undefined");
    }
    let split = group_split(
        &dataset.manifest.train_category_counts,
        config.split_hi,
        config.split_lo,
    )?;
    let mode = if config.graph_constraint { MatchMode::Strict } else { MatchMode::Unconstrained };
    Ok(build_report(&per_instance, &config.ks, Some(&split), mode)?)
}

pub fn run_evaluate(
    config: &ExperimentConfig,
    data: &Path,
    model_path: &Path,
    out: &Path,
) -> Result<RecallReport> {
    let dataset = load_dataset(data)?;
    let model = load_model(model_path)?;
    let indices = split_indices(&dataset, SplitChoice::Eval);
    let report = evaluate_inner(config, &config.emd, &dataset, &indices, &model)?;

    fs::create_dir_all(out)?;
    write_text(&out.join("recall_report.json"), &serde_json::to_string_pretty(&report)?)?;
    write_text(&out.join("recall_report.csv"), &report.to_csv())?;
    crate::config::write_echo(
        out,
        &Echo {
            command: "evaluate",
            data: Some(data.display().to_string()),
            model: Some(model_path.display().to_string()),
            config,
        },
    )?;
    for (ki, k) in report.ks.iter().enumerate() {
        println!(
            "evaluate[{}]: R@{k} = {:.4}  mR@{k} = {:.4}",
            config.setting.name(),
            report.recall[ki],
            report.mean_recall[ki]
        );
    }
    Ok(report)
}

#[derive(Serialize)]
struct AblationRow {
    iterations: usize,
    mean_recall: Vec<f64>,
}

/// Sweeps the mirror-descent iteration cap and reports mean recall per K.
/// The early-stop tolerance is pinned to 1e-4 for the sweep.
pub fn run_ablate(
    config: &ExperimentConfig,
    data: &Path,
    model_path: &Path,
    iterations: &[usize],
    out: &Path,
) -> Result<()> {
    if iterations.is_empty() {
        bail!("ablation needs at least one iteration count");
    }
    let dataset = load_dataset(data)?;
    let model = load_model(model_path)?;
    let indices = split_indices(&dataset, SplitChoice::Eval);

    let mut rows = Vec::with_capacity(iterations.len());
    for &max_iterations in iterations {
        let emd = EmdConfig { max_iterations, tolerance: 1e-4, ..config.emd.clone() };
        let report = evaluate_inner(config, &emd, &dataset, &indices, &model)?;
        rows.push(AblationRow { iterations: max_iterations, mean_recall: report.mean_recall });
    }

    let mut csv = String::from("T");
    for k in &config.ks {
        csv.push_str(&format!(",mR@{k}"));
    }
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.iterations.to_string());
        for value in &row.mean_recall {
            csv.push_str(&format!(",{value}"));
        }
        csv.push('\n');
    }
    fs::create_dir_all(out)?;
    write_text(&out.join("ablation.csv"), &csv)?;
    write_text(&out.join("ablation.json"), &serde_json::to_string_pretty(&rows)?)?;
    crate::config::write_echo(
        out,
        &Echo {
            command: "ablate",
            data: Some(data.display().to_string()),
            model: Some(model_path.display().to_string()),
            config,
        },
    )?;
    print!("{csv}");
    Ok(())
}
