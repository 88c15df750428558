use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{run_meta_test, window_losses, EpisodeTrace, MetaTest, ObservationWindow};
use crate::enn::{EmbeddingTable, EnnModel, ModelFile, TaskEmbedding, TransitionDataset};
use crate::envworld::{ReferencePolicy, TaskSpec};
use crate::error::Result;
use crate::metatrain::{collect_task_data, meta_train, ModelConfig};
use crate::planner::{Planner, Reference};

use super::config::{ExperimentConfig, PlannerName};
use super::report::ComparisonReport;
use super::storage::{read_dataset, read_json, read_text, write_bytes, write_dataset, write_json, Layout};

/// Decorrelated seed for a labelled sub-stream.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = splitmix(z ^ splitmix(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    z
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_TASKS: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_REFERENCE: u64 = 3;
const STREAM_RMPC: u64 = 4;
const STREAM_START: u64 = 5;
const STREAM_PLANNER: u64 = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectManifest {
    pub config_hash: String,
    pub family: String,
    pub samples_per_task: usize,
    pub tasks: Vec<TaskSpec>,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFile {
    pub embedding_id: usize,
    pub embedding: Vec<f64>,
    /// Window loss of every table entry on nominal-task data.
    pub losses: Vec<f64>,
    pub policy: ReferencePolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub config_hash: String,
    pub enn: String,
    pub rmpc: String,
    pub reference: String,
    pub enn_final_pre_loss: f64,
    pub enn_final_post_loss: f64,
    pub rmpc_final_pre_loss: f64,
    pub rmpc_final_post_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub task: usize,
    pub seed: u64,
    pub file: String,
    pub steps: usize,
    pub cumulative_reward: f64,
    pub aborted: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub planner: String,
    pub tasks: Vec<TaskSpec>,
    pub runs: Vec<RunEntry>,
}

fn layout(cfg: &ExperimentConfig) -> Layout {
    Layout::new(&cfg.out_dir)
}

/// Samples the training tasks and writes one dataset per task plus a manifest.
pub fn cmd_collect(cfg: &ExperimentConfig) -> Result<CollectManifest> {
    cfg.validate()?;
    let out = layout(cfg);
    let mt = &cfg.meta_train;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(mt.seed, &[STREAM_TASKS]));
    let tasks = cfg.env.family.sample_tasks(mt.n_tasks, &mut rng);
    let datasets = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            collect_task_data(
                &cfg.env,
                task,
                Some(i),
                mt.samples_per_task,
                derive_seed(mt.seed, &[STREAM_DATA, i as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut files = Vec::new();
    for (i, ds) in datasets.iter().enumerate() {
        write_dataset(&out.dataset_file(i), ds)?;
        files.push(format!("task{i}.csv"));
    }
    let manifest = CollectManifest {
        config_hash: cfg.hash(),
        family: cfg.env.family.family().name().to_string(),
        samples_per_task: mt.samples_per_task,
        tasks,
        files,
    };
    write_json(&out.datasets().join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn load_collect_manifest(cfg: &ExperimentConfig) -> Result<CollectManifest> {
    read_json(&layout(cfg).datasets().join("manifest.json"))
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(CollectManifest, Vec<TransitionDataset>)> {
    let out = layout(cfg);
    let manifest = load_collect_manifest(cfg)?;
    let (sd, ad) = (cfg.env.family.state_dim(), cfg.env.family.action_dim());
    let datasets = manifest
        .files
        .iter()
        .enumerate()
        .map(|(i, f)| read_dataset(&out.datasets().join(f), sd, ad, Some(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, datasets))
}

/// Picks the reference embedding: the table entry with the lowest loss on
/// nominal-task data.
pub fn select_reference(
    cfg: &ExperimentConfig,
    model: &EnnModel,
    table: &EmbeddingTable,
) -> Result<ReferenceFile> {
    let nominal = cfg.env.family.nominal_task();
    let n = cfg.test.reference_samples;
    let data = collect_task_data(
        &cfg.env,
        &nominal,
        None,
        n,
        derive_seed(cfg.meta_train.seed, &[STREAM_REFERENCE]),
    )?;
    let mut window = ObservationWindow::new(n)?;
    for t in data.transitions() {
        window.push(t.clone());
    }
    let losses = window_losses(model, table, &window)?;
    let mut best = 0;
    for (i, l) in losses.iter().enumerate() {
        if *l < losses[best] {
            best = i;
        }
    }
    Ok(ReferenceFile {
        embedding_id: best,
        embedding: table.entries()[best].values.clone(),
        losses,
        policy: ReferencePolicy::for_task(&nominal),
    })
}

/// Meta-trains the embedding model and the embedding-free baseline.
pub fn cmd_meta_train(cfg: &ExperimentConfig) -> Result<ModelManifest> {
    cfg.validate()?;
    let out = layout(cfg);
    let (_, datasets) = load_datasets(cfg)?;
    let rmpc_model_cfg = ModelConfig {
        embedding_dim: 0,
        ..cfg.model.clone()
    };
    let mut rmpc_train_cfg = cfg.meta_train.clone();
    rmpc_train_cfg.seed = derive_seed(cfg.meta_train.seed, &[STREAM_RMPC]);
    let (enn, rmpc) = rayon::join(
        || meta_train(&datasets, &cfg.model, &cfg.meta_train),
        || meta_train(&datasets, &rmpc_model_cfg, &rmpc_train_cfg),
    );
    let (enn, rmpc) = (enn?, rmpc?);
    let models = out.models();
    write_bytes(
        &models.join("enn.json"),
        ModelFile::from_parts(&enn.model, &enn.table).to_json().as_bytes(),
    )?;
    write_bytes(
        &models.join("rmpc.json"),
        ModelFile::from_parts(&rmpc.model, &rmpc.table).to_json().as_bytes(),
    )?;
    let mut curve = Vec::new();
    enn.report.write_csv(&mut curve)?;
    write_bytes(&models.join("enn_curve.csv"), &curve)?;
    let mut curve = Vec::new();
    rmpc.report.write_csv(&mut curve)?;
    write_bytes(&models.join("rmpc_curve.csv"), &curve)?;

    let reference = select_reference(cfg, &enn.model, &enn.table)?;
    write_json(&models.join("reference.json"), &reference)?;

    let tail = |r: &crate::metatrain::MetaTrainReport, pre: bool| {
        let n = r.records.len();
        let k = (n / 10).max(1).min(n);
        let xs = &r.records[n - k..];
        if xs.is_empty() {
            return 0.0;
        }
        xs.iter().map(|x| if pre { x.pre_loss } else { x.post_loss }).sum::<f64>() / k as f64
    };
    let manifest = ModelManifest {
        config_hash: cfg.hash(),
        enn: "enn.json".into(),
        rmpc: "rmpc.json".into(),
        reference: "reference.json".into(),
        enn_final_pre_loss: tail(&enn.report, true),
        enn_final_post_loss: tail(&enn.report, false),
        rmpc_final_pre_loss: tail(&rmpc.report, true),
        rmpc_final_post_loss: tail(&rmpc.report, false),
    };
    write_json(&models.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn load_model(path: &Path) -> Result<(EnnModel, EmbeddingTable)> {
    ModelFile::from_json(&read_text(path)?)?.into_parts()
}

/// Test tasks: the explicit list, or held-out draws away from the training tasks.
pub fn test_tasks(cfg: &ExperimentConfig, training: &[TaskSpec]) -> Result<Vec<TaskSpec>> {
    if let Some(list) = &cfg.test.task_list {
        return Ok(list.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.test.task_seed);
    cfg.env
        .family
        .sample_held_out(cfg.test.tasks, training, &mut rng)
}

/// Everything `cmd_run` needs, loaded once.
pub struct RunInputs {
    pub enn: EnnModel,
    pub enn_table: EmbeddingTable,
    pub rmpc: EnnModel,
    pub rmpc_table: EmbeddingTable,
    pub reference: Reference,
    pub tasks: Vec<TaskSpec>,
}

pub fn load_run_inputs(cfg: &ExperimentConfig) -> Result<RunInputs> {
    let out = layout(cfg);
    let collect = load_collect_manifest(cfg)?;
    let (enn, enn_table) = load_model(&out.models().join("enn.json"))?;
    let (rmpc, rmpc_table) = load_model(&out.models().join("rmpc.json"))?;
    let rf: ReferenceFile = read_json(&out.models().join("reference.json"))?;
    let reference = Reference {
        model: enn.clone(),
        embedding: TaskEmbedding::new(rf.embedding_id, rf.embedding).values,
        policy: rf.policy,
    };
    let tasks = test_tasks(cfg, &collect.tasks)?;
    Ok(RunInputs {
        enn,
        enn_table,
        rmpc,
        rmpc_table,
        reference,
        tasks,
    })
}

/// One meta-test episode of `planner` on test task `task` with environment seed `seed`.
pub fn run_episode(
    cfg: &ExperimentConfig,
    inputs: &RunInputs,
    planner: PlannerName,
    task: usize,
    seed: u64,
) -> Result<EpisodeTrace> {
    let spec = &inputs.tasks[task];
    let (model, table) = if planner.uses_embeddings() {
        (&inputs.enn, &inputs.enn_table)
    } else {
        (&inputs.rmpc, &inputs.rmpc_table)
    };
    let mut pcfg = cfg.planner(planner);
    pcfg.seed = derive_seed(pcfg.seed, &[STREAM_PLANNER, task as u64, seed]);
    let mut p = Planner::new(pcfg, spec.action_dim(), spec.action_bound())?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_START, task as u64]));
    let start = cfg.env.family.test_start(cfg.env.start_jitter, &mut rng);
    let setup = MetaTest {
        env: &cfg.env,
        task: spec,
        model,
        table,
        reference: &inputs.reference,
        kind: planner.kind(),
        adapt: &cfg.adapt,
    };
    run_meta_test(&setup, &mut p, start, cfg.test.steps)
}

/// Runs every (test task, seed) pair with `planner` and writes the traces.
pub fn cmd_run(cfg: &ExperimentConfig, planner: PlannerName) -> Result<RunManifest> {
    cfg.validate()?;
    let out = layout(cfg);
    let inputs = load_run_inputs(cfg)?;
    let jobs: Vec<(usize, u64)> = (0..inputs.tasks.len())
        .flat_map(|j| cfg.test.seeds.iter().map(move |&s| (j, s)))
        .collect();
    let traces = jobs
        .par_iter()
        .map(|&(j, s)| run_episode(cfg, &inputs, planner, j, s))
        .collect::<Result<Vec<_>>>()?;
    let (sd, ad) = (cfg.env.family.state_dim(), cfg.env.family.action_dim());
    let mut runs = Vec::new();
    for (&(j, s), trace) in jobs.iter().zip(&traces) {
        let path = out.trace_file(planner.as_str(), j, s);
        let mut buf = Vec::new();
        trace.write_csv(&mut buf, sd, ad)?;
        write_bytes(&path, &buf)?;
        runs.push(RunEntry {
            task: j,
            seed: s,
            file: format!("task{j}_seed{s}.csv"),
            steps: trace.len(),
            cumulative_reward: trace.cumulative_reward(),
            aborted: trace.aborted.clone(),
        });
    }
    let manifest = RunManifest {
        config_hash: cfg.hash(),
        planner: planner.as_str().to_string(),
        tasks: inputs.tasks,
        runs,
    };
    write_json(&out.traces().join(planner.as_str()).join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Aggregates existing traces into `reports/`.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<ComparisonReport> {
    cfg.validate()?;
    let out = layout(cfg);
    let planners = cfg.compared_planners()?;
    let n_tasks = match &cfg.test.task_list {
        Some(l) => l.len(),
        None => cfg.test.tasks,
    };
    let report = ComparisonReport::from_traces(
        &out,
        cfg.env.family.family().name(),
        &planners,
        n_tasks,
        &cfg.test.seeds,
    )?;
    report.write(&out.reports(), &cfg.hash())?;
    Ok(report)
}

/// collect, meta-train, run every compared planner, compare.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<ComparisonReport> {
    cmd_collect(cfg)?;
    cmd_meta_train(cfg)?;
    for p in cfg.compared_planners()? {
        cmd_run(cfg, p)?;
    }
    cmd_compare(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_label() {
        let a = derive_seed(0, &[1, 0]);
        let b = derive_seed(0, &[1, 1]);
        let c = derive_seed(0, &[2, 0]);
        assert!(a != b && a != c && b != c);
        assert_eq!(a, derive_seed(0, &[1, 0]));
    }
}
