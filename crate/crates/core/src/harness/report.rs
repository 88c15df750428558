use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

use super::config::PlannerName;
use super::storage::{read_columns, write_bytes, write_json, Layout};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub planner: String,
    pub task: usize,
    pub seed: u64,
    pub cumulative_reward: f64,
    /// Mean per-step cosine similarity to the reference-predicted next state.
    pub mean_similarity: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlannerSummary {
    pub planner: String,
    /// Sum over tasks of the mean cumulative reward across seeds.
    pub reward: f64,
    /// Mean over tasks and seeds of the per-episode mean similarity.
    pub similarity: f64,
}

/// Per-run rows and one aggregate row per planner, in table column order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub environment: String,
    pub tasks: usize,
    pub env_steps: usize,
    pub rows: Vec<ReportRow>,
    pub summary: Vec<PlannerSummary>,
}

impl ComparisonReport {
    /// Reads `traces/{planner}/task{j}_seed{s}.csv` for every combination.
    pub fn from_traces(
        layout: &Layout,
        environment: &str,
        planners: &[PlannerName],
        tasks: usize,
        seeds: &[u64],
    ) -> Result<Self> {
        let mut ordered = planners.to_vec();
        ordered.sort();
        let mut missing = Vec::new();
        for p in &ordered {
            for j in 0..tasks {
                for &s in seeds {
                    let f = layout.trace_file(p.as_str(), j, s);
                    if !f.is_file() {
                        missing.push(f.display().to_string());
                    }
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingTraces(missing));
        }
        let mut rows = Vec::new();
        for p in &ordered {
            for j in 0..tasks {
                for &s in seeds {
                    let cols = read_columns(&layout.trace_file(p.as_str(), j, s), &["reward", "ref_similarity"])?;
                    let rewards: Vec<f64> = cols[0].iter().map(|v| v.unwrap_or(0.0)).collect();
                    let sims: Vec<f64> = cols[1].iter().map(|v| v.unwrap_or(0.0)).collect();
                    let steps = rewards.len();
                    rows.push(ReportRow {
                        planner: p.as_str().to_string(),
                        task: j,
                        seed: s,
                        cumulative_reward: rewards.iter().sum(),
                        mean_similarity: if steps == 0 {
                            0.0
                        } else {
                            sims.iter().sum::<f64>() / steps as f64
                        },
                        steps,
                    });
                }
            }
        }
        Ok(Self::aggregate(environment, tasks, &ordered, rows))
    }

    pub fn aggregate(
        environment: &str,
        tasks: usize,
        planners: &[PlannerName],
        rows: Vec<ReportRow>,
    ) -> Self {
        let summary = planners
            .iter()
            .map(|p| {
                let mine: Vec<&ReportRow> = rows.iter().filter(|r| r.planner == p.as_str()).collect();
                let reward = (0..tasks)
                    .map(|j| {
                        let per: Vec<f64> = mine
                            .iter()
                            .filter(|r| r.task == j)
                            .map(|r| r.cumulative_reward)
                            .collect();
                        if per.is_empty() {
                            0.0
                        } else {
                            per.iter().sum::<f64>() / per.len() as f64
                        }
                    })
                    .sum();
                let similarity = if mine.is_empty() {
                    0.0
                } else {
                    mine.iter().map(|r| r.mean_similarity).sum::<f64>() / mine.len() as f64
                };
                PlannerSummary {
                    planner: p.as_str().to_string(),
                    reward,
                    similarity,
                }
            })
            .collect();
        let env_steps = planners
            .first()
            .map(|p| {
                rows.iter()
                    .filter(|r| r.planner == p.as_str())
                    .map(|r| r.steps)
                    .sum()
            })
            .unwrap_or(0);
        ComparisonReport {
            environment: environment.to_string(),
            tasks,
            env_steps,
            rows,
            summary,
        }
    }

    pub fn summary_for(&self, planner: PlannerName) -> Option<&PlannerSummary> {
        self.summary.iter().find(|s| s.planner == planner.as_str())
    }

    pub fn rows_csv(&self) -> String {
        let mut out = String::from("planner,task,seed,cumulative_reward,mean_similarity,steps\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.planner, r.task, r.seed, r.cumulative_reward, r.mean_similarity, r.steps
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let upper: Vec<String> = self.summary.iter().map(|s| s.planner.to_uppercase()).collect();
        let mut out = String::from("environment,tasks,env_steps");
        for u in &upper {
            let _ = write!(out, ",{u}");
        }
        for u in &upper {
            let _ = write!(out, ",{u}_similarity");
        }
        out.push('\n');
        let _ = write!(out, "{},{},{}", self.environment, self.tasks, self.env_steps);
        for s in &self.summary {
            let _ = write!(out, ",{}", s.reward);
        }
        for s in &self.summary {
            let _ = write!(out, ",{}", s.similarity);
        }
        out.push('\n');
        out
    }

    /// Fixed-width text table: environment, tasks, env steps, one reward column per planner.
    pub fn table(&self) -> String {
        let mut header = vec![
            "Environment".to_string(),
            "tasks".to_string(),
            "env steps".to_string(),
        ];
        header.extend(self.summary.iter().map(|s| s.planner.to_uppercase()));
        let mut row = vec![
            self.environment.clone(),
            self.tasks.to_string(),
            self.env_steps.to_string(),
        ];
        row.extend(self.summary.iter().map(|s| format!("{:.2}", s.reward)));
        let mut sim = vec!["similarity".to_string(), String::new(), String::new()];
        sim.extend(self.summary.iter().map(|s| format!("{:.4}", s.similarity)));
        let widths: Vec<usize> = (0..header.len())
            .map(|i| header[i].len().max(row[i].len()).max(sim[i].len()))
            .collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join(" | ")
                .trim_end()
                .to_string()
        };
        let rule = widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-");
        format!("{}\n{}\n{}\n{}\n", line(&header), rule, line(&row), line(&sim))
    }

    /// Writes comparison.csv, summary.csv, table.txt and a manifest.
    pub fn write(&self, dir: &Path, config_hash: &str) -> Result<()> {
        write_bytes(&dir.join("comparison.csv"), self.rows_csv().as_bytes())?;
        write_bytes(&dir.join("summary.csv"), self.summary_csv().as_bytes())?;
        write_bytes(&dir.join("table.txt"), self.table().as_bytes())?;
        #[derive(Serialize)]
        struct Manifest<'a> {
            config_hash: &'a str,
            rows: usize,
        }
        write_json(
            &dir.join("manifest.json"),
            &Manifest {
                config_hash,
                rows: self.rows.len(),
            },
        )
    }
}
