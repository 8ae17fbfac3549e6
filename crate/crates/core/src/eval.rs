//! Suite evaluation over cached episode bundles.
//!
//! Every method is trained and scored on the identical list of episodes, so
//! per-episode accuracies pair up for t-tests and rank statistics.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episode::load_episode;
use crate::error::{Error, Result};
use crate::select::{train_stacker, AblationMode, StackerConfig};
use crate::stats::{friedman_nemenyi, mean_ci95, paired_t_test, FriedmanNemenyi, TTest};

/// One column of the evaluation: a stacker configuration under an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    pub config: StackerConfig,
    pub ablation: AblationMode,
}

impl MethodSpec {
    pub fn new(config: StackerConfig, ablation: AblationMode) -> Self {
        let name = match ablation {
            AblationMode::Full => config.method.name().to_string(),
            other => format!("{}:{}", config.method, other),
        };
        Self {
            name,
            config,
            ablation,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    /// Worker threads; `None` uses the available parallelism.
    pub jobs: Option<usize>,
    pub seed: u64,
    /// Named domain groups for rank statistics (e.g. weak vs strong
    /// generalisation). Empty means a single group `all`.
    pub groups: BTreeMap<String, Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// `None` when fewer than two episodes were evaluated.
    pub ci95: Option<f64>,
    pub omission_rates: Vec<f64>,
    pub mean_omission: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub a: String,
    pub b: String,
    #[serde(flatten)]
    pub test: TTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain: String,
    pub episode_ids: Vec<String>,
    pub methods: Vec<MethodResult>,
    pub pairwise: Vec<PairwiseTest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub name: String,
    pub domains: Vec<String>,
    pub episodes: usize,
    /// `None` with fewer than two methods or episodes.
    pub ranks: Option<FriedmanNemenyi>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seed: u64,
    pub methods: Vec<String>,
    pub domains: Vec<DomainReport>,
    pub groups: Vec<GroupReport>,
}

struct Cell {
    accuracy: f64,
    omission: f64,
}

struct EpisodeResult {
    domain: String,
    episode_id: String,
    cells: Vec<Cell>,
}

fn run_episode(path: &Path, methods: &[MethodSpec]) -> Result<EpisodeResult> {
    let bundle = load_episode(path).map_err(|e| e.in_episode(&path.display().to_string()))?;
    let cells = methods
        .iter()
        .map(|m| {
            let stacker = train_stacker(&bundle, &m.config, m.ablation)?;
            Ok(Cell {
                accuracy: stacker.accuracy(&bundle.query_logits, &bundle.query_labels)?,
                omission: stacker.omission_rate,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_episode(&bundle.episode_id))?;
    log::info!("evaluated {}", bundle.episode_id);
    Ok(EpisodeResult {
        domain: bundle.domain_name,
        episode_id: bundle.episode_id,
        cells,
    })
}

fn method_result(name: &str, accuracies: Vec<f64>, omission_rates: Vec<f64>) -> MethodResult {
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    MethodResult {
        method: name.to_string(),
        ci95: mean_ci95(&accuracies).ok().map(|(_, h)| h),
        mean,
        mean_omission: omission_rates.iter().sum::<f64>() / n,
        accuracies,
        omission_rates,
    }
}

/// Trains and scores every method on every episode directory.
pub fn evaluate_suite(episodes: &[PathBuf], methods: &[MethodSpec], suite: &SuiteConfig) -> Result<EvalReport> {
    if methods.is_empty() {
        return Err(Error::Config("no methods to evaluate".into()));
    }
    if episodes.is_empty() {
        return Err(Error::Config("no episodes to evaluate".into()));
    }
    let mut names: Vec<&str> = methods.iter().map(|m| m.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("method names must be unique".into()));
    }

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = suite.jobs {
        builder = builder.num_threads(jobs.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results = pool.install(|| {
        episodes
            .par_iter()
            .map(|p| run_episode(p, methods))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut by_domain: BTreeMap<String, Vec<&EpisodeResult>> = BTreeMap::new();
    for r in &results {
        by_domain.entry(r.domain.clone()).or_default().push(r);
    }

    let mut domains = Vec::new();
    for (domain, rows) in &by_domain {
        let per_method: Vec<MethodResult> = methods
            .iter()
            .enumerate()
            .map(|(mi, m)| {
                method_result(
                    &m.name,
                    rows.iter().map(|r| r.cells[mi].accuracy).collect(),
                    rows.iter().map(|r| r.cells[mi].omission).collect(),
                )
            })
            .collect();
        let mut pairwise = Vec::new();
        if rows.len() >= 2 {
            for i in 0..methods.len() {
                for j in i + 1..methods.len() {
                    pairwise.push(PairwiseTest {
                        a: methods[i].name.clone(),
                        b: methods[j].name.clone(),
                        test: paired_t_test(&per_method[i].accuracies, &per_method[j].accuracies)?,
                    });
                }
            }
        }
        domains.push(DomainReport {
            domain: domain.clone(),
            episode_ids: rows.iter().map(|r| r.episode_id.clone()).collect(),
            methods: per_method,
            pairwise,
        });
    }

    let group_defs: Vec<(String, Vec<String>)> = if suite.groups.is_empty() {
        vec![("all".into(), by_domain.keys().cloned().collect())]
    } else {
        suite.groups.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    };
    let mut groups = Vec::new();
    for (name, members) in group_defs {
        let mut matrix = Vec::new();
        let mut present = Vec::new();
        for d in &members {
            if let Some(rows) = by_domain.get(d) {
                present.push(d.clone());
                matrix.extend(rows.iter().map(|r| r.cells.iter().map(|c| c.accuracy).collect::<Vec<_>>()));
            }
        }
        let ranks = if matrix.len() >= 2 && methods.len() >= 2 {
            Some(friedman_nemenyi(&matrix)?)
        } else {
            None
        };
        groups.push(GroupReport {
            name,
            domains: present,
            episodes: matrix.len(),
            ranks,
        });
    }

    Ok(EvalReport {
        seed: suite.seed,
        methods: methods.iter().map(|m| m.name.clone()).collect(),
        domains,
        groups,
    })
}

fn percent_cell(mean: f64, ci: Option<f64>) -> String {
    match ci {
        Some(h) => format!("{:.2}±{:.2}", 100.0 * mean, 100.0 * h),
        None => format!("{:.2}", 100.0 * mean),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_bytes(header: Vec<String>, rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::Stats(e.to_string()))
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Rows are domains, columns methods, cells `mean±ci` in percent.
    pub fn accuracy_csv(&self) -> Result<Vec<u8>> {
        let mut header = vec!["domain".to_string()];
        header.extend(self.methods.iter().cloned());
        let rows = self
            .domains
            .iter()
            .map(|d| {
                std::iter::once(d.domain.clone())
                    .chain(d.methods.iter().map(|m| percent_cell(m.mean, m.ci95)))
                    .collect()
            })
            .collect();
        csv_bytes(header, rows)
    }

    /// Mean snapshot omission rate in percent per domain and method.
    pub fn omission_csv(&self) -> Result<Vec<u8>> {
        let mut header = vec!["domain".to_string()];
        header.extend(self.methods.iter().cloned());
        let rows = self
            .domains
            .iter()
            .map(|d| {
                std::iter::once(d.domain.clone())
                    .chain(d.methods.iter().map(|m| format!("{:.2}", 100.0 * m.mean_omission)))
                    .collect()
            })
            .collect();
        csv_bytes(header, rows)
    }

    /// Mean ranks, critical difference and clique membership per group.
    pub fn ranks_csv(&self) -> Result<Vec<u8>> {
        let header = ["group", "method", "mean_rank", "critical_difference", "friedman_p", "cliques"]
            .map(String::from)
            .to_vec();
        let mut rows = Vec::new();
        for g in &self.groups {
            let Some(r) = &g.ranks else { continue };
            for (mi, name) in self.methods.iter().enumerate() {
                let member_of: Vec<String> = r
                    .cliques
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.contains(&mi))
                    .map(|(ci, _)| ci.to_string())
                    .collect();
                rows.push(vec![
                    g.name.clone(),
                    name.clone(),
                    format!("{:.4}", r.mean_ranks[mi]),
                    format!("{:.4}", r.critical_difference),
                    format!("{:.6e}", r.p_value),
                    member_of.join(";"),
                ]);
            }
        }
        csv_bytes(header, rows)
    }

    /// Paired t-test table: one row per domain and method pair.
    pub fn pairwise_csv(&self) -> Result<Vec<u8>> {
        let header = ["domain", "a", "b", "mean_diff", "t", "p", "significant", "degenerate"]
            .map(String::from)
            .to_vec();
        let mut rows = Vec::new();
        for d in &self.domains {
            for p in &d.pairwise {
                rows.push(vec![
                    d.domain.clone(),
                    p.a.clone(),
                    p.b.clone(),
                    format!("{:.6}", p.test.mean_diff),
                    if p.test.t.is_finite() { format!("{:.6}", p.test.t) } else { format!("{}", p.test.t) },
                    format!("{:.6e}", p.test.p),
                    (p.test.p < 0.05).to_string(),
                    p.test.degenerate.to_string(),
                ]);
            }
        }
        csv_bytes(header, rows)
    }

    /// Writes `report.json`, `accuracy.csv`, `omission.csv` and `ranks.csv`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("report.json"), self.to_json()?.as_bytes())?;
        write_file(&dir.join("accuracy.csv"), &self.accuracy_csv()?)?;
        write_file(&dir.join("omission.csv"), &self.omission_csv()?)?;
        write_file(&dir.join("ranks.csv"), &self.ranks_csv()?)?;
        Ok(())
    }

    /// Human-readable summary table.
    pub fn write_summary<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "{:<16}", "domain")?;
        for m in &self.methods {
            write!(out, " {:>18}", m)?;
        }
        writeln!(out)?;
        for d in &self.domains {
            write!(out, "{:<16}", d.domain)?;
            for m in &d.methods {
                write!(out, " {:>18}", percent_cell(m.mean, m.ci95))?;
            }
            writeln!(out)?;
        }
        for g in &self.groups {
            if let Some(r) = &g.ranks {
                writeln!(
                    out,
                    "group {}: {} episodes, Friedman p = {:.3e}, CD = {:.4}",
                    g.name, g.episodes, r.p_value, r.critical_difference
                )?;
            }
        }
        Ok(())
    }
}
