use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use zslbench::data::{load_dataset, load_split, Dataset, SplitSpec};
use zslbench::eval::{friedman_rank_matrix, Mode};
use zslbench::registry::{run, Grid, MethodId, RunOptions};
use zslbench::{Scalar, ZslError};

use crate::report::{self, Clock, RunReport};
use crate::{read_grid, resolve, Usage};

fn default_k() -> Vec<usize> {
    vec![1]
}

fn default_true() -> bool {
    true
}

fn default_mode() -> Mode {
    Mode::Zsl
}

/// A comparison plan. `methods` is crossed with every `observation`;
/// `run` entries add single runs. The ranking metric is top-`k[0]`
/// unseen accuracy, or H in GZSL mode.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Plan {
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_k")]
    k: Vec<usize>,
    #[serde(default = "default_true")]
    retrain: bool,
    #[serde(default)]
    methods: Vec<String>,
    /// Per-method grid files.
    #[serde(default)]
    grids: BTreeMap<String, PathBuf>,
    #[serde(default)]
    observation: Vec<Observation>,
    #[serde(default)]
    run: Vec<PlannedRun>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Observation {
    name: String,
    manifest: PathBuf,
    split: PathBuf,
    #[serde(default = "default_mode")]
    mode: Mode,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlannedRun {
    method: String,
    observation: String,
    manifest: PathBuf,
    split: PathBuf,
    #[serde(default = "default_mode")]
    mode: Mode,
    grid: Option<PathBuf>,
}

struct Job {
    method: MethodId,
    observation: String,
    dataset: usize,
    split: SplitSpec,
    mode: Mode,
    grid: Option<Grid>,
}

#[derive(Serialize)]
struct Failure {
    method: String,
    observation: String,
    error: String,
}

fn locate(base: &Path, p: &Path) -> PathBuf {
    let local = base.join(p);
    if p.is_relative() && local.exists() {
        local
    } else {
        resolve(p)
    }
}

fn parse_method(s: &str) -> Result<MethodId> {
    s.parse::<MethodId>().map_err(|e| Usage(e.to_string()).into())
}

pub fn exec<T: Scalar>(plan_path: &Path, out: &Path, jobs: usize, precision: &str) -> Result<()> {
    let plan_path = resolve(plan_path);
    let text = fs::read_to_string(&plan_path).with_context(|| format!("reading {}", plan_path.display()))?;
    let plan: Plan = toml::from_str(&text).with_context(|| format!("parsing {}", plan_path.display()))?;
    if plan.k.is_empty() || plan.k.contains(&0) {
        return Err(Usage("plan k values must be positive".into()).into());
    }
    let base = plan_path.parent().unwrap_or(Path::new(".")).to_path_buf();

    let mut grids = BTreeMap::new();
    for (name, path) in &plan.grids {
        grids.insert(parse_method(name)?, read_grid(&locate(&base, path))?);
    }
    let mut planned = Vec::new();
    for obs in &plan.observation {
        for m in &plan.methods {
            planned.push(PlannedRun {
                method: m.clone(),
                observation: obs.name.clone(),
                manifest: obs.manifest.clone(),
                split: obs.split.clone(),
                mode: obs.mode,
                grid: None,
            });
        }
    }
    planned.extend(plan.run.iter().cloned());
    if planned.is_empty() {
        return Err(Usage("plan contains no runs".into()).into());
    }

    let mut datasets: Vec<Dataset<T>> = Vec::new();
    let mut loaded: BTreeMap<PathBuf, usize> = BTreeMap::new();
    let mut job_list = Vec::new();
    let mut seen_pairs = BTreeSet::new();
    for p in &planned {
        let method = parse_method(&p.method)?;
        method.check_mode(p.mode).map_err(|e| Usage(e.to_string()))?;
        if !seen_pairs.insert((method, p.observation.clone())) {
            return Err(Usage(format!("method `{method}` planned twice for observation `{}`", p.observation)).into());
        }
        let manifest = locate(&base, &p.manifest);
        let dataset = match loaded.get(&manifest) {
            Some(&i) => i,
            None => {
                datasets.push(load_dataset::<T>(&manifest)?);
                loaded.insert(manifest, datasets.len() - 1);
                datasets.len() - 1
            }
        };
        let ds = &datasets[dataset];
        let split = load_split(&locate(&base, &p.split), &ds.labels, ds.n_classes())?;
        let grid = match &p.grid {
            Some(g) => Some(read_grid(&locate(&base, g))?),
            None => grids.get(&method).cloned(),
        };
        job_list.push(Job { method, observation: p.observation.clone(), dataset, split, mode: p.mode, grid });
    }
    check_groups(&job_list, &datasets)?;

    let results: Mutex<Vec<Option<Result<RunReport, String>>>> = Mutex::new((0..job_list.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, job_list.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = job_list.get(i) else { break };
                let clock = Clock::start();
                let opts = RunOptions {
                    method: job.method,
                    mode: job.mode,
                    grid: job.grid.clone(),
                    seed: plan.seed,
                    ks: plan.k.clone(),
                    retrain: plan.retrain,
                    jobs: 1,
                };
                let res = run(&datasets[job.dataset], &job.split, &opts)
                    .map(|o| {
                        let grid = job.grid.clone().unwrap_or_else(|| job.method.default_grid());
                        RunReport::new(job.method.as_str(), job.mode, plan.seed, precision, plan.retrain, grid, o, clock.stop())
                    })
                    .map_err(|e| e.to_string());
                results.lock().unwrap()[i] = Some(res);
            });
        }
    });
    let results: Vec<Result<RunReport, String>> =
        results.into_inner().unwrap().into_iter().map(Option::unwrap).collect();

    let mut methods: Vec<MethodId> = Vec::new();
    let mut observations: Vec<String> = Vec::new();
    for j in &job_list {
        if !methods.contains(&j.method) {
            methods.push(j.method);
        }
        if !observations.contains(&j.observation) {
            observations.push(j.observation.clone());
        }
    }
    let mut table = vec![vec![None; observations.len()]; methods.len()];
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (job, res) in job_list.iter().zip(results) {
        match res {
            Ok(r) => {
                let row = methods.iter().position(|m| *m == job.method).unwrap();
                let col = observations.iter().position(|o| *o == job.observation).unwrap();
                let first = &r.results[0];
                table[row][col] = Some(if job.mode == Mode::Gzsl { first.h.unwrap_or(0.0) } else { first.acc_ts });
                reports.push(r);
            }
            Err(error) => failures.push(Failure {
                method: job.method.to_string(),
                observation: job.observation.clone(),
                error,
            }),
        }
    }

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    report::write_json(&out.join("reports.json"), &reports)?;
    report::write_summary(&out.join("summary.csv"), &reports)?;
    if !failures.is_empty() {
        report::write_json(&out.join("failures.json"), &failures)?;
    }
    write_table(&out.join("table.csv"), &methods, &observations, &table)?;

    let names: Vec<String> = methods.iter().map(|m| m.to_string()).collect();
    let ranks = friedman_rank_matrix(&names, &table).with_context(|| {
        format!("{} of {} runs failed; see failures.json", failures.len(), job_list.len())
    })?;
    report::write_json(&out.join("ranks.json"), &ranks)?;
    for &i in &ranks.order {
        println!("{}\t{:.3}", names[i], ranks.mean_ranks[i]);
    }
    Ok(())
}

/// Runs ranked against each other must see the same dataset, test classes
/// and mode.
fn check_groups<T: Scalar>(jobs: &[Job], datasets: &[Dataset<T>]) -> Result<()> {
    let mut first: BTreeMap<&str, &Job> = BTreeMap::new();
    for j in jobs {
        let Some(f) = first.get(j.observation.as_str()) else {
            first.insert(&j.observation, j);
            continue;
        };
        let same = datasets[f.dataset].checksum == datasets[j.dataset].checksum
            && f.split.test == j.split.test
            && f.mode == j.mode;
        if !same {
            bail!(ZslError::ProtocolViolation(format!(
                "observation `{}`: `{}` and `{}` are evaluated on different test sets or modes",
                j.observation, f.method, j.method
            )));
        }
    }
    Ok(())
}

fn write_table(path: &Path, methods: &[MethodId], observations: &[String], table: &[Vec<Option<f64>>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    let mut header = vec!["method".to_string()];
    header.extend(observations.iter().cloned());
    w.write_record(&header)?;
    for (m, row) in methods.iter().zip(table) {
        let mut rec = vec![m.to_string()];
        rec.extend(row.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
