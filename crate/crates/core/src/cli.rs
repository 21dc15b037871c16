//! Experiment drivers behind the command-line tool: width/depth grids, the
//! five-variant ablation, offline diagnostics on finished runs and report
//! rendering.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::arch::BlockKind;
use crate::config::{ExperimentConfig, RunMode};
use crate::diagnostics::{
    collect_features, effective_rank, grid_coords, j_q, loss_surface, random_direction, SurfaceDataset, SurfaceGrid,
};
use crate::distributed::{read_metrics, run_experiment, Learner, RunSummary};
use crate::error::{Error, Result};
use crate::nn::Checkpoint;

/// Units used by the "w/o Larger NN" variant, in every network.
pub const SMALL_UNITS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    WithoutApeX,
    WithoutOfenet,
    WithoutLargerNn,
    WithoutDenseNet,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::WithoutApeX,
        Variant::WithoutOfenet,
        Variant::WithoutLargerNn,
        Variant::WithoutDenseNet,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "Full",
            Variant::WithoutApeX => "w/o Ape-X",
            Variant::WithoutOfenet => "w/o OFENet",
            Variant::WithoutLargerNn => "w/o Larger NN",
            Variant::WithoutDenseNet => "w/o DenseNet",
        }
    }

    /// Directory-safe name.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutApeX => "wo_apex",
            Variant::WithoutOfenet => "wo_ofenet",
            Variant::WithoutLargerNn => "wo_larger_nn",
            Variant::WithoutDenseNet => "wo_densenet",
        }
    }

    /// The variant's config, derived from the full configuration.
    pub fn derive(self, full: &ExperimentConfig) -> ExperimentConfig {
        let mut c = full.clone();
        match self {
            Variant::Full => {}
            Variant::WithoutApeX => {
                c.run.mode = RunMode::Sync;
                c.run.n_core = 1;
                c.run.n_env = 1;
            }
            Variant::WithoutOfenet => c.ofenet.enabled = false,
            Variant::WithoutLargerNn => {
                c.ofenet.state_block.units = SMALL_UNITS;
                c.ofenet.action_block.units = SMALL_UNITS;
                c.agent.actor_block.units = SMALL_UNITS;
                c.agent.critic_block.units = SMALL_UNITS;
            }
            Variant::WithoutDenseNet => {
                c.agent.actor_block.kind = BlockKind::Mlp;
                c.agent.critic_block.kind = BlockKind::Mlp;
            }
        }
        if self != Variant::Full {
            c.name = format!("{} [{}]", full.name, self.label());
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// The five ablation configs in canonical order.
pub fn ablation_configs(full: &ExperimentConfig) -> Vec<(Variant, ExperimentConfig)> {
    Variant::ALL.iter().map(|&v| (v, v.derive(full))).collect()
}

/// Dotted paths of every leaf that differs between two configs, `name` excluded.
pub fn config_diff(a: &ExperimentConfig, b: &ExperimentConfig) -> Vec<String> {
    fn walk(path: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
                keys.sort();
                keys.dedup();
                for k in keys {
                    let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                    walk(&p, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), out);
                }
            }
            _ if a != b => out.push(path.to_string()),
            _ => {}
        }
    }
    let (mut x, mut y) = (serde_json::to_value(a).expect("config"), serde_json::to_value(b).expect("config"));
    x["name"] = Value::Null;
    y["name"] = Value::Null;
    let mut out = Vec::new();
    walk("", &x, &y, &mut out);
    out
}

/// One seed of one cell.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub cell: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub outcome: std::result::Result<RunSummary, String>,
}

/// Per-cell aggregate row of a summary CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub env: String,
    pub cell: String,
    pub units: usize,
    pub layers: usize,
    pub seeds: usize,
    pub completed: usize,
    /// Mean over completed seeds of each run's maximum average return.
    pub max_return_mean: Option<f64>,
    pub max_return_std: Option<f64>,
    pub failures: String,
}

#[derive(Clone, Debug)]
pub struct DriverReport {
    pub rows: Vec<SummaryRow>,
    pub runs: Vec<RunRecord>,
    pub summary_path: PathBuf,
}

impl DriverReport {
    pub fn all_completed(&self) -> bool {
        self.runs.iter().all(|r| r.outcome.is_ok())
    }
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    (Some(m), Some(v.sqrt()))
}

fn run_cell(cell: &str, config: &ExperimentConfig, dir: &Path, runs: &mut Vec<RunRecord>) -> Result<SummaryRow> {
    fs::create_dir_all(dir)?;
    let mut maxima = Vec::new();
    let mut failures = Vec::new();
    for &seed in &config.seeds {
        let run_dir = dir.join(format!("seed_{seed}"));
        let outcome = run_experiment(config, seed, &run_dir).map_err(|e| e.to_string());
        match &outcome {
            Ok(s) => {
                if let Some(m) = s.max_avg_return {
                    maxima.push(m);
                }
            }
            Err(e) => {
                log::error!("{cell} seed {seed} failed: {e}");
                failures.push(format!("seed {seed}: {e}"));
            }
        }
        runs.push(RunRecord {
            cell: cell.to_string(),
            seed,
            dir: run_dir,
            outcome,
        });
    }
    let (mean, std) = mean_std(&maxima);
    Ok(SummaryRow {
        env: config.env.clone(),
        cell: cell.to_string(),
        units: config.agent.critic_block.units,
        layers: config.agent.critic_block.layers,
        seeds: config.seeds.len(),
        completed: config.seeds.len() - failures.len(),
        max_return_mean: mean,
        max_return_std: std,
        failures: failures.join("; "),
    })
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

/// One run per (units, layers, seed), varying the actor and critic blocks.
/// Each cell gets its own directory; a failed run is recorded and the grid
/// moves on.
pub fn run_grid(units: &[usize], layers: &[usize], base: &ExperimentConfig, out_dir: &Path) -> Result<DriverReport> {
    if units.is_empty() || layers.is_empty() {
        return Err(Error::Config("grid needs at least one unit count and one layer count".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &u in units {
        for &l in layers {
            let mut c = base.clone();
            for b in [&mut c.agent.actor_block, &mut c.agent.critic_block] {
                b.units = u;
                b.layers = l;
            }
            let cell = format!("u{u}_l{l}");
            rows.push(run_cell(&cell, &c, &out_dir.join(&cell), &mut runs)?);
        }
    }
    let summary_path = out_dir.join("summary.csv");
    write_summary(&summary_path, &rows)?;
    Ok(DriverReport { rows, runs, summary_path })
}

/// Runs the five variants with the base config's seeds.
pub fn run_ablation(full: &ExperimentConfig, out_dir: &Path) -> Result<DriverReport> {
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for (v, c) in ablation_configs(full) {
        let mut row = run_cell(v.slug(), &c, &out_dir.join(v.slug()), &mut runs)?;
        row.cell = v.label().to_string();
        rows.push(row);
    }
    let summary_path = out_dir.join("summary.csv");
    write_summary(&summary_path, &rows)?;
    Ok(DriverReport { rows, runs, summary_path })
}

/// Largest `avg_return` in a run's metrics CSV.
pub fn max_return_in(run_dir: &Path) -> Result<Option<f64>> {
    let rows = read_metrics(run_dir.join("metrics.csv"))?;
    Ok(rows.iter().map(|r| r.avg_return).reduce(f64::max))
}

/// Loss surface of a finished run's Q1 over its stored `(s, a, Q̂)` rows.
pub fn surface_from_run(run_dir: &Path, res: usize, range: f64, seed: u64) -> Result<(SurfaceGrid, f64)> {
    let ck = Checkpoint::load(run_dir.join("checkpoint.bin"))?;
    let l = Learner::from_checkpoint(&ck)?;
    let ds = SurfaceDataset::load(run_dir.join("surface_dataset.csv"))?;
    let z = l.ofe.encode_state_action(&ds.s, &ds.a, false)?;
    let critic = &l.agent.q1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d1 = random_direction(critic, &mut rng)?;
    let d2 = random_direction(critic, &mut rng)?;
    let coords = grid_coords(res, range);
    let grid = loss_surface(critic, &z, &ds.q_hat, &d1, &d2, &coords, &coords)?;
    let center = j_q(critic, &z, &ds.q_hat)?;
    Ok((grid, center))
}

/// Effective rank of a finished run's Q1 features on its probe batch.
pub fn rank_from_run(run_dir: &Path, delta: f64) -> Result<usize> {
    let ck = Checkpoint::load(run_dir.join("checkpoint.bin"))?;
    let l = Learner::from_checkpoint(&ck)?;
    let probe = SurfaceDataset::load(run_dir.join("probe.csv"))?;
    let phi = collect_features(&l.ofe, &l.agent.q1, &probe.s, &probe.a)?;
    effective_rank(&phi, delta)
}

/// Aligned text table (environment, variant or cell, best return) from one
/// or more summary CSVs.
pub fn render_report(paths: &[PathBuf]) -> Result<String> {
    let mut table = vec![[
        "environment".to_string(),
        "variant".to_string(),
        "best return".to_string(),
        "seeds".to_string(),
    ]];
    for p in paths {
        for r in read_summary(p)? {
            let best = match (r.max_return_mean, r.max_return_std) {
                (Some(m), Some(s)) => format!("{m:.1} ± {s:.1}"),
                _ => "failed".to_string(),
            };
            table.push([r.env, r.cell, best, format!("{}/{}", r.completed, r.seeds)]);
        }
    }
    let mut widths = [0usize; 4];
    for row in &table {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    for (i, row) in table.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(k, (c, w))| {
                let pad = w - c.chars().count();
                if k == 2 {
                    format!("{}{c}", " ".repeat(pad))
                } else {
                    format!("{c}{}", " ".repeat(pad))
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            out.push_str(&rule.join("  "));
            out.push('\n');
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.run.mode = RunMode::Sync;
        c.run.n_core = 1;
        c.run.n_env = 2;
        c.run.gradient_steps = 20;
        c.run.eval_interval = 10;
        c.run.eval_episodes = 1;
        c.agent.warmup_steps = Some(32);
        c.agent.batch_size = 8;
        c.ofenet.state_block.units = 4;
        c.ofenet.state_block.layers = 1;
        c.ofenet.action_block.units = 4;
        c.ofenet.action_block.layers = 1;
        c.diagnostics.rank_interval = 10;
        c.diagnostics.probe_size = 16;
        c.diagnostics.surface_samples = 8;
        c.seeds = vec![1, 2];
        c
    }

    #[test]
    fn ablation_diffs_are_exactly_the_documented_ones() {
        let full = ExperimentConfig::default();
        let v = ablation_configs(&full);
        assert_eq!(v.len(), 5);
        let diff = |i: usize| config_diff(&full, &v[i].1);
        assert!(diff(0).is_empty());
        assert_eq!(diff(1), ["run.mode", "run.n_core", "run.n_env"]);
        assert_eq!(diff(2), ["ofenet.enabled"]);
        let d3 = diff(3);
        for k in ["ofenet.state_block.units", "ofenet.action_block.units", "agent.actor_block.units", "agent.critic_block.units"] {
            assert!(d3.contains(&k.to_string()) || full_units_already_small(&full, k), "{k}");
        }
        assert!(d3.iter().all(|k| k.ends_with(".units")));
        assert_eq!(diff(4), ["agent.actor_block.kind", "agent.critic_block.kind"]);
        let small = &v[3].1;
        assert_eq!(small.ofenet.state_block.units, 256);
        assert_eq!(small.agent.critic_block.units, 256);
        assert_eq!(v[4].1.ofenet, full.ofenet);
    }

    fn full_units_already_small(c: &ExperimentConfig, key: &str) -> bool {
        let v = serde_json::to_value(c).unwrap();
        let mut cur = &v;
        for part in key.split('.') {
            cur = &cur[part];
        }
        cur.as_u64() == Some(SMALL_UNITS as u64)
    }

    #[test]
    fn one_by_one_grid_equals_single_run() {
        let mut c = tiny();
        c.seeds = vec![4];
        let d = tempfile::tempdir().unwrap();
        let units = c.agent.critic_block.units;
        let layers = c.agent.critic_block.layers;
        let g = run_grid(&[units], &[layers], &c, d.path()).unwrap();
        let single = tempfile::tempdir().unwrap();
        let s = run_experiment(&c, 4, single.path()).unwrap();
        let a = fs::read(g.runs[0].dir.join("metrics.csv")).unwrap();
        let b = fs::read(single.path().join("metrics.csv")).unwrap();
        assert_eq!(a, b);
        assert_eq!(g.rows[0].max_return_mean, s.max_avg_return);
    }

    #[test]
    fn grid_counts_and_log_scan() {
        let c = tiny();
        let d = tempfile::tempdir().unwrap();
        let g = run_grid(&[4, 6], &[1, 2], &c, d.path()).unwrap();
        assert_eq!(g.runs.len(), 8);
        assert_eq!(g.rows.len(), 4);
        assert!(g.all_completed());
        let back = read_summary(&g.summary_path).unwrap();
        assert_eq!(back, g.rows);
        for row in &back {
            let maxima: Vec<f64> = c
                .seeds
                .iter()
                .map(|s| max_return_in(&d.path().join(&row.cell).join(format!("seed_{s}"))).unwrap().unwrap())
                .collect();
            let m = maxima.iter().sum::<f64>() / maxima.len() as f64;
            assert!((row.max_return_mean.unwrap() - m).abs() <= 1e-12 * m.abs().max(1.0));
        }
        let text = render_report(&[g.summary_path.clone()]).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.contains("u6_l2"));
    }

    #[test]
    fn failed_cell_is_recorded() {
        let mut c = tiny();
        c.seeds = vec![1];
        let d = tempfile::tempdir().unwrap();
        // zero units is rejected when the networks are built
        let g = run_grid(&[0, 4], &[1], &c, d.path()).unwrap();
        assert!(!g.all_completed());
        assert_eq!(g.rows[0].completed, 0);
        assert!(g.rows[0].max_return_mean.is_none());
        assert!(!g.rows[0].failures.is_empty());
        assert_eq!(g.rows[1].completed, 1);
        assert!(render_report(&[g.summary_path]).unwrap().contains("failed"));
    }

    #[test]
    fn offline_diagnostics_on_a_finished_run() {
        let c = tiny();
        let d = tempfile::tempdir().unwrap();
        run_experiment(&c, 2, d.path()).unwrap();
        let (g, center) = surface_from_run(d.path(), 5, 1.0, 9).unwrap();
        assert_eq!(g.loss.len(), 5);
        assert!((g.center().unwrap() - center).abs() <= 1e-10);
        let r = rank_from_run(d.path(), 0.01).unwrap();
        assert!(r >= 1);
    }
}
