//! JSON experiment configs in, CSV results plus a JSON sidecar out.
//!
//! Configs are strict: unknown fields are rejected and referenced files
//! must exist at load time. Result CSVs use `\n` newlines, a period decimal
//! separator and 17-significant-digit floats, so reruns of the same config
//! are byte-identical at any thread count. `NaN` marks a value whose
//! hypothesis failed (e.g. a bound at too small a ratio).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linear_net::{MomentConstants, Provenance};
use crate::montecarlo::{
    lambda_sweep, moment_check, perturb_sweep, FitKind, McSettings, MomentCheck, PerturbGeometry,
    SweepRow,
};
use crate::regression::{self, WeightConfig};
use crate::rng::RngStream;
use crate::taskgen::{make_ensemble, Dataset, EnsembleSpec};

/// Floats are printed with 17 significant digits so they round-trip
/// exactly; non-finite values print as `NaN` / `inf` / `-inf`, which
/// `f64::from_str` accepts back.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".to_string() } else { "-inf".to_string() }
    } else {
        format!("{v:.16e}")
    }
}

/// One sweep axis: either an explicit value list or a range with `points`
/// values, log-spaced by default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridAxis {
    List { values: Vec<f64> },
    Range {
        min: f64,
        max: f64,
        points: usize,
        #[serde(default)]
        scale: GridScale,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridScale {
    #[default]
    Log,
    Linear,
}

impl GridAxis {
    pub fn expand(&self) -> Result<Vec<f64>> {
        match self {
            GridAxis::List { values } => {
                if values.is_empty() {
                    return Err(Error::Config("grid axis: empty value list".into()));
                }
                Ok(values.clone())
            }
            GridAxis::Range {
                min,
                max,
                points,
                scale,
            } => {
                if *points == 0 {
                    return Err(Error::Config("grid axis: points must be >= 1".into()));
                }
                if *points == 1 {
                    return Ok(vec![*min]);
                }
                if max <= min {
                    return Err(Error::Config("grid axis: max must exceed min".into()));
                }
                let n = *points as f64 - 1.0;
                let vals = match scale {
                    GridScale::Linear => (0..*points)
                        .map(|i| min + (max - min) * i as f64 / n)
                        .collect(),
                    GridScale::Log => {
                        if *min <= 0.0 {
                            return Err(Error::Config(
                                "grid axis: log scale requires min > 0".into(),
                            ));
                        }
                        let (lo, hi) = (min.ln(), max.ln());
                        (0..*points)
                            .map(|i| (lo + (hi - lo) * i as f64 / n).exp())
                            .collect()
                    }
                };
                Ok(vals)
            }
        }
    }
}

/// Cartesian product of the axes, first axis outermost.
fn expand_grid(axes: &[GridAxis]) -> Result<Vec<Vec<f64>>> {
    let expanded: Vec<Vec<f64>> = axes
        .iter()
        .map(|a| a.expand())
        .collect::<Result<Vec<_>>>()?;
    let mut points: Vec<Vec<f64>> = vec![Vec::new()];
    for axis in &expanded {
        let mut next = Vec::with_capacity(points.len() * axis.len());
        for p in &points {
            for &v in axis {
                let mut q = p.clone();
                q.push(v);
                next.push(q);
            }
        }
        points = next;
    }
    Ok(points)
}

/// The experiment kinds the CLI can run. Field names form the strict JSON
/// schema; see the bundled configs for examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ExperimentConfig {
    /// Weight sweep of the shared regression estimator against its closed
    /// forms.
    RegressSweep {
        ensemble: EnsembleSpec,
        ensemble_seed: u64,
        /// One axis per auxiliary task, swept as a cartesian product.
        grid: Vec<GridAxis>,
        mc: McSettings,
        output: String,
    },
    /// Weight sweep of the width-`q` network against the generalization
    /// bound (single auxiliary task).
    NnSweep {
        ensemble: EnsembleSpec,
        ensemble_seed: u64,
        q: usize,
        grid: Vec<GridAxis>,
        mc: McSettings,
        /// Optional override of the bound constants `[C1, C2, C3, C4]`.
        constants: Option<[f64; 4]>,
        output: String,
    },
    /// Column-perturbation bench over a signal-to-noise grid.
    PerturbBench {
        geometry: PerturbGeometry,
        r_grid: GridAxis,
        reps: usize,
        seed: u64,
        output: String,
    },
    /// Empirical moment and identity checks.
    MomentCheck {
        checks: Vec<MomentCheck>,
        reps: usize,
        seed: u64,
        output: String,
    },
    /// Plug-in optimal weights for a dataset directory (X.csv, Y.csv).
    Weights { dataset_dir: String, output: String },
}

impl ExperimentConfig {
    /// Experiment seed recorded in the sidecar; `None` for the
    /// deterministic weights path.
    pub fn seed(&self) -> Option<u64> {
        match self {
            ExperimentConfig::RegressSweep { mc, .. } | ExperimentConfig::NnSweep { mc, .. } => {
                Some(mc.seed)
            }
            ExperimentConfig::PerturbBench { seed, .. }
            | ExperimentConfig::MomentCheck { seed, .. } => Some(*seed),
            ExperimentConfig::Weights { .. } => None,
        }
    }

    pub fn output(&self) -> &str {
        match self {
            ExperimentConfig::RegressSweep { output, .. }
            | ExperimentConfig::NnSweep { output, .. }
            | ExperimentConfig::PerturbBench { output, .. }
            | ExperimentConfig::MomentCheck { output, .. }
            | ExperimentConfig::Weights { output, .. } => output,
        }
    }

    fn validate(&self, base: &Path) -> Result<()> {
        if self.output().is_empty() {
            return Err(Error::Config("output name must not be empty".into()));
        }
        match self {
            ExperimentConfig::RegressSweep { ensemble, grid, mc, .. } => {
                check_grid_arity(ensemble, grid)?;
                check_mc(mc)
            }
            ExperimentConfig::NnSweep { ensemble, grid, q, mc, .. } => {
                check_grid_arity(ensemble, grid)?;
                if ensemble.k != 1 {
                    return Err(Error::Config(
                        "nn-sweep: exactly one auxiliary task is supported".into(),
                    ));
                }
                if *q < 1 || *q > ensemble.k + 1 {
                    return Err(Error::Config(format!(
                        "nn-sweep: q = {q} outside 1..={}",
                        ensemble.k + 1
                    )));
                }
                check_mc(mc)
            }
            ExperimentConfig::PerturbBench { reps, .. }
            | ExperimentConfig::MomentCheck { reps, .. } => {
                if *reps == 0 {
                    return Err(Error::Config("reps must be >= 1".into()));
                }
                Ok(())
            }
            ExperimentConfig::Weights { dataset_dir, .. } => {
                let dir = base.join(dataset_dir);
                for file in ["X.csv", "Y.csv"] {
                    let p = dir.join(file);
                    if !p.is_file() {
                        return Err(Error::Config(format!(
                            "weights: referenced file {} does not exist",
                            p.display()
                        )));
                    }
                }
                Ok(())
            }
        }
    }
}

fn check_grid_arity(ensemble: &EnsembleSpec, grid: &[GridAxis]) -> Result<()> {
    if grid.len() != ensemble.k {
        return Err(Error::Config(format!(
            "grid has {} axes for {} auxiliary tasks",
            grid.len(),
            ensemble.k
        )));
    }
    if ensemble.k == 0 {
        return Err(Error::Config("sweep needs at least one auxiliary task".into()));
    }
    Ok(())
}

fn check_mc(mc: &McSettings) -> Result<()> {
    if mc.reps == 0 || mc.n_test == 0 {
        return Err(Error::Config("mc: reps and n_test must be >= 1".into()));
    }
    Ok(())
}

/// A parsed config plus the directory it was loaded from (relative dataset
/// paths resolve against it).
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base: PathBuf,
}

/// Parse and validate a config file. Syntax errors carry line/column;
/// schema violations carry the offending field path.
pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let config: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        Error::Config(format!("{}: at `{}`: {}", path.display(), e.path(), e.inner()))
    })?;
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    config.validate(&base)?;
    Ok(LoadedConfig { config, base })
}

/// Files produced by a run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Tabular results; `None` for the weights kind, which emits JSON only.
    pub csv_path: Option<PathBuf>,
    /// Sidecar with the config echo, seed and library version.
    pub sidecar_path: PathBuf,
    /// Report produced by the weights kind.
    pub report: Option<serde_json::Value>,
}

/// Execute a loaded config inside a dedicated thread pool and write results
/// under `out_dir`.
pub fn run(loaded: &LoadedConfig, out_dir: &Path, threads: Option<usize>) -> Result<RunOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| execute(loaded, out_dir))
}

fn execute(loaded: &LoadedConfig, out_dir: &Path) -> Result<RunOutput> {
    let config = &loaded.config;
    fs::create_dir_all(out_dir)?;
    let stem = out_dir.join(config.output());
    if let Some(parent) = stem.parent() {
        fs::create_dir_all(parent)?;
    }

    let mut report = None;
    let mut ensemble_echo = None;
    let csv_path = match config {
        ExperimentConfig::RegressSweep {
            ensemble,
            ensemble_seed,
            grid,
            mc,
            ..
        } => {
            let ens = make_ensemble(ensemble, &RngStream::new(*ensemble_seed, 0))?;
            ensemble_echo = Some(ens.to_json());
            let weights = expand_grid(grid)?
                .into_iter()
                .map(WeightConfig::new)
                .collect::<Result<Vec<_>>>()?;
            let rows = lambda_sweep(&ens, FitKind::Regression, &weights, ensemble.n, mc, None)?;
            let csv = regress_csv(&rows, ensemble.k);
            let path = stem.with_extension("csv");
            fs::write(&path, csv)?;
            Some(path)
        }
        ExperimentConfig::NnSweep {
            ensemble,
            ensemble_seed,
            q,
            grid,
            mc,
            constants,
            ..
        } => {
            let ens = make_ensemble(ensemble, &RngStream::new(*ensemble_seed, 0))?;
            ensemble_echo = Some(ens.to_json());
            let weights = expand_grid(grid)?
                .into_iter()
                .map(WeightConfig::new)
                .collect::<Result<Vec<_>>>()?;
            let overrides = constants.map(|[c1, c2, c3, c4]| MomentConstants {
                c1,
                c2,
                c3,
                c4,
                provenance: Provenance::Override,
            });
            let rows = lambda_sweep(
                &ens,
                FitKind::ReducedRank { q: *q },
                &weights,
                ensemble.n,
                mc,
                overrides,
            )?;
            let csv = nn_csv(&rows);
            let path = stem.with_extension("csv");
            fs::write(&path, csv)?;
            Some(path)
        }
        ExperimentConfig::PerturbBench {
            geometry,
            r_grid,
            reps,
            seed,
            ..
        } => {
            let rows = perturb_sweep(geometry, &r_grid.expand()?, *reps, *seed)?;
            let path = stem.with_extension("csv");
            fs::write(&path, perturb_csv(&rows))?;
            Some(path)
        }
        ExperimentConfig::MomentCheck {
            checks, reps, seed, ..
        } => {
            let rows = checks
                .iter()
                .map(|c| moment_check(c, *reps, *seed))
                .collect::<Result<Vec<_>>>()?;
            let path = stem.with_extension("csv");
            fs::write(&path, moment_csv(&rows))?;
            Some(path)
        }
        ExperimentConfig::Weights { dataset_dir, .. } => {
            let dir = loaded.base.join(dataset_dir);
            let value = weights_report(&dir)?;
            let path = stem.with_extension("json");
            fs::write(&path, format!("{:#}\n", value))?;
            report = Some(value);
            None
        }
    };

    let mut sidecar = serde_json::json!({
        "config": config,
        "seed": config.seed(),
        "version": crate::VERSION,
    });
    if let Some(echo) = ensemble_echo {
        // Realized population values, so sweeps can be audited without
        // re-deriving the ensemble from its seed.
        sidecar["ensemble"] = echo;
    }
    let sidecar_path = {
        let mut p = stem.into_os_string();
        p.push(".meta.json");
        PathBuf::from(p)
    };
    fs::write(&sidecar_path, format!("{:#}\n", sidecar))?;

    Ok(RunOutput {
        csv_path,
        sidecar_path,
        report,
    })
}

/// Number rendered as JSON, with non-finite values mapped to null.
fn json_num(v: f64) -> serde_json::Value {
    serde_json::Number::from_f64(v)
        .map(serde_json::Value::Number)
        .unwrap_or(serde_json::Value::Null)
}

/// Plug-in estimates and estimated optimal weights for a dataset directory.
pub fn weights_report(dir: &Path) -> Result<serde_json::Value> {
    let data = Dataset::read_dir(dir)?;
    let est = regression::plugin_params(&data)?;
    let opt = regression::estimated_optimal_weights(&data, &Default::default())?;

    // Verdict at the estimated optimum; an unbounded optimum is evaluated
    // at the reporting cap, where the decision matches the L <= 0 case.
    let eval_total = if opt.total_star.is_finite() {
        opt.total_star
    } else {
        1e12
    };
    let verdict = if eval_total > 0.0 {
        let w = WeightConfig::from_proportions(eval_total, &opt.proportions_star)?;
        Some(regression::utility_condition(&est, &w, data.n())?)
    } else {
        None
    };

    let spec_x = crate::mat::spectrum(est.sigma_x())?;
    let w_cols: Vec<Vec<f64>> = est
        .true_w()
        .column_iter()
        .map(|c| c.iter().copied().collect())
        .collect();
    let noise_vars: Vec<f64> = est.noise_sigmas().iter().map(|s| s * s).collect();

    Ok(serde_json::json!({
        "n": data.n(),
        "d": data.dim(),
        "k": data.num_aux(),
        "noise_sigma_hats": est.noise_sigmas(),
        "noise_variance_hats": noise_vars,
        "w_hat_columns": w_cols,
        "sigma_x_hat_spectral_norm": spec_x.max(),
        "sigma_x_hat_min_eigenvalue": spec_x.min(),
        "proportions_star": opt.proportions_star,
        "total_star": json_num(opt.total_star),
        "lambdas_star": opt.lambdas_star.iter().map(|&l| json_num(l)).collect::<Vec<_>>(),
        "f_value": opt.f_value,
        "unbounded_weight": opt.unbounded_weight,
        "non_unique": opt.non_unique,
        "solver": { "iterations": opt.iterations, "gradient_map_norm": opt.gradient_map_norm },
        "verdict": verdict.map(|v| serde_json::json!({
            "l": v.l,
            "r": v.r,
            "lambda_cap": json_num(v.lambda_cap),
            "beneficial_at_estimate": v.beneficial_for_given,
        })),
        "version": crate::VERSION,
    }))
}

fn push_row(out: &mut String, cells: &[String]) {
    out.push_str(&cells.join(","));
    out.push('\n');
}

fn regress_csv(rows: &[SweepRow], k: usize) -> String {
    let mut header = vec!["lambda".to_string()];
    for i in 1..k {
        header.push(format!("lambda{}", i + 1));
    }
    header.extend(
        ["mc_mean", "mc_se", "ek_closed", "e0", "threshold_cap", "lambda_star"]
            .iter()
            .map(|s| s.to_string()),
    );
    let mut out = String::new();
    push_row(&mut out, &header);
    for row in rows {
        let mc = row.mc.as_ref().expect("regression rows carry MC results");
        let mut cells: Vec<String> = row.sweep.iter().map(|(_, v)| fmt_f64(*v)).collect();
        cells.push(fmt_f64(mc.mean));
        cells.push(fmt_f64(mc.std_error));
        for name in ["ek_closed", "e0", "threshold_cap", "lambda_star"] {
            cells.push(fmt_f64(row.metric(name).unwrap_or(f64::NAN)));
        }
        push_row(&mut out, &cells);
    }
    out
}

fn nn_csv(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    push_row(
        &mut out,
        &[
            "lambda",
            "r_realized_mean",
            "mc_mean",
            "mc_se",
            "u_ek",
            "t1",
            "t2",
            "t3",
            "e0",
        ]
        .map(String::from),
    );
    for row in rows {
        let mc = row.mc.as_ref().expect("network rows carry MC results");
        let mut cells = vec![fmt_f64(row.sweep[0].1)];
        cells.push(fmt_f64(row.metric("r_realized_mean").unwrap_or(f64::NAN)));
        cells.push(fmt_f64(mc.mean));
        cells.push(fmt_f64(mc.std_error));
        for name in ["u_ek", "t1", "t2", "t3", "e0"] {
            cells.push(fmt_f64(row.metric(name).unwrap_or(f64::NAN)));
        }
        push_row(&mut out, &cells);
    }
    out
}

fn perturb_csv(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    push_row(
        &mut out,
        &[
            "r",
            "actual_mean",
            "ours_mean",
            "eym_mean",
            "tvv_mean",
            "zcol_mean",
            "projzcol_mean",
        ]
        .map(String::from),
    );
    for row in rows {
        let mut cells = vec![fmt_f64(row.sweep[0].1)];
        for name in [
            "actual_mean",
            "ours_mean",
            "eym_mean",
            "tvv_mean",
            "zcol_mean",
            "projzcol_mean",
        ] {
            cells.push(fmt_f64(row.metric(name).unwrap_or(f64::NAN)));
        }
        push_row(&mut out, &cells);
    }
    out
}

fn moment_csv(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    push_row(&mut out, &["kind", "param", "empirical", "bound", "ratio"].map(String::from));
    for row in rows {
        let param = row
            .sweep
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";");
        let cells = vec![
            row.label.clone().unwrap_or_default(),
            param,
            fmt_f64(row.metric("empirical").unwrap_or(f64::NAN)),
            fmt_f64(row.metric("bound").unwrap_or(f64::NAN)),
            fmt_f64(row.metric("ratio").unwrap_or(f64::NAN)),
        ];
        push_row(&mut out, &cells);
    }
    out
}
