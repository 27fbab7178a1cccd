//! Run configuration and subcommand bodies for the `roaforge` binary.
//!
//! Every command writes only under its output directory and is reproducible
//! for a fixed seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use roaforge::dynamics::{make_system, SystemKind, SystemSpec};
use roaforge::error::Error;
use roaforge::lqr::{lqr_roa_estimate, LqrSolution};
use roaforge::lyapnet::Networks;
use roaforge::netcore::checkpoint;
use roaforge::roa::{boundary_rollouts, iss_margin, level_search, violation_bound, IssCertificate, RoaReport, ViolationBound};
use roaforge::trainer::{evaluate, initial_networks, metrics_csv, train_with, PretrainReport, TrainConfig, METRICS_HEADER};
use roaforge::util::write_atomic;
use roaforge::verify::{export_smt2, falsify_grid, ExportOptions, FalsificationResult, DEFAULT_PRECISION, DEFAULT_ZETA};

pub const SCHEMA_VERSION: u32 = 1;

/// On-disk run configuration.
///
/// `train` holds any subset of [`TrainConfig`] fields; missing ones take the
/// per-system defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub system: String,
    /// Plant constant overrides; `<key>_nom` targets the nominal model.
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub train: Value,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: Option<u64>,
    /// True-plant overrides applied after training (evaluation only).
    #[serde(default)]
    pub perturbation: BTreeMap<String, f64>,
    #[serde(default)]
    pub eval: EvalOptions,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Boundary rollouts; `None` picks 20 for the pendulum and 10 otherwise.
    pub boundary_samples: Option<usize>,
    /// Allowed `V` overshoot along boundary rollouts.
    pub boundary_slack: f64,
    /// Ray samples for the ISS check.
    pub iss_samples: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { boundary_samples: None, boundary_slack: 1e-3, iss_samples: 400, seed: 7 }
    }
}

/// A validated configuration with everything resolved.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub spec: SystemSpec,
    pub perturbed: Option<SystemSpec>,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    pub eval: EvalOptions,
}

/// Command-line overrides shared by all subcommands.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub iterations: Option<usize>,
}

/// Failure classes with distinct exit statuses.
#[derive(Debug)]
pub enum CliError {
    Config(anyhow::Error),
    Aborted(String),
    Other(anyhow::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "invalid configuration: {e:#}"),
            CliError::Aborted(msg) => write!(f, "training aborted: {msg}"),
            CliError::Other(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Other(_) => 2,
            CliError::Aborted(_) => 3,
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Other(e)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Other(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl RunConfig {
    /// Default configuration for one benchmark.
    pub fn for_system(kind: SystemKind) -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            system: kind.as_str().to_string(),
            params: BTreeMap::new(),
            train: Value::Object(Default::default()),
            out_dir: default_out_dir().join(kind.as_str()),
            seed: None,
            perturbation: BTreeMap::new(),
            eval: EvalOptions::default(),
        }
    }

    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).context("parsing run configuration")?;
        if cfg.schema_version != SCHEMA_VERSION {
            bail!("unsupported schema_version {} (expected {SCHEMA_VERSION})", cfg.schema_version);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Validates every field and applies command-line overrides.
    pub fn resolve(&self, ov: &Overrides) -> anyhow::Result<Resolved> {
        let spec = make_system(&self.system, &self.params)?;
        let mut merged = serde_json::to_value(TrainConfig::for_system(spec.kind))?;
        match (&mut merged, &self.train) {
            (_, Value::Null) => {}
            (Value::Object(base), Value::Object(patch)) => {
                for (k, v) in patch {
                    if !base.contains_key(k) {
                        bail!("unknown train field `{k}`");
                    }
                    base.insert(k.clone(), v.clone());
                }
            }
            _ => bail!("`train` must be an object"),
        }
        let mut train: TrainConfig = serde_json::from_value(merged).context("train block")?;
        if let Some(seed) = ov.seed.or(self.seed) {
            train.seed = seed;
        }
        if let Some(iters) = ov.iterations {
            train.iterations = iters;
        }
        train.validate()?;
        if train.mesh_dims.len() != spec.n || train.mesh_dims.iter().any(|&d| d < 2) {
            bail!("mesh_dims {:?} must list {} sizes of at least 2", train.mesh_dims, spec.n);
        }
        let perturbed = if self.perturbation.is_empty() { None } else { Some(spec.perturbed(&self.perturbation)?) };
        if self.eval.boundary_slack < 0.0 {
            bail!("eval.boundary_slack must be non-negative");
        }
        Ok(Resolved {
            spec,
            perturbed,
            train,
            out_dir: ov.out.clone().unwrap_or_else(|| self.out_dir.clone()),
            eval: self.eval.clone(),
        })
    }
}

impl Resolved {
    pub fn boundary_samples(&self) -> usize {
        self.eval.boundary_samples.unwrap_or(if self.spec.kind == SystemKind::Pendulum { 20 } else { 10 })
    }

    fn ensure_out_dir(&self) -> anyhow::Result<()> {
        fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))
    }

    fn write(&self, name: &str, contents: &str) -> anyhow::Result<PathBuf> {
        let path = self.out_dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        write_atomic(&path, contents.as_bytes())?;
        Ok(path)
    }

    /// Fresh networks with the parameters of `checkpoint` loaded.
    pub fn load_networks(&self, path: &Path) -> anyhow::Result<Networks> {
        let tensors = checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
        let (mut nets, _) = initial_networks(&self.spec, &self.train)?;
        nets.load_tensors(&tensors)?;
        Ok(nets)
    }
}

fn to_json<T: Serialize>(v: &T) -> anyhow::Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub system: String,
    pub iterations: usize,
    pub pretrain: PretrainSummary,
    pub final_report: RoaReport,
    pub lqr_baseline: RoaReport,
    pub best_ratio_estimated: f64,
    pub aborted: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct PretrainSummary {
    pub value_mse: f64,
    pub value_epochs: usize,
    pub value_converged: bool,
    pub dyn_loss: f64,
    pub initial_stable_points: usize,
}

impl From<&PretrainReport> for PretrainSummary {
    fn from(p: &PretrainReport) -> Self {
        PretrainSummary {
            value_mse: p.value_mse,
            value_epochs: p.value_epochs,
            value_converged: p.value_converged,
            dyn_loss: p.dyn_loss,
            initial_stable_points: p.initial_stable.len(),
        }
    }
}

/// Trains and writes `metrics.csv`, `checkpoint.json` and `report.json`.
///
/// The metrics file and the checkpoint are refreshed after every iteration.
pub fn cmd_train(res: &Resolved) -> CliResult<(Networks, TrainSummary)> {
    res.ensure_out_dir().map_err(CliError::Other)?;
    let metrics_path = res.out_dir.join("metrics.csv");
    let ckpt_path = res.out_dir.join("checkpoint.json");
    write_atomic(&metrics_path, format!("{METRICS_HEADER}\n").as_bytes())?;
    let mut rows = Vec::new();
    let mut io_error: Option<anyhow::Error> = None;
    let outcome = train_with(&res.train, &res.spec, |entry, nets| {
        rows.push(entry.clone());
        if io_error.is_none() {
            let result = write_atomic(&metrics_path, metrics_csv(&rows).as_bytes())
                .and_then(|_| checkpoint::save(&ckpt_path, &nets.to_tensors()));
            if let Err(e) = result {
                io_error = Some(e.into());
            }
        }
    })?;
    if let Some(e) = io_error {
        return Err(CliError::Other(e));
    }
    write_atomic(&metrics_path, metrics_csv(&outcome.log).as_bytes())?;
    checkpoint::save(&ckpt_path, &outcome.nets.to_tensors())?;
    let snap = outcome.nets.frozen(&res.spec);
    let lqr_baseline = lqr_roa_estimate(&outcome.lqr, &outcome.final_mesh, &snap, res.train.kappa)?;
    let summary = TrainSummary {
        system: res.spec.kind.as_str().into(),
        iterations: outcome.log.len(),
        pretrain: (&outcome.pretrain).into(),
        final_report: outcome.final_report.clone(),
        lqr_baseline,
        best_ratio_estimated: outcome.log.iter().map(|l| l.ratio_est).fold(outcome.final_report.ratio_estimated, f64::max),
        aborted: outcome.aborted.clone(),
    };
    res.write("report.json", &to_json(&summary)?)?;
    info!("wrote {}", res.out_dir.display());
    if let Some(msg) = outcome.aborted {
        return Err(CliError::Aborted(msg));
    }
    Ok((outcome.nets, summary))
}

#[derive(Clone, Debug, Serialize)]
pub struct BoundarySummary {
    pub plant: String,
    pub requested: usize,
    pub sampled: usize,
    pub stayed: usize,
    pub converged: usize,
    pub stayed_and_converged: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub report: RoaReport,
    pub lqr_baseline: RoaReport,
    pub iss: Option<IssCertificate>,
    pub violation: Option<ViolationBound>,
    pub boundary: BoundarySummary,
}

/// Recomputes ratios, ISS diagnostics and boundary rollouts of a checkpoint.
///
/// Writes `eval.json`, `mesh.csv` and one CSV per boundary rollout under
/// `trajectories/`. With a perturbation block the rollouts use the perturbed
/// plant while the level comes from the unperturbed one.
pub fn cmd_eval(res: &Resolved, nets: &Networks) -> CliResult<EvalReport> {
    res.ensure_out_dir().map_err(CliError::Other)?;
    let (lqr, _) = roaforge::lqr::lqr_law(&res.spec)?;
    let mesh = roaforge::roa::build_mesh(&res.spec, &res.train.mesh_dims)?;
    let (mesh, report) = evaluate(nets, &res.spec, &mesh, &res.train)?;
    let snap = nets.frozen(&res.spec);
    let lqr_baseline = lqr_roa_estimate(&lqr, &mesh, &snap, res.train.kappa)?;
    let c = report.c;
    let (iss, violation) = if c > 0.0 {
        match iss_margin(&snap, c, res.eval.iss_samples, res.train.kappa, res.eval.seed) {
            Ok(cert) => {
                let vb = violation_bound(&mesh, c, res.train.kappa, &cert)?;
                (Some(cert), Some(vb))
            }
            Err(Error::Empty(msg)) => {
                log::warn!("ISS check skipped: {msg}");
                (None, None)
            }
            Err(e) => return Err(e.into()),
        }
    } else {
        (None, None)
    };
    let plant = res.perturbed.as_ref().unwrap_or(&res.spec);
    let requested = res.boundary_samples();
    let runs = boundary_rollouts(&snap, plant, &snap.ctrl, c, requested, res.eval.boundary_slack, &res.train.rollout, res.eval.seed);
    let traj_dir = res.out_dir.join("trajectories");
    if traj_dir.exists() {
        fs::remove_dir_all(&traj_dir).with_context(|| format!("clearing {}", traj_dir.display()))?;
    }
    for (k, r) in runs.iter().enumerate() {
        res.write(&format!("trajectories/boundary_{k:02}.csv"), &r.trajectory.to_csv())?;
    }
    res.write("mesh.csv", &mesh.to_csv())?;
    let boundary = BoundarySummary {
        plant: if res.perturbed.is_some() { "perturbed".into() } else { "true".into() },
        requested,
        sampled: runs.len(),
        stayed: runs.iter().filter(|r| r.stayed).count(),
        converged: runs.iter().filter(|r| r.converged).count(),
        stayed_and_converged: runs.iter().filter(|r| r.stayed && r.converged).count(),
    };
    let out = EvalReport { report, lqr_baseline, iss, violation, boundary };
    res.write("eval.json", &to_json(&out)?)?;
    Ok(out)
}

/// Level of a checkpoint under the true plant (relabels the mesh).
pub fn certified_level(res: &Resolved, nets: &Networks) -> CliResult<f64> {
    let mut mesh = roaforge::roa::build_mesh(&res.spec, &res.train.mesh_dims)?;
    let snap = nets.frozen(&res.spec);
    let labels = roaforge::dynamics::label_rollouts(&res.spec, &snap.ctrl, &mesh, &res.train.rollout, None);
    for (l, r) in mesh.labels.iter_mut().zip(labels) {
        *l = r.label;
    }
    Ok(level_search(&mut mesh, &snap, res.train.kappa)?.0)
}

/// Grid falsification at `resolution` (default half the mesh spacing).
/// Writes `verify.json`.
pub fn cmd_verify(res: &Resolved, nets: &Networks, zeta: Option<f64>, resolution: Option<f64>) -> CliResult<FalsificationResult> {
    res.ensure_out_dir().map_err(CliError::Other)?;
    let c = certified_level(res, nets)?;
    let tau = roaforge::roa::build_mesh(&res.spec, &res.train.mesh_dims)?.tau;
    let zeta = zeta.unwrap_or(DEFAULT_ZETA);
    let resolution = resolution.unwrap_or(tau / 2.0);
    if !(zeta > 0.0) || !(resolution > 0.0) {
        return Err(CliError::Config(anyhow!("zeta and resolution must be positive")));
    }
    let result = falsify_grid(&nets.frozen(&res.spec), c, zeta, res.train.kappa, resolution)?;
    res.write("verify.json", &to_json(&result)?)?;
    Ok(result)
}

#[derive(Clone, Debug, Serialize)]
pub struct BaselineReport {
    pub p: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub riccati_residual: f64,
    pub c_prime: f64,
    pub report: RoaReport,
}

fn rows(m: &roaforge::linalg::Mat) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// LQR solution and its estimated RoA under the given (or initial) networks.
/// Writes `baseline.json`.
pub fn cmd_baseline(res: &Resolved, nets: Option<&Networks>) -> CliResult<BaselineReport> {
    res.ensure_out_dir().map_err(CliError::Other)?;
    let (lqr, initial): (LqrSolution, Networks) = {
        let (nets0, sol) = initial_networks(&res.spec, &res.train)?;
        (sol, nets0)
    };
    let nets = nets.unwrap_or(&initial);
    let mesh = roaforge::roa::build_mesh(&res.spec, &res.train.mesh_dims)?;
    let (mesh, _) = evaluate(nets, &res.spec, &mesh, &res.train)?;
    let report = lqr_roa_estimate(&lqr, &mesh, &nets.frozen(&res.spec), res.train.kappa)?;
    let out =
        BaselineReport { p: rows(&lqr.p), k: rows(&lqr.k), riccati_residual: lqr.riccati_residual, c_prime: report.c, report };
    res.write("baseline.json", &to_json(&out)?)?;
    Ok(out)
}

/// Writes `query.smt2` for the certified level of a checkpoint.
pub fn cmd_export_smt2(res: &Resolved, nets: &Networks, zeta: Option<f64>) -> CliResult<PathBuf> {
    res.ensure_out_dir().map_err(CliError::Other)?;
    let mut opts = ExportOptions::new(0.0, res.train.kappa);
    opts.zeta = zeta.unwrap_or(DEFAULT_ZETA);
    opts.precision = DEFAULT_PRECISION;
    // Refuse oversized nets before the (expensive) level computation.
    export_smt2(&nets.frozen(&res.spec), &opts)?;
    opts.c = certified_level(res, nets)?;
    let text = export_smt2(&nets.frozen(&res.spec), &opts)?;
    Ok(res.write("query.smt2", &text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_system() {
        let cfg = RunConfig::from_json(r#"{"schema_version": 1, "system": "cartpole"}"#).unwrap();
        let r = cfg.resolve(&Overrides::default()).unwrap();
        assert_eq!(r.train.eta0, 9.0);
        assert_eq!(r.boundary_samples(), 10);
        assert_eq!(r.train.mesh_dims, vec![10; 4]);
    }

    #[test]
    fn partial_train_block_and_overrides() {
        let cfg = RunConfig::from_json(
            r#"{"schema_version": 1, "system": "pendulum", "seed": 4, "train": {"iterations": 7, "lr": 0.01}}"#,
        )
        .unwrap();
        let r = cfg.resolve(&Overrides { iterations: Some(3), ..Default::default() }).unwrap();
        assert_eq!((r.train.iterations, r.train.lr, r.train.seed, r.train.lambda_roa), (3, 0.01, 4, 1000.0));
        let r = cfg.resolve(&Overrides { seed: Some(9), ..Default::default() }).unwrap();
        assert_eq!(r.train.seed, 9);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_json(r#"{"schema_version": 1, "system": "pendulum", "colour": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"schema_version": 2, "system": "pendulum"}"#).is_err());
        let bad = [
            r#"{"schema_version": 1, "system": "pendulum", "train": {"lrr": 1}}"#,
            r#"{"schema_version": 1, "system": "pendulum", "train": {"sat_lo": 5}}"#,
            r#"{"schema_version": 1, "system": "pendulum", "train": {"mesh_dims": [4]}}"#,
            r#"{"schema_version": 1, "system": "rocket"}"#,
            r#"{"schema_version": 1, "system": "pendulum", "params": {"q": 1}}"#,
            r#"{"schema_version": 1, "system": "cartpole", "perturbation": {"zz": 1}}"#,
        ];
        for text in bad {
            let parsed = RunConfig::from_json(text);
            assert!(parsed.is_err() || parsed.unwrap().resolve(&Overrides::default()).is_err(), "{text}");
        }
    }

    #[test]
    fn perturbation_changes_only_the_true_plant() {
        let cfg =
            RunConfig::from_json(r#"{"schema_version": 1, "system": "cartpole", "perturbation": {"b_c": 9.1}}"#).unwrap();
        let r = cfg.resolve(&Overrides::default()).unwrap();
        let p = r.perturbed.unwrap();
        assert_ne!(p.true_plant, r.spec.true_plant);
        assert_eq!(p.nominal_plant, r.spec.nominal_plant);
    }
}
