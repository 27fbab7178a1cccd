//! The joint learning loop: label the mesh, find the certified level, grow the
//! training set, refit the residual model, then update `V` and the controller.

use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{label_rollouts, LabeledRollout, PairSampling, RolloutOptions, SystemKind, SystemSpec};
use crate::error::{Error, Result};
use crate::lqr::{lqr_law, LqrSolution};
use crate::lyapnet::{
    dynamics_fit_loss_frozen, freeze_fit_samples, lyapunov_loss, value_fit_loss, Architecture, ControllerNet,
    FrozenFitSample, LossWeights, LyapunovNet, Networks, ResidualDynamics, VdotSample,
};
use crate::netcore::{clip_global_norm, sgd_step, step_lr};
use crate::roa::{build_mesh, level_search, Label, Mesh, RoaReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_roa: f64,
    pub lambda_lip: f64,
    pub eta0: f64,
    /// Period of the level-multiplier decay; `None` keeps `η = 1 + η₀`.
    pub k_eta: Option<usize>,
    /// Saturation band `[a, b]` of the controller.
    pub sat_lo: f64,
    pub sat_hi: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub epsilon: f64,
    pub iterations: usize,
    pub seed: u64,
    pub mesh_dims: Vec<usize>,
    pub rollout: RolloutOptions,
    /// Base learning rate of `V` and the controller (step-decayed).
    pub lr: f64,
    /// Learning rate of the residual model.
    pub lr_dyn: f64,
    pub lr_step: usize,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs_lyap: usize,
    pub epochs_dyn: usize,
    /// Learning rate and epoch cap of the initial value fit `V ≈ 0.1‖x‖²`.
    pub pretrain_lr: f64,
    pub pretrain_epochs: usize,
    pub pretrain_tol: f64,
    /// Epochs of the initial residual-model fit on the stable set of the base law.
    pub pretrain_dyn_epochs: usize,
    pub arch: Architecture,
    pub pair_stride: usize,
    pub pairs_per_trajectory: usize,
    /// Cap on supervision pairs per dynamics phase (seeded subsample).
    pub max_fit_pairs: usize,
    /// Global gradient-norm cap for the Lyapunov phase.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_system(SystemKind::Pendulum)
    }
}

impl TrainConfig {
    pub fn for_system(kind: SystemKind) -> Self {
        let (lambda_roa, lambda_lip, eta0, k_eta, sat, mesh_dims, iterations) = match kind {
            SystemKind::Pendulum => (1000.0, 0.1, 5.0, Some(15), 2.0, vec![64, 64], 100),
            SystemKind::StrictFeedback => (500.0, 0.01, 2.0, None, 1.0, vec![25, 25, 25], 20),
            SystemKind::Cartpole => (500.0, 0.01, 9.0, None, 5.0, vec![10, 10, 10, 10], 20),
        };
        TrainConfig {
            lambda_roa,
            lambda_lip,
            eta0,
            k_eta,
            sat_lo: -sat,
            sat_hi: sat,
            gamma: 1e-6,
            kappa: 0.1,
            epsilon: 0.01,
            iterations,
            seed: 0,
            mesh_dims,
            rollout: RolloutOptions::default(),
            lr: 1e-3,
            lr_dyn: 1e-3,
            lr_step: 40,
            lr_decay: 0.5,
            batch_size: 256,
            epochs_lyap: 10,
            epochs_dyn: 10,
            pretrain_lr: 1e-2,
            pretrain_epochs: 300,
            pretrain_tol: 1e-4,
            pretrain_dyn_epochs: 10,
            arch: Architecture::default(),
            pair_stride: 5,
            pairs_per_trajectory: 40,
            max_fit_pairs: 8192,
            grad_clip: Some(100.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(what.to_string()));
        let positive = [
            ("lambda_roa", self.lambda_roa),
            ("gamma", self.gamma),
            ("kappa", self.kappa),
            ("epsilon", self.epsilon),
            ("lr", self.lr),
            ("lr_dyn", self.lr_dyn),
            ("pretrain_lr", self.pretrain_lr),
            ("rollout.dt", self.rollout.dt),
            ("rollout.r_conv", self.rollout.r_conv),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.lambda_lip >= 0.0 && self.eta0 >= 0.0 && self.pretrain_tol >= 0.0) {
            return bad("lambda_lip, eta0 and pretrain_tol must be non-negative");
        }
        if !(self.sat_lo < self.sat_hi) {
            return bad(&format!("saturation band [{}, {}] is empty", self.sat_lo, self.sat_hi));
        }
        if self.k_eta == Some(0) {
            return bad("k_eta must be at least 1");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.lr_step == 0 {
            return bad("lr_decay must lie in (0, 1] and lr_step must be at least 1");
        }
        if self.batch_size == 0 || self.pair_stride == 0 {
            return bad("batch_size and pair_stride must be at least 1");
        }
        if self.rollout.horizon < self.rollout.dt || self.rollout.divergence_factor < 1.0 {
            return bad("rollout horizon must cover one step and divergence_factor must be at least 1");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { lambda_roa: self.lambda_roa, lambda_lip: self.lambda_lip, kappa: self.kappa, epsilon: self.epsilon }
    }

    fn sampling(&self) -> PairSampling {
        PairSampling { stride: self.pair_stride, max_per_trajectory: self.pairs_per_trajectory }
    }
}

/// Level multiplier `η_i = 1 + η₀ / (1 + ⌊i / k_η⌋)`, or `1 + η₀` without `k_η`.
pub fn eta_schedule(i: usize, eta0: f64, k_eta: Option<usize>) -> f64 {
    match k_eta {
        Some(k) if k > 0 => 1.0 + eta0 / (1 + i / k) as f64,
        _ => 1.0 + eta0,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub c: f64,
    pub eta: f64,
    pub ratio_true: f64,
    pub ratio_fi: f64,
    pub ratio_est: f64,
    pub loss_lyap: f64,
    pub loss_dyn: f64,
    pub lr: f64,
    pub train_set_size: usize,
    pub wall_time_s: f64,
}

pub const METRICS_HEADER: &str = "iter,c,eta,ratio_true,ratio_fi,ratio_est,loss_lyap,loss_dyn,lr";

impl IterationLog {
    /// One CSV row matching [`METRICS_HEADER`]; wall time is left out so the
    /// file is reproducible.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.c,
            self.eta,
            self.ratio_true,
            self.ratio_fi,
            self.ratio_est,
            self.loss_lyap,
            self.loss_dyn,
            self.lr
        )
    }
}

pub fn metrics_csv(log: &[IterationLog]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for row in log {
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    out
}

/// Fresh networks around the LQR law of the nominal linearization.
pub fn initial_networks(spec: &SystemSpec, cfg: &TrainConfig) -> Result<(Networks, LqrSolution)> {
    cfg.validate()?;
    let (sol, law) = lqr_law(spec)?;
    let seed = cfg.seed;
    let lyap = LyapunovNet::new(spec.n, cfg.gamma, &cfg.arch.phi, seed.wrapping_mul(4).wrapping_add(1))?;
    let ctrl = ControllerNet::new(law, &cfg.arch.psi_hidden, cfg.sat_lo, cfg.sat_hi, seed.wrapping_mul(4).wrapping_add(2))?;
    let res = ResidualDynamics::new(spec, &cfg.arch, seed.wrapping_mul(4).wrapping_add(3))?;
    Ok((Networks { lyap, ctrl, res }, sol))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub value_mse: f64,
    pub value_epochs: usize,
    pub value_converged: bool,
    pub dyn_loss: f64,
    /// Indices of mesh points stable under the initial controller.
    pub initial_stable: Vec<usize>,
}

fn minibatches(len: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Fits `V(x) ≈ scale·‖x‖²` on `points` by SGD until the full-set MSE is at
/// most `tol` or `epochs` passes are spent. Returns (mse, epochs, converged).
pub fn fit_value(
    net: &mut LyapunovNet,
    points: &[Vec<f64>],
    scale: f64,
    lr: f64,
    epochs: usize,
    tol: f64,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize, bool)> {
    let mut mse = value_fit_loss(net, points, scale)?.0;
    for epoch in 0..epochs {
        if mse <= tol {
            return Ok((mse, epoch, true));
        }
        for b in minibatches(points.len(), batch, rng) {
            let xs: Vec<Vec<f64>> = b.iter().map(|&k| points[k].clone()).collect();
            let (_, mut g) = value_fit_loss(net, &xs, scale)?;
            clip_global_norm(&mut g, 10.0);
            sgd_step(&mut net.params, &g, lr)?;
        }
        mse = value_fit_loss(net, points, scale)?.0;
    }
    Ok((mse, epochs, mse <= tol))
}

/// `(x_k, (V(x_{k+1}) − V(x_k)) / dt)` pairs from the rollouts of `starts`.
pub fn supervision_pairs(nets: &Networks, rollouts: &[LabeledRollout], starts: &[usize], dt: f64) -> Vec<VdotSample> {
    let v = nets.lyap.frozen();
    starts
        .iter()
        .flat_map(|&k| rollouts[k].pairs.iter())
        .map(|p| VdotSample { x: p.x.clone(), target: (v.value(&p.next) - v.value(&p.x)) / dt })
        .collect()
}

/// Residual-model phase: SGD on the `V̇` fit with `V` and the controller frozen.
/// Returns the mean batch loss of the last epoch.
pub fn dynamics_phase(
    nets: &mut Networks,
    spec: &SystemSpec,
    pairs: &[VdotSample],
    cfg: &TrainConfig,
    epochs: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if pairs.is_empty() || epochs == 0 {
        return Ok(0.0);
    }
    let mut pairs = pairs.to_vec();
    if pairs.len() > cfg.max_fit_pairs {
        pairs.shuffle(rng);
        pairs.truncate(cfg.max_fit_pairs);
    }
    let samples: Vec<FrozenFitSample> = freeze_fit_samples(nets, spec, &pairs);
    let mut last = 0.0;
    for _ in 0..epochs {
        let mut total = 0.0;
        let batches = minibatches(samples.len(), cfg.batch_size, rng);
        for b in &batches {
            let batch: Vec<FrozenFitSample> = b.iter().map(|&k| samples[k].clone()).collect();
            let (loss, g) = dynamics_fit_loss_frozen(&nets.res, spec, &batch)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("dynamics fit loss".into()));
            }
            sgd_step(&mut nets.res.params, &g, cfg.lr_dyn)?;
            total += loss;
        }
        last = total / batches.len() as f64;
    }
    Ok(last)
}

/// Lyapunov/controller phase on the training points. Returns the mean batch
/// loss of the last epoch.
pub fn lyapunov_phase(
    nets: &mut Networks,
    spec: &SystemSpec,
    points: &[Vec<f64>],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if points.is_empty() || cfg.epochs_lyap == 0 {
        return Ok(0.0);
    }
    let weights = cfg.loss_weights();
    let mut last = 0.0;
    for _ in 0..cfg.epochs_lyap {
        let mut total = 0.0;
        let batches = minibatches(points.len(), cfg.batch_size, rng);
        for b in &batches {
            let batch: Vec<Vec<f64>> = b.iter().map(|&k| points[k].clone()).collect();
            let mut out = lyapunov_loss(nets, spec, &batch, &weights)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite("Lyapunov loss".into()));
            }
            if let Some(clip) = cfg.grad_clip {
                clip_two(&mut out.lyap_grads, &mut out.ctrl_grads, clip);
            }
            if !out.lyap_grads.is_finite() || !out.ctrl_grads.is_finite() {
                return Err(Error::NonFinite("Lyapunov loss gradient".into()));
            }
            sgd_step(&mut nets.lyap.params, &out.lyap_grads, lr)?;
            sgd_step(&mut nets.ctrl.params, &out.ctrl_grads, lr)?;
            total += out.loss;
        }
        last = total / batches.len() as f64;
    }
    Ok(last)
}

/// Joint global-norm clip over two gradient stores.
fn clip_two(a: &mut crate::netcore::ParamStore, b: &mut crate::netcore::ParamStore, max_norm: f64) {
    let sq = |s: &crate::netcore::ParamStore| s.iter().map(|(_, g)| g.as_slice().iter().map(|v| v * v).sum::<f64>()).sum::<f64>();
    let norm = (sq(a) + sq(b)).sqrt();
    if norm.is_finite() && norm > max_norm {
        let s = max_norm / norm;
        for store in [a, b] {
            for (_, g) in store.iter_mut() {
                for v in g.as_mut_slice() {
                    *v *= s;
                }
            }
        }
    }
}

fn apply_labels(mesh: &mut Mesh, rollouts: &[LabeledRollout]) {
    for (label, r) in mesh.labels.iter_mut().zip(rollouts) {
        *label = r.label;
    }
}

/// Initial value fit on the whole mesh, then the residual-model fit on
/// rollouts from the stable set of the initial controller.
pub fn pretrain(nets: &mut Networks, spec: &SystemSpec, mesh: &mut Mesh, cfg: &TrainConfig) -> Result<PretrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5052_4554);
    let (value_mse, value_epochs, value_converged) = fit_value(
        &mut nets.lyap,
        &mesh.points,
        0.1,
        cfg.pretrain_lr,
        cfg.pretrain_epochs,
        cfg.pretrain_tol,
        cfg.batch_size,
        &mut rng,
    )?;
    if value_converged {
        info!("value pretraining reached mse {value_mse:.3e} after {value_epochs} epochs");
    } else {
        warn!("value pretraining stopped at mse {value_mse:.3e} after {value_epochs} epochs (target {:.1e})", cfg.pretrain_tol);
    }
    let snap = nets.frozen(spec);
    let rollouts = label_rollouts(spec, &snap.ctrl, mesh, &cfg.rollout, Some(cfg.sampling()));
    apply_labels(mesh, &rollouts);
    let initial_stable: Vec<usize> = (0..mesh.len()).filter(|&k| mesh.labels[k].is_stable()).collect();
    let pairs = supervision_pairs(nets, &rollouts, &initial_stable, cfg.rollout.dt);
    let dyn_loss = dynamics_phase(nets, spec, &pairs, cfg, cfg.pretrain_dyn_epochs, &mut rng)?;
    info!("initial stable set: {} of {} mesh points; dynamics pretrain loss {dyn_loss:.4e}", initial_stable.len(), mesh.len());
    Ok(PretrainReport { value_mse, value_epochs, value_converged, dyn_loss, initial_stable })
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub nets: Networks,
    pub lqr: LqrSolution,
    pub pretrain: PretrainReport,
    pub log: Vec<IterationLog>,
    /// Labels and values of the final networks.
    pub final_mesh: Mesh,
    pub final_report: RoaReport,
    /// Set when a non-finite loss or gradient stopped the run; `nets` then
    /// holds the parameters from the start of the failed iteration.
    pub aborted: Option<String>,
}

/// Runs the full loop with a callback after every iteration.
pub fn train_with(
    cfg: &TrainConfig,
    spec: &SystemSpec,
    mut on_iteration: impl FnMut(&IterationLog, &Networks),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (mut nets, lqr) = initial_networks(spec, cfg)?;
    let mut mesh = build_mesh(spec, &cfg.mesh_dims)?;
    let pretrain = pretrain(&mut nets, spec, &mut mesh, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5452_4149);
    let sampling = cfg.sampling();
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut aborted = None;

    for i in 1..=cfg.iterations {
        let started = Instant::now();
        let checkpoint = nets.clone();
        let snap = nets.frozen(spec);
        let rollouts = label_rollouts(spec, &snap.ctrl, &mesh, &cfg.rollout, Some(sampling));
        apply_labels(&mut mesh, &rollouts);
        let (c, report) = level_search(&mut mesh, &snap, cfg.kappa)?;
        let eta = eta_schedule(i, cfg.eta0, cfg.k_eta);
        let mut train_idx: Vec<usize> = if c > 0.0 {
            (0..mesh.len()).filter(|&k| mesh.v_values[k] <= eta * c).collect()
        } else {
            Vec::new()
        };
        if train_idx.iter().all(|&k| mesh.points[k].iter().all(|v| *v == 0.0)) {
            warn!("iteration {i}: empty training set, falling back to the initial stable set");
            train_idx = pretrain.initial_stable.clone();
        }

        let result = (|| -> Result<(f64, f64, f64)> {
            let pairs = supervision_pairs(&nets, &rollouts, &train_idx, cfg.rollout.dt);
            let lyap_before = nets.lyap.params.fingerprint();
            let ctrl_before = nets.ctrl.params.fingerprint();
            let loss_dyn = dynamics_phase(&mut nets, spec, &pairs, cfg, cfg.epochs_dyn, &mut rng)?;
            if nets.lyap.params.fingerprint() != lyap_before || nets.ctrl.params.fingerprint() != ctrl_before {
                return Err(Error::Unsupported("dynamics phase modified V or the controller".into()));
            }
            let lr = step_lr(cfg.lr, i - 1, cfg.lr_step, cfg.lr_decay);
            let res_before = nets.res.params.fingerprint();
            let points: Vec<Vec<f64>> = train_idx.iter().map(|&k| mesh.points[k].clone()).collect();
            let loss_lyap = lyapunov_phase(&mut nets, spec, &points, cfg, lr, &mut rng)?;
            if nets.res.params.fingerprint() != res_before {
                return Err(Error::Unsupported("Lyapunov phase modified the residual model".into()));
            }
            Ok((loss_dyn, loss_lyap, lr))
        })();
        let (loss_dyn, loss_lyap, lr) = match result {
            Ok(v) => v,
            Err(e @ Error::NonFinite(_)) => {
                warn!("iteration {i} aborted: {e}; restoring parameters from its start");
                nets = checkpoint;
                aborted = Some(format!("iteration {i}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        let entry = IterationLog {
            iteration: i,
            c,
            eta,
            ratio_true: report.ratio_true,
            ratio_fi: report.ratio_fi,
            ratio_est: report.ratio_estimated,
            loss_lyap,
            loss_dyn,
            lr,
            train_set_size: train_idx.len(),
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        debug!("{entry:?}");
        info!(
            "iter {i:>4}  c={c:.4e}  eta={eta:.2}  true={:.2}%  fi={:.2}%  est={:.2}%  |S|={}  loss={loss_lyap:.4e}  dyn={loss_dyn:.4e}",
            report.ratio_true,
            report.ratio_fi,
            report.ratio_estimated,
            train_idx.len()
        );
        on_iteration(&entry, &nets);
        log.push(entry);
    }

    let (final_mesh, mut final_report) = evaluate(&nets, spec, &mesh, cfg)?;
    final_report.iteration = log.last().map_or(0, |l| l.iteration);
    Ok(TrainOutcome { nets, lqr, pretrain, log, final_mesh, final_report, aborted })
}

pub fn train(cfg: &TrainConfig, spec: &SystemSpec) -> Result<TrainOutcome> {
    train_with(cfg, spec, |_, _| {})
}

/// Relabels `mesh` under the networks' controller and runs the level search.
pub fn evaluate(nets: &Networks, spec: &SystemSpec, mesh: &Mesh, cfg: &TrainConfig) -> Result<(Mesh, RoaReport)> {
    let mut mesh = mesh.clone();
    let snap = nets.frozen(spec);
    let rollouts = label_rollouts(spec, &snap.ctrl, &mesh, &cfg.rollout, None);
    apply_labels(&mut mesh, &rollouts);
    let (_, report) = level_search(&mut mesh, &snap, cfg.kappa)?;
    Ok((mesh, report))
}

/// Fraction of labels equal to `label`, in percent.
pub fn label_share(mesh: &Mesh, label: Label) -> f64 {
    100.0 * mesh.count(|l| l == label) as f64 / mesh.len().max(1) as f64
}
