//! Benchmark plants, fixed-step RK4 rollouts and stable-initial-state labeling.
//!
//! Every plant is control-affine, `ẋ = f(x) + g(x)u`, and exists in two
//! parameterizations: the true plant used to generate data and the nominal
//! plant (the initial model estimate). Both are described by [`PlantParams`].

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm2, Mat};
use crate::roa::{Label, Mesh};

pub const GRAVITY: f64 = 9.81;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Pendulum,
    StrictFeedback,
    Cartpole,
}

impl SystemKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SystemKind::Pendulum => "pendulum",
            SystemKind::StrictFeedback => "strict_feedback",
            SystemKind::Cartpole => "cartpole",
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SystemKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pendulum" => Ok(SystemKind::Pendulum),
            "strict_feedback" => Ok(SystemKind::StrictFeedback),
            "cartpole" => Ok(SystemKind::Cartpole),
            other => Err(Error::UnknownSystem(other.to_string())),
        }
    }
}

/// Physical constants of one plant instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantParams {
    /// `m l² θ̈ − m g l sin θ = u`, state `(θ, ω)`.
    Pendulum { mass: f64, length: f64, gravity: f64 },
    /// `ẋ₁ = e₁x₂, ẋ₂ = e₂x₃, ẋ₃ = e₃x₁² + e₄u`.
    StrictFeedback { e: [f64; 4] },
    /// Cart-pole with pole angle measured from upright, state `(θ, ω, x, v)`.
    Cartpole { cart_mass: f64, pole_mass: f64, length: f64, friction: f64, gravity: f64 },
}

impl PlantParams {
    pub fn state_dim(&self) -> usize {
        match self {
            PlantParams::Pendulum { .. } => 2,
            PlantParams::StrictFeedback { .. } => 3,
            PlantParams::Cartpole { .. } => 4,
        }
    }

    pub fn input_dim(&self) -> usize {
        1
    }

    /// Drift `f(x)` and actuation `g(x)` (n×m) evaluated together.
    pub fn affine_terms(&self, x: &[f64]) -> Result<(Vec<f64>, Mat)> {
        match *self {
            PlantParams::Pendulum { mass, length, gravity } => {
                let (th, om) = (x[0], x[1]);
                let f = vec![om, gravity / length * th.sin()];
                let g = Mat::col_vec(&[0.0, 1.0 / (mass * length * length)]);
                Ok((f, g))
            }
            PlantParams::StrictFeedback { e } => {
                let f = vec![e[0] * x[1], e[1] * x[2], e[2] * x[0] * x[0]];
                let g = Mat::col_vec(&[0.0, 0.0, e[3]]);
                Ok((f, g))
            }
            PlantParams::Cartpole { cart_mass, pole_mass, length, friction, gravity } => {
                let (th, om, v) = (x[0], x[1], x[3]);
                let (s, c) = th.sin_cos();
                let total = cart_mass + pole_mass;
                // Mass matrix rows act on (θ̈, ẍ):
                //   [-m l cosθ, M+m] = u - m l ω² sinθ - b v
                //   [ l,       -cosθ] = g sinθ
                if pole_mass * c * c >= total {
                    return Err(Error::Singular(format!("cart-pole mass matrix at theta={th}")));
                }
                let det = length * (pole_mass * c * c - total);
                let r1 = -pole_mass * length * om * om * s - friction * v;
                let r2 = gravity * s;
                let th_acc = (-c * r1 - total * r2) / det;
                let x_acc = (-pole_mass * length * c * r2 - length * r1) / det;
                let f = vec![om, th_acc, v, x_acc];
                let g = Mat::col_vec(&[0.0, -c / det, 0.0, -length / det]);
                Ok((f, g))
            }
        }
    }

    pub fn field(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let (mut f, g) = self.affine_terms(x)?;
        for (i, fi) in f.iter_mut().enumerate() {
            for (j, uj) in u.iter().enumerate() {
                *fi += g[(i, j)] * uj;
            }
        }
        Ok(f)
    }

    /// Total mechanical energy (cart-pole only; used as an integrator sanity check).
    pub fn cartpole_energy(&self, x: &[f64]) -> Option<f64> {
        match *self {
            PlantParams::Cartpole { cart_mass, pole_mass, length, gravity, .. } => {
                let (th, om, v) = (x[0], x[1], x[3]);
                let kinetic = 0.5 * (cart_mass + pole_mass) * v * v - pole_mass * length * th.cos() * v * om
                    + 0.5 * pole_mass * length * length * om * om;
                Some(kinetic + pole_mass * gravity * length * th.cos())
            }
            _ => None,
        }
    }

    fn check_finite(&self) -> Result<()> {
        let values: Vec<f64> = match *self {
            PlantParams::Pendulum { mass, length, gravity } => vec![mass, length, gravity],
            PlantParams::StrictFeedback { e } => e.to_vec(),
            PlantParams::Cartpole { cart_mass, pole_mass, length, friction, gravity } => {
                vec![cart_mass, pole_mass, length, friction, gravity]
            }
        };
        if values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("non-finite plant constant in {self:?}")))
        }
    }
}

/// Where the residual `g` correction enters the actuation matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualGShape {
    /// One trainable scalar added to `g₀[row, :]`.
    Scalar { row: usize },
    /// A network whose outputs are added to the listed rows of `g₀`.
    Mask(Vec<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Model {
    True,
    Nominal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl StateBox {
    pub fn symmetric(half_widths: &[f64]) -> Self {
        StateBox { lo: half_widths.iter().map(|h| -h).collect(), hi: half_widths.to_vec() }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Largest `t ≥ 0` with `t·dir` inside the box (box must contain the origin).
    pub fn ray_exit(&self, dir: &[f64]) -> f64 {
        let mut t = f64::INFINITY;
        for (d, (lo, hi)) in dir.iter().zip(self.lo.iter().zip(&self.hi)) {
            if *d > 0.0 {
                t = t.min(hi / d);
            } else if *d < 0.0 {
                t = t.min(lo / d);
            }
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub kind: SystemKind,
    pub n: usize,
    pub m: usize,
    pub true_plant: PlantParams,
    pub nominal_plant: PlantParams,
    pub state_box: StateBox,
    pub residual_f_mask: Vec<usize>,
    pub residual_g_shape: ResidualGShape,
    pub equilibrium_input: Vec<f64>,
}

impl SystemSpec {
    pub fn plant(&self, which: Model) -> &PlantParams {
        match which {
            Model::True => &self.true_plant,
            Model::Nominal => &self.nominal_plant,
        }
    }

    /// Returns a copy whose true plant has the given constants overridden.
    pub fn perturbed(&self, overrides: &BTreeMap<String, f64>) -> Result<SystemSpec> {
        if let Some(key) = overrides.keys().find(|k| !plant_keys(self.kind).contains(&k.as_str())) {
            return Err(Error::InvalidParameter(format!("unknown perturbation `{key}` for {}", self.kind)));
        }
        let mut out = self.clone();
        out.true_plant = apply_overrides(self.kind, &self.true_plant, overrides, "")?;
        Ok(out)
    }
}

fn plant_keys(kind: SystemKind) -> &'static [&'static str] {
    match kind {
        SystemKind::Pendulum => &["m", "l", "g"],
        SystemKind::StrictFeedback => &["e1", "e2", "e3", "e4"],
        SystemKind::Cartpole => &["M", "m", "l", "b_c", "g"],
    }
}

fn apply_overrides(
    kind: SystemKind,
    base: &PlantParams,
    params: &BTreeMap<String, f64>,
    suffix: &str,
) -> Result<PlantParams> {
    let get = |key: &str, default: f64| -> Result<f64> {
        match params.get(&format!("{key}{suffix}")) {
            Some(v) if v.is_finite() => Ok(*v),
            Some(v) => Err(Error::InvalidParameter(format!("{key}{suffix} = {v}"))),
            None => Ok(default),
        }
    };
    let out = match (kind, base) {
        (SystemKind::Pendulum, PlantParams::Pendulum { mass, length, gravity }) => PlantParams::Pendulum {
            mass: get("m", *mass)?,
            length: get("l", *length)?,
            gravity: get("g", *gravity)?,
        },
        (SystemKind::StrictFeedback, PlantParams::StrictFeedback { e }) => PlantParams::StrictFeedback {
            e: [get("e1", e[0])?, get("e2", e[1])?, get("e3", e[2])?, get("e4", e[3])?],
        },
        (SystemKind::Cartpole, PlantParams::Cartpole { cart_mass, pole_mass, length, friction, gravity }) => {
            PlantParams::Cartpole {
                cart_mass: get("M", *cart_mass)?,
                pole_mass: get("m", *pole_mass)?,
                length: get("l", *length)?,
                friction: get("b_c", *friction)?,
                gravity: get("g", *gravity)?,
            }
        }
        _ => return Err(Error::InvalidParameter(format!("plant {base:?} does not match {kind}"))),
    };
    out.check_finite()?;
    Ok(out)
}

/// Builds one of the benchmark plants.
///
/// Parameter keys are the plant constants (`m`, `l`, `g` for the pendulum;
/// `e1..e4` for the strict-feedback system; `M`, `m`, `l`, `b_c`, `g` for the
/// cart-pole). A `_nom` suffix addresses the nominal model. Missing keys take
/// the benchmark defaults; `g` applies to both models unless `g_nom` is given.
pub fn make_system(name: &str, params: &BTreeMap<String, f64>) -> Result<SystemSpec> {
    let kind: SystemKind = name.parse()?;
    let keys = plant_keys(kind);
    for key in params.keys() {
        let base = key.strip_suffix("_nom").unwrap_or(key);
        if !keys.contains(&base) {
            return Err(Error::InvalidParameter(format!("unknown parameter `{key}` for {kind}")));
        }
    }
    if let Some((k, v)) = params.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::InvalidParameter(format!("{k} = {v}")));
    }
    let gravity = params.get("g").copied().unwrap_or(GRAVITY);
    let mut nominal_params = params.clone();
    if !params.contains_key("g_nom") {
        nominal_params.insert("g_nom".into(), gravity);
    }

    let (true_default, nominal_default, state_box, f_mask, g_shape) = match kind {
        SystemKind::Pendulum => (
            PlantParams::Pendulum { mass: 1.0, length: 0.5, gravity },
            PlantParams::Pendulum { mass: 0.8, length: 0.4, gravity },
            StateBox::symmetric(&[PI, PI]),
            vec![1],
            ResidualGShape::Scalar { row: 1 },
        ),
        SystemKind::StrictFeedback => (
            PlantParams::StrictFeedback { e: [1.0, 1.0, 1.0, 1.0] },
            PlantParams::StrictFeedback { e: [0.9, 0.8, 0.9, 0.8] },
            StateBox::symmetric(&[1.5, 1.5, 2.0]),
            vec![0, 1, 2],
            ResidualGShape::Scalar { row: 2 },
        ),
        SystemKind::Cartpole => (
            PlantParams::Cartpole { cart_mass: 1.0, pole_mass: 0.3, length: 1.0, friction: 0.0, gravity },
            PlantParams::Cartpole { cart_mass: 0.8, pole_mass: 0.27, length: 0.8, friction: 0.0, gravity },
            StateBox::symmetric(&[PI / 6.0, 1.0, 1.0, 1.5]),
            vec![1, 3],
            ResidualGShape::Mask(vec![1, 3]),
        ),
    };
    let true_plant = apply_overrides(kind, &true_default, params, "")?;
    let nominal_plant = apply_overrides(kind, &nominal_default, &nominal_params, "_nom")?;
    let n = true_plant.state_dim();
    let spec = SystemSpec {
        kind,
        n,
        m: true_plant.input_dim(),
        true_plant,
        nominal_plant,
        state_box,
        residual_f_mask: f_mask,
        residual_g_shape: g_shape,
        equilibrium_input: vec![0.0],
    };
    Ok(spec)
}

/// `f(x) + g(x)u` for the true or nominal plant.
pub fn eval_field(spec: &SystemSpec, which: Model, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    if x.len() != spec.n || u.len() != spec.m {
        return Err(Error::Shape(format!(
            "state/input of length {}/{} for a {}-state {}-input plant",
            x.len(),
            u.len(),
            spec.n,
            spec.m
        )));
    }
    spec.plant(which).field(x, u)
}

/// A state-feedback law.
pub trait Policy: Sync {
    fn act(&self, x: &[f64]) -> Vec<f64>;
}

impl<F> Policy for F
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn act(&self, x: &[f64]) -> Vec<f64> {
        self(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutOptions {
    pub dt: f64,
    pub horizon: f64,
    /// Convergence radius on `‖x‖`.
    pub r_conv: f64,
    /// Consecutive states inside `r_conv` required to call a run converged.
    pub settle_window: usize,
    /// Stop as soon as the state leaves the state box.
    pub stop_on_exit: bool,
    /// Runs whose state leaves the box scaled by this factor are declared divergent.
    pub divergence_factor: f64,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions {
            dt: 0.01,
            horizon: 20.0,
            r_conv: 0.1,
            settle_window: 50,
            stop_on_exit: true,
            divergence_factor: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub t0: f64,
    pub dt: f64,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub left_box: bool,
    pub converged: bool,
}

impl Trajectory {
    /// CSV with columns `t, x1..xn, u1..um`. The final state repeats the last input.
    pub fn to_csv(&self) -> String {
        let n = self.states.first().map_or(0, Vec::len);
        let m = self.inputs.first().map_or(0, Vec::len);
        let mut out = String::from("t");
        for i in 1..=n {
            out.push_str(&format!(",x{i}"));
        }
        for j in 1..=m {
            out.push_str(&format!(",u{j}"));
        }
        out.push('\n');
        for (k, x) in self.states.iter().enumerate() {
            out.push_str(&format!("{}", self.t0 + k as f64 * self.dt));
            for v in x {
                out.push_str(&format!(",{v}"));
            }
            if let Some(u) = self.inputs.get(k).or_else(|| self.inputs.last()) {
                for v in u {
                    out.push_str(&format!(",{v}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Outcome flags of a closed-loop simulation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RolloutStatus {
    pub steps: usize,
    pub left_box: bool,
    pub converged: bool,
    pub diverged: bool,
}

/// Core RK4 loop. `on_step(k, x_k, u_k, x_{k+1})` is called after every step.
pub fn simulate<P: Policy + ?Sized>(
    spec: &SystemSpec,
    which: Model,
    policy: &P,
    x0: &[f64],
    opts: &RolloutOptions,
    mut on_step: impl FnMut(usize, &[f64], &[f64], &[f64]),
) -> RolloutStatus {
    let plant = spec.plant(which);
    let n = spec.n;
    let steps = (opts.horizon / opts.dt).round().max(1.0) as usize;
    let dt = opts.dt;
    let limit: Vec<f64> = spec
        .state_box
        .lo
        .iter()
        .zip(&spec.state_box.hi)
        .map(|(lo, hi)| opts.divergence_factor * lo.abs().max(hi.abs()))
        .collect();

    let mut status = RolloutStatus::default();
    let mut x = x0.to_vec();
    if !x.iter().all(|v| v.is_finite()) {
        status.diverged = true;
        status.left_box = true;
        return status;
    }
    if !spec.state_box.contains(&x) {
        status.left_box = true;
        if opts.stop_on_exit {
            return status;
        }
    }
    let mut settled = usize::from(norm2(&x) <= opts.r_conv);
    if settled >= opts.settle_window {
        status.converged = true;
        return status;
    }

    let field = |s: &[f64]| -> Option<(Vec<f64>, Vec<f64>)> {
        let u = policy.act(s);
        let dx = plant.field(s, &u).ok()?;
        Some((dx, u))
    };
    let mut stage = vec![0.0; n];
    for k in 0..steps {
        let Some((k1, u0)) = field(&x) else {
            status.diverged = true;
            break;
        };
        for i in 0..n {
            stage[i] = x[i] + 0.5 * dt * k1[i];
        }
        let Some((k2, _)) = field(&stage) else {
            status.diverged = true;
            break;
        };
        for i in 0..n {
            stage[i] = x[i] + 0.5 * dt * k2[i];
        }
        let Some((k3, _)) = field(&stage) else {
            status.diverged = true;
            break;
        };
        for i in 0..n {
            stage[i] = x[i] + dt * k3[i];
        }
        let Some((k4, _)) = field(&stage) else {
            status.diverged = true;
            break;
        };
        let next: Vec<f64> =
            (0..n).map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect();
        on_step(k, &x, &u0, &next);
        status.steps = k + 1;
        x = next;

        if !x.iter().all(|v| v.is_finite()) || x.iter().zip(&limit).any(|(v, l)| v.abs() > *l) {
            status.diverged = true;
            break;
        }
        if !spec.state_box.contains(&x) {
            status.left_box = true;
            if opts.stop_on_exit {
                break;
            }
        }
        if norm2(&x) <= opts.r_conv {
            settled += 1;
            if settled >= opts.settle_window {
                status.converged = true;
                break;
            }
        } else {
            settled = 0;
        }
    }
    if status.diverged {
        status.left_box = true;
    }
    status
}

/// Closed-loop fixed-step RK4 rollout recording every state and input.
pub fn rk4_rollout<P: Policy + ?Sized>(
    spec: &SystemSpec,
    which: Model,
    policy: &P,
    x0: &[f64],
    opts: &RolloutOptions,
) -> Result<Trajectory> {
    if !(opts.dt > 0.0) || opts.horizon < opts.dt {
        return Err(Error::InvalidParameter(format!("dt={} horizon={}", opts.dt, opts.horizon)));
    }
    if x0.len() != spec.n {
        return Err(Error::Shape(format!("x0 has {} entries, plant has {}", x0.len(), spec.n)));
    }
    let mut states = vec![x0.to_vec()];
    let mut inputs = Vec::new();
    let status = simulate(spec, which, policy, x0, opts, |_, _, u, next| {
        inputs.push(u.to_vec());
        states.push(next.to_vec());
    });
    Ok(Trajectory { t0: 0.0, dt: opts.dt, states, inputs, left_box: status.left_box, converged: status.converged })
}

/// One-step supervision data retained from a labeling rollout: `(x_k, x_{k+1})`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepPair {
    pub x: Vec<f64>,
    pub next: Vec<f64>,
}

/// Per-mesh-point result of a labeling sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledRollout {
    pub label: Label,
    pub pairs: Vec<StepPair>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairSampling {
    /// Keep one step pair every `stride` steps.
    pub stride: usize,
    /// Upper bound on pairs kept per trajectory.
    pub max_per_trajectory: usize,
}

impl Default for PairSampling {
    fn default() -> Self {
        PairSampling { stride: 5, max_per_trajectory: 40 }
    }
}

fn label_of(status: RolloutStatus) -> Label {
    match (status.converged, status.left_box) {
        (true, false) => Label::FiStable,
        (true, true) => Label::Stable,
        _ => Label::Unstable,
    }
}

/// Labels every mesh point by rolling out the true plant under `policy`.
///
/// Rollouts keep integrating after leaving the state box so that points which
/// exit and come back are told apart from forward-invariant ones.
pub fn classify_stable<P: Policy + ?Sized>(spec: &SystemSpec, policy: &P, mesh: &mut Mesh, opts: &RolloutOptions) {
    let results = label_rollouts(spec, policy, mesh, opts, None);
    for (label, r) in mesh.labels.iter_mut().zip(results) {
        *label = r.label;
    }
}

/// Same sweep as [`classify_stable`], also returning sampled step pairs.
pub fn label_rollouts<P: Policy + ?Sized>(
    spec: &SystemSpec,
    policy: &P,
    mesh: &Mesh,
    opts: &RolloutOptions,
    sampling: Option<PairSampling>,
) -> Vec<LabeledRollout> {
    let opts = RolloutOptions { stop_on_exit: false, ..opts.clone() };
    mesh.points
        .par_iter()
        .map(|x0| {
            let mut pairs = Vec::new();
            let status = simulate(spec, Model::True, policy, x0, &opts, |k, x, _, next| {
                if let Some(s) = sampling {
                    if k % s.stride == 0 && pairs.len() < s.max_per_trajectory {
                        pairs.push(StepPair { x: x.to_vec(), next: next.to_vec() });
                    }
                }
            });
            LabeledRollout { label: label_of(status), pairs }
        })
        .collect()
}
