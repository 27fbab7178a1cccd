//! The three learned objects and their losses.
//!
//! * [`LyapunovNet`]: `V(x) = xᵀ(MMᵀ + γI)x + φ(x)ᵀφ(x)` with lower-triangular
//!   `M` and a null-space constrained `φ`.
//! * [`ControllerNet`]: `u(x) = LS(u₀(x) + ψ(x))`, a fixed linear law plus a
//!   trainable correction passed through a loose saturation.
//! * [`ResidualDynamics`]: learned corrections `f̂ = f₀ + f_res`, `ĝ = g₀ + g_res`.
//!
//! Gradients for training come from batched tapes: samples are columns and the
//! Jacobian of `φ` is carried forward alongside its value so that `∇V` (and
//! hence the estimated derivative `∇Vᵀ(f̂ + ĝu)`) stays differentiable with
//! respect to every parameter.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dynamics::{Policy, ResidualGShape, SystemSpec, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::{dot, Mat};
use crate::netcore::{
    init_params, tape_apply, tape_layers, Activation, DenseNetSpec, FrozenNet, GradTape, ParamStore, ParamVars, Var,
};

/// Hidden-layer layout of the four networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Output widths of the constrained `φ` layers (all tanh).
    pub phi: Vec<usize>,
    /// Hidden widths of `ψ` (tanh), followed by a linear output layer.
    pub psi_hidden: Vec<usize>,
    /// Hidden widths of the drift residual, followed by a linear output layer.
    pub f_hidden: Vec<usize>,
    /// Hidden widths of the actuation residual network (when not a scalar).
    pub g_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture { phi: vec![64, 64, 64], psi_hidden: vec![16, 16, 16], f_hidden: vec![16, 16, 16], g_hidden: vec![16, 16, 16] }
    }
}

fn mlp_spec(input: usize, hidden: &[usize], output: usize) -> DenseNetSpec {
    let mut dims = vec![input];
    dims.extend_from_slice(hidden);
    dims.push(output);
    let mut acts = vec![Activation::Tanh; hidden.len()];
    acts.push(Activation::Identity);
    DenseNetSpec::plain(dims, acts)
}

/// Zeroes the last weight matrix so the net starts as the zero map.
fn zero_output_layer(spec: &DenseNetSpec, params: &mut ParamStore, prefix: &str) {
    let last = spec.layers() - 1;
    if let Some(w) = params.get_mut(&format!("{prefix}W{last}")) {
        *w = Mat::zeros(w.rows(), w.cols());
    }
}

fn merge_prefixed(target: &mut ParamStore, prefix: &str, source: ParamStore) {
    for (k, v) in source.iter() {
        target.insert(format!("{prefix}{k}"), v.clone());
    }
}

/// Sub-store of entries under `prefix`, prefix stripped.
pub fn sub_store(store: &ParamStore, prefix: &str) -> ParamStore {
    let mut out = ParamStore::new();
    for (k, v) in store.iter() {
        if let Some(rest) = k.strip_prefix(prefix) {
            out.insert(rest, v.clone());
        }
    }
    out
}

fn sub_vars(vars: &ParamVars, prefix: &str) -> ParamVars {
    ParamVars(vars.0.iter().filter_map(|(k, v)| k.strip_prefix(prefix).map(|r| (r.to_string(), *v))).collect())
}

fn lower_mask(n: usize) -> Mat {
    let mut m = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            m[(i, j)] = 1.0;
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct LyapunovNet {
    pub n: usize,
    pub gamma: f64,
    pub phi_spec: DenseNetSpec,
    /// `M` (lower triangle used) and `phi.*` weights.
    pub params: ParamStore,
}

impl LyapunovNet {
    pub fn new(n: usize, gamma: f64, phi_widths: &[usize], seed: u64) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
        }
        let mut dims = vec![n];
        dims.extend_from_slice(phi_widths);
        let phi_spec = DenseNetSpec::constrained(dims, vec![Activation::Tanh; phi_widths.len()]);
        let phi = init_params(&phi_spec, seed)?;
        let mut params = ParamStore::new();
        let bound = 1.0 / (n as f64).sqrt();
        let m_init = init_params(&DenseNetSpec::plain(vec![n, n], vec![Activation::Identity]), seed ^ 0x4d)?;
        let m = m_init.expect("W0").hadamard(&lower_mask(n)).map(|v| v.clamp(-bound, bound));
        params.insert("M", m);
        merge_prefixed(&mut params, "phi.", phi);
        Ok(LyapunovNet { n, gamma, phi_spec, params })
    }

    /// `MMᵀ + γI` with the lower-triangular part of `M`.
    pub fn quadratic_form(&self) -> Mat {
        let m = self.params.expect("M").hadamard(&lower_mask(self.n));
        let mut a = m.matmul_t(&m);
        for i in 0..self.n {
            a[(i, i)] += self.gamma;
        }
        a
    }

    pub fn frozen(&self) -> FrozenLyapunov {
        FrozenLyapunov { a: self.quadratic_form(), phi: FrozenNet::new(&self.phi_spec, &sub_store(&self.params, "phi.")) }
    }
}

/// Tape-free snapshot of a [`LyapunovNet`].
#[derive(Clone, Debug)]
pub struct FrozenLyapunov {
    pub a: Mat,
    pub phi: FrozenNet,
}

impl FrozenLyapunov {
    pub fn value(&self, x: &[f64]) -> f64 {
        let ax = self.a.matvec(x);
        let p = self.phi.eval(x);
        dot(x, &ax) + dot(&p, &p)
    }

    pub fn value_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let ax = self.a.matvec(x);
        let (p, jac) = self.phi.eval_jacobian(x);
        let v = dot(x, &ax) + dot(&p, &p);
        let jt_p = jac.transpose().matvec(&p);
        let g = ax.iter().zip(&jt_p).map(|(a, b)| 2.0 * a + 2.0 * b).collect();
        (v, g)
    }
}

/// `u₀(x) = offset − K x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLaw {
    pub gain: Mat,
    pub offset: Vec<f64>,
}

impl LinearLaw {
    pub fn zero(n: usize, m: usize) -> Self {
        LinearLaw { gain: Mat::zeros(m, n), offset: vec![0.0; m] }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let kx = self.gain.matvec(x);
        self.offset.iter().zip(kx).map(|(o, k)| o - k).collect()
    }
}

impl Policy for LinearLaw {
    fn act(&self, x: &[f64]) -> Vec<f64> {
        self.eval(x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerNet {
    pub base: LinearLaw,
    pub psi_spec: DenseNetSpec,
    /// Saturation band `[lo, hi]` (fixed).
    pub lo: f64,
    pub hi: f64,
    /// `psi.*` weights plus the trainable slopes `slope_lo`, `slope_hi`.
    pub params: ParamStore,
}

impl ControllerNet {
    /// `ψ` starts with a zero output layer and both slopes at zero, so the
    /// fresh controller is the base law hard-clamped to `[lo, hi]`.
    pub fn new(base: LinearLaw, hidden: &[usize], lo: f64, hi: f64, seed: u64) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::InvalidParameter(format!("saturation band [{lo}, {hi}] is empty")));
        }
        let (m, n) = base.gain.shape();
        let psi_spec = mlp_spec(n, hidden, m);
        let mut psi = init_params(&psi_spec, seed)?;
        zero_output_layer(&psi_spec, &mut psi, "");
        let mut params = ParamStore::new();
        merge_prefixed(&mut params, "psi.", psi);
        params.insert("slope_lo", Mat::scalar(0.0));
        params.insert("slope_hi", Mat::scalar(0.0));
        Ok(ControllerNet { base, psi_spec, lo, hi, params })
    }

    pub fn frozen(&self) -> FrozenController {
        FrozenController {
            base: self.base.clone(),
            psi: FrozenNet::new(&self.psi_spec, &sub_store(&self.params, "psi.")),
            lo: self.lo,
            hi: self.hi,
            slope_lo: self.params.expect("slope_lo").item(),
            slope_hi: self.params.expect("slope_hi").item(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FrozenController {
    pub base: LinearLaw,
    pub psi: FrozenNet,
    pub lo: f64,
    pub hi: f64,
    pub slope_lo: f64,
    pub slope_hi: f64,
}

impl FrozenController {
    /// Pre-saturation signal `u₀(x) + ψ(x)`.
    pub fn raw(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.base.offset.len());
        self.psi.eval_into(x, &mut out);
        for (i, o) in out.iter_mut().enumerate() {
            *o += self.base.offset[i] - dot(self.base.gain.row(i), x);
        }
        out
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.raw(x);
        for v in &mut y {
            *v = crate::netcore::loose_saturation(*v, self.lo, self.hi, self.slope_lo, self.slope_hi);
        }
        y
    }
}

impl Policy for FrozenController {
    fn act(&self, x: &[f64]) -> Vec<f64> {
        self.eval(x)
    }
}

/// Residual actuation correction.
#[derive(Clone, Debug, PartialEq)]
pub enum ResidualG {
    /// `g.scalar` added to row `row` of `g₀`.
    Scalar { row: usize },
    /// Network output (rows × m, row-major) added to the masked rows of `g₀`.
    Net { spec: DenseNetSpec, rows: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualDynamics {
    pub n: usize,
    pub m: usize,
    pub f_spec: DenseNetSpec,
    pub f_rows: Vec<usize>,
    pub g: ResidualG,
    /// `f.*` weights and either `g.scalar` or `g.*` weights.
    pub params: ParamStore,
}

impl ResidualDynamics {
    /// Output layers start at zero, so `f̂ = f₀` and `ĝ = g₀` initially.
    pub fn new(spec: &SystemSpec, arch: &Architecture, seed: u64) -> Result<Self> {
        let (n, m) = (spec.n, spec.m);
        if let Some(bad) = spec.residual_f_mask.iter().find(|&&r| r >= n) {
            return Err(Error::InvalidParameter(format!("residual f row {bad} out of range")));
        }
        let f_spec = mlp_spec(n, &arch.f_hidden, spec.residual_f_mask.len());
        let mut f = init_params(&f_spec, seed)?;
        zero_output_layer(&f_spec, &mut f, "");
        let mut params = ParamStore::new();
        merge_prefixed(&mut params, "f.", f);
        let g = match &spec.residual_g_shape {
            ResidualGShape::Scalar { row } => {
                if *row >= n {
                    return Err(Error::InvalidParameter(format!("residual g row {row} out of range")));
                }
                params.insert("g.scalar", Mat::scalar(0.0));
                ResidualG::Scalar { row: *row }
            }
            ResidualGShape::Mask(rows) => {
                if rows.iter().any(|&r| r >= n) {
                    return Err(Error::InvalidParameter(format!("residual g rows {rows:?} out of range")));
                }
                let g_spec = mlp_spec(n, &arch.g_hidden, rows.len() * m);
                let mut gp = init_params(&g_spec, seed.wrapping_add(1))?;
                zero_output_layer(&g_spec, &mut gp, "");
                merge_prefixed(&mut params, "g.", gp);
                ResidualG::Net { spec: g_spec, rows: rows.clone() }
            }
        };
        Ok(ResidualDynamics { n, m, f_spec, f_rows: spec.residual_f_mask.clone(), g, params })
    }

    pub fn frozen(&self) -> FrozenResidual {
        let f = FrozenNet::new(&self.f_spec, &sub_store(&self.params, "f."));
        let g = match &self.g {
            ResidualG::Scalar { row } => FrozenResidualG::Scalar { row: *row, value: self.params.expect("g.scalar").item() },
            ResidualG::Net { spec, rows } => {
                FrozenResidualG::Net { net: FrozenNet::new(spec, &sub_store(&self.params, "g.")), rows: rows.clone() }
            }
        };
        FrozenResidual { n: self.n, m: self.m, f, f_rows: self.f_rows.clone(), g }
    }
}

#[derive(Clone, Debug)]
pub enum FrozenResidualG {
    Scalar { row: usize, value: f64 },
    Net { net: FrozenNet, rows: Vec<usize> },
}

#[derive(Clone, Debug)]
pub struct FrozenResidual {
    pub n: usize,
    pub m: usize,
    pub f: FrozenNet,
    pub f_rows: Vec<usize>,
    pub g: FrozenResidualG,
}

impl FrozenResidual {
    /// Adds the residual corrections to `(f₀, g₀)` in place.
    pub fn correct(&self, x: &[f64], f: &mut [f64], g: &mut Mat) {
        for (r, v) in self.f_rows.iter().zip(self.f.eval(x)) {
            f[*r] += v;
        }
        match &self.g {
            FrozenResidualG::Scalar { row, value } => {
                for j in 0..self.m {
                    g[(*row, j)] += value;
                }
            }
            FrozenResidualG::Net { net, rows } => {
                let out = net.eval(x);
                for (i, r) in rows.iter().enumerate() {
                    for j in 0..self.m {
                        g[(*r, j)] += out[i * self.m + j];
                    }
                }
            }
        }
    }
}

/// The three learned objects together.
#[derive(Clone, Debug, PartialEq)]
pub struct Networks {
    pub lyap: LyapunovNet,
    pub ctrl: ControllerNet,
    pub res: ResidualDynamics,
}

impl Networks {
    pub fn frozen(&self, spec: &SystemSpec) -> Snapshot {
        Snapshot { spec: spec.clone(), lyap: self.lyap.frozen(), ctrl: self.ctrl.frozen(), res: self.res.frozen() }
    }

    /// All parameters under `lyap.`, `ctrl.` and `res.` prefixes.
    pub fn to_tensors(&self) -> BTreeMap<String, Mat> {
        let mut out = BTreeMap::new();
        self.lyap.params.export_into("lyap.", &mut out);
        self.ctrl.params.export_into("ctrl.", &mut out);
        self.res.params.export_into("res.", &mut out);
        out
    }

    /// Overwrites parameters from a checkpoint; names and shapes must match exactly.
    pub fn load_tensors(&mut self, tensors: &BTreeMap<String, Mat>) -> Result<()> {
        let expected = self.to_tensors();
        if expected.len() != tensors.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {}", expected.len(), tensors.len())));
        }
        for (k, v) in &expected {
            match tensors.get(k) {
                Some(t) if t.shape() == v.shape() => {}
                Some(t) => return Err(Error::Checkpoint(format!("`{k}` has shape {:?}, expected {:?}", t.shape(), v.shape()))),
                None => return Err(Error::Checkpoint(format!("missing tensor `{k}`"))),
            }
        }
        self.lyap.params = ParamStore::import_from("lyap.", tensors);
        self.ctrl.params = ParamStore::import_from("ctrl.", tensors);
        self.res.params = ParamStore::import_from("res.", tensors);
        Ok(())
    }
}

/// Tape-free evaluation of all learned maps for one plant.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub spec: SystemSpec,
    pub lyap: FrozenLyapunov,
    pub ctrl: FrozenController,
    pub res: FrozenResidual,
}

impl Snapshot {
    /// `(f̂(x), ĝ(x))` of the nominal-plus-residual model.
    pub fn model_terms(&self, x: &[f64]) -> Result<(Vec<f64>, Mat)> {
        let (mut f, mut g) = self.spec.nominal_plant.affine_terms(x)?;
        self.res.correct(x, &mut f, &mut g);
        Ok((f, g))
    }

    pub fn model_field(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let (mut f, g) = self.model_terms(x)?;
        for (i, fi) in f.iter_mut().enumerate() {
            for (j, uj) in u.iter().enumerate() {
                *fi += g[(i, j)] * uj;
            }
        }
        Ok(f)
    }

    /// `∇V(x)ᵀ(f̂(x) + ĝ(x)u(x))`.
    pub fn vdot_hat(&self, x: &[f64]) -> Result<f64> {
        Ok(self.value_and_vdot(x)?.1)
    }

    pub fn value_and_vdot(&self, x: &[f64]) -> Result<(f64, f64)> {
        let (v, grad) = self.lyap.value_and_grad(x);
        let u = self.ctrl.eval(x);
        let field = self.model_field(x, &u)?;
        Ok((v, dot(&grad, &field)))
    }

    /// Model mismatch `d = (f − f̂) + (g − ĝ)u(x)`.
    pub fn disturbance(&self, true_spec: &SystemSpec, x: &[f64]) -> Result<Vec<f64>> {
        let u = self.ctrl.eval(x);
        let truth = true_spec.true_plant.field(x, &u)?;
        let model = self.model_field(x, &u)?;
        Ok(truth.iter().zip(model).map(|(a, b)| a - b).collect())
    }
}

/// `V(x)` of a network (tape-free).
pub fn lyapunov_value(net: &LyapunovNet, x: &[f64]) -> f64 {
    net.frozen().value(x)
}

/// `∇V(x)` of a network (tape-free, exact).
pub fn lyapunov_grad(net: &LyapunovNet, x: &[f64]) -> Vec<f64> {
    net.frozen().value_and_grad(x).1
}

pub fn controller_eval(ctrl: &ControllerNet, x: &[f64]) -> Vec<f64> {
    ctrl.frozen().eval(x)
}

pub fn vdot_hat(nets: &Networks, spec: &SystemSpec, x: &[f64]) -> Result<f64> {
    nets.frozen(spec).vdot_hat(x)
}

/// Forward difference `(V(x_{k+1}) − V(x_k)) / dt` along a recorded trajectory.
pub fn vdot_tilde(net: &LyapunovNet, traj: &Trajectory, index: usize) -> Result<f64> {
    if index + 1 >= traj.states.len() {
        return Err(Error::OutOfRange { index, len: traj.states.len() });
    }
    let f = net.frozen();
    Ok((f.value(&traj.states[index + 1]) - f.value(&traj.states[index])) / traj.dt)
}

/// Which parameter groups become differentiable leaves on a batch tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub lyap: bool,
    pub ctrl: bool,
    pub res: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable { lyap: true, ctrl: true, res: true };
    pub const LYAP_CTRL: Trainable = Trainable { lyap: true, ctrl: true, res: false };
    pub const RES: Trainable = Trainable { lyap: false, ctrl: false, res: true };
}

/// Handles into a batch tape built by [`build_batch`].
pub struct BatchGraph {
    pub tape: GradTape,
    pub lyap_vars: ParamVars,
    pub ctrl_vars: ParamVars,
    pub res_vars: ParamVars,
    /// 1 × B.
    pub v: Var,
    /// n × B.
    pub grad_v: Var,
    /// m × B.
    pub u: Var,
    /// n × B closed-loop model field.
    pub field: Var,
    /// 1 × B.
    pub vdot: Var,
}

fn batch_matrix(xs: &[Vec<f64>], n: usize) -> Mat {
    let b = xs.len();
    let mut x = Mat::zeros(n, b);
    for (j, p) in xs.iter().enumerate() {
        for i in 0..n {
            x[(i, j)] = p[i];
        }
    }
    x
}

fn lyapunov_on_tape(net: &LyapunovNet, tape: &mut GradTape, vars: &ParamVars, x: Var) -> (Var, Var) {
    let n = net.n;
    let b = tape.value(x).cols();
    let mask = tape.constant(lower_mask(n));
    let m = tape.hadamard(vars.var("M"), mask);
    let mmt = {
        let mt = tape.transpose(m);
        tape.matmul(m, mt)
    };
    let gi = tape.constant(Mat::identity(n).scale(net.gamma));
    let a = tape.add(mmt, gi);

    let phi_vars = sub_vars(vars, "phi.");
    let layers = tape_layers(&net.phi_spec, tape, &phi_vars);
    let mut jseed = Mat::zeros(n, n * b);
    for j in 0..b {
        for i in 0..n {
            jseed[(i, j * n + i)] = 1.0;
        }
    }
    let mut jac = tape.constant(jseed);
    let mut h = x;
    for (l, (w, _)) in layers.iter().enumerate() {
        let z = tape.matmul(*w, h);
        let jz = tape.matmul(*w, jac);
        match net.phi_spec.activations[l] {
            Activation::Tanh => {
                h = tape.tanh(z);
                let d = tape.one_minus_square(h);
                jac = tape.group_col_mul(jz, d, n);
            }
            Activation::Identity => {
                h = z;
                jac = jz;
            }
        }
    }
    let ax = tape.matmul(a, x);
    let quad = {
        let p = tape.hadamard(x, ax);
        tape.col_sum(p)
    };
    let sq = {
        let p = tape.hadamard(h, h);
        tape.col_sum(p)
    };
    let v = tape.add(quad, sq);
    let jtphi = {
        let g = tape.group_col_mul(jac, h, n);
        let s = tape.col_sum(g);
        let r = tape.reshape(s, b, n);
        tape.transpose(r)
    };
    let sum = tape.add(ax, jtphi);
    let grad_v = tape.scale(sum, 2.0);
    (v, grad_v)
}

fn controller_on_tape(ctrl: &ControllerNet, tape: &mut GradTape, vars: &ParamVars, xs: &[Vec<f64>], x: Var) -> Var {
    let m = ctrl.base.gain.rows();
    let mut base = Mat::zeros(m, xs.len());
    for (j, p) in xs.iter().enumerate() {
        for (i, u) in ctrl.base.eval(p).into_iter().enumerate() {
            base[(i, j)] = u;
        }
    }
    let base = tape.constant(base);
    let psi_vars = sub_vars(vars, "psi.");
    let layers = tape_layers(&ctrl.psi_spec, tape, &psi_vars);
    let psi = tape_apply(&ctrl.psi_spec, tape, &layers, x);
    let y = tape.add(base, psi);
    tape.loose_sat(y, vars.var("slope_lo"), vars.var("slope_hi"), ctrl.lo, ctrl.hi)
}

/// Selects row `k` of an `rows × B` node.
fn select_row(tape: &mut GradTape, a: Var, k: usize) -> Var {
    let rows = tape.value(a).rows();
    let mut sel = Mat::zeros(1, rows);
    sel[(0, k)] = 1.0;
    let s = tape.constant(sel);
    tape.matmul(s, a)
}

/// `f̂(X) + Σ_k ĝ_k(X) ⊙ u_k` on the tape.
fn model_field_on_tape(
    res: &ResidualDynamics,
    spec: &SystemSpec,
    tape: &mut GradTape,
    vars: &ParamVars,
    xs: &[Vec<f64>],
    x: Var,
    u: Var,
) -> Result<Var> {
    let (n, m, b) = (spec.n, spec.m, xs.len());
    let mut f0 = Mat::zeros(n, b);
    let mut g0: Vec<Mat> = (0..m).map(|_| Mat::zeros(n, b)).collect();
    for (j, p) in xs.iter().enumerate() {
        let (f, g) = spec.nominal_plant.affine_terms(p)?;
        for i in 0..n {
            f0[(i, j)] = f[i];
            for (k, gk) in g0.iter_mut().enumerate() {
                gk[(i, j)] = g[(i, k)];
            }
        }
    }
    let f0 = tape.constant(f0);
    let f_vars = sub_vars(vars, "f.");
    let f_layers = tape_layers(&res.f_spec, tape, &f_vars);
    let f_out = tape_apply(&res.f_spec, tape, &f_layers, x);
    let mut sel_f = Mat::zeros(n, res.f_rows.len());
    for (c, r) in res.f_rows.iter().enumerate() {
        sel_f[(*r, c)] = 1.0;
    }
    let sel_f = tape.constant(sel_f);
    let f_res = tape.matmul(sel_f, f_out);
    let mut field = tape.add(f0, f_res);

    let g_out = match &res.g {
        ResidualG::Scalar { .. } => None,
        ResidualG::Net { spec: g_spec, .. } => {
            let g_vars = sub_vars(vars, "g.");
            let layers = tape_layers(g_spec, tape, &g_vars);
            Some(tape_apply(g_spec, tape, &layers, x))
        }
    };
    for (k, g0k) in g0.into_iter().enumerate() {
        let g0k = tape.constant(g0k);
        let g_res = match &res.g {
            ResidualG::Scalar { row } => {
                let mut e = Mat::zeros(n, b);
                for j in 0..b {
                    e[(*row, j)] = 1.0;
                }
                let e = tape.constant(e);
                tape.scale_by(e, vars.var("g.scalar"))
            }
            ResidualG::Net { rows, .. } => {
                let out = g_out.expect("net output built above");
                let mut sel = Mat::zeros(n, rows.len() * m);
                for (i, r) in rows.iter().enumerate() {
                    sel[(*r, i * m + k)] = 1.0;
                }
                let sel = tape.constant(sel);
                tape.matmul(sel, out)
            }
        };
        let gk = tape.add(g0k, g_res);
        let uk = if m == 1 { u } else { select_row(tape, u, k) };
        let term = tape.row_bcast_mul(gk, uk);
        field = tape.add(field, term);
    }
    Ok(field)
}

/// Records `V`, `∇V`, `u` and `V̇̂` for a batch of states on one tape.
pub fn build_batch(nets: &Networks, spec: &SystemSpec, xs: &[Vec<f64>], trainable: Trainable) -> Result<BatchGraph> {
    if xs.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    if let Some(bad) = xs.iter().find(|p| p.len() != spec.n) {
        return Err(Error::Shape(format!("state of length {} for a {}-state plant", bad.len(), spec.n)));
    }
    let mut tape = GradTape::new();
    let lyap_vars = nets.lyap.params.to_tape(&mut tape, trainable.lyap);
    let ctrl_vars = nets.ctrl.params.to_tape(&mut tape, trainable.ctrl);
    let res_vars = nets.res.params.to_tape(&mut tape, trainable.res);
    let x = tape.constant(batch_matrix(xs, spec.n));
    let (v, grad_v) = lyapunov_on_tape(&nets.lyap, &mut tape, &lyap_vars, x);
    let u = controller_on_tape(&nets.ctrl, &mut tape, &ctrl_vars, xs, x);
    let field = model_field_on_tape(&nets.res, spec, &mut tape, &res_vars, xs, x, u)?;
    let vdot = {
        let p = tape.hadamard(grad_v, field);
        tape.col_sum(p)
    };
    Ok(BatchGraph { tape, lyap_vars, ctrl_vars, res_vars, v, grad_v, u, field, vdot })
}

/// Constants of the Lyapunov loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_roa: f64,
    pub lambda_lip: f64,
    pub kappa: f64,
    pub epsilon: f64,
}

/// Loss value and gradients for the Lyapunov and controller parameters.
#[derive(Clone, Debug)]
pub struct LyapunovLossOut {
    pub loss: f64,
    pub roa_term: f64,
    pub lip_term: f64,
    pub lyap_grads: ParamStore,
    pub ctrl_grads: ParamStore,
}

/// `(λ_RoA/N) Σ ReLU[V̇̂ + κ‖x‖² + ε] + (λ_Lip/N) Σ ‖∇V‖`, with gradients
/// for `V` and the controller (residual dynamics held fixed).
pub fn lyapunov_loss(nets: &Networks, spec: &SystemSpec, batch: &[Vec<f64>], w: &LossWeights) -> Result<LyapunovLossOut> {
    let mut g = build_batch(nets, spec, batch, Trainable::LYAP_CTRL)?;
    let nb = batch.len() as f64;
    let sq_norms = Mat::from_vec(1, batch.len(), batch.iter().map(|p| dot(p, p) * w.kappa + w.epsilon).collect());
    let tape = &mut g.tape;
    let offs = tape.constant(sq_norms);
    let pre = tape.add(g.vdot, offs);
    let act = tape.relu(pre);
    let roa_sum = tape.sum(act);
    let roa = tape.scale(roa_sum, w.lambda_roa / nb);
    let norms = tape.col_norm(g.grad_v);
    let lip_sum = tape.sum(norms);
    let lip = tape.scale(lip_sum, w.lambda_lip / nb);
    let total = tape.add(roa, lip);
    let loss = tape.value(total).item();
    let (roa_term, lip_term) = (tape.value(roa).item(), tape.value(lip).item());
    let grads = tape.backward(total)?;
    Ok(LyapunovLossOut {
        loss,
        roa_term,
        lip_term,
        lyap_grads: g.lyap_vars.collect_grads(&g.tape, &grads),
        ctrl_grads: g.ctrl_vars.collect_grads(&g.tape, &grads),
    })
}

/// A supervision pair for the dynamics fit: state and finite-difference `V̇`.
#[derive(Clone, Debug, PartialEq)]
pub struct VdotSample {
    pub x: Vec<f64>,
    pub target: f64,
}

/// Per-sample quantities that stay fixed while only the residual model trains.
#[derive(Clone, Debug)]
pub struct FrozenFitSample {
    pub x: Vec<f64>,
    pub grad_v: Vec<f64>,
    pub u: Vec<f64>,
    pub target: f64,
}

/// Precomputes `∇V` and `u` so the fit loop only differentiates the residual nets.
pub fn freeze_fit_samples(nets: &Networks, spec: &SystemSpec, pairs: &[VdotSample]) -> Vec<FrozenFitSample> {
    let snap = nets.frozen(spec);
    pairs
        .iter()
        .map(|p| {
            let (_, grad_v) = snap.lyap.value_and_grad(&p.x);
            FrozenFitSample { x: p.x.clone(), grad_v, u: snap.ctrl.eval(&p.x), target: p.target }
        })
        .collect()
}

/// Mean squared error between `V̇̂` and the supervision targets, with gradients
/// for the residual parameters only.
pub fn dynamics_fit_loss_frozen(res: &ResidualDynamics, spec: &SystemSpec, samples: &[FrozenFitSample]) -> Result<(f64, ParamStore)> {
    if samples.is_empty() {
        return Err(Error::Empty("dynamics fit pairs".into()));
    }
    let xs: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
    let b = xs.len();
    let mut tape = GradTape::new();
    let vars = res.params.to_tape(&mut tape, true);
    let x = tape.constant(batch_matrix(&xs, spec.n));
    let mut u = Mat::zeros(spec.m, b);
    let mut gv = Mat::zeros(spec.n, b);
    for (j, s) in samples.iter().enumerate() {
        for (i, v) in s.u.iter().enumerate() {
            u[(i, j)] = *v;
        }
        for (i, v) in s.grad_v.iter().enumerate() {
            gv[(i, j)] = *v;
        }
    }
    let u = tape.constant(u);
    let gv = tape.constant(gv);
    let field = model_field_on_tape(res, spec, &mut tape, &vars, &xs, x, u)?;
    let vdot = {
        let p = tape.hadamard(gv, field);
        tape.col_sum(p)
    };
    let targets = tape.constant(Mat::from_vec(1, b, samples.iter().map(|s| s.target).collect()));
    let err = tape.sub(vdot, targets);
    let sq = tape.hadamard(err, err);
    let s = tape.sum(sq);
    let loss = tape.scale(s, 1.0 / b as f64);
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    Ok((value, vars.collect_grads(&tape, &grads)))
}

/// MSE between `V̇̂(x)` and recorded `Ṽ̇` values; gradients flow only into the
/// residual dynamics.
pub fn dynamics_fit_loss(nets: &Networks, spec: &SystemSpec, pairs: &[VdotSample]) -> Result<(f64, ParamStore)> {
    if pairs.is_empty() {
        return Err(Error::Empty("dynamics fit pairs".into()));
    }
    dynamics_fit_loss_frozen(&nets.res, spec, &freeze_fit_samples(nets, spec, pairs))
}

/// MSE of `V(x)` against `scale·‖x‖²`, with gradients for the Lyapunov parameters.
pub fn value_fit_loss(net: &LyapunovNet, xs: &[Vec<f64>], scale: f64) -> Result<(f64, ParamStore)> {
    if xs.is_empty() {
        return Err(Error::Empty("value fit batch".into()));
    }
    let mut tape = GradTape::new();
    let vars = net.params.to_tape(&mut tape, true);
    let x = tape.constant(batch_matrix(xs, net.n));
    let (v, _) = lyapunov_on_tape(net, &mut tape, &vars, x);
    let targets = tape.constant(Mat::from_vec(1, xs.len(), xs.iter().map(|p| scale * dot(p, p)).collect()));
    let err = tape.sub(v, targets);
    let sq = tape.hadamard(err, err);
    let s = tape.sum(sq);
    let loss = tape.scale(s, 1.0 / xs.len() as f64);
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    Ok((value, vars.collect_grads(&tape, &grads)))
}
