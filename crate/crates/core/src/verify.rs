//! Certification of a trained candidate: dense grid falsification of the
//! decrease condition and export of the same condition as an SMT-LIB2 script.
//!
//! The checked formula, for a level `c`, radius `ζ` and rate `κ`, is
//!
//! ```text
//! ‖x‖ ≥ ζ  ∧  V(x) ≤ c  ∧  V̇̂(x) + κ‖x‖² ≥ 0
//! ```
//!
//! A point satisfying it is a counterexample to the certificate.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{PlantParams, StateBox};
use crate::error::{Error, Result};
use crate::lyapnet::{FrozenResidualG, Snapshot};
use crate::netcore::{Activation, FrozenNet};
use crate::roa::build_mesh_in_box;

pub const DEFAULT_ZETA: f64 = 0.3;
pub const DEFAULT_PRECISION: f64 = 1e-3;
pub const DEFAULT_MAX_PHI_WIDTH: usize = 16;

/// True when `x` violates the decrease condition inside `V ≤ c`.
pub fn violates(x: &[f64], v: f64, vdot: f64, c: f64, zeta: f64, kappa: f64) -> bool {
    let r2: f64 = x.iter().map(|v| v * v).sum();
    r2.sqrt() >= zeta && v <= c && vdot + kappa * r2 >= 0.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FalsificationResult {
    /// First violating grid point in mesh order, if any.
    pub counterexample: Option<Vec<f64>>,
    /// Grid points with `‖x‖ ≥ ζ` and `V ≤ c`.
    pub checked_points: usize,
    pub resolution: f64,
    pub zeta: f64,
    pub level_c: f64,
    /// Smallest `−(V̇̂ + κ‖x‖²)` over the checked points (`+∞` if none).
    pub margin_min: f64,
}

/// Grid falsifier over an arbitrary `(V, V̇̂)` evaluator.
///
/// The grid spans `bx` with spacing at most `resolution` along every axis and
/// includes the box faces.
pub fn falsify_grid_with<F>(bx: &StateBox, c: f64, zeta: f64, kappa: f64, resolution: f64, eval: F) -> Result<FalsificationResult>
where
    F: Fn(&[f64]) -> Result<(f64, f64)> + Sync,
{
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::InvalidParameter(format!("resolution must be positive, got {resolution}")));
    }
    let dims: Vec<usize> =
        bx.lo.iter().zip(&bx.hi).map(|(lo, hi)| ((hi - lo) / resolution).ceil().max(1.0) as usize + 1).collect();
    let mesh = build_mesh_in_box(bx, &dims)?;
    let per_point: Vec<Option<(bool, f64)>> = mesh
        .points
        .par_iter()
        .map(|x| -> Result<Option<(bool, f64)>> {
            let r2: f64 = x.iter().map(|v| v * v).sum();
            if r2.sqrt() < zeta {
                return Ok(None);
            }
            let (v, vdot) = eval(x)?;
            if !(v <= c) {
                return Ok(None);
            }
            Ok(Some((violates(x, v, vdot, c, zeta, kappa), -(vdot + kappa * r2))))
        })
        .collect::<Result<_>>()?;
    let mut result = FalsificationResult {
        counterexample: None,
        checked_points: 0,
        resolution,
        zeta,
        level_c: c,
        margin_min: f64::INFINITY,
    };
    for (k, entry) in per_point.iter().enumerate() {
        if let Some((bad, margin)) = entry {
            result.checked_points += 1;
            result.margin_min = result.margin_min.min(*margin);
            if *bad && result.counterexample.is_none() {
                result.counterexample = Some(mesh.points[k].clone());
            }
        }
    }
    Ok(result)
}

/// Grid falsification of a trained snapshot over its state box.
pub fn falsify_grid(snap: &Snapshot, c: f64, zeta: f64, kappa: f64, resolution: f64) -> Result<FalsificationResult> {
    falsify_grid_with(&snap.spec.state_box, c, zeta, kappa, resolution, |x| snap.value_and_vdot(x))
}

/// Largest finite-difference slope of `f` over random pairs in the box
/// (pairs are at most `radius` apart along every axis).
pub fn sampled_lipschitz<F>(f: F, bx: &StateBox, pairs: usize, radius: f64, seed: u64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0f64;
    for _ in 0..pairs {
        let x: Vec<f64> = bx.lo.iter().zip(&bx.hi).map(|(lo, hi)| rng.random_range(*lo..=*hi)).collect();
        let y: Vec<f64> = x
            .iter()
            .zip(bx.lo.iter().zip(&bx.hi))
            .map(|(v, (lo, hi))| (v + rng.random_range(-radius..=radius)).clamp(*lo, *hi))
            .collect();
        let d = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if d > 0.0 {
            best = best.max((f(&x) - f(&y)).abs() / d);
        }
    }
    best
}

// ---------------------------------------------------------------------------
// SMT-LIB2 export

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportOptions {
    pub c: f64,
    pub zeta: f64,
    pub kappa: f64,
    /// Solver precision recorded in the header and as a solver option.
    pub precision: f64,
    /// Widest hidden layer of `φ` accepted.
    pub max_phi_width: usize,
}

impl ExportOptions {
    pub fn new(c: f64, kappa: f64) -> Self {
        ExportOptions { c, zeta: DEFAULT_ZETA, kappa, precision: DEFAULT_PRECISION, max_phi_width: DEFAULT_MAX_PHI_WIDTH }
    }
}

/// Decimal literal with 17 significant digits; negatives as `(- x)`.
pub fn smt_real(x: f64) -> String {
    if x == 0.0 {
        return "0.0".into();
    }
    let sci = format!("{:.16e}", x.abs());
    let (mant, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    let digits: String = mant.chars().filter(char::is_ascii_digit).collect();
    let point = exp + 1;
    let body = if point <= 0 {
        format!("0.{}{}", "0".repeat((-point) as usize), digits)
    } else if point as usize >= digits.len() {
        format!("{}{}.0", digits, "0".repeat(point as usize - digits.len()))
    } else {
        let (a, b) = digits.split_at(point as usize);
        format!("{a}.{b}")
    };
    if x < 0.0 {
        format!("(- {body})")
    } else {
        body
    }
}

/// Accumulates `define-fun` intermediates.
struct Builder {
    out: String,
    next: usize,
}

impl Builder {
    fn def(&mut self, prefix: &str, expr: String) -> String {
        let name = format!("{prefix}_{}", self.next);
        self.next += 1;
        let _ = writeln!(self.out, "(define-fun {name} () Real {expr})");
        name
    }

    fn named(&mut self, name: &str, expr: String) -> String {
        let _ = writeln!(self.out, "(define-fun {name} () Real {expr})");
        name.to_string()
    }
}

fn sum(terms: Vec<String>) -> String {
    match terms.len() {
        0 => "0.0".into(),
        1 => terms.into_iter().next().expect("one term"),
        _ => format!("(+ {})", terms.join(" ")),
    }
}

/// `Σ_j w_j·a_j` skipping exact zeros.
fn affine(weights: &[f64], args: &[String], bias: Option<f64>) -> String {
    let mut terms: Vec<String> =
        weights.iter().zip(args).filter(|(w, _)| **w != 0.0).map(|(w, a)| format!("(* {} {a})", smt_real(*w))).collect();
    if let Some(b) = bias.filter(|b| *b != 0.0) {
        terms.push(smt_real(b));
    }
    sum(terms)
}

fn smt_tanh(z: &str) -> String {
    format!("(/ (- 1.0 (exp (* (- 2.0) {z}))) (+ 1.0 (exp (* (- 2.0) {z}))))")
}

/// Forward pass of a frozen net; with `tangent`, also the directional
/// derivative along that input vector. Returns (outputs, output tangents).
fn emit_net(b: &mut Builder, tag: &str, net: &FrozenNet, input: &[String], tangent: Option<&[String]>) -> (Vec<String>, Vec<String>) {
    let mut h = input.to_vec();
    let mut t = tangent.map(<[String]>::to_vec);
    for (l, (w, bias, act)) in net.weights().enumerate() {
        let mut next_h = Vec::with_capacity(w.rows());
        let mut next_t = Vec::with_capacity(w.rows());
        for i in 0..w.rows() {
            let z = b.def(&format!("{tag}_z{l}"), affine(w.row(i), &h, bias.map(|bv| bv[i])));
            let a = match act {
                Activation::Tanh => b.def(&format!("{tag}_h{l}"), smt_tanh(&z)),
                Activation::Identity => z,
            };
            if let Some(tv) = &t {
                let dz = b.def(&format!("{tag}_dz{l}"), affine(w.row(i), tv, None));
                let da = match act {
                    Activation::Tanh => b.def(&format!("{tag}_dh{l}"), format!("(* (- 1.0 (* {a} {a})) {dz})")),
                    Activation::Identity => dz,
                };
                next_t.push(da);
            }
            next_h.push(a);
        }
        h = next_h;
        if t.is_some() {
            t = Some(next_t);
        }
    }
    (h, t.unwrap_or_default())
}

/// Nominal `f₀(x)` and `g₀(x)` as expressions in the state names.
fn emit_plant(b: &mut Builder, plant: &PlantParams, x: &[String]) -> (Vec<String>, Vec<Vec<String>>) {
    match *plant {
        PlantParams::Pendulum { mass, length, gravity } => {
            let f = vec![x[1].clone(), format!("(* {} (sin {}))", smt_real(gravity / length), x[0])];
            let g = vec![vec!["0.0".into()], vec![smt_real(1.0 / (mass * length * length))]];
            (f, g)
        }
        PlantParams::StrictFeedback { e } => {
            let f = vec![
                format!("(* {} {})", smt_real(e[0]), x[1]),
                format!("(* {} {})", smt_real(e[1]), x[2]),
                format!("(* {} (* {} {}))", smt_real(e[2]), x[0], x[0]),
            ];
            let g = vec![vec!["0.0".into()], vec!["0.0".into()], vec![smt_real(e[3])]];
            (f, g)
        }
        PlantParams::Cartpole { cart_mass, pole_mass, length, friction, gravity } => {
            let (th, om, v) = (&x[0], &x[1], &x[3]);
            let s = b.def("cp_s", format!("(sin {th})"));
            let c = b.def("cp_c", format!("(cos {th})"));
            let total = cart_mass + pole_mass;
            let det = b.def(
                "cp_det",
                format!("(* {} (- (* {} (* {c} {c})) {}))", smt_real(length), smt_real(pole_mass), smt_real(total)),
            );
            let r1 = b.def(
                "cp_r1",
                format!(
                    "(- (* (- {}) (* {om} (* {om} {s}))) (* {} {v}))",
                    smt_real(pole_mass * length),
                    smt_real(friction)
                ),
            );
            let r2 = b.def("cp_r2", format!("(* {} {s})", smt_real(gravity)));
            let th_acc = format!("(/ (- (* (- {c}) {r1}) (* {} {r2})) {det})", smt_real(total));
            let x_acc =
                format!("(/ (- (* (- {}) (* {c} {r2})) (* {} {r1})) {det})", smt_real(pole_mass * length), smt_real(length));
            let f = vec![om.clone(), th_acc, v.clone(), x_acc];
            let g = vec![
                vec!["0.0".into()],
                vec![format!("(/ (- {c}) {det})")],
                vec!["0.0".into()],
                vec![format!("(/ (- {}) {det})", smt_real(length))],
            ];
            (f, g)
        }
    }
}

/// Writes the falsification formula for `snap` as a complete SMT-LIB2 script.
///
/// Intermediates are `define-fun` constants, so the only declarations are the
/// state variables `x0 … x{n-1}`. The constants `V`, `u_j`, `vdot_hat`,
/// `norm_sq` and `lhs = vdot_hat + κ·norm_sq` are always defined.
pub fn export_smt2(snap: &Snapshot, opts: &ExportOptions) -> Result<String> {
    let widths: Vec<usize> = snap.lyap.phi.weights().map(|(w, _, _)| w.rows()).collect();
    if let Some(&wide) = widths.iter().find(|&&w| w > opts.max_phi_width) {
        return Err(Error::Oversized(format!(
            "phi layer widths {widths:?} exceed the export cap {} (widest {wide})",
            opts.max_phi_width
        )));
    }
    for (name, v) in [("c", opts.c), ("zeta", opts.zeta), ("kappa", opts.kappa), ("precision", opts.precision)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::InvalidParameter(format!("{name} must be finite and non-negative, got {v}")));
        }
    }
    let spec = &snap.spec;
    let n = spec.n;
    let mut out = String::new();
    let _ = writeln!(out, "; roaforge decrease-condition falsification query");
    let _ = writeln!(out, "; system = {}", spec.kind);
    let _ = writeln!(out, "; c = {}", smt_real(opts.c));
    let _ = writeln!(out, "; kappa = {}", smt_real(opts.kappa));
    let _ = writeln!(out, "; zeta = {}", opts.zeta);
    let _ = writeln!(out, "; precision = {}", opts.precision);
    let _ = writeln!(out, "; phi widths = {widths:?}");
    let _ = writeln!(out, "(set-logic QF_NRA)");
    let _ = writeln!(out, "(set-option :precision {})", smt_real(opts.precision));
    let xs: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
    for x in &xs {
        let _ = writeln!(out, "(declare-fun {x} () Real)");
    }
    for (i, x) in xs.iter().enumerate() {
        let _ = writeln!(out, "(assert (<= {} {x}))", smt_real(spec.state_box.lo[i]));
        let _ = writeln!(out, "(assert (<= {x} {}))", smt_real(spec.state_box.hi[i]));
    }
    let mut b = Builder { out, next: 0 };

    // Controller u = LS(offset − Kx + ψ(x)).
    let (psi, _) = emit_net(&mut b, "psi", &snap.ctrl.psi, &xs, None);
    let c = &snap.ctrl;
    let mut us = Vec::with_capacity(spec.m);
    for j in 0..spec.m {
        let neg_k: Vec<f64> = c.base.gain.row(j).iter().map(|k| -k).collect();
        let lin = affine(&neg_k, &xs, Some(c.base.offset[j]));
        let raw = b.def("u_raw", format!("(+ {lin} {})", psi[j]));
        let sat = format!(
            "(ite (< {raw} {lo}) (+ {lo} (* {slo} (- {raw} {lo}))) (ite (> {raw} {hi}) (+ {hi} (* {shi} (- {raw} {hi}))) {raw}))",
            lo = smt_real(c.lo),
            hi = smt_real(c.hi),
            slo = smt_real(c.slope_lo),
            shi = smt_real(c.slope_hi)
        );
        us.push(b.named(&format!("u_{j}"), sat));
    }

    // Model field F = f̂ + ĝu.
    let (mut f, mut g) = emit_plant(&mut b, &spec.nominal_plant, &xs);
    let (rf, _) = emit_net(&mut b, "rf", &snap.res.f, &xs, None);
    for (r, v) in snap.res.f_rows.iter().zip(rf) {
        f[*r] = format!("(+ {} {v})", f[*r]);
    }
    match &snap.res.g {
        FrozenResidualG::Scalar { row, value } => {
            for j in 0..spec.m {
                g[*row][j] = format!("(+ {} {})", g[*row][j], smt_real(*value));
            }
        }
        FrozenResidualG::Net { net, rows } => {
            let (rg, _) = emit_net(&mut b, "rg", net, &xs, None);
            for (i, r) in rows.iter().enumerate() {
                for j in 0..spec.m {
                    g[*r][j] = format!("(+ {} {})", g[*r][j], rg[i * spec.m + j]);
                }
            }
        }
    }
    let field: Vec<String> = (0..n)
        .map(|i| {
            let mut terms = vec![f[i].clone()];
            terms.extend((0..spec.m).map(|j| format!("(* {} {})", g[i][j], us[j])));
            b.def("F", sum(terms))
        })
        .collect();

    // V = xᵀAx + φᵀφ and V̇̂ = 2xᵀAF + 2φᵀ(J_φ F).
    let a = &snap.lyap.a;
    let ax: Vec<String> = (0..n).map(|i| b.def("Ax", affine(a.row(i), &xs, None))).collect();
    let (phi, dphi) = emit_net(&mut b, "phi", &snap.lyap.phi, &xs, Some(&field));
    let mut v_terms: Vec<String> = xs.iter().zip(&ax).map(|(x, y)| format!("(* {x} {y})")).collect();
    v_terms.extend(phi.iter().map(|p| format!("(* {p} {p})")));
    let v = b.named("V", sum(v_terms));
    let mut vd_terms: Vec<String> = field.iter().zip(&ax).map(|(fi, y)| format!("(* 2.0 (* {y} {fi}))")).collect();
    vd_terms.extend(phi.iter().zip(&dphi).map(|(p, d)| format!("(* 2.0 (* {p} {d}))")));
    let vdot = b.named("vdot_hat", sum(vd_terms));
    let norm = b.named("norm_sq", sum(xs.iter().map(|x| format!("(* {x} {x})")).collect()));
    let lhs = b.named("lhs", format!("(+ {vdot} (* {} {norm}))", smt_real(opts.kappa)));
    let mut out = b.out;
    let _ = writeln!(
        out,
        "(assert (and (>= {norm} {}) (<= {v} {}) (>= {lhs} 0.0)))",
        smt_real(opts.zeta * opts.zeta),
        smt_real(opts.c)
    );
    let _ = writeln!(out, "(check-sat)");
    let _ = writeln!(out, "(exit)");
    Ok(out)
}

// ---------------------------------------------------------------------------
// SMT-LIB2 reader and evaluator (the subset the exporter emits)

#[derive(Clone, Debug, PartialEq)]
pub enum SExpr {
    Atom(String),
    List(Vec<SExpr>),
}

/// Parses every top-level s-expression; `;` starts a line comment.
pub fn parse_sexprs(text: &str) -> Result<Vec<SExpr>> {
    let mut tokens = Vec::new();
    for line in text.lines() {
        let line = line.split(';').next().unwrap_or("");
        let spaced = line.replace('(', " ( ").replace(')', " ) ");
        tokens.extend(spaced.split_whitespace().map(str::to_string));
    }
    let mut stack: Vec<Vec<SExpr>> = vec![Vec::new()];
    for tok in tokens {
        match tok.as_str() {
            "(" => stack.push(Vec::new()),
            ")" => {
                let done = stack.pop().filter(|_| !stack.is_empty()).ok_or_else(|| Error::Parse("unbalanced `)`".into()))?;
                stack.last_mut().expect("outer level").push(SExpr::List(done));
            }
            _ => stack.last_mut().expect("outer level").push(SExpr::Atom(tok)),
        }
    }
    if stack.len() != 1 {
        return Err(Error::Parse("unterminated `(`".into()));
    }
    Ok(stack.pop().expect("top level"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SmtScript {
    /// Declared real variables, in order.
    pub declared: Vec<String>,
    pub definitions: Vec<(String, SExpr)>,
    pub assertions: Vec<SExpr>,
    pub check_sat: bool,
}

fn atom(e: &SExpr) -> Option<&str> {
    match e {
        SExpr::Atom(a) => Some(a),
        SExpr::List(_) => None,
    }
}

fn is_unit_real_sort(args: &SExpr, sort: &SExpr) -> bool {
    matches!(args, SExpr::List(v) if v.is_empty()) && atom(sort) == Some("Real")
}

impl SmtScript {
    pub fn parse(text: &str) -> Result<SmtScript> {
        let mut script = SmtScript { declared: Vec::new(), definitions: Vec::new(), assertions: Vec::new(), check_sat: false };
        for cmd in parse_sexprs(text)? {
            let SExpr::List(items) = &cmd else {
                return Err(Error::Parse(format!("stray atom {cmd:?} at top level")));
            };
            let head = items.first().and_then(atom).ok_or_else(|| Error::Parse("empty command".into()))?;
            match (head, items.len()) {
                ("set-logic" | "set-option" | "set-info" | "exit", _) => {}
                ("check-sat", 1) => script.check_sat = true,
                ("declare-fun", 4) if is_unit_real_sort(&items[2], &items[3]) => {
                    let name = atom(&items[1]).ok_or_else(|| Error::Parse("bad declare-fun name".into()))?;
                    script.declared.push(name.to_string());
                }
                ("define-fun", 5) if is_unit_real_sort(&items[2], &items[3]) => {
                    let name = atom(&items[1]).ok_or_else(|| Error::Parse("bad define-fun name".into()))?;
                    script.definitions.push((name.to_string(), items[4].clone()));
                }
                ("assert", 2) => script.assertions.push(items[1].clone()),
                _ => return Err(Error::Parse(format!("unsupported command `{head}` with {} items", items.len()))),
            }
        }
        Ok(script)
    }

    /// Values of every defined constant and the truth of every assertion at `x`.
    pub fn evaluate(&self, x: &[f64]) -> Result<SmtEvaluation> {
        if x.len() != self.declared.len() {
            return Err(Error::Shape(format!("{} values for {} declared variables", x.len(), self.declared.len())));
        }
        let mut env: HashMap<String, f64> = self.declared.iter().cloned().zip(x.iter().copied()).collect();
        for (name, expr) in &self.definitions {
            let v = eval_real(expr, &env)?;
            env.insert(name.clone(), v);
        }
        let assertions = self.assertions.iter().map(|a| eval_bool(a, &env)).collect::<Result<_>>()?;
        Ok(SmtEvaluation { values: env, assertions })
    }
}

#[derive(Clone, Debug)]
pub struct SmtEvaluation {
    pub values: HashMap<String, f64>,
    pub assertions: Vec<bool>,
}

impl SmtEvaluation {
    pub fn value(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    pub fn all_hold(&self) -> bool {
        self.assertions.iter().all(|b| *b)
    }
}

fn eval_real(e: &SExpr, env: &HashMap<String, f64>) -> Result<f64> {
    match e {
        SExpr::Atom(a) => {
            if let Some(v) = env.get(a) {
                return Ok(*v);
            }
            if a.starts_with(|c: char| c.is_ascii_digit()) {
                return a.parse().map_err(|_| Error::Parse(format!("bad numeral `{a}`")));
            }
            Err(Error::Parse(format!("unbound symbol `{a}`")))
        }
        SExpr::List(items) => {
            let op = items.first().and_then(atom).ok_or_else(|| Error::Parse("missing operator".into()))?;
            let args = &items[1..];
            let vals = || args.iter().map(|a| eval_real(a, env)).collect::<Result<Vec<f64>>>();
            let unary = |f: fn(f64) -> f64| -> Result<f64> {
                match args {
                    [a] => Ok(f(eval_real(a, env)?)),
                    _ => Err(Error::Parse(format!("`{op}` takes one argument"))),
                }
            };
            match op {
                "+" => Ok(vals()?.iter().sum()),
                "*" => Ok(vals()?.iter().product()),
                "-" => {
                    let v = vals()?;
                    match v.split_first() {
                        Some((first, [])) => Ok(-first),
                        Some((first, rest)) => Ok(rest.iter().fold(*first, |acc, r| acc - r)),
                        None => Err(Error::Parse("`-` needs arguments".into())),
                    }
                }
                "/" => {
                    let v = vals()?;
                    match v.split_first() {
                        Some((first, rest)) if !rest.is_empty() => Ok(rest.iter().fold(*first, |acc, r| acc / r)),
                        _ => Err(Error::Parse("`/` needs two or more arguments".into())),
                    }
                }
                "exp" => unary(f64::exp),
                "sin" => unary(f64::sin),
                "cos" => unary(f64::cos),
                "ite" => match args {
                    [c, a, b] => {
                        if eval_bool(c, env)? {
                            eval_real(a, env)
                        } else {
                            eval_real(b, env)
                        }
                    }
                    _ => Err(Error::Parse("`ite` takes three arguments".into())),
                },
                _ => Err(Error::Parse(format!("unsupported real operator `{op}`"))),
            }
        }
    }
}

fn eval_bool(e: &SExpr, env: &HashMap<String, f64>) -> Result<bool> {
    let SExpr::List(items) = e else {
        return match atom(e) {
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            other => Err(Error::Parse(format!("expected a boolean, found {other:?}"))),
        };
    };
    let op = items.first().and_then(atom).ok_or_else(|| Error::Parse("missing operator".into()))?;
    let args = &items[1..];
    match op {
        "and" => args.iter().try_fold(true, |acc, a| Ok(acc & eval_bool(a, env)?)),
        "or" => args.iter().try_fold(false, |acc, a| Ok(acc | eval_bool(a, env)?)),
        "not" => match args {
            [a] => Ok(!eval_bool(a, env)?),
            _ => Err(Error::Parse("`not` takes one argument".into())),
        },
        "<" | "<=" | ">" | ">=" | "=" => {
            let v = args.iter().map(|a| eval_real(a, env)).collect::<Result<Vec<f64>>>()?;
            if v.len() < 2 {
                return Err(Error::Parse(format!("`{op}` needs two or more arguments")));
            }
            Ok(v.windows(2).all(|w| match op {
                "<" => w[0] < w[1],
                "<=" => w[0] <= w[1],
                ">" => w[0] > w[1],
                ">=" => w[0] >= w[1],
                _ => w[0] == w[1],
            }))
        }
        _ => Err(Error::Parse(format!("unsupported boolean operator `{op}`"))),
    }
}

/// Random states in the box (for cross-checks of exported formulas).
pub fn random_states(bx: &StateBox, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| bx.lo.iter().zip(&bx.hi).map(|(lo, hi)| rng.random_range(*lo..=*hi)).collect()).collect()
}

/// Evaluates the exported script and the direct computation at `x`; returns
/// `(|ΔV|, |Δlhs|, formula agrees)`.
pub fn cross_check(script: &SmtScript, snap: &Snapshot, opts: &ExportOptions, x: &[f64]) -> Result<(f64, f64, bool)> {
    let ev = script.evaluate(x)?;
    let (v, vdot) = snap.value_and_vdot(x)?;
    let r2: f64 = x.iter().map(|a| a * a).sum();
    let lhs = vdot + opts.kappa * r2;
    let sv = ev.value("V").ok_or_else(|| Error::Parse("script lacks `V`".into()))?;
    let sl = ev.value("lhs").ok_or_else(|| Error::Parse("script lacks `lhs`".into()))?;
    let direct = violates(x, v, vdot, opts.c, opts.zeta, opts.kappa) && snap.spec.state_box.contains(x);
    Ok(((sv - v).abs(), (sl - lhs).abs(), direct == ev.all_hold()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::make_system;
    use crate::linalg::Mat;
    use crate::lyapnet::{Architecture, ControllerNet, LinearLaw, LyapunovNet, Networks, ResidualDynamics};
    use std::collections::BTreeMap;

    fn tiny_nets(system: &str, seed: u64) -> (Networks, crate::dynamics::SystemSpec) {
        let spec = make_system(system, &BTreeMap::new()).unwrap();
        let arch = Architecture { phi: vec![4, 5], psi_hidden: vec![3], f_hidden: vec![3], g_hidden: vec![3] };
        let mut nets = Networks {
            lyap: LyapunovNet::new(spec.n, 1e-6, &arch.phi, seed).unwrap(),
            ctrl: ControllerNet::new(LinearLaw::zero(spec.n, spec.m), &arch.psi_hidden, -2.0, 2.0, seed + 1).unwrap(),
            res: ResidualDynamics::new(&spec, &arch, seed + 2).unwrap(),
        };
        // Non-trivial values everywhere, including zero-initialized layers.
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
        for store in [&mut nets.ctrl.params, &mut nets.res.params] {
            for (_, m) in store.iter_mut() {
                for v in m.as_mut_slice() {
                    *v += rng.random_range(-0.5..0.5);
                }
            }
        }
        nets.ctrl.base.gain = Mat::from_vec(1, spec.n, (0..spec.n).map(|i| 0.5 + i as f64).collect());
        (nets, spec)
    }

    #[test]
    fn literals_have_seventeen_digits_and_round_trip() {
        assert_eq!(smt_real(0.0), "0.0");
        assert_eq!(smt_real(1.0), "1.0000000000000000");
        assert_eq!(smt_real(-2.5), "(- 2.5000000000000000)");
        assert_eq!(smt_real(1e20), "100000000000000000000.0");
        assert_eq!(smt_real(1.5e-3), "0.0015000000000000000");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let x: f64 = rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-12..12));
            let s = smt_real(x);
            let parsed = eval_real(&parse_sexprs(&s).unwrap()[0], &HashMap::new()).unwrap();
            assert_eq!(parsed, x, "{s}");
            let digits = s.chars().filter(char::is_ascii_digit).collect::<String>();
            assert!(digits.trim_start_matches('0').len() >= 17 || x == 0.0, "{s}");
        }
    }

    #[test]
    fn reader_rejects_malformed_input() {
        assert!(SmtScript::parse("(assert (< x0 1.0)").is_err());
        assert!(SmtScript::parse("(declare-fun x () Bool)").is_err());
        assert!(SmtScript::parse("(push 1)").is_err());
        let s = SmtScript::parse("(declare-fun a () Real)(assert (< a 1.0))").unwrap();
        assert!(s.evaluate(&[0.0]).unwrap().all_hold());
        assert!(!s.evaluate(&[2.0]).unwrap().all_hold());
        let s = SmtScript::parse("(declare-fun a () Real)(define-fun b () Real (+ a zz))").unwrap();
        assert!(s.evaluate(&[0.0]).is_err());
    }

    #[test]
    fn export_matches_direct_evaluation_on_every_plant() {
        for (k, system) in ["pendulum", "strict_feedback", "cartpole"].into_iter().enumerate() {
            let (nets, spec) = tiny_nets(system, 10 * k as u64);
            let snap = nets.frozen(&spec);
            let opts = ExportOptions::new(0.8, 0.1);
            let text = export_smt2(&snap, &opts).unwrap();
            let script = SmtScript::parse(&text).unwrap();
            assert_eq!(script.declared.len(), spec.n);
            assert_eq!(text.matches("declare-fun").count(), spec.n);
            assert!(script.check_sat);
            assert!(text.contains("; zeta = 0.3") && text.contains("; precision = 0.001"));
            for x in random_states(&spec.state_box, 100, k as u64) {
                let (dv, dl, agree) = cross_check(&script, &snap, &opts, &x).unwrap();
                assert!(dv <= 1e-9 && dl <= 1e-9 && agree, "{system} at {x:?}: {dv:e} {dl:e} {agree}");
            }
        }
    }

    #[test]
    fn export_refuses_wide_phi() {
        let spec = make_system("pendulum", &BTreeMap::new()).unwrap();
        let nets = Networks {
            lyap: LyapunovNet::new(2, 1e-6, &[64, 64], 0).unwrap(),
            ctrl: ControllerNet::new(LinearLaw::zero(2, 1), &[4], -2.0, 2.0, 1).unwrap(),
            res: ResidualDynamics::new(&spec, &Architecture::default(), 2).unwrap(),
        };
        let err = export_smt2(&nets.frozen(&spec), &ExportOptions::new(1.0, 0.1)).unwrap_err();
        assert!(matches!(err, Error::Oversized(ref msg) if msg.contains("64")), "{err}");
    }

    #[test]
    fn quadratic_value_with_zero_controller_is_falsified_on_the_pendulum() {
        let spec = make_system("pendulum", &BTreeMap::new()).unwrap();
        let plant = spec.true_plant.clone();
        let c = 0.1 * 2.0 + 1e-9;
        let res = falsify_grid_with(&spec.state_box, c, 0.3, 0.1, 0.05, |x| {
            let f = plant.field(x, &[0.0])?;
            Ok((0.1 * (x[0] * x[0] + x[1] * x[1]), 0.2 * (x[0] * f[0] + x[1] * f[1])))
        })
        .unwrap();
        let x = res.counterexample.expect("upright region violates");
        let f = plant.field(&x, &[0.0]).unwrap();
        let (v, vdot) = (0.1 * (x[0] * x[0] + x[1] * x[1]), 0.2 * (x[0] * f[0] + x[1] * f[1]));
        assert!(violates(&x, v, vdot, c, 0.3, 0.1));
        assert!(res.checked_points > 0 && res.margin_min <= 0.0);
    }

    #[test]
    fn zero_level_is_vacuous() {
        let bx = StateBox::symmetric(&[1.0, 1.0]);
        let res = falsify_grid_with(&bx, 0.0, 0.3, 0.1, 0.1, |x| Ok((x[0] * x[0] + x[1] * x[1], 1.0))).unwrap();
        assert_eq!(res.counterexample, None);
        assert_eq!(res.checked_points, 0);
        assert_eq!(res.margin_min, f64::INFINITY);
    }

    #[test]
    fn first_counterexample_is_in_grid_order() {
        let bx = StateBox::symmetric(&[1.0, 1.0]);
        let res = falsify_grid_with(&bx, 10.0, 0.0, 0.0, 0.5, |x| Ok((0.0, if x[0] > 0.2 { 1.0 } else { -1.0 }))).unwrap();
        let ce = res.counterexample.unwrap();
        let mesh = build_mesh_in_box(&bx, &[5, 5]).unwrap();
        let first = mesh.points.iter().find(|p| p[0] > 0.2).unwrap();
        assert_eq!(&ce, first);
        assert_eq!(res.checked_points, 25);
    }

    #[test]
    fn plant_expressions_match_the_numeric_fields() {
        for system in ["pendulum", "strict_feedback", "cartpole"] {
            let spec = make_system(system, &BTreeMap::new()).unwrap();
            let xs: Vec<String> = (0..spec.n).map(|i| format!("x{i}")).collect();
            let mut b = Builder { out: String::new(), next: 0 };
            let (f, g) = emit_plant(&mut b, &spec.nominal_plant, &xs);
            let mut text = xs.iter().map(|x| format!("(declare-fun {x} () Real)\n")).collect::<String>();
            text.push_str(&b.out);
            for (i, e) in f.iter().enumerate() {
                text.push_str(&format!("(define-fun f{i} () Real {e})\n"));
                text.push_str(&format!("(define-fun g{i} () Real {})\n", g[i][0]));
            }
            let script = SmtScript::parse(&text).unwrap();
            for x in random_states(&spec.state_box, 20, 3) {
                let ev = script.evaluate(&x).unwrap();
                let (f0, g0) = spec.nominal_plant.affine_terms(&x).unwrap();
                for i in 0..spec.n {
                    assert!((ev.value(&format!("f{i}")).unwrap() - f0[i]).abs() < 1e-12);
                    assert!((ev.value(&format!("g{i}")).unwrap() - g0[(i, 0)]).abs() < 1e-12);
                }
            }
        }
    }
}
