//! Continuous-time LQR baseline around the origin of the nominal plant.

use serde::{Deserialize, Serialize};

use crate::dynamics::{Model, SystemSpec};
use crate::error::{Error, Result};
use crate::linalg::{dot, Mat};
use crate::lyapnet::{LinearLaw, Snapshot};
use crate::roa::{level_from_values, roa_ratios, Mesh, RoaReport};

const FD_STEP: f64 = 1e-6;
const RESIDUAL_TOL: f64 = 1e-8;
const MAX_NEWTON: usize = 100;

/// `ẋ ≈ A x + B (u − u₀)` near the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub a: Mat,
    pub b: Mat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqrSolution {
    pub p: Mat,
    pub k: Mat,
    pub riccati_residual: f64,
}

/// Central-difference Jacobians of the chosen field at `(0, u₀)`.
pub fn linearize_model(spec: &SystemSpec, which: Model) -> Result<LinearModel> {
    let (n, m) = (spec.n, spec.m);
    let plant = spec.plant(which);
    let x0 = vec![0.0; n];
    let u0 = spec.equilibrium_input.clone();
    let mut a = Mat::zeros(n, n);
    let mut b = Mat::zeros(n, m);
    for j in 0..n {
        let (mut xp, mut xm) = (x0.clone(), x0.clone());
        xp[j] += FD_STEP;
        xm[j] -= FD_STEP;
        let (fp, fm) = (plant.field(&xp, &u0)?, plant.field(&xm, &u0)?);
        for i in 0..n {
            a[(i, j)] = (fp[i] - fm[i]) / (2.0 * FD_STEP);
        }
    }
    for j in 0..m {
        let (mut up, mut um) = (u0.clone(), u0.clone());
        up[j] += FD_STEP;
        um[j] -= FD_STEP;
        let (fp, fm) = (plant.field(&x0, &up)?, plant.field(&x0, &um)?);
        for i in 0..n {
            b[(i, j)] = (fp[i] - fm[i]) / (2.0 * FD_STEP);
        }
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::NonFinite("linearization Jacobian".into()));
    }
    Ok(LinearModel { a, b })
}

/// Linearization of the nominal plant.
pub fn linearize(spec: &SystemSpec) -> Result<LinearModel> {
    linearize_model(spec, Model::Nominal)
}

/// Solves `AᵀX + XA + C = 0` for `X` via the vectorized Kronecker system.
pub fn solve_lyapunov(a: &Mat, c: &Mat) -> Result<Mat> {
    let n = a.rows();
    if a.cols() != n || c.shape() != (n, n) {
        return Err(Error::Shape(format!("Lyapunov equation with A {:?} and C {:?}", a.shape(), c.shape())));
    }
    // Row-major vec: (AᵀX)_{ij} = Σ_k A_{ki} X_{kj}, (XA)_{ij} = Σ_k X_{ik} A_{kj}.
    let nn = n * n;
    let mut big = Mat::zeros(nn, nn);
    for i in 0..n {
        for j in 0..n {
            let row = i * n + j;
            for k in 0..n {
                big[(row, k * n + j)] += a[(k, i)];
                big[(row, i * n + k)] += a[(k, j)];
            }
        }
    }
    let rhs = Mat::from_vec(nn, 1, c.as_slice().iter().map(|v| -v).collect());
    let x = big.solve(&rhs)?;
    let x = Mat::from_vec(n, n, x.as_slice().to_vec());
    Ok(x.add(&x.transpose()).scale(0.5))
}

/// `‖AᵀP + PA − PBR⁻¹BᵀP + Q‖_F`.
pub fn riccati_residual(model: &LinearModel, q: &Mat, r: &Mat, p: &Mat) -> Result<f64> {
    let r_inv = r.inverse()?;
    let bt_p = model.b.t_matmul(p);
    let quad = bt_p.t_matmul(&r_inv.matmul(&bt_p));
    let res = model.a.t_matmul(p).add(&p.matmul(&model.a)).sub(&quad).add(q);
    Ok(res.frobenius())
}

/// Characteristic polynomial coefficients `[1, c₁, …, c_n]` of `det(sI − A)`
/// by Faddeev–LeVerrier.
pub fn char_poly(a: &Mat) -> Vec<f64> {
    let n = a.rows();
    let mut coeffs = vec![1.0];
    let mut m = Mat::zeros(n, n);
    for k in 1..=n {
        let mut next = a.matmul(&m);
        let c_prev = coeffs[k - 1];
        for i in 0..n {
            next[(i, i)] += c_prev;
        }
        m = next;
        let am = a.matmul(&m);
        let tr: f64 = (0..n).map(|i| am[(i, i)]).sum();
        coeffs.push(-tr / k as f64);
    }
    coeffs
}

/// Routh–Hurwitz test on the characteristic polynomial: all roots in the
/// open left half plane.
pub fn is_hurwitz(a: &Mat) -> bool {
    let coeffs = char_poly(a);
    if coeffs.iter().any(|c| !c.is_finite() || *c <= 0.0) {
        return false;
    }
    let deg = coeffs.len() - 1;
    let width = deg / 2 + 1;
    let mut r0: Vec<f64> = (0..width).map(|i| coeffs.get(2 * i).copied().unwrap_or(0.0)).collect();
    let mut r1: Vec<f64> = (0..width).map(|i| coeffs.get(2 * i + 1).copied().unwrap_or(0.0)).collect();
    for _ in 1..deg {
        if r1[0] <= 0.0 {
            return false;
        }
        let next: Vec<f64> = (0..width)
            .map(|i| {
                let a = r0.get(i + 1).copied().unwrap_or(0.0);
                let b = r1.get(i + 1).copied().unwrap_or(0.0);
                (r1[0] * a - r0[0] * b) / r1[0]
            })
            .collect();
        r0 = r1;
        r1 = next;
    }
    r1[0] > 0.0
}

/// Stabilizing gain by the shifted-Lyapunov (Bass) construction.
fn initial_gain(model: &LinearModel) -> Result<Mat> {
    let n = model.a.rows();
    let beta = model.a.frobenius() + 1.0;
    // (A + βI) Z + Z (A + βI)ᵀ = 2BBᵀ, written in the AᵀX + XA + C = 0 form.
    let mut shifted = model.a.clone();
    for i in 0..n {
        shifted[(i, i)] += beta;
    }
    let z = solve_lyapunov(&shifted.transpose(), &model.b.matmul_t(&model.b).scale(-2.0))?;
    Ok(model.b.t_matmul(&z.inverse()?))
}

/// Newton–Kleinman iteration for the continuous algebraic Riccati equation.
pub fn solve_care(model: &LinearModel, q: &Mat, r: &Mat) -> Result<LqrSolution> {
    let (n, m) = (model.a.rows(), model.b.cols());
    if model.a.cols() != n || model.b.rows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::Shape("CARE dimensions".into()));
    }
    let r_inv = r.inverse()?;
    let mut k = initial_gain(model).map_err(|e| Error::NotStabilizable(format!("no initial stabilizing gain: {e}")))?;
    if !is_hurwitz(&model.a.sub(&model.b.matmul(&k))) {
        return Err(Error::NotStabilizable("initial gain does not stabilize".into()));
    }
    let mut p = Mat::zeros(n, n);
    for _ in 0..MAX_NEWTON {
        let ak = model.a.sub(&model.b.matmul(&k));
        let c = q.add(&k.t_matmul(&r.matmul(&k)));
        let next = solve_lyapunov(&ak, &c)?;
        let change = next.sub(&p).max_abs();
        p = next;
        k = r_inv.matmul(&model.b.t_matmul(&p));
        if change <= 1e-14 * p.max_abs().max(1.0) {
            break;
        }
    }
    let residual = riccati_residual(model, q, r, &p)?;
    if !(residual <= RESIDUAL_TOL) {
        return Err(Error::NotStabilizable(format!("Riccati residual {residual:e} above tolerance")));
    }
    if !is_hurwitz(&model.a.sub(&model.b.matmul(&k))) {
        return Err(Error::NotStabilizable("closed loop is not Hurwitz".into()));
    }
    Ok(LqrSolution { p, k, riccati_residual: residual })
}

/// LQR law `u = u₀ − Kx` for the nominal linearization with `Q = I`, `R = I`.
pub fn lqr_law(spec: &SystemSpec) -> Result<(LqrSolution, LinearLaw)> {
    let model = linearize(spec)?;
    let sol = solve_care(&model, &Mat::identity(spec.n), &Mat::identity(spec.m))?;
    let law = LinearLaw { gain: sol.k.clone(), offset: spec.equilibrium_input.clone() };
    Ok((sol, law))
}

/// Level sweep with `V = xᵀPx` on an already labeled mesh.
///
/// `field(x)` is the closed-loop model field used for `V̇ = 2xᵀP ẋ`.
pub fn lqr_roa_estimate_with<F>(p: &Mat, mesh: &Mesh, field: F, kappa: f64) -> Result<RoaReport>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let mut m = mesh.clone();
    m.evaluate(|x| {
        let px = p.matvec(x);
        Ok((dot(x, &px), 2.0 * dot(&px, &field(x)?)))
    })?;
    let c = level_from_values(&m, kappa)?;
    Ok(roa_ratios(&m, c))
}

/// Baseline estimate under the snapshot's controller and model.
pub fn lqr_roa_estimate(sol: &LqrSolution, mesh: &Mesh, snap: &Snapshot, kappa: f64) -> Result<RoaReport> {
    lqr_roa_estimate_with(&sol.p, mesh, |x| snap.model_field(x, &snap.ctrl.eval(x)), kappa)
}
