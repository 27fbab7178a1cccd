//! State-space meshes, sublevel-set search and robustness checks for the
//! estimated region of attraction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate, Model, Policy, RolloutOptions, StateBox, SystemSpec, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm2};
use crate::lyapnet::Snapshot;

/// Stability label of a mesh point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    #[default]
    Unknown,
    Unstable,
    /// Converged, but left the state box on the way.
    Stable,
    /// Converged without ever leaving the state box.
    FiStable,
}

impl Label {
    /// True for both converging labels.
    pub fn is_stable(self) -> bool {
        matches!(self, Label::Stable | Label::FiStable)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Unknown => "unknown",
            Label::Unstable => "unstable",
            Label::Stable => "stable",
            Label::FiStable => "fi_stable",
        }
    }
}

/// Uniform inclusive grid over a state box, with per-point labels and values.
///
/// Points are ordered lexicographically by grid index, first coordinate slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub dims: Vec<usize>,
    pub points: Vec<Vec<f64>>,
    /// Largest grid spacing over all coordinates.
    pub tau: f64,
    pub labels: Vec<Label>,
    pub v_values: Vec<f64>,
    pub vdot_values: Vec<f64>,
    /// Whether the point lies on a face of the box.
    pub on_boundary: Vec<bool>,
}

impl Mesh {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Fills `v_values` and `vdot_values` from `eval(x) = (V(x), V̇(x))`.
    pub fn evaluate<F>(&mut self, eval: F) -> Result<()>
    where
        F: Fn(&[f64]) -> Result<(f64, f64)> + Sync,
    {
        let vals: Result<Vec<(f64, f64)>> = self.points.par_iter().map(|x| eval(x)).collect();
        let (v, vd): (Vec<f64>, Vec<f64>) = vals?.into_iter().unzip();
        self.v_values = v;
        self.vdot_values = vd;
        Ok(())
    }

    /// `V` and `V̇̂` under a snapshot of the learned maps.
    pub fn evaluate_snapshot(&mut self, snap: &Snapshot) -> Result<()> {
        self.evaluate(|x| snap.value_and_vdot(x))
    }

    pub fn count(&self, pred: impl Fn(Label) -> bool) -> usize {
        self.labels.iter().filter(|l| pred(**l)).count()
    }

    /// CSV with columns `x1..xn, V, Vdot_hat, label`.
    pub fn to_csv(&self) -> String {
        let n = self.dims.len();
        let mut out = String::new();
        for i in 1..=n {
            out.push_str(&format!("x{i},"));
        }
        out.push_str("V,Vdot_hat,label\n");
        for (k, x) in self.points.iter().enumerate() {
            for v in x {
                out.push_str(&format!("{v},"));
            }
            let v = self.v_values.get(k).copied().unwrap_or(f64::NAN);
            let vd = self.vdot_values.get(k).copied().unwrap_or(f64::NAN);
            out.push_str(&format!("{v},{vd},{}\n", self.labels[k].as_str()));
        }
        out
    }
}

/// Builds the mesh over the plant's state box.
pub fn build_mesh(spec: &SystemSpec, points_per_dim: &[usize]) -> Result<Mesh> {
    build_mesh_in_box(&spec.state_box, points_per_dim)
}

pub fn build_mesh_in_box(bx: &StateBox, points_per_dim: &[usize]) -> Result<Mesh> {
    let n = bx.dim();
    if points_per_dim.len() != n {
        return Err(Error::Shape(format!("{} mesh dims for a {n}-dimensional box", points_per_dim.len())));
    }
    if let Some(d) = points_per_dim.iter().find(|&&d| d < 2) {
        return Err(Error::InvalidParameter(format!("each mesh dimension needs at least 2 points, got {d}")));
    }
    for i in 0..n {
        if !(bx.lo[i] < bx.hi[i]) {
            return Err(Error::InvalidParameter(format!("degenerate box in coordinate {i}: [{}, {}]", bx.lo[i], bx.hi[i])));
        }
    }
    let axes: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let k = points_per_dim[i];
            let (lo, hi) = (bx.lo[i], bx.hi[i]);
            (0..k).map(|j| if j + 1 == k { hi } else { lo + (hi - lo) * j as f64 / (k - 1) as f64 }).collect()
        })
        .collect();
    let tau = (0..n).map(|i| (bx.hi[i] - bx.lo[i]) / (points_per_dim[i] - 1) as f64).fold(0.0, f64::max);
    let total: usize = points_per_dim.iter().product();
    let mut points = Vec::with_capacity(total);
    let mut on_boundary = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    for _ in 0..total {
        points.push((0..n).map(|i| axes[i][idx[i]]).collect());
        on_boundary.push((0..n).any(|i| idx[i] == 0 || idx[i] + 1 == points_per_dim[i]));
        for i in (0..n).rev() {
            idx[i] += 1;
            if idx[i] < points_per_dim[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    Ok(Mesh {
        dims: points_per_dim.to_vec(),
        points,
        tau,
        labels: vec![Label::Unknown; total],
        v_values: Vec::new(),
        vdot_values: Vec::new(),
        on_boundary,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoaReport {
    pub c: f64,
    pub ratio_true: f64,
    pub ratio_fi: f64,
    pub ratio_estimated: f64,
    pub iteration: usize,
    pub certified: bool,
}

/// Largest level `c` such that every mesh point with `V ≤ c` is labeled
/// stable, satisfies `V̇ ≤ −κ‖x‖²`, and is off the box faces.
///
/// Sweeps points in increasing `V`; `c` ends just below the first offending
/// value. Returns 0 when the very first offender sits at `V = 0`, and the
/// largest `V` when no point offends.
pub fn level_from_values(mesh: &Mesh, kappa: f64) -> Result<f64> {
    let n = mesh.len();
    if mesh.v_values.len() != n || mesh.vdot_values.len() != n || mesh.labels.len() != n {
        return Err(Error::Shape("mesh values are not populated".into()));
    }
    if mesh.v_values.iter().chain(&mesh.vdot_values).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mesh V or V̇ values".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| mesh.v_values[a].total_cmp(&mesh.v_values[b]));
    let bad = |k: usize| {
        let x = &mesh.points[k];
        !mesh.labels[k].is_stable() || mesh.on_boundary[k] || mesh.vdot_values[k] > -kappa * dot(x, x)
    };
    match order.iter().find(|&&k| bad(k)) {
        Some(&k) => {
            let v = mesh.v_values[k];
            Ok(if v > 0.0 { v.next_down() } else { 0.0 })
        }
        None => Ok(order.last().map_or(0.0, |&k| mesh.v_values[k])),
    }
}

/// Label-based ratios plus the fraction of points in `{V ≤ c}`, in percent.
pub fn roa_ratios(mesh: &Mesh, c: f64) -> RoaReport {
    let n = mesh.len().max(1) as f64;
    let stable = mesh.count(Label::is_stable) as f64;
    let fi = mesh.count(|l| l == Label::FiStable) as f64;
    let inside = if c > 0.0 { mesh.v_values.iter().filter(|&&v| v <= c).count() as f64 } else { 0.0 };
    RoaReport {
        c,
        ratio_true: 100.0 * stable / n,
        ratio_fi: 100.0 * fi / n,
        ratio_estimated: 100.0 * inside / n,
        iteration: 0,
        certified: c > 0.0,
    }
}

/// Evaluates the snapshot on a labeled mesh and runs the level sweep.
pub fn level_search(mesh: &mut Mesh, snap: &Snapshot, kappa: f64) -> Result<(f64, RoaReport)> {
    mesh.evaluate_snapshot(snap)?;
    let c = level_from_values(mesh, kappa)?;
    Ok((c, roa_ratios(mesh, c)))
}

/// Points of `{V = c}` found along random rays from the origin.
///
/// Each ray is marched to the box exit; the first bracket crossing `c` is
/// bisected until `|V − c| ≤ 1e-6`, keeping the side with `V ≤ c`. Rays that
/// never reach `c` inside the box are skipped. Returns the points together
/// with the ray directions and crossing radii.
pub fn sample_level_surface<V>(value: V, bx: &StateBox, c: f64, count: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>, f64)>
where
    V: Fn(&[f64]) -> f64 + Sync,
{
    if !(c > 0.0) || count == 0 {
        return Vec::new();
    }
    let n = bx.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Oversample rays: some may leave the box before reaching the level.
    let dirs: Vec<Vec<f64>> = (0..count * 4)
        .map(|_| loop {
            let d: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let r = norm2(&d);
            if r > 1e-12 {
                break d.into_iter().map(|v| v / r).collect();
            }
        })
        .collect();
    let found: Vec<Option<(Vec<f64>, Vec<f64>, f64)>> = dirs
        .par_iter()
        .map(|dir| {
            let exit = bx.ray_exit(dir);
            let at = |r: f64| -> Vec<f64> { dir.iter().map(|d| d * r).collect() };
            const MARCH: usize = 64;
            let mut lo = 0.0;
            let mut hi = None;
            for k in 1..=MARCH {
                let r = exit * k as f64 / MARCH as f64;
                if value(&at(r)) > c {
                    hi = Some(r);
                    break;
                }
                lo = r;
            }
            let mut hi = hi?;
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if value(&at(mid)) > c {
                    hi = mid;
                } else {
                    lo = mid;
                }
                if c - value(&at(lo)) <= 1e-6 || hi - lo < 1e-15 {
                    break;
                }
            }
            Some((at(lo), dir.clone(), lo))
        })
        .collect();
    found.into_iter().flatten().take(count).collect()
}

/// Sampled ISS check on `Ω = {V ≤ c}` with `α_q(r) = (κ/2) r²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IssCertificate {
    /// Sampled maximum of `‖∇V‖` over `Ω`.
    pub l_v: f64,
    /// Sampled maximum of the model mismatch `‖d‖` over `Ω`.
    pub d_max: f64,
    /// Minimum of `‖x‖` over sampled points of `∂Ω`.
    pub boundary_min_norm: f64,
    pub alpha_q_gain: f64,
    /// `boundary_min_norm − sqrt(2 L_V d_max / κ)`.
    pub margin: f64,
    pub holds: bool,
    pub interior_samples: usize,
    pub boundary_samples: usize,
    pub requested_samples: usize,
}

/// Samples `Ω` and `∂Ω` to estimate `L_V`, `d_max` and the ISS margin.
///
/// `samples` boundary points are requested; each also yields one interior
/// point on the same ray at radius `r·u^{1/n}`.
pub fn iss_margin(snap: &Snapshot, c: f64, samples: usize, kappa: f64, seed: u64) -> Result<IssCertificate> {
    if !(c > 0.0) {
        return Err(Error::InvalidParameter(format!("level c must be positive, got {c}")));
    }
    if !(kappa > 0.0) {
        return Err(Error::InvalidParameter(format!("kappa must be positive, got {kappa}")));
    }
    let spec = &snap.spec;
    let n = spec.n;
    let boundary = sample_level_surface(|x| snap.lyap.value(x), &spec.state_box, c, samples, seed);
    if boundary.is_empty() {
        return Err(Error::Empty(format!("no boundary points of the level set found from {samples} requested")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1550);
    let mut points: Vec<Vec<f64>> = boundary.iter().map(|(x, _, _)| x.clone()).collect();
    let mut interior = 0;
    for (_, dir, r) in &boundary {
        let s = r * rng.random::<f64>().powf(1.0 / n as f64);
        let x: Vec<f64> = dir.iter().map(|d| d * s).collect();
        if snap.lyap.value(&x) <= c {
            points.push(x);
            interior += 1;
        }
    }
    let stats: Result<Vec<(f64, f64)>> = points
        .par_iter()
        .map(|x| {
            let (_, g) = snap.lyap.value_and_grad(x);
            let d = snap.disturbance(spec, x)?;
            Ok((norm2(&g), norm2(&d)))
        })
        .collect();
    let stats = stats?;
    let l_v = stats.iter().map(|s| s.0).fold(0.0, f64::max);
    let d_max = stats.iter().map(|s| s.1).fold(0.0, f64::max);
    let boundary_min_norm = boundary.iter().map(|(x, _, _)| norm2(x)).fold(f64::INFINITY, f64::min);
    let margin = boundary_min_norm - iss_threshold(l_v * d_max, kappa);
    Ok(IssCertificate {
        l_v,
        d_max,
        boundary_min_norm,
        alpha_q_gain: kappa / 2.0,
        margin,
        holds: margin >= 0.0,
        interior_samples: interior,
        boundary_samples: boundary.len(),
        requested_samples: samples,
    })
}

/// `α_q⁻¹(δ) = sqrt(2δ/κ)`.
pub fn iss_threshold(delta: f64, kappa: f64) -> f64 {
    (2.0 * delta.max(0.0) / kappa).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViolationBound {
    /// `max [V̇̂ + κ‖x‖²]` over mesh points in `{V ≤ c}`, clamped at 0.
    pub delta_prime: f64,
    pub bounded: bool,
}

/// Worst decrease violation inside `{V ≤ c}` and whether the boundary still
/// dominates `α_q⁻¹(δ + δ′)`, with `δ = L_V·d_max` from the certificate.
pub fn violation_bound(mesh: &Mesh, c: f64, kappa: f64, cert: &IssCertificate) -> Result<ViolationBound> {
    if mesh.v_values.len() != mesh.len() || mesh.vdot_values.len() != mesh.len() {
        return Err(Error::Shape("mesh values are not populated".into()));
    }
    let delta_prime = mesh
        .points
        .iter()
        .zip(mesh.v_values.iter().zip(&mesh.vdot_values))
        .filter(|(_, (v, _))| **v <= c)
        .map(|(x, (_, vd))| vd + kappa * dot(x, x))
        .fold(0.0, f64::max);
    let delta = cert.l_v * cert.d_max;
    Ok(ViolationBound { delta_prime, bounded: cert.boundary_min_norm >= iss_threshold(delta + delta_prime, kappa) })
}

/// A true-plant rollout started on `{V = c}`.
#[derive(Clone, Debug)]
pub struct BoundaryRollout {
    pub x0: Vec<f64>,
    pub trajectory: Trajectory,
    pub max_v: f64,
    /// `V ≤ c + slack` along the whole run.
    pub stayed: bool,
    pub converged: bool,
}

/// Rolls out `count` boundary points of `{V ≤ c}` under `policy` on the
/// plant `plant` (which may differ from the one the snapshot was trained on).
pub fn boundary_rollouts<P: Policy + ?Sized>(
    snap: &Snapshot,
    plant: &SystemSpec,
    policy: &P,
    c: f64,
    count: usize,
    slack: f64,
    opts: &RolloutOptions,
    seed: u64,
) -> Vec<BoundaryRollout> {
    let starts = sample_level_surface(|x| snap.lyap.value(x), &snap.spec.state_box, c, count, seed);
    let opts = RolloutOptions { stop_on_exit: false, ..opts.clone() };
    starts
        .par_iter()
        .map(|(x0, _, _)| {
            let mut states = vec![x0.clone()];
            let mut inputs = Vec::new();
            let status = simulate(plant, Model::True, policy, x0, &opts, |_, _, u, next| {
                inputs.push(u.to_vec());
                states.push(next.to_vec());
            });
            let max_v = states.iter().map(|x| snap.lyap.value(x)).fold(f64::NEG_INFINITY, f64::max);
            let trajectory =
                Trajectory { t0: 0.0, dt: opts.dt, states, inputs, left_box: status.left_box, converged: status.converged };
            BoundaryRollout { x0: x0.clone(), trajectory, max_v, stayed: max_v <= c + slack, converged: status.converged }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::make_system;
    use std::collections::BTreeMap;

    fn unit_box(n: usize) -> StateBox {
        StateBox { lo: vec![0.0; n], hi: vec![1.0; n] }
    }

    #[test]
    fn two_by_two_mesh() {
        let m = build_mesh_in_box(&unit_box(2), &[2, 2]).unwrap();
        assert_eq!(m.points, vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]]);
        assert_eq!(m.tau, 1.0);
        assert!(m.on_boundary.iter().all(|&b| b));
    }

    #[test]
    fn benchmark_mesh_sizes() {
        let p = make_system("pendulum", &BTreeMap::new()).unwrap();
        assert_eq!(build_mesh(&p, &[100, 100]).unwrap().len(), 10_000);
        let s = make_system("strict_feedback", &BTreeMap::new()).unwrap();
        let m = build_mesh(&s, &[25, 25, 25]).unwrap();
        assert_eq!(m.len(), 15_625);
        assert!((m.tau - 4.0 / 24.0).abs() < 1e-15);
        assert!(build_mesh(&p, &[1, 5]).is_err());
        assert!(build_mesh(&p, &[5]).is_err());
    }

    #[test]
    fn interior_flag_and_order() {
        let m = build_mesh_in_box(&StateBox::symmetric(&[1.0, 1.0]), &[3, 3]).unwrap();
        assert_eq!(m.points[4], vec![0.0, 0.0]);
        assert_eq!(m.on_boundary.iter().filter(|b| !**b).count(), 1);
        for w in m.points.windows(2) {
            assert!(w[0] < w[1]);
        }
    }

    fn quadratic_mesh(kappa_ok: bool) -> Mesh {
        let mut m = build_mesh_in_box(&StateBox::symmetric(&[2.0, 2.0]), &[5, 5]).unwrap();
        m.evaluate(|x| {
            let r = dot(x, x);
            Ok((r, if kappa_ok { -r } else { r + 1.0 }))
        })
        .unwrap();
        m.labels = vec![Label::FiStable; m.len()];
        m
    }

    #[test]
    fn all_violating_gives_zero() {
        let m = quadratic_mesh(false);
        assert_eq!(level_from_values(&m, 0.1).unwrap(), 0.0);
        assert_eq!(roa_ratios(&m, 0.0).ratio_estimated, 0.0);
    }

    #[test]
    fn boundary_faces_cap_the_level() {
        let m = quadratic_mesh(true);
        // Closest face points sit at ‖x‖² = 4.
        assert_eq!(level_from_values(&m, 0.1).unwrap(), 4.0f64.next_down());
        let r = roa_ratios(&m, 4.0f64.next_down());
        assert_eq!(r.ratio_estimated, 100.0 * 9.0 / 25.0);
    }

    #[test]
    fn ratios() {
        let mut m = build_mesh_in_box(&unit_box(2), &[2, 2]).unwrap();
        m.labels = vec![Label::Stable, Label::FiStable, Label::Unstable, Label::Unknown];
        m.v_values = vec![0.0; 4];
        let r = roa_ratios(&m, 0.0);
        assert_eq!((r.ratio_true, r.ratio_fi, r.ratio_estimated), (50.0, 25.0, 0.0));
        m.labels = vec![Label::FiStable; 4];
        assert_eq!(roa_ratios(&m, 0.0).ratio_true, 100.0);
    }

    #[test]
    fn unpopulated_mesh_is_an_error() {
        let m = build_mesh_in_box(&unit_box(2), &[2, 2]).unwrap();
        assert!(level_from_values(&m, 0.1).is_err());
    }

    #[test]
    fn iss_threshold_sphere_case() {
        let t = iss_threshold(2.0 * 0.01, 0.1);
        assert!((t - 0.632_455_532_033_675_9).abs() < 1e-12);
        assert!((1.0 - t - 0.367_544_467_966_324_1).abs() < 1e-12);
        assert!(1.0 - iss_threshold(2.0 * 10.0, 0.1) < 0.0);
    }

    #[test]
    fn level_surface_of_a_sphere() {
        let pts = sample_level_surface(|x| dot(x, x), &StateBox::symmetric(&[2.0, 2.0, 2.0]), 1.0, 50, 3);
        assert_eq!(pts.len(), 50);
        for (x, _, r) in pts {
            assert!((dot(&x, &x) - 1.0).abs() <= 1e-6);
            assert!(dot(&x, &x) <= 1.0);
            assert!((r - 1.0).abs() < 1e-6);
        }
        // The level lies outside the box: no points.
        assert!(sample_level_surface(|x| dot(x, x), &StateBox::symmetric(&[0.5, 0.5]), 1.0, 10, 3).is_empty());
    }
}
