use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{tanh, GradTape, Var};
use crate::error::{Error, Result};
use crate::linalg::{dot, Mat};

/// Positivity offset of the constrained weight blocks.
pub const EPS_W: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

/// Fully connected network layout.
///
/// `layer_dims[0]` is the input width; every following entry is the output
/// width of one layer. A constrained net builds each weight matrix as
/// `[G₁ᵀG₁ + ε_W·I ; G₂]`, which has full column rank, so the map has a
/// trivial null space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNetSpec {
    pub layer_dims: Vec<usize>,
    pub activations: Vec<Activation>,
    pub bias: Vec<bool>,
    pub constrained: bool,
}

impl DenseNetSpec {
    /// Unconstrained, bias-free net.
    pub fn plain(layer_dims: Vec<usize>, activations: Vec<Activation>) -> Self {
        let layers = activations.len();
        DenseNetSpec { layer_dims, activations, bias: vec![false; layers], constrained: false }
    }

    pub fn constrained(layer_dims: Vec<usize>, activations: Vec<Activation>) -> Self {
        let layers = activations.len();
        DenseNetSpec { layer_dims, activations, bias: vec![false; layers], constrained: true }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated spec has layers")
    }

    pub fn layers(&self) -> usize {
        self.activations.len()
    }

    pub fn validate(&self) -> Result<()> {
        let layers = self.layer_dims.len().saturating_sub(1);
        if layers == 0 {
            return Err(Error::InvalidNet("need an input width and at least one layer".into()));
        }
        if self.activations.len() != layers || self.bias.len() != layers {
            return Err(Error::InvalidNet(format!(
                "{layers} layers but {} activations / {} bias flags",
                self.activations.len(),
                self.bias.len()
            )));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::InvalidNet("zero-width layer".into()));
        }
        if self.constrained {
            if self.layer_dims.windows(2).any(|w| w[1] < w[0]) {
                return Err(Error::InvalidNet(format!("constrained dims must not decrease: {:?}", self.layer_dims)));
            }
            if self.bias.iter().any(|b| *b) {
                return Err(Error::InvalidNet("constrained layers carry no bias".into()));
            }
        }
        Ok(())
    }

    /// Parameter names and shapes in creation order.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let mut out = Vec::new();
        for l in 0..self.layers() {
            let (d_in, d_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
            if self.constrained {
                out.push((format!("G1_{l}"), (d_in, d_in)));
                if d_out > d_in {
                    out.push((format!("G2_{l}"), (d_out - d_in, d_in)));
                }
            } else {
                out.push((format!("W{l}"), (d_out, d_in)));
                if self.bias[l] {
                    out.push((format!("b{l}"), (d_out, 1)));
                }
            }
        }
        out
    }
}

/// Named parameter arrays with sorted (deterministic) iteration order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> Option<Mat> {
        self.entries.insert(name.into(), value)
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.entries.get_mut(name)
    }

    pub fn expect(&self, name: &str) -> &Mat {
        self.entries.get(name).unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(Mat::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Mat::is_finite)
    }

    /// A zero-filled store with the same names and shapes.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore { entries: self.entries.iter().map(|(k, v)| (k.clone(), Mat::zeros(v.rows(), v.cols()))).collect() }
    }

    /// Copies every entry into `target` under `prefix`.
    pub fn export_into(&self, prefix: &str, target: &mut BTreeMap<String, Mat>) {
        for (k, v) in &self.entries {
            target.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Collects entries named `prefix*` from `source`, stripping the prefix.
    pub fn import_from(prefix: &str, source: &BTreeMap<String, Mat>) -> ParamStore {
        let entries = source
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|rest| (rest.to_string(), v.clone())))
            .collect();
        ParamStore { entries }
    }

    /// Hash of names, shapes and exact bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (k, v) in &self.entries {
            k.hash(&mut h);
            v.shape().hash(&mut h);
            for x in v.as_slice() {
                x.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Creates tape leaves (or constants) for every entry.
    pub fn to_tape(&self, tape: &mut GradTape, trainable: bool) -> ParamVars {
        ParamVars(
            self.entries
                .iter()
                .map(|(k, v)| {
                    let var = if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) };
                    (k.clone(), var)
                })
                .collect(),
        )
    }
}

/// Tape handles for a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars(pub BTreeMap<String, Var>);

impl ParamVars {
    pub fn var(&self, name: &str) -> Var {
        *self.0.get(name).unwrap_or_else(|| panic!("missing parameter var `{name}`"))
    }

    /// Gathers gradients for every entry into a store; missing gradients are zero.
    pub fn collect_grads(&self, tape: &GradTape, grads: &super::tape::Grads) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, v) in &self.0 {
            let g = grads.get(*v).cloned().unwrap_or_else(|| {
                let (r, c) = tape.value(*v).shape();
                Mat::zeros(r, c)
            });
            out.insert(k.clone(), g);
        }
        out
    }
}

/// Uniform(−1/√fan_in, 1/√fan_in) initialization from a seeded ChaCha stream.
pub fn init_params(spec: &DenseNetSpec, seed: u64) -> Result<ParamStore> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, (r, c)) in spec.param_shapes() {
        let fan_in = if name.starts_with('b') { spec.layer_dims[name[1..].parse::<usize>().unwrap_or(0)] } else { c };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..r * c).map(|_| rng.random_range(-bound..bound)).collect();
        store.insert(name, Mat::from_vec(r, c, data));
    }
    Ok(store)
}

/// Effective (assembled) weight of layer `l`.
pub fn assembled_weight(spec: &DenseNetSpec, params: &ParamStore, l: usize) -> Mat {
    if spec.constrained {
        let g1 = params.expect(&format!("G1_{l}"));
        let mut top = g1.t_matmul(g1);
        for i in 0..top.rows() {
            top[(i, i)] += EPS_W;
        }
        match params.get(&format!("G2_{l}")) {
            Some(g2) => top.vstack(g2),
            None => top,
        }
    } else {
        params.expect(&format!("W{l}")).clone()
    }
}

/// Builds assembled weights (and biases) on a tape.
pub fn tape_layers(spec: &DenseNetSpec, tape: &mut GradTape, vars: &ParamVars) -> Vec<(Var, Option<Var>)> {
    (0..spec.layers())
        .map(|l| {
            if spec.constrained {
                let g1 = vars.var(&format!("G1_{l}"));
                let g1t = tape.transpose(g1);
                let gram = tape.matmul(g1t, g1);
                let d = tape.value(g1).cols();
                let eps = tape.constant(Mat::identity(d).scale(EPS_W));
                let top = tape.add(gram, eps);
                let w = match vars.0.get(&format!("G2_{l}")) {
                    Some(g2) => tape.vstack(top, *g2),
                    None => top,
                };
                (w, None)
            } else {
                let b = if spec.bias[l] { Some(vars.var(&format!("b{l}"))) } else { None };
                (vars.var(&format!("W{l}")), b)
            }
        })
        .collect()
}

/// Applies the net to a batch `x` (input_dim × B) given tape layers.
pub fn tape_apply(spec: &DenseNetSpec, tape: &mut GradTape, layers: &[(Var, Option<Var>)], x: Var) -> Var {
    let batch = tape.value(x).cols();
    let mut h = x;
    for (l, (w, b)) in layers.iter().enumerate() {
        let mut z = tape.matmul(*w, h);
        if let Some(b) = b {
            let ones = tape.constant(Mat::filled(1, batch, 1.0));
            let bb = tape.matmul(*b, ones);
            z = tape.add(z, bb);
        }
        h = match spec.activations[l] {
            Activation::Tanh => tape.tanh(z),
            Activation::Identity => z,
        };
    }
    h
}

/// Snapshot of a net with assembled weights, for fast tape-free evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenNet {
    layers: Vec<(Mat, Option<Vec<f64>>, Activation)>,
}

impl FrozenNet {
    pub fn new(spec: &DenseNetSpec, params: &ParamStore) -> Self {
        let layers = (0..spec.layers())
            .map(|l| {
                let w = assembled_weight(spec, params, l);
                let b = if spec.bias[l] { Some(params.expect(&format!("b{l}")).as_slice().to_vec()) } else { None };
                (w, b, spec.activations[l])
            })
            .collect();
        FrozenNet { layers }
    }

    pub fn weights(&self) -> impl Iterator<Item = (&Mat, Option<&Vec<f64>>, Activation)> {
        self.layers.iter().map(|(w, b, a)| (w, b.as_ref(), *a))
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        self.eval_into(x, &mut out);
        out
    }

    /// Like [`FrozenNet::eval`], writing into `out` and using stack scratch
    /// space for layers up to 128 wide.
    pub fn eval_into(&self, x: &[f64], out: &mut Vec<f64>) {
        const CAP: usize = 128;
        if self.layers.iter().any(|(w, _, _)| w.rows() > CAP) || x.len() > CAP {
            return self.eval_heap(x, out);
        }
        let mut bufs = [[0.0; CAP]; 2];
        bufs[0][..x.len()].copy_from_slice(x);
        let mut width = x.len();
        let mut cur = 0;
        for (w, bias, act) in &self.layers {
            let [first, second] = &mut bufs;
            let (src, dst) = if cur == 0 { (&*first, second) } else { (&*second, first) };
            let src = &src[..width];
            let rows = w.rows();
            for (i, d) in dst[..rows].iter_mut().enumerate() {
                let mut z = dot(w.row(i), src);
                if let Some(bias) = bias {
                    z += bias[i];
                }
                *d = if *act == Activation::Tanh { tanh(z) } else { z };
            }
            cur = 1 - cur;
            width = rows;
        }
        out.clear();
        out.extend_from_slice(&bufs[cur][..width]);
    }

    fn eval_heap(&self, x: &[f64], out: &mut Vec<f64>) {
        let mut h = x.to_vec();
        for (w, b, act) in &self.layers {
            let mut z = w.matvec(&h);
            if let Some(b) = b {
                for (zi, bi) in z.iter_mut().zip(b) {
                    *zi += bi;
                }
            }
            if *act == Activation::Tanh {
                for zi in &mut z {
                    *zi = tanh(*zi);
                }
            }
            h = z;
        }
        *out = h;
    }

    /// Output and Jacobian (out × in).
    pub fn eval_jacobian(&self, x: &[f64]) -> (Vec<f64>, Mat) {
        let mut h = x.to_vec();
        let mut jac = Mat::identity(x.len());
        for (w, b, act) in &self.layers {
            let mut z = w.matvec(&h);
            if let Some(b) = b {
                for (zi, bi) in z.iter_mut().zip(b) {
                    *zi += bi;
                }
            }
            jac = w.matmul(&jac);
            if *act == Activation::Tanh {
                for (i, zi) in z.iter_mut().enumerate() {
                    *zi = tanh(*zi);
                    let d = 1.0 - *zi * *zi;
                    for j in 0..jac.cols() {
                        jac[(i, j)] *= d;
                    }
                }
            }
            h = z;
        }
        (h, jac)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wrt {
    Inputs,
    Params,
}

/// Gradient result of [`NetTape::grad`].
#[derive(Clone, Debug, PartialEq)]
pub enum NetGrad {
    Inputs(Vec<f64>),
    Params(ParamStore),
}

/// A single-sample forward pass recorded on a tape.
pub struct NetTape {
    pub tape: GradTape,
    pub input: Var,
    pub output: Var,
    pub params: ParamVars,
}

impl NetTape {
    pub fn grad(&self, wrt: Wrt) -> Result<NetGrad> {
        let grads = self.tape.backward(self.output)?;
        Ok(match wrt {
            Wrt::Inputs => NetGrad::Inputs(
                grads.get(self.input).map(|g| g.as_slice().to_vec()).unwrap_or_else(|| vec![0.0; self.tape.value(self.input).len()]),
            ),
            Wrt::Params => NetGrad::Params(self.params.collect_grads(&self.tape, &grads)),
        })
    }
}

/// Evaluates the net on one input while recording a tape.
pub fn forward(spec: &DenseNetSpec, params: &ParamStore, x: &[f64]) -> Result<(Vec<f64>, NetTape)> {
    spec.validate()?;
    if x.len() != spec.input_dim() {
        return Err(Error::Shape(format!("net expects {} inputs, got {}", spec.input_dim(), x.len())));
    }
    let mut tape = GradTape::new();
    let vars = params.to_tape(&mut tape, true);
    let input = tape.leaf(Mat::col_vec(x));
    let layers = tape_layers(spec, &mut tape, &vars);
    let output = tape_apply(spec, &mut tape, &layers, input);
    let out = tape.value(output).as_slice().to_vec();
    Ok((out, NetTape { tape, input, output, params: vars }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tanh_net(dims: Vec<usize>, constrained: bool) -> DenseNetSpec {
        let mut acts = vec![Activation::Tanh; dims.len() - 1];
        if !constrained {
            *acts.last_mut().unwrap() = Activation::Identity;
        }
        DenseNetSpec { bias: vec![!constrained; acts.len()], activations: acts, layer_dims: dims, constrained }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let spec = tanh_net(vec![2, 16, 16, 1], false);
        let a = init_params(&spec, 7).unwrap();
        let b = init_params(&spec, 7).unwrap();
        let c = init_params(&spec, 8).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (name, m) in a.iter() {
            let fan_in = if name.starts_with('W') { m.cols() } else { spec.layer_dims[name[1..].parse::<usize>().unwrap()] };
            let bound = 1.0 / (fan_in as f64).sqrt();
            assert!(m.as_slice().iter().all(|v| v.abs() <= bound), "{name}");
        }
    }

    #[test]
    fn constrained_blocks_have_expected_shapes() {
        let spec = DenseNetSpec::constrained(vec![2, 64], vec![Activation::Tanh]);
        let p = init_params(&spec, 0).unwrap();
        assert_eq!(p.expect("G1_0").shape(), (2, 2));
        assert_eq!(p.expect("G2_0").shape(), (62, 2));
        assert_eq!(assembled_weight(&spec, &p, 0).shape(), (64, 2));
    }

    #[test]
    fn spec_validation() {
        let bad = DenseNetSpec::constrained(vec![4, 2], vec![Activation::Tanh]);
        assert!(bad.validate().is_err());
        let mut biased = DenseNetSpec::constrained(vec![2, 4], vec![Activation::Tanh]);
        biased.bias[0] = true;
        assert!(biased.validate().is_err());
        let short = DenseNetSpec::plain(vec![2, 4, 1], vec![Activation::Tanh]);
        assert!(short.validate().is_err());
    }

    #[test]
    fn identity_layer_is_identity() {
        let spec = DenseNetSpec::plain(vec![3, 3], vec![Activation::Identity]);
        let mut p = ParamStore::new();
        p.insert("W0", Mat::identity(3));
        let (y, _) = forward(&spec, &p, &[0.5, -1.0, 2.0]).unwrap();
        assert_eq!(y, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn zero_blocks_leave_epsilon_diagonal() {
        let spec = DenseNetSpec::constrained(vec![2, 4], vec![Activation::Identity]);
        let mut p = ParamStore::new();
        p.insert("G1_0", Mat::zeros(2, 2));
        p.insert("G2_0", Mat::zeros(2, 2));
        let (y, _) = forward(&spec, &p, &[1.0, 0.0]).unwrap();
        assert_eq!(y, vec![1e-6, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn constrained_top_block_is_nonzero() {
        let spec = DenseNetSpec::constrained(vec![3, 8], vec![Activation::Identity]);
        let p = init_params(&spec, 3).unwrap();
        let w = assembled_weight(&spec, &p, 0);
        let y = w.matvec(&[0.2, -0.1, 0.4]);
        assert!(y[..3].iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let spec = tanh_net(vec![2, 4, 1], false);
        let p = init_params(&spec, 0).unwrap();
        assert!(forward(&spec, &p, &[1.0]).is_err());
    }

    #[test]
    fn frozen_net_matches_tape_and_jacobian_matches_fd() {
        for (spec, seed) in [(tanh_net(vec![3, 8, 8, 2], false), 1), (tanh_net(vec![3, 6, 6], true), 2)] {
            let p = init_params(&spec, seed).unwrap();
            let frozen = FrozenNet::new(&spec, &p);
            let x = [0.3, -0.2, 0.9];
            let (y, _) = forward(&spec, &p, &x).unwrap();
            let (y2, jac) = frozen.eval_jacobian(&x);
            for (a, b) in y.iter().zip(&y2) {
                assert!((a - b).abs() < 1e-14);
            }
            let h = 1e-6;
            for j in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[j] += h;
                xm[j] -= h;
                let (fp, fm) = (frozen.eval(&xp), frozen.eval(&xm));
                for i in 0..y.len() {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    assert!((fd - jac[(i, j)]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn scalar_net_gradients_match_fd() {
        let spec = tanh_net(vec![2, 5, 1], false);
        let p = init_params(&spec, 11).unwrap();
        let x = [0.4, -0.7];
        let (_, nt) = forward(&spec, &p, &x).unwrap();
        let NetGrad::Inputs(gx) = nt.grad(Wrt::Inputs).unwrap() else { unreachable!() };
        let NetGrad::Params(gp) = nt.grad(Wrt::Params).unwrap() else { unreachable!() };
        let h = 1e-6;
        let f = |p: &ParamStore, x: &[f64]| forward(&spec, p, x).unwrap().0[0];
        for j in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            assert!(((f(&p, &xp) - f(&p, &xm)) / (2.0 * h) - gx[j]).abs() < 1e-8);
        }
        for (name, g) in gp.iter() {
            for k in 0..g.len() {
                let mut pp = p.clone();
                let mut pm = p.clone();
                pp.get_mut(name).unwrap().as_mut_slice()[k] += h;
                pm.get_mut(name).unwrap().as_mut_slice()[k] -= h;
                let fd = (f(&pp, &x) - f(&pm, &x)) / (2.0 * h);
                assert!((fd - g.as_slice()[k]).abs() < 1e-8, "{name}[{k}]");
            }
        }
    }

    #[test]
    fn vector_output_has_no_gradient() {
        let spec = tanh_net(vec![2, 3], false);
        let p = init_params(&spec, 0).unwrap();
        let (_, nt) = forward(&spec, &p, &[0.1, 0.2]).unwrap();
        assert!(matches!(nt.grad(Wrt::Inputs), Err(Error::NonScalarRoot(3, 1))));
    }
}
