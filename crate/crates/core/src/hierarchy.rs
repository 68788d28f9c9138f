//! Layered state, inter-layer mappings and their stability metrics.
//!
//! The state is an `n x d` matrix whose row `l` is the stream of layer `l`
//! (0-based here, layer `l + 1` in user-facing numbering). Three mappings
//! govern each propagation step: a `1 x n` read-out `h_pre`, a `1 x n`
//! write-back `h_post` and an `n x n` residual mixer `h_res`. Stability of
//! a stack of residual mixers is measured with the Amax gain (max absolute
//! row sum forward, max absolute column sum backward).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

/// Default convergence tolerance for [`project_doubly_stochastic`].
pub const DEFAULT_PROJECTION_TOL: f64 = 1e-9;
/// Default sweep budget for [`project_doubly_stochastic`].
pub const DEFAULT_PROJECTION_MAX_ITER: usize = 1000;
/// Entries below this value are raised to it before Sinkhorn sweeps.
pub const PROJECTION_FLOOR: f64 = 1e-12;

/// Literal per-layer sampling temperatures used by the reference layer
/// configuration, fastest layer first. Not derived from [`layer_temperature`].
pub const CONFIGURED_TEMPERATURES: [f64; 4] = [0.1, 0.3, 0.5, 0.7];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HierarchyError {
    #[error("shape mismatch in {what}: expected {expected:?}, found {found:?}")]
    Shape {
        what: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("domain error: {0}")]
    Domain(String),
}

fn shape_err(what: &'static str, expected: (usize, usize), found: (usize, usize)) -> HierarchyError {
    HierarchyError::Shape {
        what,
        expected,
        found,
    }
}

/// The `n x d` layered state `x_t` at step `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayeredState {
    rows: Matrix,
    step: u64,
}

impl LayeredState {
    pub fn new(rows: Matrix, step: u64) -> Result<Self, HierarchyError> {
        if rows.rows() == 0 || rows.cols() == 0 {
            return Err(HierarchyError::Domain(
                "layered state needs n >= 1 and d >= 1".into(),
            ));
        }
        if !rows.is_finite() {
            return Err(HierarchyError::NonFinite("layered state"));
        }
        Ok(Self { rows, step })
    }

    pub fn zeros(n: usize, d: usize) -> Result<Self, HierarchyError> {
        Self::new(Matrix::zeros(n, d), 0)
    }

    pub fn layers(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn matrix(&self) -> &Matrix {
        &self.rows
    }

    pub fn row(&self, layer: usize) -> &[f64] {
        self.rows.row(layer)
    }

    pub fn with_step(mut self, step: u64) -> Self {
        self.step = step;
        self
    }

    /// Replaces one layer row. Non-finite rows are rejected.
    pub fn set_row(&mut self, layer: usize, values: &[f64]) -> Result<(), HierarchyError> {
        if values.len() != self.dim() {
            return Err(shape_err("state row", (1, self.dim()), (1, values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(HierarchyError::NonFinite("state row"));
        }
        self.rows.row_mut(layer).copy_from_slice(values);
        Ok(())
    }
}

/// Gating scalars, dynamic projections and static biases for one layer's
/// mappings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingParams {
    pub alpha_pre: f64,
    pub alpha_post: f64,
    pub alpha_res: f64,
    pub theta_pre: Vec<f64>,
    pub theta_post: Vec<f64>,
    pub theta_res: Matrix,
    pub b_pre: Vec<f64>,
    pub b_post: Vec<f64>,
    pub b_res: Matrix,
}

impl MappingParams {
    /// Gating off everywhere: uniform `1/n` read-out, write-back into the
    /// first stream only, identity residual.
    pub fn static_identity(n: usize, d: usize) -> Self {
        let mut b_post = vec![0.0; n];
        b_post[0] = 1.0;
        Self {
            alpha_pre: 0.0,
            alpha_post: 0.0,
            alpha_res: 0.0,
            theta_pre: vec![0.0; d],
            theta_post: vec![0.0; d],
            theta_res: Matrix::zeros(n, d),
            b_pre: vec![1.0 / n as f64; n],
            b_post,
            b_res: Matrix::identity(n),
        }
    }

    pub fn check(&self, n: usize, d: usize) -> Result<(), HierarchyError> {
        let vec_shape = |what, v: &Vec<f64>, len| {
            if v.len() == len {
                Ok(())
            } else {
                Err(shape_err(what, (1, len), (1, v.len())))
            }
        };
        vec_shape("theta_pre", &self.theta_pre, d)?;
        vec_shape("theta_post", &self.theta_post, d)?;
        vec_shape("b_pre", &self.b_pre, n)?;
        vec_shape("b_post", &self.b_post, n)?;
        if self.theta_res.shape() != (n, d) {
            return Err(shape_err("theta_res", (n, d), self.theta_res.shape()));
        }
        if self.b_res.shape() != (n, n) {
            return Err(shape_err("b_res", (n, n), self.b_res.shape()));
        }
        let scalars_finite = [self.alpha_pre, self.alpha_post, self.alpha_res]
            .iter()
            .all(|v| v.is_finite());
        let all_finite = scalars_finite
            && self
                .theta_pre
                .iter()
                .chain(&self.theta_post)
                .chain(&self.b_pre)
                .chain(&self.b_post)
                .all(|v| v.is_finite())
            && self.theta_res.is_finite()
            && self.b_res.is_finite();
        if !all_finite {
            return Err(HierarchyError::NonFinite("mapping params"));
        }
        Ok(())
    }
}

/// The `(h_pre, h_post, h_res)` triple for one propagation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingSet {
    pub h_pre: Vec<f64>,
    pub h_post: Vec<f64>,
    pub h_res: Matrix,
}

impl MappingSet {
    pub fn new(h_pre: Vec<f64>, h_post: Vec<f64>, h_res: Matrix) -> Result<Self, HierarchyError> {
        let n = h_res.rows();
        if !h_res.is_square() || n == 0 {
            return Err(shape_err("h_res", (n, n), h_res.shape()));
        }
        if h_pre.len() != n {
            return Err(shape_err("h_pre", (1, n), (1, h_pre.len())));
        }
        if h_post.len() != n {
            return Err(shape_err("h_post", (1, n), (1, h_post.len())));
        }
        if !h_res.is_finite() || h_pre.iter().chain(&h_post).any(|v| !v.is_finite()) {
            return Err(HierarchyError::NonFinite("mapping set"));
        }
        Ok(Self {
            h_pre,
            h_post,
            h_res,
        })
    }

    pub fn layers(&self) -> usize {
        self.h_res.rows()
    }

    /// Replaces `h_res` with its doubly stochastic projection.
    pub fn constrained(mut self, tol: f64, max_iter: usize) -> Result<(Self, bool), HierarchyError> {
        let projected = project_doubly_stochastic(&self.h_res, tol, max_iter)?;
        self.h_res = projected.matrix;
        Ok((self, projected.converged))
    }

    /// True when `h_res` is nonnegative with every row and column sum in
    /// `[1 - tol, 1 + tol]`.
    pub fn is_doubly_stochastic(&self, tol: f64) -> bool {
        is_doubly_stochastic(&self.h_res, tol)
    }
}

pub fn is_doubly_stochastic(h: &Matrix, tol: f64) -> bool {
    h.is_square()
        && h.as_slice().iter().all(|&v| v >= 0.0)
        && h.row_sums()
            .iter()
            .chain(h.col_sums().iter())
            .all(|s| (s - 1.0).abs() <= tol)
}

/// Per-layer perturbation magnitudes `eps_0 .. eps_{L-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ErrorVector(Vec<f64>);

impl ErrorVector {
    pub fn new(eps: Vec<f64>) -> Result<Self, HierarchyError> {
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(HierarchyError::NonFinite("error vector"));
        }
        Ok(Self(eps))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// The state transform `pi` applied to the read-out vector during
/// propagation. Must map a `d`-vector to a `d`-vector.
pub trait StreamPolicy {
    fn apply(&self, input: &[f64]) -> Vec<f64>;
}

impl<F> StreamPolicy for F
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    fn apply(&self, input: &[f64]) -> Vec<f64> {
        self(input)
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Rescales every row to zero mean and unit (population) variance across
/// the feature dimension. Zero-variance rows become all zeros.
pub fn normalize_state(x: &LayeredState) -> LayeredState {
    let d = x.dim() as f64;
    let mut out = x.rows.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let sd = var.sqrt();
        if sd == 0.0 || !sd.is_normal() {
            row.iter_mut().for_each(|v| *v = 0.0);
        } else {
            row.iter_mut().for_each(|v| *v = (*v - mean) / sd);
        }
    }
    LayeredState {
        rows: out,
        step: x.step,
    }
}

/// Synthesizes the three mappings from the (internally normalized) state:
/// `H = alpha * sigmoid(theta * x~^T) + b` for each of pre, post and res.
pub fn compute_mappings(x: &LayeredState, p: &MappingParams) -> Result<MappingSet, HierarchyError> {
    let (n, d) = (x.layers(), x.dim());
    p.check(n, d)?;
    let xn = normalize_state(x);
    let xt = xn.rows.transpose(); // d x n

    let gate_vec = |alpha: f64, theta: &[f64], bias: &[f64]| -> Vec<f64> {
        let theta = Matrix::from_rows(vec![theta.to_vec()]).expect("single row");
        let proj = theta.matmul(&xt); // 1 x n
        proj.row(0)
            .iter()
            .zip(bias)
            .map(|(&z, &b)| alpha * sigmoid(z) + b)
            .collect()
    };

    let h_pre = gate_vec(p.alpha_pre, &p.theta_pre, &p.b_pre);
    let h_post = gate_vec(p.alpha_post, &p.theta_post, &p.b_post);
    let dynamic = p.theta_res.matmul(&xt); // n x n
    let h_res = Matrix::from_fn(n, n, |i, j| p.alpha_res * sigmoid(dynamic[(i, j)]) + p.b_res[(i, j)]);
    MappingSet::new(h_pre, h_post, h_res)
}

/// One propagation step: `x' = H_res x + H_post^T pi(H_pre x)`.
pub fn propagate_layer(
    x: &LayeredState,
    m: &MappingSet,
    policy: &dyn StreamPolicy,
) -> Result<LayeredState, HierarchyError> {
    let (n, d) = (x.layers(), x.dim());
    if m.layers() != n {
        return Err(shape_err("mapping set", (n, n), m.h_res.shape()));
    }
    let read_out: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| m.h_pre[i] * x.rows[(i, j)]).sum())
        .collect();
    let written = policy.apply(&read_out);
    if written.len() != d {
        return Err(shape_err("policy output", (1, d), (1, written.len())));
    }
    let mut next = m.h_res.matmul(&x.rows);
    for i in 0..n {
        let w = m.h_post[i];
        for (o, v) in next.row_mut(i).iter_mut().zip(&written) {
            *o += w * v;
        }
    }
    if !next.is_finite() {
        return Err(HierarchyError::NonFinite("propagated state"));
    }
    Ok(LayeredState {
        rows: next,
        step: x.step,
    })
}

/// Ordered product of the residual mappings for layers `from..to`, with the
/// deepest matrix applied last: `H[to-1] * ... * H[from]`. An empty range is
/// the identity.
pub fn composite_mapping(res_list: &[Matrix], from: usize, to: usize) -> Result<Matrix, HierarchyError> {
    if from > to || to > res_list.len() {
        return Err(HierarchyError::Domain(format!(
            "layer range {from}..{to} outside 0..{}",
            res_list.len()
        )));
    }
    let n = match res_list.first() {
        Some(h) => h.rows(),
        None => return Ok(Matrix::identity(0)),
    };
    let mut acc = Matrix::identity(n);
    for h in &res_list[from..to] {
        if h.shape() != (n, n) {
            return Err(shape_err("residual mapping", (n, n), h.shape()));
        }
        acc = h.matmul(&acc);
    }
    Ok(acc)
}

/// Amax gain: worst-case absolute row sum (forward) and column sum (backward).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gain {
    pub fwd: f64,
    pub bwd: f64,
}

pub fn amax_gain(h: &Matrix) -> Result<Gain, HierarchyError> {
    if h.is_empty() {
        return Err(HierarchyError::Domain("amax gain of an empty matrix".into()));
    }
    let abs = h.map(f64::abs);
    let fwd = abs.row_sums().into_iter().fold(f64::MIN, f64::max);
    let bwd = abs.col_sums().into_iter().fold(f64::MIN, f64::max);
    Ok(Gain { fwd, bwd })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub matrix: Matrix,
    pub converged: bool,
    pub sweeps: usize,
}

/// Sinkhorn projection onto the doubly stochastic matrices.
///
/// Entries are replaced by their absolute values and floored at
/// [`PROJECTION_FLOOR`], then rows and columns are normalized alternately
/// until every row and column sum is within `tol` of 1 or `max_iter` sweeps
/// have run.
pub fn project_doubly_stochastic(h: &Matrix, tol: f64, max_iter: usize) -> Result<Projection, HierarchyError> {
    if h.rows() == 0 {
        return Err(HierarchyError::Domain("projection of a 0x0 matrix".into()));
    }
    if !h.is_square() {
        return Err(shape_err("projection input", (h.rows(), h.rows()), h.shape()));
    }
    if !(tol > 0.0) || max_iter == 0 {
        return Err(HierarchyError::Domain("projection needs tol > 0 and max_iter >= 1".into()));
    }
    if !h.is_finite() {
        return Err(HierarchyError::NonFinite("projection input"));
    }
    let n = h.rows();
    let mut m = h.map(|v| v.abs().max(PROJECTION_FLOOR));
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < max_iter {
        sweeps += 1;
        for i in 0..n {
            let s: f64 = m.row(i).iter().sum();
            m.row_mut(i).iter_mut().for_each(|v| *v /= s);
        }
        let cols = m.col_sums();
        for i in 0..n {
            for (v, s) in m.row_mut(i).iter_mut().zip(&cols) {
                *v /= s;
            }
        }
        if m.row_sums().iter().all(|s| (s - 1.0).abs() <= tol) {
            converged = true;
            break;
        }
    }
    Ok(Projection {
        matrix: m,
        converged,
        sweeps,
    })
}

/// Scalar error at the output layer:
/// `gain(H_L..H_1) * eps_0 + sum_{i=1}^{L-1} gain(H_L..H_{i+1}) * eps_i`,
/// with `gain` the forward Amax gain and `res_list[k]` holding `H_{k+1}`.
pub fn propagate_error(eps: &ErrorVector, res_list: &[Matrix]) -> Result<f64, HierarchyError> {
    let depth = res_list.len();
    if eps.len() != depth {
        return Err(HierarchyError::Domain(format!(
            "{} error terms for {} residual mappings",
            eps.len(),
            depth
        )));
    }
    if depth == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, &e) in eps.as_slice().iter().enumerate() {
        let chain = composite_mapping(res_list, i, depth)?;
        total += amax_gain(&chain)?.fwd * e;
    }
    Ok(total)
}

/// `T_l = t_base + gamma * ln(tau_l / tau_1)` for 1-based `layer`.
pub fn layer_temperature(layer: usize, tau: &[f64], t_base: f64, gamma: f64) -> Result<f64, HierarchyError> {
    if tau.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(HierarchyError::Domain("time scales must be positive and finite".into()));
    }
    if tau.windows(2).any(|w| w[1] <= w[0]) {
        return Err(HierarchyError::Domain("time scales must be strictly increasing".into()));
    }
    if layer == 0 || layer > tau.len() {
        return Err(HierarchyError::Domain(format!(
            "layer {layer} outside 1..={}",
            tau.len()
        )));
    }
    Ok(t_base + gamma * (tau[layer - 1] / tau[0]).ln())
}
