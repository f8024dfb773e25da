//! Primary capsules: a stack of GCN layers whose per-node outputs are
//! row-stacked into `k x d'` pose matrices, with degree-proportional
//! activations.

use rand::Rng;

use crate::autodiff::{stack, Tape, Tensor, Var};
use crate::data::Graph;
use crate::error::{Error, Result};

/// Capsules flowing between layers: `poses` is `[n, k, d']`, `activations` is `[n]`.
#[derive(Clone, Copy, Debug)]
pub struct CapsuleLayerState<'t> {
    pub poses: Var<'t>,
    pub activations: Var<'t>,
}

impl<'t> CapsuleLayerState<'t> {
    pub fn len(&self) -> usize {
        self.poses.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(k, d')` of each pose.
    pub fn pose_dims(&self) -> (usize, usize) {
        let s = self.poses.shape();
        (s[1], s[2])
    }
}

/// Glorot-uniform matrix of shape `[rows, cols]`.
pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect())
}

/// GCN filter matrices: the first maps `C -> d'`, the rest `d' -> d'`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GcnParams {
    pub thetas: Vec<Tensor>,
}

impl GcnParams {
    pub fn init(in_dim: usize, width: usize, layers: usize, rng: &mut impl Rng) -> Self {
        let thetas = (0..layers).map(|l| glorot(if l == 0 { in_dim } else { width }, width, rng)).collect();
        Self { thetas }
    }

    pub fn width(&self) -> usize {
        self.thetas[0].shape()[1]
    }
}

/// `D^-1/2 (A + I) D^-1/2` with `D` the degrees of `A + I`.
pub fn normalize_adjacency(g: &Graph) -> Tensor {
    let n = g.num_nodes();
    let inv_sqrt: Vec<f64> = g.degrees().iter().map(|&d| 1.0 / ((d + 1) as f64).sqrt()).collect();
    let mut out = Tensor::zeros(vec![n, n]);
    let data = out.data_mut();
    for i in 0..n {
        data[i * n + i] = inv_sqrt[i] * inv_sqrt[i];
    }
    for &(a, b) in g.edges() {
        let w = inv_sqrt[a] * inv_sqrt[b];
        data[a * n + b] = w;
        data[b * n + a] = w;
    }
    out
}

/// Runs every GCN layer with ReLU and returns `[X1, ..., Xk]`, each `[N, d']`.
pub fn gcn_forward<'t>(tape: &'t Tape, g: &Graph, thetas: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
    let first = thetas.first().ok_or_else(|| Error::Config("at least one GCN layer is required".into()))?;
    let rows = first.shape()[0];
    if rows != g.feature_dim() {
        return Err(Error::Config(format!(
            "node features have width {} but the first GCN layer expects {rows}",
            g.feature_dim()
        )));
    }
    let adj = tape.constant(normalize_adjacency(g));
    let mut x = tape.constant(g.node_features().clone());
    let mut layers = Vec::with_capacity(thetas.len());
    for theta in thetas {
        x = adj.matmul(x.matmul(*theta)).relu();
        layers.push(x);
    }
    Ok(layers)
}

/// `a_i = D_i / sum_j D_j`, or `1/N` for an edgeless graph, times `scale`
/// and capped at 1.
pub fn degree_activations(g: &Graph, scale: f64) -> Tensor {
    let deg = g.degrees();
    let total: usize = deg.iter().sum();
    let n = g.num_nodes();
    let values =
        if total == 0 { vec![1.0 / n as f64; n] } else { deg.iter().map(|&d| d as f64 / total as f64).collect() };
    Tensor::vector(values.into_iter().map(|a| (a * scale).min(1.0)).collect())
}

/// Node capsules with pose `[X1_i; ...; Xk_i]` and degree activations.
pub fn build_primary_capsules<'t>(
    tape: &'t Tape,
    g: &Graph,
    thetas: &[Var<'t>],
    activation_scale: f64,
) -> Result<CapsuleLayerState<'t>> {
    let layers = gcn_forward(tape, g, thetas)?;
    Ok(CapsuleLayerState {
        poses: stack(&layers, 1),
        activations: tape.constant(degree_activations(g, activation_scale)),
    })
}
