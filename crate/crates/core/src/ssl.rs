//! Self-supervised objectives over embedding batches: Barlow Twins and the
//! two alternatives it is compared against (VICReg, NT-Xent).
//!
//! Every objective exists in two forms: a graph builder (`*_g`) used inside
//! training so gradients flow back to the generator, and a pure wrapper with
//! the same numerics that simply evaluates the graph. The pure wrappers are
//! what the oracle tests target.
//!
//! Rows of an embedding batch are samples, columns are embedding dimensions.
//! Standardization uses the population (1/N) standard deviation. Wherever a
//! divisor could vanish we clamp *inside* the square root — `sqrt(max(v,
//! eps^2))` equals `max(sqrt(v), eps)` exactly but keeps the backward pass
//! free of 0/0.

use ndarray::{Array2, IxDyn};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Floor applied to per-column standard deviations and norms.
pub const STD_EPS: f64 = 1e-12;

/// A validated batch of embeddings: rows = samples, columns = dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    values: Array2<f64>,
}

impl EmbeddingBatch {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() < 2 {
            return Err(Error::shape(format!(
                "embedding batch needs at least 2 rows, got {}",
                values.nrows()
            )));
        }
        if values.ncols() < 1 {
            return Err(Error::shape("embedding batch needs at least 1 column"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEmbedding);
        }
        Ok(EmbeddingBatch { values })
    }

    pub fn batch_size(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    fn to_tensor(&self) -> Tensor {
        self.values.clone().into_dyn()
    }
}

/// Square matrix of per-dimension correlations between two batches.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossCorrelationMatrix {
    entries: Array2<f64>,
}

impl CrossCorrelationMatrix {
    pub fn side(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn from_entries(entries: Array2<f64>) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::shape("cross-correlation matrix must be square"));
        }
        Ok(CrossCorrelationMatrix { entries })
    }
}

/// Which self-supervised objective to apply, with its weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SslObjectiveKind {
    BarlowTwins { lambda1: f64 },
    VicReg(VicRegWeights),
    NtXent { temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VicRegWeights {
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
}

impl Default for VicRegWeights {
    fn default() -> Self {
        VicRegWeights {
            invariance: 25.0,
            variance: 25.0,
            covariance: 1.0,
        }
    }
}

impl SslObjectiveKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            SslObjectiveKind::BarlowTwins { lambda1 } if *lambda1 > 0.0 => Ok(()),
            SslObjectiveKind::BarlowTwins { .. } => {
                Err(Error::InvalidArgument("lambda1 must be positive".into()))
            }
            SslObjectiveKind::VicReg(w)
                if w.invariance >= 0.0 && w.variance >= 0.0 && w.covariance >= 0.0 =>
            {
                Ok(())
            }
            SslObjectiveKind::VicReg(_) => {
                Err(Error::InvalidArgument("vicreg weights must be >= 0".into()))
            }
            SslObjectiveKind::NtXent { temperature } if *temperature > 0.0 => Ok(()),
            SslObjectiveKind::NtXent { .. } => {
                Err(Error::InvalidArgument("temperature must be positive".into()))
            }
        }
    }
}

// ---- graph builders ----

/// Column-standardizes a [n, d] node: zero mean, unit population std, with
/// stds below `eps` clamped to `eps`.
pub fn standardize_columns_g(g: &mut Graph, z: Var, eps: f64) -> Var {
    let (n, d) = crate::tensor::dims2(g.value(z));
    let mean = g.mean_axes(z, &[0]); // [1, d]
    let mean_b = g.broadcast(mean, &[n, d]);
    let centered = g.sub(z, mean_b);
    let sq = g.sqr(centered);
    let var = g.mean_axes(sq, &[0]); // population variance, [1, d]
    let var_floored = g.max_scalar(var, eps * eps);
    let std = g.sqrt(var_floored);
    let std_b = g.broadcast(std, &[n, d]);
    g.div(centered, std_b)
}

/// C[i, j] = <colA_i, colB_j> / (max(|colA_i|, eps) * max(|colB_j|, eps)).
///
/// On inputs that are already column-standardized this equals the
/// divide-by-batch-size form, because standardized columns have norm
/// sqrt(n) exactly.
pub fn cross_correlation_g(g: &mut Graph, za: Var, zb: Var, eps: f64) -> Var {
    let (n, d) = crate::tensor::dims2(g.value(za));
    let (n2, d2) = crate::tensor::dims2(g.value(zb));
    assert_eq!((n, d), (n2, d2), "cross_correlation: shape mismatch");
    let na = column_norms_g(g, za, eps); // [1, d]
    let nb = column_norms_g(g, zb, eps);
    let na_b = g.broadcast(na, &[n, d]);
    let nb_b = g.broadcast(nb, &[n, d]);
    let ua = g.div(za, na_b);
    let ub = g.div(zb, nb_b);
    let uat = g.permute(ua, &[1, 0]); // [d, n]
    g.matmul(uat, ub) // [d, d]
}

fn column_norms_g(g: &mut Graph, z: Var, eps: f64) -> Var {
    let sq = g.sqr(z);
    let ss = g.sum_axes(sq, &[0]); // [1, d]
    let floored = g.max_scalar(ss, eps * eps);
    g.sqrt(floored)
}

/// Sum of squared diagonal deviations from 1 plus `lambda1` times the sum of
/// squared off-diagonal entries.
pub fn barlow_twins_from_c_g(g: &mut Graph, c: Var, lambda1: f64) -> Var {
    let d = crate::tensor::dims2(g.value(c)).0;
    let eye = identity_tensor(d);
    let off_mask = eye.mapv(|v| 1.0 - v);
    let eye_c = g.constant(eye.clone());
    let off_c = g.constant(off_mask);

    let diff = g.sub(eye_c, c); // has (1 - C_ii) on the diagonal
    let diag_only = g.mul(diff, eye_c);
    let diag_sq = g.sqr(diag_only);
    let on_term = g.sum_all(diag_sq);

    let off_only = g.mul(c, off_c);
    let off_sq = g.sqr(off_only);
    let off_sum = g.sum_all(off_sq);
    let off_term = g.mul_scalar(off_sum, lambda1);

    g.add(on_term, off_term)
}

/// Full Barlow Twins objective on raw embeddings: standardize, correlate,
/// then penalize deviation from the identity.
pub fn barlow_twins_g(g: &mut Graph, za: Var, zb: Var, lambda1: f64) -> Var {
    let sa = standardize_columns_g(g, za, STD_EPS);
    let sb = standardize_columns_g(g, zb, STD_EPS);
    let c = cross_correlation_g(g, sa, sb, STD_EPS);
    barlow_twins_from_c_g(g, c, lambda1)
}

/// VICReg: invariance MSE + variance hinge toward std 1 + off-diagonal
/// covariance penalty, the last two applied to both branches.
pub fn vicreg_g(g: &mut Graph, za: Var, zb: Var, w: VicRegWeights) -> Var {
    let (n, _d) = crate::tensor::dims2(g.value(za));
    assert!(n >= 2, "vicreg needs at least 2 samples");

    // invariance: mean over samples of squared distance
    let diff = g.sub(za, zb);
    let diff_sq = g.sqr(diff);
    let inv_sum = g.sum_all(diff_sq);
    let inv = g.mul_scalar(inv_sum, 1.0 / n as f64);

    let va = variance_hinge_g(g, za);
    let vb = variance_hinge_g(g, zb);
    let ca = covariance_penalty_g(g, za);
    let cb = covariance_penalty_g(g, zb);

    let inv_w = g.mul_scalar(inv, w.invariance);
    let var_sum = g.add(va, vb);
    let var_w = g.mul_scalar(var_sum, w.variance);
    let cov_sum = g.add(ca, cb);
    let cov_w = g.mul_scalar(cov_sum, w.covariance);

    let t = g.add(inv_w, var_w);
    g.add(t, cov_w)
}

/// (1/d) * sum_j max(0, 1 - std_j), population std with a tiny floor.
fn variance_hinge_g(g: &mut Graph, z: Var) -> Var {
    let (_n, d) = crate::tensor::dims2(g.value(z));
    let mean = g.mean_axes(z, &[0]);
    let shape = g.value(z).shape().to_vec();
    let mean_b = g.broadcast(mean, &shape);
    let centered = g.sub(z, mean_b);
    let sq = g.sqr(centered);
    let var = g.mean_axes(sq, &[0]);
    let var_floored = g.max_scalar(var, STD_EPS * STD_EPS);
    let std = g.sqrt(var_floored);
    let neg = g.neg(std);
    let one_minus = g.add_scalar(neg, 1.0);
    let hinged = g.relu(one_minus);
    let s = g.sum_all(hinged);
    g.mul_scalar(s, 1.0 / d as f64)
}

/// (1/d) * sum_{i != j} Cov_ij^2 with the unbiased 1/(n-1) covariance.
fn covariance_penalty_g(g: &mut Graph, z: Var) -> Var {
    let (n, d) = crate::tensor::dims2(g.value(z));
    let mean = g.mean_axes(z, &[0]);
    let mean_b = g.broadcast(mean, &[n, d]);
    let centered = g.sub(z, mean_b);
    let ct = g.permute(centered, &[1, 0]);
    let prod = g.matmul(ct, centered); // [d, d], sum of outer products
    let cov = g.mul_scalar(prod, 1.0 / (n as f64 - 1.0));
    let off_mask = g.constant(identity_tensor(d).mapv(|v| 1.0 - v));
    let off = g.mul(cov, off_mask);
    let off_sq = g.sqr(off);
    let s = g.sum_all(off_sq);
    g.mul_scalar(s, 1.0 / d as f64)
}

/// NT-Xent over the 2N views formed by stacking both batches: each view's
/// positive is its partner in the other batch; all other 2N-2 views plus the
/// partner form the softmax support.
pub fn ntxent_g(g: &mut Graph, za: Var, zb: Var, temperature: f64) -> Result<Var> {
    if temperature <= 0.0 {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let (n, d) = crate::tensor::dims2(g.value(za));
    let (n2, d2) = crate::tensor::dims2(g.value(zb));
    if (n, d) != (n2, d2) {
        return Err(Error::shape(format!(
            "ntxent: batch shapes {n}x{d} vs {n2}x{d2}"
        )));
    }
    for row in g.value(za).rows().into_iter().chain(g.value(zb).rows()) {
        let norm_sq: f64 = row.iter().map(|v| v * v).sum();
        if norm_sq.sqrt() < STD_EPS {
            return Err(Error::DegenerateEmbedding);
        }
    }

    let m = 2 * n;
    let z = g.concat(&[za, zb], 0); // [2n, d]
    let sq = g.sqr(z);
    let ss = g.sum_axes(sq, &[1]); // [2n, 1]
    let norm = g.sqrt(ss);
    let norm_b = g.broadcast(norm, &[m, d]);
    let u = g.div(z, norm_b);
    let ut = g.permute(u, &[1, 0]);
    let sim = g.matmul(u, ut); // [2n, 2n] cosine similarities
    let logits = g.mul_scalar(sim, 1.0 / temperature);

    // Remove self-similarity: a -1e9 shift underflows to exactly zero after
    // the softmax max-shift, so view k never competes with itself.
    let self_mask = identity_tensor(m).mapv(|v| v * -1e9);
    let mask_c = g.constant(self_mask);
    let masked = g.add(logits, mask_c);
    let probs = g.softmax(masked);

    // positives: row k pairs with k + n (mod 2n)
    let mut pos = Tensor::zeros(IxDyn(&[m, m]));
    for k in 0..m {
        pos[[k, (k + n) % m]] = 1.0;
    }
    let pos_c = g.constant(pos);
    let pos_probs = g.mul(probs, pos_c);
    let p = g.sum_axes(pos_probs, &[1]); // [2n, 1]
    let logp = g.ln(p);
    let total = g.sum_all(logp);
    Ok(g.mul_scalar(total, -1.0 / m as f64))
}

/// Dispatches to the configured objective. All three return a scalar node.
pub fn ssl_objective_g(
    g: &mut Graph,
    kind: SslObjectiveKind,
    za: Var,
    zb: Var,
) -> Result<Var> {
    kind.validate()?;
    match kind {
        SslObjectiveKind::BarlowTwins { lambda1 } => Ok(barlow_twins_g(g, za, zb, lambda1)),
        SslObjectiveKind::VicReg(w) => Ok(vicreg_g(g, za, zb, w)),
        SslObjectiveKind::NtXent { temperature } => ntxent_g(g, za, zb, temperature),
    }
}

fn identity_tensor(d: usize) -> Tensor {
    let mut t = Tensor::zeros(IxDyn(&[d, d]));
    for i in 0..d {
        t[[i, i]] = 1.0;
    }
    t
}

// ---- pure wrappers ----

pub fn standardize_columns(z: &EmbeddingBatch, eps: f64) -> Result<EmbeddingBatch> {
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    let mut g = Graph::new();
    let zv = g.constant(z.to_tensor());
    let out = standardize_columns_g(&mut g, zv, eps);
    let values = g
        .value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    EmbeddingBatch::new(values)
}

pub fn cross_correlation(
    za: &EmbeddingBatch,
    zb: &EmbeddingBatch,
) -> Result<CrossCorrelationMatrix> {
    if za.batch_size() != zb.batch_size() || za.dim() != zb.dim() {
        return Err(Error::shape(format!(
            "cross_correlation: {}x{} vs {}x{}",
            za.batch_size(),
            za.dim(),
            zb.batch_size(),
            zb.dim()
        )));
    }
    let mut g = Graph::new();
    let av = g.constant(za.to_tensor());
    let bv = g.constant(zb.to_tensor());
    let c = cross_correlation_g(&mut g, av, bv, STD_EPS);
    CrossCorrelationMatrix::from_entries(
        g.value(c)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap(),
    )
}

pub fn barlow_twins_loss(c: &CrossCorrelationMatrix, lambda1: f64) -> Result<f64> {
    if lambda1 <= 0.0 {
        return Err(Error::InvalidArgument("lambda1 must be positive".into()));
    }
    let mut g = Graph::new();
    let cv = g.constant(c.entries().clone().into_dyn());
    let l = barlow_twins_from_c_g(&mut g, cv, lambda1);
    Ok(g.scalar_value(l))
}

pub fn vicreg_loss(
    za: &EmbeddingBatch,
    zb: &EmbeddingBatch,
    weights: VicRegWeights,
) -> Result<f64> {
    if za.batch_size() != zb.batch_size() || za.dim() != zb.dim() {
        return Err(Error::shape("vicreg: batch shape mismatch"));
    }
    let mut g = Graph::new();
    let av = g.constant(za.to_tensor());
    let bv = g.constant(zb.to_tensor());
    let l = vicreg_g(&mut g, av, bv, weights);
    Ok(g.scalar_value(l))
}

pub fn ntxent_loss(za: &EmbeddingBatch, zb: &EmbeddingBatch, temperature: f64) -> Result<f64> {
    let mut g = Graph::new();
    let av = g.constant(za.to_tensor());
    let bv = g.constant(zb.to_tensor());
    let l = ntxent_g(&mut g, av, bv, temperature)?;
    Ok(g.scalar_value(l))
}

/// Convenience dispatcher mirroring [`ssl_objective_g`].
pub fn ssl_loss(kind: SslObjectiveKind, za: &EmbeddingBatch, zb: &EmbeddingBatch) -> Result<f64> {
    match kind {
        SslObjectiveKind::BarlowTwins { lambda1 } => {
            let sa = standardize_columns(za, STD_EPS)?;
            let sb = standardize_columns(zb, STD_EPS)?;
            let c = cross_correlation(&sa, &sb)?;
            barlow_twins_loss(&c, lambda1)
        }
        SslObjectiveKind::VicReg(w) => vicreg_loss(za, zb, w),
        SslObjectiveKind::NtXent { temperature } => ntxent_loss(za, zb, temperature),
    }
}
