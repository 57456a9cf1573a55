//! Evaluation metrics over a frozen surrogate embedding: Fréchet distance,
//! unbiased kernel distance, k-NN precision/recall, perceptual path length,
//! and the signed-logit overfitting diagnostic.
//!
//! The embedding network is a small seeded conv net, not an Inception model,
//! so absolute values are not comparable to published tables; every report
//! records the embedding seed for that reason.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, IxDyn};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const DEFAULT_EMBED_DIM: usize = 64;

fn kaiming_uniform(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let limit = (6.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(IxDyn(shape));
    for v in t.iter_mut() {
        *v = rng.uniform_range(-limit, limit);
    }
    t
}

/// Frozen, seeded embedding network: three stride-2 convs, global average
/// pooling, and a linear map to the embedding dimension.
pub struct EmbeddingNet {
    convs: Vec<Tensor>,
    w_out: Tensor,
    pub dim: usize,
    pub seed: u64,
}

impl EmbeddingNet {
    pub fn build(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dim must be nonzero".into()));
        }
        let mut rng = RngStream::new(seed).substream(0x656d6264); // "embd"
        let chans = [(8usize, 3usize), (16, 8), (32, 16)];
        let convs = chans
            .iter()
            .map(|&(co, ci)| kaiming_uniform(&mut rng, &[co, ci, 3, 3]))
            .collect();
        let w_out = kaiming_uniform(&mut rng, &[32, dim]);
        Ok(EmbeddingNet {
            convs,
            w_out,
            dim,
            seed,
        })
    }

    /// Embeds an NCHW image batch ([-1, 1] range) into [n, dim] vectors.
    pub fn embed(&self, images: &Tensor) -> Result<Array2<f64>> {
        if images.ndim() != 4 || images.shape()[1] != 3 {
            return Err(Error::shape("embedding input must be [n, 3, h, w]"));
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEmbedding);
        }
        let n = images.shape()[0];
        let mut g = Graph::new();
        let mut x = g.constant(images.clone());
        for w in &self.convs {
            let wv = g.constant(w.clone());
            let y = g.conv2d(x, wv, 2, 1);
            x = g.leaky_relu(y, 0.2);
        }
        let pooled = g.mean_axes(x, &[2, 3]);
        let flat = g.reshape(pooled, &[n, 32]);
        let wv = g.constant(self.w_out.clone());
        let out = g.matmul(flat, wv);
        Ok(g.value(out)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap())
    }
}

// ---- sufficient statistics and the Fréchet distance ----

/// Mean and unbiased covariance of an embedding set.
#[derive(Debug, Clone)]
pub struct EmbeddingStats {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    pub n: usize,
}

impl EmbeddingStats {
    pub fn from_embeddings(e: &Array2<f64>) -> Result<Self> {
        let (n, d) = e.dim();
        if n < 2 {
            return Err(Error::shape(format!(
                "covariance needs at least 2 samples, got {n}"
            )));
        }
        let mean = e.mean_axis(ndarray::Axis(0)).unwrap();
        let centered = e - &mean.view().insert_axis(ndarray::Axis(0));
        let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
        debug_assert_eq!(cov.dim(), (d, d));
        Ok(EmbeddingStats { mean, cov, n })
    }
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    let (r, c) = a.dim();
    DMatrix::from_row_iterator(r, c, a.iter().cloned())
}

/// Eigendecomposition of a (numerically) symmetric matrix with the
/// negative-eigenvalue floor: tiny negatives clamp to zero, real negatives
/// are a caller error.
fn psd_eigs(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let min_eig = eig.eigenvalues.min();
    if min_eig < -1e-8 {
        return Err(Error::NonPsdCovariance { min_eig });
    }
    let floored = eig.eigenvalues.map(|v| v.max(0.0));
    Ok((eig.eigenvectors, floored))
}

fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vecs, vals) = psd_eigs(m)?;
    let sqrt_diag = DMatrix::from_diagonal(&vals.map(|v| v.sqrt()));
    Ok(&vecs * sqrt_diag * vecs.transpose())
}

/// Fréchet distance between two Gaussians summarized by their stats:
/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).
pub fn frechet_distance(a: &EmbeddingStats, b: &EmbeddingStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::shape(format!(
            "stat dims differ: {} vs {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(b.mean.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let ca = to_dmatrix(&a.cov);
    let cb = to_dmatrix(&b.cov);
    // Tr((A B)^{1/2}) computed on the symmetrized form A^{1/2} B A^{1/2}
    let sa = sqrtm_psd(&ca)?;
    let inner = &sa * &cb * &sa;
    let (_, vals) = psd_eigs(&inner)?;
    let tr_sqrt: f64 = vals.iter().map(|v| v.sqrt()).sum();
    let fid = mean_term + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    if fid < -1e-6 {
        return Err(Error::NonPsdCovariance { min_eig: fid });
    }
    Ok(fid.max(0.0))
}

// ---- kernel distance ----

fn poly_kernel(x: &[f64], y: &[f64]) -> f64 {
    let d = x.len() as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let v = dot / d + 1.0;
    v * v * v
}

/// Unbiased MMD^2 estimator with the cubic polynomial kernel
/// k(x, y) = (x.y/d + 1)^3. Slightly negative values are expected noise.
pub fn kernel_distance(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    let (m, da) = a.dim();
    let (n, db) = b.dim();
    if da != db {
        return Err(Error::shape(format!("embedding dims differ: {da} vs {db}")));
    }
    if m < 2 || n < 2 {
        return Err(Error::shape("kernel distance needs at least 2 points per set"));
    }
    let rows = |e: &Array2<f64>| -> Vec<Vec<f64>> {
        e.rows().into_iter().map(|r| r.to_vec()).collect()
    };
    let ra = rows(a);
    let rb = rows(b);
    let mut kaa = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kaa += poly_kernel(&ra[i], &ra[j]);
            }
        }
    }
    let mut kbb = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kbb += poly_kernel(&rb[i], &rb[j]);
            }
        }
    }
    let mut kab = 0.0;
    for i in 0..m {
        for j in 0..n {
            kab += poly_kernel(&ra[i], &rb[j]);
        }
    }
    Ok(kaa / (m * (m - 1)) as f64 + kbb / (n * (n - 1)) as f64
        - 2.0 * kab / (m * n) as f64)
}

// ---- precision / recall ----

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Radius of each point's k-th nearest neighbor within its own set
/// (self excluded), squared.
fn knn_radii_sq(set: &[Vec<f64>], k: usize) -> Vec<f64> {
    let n = set.len();
    let mut radii = Vec::with_capacity(n);
    for i in 0..n {
        let mut dists: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| sq_dist(&set[i], &set[j]))
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        radii.push(dists[k - 1]);
    }
    radii
}

/// Fraction of `probe` points lying within some `anchor` point's k-NN ball.
fn manifold_coverage(anchor: &[Vec<f64>], radii_sq: &[f64], probe: &[Vec<f64>]) -> f64 {
    let covered = probe
        .iter()
        .filter(|p| {
            anchor
                .iter()
                .zip(radii_sq)
                .any(|(a, &r)| sq_dist(p, a) <= r)
        })
        .count();
    covered as f64 / probe.len() as f64
}

/// k-NN manifold precision/recall: precision asks whether generated points
/// land on the real manifold estimate, recall swaps the roles.
pub fn precision_recall(
    real: &Array2<f64>,
    gen: &Array2<f64>,
    k: usize,
) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if real.ncols() != gen.ncols() {
        return Err(Error::shape("embedding dims differ"));
    }
    if real.nrows() < k + 1 || gen.nrows() < k + 1 {
        return Err(Error::InvalidArgument(format!(
            "precision/recall needs more than k = {k} points per set"
        )));
    }
    let rows = |e: &Array2<f64>| -> Vec<Vec<f64>> {
        e.rows().into_iter().map(|r| r.to_vec()).collect()
    };
    let r = rows(real);
    let g = rows(gen);
    let r_radii = knn_radii_sq(&r, k);
    let g_radii = knn_radii_sq(&g, k);
    let precision = manifold_coverage(&r, &r_radii, &g);
    let recall = manifold_coverage(&g, &g_radii, &r);
    Ok((precision, recall))
}

// ---- perceptual path length ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PplMode {
    /// t sampled uniformly along the interpolation path.
    Full,
    /// t fixed at the endpoints {0, 1}.
    End,
}

/// Spherical interpolation between two latent rows.
pub fn slerp(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        // degenerate endpoint: fall back to linear interpolation
        return a
            .iter()
            .zip(b)
            .map(|(x, y)| x * (1.0 - t) + y * t)
            .collect();
    }
    let cos = (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0);
    let theta = cos.acos();
    if theta < 1e-7 {
        return a
            .iter()
            .zip(b)
            .map(|(x, y)| x * (1.0 - t) + y * t)
            .collect();
    }
    let s = theta.sin();
    let wa = ((1.0 - t) * theta).sin() / s;
    let wb = (t * theta).sin() / s;
    a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect()
}

/// One batch of sampled interpolation paths: endpoint pairs plus their t
/// values. Public so oracles can replay exactly the paths the estimator
/// consumed.
pub fn sample_ppl_paths(
    rng: &mut RngStream,
    count: usize,
    z_dim: usize,
    mode: PplMode,
) -> (Array2<f64>, Array2<f64>, Vec<f64>) {
    let mut z1 = Array2::zeros((count, z_dim));
    let mut z2 = Array2::zeros((count, z_dim));
    for v in z1.iter_mut() {
        *v = rng.normal();
    }
    for v in z2.iter_mut() {
        *v = rng.normal();
    }
    let ts = (0..count)
        .map(|_| match mode {
            PplMode::Full => rng.uniform(),
            PplMode::End => {
                if rng.uniform() < 0.5 {
                    0.0
                } else {
                    1.0
                }
            }
        })
        .collect();
    (z1, z2, ts)
}

/// Perceptual path length: mean over paths of the squared embedding-space
/// step between G at slerp(t) and slerp(t + epsilon), scaled by 1/epsilon^2.
/// Paths run through `generate` in fixed-size batches so results do not
/// depend on the caller's parallelism.
pub fn perceptual_path_length<G, E>(
    mut generate: G,
    mut embed: E,
    z_dim: usize,
    epsilon: f64,
    n_paths: usize,
    mode: PplMode,
    rng: &mut RngStream,
    batch: usize,
) -> Result<f64>
where
    G: FnMut(&Tensor) -> Result<Tensor>,
    E: FnMut(&Tensor) -> Result<Array2<f64>>,
{
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("ppl epsilon must be positive".into()));
    }
    if n_paths == 0 || batch == 0 {
        return Err(Error::InvalidArgument("ppl needs paths and a batch size".into()));
    }
    let mut total = 0.0;
    let mut done = 0usize;
    while done < n_paths {
        let m = batch.min(n_paths - done);
        let (z1, z2, ts) = sample_ppl_paths(rng, m, z_dim, mode);
        let mut za = Array2::zeros((m, z_dim));
        let mut zb = Array2::zeros((m, z_dim));
        for i in 0..m {
            let a = z1.row(i).to_vec();
            let b = z2.row(i).to_vec();
            let pa = slerp(&a, &b, ts[i]);
            let pb = slerp(&a, &b, ts[i] + epsilon);
            za.row_mut(i).assign(&Array1::from(pa));
            zb.row_mut(i).assign(&Array1::from(pb));
        }
        let imgs_a = generate(&za.into_dyn())?;
        let imgs_b = generate(&zb.into_dyn())?;
        let ea = embed(&imgs_a)?;
        let eb = embed(&imgs_b)?;
        for i in 0..m {
            let d: f64 = ea
                .row(i)
                .iter()
                .zip(eb.row(i).iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            total += d / (epsilon * epsilon);
        }
        done += m;
    }
    Ok(total / n_paths as f64)
}

// ---- diagnostics and the report ----

/// Fraction of per-sample summed real logits that are strictly positive.
pub fn signed_logit_fraction(real_scalar_logits: &[f64]) -> f64 {
    if real_scalar_logits.is_empty() {
        return 0.0;
    }
    let pos = real_scalar_logits.iter().filter(|v| **v > 0.0).count();
    pos as f64 / real_scalar_logits.len() as f64
}

/// One evaluation row. PPL fields are NaN when the latent dimension rules
/// them out (they are only defined for the 64-dimensional latent space).
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub step: u64,
    pub images_seen: u64,
    pub fid: f64,
    pub kid: f64,
    pub precision: f64,
    pub recall: f64,
    pub ppl_full: f64,
    pub ppl_end: f64,
    pub signed_logit_fraction: f64,
    pub loss_d: f64,
    pub loss_g: f64,
    pub loss_dc_fake: f64,
    pub loss_dc_real: f64,
    pub loss_ft: f64,
}

/// Formats with 9 significant digits; NaN stays literal.
pub fn fmt_sig9(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v:.8e}")
    }
}

impl MetricsReport {
    pub fn csv_header() -> &'static str {
        "step,images_seen,fid,kid,precision,recall,ppl_full,ppl_end,signed_logit_fraction,loss_d,loss_g,loss_dc_fake,loss_dc_real,loss_ft"
    }

    pub fn csv_row(&self) -> String {
        let nums = [
            self.fid,
            self.kid,
            self.precision,
            self.recall,
            self.ppl_full,
            self.ppl_end,
            self.signed_logit_fraction,
            self.loss_d,
            self.loss_g,
            self.loss_dc_fake,
            self.loss_dc_real,
            self.loss_ft,
        ];
        let mut row = format!("{},{}", self.step, self.images_seen);
        for v in nums {
            row.push(',');
            row.push_str(&fmt_sig9(v));
        }
        row
    }
}
