//! Frozen feature networks and the random projection layers that turn their
//! activations into discriminator-ready pyramids.
//!
//! Two surrogate backbones stand in for large pretrained encoders: a plain
//! strided CNN and a small patch-attention network. Both are randomly
//! initialized from a seed and never trained. Their four stages sit at
//! strides {4, 8, 16, 32} of the input resolution; the CNN reaches stride 4
//! at its first stage through an extra stride-2 stem convolution, since four
//! stride-2 stages alone would only span strides 2..16.
//!
//! On top of the stages sit the random projectors: CCM (per-stage random
//! 1×1 channel mixing) and CSM (top-down random 3×3 convolutions with
//! bilinear upsampling, plus random 1×1 lateral projections that reconcile
//! channel widths across stages before the residual add).
//!
//! Weights live outside the autodiff tape and enter each forward pass as
//! constants, so gradients flow through them to the image but never into
//! them.

use ndarray::IxDyn;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::RngStream;
use crate::tensor::{dims4, Tensor};

pub const DEFAULT_STAGE_CHANNELS: [usize; 4] = [8, 16, 32, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Conv,
    PatchAttention,
}

/// Construction recipe for a frozen feature network.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNetworkSpec {
    pub kind: FeatureKind,
    pub stage_channels: [usize; 4],
    /// Patch size (PatchAttention only).
    pub patch: usize,
    /// Number of attention blocks (PatchAttention only).
    pub blocks: usize,
    /// Token embedding width (PatchAttention only).
    pub embed_dim: usize,
    /// Token-grid side the positional table is built for (PatchAttention
    /// only). The native input resolution is `patch * grid_side`; larger
    /// power-of-two inputs are token-pooled down, smaller ones rejected.
    pub grid_side: usize,
    pub seed: u64,
}

impl FeatureNetworkSpec {
    pub fn conv(seed: u64) -> Self {
        FeatureNetworkSpec {
            kind: FeatureKind::Conv,
            stage_channels: DEFAULT_STAGE_CHANNELS,
            patch: 4,
            blocks: 2,
            embed_dim: 32,
            grid_side: 16,
            seed,
        }
    }

    pub fn patch_attention(seed: u64) -> Self {
        FeatureNetworkSpec {
            kind: FeatureKind::PatchAttention,
            ..FeatureNetworkSpec::conv(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::InvalidArgument("stage channels must be nonzero".into()));
        }
        if self.kind == FeatureKind::PatchAttention {
            if self.patch != 4 {
                return Err(Error::InvalidArgument(
                    "patch-attention surrogate requires patch size 4".into(),
                ));
            }
            if self.embed_dim == 0 || self.blocks == 0 {
                return Err(Error::InvalidArgument(
                    "embed_dim and blocks must be nonzero".into(),
                ));
            }
            // a power-of-two grid of at least 8 keeps every stage pooling
            // kernel (grid -> stride 4..32 of the native resolution) integral
            if self.grid_side < 8 || !self.grid_side.is_power_of_two() {
                return Err(Error::InvalidArgument(format!(
                    "grid_side must be a power of two >= 8, got {}",
                    self.grid_side
                )));
            }
        }
        Ok(())
    }

    /// Resolution the patch-attention positional table natively covers.
    pub fn native_resolution(&self) -> usize {
        self.patch * self.grid_side
    }
}

fn kaiming_uniform(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let limit = (6.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(IxDyn(shape));
    for v in t.iter_mut() {
        *v = rng.uniform_range(-limit, limit);
    }
    t
}

enum NetWeights {
    Conv {
        /// stem then 4 stage convs, all 3x3 stride 2
        convs: Vec<Tensor>,
    },
    Patch {
        embed: Tensor,          // [D, 3, p, p]
        pos: Tensor,            // [1, T_max placeholder? no: built per forward] -- stored per grid side
        blocks: Vec<AttnBlock>, // q/k/v/o + mlp weights
        stage_proj: Vec<Tensor>, // 4 × [c_s, D, 1, 1]
    },
}

struct AttnBlock {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    w1: Tensor,
    w2: Tensor,
}

/// A frozen feature network. Same spec (including seed) always rebuilds
/// bit-identical weights.
pub struct FeatureNetwork {
    spec: FeatureNetworkSpec,
    weights: NetWeights,
    /// Grid side the positional table was built for (PatchAttention).
    pos_side: usize,
}

/// Token-grid side an input resolution produces before any pooling.
const fn grid_side_for(resolution: usize, patch: usize) -> usize {
    resolution / patch
}

impl FeatureNetwork {
    /// Builds the frozen network. Weight draw order is fixed, so a seed
    /// pins every parameter.
    pub fn build(spec: FeatureNetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = RngStream::new(spec.seed).substream(0x6665_6174); // "feat"
        let weights = match spec.kind {
            FeatureKind::Conv => {
                let c = spec.stage_channels;
                let dims = [
                    [c[0], 3, 3, 3],
                    [c[0], c[0], 3, 3],
                    [c[1], c[0], 3, 3],
                    [c[2], c[1], 3, 3],
                    [c[3], c[2], 3, 3],
                ];
                let convs = dims.iter().map(|d| kaiming_uniform(&mut rng, d)).collect();
                NetWeights::Conv { convs }
            }
            FeatureKind::PatchAttention => {
                let d = spec.embed_dim;
                let embed = kaiming_uniform(&mut rng, &[d, 3, spec.patch, spec.patch]);
                // positional table sized lazily at first forward would break
                // frozenness; instead fix it to the configured grid and
                // average-pool larger grids down to it.
                let side = spec.grid_side;
                let pos = kaiming_uniform(&mut rng, &[1, side * side, d]);
                let blocks = (0..spec.blocks)
                    .map(|_| AttnBlock {
                        wq: kaiming_uniform(&mut rng, &[d, d]),
                        wk: kaiming_uniform(&mut rng, &[d, d]),
                        wv: kaiming_uniform(&mut rng, &[d, d]),
                        wo: kaiming_uniform(&mut rng, &[d, d]),
                        w1: kaiming_uniform(&mut rng, &[d, 2 * d]),
                        w2: kaiming_uniform(&mut rng, &[2 * d, d]),
                    })
                    .collect();
                let stage_proj = spec
                    .stage_channels
                    .iter()
                    .map(|&cs| kaiming_uniform(&mut rng, &[cs, d, 1, 1]))
                    .collect();
                NetWeights::Patch {
                    embed,
                    pos,
                    blocks,
                    stage_proj,
                }
            }
        };
        let pos_side = spec.grid_side;
        Ok(FeatureNetwork {
            spec,
            weights,
            pos_side,
        })
    }

    pub fn spec(&self) -> &FeatureNetworkSpec {
        &self.spec
    }

    /// All weight tensors in a stable order (for frozenness checks and
    /// checkpointing).
    pub fn flat_weights(&self) -> Vec<&Tensor> {
        match &self.weights {
            NetWeights::Conv { convs } => convs.iter().collect(),
            NetWeights::Patch {
                embed,
                pos,
                blocks,
                stage_proj,
            } => {
                let mut out = vec![embed, pos];
                for b in blocks {
                    out.extend([&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2]);
                }
                out.extend(stage_proj.iter());
                out
            }
        }
    }

    /// Runs the frozen network, returning the four stage activations at
    /// strides {4, 8, 16, 32}. Errors when the resolution does not divide
    /// by 32.
    pub fn forward_stages(&self, g: &mut Graph, x: Var) -> Result<[Var; 4]> {
        let (_n, c, h, w) = dims4(g.value(x));
        if c != 3 {
            return Err(Error::shape(format!("feature input must be RGB, got {c} channels")));
        }
        if h != w || h % 32 != 0 {
            return Err(Error::shape(format!(
                "feature input resolution must be square and divisible by 32, got {h}x{w}"
            )));
        }
        match &self.weights {
            NetWeights::Conv { convs } => {
                let mut cur = x;
                let mut stages = Vec::with_capacity(4);
                for (i, wt) in convs.iter().enumerate() {
                    let wv = g.constant(wt.clone());
                    let y = g.conv2d(cur, wv, 2, 1);
                    cur = g.leaky_relu(y, 0.2);
                    if i >= 1 {
                        stages.push(cur);
                    }
                }
                Ok([stages[0], stages[1], stages[2], stages[3]])
            }
            NetWeights::Patch {
                embed,
                pos,
                blocks,
                stage_proj,
            } => {
                let n = g.value(x).shape()[0];
                let d = self.spec.embed_dim;
                let ev = g.constant(embed.clone());
                let mut grid = g.conv2d(x, ev, self.spec.patch, 0); // [n, D, gh, gw]
                let mut side = grid_side_for(h, self.spec.patch);
                if side > self.pos_side {
                    // larger inputs: pool tokens down to the fixed grid
                    grid = g.avg_pool2d(grid, side / self.pos_side);
                    side = self.pos_side;
                } else if side < self.pos_side {
                    return Err(Error::shape(format!(
                        "patch-attention surrogate needs resolution >= {}, got {h}",
                        self.pos_side * self.spec.patch
                    )));
                }
                let t = side * side;
                let flat = g.reshape(grid, &[n, d, t]);
                let mut tokens = g.permute(flat, &[0, 2, 1]); // [n, T, D]
                let pv = g.constant(pos.clone());
                let pb = g.broadcast(pv, &[n, t, d]);
                tokens = g.add(tokens, pb);

                for b in blocks {
                    tokens = attention_block_g(g, tokens, b, n, t, d);
                }

                let back = g.permute(tokens, &[0, 2, 1]); // [n, D, T]
                let grid = g.reshape(back, &[n, d, side, side]);

                // stage targets at strides 4..32 of the original resolution
                let mut stages = Vec::with_capacity(4);
                for (s, proj) in stage_proj.iter().enumerate() {
                    let target = h / (4 << s);
                    let pooled = if side == target {
                        grid
                    } else {
                        g.avg_pool2d(grid, side / target)
                    };
                    let pvv = g.constant(proj.clone());
                    stages.push(g.conv2d(pooled, pvv, 1, 0));
                }
                Ok([stages[0], stages[1], stages[2], stages[3]])
            }
        }
    }
}

/// Pre-LN single-head attention + MLP block over [n, T, D] tokens.
fn attention_block_g(g: &mut Graph, x: Var, b: &AttnBlock, n: usize, t: usize, d: usize) -> Var {
    let project = |g: &mut Graph, x: Var, w: &Tensor, din: usize, dout: usize| -> Var {
        let flat = g.reshape(x, &[n * t, din]);
        let wv = g.constant(w.clone());
        let y = g.matmul(flat, wv);
        g.reshape(y, &[n, t, dout])
    };

    let ln1 = layer_norm_g(g, x);
    let q = project(g, ln1, &b.wq, d, d);
    let k = project(g, ln1, &b.wk, d, d);
    let v = project(g, ln1, &b.wv, d, d);
    let kt = g.permute(k, &[0, 2, 1]);
    let scores = g.bat_matmul(q, kt); // [n, T, T]
    let scaled = g.mul_scalar(scores, 1.0 / (d as f64).sqrt());
    let attn = g.softmax(scaled);
    let mixed = g.bat_matmul(attn, v); // [n, T, D]
    let out = project(g, mixed, &b.wo, d, d);
    let x = g.add(x, out);

    let ln2 = layer_norm_g(g, x);
    let h = project(g, ln2, &b.w1, d, 2 * d);
    let h = g.relu(h);
    let h2 = project(g, h, &b.w2, 2 * d, d);
    g.add(x, h2)
}

/// LayerNorm over the last axis, no affine part.
fn layer_norm_g(g: &mut Graph, x: Var) -> Var {
    let nd = g.value(x).ndim();
    let shape = g.value(x).shape().to_vec();
    let mean = g.mean_axes(x, &[nd - 1]);
    let mean_b = g.broadcast(mean, &shape);
    let centered = g.sub(x, mean_b);
    let sq = g.sqr(centered);
    let var = g.mean_axes(sq, &[nd - 1]);
    let var_eps = g.add_scalar(var, 1e-5);
    let std = g.sqrt(var_eps);
    let std_b = g.broadcast(std, &shape);
    g.div(centered, std_b)
}

// ---- projectors ----

/// Frozen CCM + CSM weights for one feature network's stages.
pub struct ProjectorParams {
    stage_channels: [usize; 4],
    ccm: Vec<Tensor>,         // 4 × [c_s, c_s, 1, 1]
    csm_conv: Vec<Tensor>,    // 4 × [c_s, c_s, 3, 3]
    csm_lateral: Vec<Tensor>, // 3 × [c_s, c_{s+1}, 1, 1]
    pub seed: u64,
}

impl ProjectorParams {
    pub fn build(stage_channels: [usize; 4], seed: u64) -> Self {
        let mut rng = RngStream::new(seed).substream(0x70_726f6a); // "proj"
        let ccm = stage_channels
            .iter()
            .map(|&c| kaiming_uniform(&mut rng, &[c, c, 1, 1]))
            .collect();
        let csm_conv = stage_channels
            .iter()
            .map(|&c| kaiming_uniform(&mut rng, &[c, c, 3, 3]))
            .collect();
        let csm_lateral = (0..3)
            .map(|s| {
                kaiming_uniform(&mut rng, &[stage_channels[s], stage_channels[s + 1], 1, 1])
            })
            .collect();
        ProjectorParams {
            stage_channels,
            ccm,
            csm_conv,
            csm_lateral,
            seed,
        }
    }

    /// Test-mode params: CCM is the identity mix, CSM untouched random.
    pub fn with_identity_ccm(mut self) -> Self {
        for (c, w) in self.stage_channels.iter().zip(self.ccm.iter_mut()) {
            let mut ident = Tensor::zeros(IxDyn(&[*c, *c, 1, 1]));
            for i in 0..*c {
                ident[[i, i, 0, 0]] = 1.0;
            }
            *w = ident;
        }
        self
    }

    pub fn stage_channels(&self) -> [usize; 4] {
        self.stage_channels
    }

    pub fn flat_weights(&self) -> Vec<&Tensor> {
        self.ccm
            .iter()
            .chain(self.csm_conv.iter())
            .chain(self.csm_lateral.iter())
            .collect()
    }
}

/// Per-stage random 1×1 channel mixing. Spatial sizes are preserved and the
/// map is linear in its input.
pub fn ccm_apply_g(g: &mut Graph, stages: &[Var; 4], params: &ProjectorParams) -> Result<[Var; 4]> {
    let mut out = Vec::with_capacity(4);
    for (s, (&stage, w)) in stages.iter().zip(params.ccm.iter()).enumerate() {
        let cin = g.value(stage).shape()[1];
        if cin != w.shape()[1] {
            return Err(Error::shape(format!(
                "ccm stage {s}: {cin} channels vs weights for {}",
                w.shape()[1]
            )));
        }
        let wv = g.constant(w.clone());
        out.push(g.conv2d(stage, wv, 1, 0));
    }
    Ok([out[0], out[1], out[2], out[3]])
}

/// Top-down cross-scale mixing: the deepest stage is convolved directly;
/// every shallower stage first receives the bilinear-upsampled deeper output
/// through a random 1×1 lateral, added residually, then its own random 3×3.
pub fn csm_apply_g(g: &mut Graph, stages: &[Var; 4], params: &ProjectorParams) -> [Var; 4] {
    let conv = |g: &mut Graph, x: Var, w: &Tensor| -> Var {
        let wv = g.constant(w.clone());
        g.conv2d(x, wv, 1, 1)
    };
    let lateral = |g: &mut Graph, x: Var, w: &Tensor| -> Var {
        let wv = g.constant(w.clone());
        g.conv2d(x, wv, 1, 0)
    };

    let y4 = conv(g, stages[3], &params.csm_conv[3]);
    let mut out = [y4; 4];
    let mut deeper = y4;
    for s in (0..3).rev() {
        let up = g.bilinear_up2(deeper);
        let lat = lateral(g, up, &params.csm_lateral[s]);
        let sum = g.add(stages[s], lat);
        let y = conv(g, sum, &params.csm_conv[s]);
        out[s] = y;
        deeper = y;
    }
    out
}

/// Four validated feature maps with halving spatial sizes.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    maps: [Tensor; 4],
}

impl FeaturePyramid {
    pub fn new(maps: [Tensor; 4]) -> Result<Self> {
        for (i, m) in maps.iter().enumerate() {
            if m.ndim() != 4 {
                return Err(Error::shape(format!("pyramid level {i} must be NCHW")));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::shape(format!("pyramid level {i} has non-finite values")));
            }
        }
        for i in 0..3 {
            let (h0, h1) = (maps[i].shape()[2], maps[i + 1].shape()[2]);
            if h0 != 2 * h1 {
                return Err(Error::shape(format!(
                    "pyramid spatial sizes must halve: level {i} is {h0}, level {} is {h1}",
                    i + 1
                )));
            }
        }
        Ok(FeaturePyramid { maps })
    }

    pub fn maps(&self) -> &[Tensor; 4] {
        &self.maps
    }
}

/// Global-average-pools all eight maps and concatenates them per sample:
/// CNN stages 1..4 then attention stages 1..4.
pub fn pooled_representation_g(g: &mut Graph, pyr_cnn: &[Var; 4], pyr_vit: &[Var; 4]) -> Var {
    let mut parts = Vec::with_capacity(8);
    for &m in pyr_cnn.iter().chain(pyr_vit.iter()) {
        let (n, c, _, _) = dims4(g.value(m));
        let pooled = g.mean_axes(m, &[2, 3]);
        parts.push(g.reshape(pooled, &[n, c]));
    }
    g.concat(&parts, 1)
}

/// Value-level pooled representation over two pyramids.
pub fn pooled_representation(
    pyr_cnn: &FeaturePyramid,
    pyr_vit: &FeaturePyramid,
) -> Result<ndarray::Array2<f64>> {
    let n = pyr_cnn.maps()[0].shape()[0];
    if pyr_vit.maps()[0].shape()[0] != n {
        return Err(Error::shape("pooled_representation: batch size mismatch"));
    }
    let mut g = Graph::new();
    let load = |g: &mut Graph, p: &FeaturePyramid| -> [Var; 4] {
        let v: Vec<Var> = p.maps().iter().map(|m| g.constant(m.clone())).collect();
        [v[0], v[1], v[2], v[3]]
    };
    let a = load(&mut g, pyr_cnn);
    let b = load(&mut g, pyr_vit);
    let out = pooled_representation_g(&mut g, &a, &b);
    Ok(g.value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap())
}

/// A frozen feature network together with its CCM/CSM projectors: images in,
/// discriminator-ready pyramid out.
pub struct FeatureProjector {
    pub network: FeatureNetwork,
    pub projectors: ProjectorParams,
}

impl FeatureProjector {
    pub fn build(spec: FeatureNetworkSpec) -> Result<Self> {
        let projectors = ProjectorParams::build(spec.stage_channels, spec.seed ^ 0x5ca1e);
        let network = FeatureNetwork::build(spec)?;
        Ok(FeatureProjector {
            network,
            projectors,
        })
    }

    pub fn pyramid_g(&self, g: &mut Graph, x: Var) -> Result<[Var; 4]> {
        let stages = self.network.forward_stages(g, x)?;
        let mixed = ccm_apply_g(g, &stages, &self.projectors)?;
        Ok(csm_apply_g(g, &mixed, &self.projectors))
    }

    /// Value-level pyramid for callers outside a training graph.
    pub fn pyramid(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let maps = self.pyramid_g(&mut g, x)?;
        FeaturePyramid::new([
            g.value(maps[0]).clone(),
            g.value(maps[1]).clone(),
            g.value(maps[2]).clone(),
            g.value(maps[3]).clone(),
        ])
    }

    pub fn flat_weights(&self) -> Vec<&Tensor> {
        let mut w = self.network.flat_weights();
        w.extend(self.projectors.flat_weights());
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_images(seed: u64, n: usize, r: usize) -> Tensor {
        let mut rng = RngStream::new(seed);
        let mut t = Tensor::zeros(IxDyn(&[n, 3, r, r]));
        for v in t.iter_mut() {
            *v = rng.uniform_range(-1.0, 1.0);
        }
        t
    }

    #[test]
    fn conv_stage_shapes_at_64() {
        let net = FeatureNetwork::build(FeatureNetworkSpec::conv(7)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(rand_images(1, 2, 64));
        let stages = net.forward_stages(&mut g, x).unwrap();
        let want = [(8usize, 16usize), (16, 8), (32, 4), (64, 2)];
        for (s, (c, h)) in stages.iter().zip(want) {
            assert_eq!(g.value(*s).shape(), &[2, c, h, h]);
        }
    }

    #[test]
    fn patch_stage_shapes_at_64() {
        let net = FeatureNetwork::build(FeatureNetworkSpec::patch_attention(9)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(rand_images(2, 1, 64));
        let stages = net.forward_stages(&mut g, x).unwrap();
        let want = [(8usize, 16usize), (16, 8), (32, 4), (64, 2)];
        for (s, (c, h)) in stages.iter().zip(want) {
            assert_eq!(g.value(*s).shape(), &[1, c, h, h]);
        }
    }

    #[test]
    fn indivisible_resolution_rejected() {
        let net = FeatureNetwork::build(FeatureNetworkSpec::conv(7)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(IxDyn(&[1, 3, 48, 48])));
        assert!(net.forward_stages(&mut g, x).is_err());
    }

    #[test]
    fn patch_stage_shapes_at_32_with_small_grid() {
        let mut spec = FeatureNetworkSpec::patch_attention(9);
        spec.grid_side = 8;
        let net = FeatureNetwork::build(spec).unwrap();
        let mut g = Graph::new();
        let x = g.constant(rand_images(2, 2, 32));
        let stages = net.forward_stages(&mut g, x).unwrap();
        let want = [(8usize, 8usize), (16, 4), (32, 2), (64, 1)];
        for (s, (c, h)) in stages.iter().zip(want) {
            assert_eq!(g.value(*s).shape(), &[2, c, h, h]);
        }
        // the default 16-grid network rejects the same input
        let wide = FeatureNetwork::build(FeatureNetworkSpec::patch_attention(9)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(rand_images(2, 2, 32));
        assert!(wide.forward_stages(&mut g, x).is_err());
    }

    #[test]
    fn same_seed_same_outputs() {
        let a = FeatureNetwork::build(FeatureNetworkSpec::conv(123)).unwrap();
        let b = FeatureNetwork::build(FeatureNetworkSpec::conv(123)).unwrap();
        let x = rand_images(5, 1, 32);
        let run = |net: &FeatureNetwork| -> Vec<Tensor> {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            net.forward_stages(&mut g, xv)
                .unwrap()
                .iter()
                .map(|s| g.value(*s).clone())
                .collect()
        };
        assert_eq!(run(&a), run(&b));
        // and the weights themselves are bit-identical
        for (wa, wb) in a.flat_weights().iter().zip(b.flat_weights()) {
            assert_eq!(*wa, wb);
        }
    }

    #[test]
    fn identity_ccm_is_identity() {
        let params = ProjectorParams::build([2, 3, 4, 5], 1).with_identity_ccm();
        let mut g = Graph::new();
        let stages_t: Vec<Tensor> = [2usize, 3, 4, 5]
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let h = 16 >> i;
                let mut t = Tensor::zeros(IxDyn(&[1, c, h, h]));
                for (j, v) in t.iter_mut().enumerate() {
                    *v = (j as f64 * 0.3).sin();
                }
                t
            })
            .collect();
        let stages: Vec<Var> = stages_t.iter().map(|t| g.constant(t.clone())).collect();
        let stages = [stages[0], stages[1], stages[2], stages[3]];
        let out = ccm_apply_g(&mut g, &stages, &params).unwrap();
        for (o, t) in out.iter().zip(stages_t.iter()) {
            assert_eq!(g.value(*o), t);
        }
    }

    #[test]
    fn ccm_single_pixel_matrix_multiply() {
        let mut params = ProjectorParams::build([2, 2, 2, 2], 1);
        // weights [[1,1],[1,-1]] at stage 0: out_c0 = in0 + in1, out_c1 = in0 - in1
        let mut w = Tensor::zeros(IxDyn(&[2, 2, 1, 1]));
        w[[0, 0, 0, 0]] = 1.0;
        w[[0, 1, 0, 0]] = 1.0;
        w[[1, 0, 0, 0]] = 1.0;
        w[[1, 1, 0, 0]] = -1.0;
        params.ccm[0] = w;
        let mut g = Graph::new();
        let mut x0 = Tensor::zeros(IxDyn(&[1, 2, 8, 8]));
        for v in x0.slice_mut(ndarray::s![0usize, 0usize, .., ..]).iter_mut() {
            *v = 3.0;
        }
        for v in x0.slice_mut(ndarray::s![0usize, 1usize, .., ..]).iter_mut() {
            *v = 1.0;
        }
        let mk = |g: &mut Graph, h: usize| g.constant(Tensor::zeros(IxDyn(&[1, 2, h, h])));
        let s0 = g.constant(x0);
        let s1 = mk(&mut g, 4);
        let s2 = mk(&mut g, 2);
        let s3 = mk(&mut g, 1);
        let out = ccm_apply_g(&mut g, &[s0, s1, s2, s3], &params).unwrap();
        assert_eq!(g.value(out[0])[[0, 0, 3, 3]], 4.0);
        assert_eq!(g.value(out[0])[[0, 1, 3, 3]], 2.0);
    }

    #[test]
    fn ccm_is_linear() {
        let params = ProjectorParams::build(DEFAULT_STAGE_CHANNELS, 3);
        let run = |scale: f64| -> Vec<Tensor> {
            let mut g = Graph::new();
            let stv: Vec<Var> = (0..4)
                .map(|i| {
                    let h = 16 >> i;
                    let c = DEFAULT_STAGE_CHANNELS[i];
                    let mut t = Tensor::zeros(IxDyn(&[1, c, h, h]));
                    for (j, v) in t.iter_mut().enumerate() {
                        *v = ((j as f64) * 0.17).cos() * scale;
                    }
                    g.constant(t)
                })
                .collect();
            let out = ccm_apply_g(&mut g, &[stv[0], stv[1], stv[2], stv[3]], &params).unwrap();
            out.iter().map(|o| g.value(*o).clone()).collect()
        };
        let base = run(1.0);
        let scaled = run(2.5);
        for (b, s) in base.iter().zip(scaled.iter()) {
            for (bv, sv) in b.iter().zip(s.iter()) {
                assert!((sv - 2.5 * bv).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn csm_zero_stages_give_zero_pyramid() {
        let params = ProjectorParams::build(DEFAULT_STAGE_CHANNELS, 5);
        let mut g = Graph::new();
        let stages: Vec<Var> = (0..4)
            .map(|i| {
                let h = 16 >> i;
                g.constant(Tensor::zeros(IxDyn(&[2, DEFAULT_STAGE_CHANNELS[i], h, h])))
            })
            .collect();
        let out = csm_apply_g(&mut g, &[stages[0], stages[1], stages[2], stages[3]], &params);
        for o in out {
            assert!(g.value(o).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn csm_top_down_causality() {
        // zeroing a shallow stage must not change deeper outputs; zeroing a
        // deep stage must change shallower outputs (generically)
        let params = ProjectorParams::build(DEFAULT_STAGE_CHANNELS, 6);
        let mut rng = RngStream::new(77);
        let stage_t: Vec<Tensor> = (0..4)
            .map(|i| {
                let h = 16 >> i;
                let mut t = Tensor::zeros(IxDyn(&[1, DEFAULT_STAGE_CHANNELS[i], h, h]));
                for v in t.iter_mut() {
                    *v = rng.uniform_range(-1.0, 1.0);
                }
                t
            })
            .collect();
        let run = |zeroed: Option<usize>| -> Vec<Tensor> {
            let mut g = Graph::new();
            let stages: Vec<Var> = stage_t
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    if zeroed == Some(i) {
                        g.constant(Tensor::zeros(t.raw_dim()))
                    } else {
                        g.constant(t.clone())
                    }
                })
                .collect();
            csm_apply_g(&mut g, &[stages[0], stages[1], stages[2], stages[3]], &params)
                .iter()
                .map(|o| g.value(*o).clone())
                .collect()
        };
        let base = run(None);
        let no_s0 = run(Some(0));
        // level 1..3 outputs unchanged when stage 0 is zeroed
        for lvl in 1..4 {
            assert_eq!(base[lvl], no_s0[lvl], "level {lvl} depends on stage 0");
        }
        assert_ne!(base[0], no_s0[0]);
        let no_s3 = run(Some(3));
        for lvl in 0..4 {
            assert_ne!(base[lvl], no_s3[lvl], "level {lvl} should depend on stage 3");
        }
    }

    #[test]
    fn pooled_representation_dims_and_constant_case() {
        let maps_a: [Tensor; 4] = [
            Tensor::from_elem(IxDyn(&[2, 8, 16, 16]), 0.5),
            Tensor::from_elem(IxDyn(&[2, 16, 8, 8]), 0.5),
            Tensor::from_elem(IxDyn(&[2, 32, 4, 4]), 0.5),
            Tensor::from_elem(IxDyn(&[2, 64, 2, 2]), 0.5),
        ];
        let pyr_a = FeaturePyramid::new(maps_a.clone()).unwrap();
        let pyr_b = FeaturePyramid::new(maps_a).unwrap();
        let v = pooled_representation(&pyr_a, &pyr_b).unwrap();
        assert_eq!(v.dim(), (2, 240));
        assert!(v.iter().all(|x| (*x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn pooled_representation_spatial_permutation_invariant() {
        let mut rng = RngStream::new(42);
        let mut m0 = Tensor::zeros(IxDyn(&[1, 2, 8, 8]));
        for v in m0.iter_mut() {
            *v = rng.uniform_range(-1.0, 1.0);
        }
        let mut permuted = m0.clone();
        permuted.swap([0, 0, 0, 0], [0, 0, 7, 7]);
        permuted.swap([0, 1, 1, 2], [0, 1, 6, 1]);

        let build = |top: &Tensor| {
            FeaturePyramid::new([
                top.clone(),
                Tensor::zeros(IxDyn(&[1, 2, 4, 4])),
                Tensor::zeros(IxDyn(&[1, 2, 2, 2])),
                Tensor::zeros(IxDyn(&[1, 2, 1, 1])),
            ])
            .unwrap()
        };
        let a = build(&m0);
        let b = build(&permuted);
        let other = build(&Tensor::zeros(IxDyn(&[1, 2, 8, 8])));
        let va = pooled_representation(&a, &other).unwrap();
        let vb = pooled_representation(&b, &other).unwrap();
        for (x, y) in va.iter().zip(vb.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn pyramid_rejects_non_halving_sizes() {
        let maps = [
            Tensor::zeros(IxDyn(&[1, 2, 4, 4])),
            Tensor::zeros(IxDyn(&[1, 2, 2, 2])),
            Tensor::zeros(IxDyn(&[1, 2, 1, 1])),
            Tensor::zeros(IxDyn(&[1, 2, 1, 1])),
        ];
        assert!(FeaturePyramid::new(maps).is_err());
    }

    #[test]
    fn frozen_weights_do_not_change_on_forward_backward() {
        let proj = FeatureProjector::build(FeatureNetworkSpec::conv(11)).unwrap();
        let before: Vec<Tensor> = proj.flat_weights().iter().map(|t| (*t).clone()).collect();
        let mut g = Graph::new();
        let x = g.leaf(rand_images(3, 1, 32));
        let pyr = proj.pyramid_g(&mut g, x).unwrap();
        let s = g.sum_all(pyr[0]);
        let s2 = g.sum_all(pyr[3]);
        let total = g.add(s, s2);
        g.backward(total);
        assert!(g.grad(x).is_some());
        let after: Vec<Tensor> = proj.flat_weights().iter().map(|t| (*t).clone()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn gradient_flows_through_projectors_to_pixels() {
        use crate::gradcheck::{max_rel_error, numerical_grad, FD_STEP};
        let proj = FeatureProjector::build(FeatureNetworkSpec::conv(21)).unwrap();
        let x0 = rand_images(9, 1, 32);
        let eval = |x: &Tensor| -> f64 {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let pyr = proj.pyramid_g(&mut g, xv).unwrap();
            let s = g.sum_all(pyr[0]);
            g.scalar_value(s)
        };
        let mut g = Graph::new();
        let xv = g.leaf(x0.clone());
        let pyr = proj.pyramid_g(&mut g, xv).unwrap();
        let s = g.sum_all(pyr[0]);
        g.backward(s);
        let analytic = g.grad(xv).unwrap().clone();
        assert!(analytic.iter().any(|v| v.abs() > 1e-8), "gradient all zero");
        let numeric = numerical_grad(eval, &x0, FD_STEP);
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < 1e-4, "rel err {err:.3e}");
    }
}
