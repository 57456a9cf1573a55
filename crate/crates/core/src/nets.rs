//! Trainable networks: the skip-excitation upsampling generator, the bank of
//! spectrally-normalized patch discriminators, the FakeTwins linear head,
//! spectral normalization itself, generator weight averaging, and the Adam
//! optimizer.
//!
//! Weights are plain tensors owned by the network structs. A training
//! forward loads them onto the tape as gradient-carrying leaves and returns
//! the handles in the same order as [`weights`](Generator::weights), so the
//! trainer can read gradients and feed them to the optimizer positionally.
//! Evaluation forwards load weights as constants and keep the tape small.

use ndarray::IxDyn;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::RngStream;
use crate::tensor::{dims2, dims4, Tensor};

pub const LEAK: f64 = 0.2;
const BN_EPS: f64 = 1e-5;

fn kaiming_uniform(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let limit = (6.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(IxDyn(shape));
    for v in t.iter_mut() {
        *v = rng.uniform_range(-limit, limit);
    }
    t
}

/// Loads a weight tensor as a trainable leaf or frozen constant.
fn load(g: &mut Graph, w: &Tensor, train: bool) -> Var {
    if train {
        g.leaf(w.clone())
    } else {
        g.constant(w.clone())
    }
}

/// Batch norm over (N, H, W) with batch statistics; gamma/beta are [C].
fn bn2d_g(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Var {
    let (n, c, h, w) = dims4(g.value(x));
    let mean = g.mean_axes(x, &[0, 2, 3]); // [1, C, 1, 1]
    let mean_b = g.broadcast(mean, &[n, c, h, w]);
    let centered = g.sub(x, mean_b);
    let sq = g.sqr(centered);
    let var = g.mean_axes(sq, &[0, 2, 3]);
    let var_eps = g.add_scalar(var, BN_EPS);
    let std = g.sqrt(var_eps);
    let std_b = g.broadcast(std, &[n, c, h, w]);
    let normed = g.div(centered, std_b);
    let ga = g.reshape(gamma, &[1, c, 1, 1]);
    let ga_b = g.broadcast(ga, &[n, c, h, w]);
    let be = g.reshape(beta, &[1, c, 1, 1]);
    let be_b = g.broadcast(be, &[n, c, h, w]);
    let scaled = g.mul(normed, ga_b);
    g.add(scaled, be_b)
}

/// Batch norm over the batch axis of [N, D] activations. Returns the
/// normalized node plus the batch statistics as values (for running-stat
/// tracking).
fn bn1d_g(g: &mut Graph, x: Var, gamma: Var, beta: Var) -> (Var, Tensor, Tensor) {
    let (n, d) = dims2(g.value(x));
    let mean = g.mean_axes(x, &[0]); // [1, D]
    let mean_b = g.broadcast(mean, &[n, d]);
    let centered = g.sub(x, mean_b);
    let sq = g.sqr(centered);
    let var = g.mean_axes(sq, &[0]);
    let var_eps = g.add_scalar(var, BN_EPS);
    let std = g.sqrt(var_eps);
    let std_b = g.broadcast(std, &[n, d]);
    let normed = g.div(centered, std_b);
    let ga = g.reshape(gamma, &[1, d]);
    let ga_b = g.broadcast(ga, &[n, d]);
    let be = g.reshape(beta, &[1, d]);
    let be_b = g.broadcast(be, &[n, d]);
    let scaled = g.mul(normed, ga_b);
    let out = g.add(scaled, be_b);
    let mean_v = g.value(mean).clone();
    let var_v = g.value(var).clone();
    (out, mean_v, var_v)
}

// ---- generator ----

struct SeGate {
    w1: Tensor, // [mid, c_low, 1, 1]
    w2: Tensor, // [c_high, mid, 1, 1]
}

struct GenBlock {
    conv: Tensor, // [c_out, c_in, 3, 3]
    gamma: Tensor,
    beta: Tensor,
    se: Option<SeGate>,
}

/// Toy FastGAN-style generator: a linear stem to a 4x4 map, then nearest-up
/// conv/BN/leaky blocks, with skip-excitation gates modulating each block
/// (from the second onward) by a squeeze of the output two blocks below.
/// The final 3x3 conv + tanh bounds outputs to [-1, 1].
pub struct Generator {
    z_dim: usize,
    resolution: usize,
    channels: Vec<usize>,
    w_fc: Tensor,
    b_fc: Tensor,
    blocks: Vec<GenBlock>,
    w_out: Tensor,
    b_out: Tensor,
}

impl Generator {
    pub fn build(z_dim: usize, resolution: usize, base_channels: usize, seed: u64) -> Result<Self> {
        if z_dim == 0 {
            return Err(Error::InvalidArgument("z_dim must be nonzero".into()));
        }
        if resolution < 8 || !resolution.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "generator resolution must be a power of two >= 8, got {resolution}"
            )));
        }
        let n_ups = (resolution / 4).trailing_zeros() as usize;
        let mut channels = Vec::with_capacity(n_ups + 1);
        let mut c = base_channels.max(8);
        channels.push(c);
        for _ in 0..n_ups {
            c = (c / 2).max(8);
            channels.push(c);
        }
        let mut rng = RngStream::new(seed).substream(0x67656e); // "gen"
        let w_fc = kaiming_uniform(&mut rng, &[z_dim, channels[0] * 16]);
        let b_fc = Tensor::zeros(IxDyn(&[channels[0] * 16]));
        let mut blocks = Vec::with_capacity(n_ups);
        for i in 0..n_ups {
            let (cin, cout) = (channels[i], channels[i + 1]);
            let conv = kaiming_uniform(&mut rng, &[cout, cin, 3, 3]);
            let se = if i >= 2 {
                let c_low = channels[i - 1]; // output width of block i-2
                let mid = (cout / 4).max(4);
                Some(SeGate {
                    w1: kaiming_uniform(&mut rng, &[mid, c_low, 1, 1]),
                    w2: kaiming_uniform(&mut rng, &[cout, mid, 1, 1]),
                })
            } else {
                None
            };
            blocks.push(GenBlock {
                conv,
                gamma: Tensor::from_elem(IxDyn(&[cout]), 1.0),
                beta: Tensor::zeros(IxDyn(&[cout])),
                se,
            });
        }
        let w_out = kaiming_uniform(&mut rng, &[3, channels[n_ups], 3, 3]);
        let b_out = Tensor::zeros(IxDyn(&[3]));
        Ok(Generator {
            z_dim,
            resolution,
            channels,
            w_fc,
            b_fc,
            blocks,
            w_out,
            b_out,
        })
    }

    pub fn z_dim(&self) -> usize {
        self.z_dim
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Trainable tensors in the fixed order used by forward handles,
    /// optimizer state, EMA shadows, and checkpoints.
    pub fn weights(&self) -> Vec<&Tensor> {
        let mut w = vec![&self.w_fc, &self.b_fc];
        for b in &self.blocks {
            w.extend([&b.conv, &b.gamma, &b.beta]);
            if let Some(se) = &b.se {
                w.extend([&se.w1, &se.w2]);
            }
        }
        w.extend([&self.w_out, &self.b_out]);
        w
    }

    pub fn weights_mut(&mut self) -> Vec<&mut Tensor> {
        let mut w: Vec<&mut Tensor> = vec![&mut self.w_fc, &mut self.b_fc];
        for b in &mut self.blocks {
            w.push(&mut b.conv);
            w.push(&mut b.gamma);
            w.push(&mut b.beta);
            if let Some(se) = &mut b.se {
                w.push(&mut se.w1);
                w.push(&mut se.w2);
            }
        }
        w.push(&mut self.w_out);
        w.push(&mut self.b_out);
        w
    }

    pub fn set_weights(&mut self, new: &[Tensor]) -> Result<()> {
        let mut mine = self.weights_mut();
        if mine.len() != new.len() {
            return Err(Error::shape(format!(
                "generator expects {} weight tensors, got {}",
                mine.len(),
                new.len()
            )));
        }
        for (dst, src) in mine.iter_mut().zip(new) {
            if dst.shape() != src.shape() {
                return Err(Error::shape("generator weight shape mismatch"));
            }
            **dst = src.clone();
        }
        Ok(())
    }

    /// Loads every trainable tensor onto the tape (leaves when `train`),
    /// returning handles in [`weights`](Self::weights) order.
    pub fn load_weights_g(&self, g: &mut Graph, train: bool) -> Vec<Var> {
        self.weights().iter().map(|w| load(g, w, train)).collect()
    }

    /// Forward pass through pre-loaded weight handles. Several forwards in
    /// one graph can share the same handles, so gradients from every use of
    /// a weight accumulate on one leaf.
    pub fn forward_with(&self, g: &mut Graph, z: Var, handles: &[Var]) -> Result<Var> {
        if handles.len() != self.weights().len() {
            return Err(Error::shape(format!(
                "generator expects {} weight handles, got {}",
                self.weights().len(),
                handles.len()
            )));
        }
        let (n, zd) = dims2(g.value(z));
        if zd != self.z_dim {
            return Err(Error::shape(format!(
                "latent dim {zd} does not match generator z_dim {}",
                self.z_dim
            )));
        }
        if n < 2 {
            return Err(Error::BatchTooSmall);
        }
        let mut idx = 0usize;
        let mut take = || {
            let v = handles[idx];
            idx += 1;
            v
        };

        let (wfc, bfc) = (take(), take());
        let h = g.linear(z, wfc, bfc);
        let h = g.reshape(h, &[n, self.channels[0], 4, 4]);
        let mut x = g.leaky_relu(h, LEAK);
        let mut stage_outputs: Vec<Var> = Vec::with_capacity(self.blocks.len());

        for (i, blk) in self.blocks.iter().enumerate() {
            let (wc, ga, be) = (take(), take(), take());
            let up = g.nearest_up2(x);
            let conv = g.conv2d(up, wc, 1, 1);
            let bn = bn2d_g(g, conv, ga, be);
            let mut act = g.leaky_relu(bn, LEAK);

            if blk.se.is_some() {
                let (w1, w2) = (take(), take());
                let low = stage_outputs[i - 2];
                let pooled = g.mean_axes(low, &[2, 3]); // [n, c_low, 1, 1]
                let h1 = g.conv2d(pooled, w1, 1, 0);
                let h1 = g.leaky_relu(h1, LEAK);
                let h2 = g.conv2d(h1, w2, 1, 0);
                let gate = g.sigmoid(h2); // [n, c_out, 1, 1]
                let shape = g.value(act).shape().to_vec();
                let gate_b = g.broadcast(gate, &shape);
                act = g.mul(act, gate_b);
            }
            stage_outputs.push(act);
            x = act;
        }

        let (wo, bo) = (take(), take());
        let out = g.conv2d_bias(x, wo, bo, 1, 1);
        Ok(g.tanh(out))
    }

    /// Convenience: load weights and run one forward pass.
    pub fn forward_g(&self, g: &mut Graph, z: Var, train: bool) -> Result<(Var, Vec<Var>)> {
        let handles = self.load_weights_g(g, train);
        let img = self.forward_with(g, z, &handles)?;
        Ok((img, handles))
    }

    /// Value-level sampling: z batch in, images out.
    pub fn generate(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let (img, _) = self.forward_g(&mut g, zv, false)?;
        Ok(g.value(img).clone())
    }
}

// ---- spectral normalization ----

/// Persistent singular-vector estimates for one weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralNormState {
    pub u: Tensor, // [rows]
    pub v: Tensor, // [cols]
}

impl SpectralNormState {
    pub fn init(rows: usize, cols: usize, rng: &mut RngStream) -> Self {
        let mut u = Tensor::zeros(IxDyn(&[rows]));
        for x in u.iter_mut() {
            *x = rng.normal();
        }
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        u.mapv_inplace(|x| x / norm);
        SpectralNormState {
            u,
            v: Tensor::zeros(IxDyn(&[cols])),
        }
    }
}

/// One power-iteration step on the flattened weight, updating `state` and
/// returning the estimated top singular value. A zero (or numerically zero)
/// weight leaves the state alone and returns 0.
pub fn power_iterate(w: &Tensor, state: &mut SpectralNormState) -> f64 {
    let rows = w.shape()[0];
    let cols: usize = w.shape()[1..].iter().product();
    let w2 = w
        .view()
        .into_shape_with_order((rows, cols))
        .expect("weight reshape");
    let u_then = state.u.as_slice().unwrap().to_vec();

    // v = normalize(W^T u)
    let mut v = vec![0.0; cols];
    for r in 0..rows {
        let ur = u_then[r];
        for c in 0..cols {
            v[c] += w2[[r, c]] * ur;
        }
    }
    let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if vn < 1e-12 {
        return 0.0;
    }
    for x in v.iter_mut() {
        *x /= vn;
    }
    // u = normalize(W v)
    let mut u = vec![0.0; rows];
    for r in 0..rows {
        let mut s = 0.0;
        for c in 0..cols {
            s += w2[[r, c]] * v[c];
        }
        u[r] = s;
    }
    let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    if un < 1e-12 {
        return 0.0;
    }
    for x in u.iter_mut() {
        *x /= un;
    }
    // sigma = u^T W v
    let mut sigma = 0.0;
    for r in 0..rows {
        let mut s = 0.0;
        for c in 0..cols {
            s += w2[[r, c]] * v[c];
        }
        sigma += u[r] * s;
    }
    state.u = Tensor::from_shape_vec(IxDyn(&[rows]), u).unwrap();
    state.v = Tensor::from_shape_vec(IxDyn(&[cols]), v).unwrap();
    sigma
}

/// W / sigma_hat after one power-iteration step; the zero-matrix guard
/// returns W unchanged.
pub fn spectral_normalize(w: &Tensor, state: &mut SpectralNormState) -> Tensor {
    let sigma = power_iterate(w, state);
    if sigma < 1e-12 {
        return w.clone();
    }
    w.mapv(|x| x / sigma)
}

/// Graph-side spectral normalization: runs one power iteration numerically
/// (updating `state` when `train`), then divides the weight node by
/// sigma = u^T W v built from graph ops so gradients see the normalization.
fn spectral_normalize_g(
    g: &mut Graph,
    w_node: Var,
    w_value: &Tensor,
    state: &mut SpectralNormState,
    train: bool,
) -> Var {
    let sigma_probe = if train {
        power_iterate(w_value, state)
    } else {
        let mut scratch = state.clone();
        power_iterate(w_value, &mut scratch)
    };
    if sigma_probe < 1e-12 {
        return w_node;
    }
    let rows = w_value.shape()[0];
    let cols: usize = w_value.shape()[1..].iter().product();
    let shape = w_value.shape().to_vec();
    let u = g.constant(state.u.clone().into_shape_with_order(IxDyn(&[1, rows])).unwrap());
    let v = g.constant(state.v.clone().into_shape_with_order(IxDyn(&[cols, 1])).unwrap());
    let w2 = g.reshape(w_node, &[rows, cols]);
    let uw = g.matmul(u, w2); // [1, cols]
    let sigma = g.matmul(uw, v); // [1, 1]
    let inv = g.recip(sigma);
    let inv_r = g.reshape(inv, &[1, 1]);
    // broadcast the scalar across the flattened weight, then restore shape
    let inv_b = g.broadcast(inv_r, &[rows, cols]);
    let scaled = g.mul(w2, inv_b);
    g.reshape(scaled, &shape)
}

// ---- discriminators ----

struct SnConv {
    w: Tensor,
    b: Tensor,
    state: SpectralNormState,
    stride: usize,
    pad: usize,
}

impl SnConv {
    fn build(cout: usize, cin: usize, k: usize, pad: usize, rng: &mut RngStream) -> Self {
        let w = kaiming_uniform(rng, &[cout, cin, k, k]);
        let state = SpectralNormState::init(cout, cin * k * k, rng);
        SnConv {
            w,
            b: Tensor::zeros(IxDyn(&[cout])),
            state,
            stride: 1,
            pad,
        }
    }

    /// Loads the weight, runs one power-iteration step, and returns
    /// (raw handle, bias handle, normalized weight node).
    fn prepare_g(&mut self, g: &mut Graph, train: bool) -> (Var, Var, Var) {
        let w_node = load(g, &self.w, train);
        let b_node = load(g, &self.b, train);
        let w_sn = spectral_normalize_g(g, w_node, &self.w, &mut self.state, train);
        (w_node, b_node, w_sn)
    }
}

/// One patch discriminator: three spectrally-normalized convolutions ending
/// in a 1-channel spatial logit map.
struct DiscHead {
    convs: [SnConv; 3],
}

impl DiscHead {
    fn build(in_channels: usize, width: usize, rng: &mut RngStream) -> Self {
        DiscHead {
            convs: [
                SnConv::build(width, in_channels, 3, 1, rng),
                SnConv::build(width, width, 3, 1, rng),
                SnConv::build(1, width, 1, 0, rng),
            ],
        }
    }

    fn forward_prepared(&self, g: &mut Graph, x: Var, prep: &[(Var, Var, Var)]) -> Var {
        let conv = |g: &mut Graph, x: Var, c: &SnConv, p: &(Var, Var, Var)| -> Var {
            g.conv2d_bias(x, p.2, p.1, c.stride, c.pad)
        };
        let h = conv(g, x, &self.convs[0], &prep[0]);
        let h = g.leaky_relu(h, LEAK);
        let h = conv(g, h, &self.convs[1], &prep[1]);
        let h = g.leaky_relu(h, LEAK);
        conv(g, h, &self.convs[2], &prep[2])
    }
}

/// One step's loaded discriminator weights: raw handles for gradient
/// readout plus normalized weight nodes shared by every forward this step.
pub struct PreparedBank {
    per_conv: Vec<(Var, Var, Var)>, // (w handle, b handle, normalized w)
}

impl PreparedBank {
    /// Trainable handles in [`DiscriminatorBank::weights`] order.
    pub fn handles(&self) -> Vec<Var> {
        self.per_conv.iter().flat_map(|p| [p.0, p.1]).collect()
    }
}

/// Independent discriminators, one per input map. The map list is a run
/// configuration: a single raw-image discriminator for the baseline config,
/// four pyramid levels for one feature network, eight for two.
pub struct DiscriminatorBank {
    heads: Vec<DiscHead>,
    in_channels: Vec<usize>,
}

impl DiscriminatorBank {
    pub fn build(in_channels: &[usize], width: usize, seed: u64) -> Self {
        let mut rng = RngStream::new(seed).substream(0x64_6973_63); // "disc"
        let heads = in_channels
            .iter()
            .map(|&c| DiscHead::build(c, width, &mut rng))
            .collect();
        DiscriminatorBank {
            heads,
            in_channels: in_channels.to_vec(),
        }
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn in_channels(&self) -> &[usize] {
        &self.in_channels
    }

    /// Loads all conv weights and runs one power-iteration step per conv
    /// (updating the singular-vector state only when `train`). The returned
    /// normalized weights are shared by every forward built from them, so
    /// real and fake batches see identical effective weights this step.
    pub fn prepare_g(&mut self, g: &mut Graph, train: bool) -> PreparedBank {
        let mut per_conv = Vec::with_capacity(self.heads.len() * 3);
        for h in &mut self.heads {
            for c in &mut h.convs {
                per_conv.push(c.prepare_g(g, train));
            }
        }
        PreparedBank { per_conv }
    }

    /// Forwards each map through its own head using prepared weights,
    /// returning one spatial logit map per head.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        maps: &[Var],
        prep: &PreparedBank,
    ) -> Result<Vec<Var>> {
        if maps.len() != self.heads.len() {
            return Err(Error::shape(format!(
                "discriminator bank has {} heads but got {} maps",
                self.heads.len(),
                maps.len()
            )));
        }
        Ok(self
            .heads
            .iter()
            .zip(maps)
            .enumerate()
            .map(|(i, (head, &m))| head.forward_prepared(g, m, &prep.per_conv[i * 3..i * 3 + 3]))
            .collect())
    }

    /// Convenience: prepare then forward once.
    pub fn forward_g(
        &mut self,
        g: &mut Graph,
        maps: &[Var],
        train: bool,
    ) -> Result<(Vec<Var>, Vec<Var>)> {
        let prep = self.prepare_g(g, train);
        let logits = self.forward_with(g, maps, &prep)?;
        Ok((logits, prep.handles()))
    }

    pub fn weights(&self) -> Vec<&Tensor> {
        let mut w = Vec::new();
        for h in &self.heads {
            for c in &h.convs {
                w.extend([&c.w, &c.b]);
            }
        }
        w
    }

    pub fn weights_mut(&mut self) -> Vec<&mut Tensor> {
        let mut w: Vec<&mut Tensor> = Vec::new();
        for h in &mut self.heads {
            for c in &mut h.convs {
                w.push(&mut c.w);
                w.push(&mut c.b);
            }
        }
        w
    }

    /// Spectral-norm singular-vector estimates (buffers, not optimized).
    pub fn sn_states(&self) -> Vec<&SpectralNormState> {
        self.heads
            .iter()
            .flat_map(|h| h.convs.iter().map(|c| &c.state))
            .collect()
    }

    pub fn sn_states_mut(&mut self) -> Vec<&mut SpectralNormState> {
        self.heads
            .iter_mut()
            .flat_map(|h| h.convs.iter_mut().map(|c| &mut c.state))
            .collect()
    }
}

// ---- linear head ----

/// Three affine layers with 512 outputs each; batch norm + ReLU after
/// layers 1 and 2. Running statistics are tracked for completeness but the
/// training path always uses batch statistics.
pub struct LinearHead {
    in_dim: usize,
    out_dim: usize,
    w1: Tensor,
    b1: Tensor,
    g1: Tensor,
    be1: Tensor,
    w2: Tensor,
    b2: Tensor,
    g2: Tensor,
    be2: Tensor,
    w3: Tensor,
    b3: Tensor,
    pub running_mean1: Tensor,
    pub running_var1: Tensor,
    pub running_mean2: Tensor,
    pub running_var2: Tensor,
}

const BN_MOMENTUM: f64 = 0.1;

impl LinearHead {
    pub fn build(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = RngStream::new(seed).substream(0x68656164); // "head"
        LinearHead {
            in_dim,
            out_dim,
            w1: kaiming_uniform(&mut rng, &[in_dim, out_dim]),
            b1: Tensor::zeros(IxDyn(&[out_dim])),
            g1: Tensor::from_elem(IxDyn(&[out_dim]), 1.0),
            be1: Tensor::zeros(IxDyn(&[out_dim])),
            w2: kaiming_uniform(&mut rng, &[out_dim, out_dim]),
            b2: Tensor::zeros(IxDyn(&[out_dim])),
            g2: Tensor::from_elem(IxDyn(&[out_dim]), 1.0),
            be2: Tensor::zeros(IxDyn(&[out_dim])),
            w3: kaiming_uniform(&mut rng, &[out_dim, out_dim]),
            b3: Tensor::zeros(IxDyn(&[out_dim])),
            running_mean1: Tensor::zeros(IxDyn(&[1, out_dim])),
            running_var1: Tensor::from_elem(IxDyn(&[1, out_dim]), 1.0),
            running_mean2: Tensor::zeros(IxDyn(&[1, out_dim])),
            running_var2: Tensor::from_elem(IxDyn(&[1, out_dim]), 1.0),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> Vec<&Tensor> {
        vec![
            &self.w1, &self.b1, &self.g1, &self.be1, &self.w2, &self.b2, &self.g2, &self.be2,
            &self.w3, &self.b3,
        ]
    }

    pub fn weights_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.g1,
            &mut self.be1,
            &mut self.w2,
            &mut self.b2,
            &mut self.g2,
            &mut self.be2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    /// Loads the ten trainable tensors in [`weights`](Self::weights) order.
    pub fn load_weights_g(&self, g: &mut Graph, train: bool) -> Vec<Var> {
        self.weights().iter().map(|w| load(g, w, train)).collect()
    }

    /// Forward over [N, in_dim] with batch statistics (N >= 2), through
    /// pre-loaded handles. `train` updates the running statistics.
    pub fn forward_with(
        &mut self,
        g: &mut Graph,
        x: Var,
        handles: &[Var],
        train: bool,
    ) -> Result<Var> {
        if handles.len() != 10 {
            return Err(Error::shape(format!(
                "head expects 10 weight handles, got {}",
                handles.len()
            )));
        }
        let (n, d) = dims2(g.value(x));
        if d != self.in_dim {
            return Err(Error::shape(format!(
                "head expects input dim {}, got {d}",
                self.in_dim
            )));
        }
        if n < 2 {
            return Err(Error::BatchTooSmall);
        }
        let [w1, b1, g1, be1, w2, b2, g2, be2, w3, b3] = handles.try_into().unwrap();

        let h1 = g.linear(x, w1, b1);
        let (h1n, m1, v1) = bn1d_g(g, h1, g1, be1);
        let h1a = g.relu(h1n);

        let h2 = g.linear(h1a, w2, b2);
        let (h2n, m2, v2) = bn1d_g(g, h2, g2, be2);
        let h2a = g.relu(h2n);

        let out = g.linear(h2a, w3, b3);

        if train {
            let blend = |run: &mut Tensor, batch: &Tensor| {
                ndarray::Zip::from(run)
                    .and(batch)
                    .for_each(|r, &b| *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b);
            };
            blend(&mut self.running_mean1, &m1);
            blend(&mut self.running_var1, &v1);
            blend(&mut self.running_mean2, &m2);
            blend(&mut self.running_var2, &v2);
        }
        Ok(out)
    }

    /// Convenience: load weights and run one forward pass.
    pub fn forward_g(&mut self, g: &mut Graph, x: Var, train: bool) -> Result<(Var, Vec<Var>)> {
        let handles = self.load_weights_g(g, train);
        let out = self.forward_with(g, x, &handles, train)?;
        Ok((out, handles))
    }
}

// ---- EMA ----

/// Shadow copy of a weight list blended toward the live weights.
#[derive(Debug, Clone)]
pub struct EmaState {
    shadow: Vec<Tensor>,
    pub decay: f64,
}

impl EmaState {
    pub fn new(weights: &[&Tensor], decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!(
                "ema decay must be in [0, 1), got {decay}"
            )));
        }
        Ok(EmaState {
            shadow: weights.iter().map(|w| (*w).clone()).collect(),
            decay,
        })
    }

    pub fn shadow(&self) -> &[Tensor] {
        &self.shadow
    }

    pub fn shadow_mut(&mut self) -> &mut Vec<Tensor> {
        &mut self.shadow
    }
}

/// shadow <- decay * shadow + (1 - decay) * current, elementwise.
pub fn ema_update(ema: &mut EmaState, current: &[&Tensor]) -> Result<()> {
    if current.len() != ema.shadow.len() {
        return Err(Error::shape(format!(
            "ema holds {} tensors, got {}",
            ema.shadow.len(),
            current.len()
        )));
    }
    let d = ema.decay;
    for (s, c) in ema.shadow.iter_mut().zip(current) {
        if s.shape() != c.shape() {
            return Err(Error::shape("ema shadow shape mismatch"));
        }
        ndarray::Zip::from(s).and(*c).for_each(|sv, &cv| {
            *sv = d * *sv + (1.0 - d) * cv;
        });
    }
    Ok(())
}

// ---- optimizer ----

/// Adam with bias correction. Moments are kept per weight tensor, in the
/// same order as the weight list it was built from.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weights: &[&Tensor]) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: weights.iter().map(|w| Tensor::zeros(w.raw_dim())).collect(),
            v: weights.iter().map(|w| Tensor::zeros(w.raw_dim())).collect(),
        }
    }

    /// Applies one update. `grads[i]` may be None when a weight did not
    /// participate in this step's graph (its moments still decay).
    pub fn step(&mut self, weights: Vec<&mut Tensor>, grads: &[Option<Tensor>]) -> Result<()> {
        if weights.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "optimizer built for {} tensors, got {} weights / {} grads",
                self.m.len(),
                weights.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((w, m), (v, grad)) in weights
            .into_iter()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut().zip(grads))
        {
            let zero = Tensor::zeros(w.raw_dim());
            let gref = grad.as_ref().unwrap_or(&zero);
            if gref.shape() != w.shape() {
                return Err(Error::shape("gradient shape mismatch"));
            }
            ndarray::Zip::from(&mut *m).and(gref).for_each(|mv, &gv| {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
            });
            ndarray::Zip::from(&mut *v).and(gref).for_each(|vv, &gv| {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            });
            ndarray::Zip::from(&mut **w)
                .and(&*m)
                .and(&*v)
                .for_each(|wv, &mv, &vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *wv -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
        Ok(())
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn moments_mut(&mut self) -> (&mut Vec<Tensor>, &mut Vec<Tensor>) {
        (&mut self.m, &mut self.v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_z(seed: u64, n: usize, d: usize) -> Tensor {
        let mut rng = RngStream::new(seed);
        let mut t = Tensor::zeros(IxDyn(&[n, d]));
        for v in t.iter_mut() {
            *v = rng.normal();
        }
        t
    }

    #[test]
    fn generator_shape_and_range() {
        let gen = Generator::build(64, 64, 32, 1).unwrap();
        let z = rand_z(2, 4, 64);
        let img = gen.generate(&z).unwrap();
        assert_eq!(img.shape(), &[4, 3, 64, 64]);
        assert!(img.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn generator_identical_z_rows_identical_outputs() {
        let gen = Generator::build(16, 32, 32, 3).unwrap();
        let mut z = rand_z(4, 4, 16);
        for i in 0..16 {
            let v = z[[0, i]];
            z[[2, i]] = v;
        }
        let img = gen.generate(&z).unwrap();
        let (a, b) = (
            img.index_axis(ndarray::Axis(0), 0).to_owned(),
            img.index_axis(ndarray::Axis(0), 2).to_owned(),
        );
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn generator_rejects_batch_of_one() {
        let gen = Generator::build(16, 32, 32, 3).unwrap();
        let z = rand_z(4, 1, 16);
        assert!(matches!(gen.generate(&z), Err(Error::BatchTooSmall)));
    }

    #[test]
    fn generator_handle_count_matches_weights() {
        let gen = Generator::build(16, 64, 32, 5).unwrap();
        let mut g = Graph::new();
        let z = g.constant(rand_z(6, 2, 16));
        let (_, handles) = gen.forward_g(&mut g, z, true).unwrap();
        assert_eq!(handles.len(), gen.weights().len());
    }

    #[test]
    fn spectral_norm_identity_unchanged() {
        let mut rng = RngStream::new(1);
        let mut w = Tensor::zeros(IxDyn(&[2, 2]));
        w[[0, 0]] = 1.0;
        w[[1, 1]] = 1.0;
        let mut st = SpectralNormState::init(2, 2, &mut rng);
        for _ in 0..20 {
            let out = spectral_normalize(&w, &mut st);
            for (a, b) in out.iter().zip(w.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn spectral_norm_scaled_identity_converges() {
        let mut rng = RngStream::new(2);
        let w = {
            let mut t = Tensor::zeros(IxDyn(&[2, 2]));
            t[[0, 0]] = 3.0;
            t[[1, 1]] = 3.0;
            t
        };
        let mut st = SpectralNormState::init(2, 2, &mut rng);
        let mut out = w.clone();
        for _ in 0..20 {
            out = spectral_normalize(&w, &mut st);
        }
        for (a, b) in out.iter().zip(w.iter()) {
            assert!((a - b / 3.0).abs() < 1e-6, "{a} vs {}", b / 3.0);
        }
    }

    #[test]
    fn spectral_norm_zero_matrix_guard() {
        let mut rng = RngStream::new(3);
        let w = Tensor::zeros(IxDyn(&[3, 4]));
        let mut st = SpectralNormState::init(3, 4, &mut rng);
        let out = spectral_normalize(&w, &mut st);
        assert_eq!(out, w);
    }

    #[test]
    fn spectral_norm_against_svd_oracle() {
        // dense SVD via nalgebra on a random 4x4
        let mut rng = RngStream::new(4);
        let mut w = Tensor::zeros(IxDyn(&[4, 4]));
        for v in w.iter_mut() {
            *v = rng.normal();
        }
        let mut st = SpectralNormState::init(4, 4, &mut rng);
        let mut out = w.clone();
        for _ in 0..50 {
            out = spectral_normalize(&w, &mut st);
        }
        let na = nalgebra::DMatrix::from_row_slice(4, 4, out.as_slice().unwrap());
        let svd = na.svd(false, false);
        let top = svd.singular_values.max();
        assert!((top - 1.0).abs() < 1e-3, "top singular value {top}");
    }

    #[test]
    fn discriminator_scale_invariance() {
        // doubling the raw weight leaves post-normalization logits nearly
        // unchanged once the singular-vector estimate has converged
        let mut bank = DiscriminatorBank::build(&[3], 8, 7);
        let x = {
            let mut rng = RngStream::new(8);
            let mut t = Tensor::zeros(IxDyn(&[2, 3, 8, 8]));
            for v in t.iter_mut() {
                *v = rng.uniform_range(-1.0, 1.0);
            }
            t
        };
        let run = |bank: &mut DiscriminatorBank, x: &Tensor| -> Tensor {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let (logits, _) = bank.forward_g(&mut g, &[xv], true).unwrap();
            g.value(logits[0]).clone()
        };
        // converge the power iteration
        for _ in 0..60 {
            run(&mut bank, &x);
        }
        let before = run(&mut bank, &x);
        for w in bank.weights_mut() {
            if w.ndim() == 4 {
                w.mapv_inplace(|v| v * 2.0);
            }
        }
        for _ in 0..60 {
            run(&mut bank, &x);
        }
        let after = run(&mut bank, &x);
        for (a, b) in before.iter().zip(after.iter()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_input_zero_bias_head_zero_preactivation() {
        let mut head = LinearHead::build(16, 512, 9);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(IxDyn(&[3, 16])));
        // probe the first affine layer only: zero in, zero bias -> zero out
        let wv = g.constant(head.w1.clone());
        let bv = g.constant(head.b1.clone());
        let pre = g.linear(x, wv, bv);
        assert!(g.value(pre).iter().all(|v| *v == 0.0));
        // and the full head emits 512-wide output
        let (out, _) = head.forward_g(&mut g, x, false).unwrap();
        assert_eq!(g.value(out).shape(), &[3, 512]);
    }

    #[test]
    fn head_rejects_singleton_batch() {
        let mut head = LinearHead::build(8, 512, 9);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(IxDyn(&[1, 8])));
        assert!(matches!(
            head.forward_g(&mut g, x, true),
            Err(Error::BatchTooSmall)
        ));
    }

    #[test]
    fn head_weight_gradients_match_fd() {
        use crate::gradcheck::{max_rel_error, numerical_grad, FD_STEP};
        let head = LinearHead::build(6, 8, 11);
        let x0 = rand_z(21, 4, 6);
        // gradient w.r.t. w1 of a scalar readout
        let eval_with_w1 = |w1: &Tensor, head: &LinearHead| -> f64 {
            let mut h = LinearHead::build(6, 8, 11);
            // copy all weights from `head`, override w1
            let src = head.weights();
            let mut dst = h.weights_mut();
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                **d = (*s).clone();
            }
            h.w1 = w1.clone();
            let mut g = Graph::new();
            let xv = g.constant(x0.clone());
            let (out, _) = h.forward_g(&mut g, xv, false).unwrap();
            let sq = g.sqr(out);
            let s = g.sum_all(sq);
            g.scalar_value(s)
        };
        let mut h = LinearHead::build(6, 8, 11);
        {
            let src = head.weights();
            let mut dst = h.weights_mut();
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                **d = (*s).clone();
            }
        }
        let mut g = Graph::new();
        let xv = g.constant(x0.clone());
        let (out, handles) = h.forward_g(&mut g, xv, true).unwrap();
        let sq = g.sqr(out);
        let s = g.sum_all(sq);
        g.backward(s);
        let analytic = g.grad(handles[0]).unwrap().clone();
        let w1_0 = head.w1.clone();
        let numeric = numerical_grad(|w| eval_with_w1(w, &head), &w1_0, FD_STEP);
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < 1e-4, "rel err {err:.3e}");
    }

    #[test]
    fn ema_update_formulas() {
        let w0 = Tensor::zeros(IxDyn(&[2, 2]));
        let ones = Tensor::from_elem(IxDyn(&[2, 2]), 1.0);

        // decay 0 -> shadow = current
        let mut ema = EmaState::new(&[&w0], 0.0).unwrap();
        ema_update(&mut ema, &[&ones]).unwrap();
        assert_eq!(ema.shadow()[0], ones);

        // one step from 0 toward 1 at decay 0.999
        let mut ema = EmaState::new(&[&w0], 0.999).unwrap();
        ema_update(&mut ema, &[&ones]).unwrap();
        for v in ema.shadow()[0].iter() {
            assert!((v - 0.001).abs() < 1e-15);
        }

        // geometric series: n constant steps
        let mut ema = EmaState::new(&[&w0], 0.999).unwrap();
        let c = 2.5;
        let cur = Tensor::from_elem(IxDyn(&[2, 2]), c);
        let n = 137;
        for _ in 0..n {
            ema_update(&mut ema, &[&cur]).unwrap();
        }
        let want = c * (1.0 - 0.999f64.powi(n));
        for v in ema.shadow()[0].iter() {
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_shape_mismatch_rejected() {
        let a = Tensor::zeros(IxDyn(&[2]));
        let b = Tensor::zeros(IxDyn(&[3]));
        let mut ema = EmaState::new(&[&a], 0.9).unwrap();
        assert!(ema_update(&mut ema, &[&b]).is_err());
    }

    #[test]
    fn adam_minimizes_quadratic() {
        // minimize (w - 3)^2 elementwise
        let mut w = Tensor::zeros(IxDyn(&[4]));
        let mut opt = Adam::new(0.1, 0.0, 0.99, 1e-8, &[&w]);
        for _ in 0..500 {
            let grad = w.mapv(|v| 2.0 * (v - 3.0));
            opt.step(vec![&mut w], &[Some(grad)]).unwrap();
        }
        for v in w.iter() {
            assert!((v - 3.0).abs() < 1e-3, "{v}");
        }
    }
}
