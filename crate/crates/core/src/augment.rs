//! Differentiable augmentations, the discriminator-input blur schedule,
//! latent-code perturbation, and dataset x-flip amplification.
//!
//! The image ops come in graph form (`*_g`) because generator gradients must
//! flow through them, plus pure wrappers over [`ImageBatch`] for callers that
//! only need values. Random parameters are drawn per sample from an explicit
//! [`RngStream`] in a fixed order (color → translation → cutout, samples in
//! batch order), so a given (seed, counter) reproduces the exact batch.

use ndarray::IxDyn;

use crate::error::{Error, Result};
use crate::graph::{Graph, PadMode, Var};
use crate::rng::RngStream;
use crate::tensor::{dims4, Tensor};

/// A batch of square images, NCHW, nominal value range [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    data: Tensor,
}

impl ImageBatch {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.ndim() != 4 {
            return Err(Error::shape(format!(
                "image batch must be NCHW, got rank {}",
                data.ndim()
            )));
        }
        let (_, _, h, w) = dims4(&data);
        if h != w || h < 8 || !h.is_power_of_two() {
            return Err(Error::shape(format!(
                "images must be square power-of-two >= 8, got {h}x{w}"
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("image batch contains non-finite values"));
        }
        Ok(ImageBatch { data })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn batch_size(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn resolution(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Which augmentation ops run and with what strength.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    pub color: bool,
    pub translation: bool,
    pub cutout: bool,
    /// Max translation as a fraction of image size (default 1/8).
    pub translation_frac: f64,
    /// Cutout side as a fraction of image size (default 1/2).
    pub cutout_frac: f64,
    /// Additive brightness shift drawn from U(-brightness, brightness).
    pub brightness: f64,
    /// Saturation factor drawn from U(1 - saturation, 1 + saturation).
    pub saturation: f64,
    /// Contrast factor drawn from U(1 - contrast, 1 + contrast).
    pub contrast: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            color: true,
            translation: true,
            cutout: true,
            translation_frac: 1.0 / 8.0,
            cutout_frac: 0.5,
            brightness: 0.5,
            saturation: 1.0,
            contrast: 0.5,
        }
    }
}

impl AugmentPolicy {
    pub fn none() -> Self {
        AugmentPolicy {
            color: false,
            translation: false,
            cutout: false,
            ..AugmentPolicy::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("translation fraction", self.translation_frac),
            ("cutout fraction", self.cutout_frac),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be in (0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Parses the config-file form, e.g. `"color,translation,cutout"`.
    /// An empty string disables every op.
    pub fn from_ops_str(s: &str) -> Result<Self> {
        let mut p = AugmentPolicy::none();
        for op in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            match op {
                "color" => p.color = true,
                "translation" => p.translation = true,
                "cutout" => p.cutout = true,
                other => {
                    return Err(Error::Config(format!("unknown augmentation op '{other}'")))
                }
            }
        }
        Ok(p)
    }

    pub fn ops_str(&self) -> String {
        let mut ops = Vec::new();
        if self.color {
            ops.push("color");
        }
        if self.translation {
            ops.push("translation");
        }
        if self.cutout {
            ops.push("cutout");
        }
        ops.join(",")
    }
}

// ---- diff_augment ----

/// Applies the enabled augmentations to a batch node. Random parameters are
/// per sample; the transform is differentiable in the input pixels.
pub fn diff_augment_g(
    g: &mut Graph,
    x: Var,
    policy: &AugmentPolicy,
    rng: &mut RngStream,
) -> Var {
    let (n, c, h, w) = dims4(g.value(x));
    let mut cur = x;

    if policy.color {
        // brightness: x + b, b ~ U(-range, range)
        let mut shifts = Tensor::zeros(IxDyn(&[n, 1, 1, 1]));
        for bi in 0..n {
            shifts[[bi, 0, 0, 0]] = rng.uniform_range(-policy.brightness, policy.brightness);
        }
        let sc = g.constant(shifts);
        let sb = g.broadcast(sc, &[n, c, h, w]);
        cur = g.add(cur, sb);

        // saturation: (x - mean_c) * f + mean_c, f ~ U(1 - s, 1 + s)
        let mut f = Tensor::zeros(IxDyn(&[n, 1, 1, 1]));
        for bi in 0..n {
            f[[bi, 0, 0, 0]] =
                rng.uniform_range(1.0 - policy.saturation, 1.0 + policy.saturation);
        }
        let mean_c = g.mean_axes(cur, &[1]); // per-pixel channel mean
        let mean_b = g.broadcast(mean_c, &[n, c, h, w]);
        let centered = g.sub(cur, mean_b);
        let fc = g.constant(f);
        let fb = g.broadcast(fc, &[n, c, h, w]);
        let scaled = g.mul(centered, fb);
        cur = g.add(scaled, mean_b);

        // contrast: (x - mean_chw) * f + mean_chw, f ~ U(1 - c, 1 + c)
        let mut f = Tensor::zeros(IxDyn(&[n, 1, 1, 1]));
        for bi in 0..n {
            f[[bi, 0, 0, 0]] = rng.uniform_range(1.0 - policy.contrast, 1.0 + policy.contrast);
        }
        let mean_s = g.mean_axes(cur, &[1, 2, 3]); // per-sample mean
        let mean_b = g.broadcast(mean_s, &[n, c, h, w]);
        let centered = g.sub(cur, mean_b);
        let fc = g.constant(f);
        let fb = g.broadcast(fc, &[n, c, h, w]);
        let scaled = g.mul(centered, fb);
        cur = g.add(scaled, mean_b);
    }

    if policy.translation {
        let max_shift = ((h as f64) * policy.translation_frac).floor() as i64;
        let span = (2 * max_shift + 1) as u64;
        let mut shifts = Vec::with_capacity(n);
        for _ in 0..n {
            let dy = rng.uniform_int(span) as i64 - max_shift;
            let dx = rng.uniform_int(span) as i64 - max_shift;
            shifts.push((dy, dx));
        }
        cur = g.translate2d(cur, &shifts);
    }

    if policy.cutout {
        let cut = ((h as f64) * policy.cutout_frac).floor() as usize;
        let mut mask = Tensor::from_elem(IxDyn(&[n, 1, h, w]), 1.0);
        for bi in 0..n {
            // center anywhere on the image; the hole may leave the frame
            let cy = rng.uniform_int(h as u64) as i64;
            let cx = rng.uniform_int(w as u64) as i64;
            let y0 = cy - (cut / 2) as i64;
            let x0 = cx - (cut / 2) as i64;
            for y in y0.max(0)..(y0 + cut as i64).min(h as i64) {
                for xx in x0.max(0)..(x0 + cut as i64).min(w as i64) {
                    mask[[bi, 0, y as usize, xx as usize]] = 0.0;
                }
            }
        }
        let mc = g.constant(mask);
        let mb = g.broadcast(mc, &[n, c, h, w]);
        cur = g.mul(cur, mb);
    }

    cur
}

/// Value-level wrapper around [`diff_augment_g`].
pub fn diff_augment(
    batch: &ImageBatch,
    policy: &AugmentPolicy,
    rng: &mut RngStream,
) -> Result<ImageBatch> {
    policy.validate()?;
    let mut g = Graph::new();
    let x = g.constant(batch.data().clone());
    let y = diff_augment_g(&mut g, x, policy, rng);
    ImageBatch::new(g.value(y).clone())
}

// ---- gaussian blur ----

/// Normalized 1-D Gaussian taps at integer offsets -r..=r, r = ceil(3 sigma).
fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= s;
    }
    k
}

/// Separable Gaussian blur with reflect padding. `sigma = 0` is the
/// identity (the same node is returned, adding nothing to the tape).
pub fn gaussian_blur_g(g: &mut Graph, x: Var, sigma: f64) -> Var {
    assert!(sigma >= 0.0, "blur sigma must be >= 0");
    if sigma == 0.0 {
        return x;
    }
    let (n, c, h, w) = dims4(g.value(x));
    let k1 = gaussian_kernel_1d(sigma);
    let r = k1.len() / 2;

    // depthwise via a flat [n*c, 1, h, w] view
    let flat = g.reshape(x, &[n * c, 1, h, w]);
    let padded = g.pad2d(flat, r, PadMode::Reflect);
    let kv = Tensor::from_shape_vec(IxDyn(&[1, 1, k1.len(), 1]), k1.clone()).unwrap();
    let kvert = g.constant(kv);
    let vert = g.conv2d(padded, kvert, 1, 0); // [n*c, 1, h, w + 2r]
    let kh = Tensor::from_shape_vec(IxDyn(&[1, 1, 1, k1.len()]), k1).unwrap();
    let khorz = g.constant(kh);
    let horz = g.conv2d(vert, khorz, 1, 0); // [n*c, 1, h, w]
    g.reshape(horz, &[n, c, h, w])
}

pub fn gaussian_blur(batch: &ImageBatch, sigma: f64) -> Result<ImageBatch> {
    if sigma < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "blur sigma must be >= 0, got {sigma}"
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(batch.data().clone());
    let y = gaussian_blur_g(&mut g, x, sigma);
    ImageBatch::new(g.value(y).clone())
}

// ---- blur schedule ----

/// Discriminator-input blur strength after `images_seen` images: constant
/// `sigma_max` before the `blur_images` threshold and 0 from there on
/// (boundary exclusive). With `ramp`, sigma instead decays linearly to 0
/// across the window.
pub fn blur_sigma(images_seen: u64, sigma_max: f64, blur_images: u64, ramp: bool) -> f64 {
    if images_seen >= blur_images {
        return 0.0;
    }
    if ramp {
        sigma_max * (1.0 - images_seen as f64 / blur_images as f64)
    } else {
        sigma_max
    }
}

// ---- latent perturbation ----

/// z + eps with eps[b,i] ~ Normal(0, (l1 * |z[b,i]|)^2).
pub fn latent_perturb(z: &Tensor, l1: f64, rng: &mut RngStream) -> Tensor {
    assert!(l1 >= 0.0, "l1 must be >= 0");
    let mut out = z.clone();
    for v in out.iter_mut() {
        let std = l1 * v.abs();
        *v += std * rng.normal();
    }
    out
}

/// The deterministic reading of the same perturbation: z + l1 * |z|.
pub fn latent_perturb_deterministic(z: &Tensor, l1: f64) -> Tensor {
    z.mapv(|v| v + l1 * v.abs())
}

// ---- dataset amplification ----

/// Doubles a dataset of CHW images: items N..2N-1 mirror items 0..N-1
/// horizontally.
pub fn xflip_amplify(images: &[Tensor]) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(images.len() * 2);
    out.extend_from_slice(images);
    for img in images {
        let mut view = img.view();
        view.invert_axis(ndarray::Axis(img.ndim() - 1));
        out.push(view.as_standard_layout().to_owned());
    }
    out
}
