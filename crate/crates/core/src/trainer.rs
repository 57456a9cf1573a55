//! The training harness: alternating discriminator/generator updates with
//! the ablation-level flags, EMA tracking, stateless per-step random
//! streams, checkpoint mapping, evaluation, sampling, and the
//! batch-diversity probe.
//!
//! All randomness is drawn from streams keyed by `(run seed, purpose,
//! step)`, so a resumed run replays exactly the draws an uninterrupted run
//! would have made — no RNG state needs serializing.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, Axis};

use crate::augment::{blur_sigma, diff_augment_g, gaussian_blur_g, latent_perturb, AugmentPolicy};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::features::{FeatureNetworkSpec, FeatureProjector};
use crate::graph::{Graph, Var};
use crate::losses::{
    discriminator_consistency, faketwins_from_images_g, hinge_d_loss, hinge_g_loss, total_d_loss,
    total_g_loss, FakeTwinsContext, LogitSet,
};
use crate::metrics::{
    frechet_distance, kernel_distance, perceptual_path_length, precision_recall,
    signed_logit_fraction, EmbeddingNet, EmbeddingStats, MetricsReport, PplMode,
};
use crate::nets::{
    ema_update, Adam, DiscriminatorBank, EmaState, Generator, LinearHead, PreparedBank,
};
use crate::rng::RngStream;
use crate::tensor::Tensor;

// purpose tags for the per-step streams
const P_LATENT_D: u64 = 0x6c61745f64; // "lat_d"
const P_LATENT_G: u64 = 0x6c61745f67; // "lat_g"
const P_AUG_D: u64 = 0x6175675f64; // "aug_d"
const P_AUG_G: u64 = 0x6175675f67; // "aug_g"
const P_FT: u64 = 0x66745f67; // "ft_g"
// evaluation / sampling streams (step-independent)
const P_EVAL_FAKE: u64 = 0x65765f666b; // "ev_fk"
const P_EVAL_PPL_FULL: u64 = 0x65765f7066; // "ev_pf"
const P_EVAL_PPL_END: u64 = 0x65765f7065; // "ev_pe"
const P_SAMPLE: u64 = 0x73616d70; // "samp"
const P_PROBE: u64 = 0x70726f6265; // "probe"

const ADAM_EPS: f64 = 1e-8;

/// Per-step loss readout. Component fields are NaN when the ablation level
/// disables the corresponding term.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub step: u64,
    pub images_seen: u64,
    pub loss_d: f64,
    pub loss_g: f64,
    pub dc_fake: f64,
    pub dc_real: f64,
    pub ft: f64,
    pub blur: f64,
}

/// Everything a training run mutates, plus the frozen feature stacks.
pub struct Trainer {
    cfg: TrainConfig,
    policy: AugmentPolicy,
    pub gen: Generator,
    pub ema: EmaState,
    /// First projector group (the CNN pyramid; absent at level A where the
    /// single discriminator reads raw pixels).
    pub proj_a: Option<FeatureProjector>,
    /// Second projector group (the patch-attention pyramid, level C+).
    pub proj_b: Option<FeatureProjector>,
    pub bank_a: DiscriminatorBank,
    pub bank_b: Option<DiscriminatorBank>,
    /// FakeTwins projection head (level E).
    pub head: Option<LinearHead>,
    opt_g: Adam,
    opt_d: Adam,
    step: u64,
    images_seen: u64,
}

fn conv_spec(cfg: &TrainConfig) -> FeatureNetworkSpec {
    let mut s = FeatureNetworkSpec::conv(cfg.weight_seed() ^ 0x636e6e); // "cnn"
    s.stage_channels = cfg.feature_channels;
    s
}

fn vit_spec(cfg: &TrainConfig) -> FeatureNetworkSpec {
    let mut s = FeatureNetworkSpec::patch_attention(cfg.weight_seed() ^ 0x766974); // "vit"
    s.stage_channels = cfg.feature_channels;
    s.embed_dim = cfg.vit_embed_dim;
    s.blocks = cfg.vit_blocks;
    s.grid_side = cfg.resolution / 4;
    s
}

fn sample_z(rng: &mut RngStream, n: usize, z_dim: usize) -> Tensor {
    crate::tensor::from_vec(&[n, z_dim], rng.normal_vec(n * z_dim))
}

/// Runs one image node through the projector pyramids and both
/// discriminator banks, returning the grouped logit maps.
#[allow(clippy::too_many_arguments)]
fn discriminate(
    g: &mut Graph,
    x: Var,
    proj_a: Option<&FeatureProjector>,
    proj_b: Option<&FeatureProjector>,
    bank_a: &DiscriminatorBank,
    bank_b: Option<&DiscriminatorBank>,
    prep_a: &PreparedBank,
    prep_b: Option<&PreparedBank>,
) -> Result<LogitSet> {
    let maps_a = match proj_a {
        Some(p) => {
            let pyr = p.pyramid_g(g, x)?;
            bank_a.forward_with(g, &pyr, prep_a)?
        }
        None => bank_a.forward_with(g, &[x], prep_a)?,
    };
    let maps_b = match (proj_b, bank_b, prep_b) {
        (Some(p), Some(bank), Some(prep)) => {
            let pyr = p.pyramid_g(g, x)?;
            bank.forward_with(g, &pyr, prep)?
        }
        _ => Vec::new(),
    };
    LogitSet::new(g, maps_a, maps_b)
}

fn assign_tensor(dst: &mut Tensor, src: &Tensor, name: &str) -> Result<()> {
    if dst.shape() != src.shape() {
        return Err(Error::Checkpoint(format!(
            "tensor '{name}' has shape {:?}, expected {:?}",
            src.shape(),
            dst.shape()
        )));
    }
    dst.assign(src);
    Ok(())
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let flags = cfg.flags();
        let wseed = cfg.weight_seed();
        let z_dim = cfg.effective_z_dim();

        let gen = Generator::build(z_dim, cfg.resolution, cfg.gen_base_channels, wseed)?;
        let ema = EmaState::new(&gen.weights(), cfg.ema_decay)?;

        let proj_a = if flags.cnn_pyramid {
            Some(FeatureProjector::build(conv_spec(cfg))?)
        } else {
            None
        };
        let proj_b = if flags.second_network {
            Some(FeatureProjector::build(vit_spec(cfg))?)
        } else {
            None
        };

        let (in_a, in_b) = cfg.disc_inputs();
        let bank_a = DiscriminatorBank::build(&in_a, cfg.disc_channels, wseed ^ 0xa);
        let bank_b = if in_b.is_empty() {
            None
        } else {
            Some(DiscriminatorBank::build(&in_b, cfg.disc_channels, wseed ^ 0xb))
        };

        let head = if flags.faketwins {
            let pooled: usize = 2 * cfg.feature_channels.iter().sum::<usize>();
            Some(LinearHead::build(pooled, cfg.head_width, wseed ^ 0xf))
        } else {
            None
        };

        let mut g_weights = gen.weights();
        if let Some(h) = &head {
            g_weights.extend(h.weights());
        }
        let opt_g = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, ADAM_EPS, &g_weights);

        let mut d_weights = bank_a.weights();
        if let Some(b) = &bank_b {
            d_weights.extend(b.weights());
        }
        let opt_d = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, ADAM_EPS, &d_weights);

        Ok(Trainer {
            policy: cfg.augment_policy()?,
            cfg: cfg.clone(),
            gen,
            ema,
            proj_a,
            proj_b,
            bank_a,
            bank_b,
            head,
            opt_g,
            opt_d,
            step: 0,
            images_seen: 0,
        })
    }

    pub fn cfg(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn images_seen(&self) -> u64 {
        self.images_seen
    }

    fn stream(&self, purpose: u64) -> RngStream {
        RngStream::new(self.cfg.seed)
            .substream(purpose)
            .substream(self.step)
    }

    /// The image rows this step trains on: epoch-shuffled by the data seed,
    /// with the partial trailing batch of each epoch dropped.
    pub fn batch_indices(&self, dataset_len: usize) -> Result<Vec<usize>> {
        let batch = self.cfg.batch;
        if dataset_len < batch {
            return Err(Error::Dataset(format!(
                "dataset of {dataset_len} images cannot fill a batch of {batch}"
            )));
        }
        let per_epoch = dataset_len / batch;
        let epoch = self.step / per_epoch as u64;
        let pos = (self.step % per_epoch as u64) as usize;
        let mut idx: Vec<usize> = (0..dataset_len).collect();
        RngStream::new(self.cfg.data_seed())
            .substream(epoch)
            .shuffle(&mut idx);
        Ok(idx[pos * batch..(pos + 1) * batch].to_vec())
    }

    /// One full training step: discriminator update, then generator (and
    /// head) update, then the EMA fold.
    pub fn train_step(&mut self, dataset: &Dataset) -> Result<StepReport> {
        if dataset.resolution() != self.cfg.resolution {
            return Err(Error::Dataset(format!(
                "dataset resolution {} does not match configured {}",
                dataset.resolution(),
                self.cfg.resolution
            )));
        }
        let real = dataset.batch(&self.batch_indices(dataset.len())?)?;
        let flags = self.cfg.flags();
        let sigma = if flags.blur {
            blur_sigma(
                self.images_seen,
                self.cfg.blur_sigma_max,
                self.cfg.effective_blur_images(),
                self.cfg.blur_ramp,
            )
        } else {
            0.0
        };
        let z_dim = self.gen.z_dim();
        let batch = self.cfg.batch;
        let weights = self.cfg.weights;
        let objective = self.cfg.ssl_objective();
        let l1 = self.cfg.l1;

        // ---- discriminator phase ----
        let z_d = sample_z(&mut self.stream(P_LATENT_D), batch, z_dim);
        let mut aug_rng = self.stream(P_AUG_D);
        let fake_imgs = self.gen.generate(&z_d)?;

        let (loss_d, dc_fake_d, dc_real_d) = {
            let Trainer {
                policy,
                proj_a,
                proj_b,
                bank_a,
                bank_b,
                opt_d,
                ..
            } = &mut *self;
            let mut g = Graph::new();
            let mut real_v = g.constant(real);
            let mut fake_v = g.constant(fake_imgs);
            if sigma > 0.0 {
                real_v = gaussian_blur_g(&mut g, real_v, sigma);
                fake_v = gaussian_blur_g(&mut g, fake_v, sigma);
            }
            real_v = diff_augment_g(&mut g, real_v, policy, &mut aug_rng);
            fake_v = diff_augment_g(&mut g, fake_v, policy, &mut aug_rng);

            let prep_a = bank_a.prepare_g(&mut g, true);
            let prep_b = bank_b.as_mut().map(|b| b.prepare_g(&mut g, true));
            let real_logits = discriminate(
                &mut g,
                real_v,
                proj_a.as_ref(),
                proj_b.as_ref(),
                bank_a,
                bank_b.as_ref(),
                &prep_a,
                prep_b.as_ref(),
            )?;
            let fake_logits = discriminate(
                &mut g,
                fake_v,
                proj_a.as_ref(),
                proj_b.as_ref(),
                bank_a,
                bank_b.as_ref(),
                &prep_a,
                prep_b.as_ref(),
            )?;

            let l_d = hinge_d_loss(&mut g, &real_logits, &fake_logits)?;
            let (dc_f, dc_r) = if flags.consistency && fake_logits.has_both_groups() {
                (
                    Some(discriminator_consistency(&mut g, &fake_logits)?),
                    Some(discriminator_consistency(&mut g, &real_logits)?),
                )
            } else {
                (None, None)
            };
            let total = total_d_loss(&mut g, l_d, dc_f, dc_r, &weights);

            let loss_d = g.scalar_value(l_d);
            let dc_fake_d = dc_f.map_or(f64::NAN, |v| g.scalar_value(v));
            let dc_real_d = dc_r.map_or(f64::NAN, |v| g.scalar_value(v));
            let total_val = g.scalar_value(total);
            if !total_val.is_finite() {
                return Err(Error::Divergence {
                    step: self.step,
                    detail: format!("discriminator loss became {total_val}"),
                });
            }
            g.backward(total);

            let mut handles = prep_a.handles();
            if let Some(p) = &prep_b {
                handles.extend(p.handles());
            }
            let grads: Vec<Option<Tensor>> = handles.iter().map(|h| g.grad(*h).cloned()).collect();
            let mut wmut = bank_a.weights_mut();
            if let Some(b) = bank_b.as_mut() {
                wmut.extend(b.weights_mut());
            }
            opt_d.step(wmut, &grads)?;
            (loss_d, dc_fake_d, dc_real_d)
        };

        // ---- generator (and head) phase ----
        let z_g = sample_z(&mut self.stream(P_LATENT_G), batch, z_dim);
        let mut aug_rng_g = self.stream(P_AUG_G);
        let mut ft_rng = self.stream(P_FT);

        let (loss_g, dc_fake_g, ft_val) = {
            let Trainer {
                policy,
                gen,
                proj_a,
                proj_b,
                bank_a,
                bank_b,
                head,
                opt_g,
                ..
            } = &mut *self;
            let mut g = Graph::new();
            let gen_handles = gen.load_weights_g(&mut g, true);
            let zv = g.constant(z_g.clone());
            let fake = gen.forward_with(&mut g, zv, &gen_handles)?;

            let mut adv = fake;
            if sigma > 0.0 {
                adv = gaussian_blur_g(&mut g, adv, sigma);
            }
            adv = diff_augment_g(&mut g, adv, policy, &mut aug_rng_g);

            let prep_a = bank_a.prepare_g(&mut g, false);
            let prep_b = bank_b.as_mut().map(|b| b.prepare_g(&mut g, false));
            let fake_logits = discriminate(
                &mut g,
                adv,
                proj_a.as_ref(),
                proj_b.as_ref(),
                bank_a,
                bank_b.as_ref(),
                &prep_a,
                prep_b.as_ref(),
            )?;

            let l_g = hinge_g_loss(&mut g, &fake_logits);
            let dc = if flags.consistency && fake_logits.has_both_groups() {
                Some(discriminator_consistency(&mut g, &fake_logits)?)
            } else {
                None
            };

            let mut head_handles = Vec::new();
            let ft = if flags.faketwins {
                let head = head.as_mut().expect("level E builds a head");
                head_handles = head.load_weights_g(&mut g, true);
                // the second view generates from the perturbed latent; the
                // first reuses the adversarial batch's pre-blur output
                let z2 = latent_perturb(&z_g, l1, &mut ft_rng);
                let z2v = g.constant(z2);
                let imgs_b = gen.forward_with(&mut g, z2v, &gen_handles)?;
                let ctx = FakeTwinsContext {
                    proj_a: proj_a.as_ref().expect("level E has the CNN stack"),
                    proj_b: proj_b.as_ref().expect("level E has the attention stack"),
                    policy,
                    objective,
                };
                Some(faketwins_from_images_g(
                    &mut g,
                    &ctx,
                    fake,
                    imgs_b,
                    head,
                    &head_handles,
                    &mut ft_rng,
                    true,
                )?)
            } else {
                None
            };

            let total = total_g_loss(&mut g, l_g, dc, ft, &weights);
            let loss_g = g.scalar_value(l_g);
            let dc_fake_g = dc.map_or(f64::NAN, |v| g.scalar_value(v));
            let ft_val = ft.map_or(f64::NAN, |v| g.scalar_value(v));
            let total_val = g.scalar_value(total);
            if !total_val.is_finite() {
                return Err(Error::Divergence {
                    step: self.step,
                    detail: format!("generator loss became {total_val}"),
                });
            }
            g.backward(total);

            let mut handles = gen_handles;
            handles.extend(head_handles);
            let grads: Vec<Option<Tensor>> = handles.iter().map(|h| g.grad(*h).cloned()).collect();
            let mut wmut = gen.weights_mut();
            if let Some(h) = head.as_mut() {
                wmut.extend(h.weights_mut());
            }
            opt_g.step(wmut, &grads)?;
            (loss_g, dc_fake_g, ft_val)
        };

        ema_update(&mut self.ema, &self.gen.weights())?;
        self.step += 1;
        self.images_seen += batch as u64;

        Ok(StepReport {
            step: self.step,
            images_seen: self.images_seen,
            loss_d,
            loss_g,
            dc_fake: if dc_fake_d.is_nan() { dc_fake_g } else { dc_fake_d },
            dc_real: dc_real_d,
            ft: ft_val,
            blur: sigma,
        })
    }

    /// A generator carrying the EMA weights, for all sampling/evaluation.
    pub fn ema_generator(&self) -> Result<Generator> {
        let mut g = Generator::build(
            self.gen.z_dim(),
            self.cfg.resolution,
            self.cfg.gen_base_channels,
            self.cfg.weight_seed(),
        )?;
        g.set_weights(self.ema.shadow())?;
        Ok(g)
    }

    // ---- checkpointing ----

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(self.cfg.digest(), self.step, self.images_seen);
        for (i, w) in self.gen.weights().iter().enumerate() {
            ck.insert(&format!("gen.{i}"), (*w).clone())?;
        }
        for (i, w) in self.ema.shadow().iter().enumerate() {
            ck.insert(&format!("ema.{i}"), w.clone())?;
        }
        let banks: [(&str, Option<&DiscriminatorBank>); 2] = [
            ("disc_a", Some(&self.bank_a)),
            ("disc_b", self.bank_b.as_ref()),
        ];
        for (prefix, bank) in banks {
            let Some(bank) = bank else { continue };
            for (i, w) in bank.weights().iter().enumerate() {
                ck.insert(&format!("{prefix}.{i}"), (*w).clone())?;
            }
            for (i, s) in bank.sn_states().iter().enumerate() {
                ck.insert(&format!("{prefix}.sn{i}.u"), s.u.clone())?;
                ck.insert(&format!("{prefix}.sn{i}.v"), s.v.clone())?;
            }
        }
        if let Some(h) = &self.head {
            for (i, w) in h.weights().iter().enumerate() {
                ck.insert(&format!("head.{i}"), (*w).clone())?;
            }
            ck.insert("head.running_mean1", h.running_mean1.clone())?;
            ck.insert("head.running_var1", h.running_var1.clone())?;
            ck.insert("head.running_mean2", h.running_mean2.clone())?;
            ck.insert("head.running_var2", h.running_var2.clone())?;
        }
        for (name, opt) in [("opt_g", &self.opt_g), ("opt_d", &self.opt_d)] {
            let (m, v) = opt.moments();
            for (i, t) in m.iter().enumerate() {
                ck.insert(&format!("{name}.m{i}"), t.clone())?;
            }
            for (i, t) in v.iter().enumerate() {
                ck.insert(&format!("{name}.v{i}"), t.clone())?;
            }
            ck.insert_scalar(&format!("{name}.step"), opt.step as f64)?;
        }
        Ok(ck)
    }

    pub fn from_checkpoint(cfg: &TrainConfig, ck: &Checkpoint) -> Result<Self> {
        ck.ensure_digest(&cfg.digest())?;
        let mut t = Trainer::new(cfg)?;
        for (i, w) in t.gen.weights_mut().into_iter().enumerate() {
            let name = format!("gen.{i}");
            assign_tensor(w, ck.get(&name)?, &name)?;
        }
        for (i, w) in t.ema.shadow_mut().iter_mut().enumerate() {
            let name = format!("ema.{i}");
            assign_tensor(w, ck.get(&name)?, &name)?;
        }
        for (prefix, bank) in [
            ("disc_a", Some(&mut t.bank_a)),
            ("disc_b", t.bank_b.as_mut()),
        ] {
            let Some(bank) = bank else { continue };
            for (i, w) in bank.weights_mut().into_iter().enumerate() {
                let name = format!("{prefix}.{i}");
                assign_tensor(w, ck.get(&name)?, &name)?;
            }
            for (i, s) in bank.sn_states_mut().into_iter().enumerate() {
                assign_tensor(&mut s.u, ck.get(&format!("{prefix}.sn{i}.u"))?, "sn.u")?;
                assign_tensor(&mut s.v, ck.get(&format!("{prefix}.sn{i}.v"))?, "sn.v")?;
            }
        }
        if let Some(h) = t.head.as_mut() {
            for (i, w) in h.weights_mut().into_iter().enumerate() {
                let name = format!("head.{i}");
                assign_tensor(w, ck.get(&name)?, &name)?;
            }
            assign_tensor(&mut h.running_mean1, ck.get("head.running_mean1")?, "head")?;
            assign_tensor(&mut h.running_var1, ck.get("head.running_var1")?, "head")?;
            assign_tensor(&mut h.running_mean2, ck.get("head.running_mean2")?, "head")?;
            assign_tensor(&mut h.running_var2, ck.get("head.running_var2")?, "head")?;
        }
        for (name, opt) in [("opt_g", &mut t.opt_g), ("opt_d", &mut t.opt_d)] {
            let (m, v) = opt.moments_mut();
            for (i, slot) in m.iter_mut().enumerate() {
                let key = format!("{name}.m{i}");
                assign_tensor(slot, ck.get(&key)?, &key)?;
            }
            for (i, slot) in v.iter_mut().enumerate() {
                let key = format!("{name}.v{i}");
                assign_tensor(slot, ck.get(&key)?, &key)?;
            }
            opt.step = ck.get_scalar(&format!("{name}.step"))? as u64;
        }
        t.step = ck.step;
        t.images_seen = ck.images_seen;
        Ok(t)
    }

    // ---- evaluation ----

    /// Generates `n` images with the EMA weights. Latents are all drawn up
    /// front; generation runs in config-batch chunks (batch statistics make
    /// the chunking part of the sampling definition).
    pub fn generate_eval_images(&self, n: usize, rng: &mut RngStream) -> Result<Tensor> {
        let gen = self.ema_generator()?;
        let z = sample_z(rng, n, gen.z_dim());
        generate_batched(&gen, &z, self.cfg.batch)
    }

    /// Full metric sweep against a prepared real-side context. Deterministic
    /// for a given state; mutates nothing.
    pub fn evaluate(
        &mut self,
        ctx: &EvalContext,
        dataset: &Dataset,
        last: Option<&StepReport>,
    ) -> Result<MetricsReport> {
        let n_fake = self.cfg.effective_eval_samples(dataset.len());
        let mut fake_rng = RngStream::new(self.cfg.eval_seed()).substream(P_EVAL_FAKE);
        let fakes = self.generate_eval_images(n_fake, &mut fake_rng)?;
        let fake_emb = embed_batched(&ctx.embed, &fakes)?;
        let fake_stats = EmbeddingStats::from_embeddings(&fake_emb)?;

        let fid = frechet_distance(&ctx.real_stats, &fake_stats)?;
        let kid = kernel_distance(&ctx.real_embeddings, &fake_emb)?;
        let (precision, recall) = precision_recall(&ctx.real_embeddings, &fake_emb, self.cfg.knn_k)?;

        // path length is defined for the deployed 64-dim latent space only
        let (ppl_full, ppl_end) = if self.gen.z_dim() == 64 {
            let gen = self.ema_generator()?;
            let batch = self.cfg.batch;
            let run = |mode: PplMode, tag: u64| -> Result<f64> {
                let mut rng = RngStream::new(self.cfg.eval_seed()).substream(tag);
                perceptual_path_length(
                    |z| generate_batched(&gen, z, batch),
                    |imgs| ctx.embed.embed(imgs),
                    64,
                    self.cfg.ppl_epsilon,
                    self.cfg.ppl_paths,
                    mode,
                    &mut rng,
                    batch,
                )
            };
            (run(PplMode::Full, P_EVAL_PPL_FULL)?, run(PplMode::End, P_EVAL_PPL_END)?)
        } else {
            (f64::NAN, f64::NAN)
        };

        let logit_fraction = self.real_logit_fraction(dataset, n_fake)?;

        Ok(MetricsReport {
            step: self.step,
            images_seen: self.images_seen,
            fid,
            kid,
            precision,
            recall,
            ppl_full,
            ppl_end,
            signed_logit_fraction: logit_fraction,
            loss_d: last.map_or(f64::NAN, |r| r.loss_d),
            loss_g: last.map_or(f64::NAN, |r| r.loss_g),
            loss_dc_fake: last.map_or(f64::NAN, |r| r.dc_fake),
            loss_dc_real: last.map_or(f64::NAN, |r| r.dc_real),
            loss_ft: last.map_or(f64::NAN, |r| r.ft),
        })
    }

    /// Fraction of real images whose summed logit is positive, over up to
    /// `limit` images in dataset order. Spectral norm runs in eval mode so
    /// repeated calls see identical weights.
    pub fn real_logit_fraction(&mut self, dataset: &Dataset, limit: usize) -> Result<f64> {
        let n = dataset.len().min(limit.max(2));
        let mut logits = Vec::with_capacity(n);
        let chunk = self.cfg.batch.max(2);
        let Trainer {
            proj_a,
            proj_b,
            bank_a,
            bank_b,
            ..
        } = self;
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let imgs = dataset.batch(&idx)?;
            let mut g = Graph::new();
            let x = g.constant(imgs);
            let prep_a = bank_a.prepare_g(&mut g, false);
            let prep_b = bank_b.as_mut().map(|b| b.prepare_g(&mut g, false));
            let set = discriminate(
                &mut g,
                x,
                proj_a.as_ref(),
                proj_b.as_ref(),
                bank_a,
                bank_b.as_ref(),
                &prep_a,
                prep_b.as_ref(),
            )?;
            let total = set.total_sum(&mut g);
            logits.extend(g.value(total).iter().copied());
            start = end;
        }
        Ok(signed_logit_fraction(&logits))
    }

    /// Writes an n-image EMA sample grid. Same (state, seed) gives a
    /// byte-identical file.
    pub fn sample_grid(&self, n: usize, seed: u64, path: &Path) -> Result<()> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample count must be positive".into()));
        }
        let mut rng = RngStream::new(seed).substream(P_SAMPLE);
        let imgs = self.generate_eval_images(n, &mut rng)?;
        crate::data::save_image_grid(&imgs, path)
    }
}

/// Generates `z.nrows()` images in fixed-size chunks. A trailing chunk of
/// one is padded by duplicating the row (batch statistics need two) and the
/// duplicate output is dropped.
pub fn generate_batched(gen: &Generator, z: &Tensor, batch: usize) -> Result<Tensor> {
    let n = z.shape()[0];
    let z_dim = z.shape()[1];
    if n == 0 {
        return Err(Error::InvalidArgument("no latents to generate from".into()));
    }
    let r = gen.resolution();
    let mut out = ArrayD::zeros(ndarray::IxDyn(&[n, 3, r, r]));
    let chunk = batch.max(2);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let mut rows = end - start;
        let mut zc = ArrayD::zeros(ndarray::IxDyn(&[rows.max(2), z_dim]));
        for (row, i) in (start..end).enumerate() {
            let src = z.index_axis(Axis(0), i);
            zc.index_axis_mut(Axis(0), row).assign(&src);
        }
        if rows == 1 {
            let src = z.index_axis(Axis(0), start).to_owned();
            zc.index_axis_mut(Axis(0), 1).assign(&src);
            rows = 1; // generate two, keep one
        }
        let imgs = gen.generate(&zc)?;
        for row in 0..rows {
            out.index_axis_mut(Axis(0), start + row)
                .assign(&imgs.index_axis(Axis(0), row));
        }
        start = end;
    }
    Ok(out)
}

fn embed_batched(net: &EmbeddingNet, images: &Tensor) -> Result<Array2<f64>> {
    let n = images.shape()[0];
    let mut out = Array2::zeros((n, net.dim));
    let chunk = 64;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let part = images
            .slice_axis(Axis(0), ndarray::Slice::from(start..end))
            .to_owned();
        let emb = net.embed(&part)?;
        out.slice_mut(ndarray::s![start..end, ..]).assign(&emb);
        start = end;
    }
    Ok(out)
}

/// Frozen real-side evaluation state, computed once per run.
pub struct EvalContext {
    pub embed: EmbeddingNet,
    pub real_embeddings: Array2<f64>,
    pub real_stats: EmbeddingStats,
}

impl EvalContext {
    pub fn new(cfg: &TrainConfig, dataset: &Dataset) -> Result<Self> {
        let embed = EmbeddingNet::build(cfg.embed_dim, cfg.embed_seed())?;
        let all: Vec<usize> = (0..dataset.len()).collect();
        let imgs = dataset.batch(&all)?;
        let real_embeddings = embed_batched(&embed, &imgs)?;
        let real_stats = EmbeddingStats::from_embeddings(&real_embeddings)?;
        Ok(EvalContext {
            embed,
            real_embeddings,
            real_stats,
        })
    }
}

// ---- batch-diversity probe ----

/// One probe measurement: a named image set at one blur level.
#[derive(Debug, Clone)]
pub struct ProbeRow {
    pub set: String,
    pub sigma: f64,
    pub mean_ft: f64,
}

/// Probe output: the measurement table plus named ordering verdicts.
#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub rows: Vec<ProbeRow>,
    pub verdicts: Vec<(String, bool)>,
}

impl ProbeReport {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|(_, ok)| *ok)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("set                    sigma   mean_ft\n");
        for r in &self.rows {
            out.push_str(&format!("{:<22} {:>5} {:>12.6}\n", r.set, r.sigma, r.mean_ft));
        }
        out.push('\n');
        for (name, ok) in &self.verdicts {
            out.push_str(&format!("{name}: {}\n", if *ok { "PASS" } else { "FAIL" }));
        }
        out
    }
}

pub const PROBE_SIGMAS: [f64; 4] = [0.0, 1.0, 2.0, 4.0];

fn blur_value(images: &Tensor, sigma: f64) -> Tensor {
    if sigma <= 0.0 {
        return images.clone();
    }
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let y = gaussian_blur_g(&mut g, x, sigma);
    g.value(y).clone()
}

/// Mean FakeTwins loss of a fixed image batch against itself under repeated
/// augmentation draws, with frozen networks — the Fig. 4-style diversity
/// measurement.
pub fn probe_batch_diversity(
    cfg: &TrainConfig,
    image_sets: &[(String, Tensor)],
    draws: usize,
) -> Result<ProbeReport> {
    if image_sets.len() < 2 {
        return Err(Error::InvalidArgument(
            "probe needs at least two image sets".into(),
        ));
    }
    if draws == 0 {
        return Err(Error::InvalidArgument("draws must be positive".into()));
    }
    let proj_a = FeatureProjector::build(conv_spec(cfg))?;
    let proj_b = FeatureProjector::build(vit_spec(cfg))?;
    let pooled: usize = 2 * cfg.feature_channels.iter().sum::<usize>();
    let mut head = LinearHead::build(pooled, cfg.head_width, cfg.weight_seed() ^ 0xf);
    let policy = cfg.augment_policy()?;
    let ctx = FakeTwinsContext {
        proj_a: &proj_a,
        proj_b: &proj_b,
        policy: &policy,
        objective: cfg.ssl_objective(),
    };

    let mut rows = Vec::new();
    for (name, images) in image_sets {
        for sigma in PROBE_SIGMAS {
            let blurred = blur_value(images, sigma);
            let mut total = 0.0;
            for draw in 0..draws {
                let mut rng = RngStream::new(cfg.seed)
                    .substream(P_PROBE)
                    .substream(draw as u64);
                let mut g = Graph::new();
                let a = g.constant(blurred.clone());
                let b = g.constant(blurred.clone());
                let hh = head.load_weights_g(&mut g, false);
                let v =
                    faketwins_from_images_g(&mut g, &ctx, a, b, &mut head, &hh, &mut rng, false)?;
                total += g.scalar_value(v);
            }
            rows.push(ProbeRow {
                set: name.clone(),
                sigma,
                mean_ft: total / draws as f64,
            });
        }
    }

    let mean_of = |set: &str, sigma: f64| -> Option<f64> {
        rows.iter()
            .find(|r| r.set == set && r.sigma == sigma)
            .map(|r| r.mean_ft)
    };
    let mut verdicts = Vec::new();
    // identical-vs-distinct ordering per set family (sharp images)
    let families: Vec<String> = image_sets
        .iter()
        .filter_map(|(n, _)| n.strip_suffix("_distinct").map(str::to_string))
        .collect();
    for fam in &families {
        if let (Some(ident), Some(dist)) = (
            mean_of(&format!("{fam}_identical"), 0.0),
            mean_of(&format!("{fam}_distinct"), 0.0),
        ) {
            verdicts.push((format!("{fam}: identical > distinct"), ident > dist));
        }
        // blur monotonicity on the distinct batch
        let means: Vec<f64> = PROBE_SIGMAS
            .iter()
            .filter_map(|&s| mean_of(&format!("{fam}_distinct"), s))
            .collect();
        if means.len() == PROBE_SIGMAS.len() {
            let mono = means.windows(2).all(|w| w[1] >= w[0] - 1e-9);
            verdicts.push((format!("{fam}: nondecreasing in blur"), mono));
        }
    }
    Ok(ProbeReport { rows, verdicts })
}

/// Content seed for the bundled probe sets. Fixed rather than taken from the
/// run seed: the sets are a shipped artifact, and the documented orderings
/// were established for this exact content.
pub const PROBE_CONTENT_SEED: u64 = 303;

/// The bundled probe sets at the configured resolution: color squares and
/// textures, each in identical-repeated and distinct flavors.
pub fn bundled_probe_sets(cfg: &TrainConfig, n: usize) -> Vec<(String, Tensor)> {
    let r = cfg.resolution;
    let s = PROBE_CONTENT_SEED;
    vec![
        (
            "color_identical".into(),
            crate::data::probe_color_square_set(n, r, s, true),
        ),
        (
            "color_distinct".into(),
            crate::data::probe_color_square_set(n, r, s, false),
        ),
        (
            "texture_identical".into(),
            crate::data::probe_texture_set(n, r, s, true),
        ),
        (
            "texture_distinct".into(),
            crate::data::probe_texture_set(n, r, s, false),
        ),
    ]
}

// ---- the full training run ----

/// Where a finished (or resumed) run left its artifacts.
pub struct RunSummary {
    pub rows: Vec<MetricsReport>,
    pub final_report: MetricsReport,
    pub best_fid: f64,
    pub best_images_seen: u64,
    pub final_checkpoint: PathBuf,
}

/// Runs (or resumes) training to `cfg.total_images`, writing `metrics.csv`,
/// periodic checkpoints, `best.hpg` (lowest FID so far), and `final.hpg`
/// under `out_dir`.
pub fn run_training(
    cfg: &TrainConfig,
    dataset: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
    verbose: bool,
) -> Result<RunSummary> {
    cfg.validate()?;
    if dataset.resolution() != cfg.resolution {
        return Err(Error::Dataset(format!(
            "dataset resolution {} does not match configured {}",
            dataset.resolution(),
            cfg.resolution
        )));
    }
    let mut trainer = match resume {
        Some(path) => Trainer::from_checkpoint(cfg, &Checkpoint::load(path)?)?,
        None => Trainer::new(cfg)?,
    };
    let train_set = if cfg.xflip {
        dataset.clone().xflip_amplified()
    } else {
        dataset.clone()
    };
    // evaluation always compares against the un-mirrored originals
    let ctx = EvalContext::new(cfg, dataset)?;

    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.txt"), cfg.to_file_string())?;
    let csv_path = out_dir.join("metrics.csv");
    let fresh_csv = resume.is_none() || !csv_path.exists();
    let mut csv = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&csv_path)?,
    );
    if fresh_csv {
        writeln!(csv, "{}", MetricsReport::csv_header())?;
    }

    let mut rows = Vec::new();
    let mut best_fid = f64::INFINITY;
    let mut best_images_seen = 0;
    let mut last_step: Option<StepReport> = None;

    while trainer.images_seen() < cfg.total_images {
        let prev_images = trainer.images_seen();
        let report = trainer.train_step(&train_set)?;
        last_step = Some(report);

        if crossed(prev_images, report.images_seen, cfg.eval_interval) {
            let row = trainer.evaluate(&ctx, dataset, last_step.as_ref())?;
            writeln!(csv, "{}", row.csv_row())?;
            csv.flush()?;
            if verbose {
                println!(
                    "step {:>7}  images {:>9}  fid {:>10.4}  d {:>8.4}  g {:>8.4}",
                    row.step, row.images_seen, row.fid, row.loss_d, row.loss_g
                );
            }
            if row.fid < best_fid {
                best_fid = row.fid;
                best_images_seen = row.images_seen;
                trainer.to_checkpoint()?.save(&out_dir.join("best.hpg"))?;
            }
            rows.push(row);
        }
        if crossed(prev_images, report.images_seen, cfg.checkpoint_interval) {
            let path = out_dir.join(format!("ck_{:010}.hpg", report.images_seen));
            trainer.to_checkpoint()?.save(&path)?;
        }
    }

    let final_report = trainer.evaluate(&ctx, dataset, last_step.as_ref())?;
    writeln!(csv, "{}", final_report.csv_row())?;
    csv.flush()?;
    if final_report.fid < best_fid {
        best_fid = final_report.fid;
        best_images_seen = final_report.images_seen;
        trainer.to_checkpoint()?.save(&out_dir.join("best.hpg"))?;
    }
    rows.push(final_report.clone());
    let final_checkpoint = out_dir.join("final.hpg");
    trainer.to_checkpoint()?.save(&final_checkpoint)?;
    if verbose {
        println!(
            "done: {} images, best fid {:.4} at {} images",
            trainer.images_seen(),
            best_fid,
            best_images_seen
        );
    }
    Ok(RunSummary {
        rows,
        final_report,
        best_fid,
        best_images_seen,
        final_checkpoint,
    })
}

fn crossed(prev_images: u64, now_images: u64, interval: u64) -> bool {
    interval > 0 && now_images / interval > prev_images / interval
}
