//! Run configuration: the cumulative ablation levels, every tunable with its
//! default, a flat `key = value` file format with typed validation, `--set`
//! overrides, and a content digest that checkpoints embed so a resumed run
//! can refuse mismatched settings.

use std::fmt;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::augment::AugmentPolicy;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::rng::RngStream;
use crate::ssl::{SslObjectiveKind, VicRegWeights};

/// Cumulative ablation levels. Each level keeps everything beneath it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigLevel {
    /// Raw-image baseline: one discriminator on pixels, wide latent.
    A,
    /// Adds the projected multi-scale CNN feature pyramid.
    B,
    /// Adds the second (patch-attention) network, the narrow latent, and
    /// input blur.
    C,
    /// Adds the discriminator-consistency loss.
    D,
    /// Adds the FakeTwins loss.
    E,
}

/// What a level switches on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelFlags {
    pub cnn_pyramid: bool,
    pub second_network: bool,
    pub small_z: bool,
    pub blur: bool,
    pub consistency: bool,
    pub faketwins: bool,
}

impl ConfigLevel {
    pub fn flags(self) -> LevelFlags {
        let rank = self.rank();
        LevelFlags {
            cnn_pyramid: rank >= 1,
            second_network: rank >= 2,
            small_z: rank >= 2,
            blur: rank >= 2,
            consistency: rank >= 3,
            faketwins: rank >= 4,
        }
    }

    fn rank(self) -> u8 {
        match self {
            ConfigLevel::A => 0,
            ConfigLevel::B => 1,
            ConfigLevel::C => 2,
            ConfigLevel::D => 3,
            ConfigLevel::E => 4,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(ConfigLevel::A),
            "B" | "b" => Ok(ConfigLevel::B),
            "C" | "c" => Ok(ConfigLevel::C),
            "D" | "d" => Ok(ConfigLevel::D),
            "E" | "e" => Ok(ConfigLevel::E),
            other => Err(Error::Config(format!("unknown config level '{other}'"))),
        }
    }
}

impl fmt::Display for ConfigLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            ConfigLevel::A => 'A',
            ConfigLevel::B => 'B',
            ConfigLevel::C => 'C',
            ConfigLevel::D => 'D',
            ConfigLevel::E => 'E',
        };
        write!(f, "{c}")
    }
}

/// Which self-supervised objective the FakeTwins loss applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SslChoice {
    BarlowTwins,
    VicReg,
    NtXent,
}

impl SslChoice {
    fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "barlow_twins" => Ok(SslChoice::BarlowTwins),
            "vicreg" => Ok(SslChoice::VicReg),
            "ntxent" => Ok(SslChoice::NtXent),
            other => Err(Error::Config(format!(
                "unknown ssl objective '{other}' (barlow_twins | vicreg | ntxent)"
            ))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            SslChoice::BarlowTwins => "barlow_twins",
            SslChoice::VicReg => "vicreg",
            SslChoice::NtXent => "ntxent",
        }
    }
}

/// The full run configuration. Fields documented as `0 = auto` resolve
/// through the corresponding `effective_*` accessor.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub level: ConfigLevel,
    pub resolution: usize,
    /// 0 = auto: 64 from level C upward, 256 below.
    pub z_dim: usize,
    pub batch: usize,
    pub total_images: u64,
    pub blur_sigma_max: f64,
    /// 0 = auto: total_images / 100.
    pub blur_images: u64,
    pub blur_ramp: bool,
    pub weights: LossWeights,
    /// Latent perturbation amplitude for the FakeTwins branch.
    pub l1: f64,
    pub ssl: SslChoice,
    pub ntxent_temperature: f64,
    pub vicreg_weights: VicRegWeights,
    pub augment_ops: String,
    pub seed: u64,
    pub ema_decay: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
    /// 0 = auto: max(5000, dataset size).
    pub eval_samples: usize,
    pub dataset: String,
    pub out_dir: String,
    /// 0 = use the whole dataset.
    pub subset: usize,
    pub xflip: bool,
    pub gen_base_channels: usize,
    pub disc_channels: usize,
    pub feature_channels: [usize; 4],
    pub vit_embed_dim: usize,
    pub vit_blocks: usize,
    pub head_width: usize,
    pub ppl_paths: usize,
    pub ppl_epsilon: f64,
    pub knn_k: usize,
    pub embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            level: ConfigLevel::E,
            resolution: 64,
            z_dim: 0,
            batch: 16,
            total_images: 200_000,
            blur_sigma_max: 2.0,
            blur_images: 0,
            blur_ramp: false,
            weights: LossWeights::default(),
            l1: 0.1,
            ssl: SslChoice::BarlowTwins,
            ntxent_temperature: 0.2,
            vicreg_weights: VicRegWeights::default(),
            augment_ops: "color,translation,cutout".to_string(),
            seed: 1,
            ema_decay: 0.999,
            lr: 2e-4,
            beta1: 0.0,
            beta2: 0.99,
            eval_interval: 50_000,
            checkpoint_interval: 100_000,
            eval_samples: 0,
            dataset: String::new(),
            out_dir: String::new(),
            subset: 0,
            xflip: true,
            gen_base_channels: 64,
            disc_channels: 32,
            feature_channels: [8, 16, 32, 64],
            vit_embed_dim: 32,
            vit_blocks: 2,
            head_width: 512,
            ppl_paths: 10_000,
            ppl_epsilon: 1e-4,
            knn_k: 3,
            embed_dim: 64,
        }
    }
}

// seed-derivation tags for the per-purpose streams
const TAG_WEIGHTS: u64 = 0x77656967; // "weig"
const TAG_DATA: u64 = 0x64617461; // "data"
const TAG_AUG: u64 = 0x61756774; // "augt"
const TAG_LATENT: u64 = 0x6c61746e; // "latn"
const TAG_EVAL: u64 = 0x6576616c; // "eval"
const TAG_EMBED: u64 = 0x656d6264; // "embd"

impl TrainConfig {
    pub fn flags(&self) -> LevelFlags {
        self.level.flags()
    }

    pub fn effective_z_dim(&self) -> usize {
        if self.z_dim != 0 {
            self.z_dim
        } else if self.flags().small_z {
            64
        } else {
            256
        }
    }

    pub fn effective_blur_images(&self) -> u64 {
        if self.blur_images != 0 {
            self.blur_images
        } else {
            self.total_images / 100
        }
    }

    pub fn effective_eval_samples(&self, dataset_len: usize) -> usize {
        if self.eval_samples != 0 {
            self.eval_samples
        } else {
            dataset_len.max(5000)
        }
    }

    pub fn weight_seed(&self) -> u64 {
        RngStream::new(self.seed).substream(TAG_WEIGHTS).seed()
    }

    pub fn data_seed(&self) -> u64 {
        RngStream::new(self.seed).substream(TAG_DATA).seed()
    }

    pub fn aug_seed(&self) -> u64 {
        RngStream::new(self.seed).substream(TAG_AUG).seed()
    }

    pub fn latent_seed(&self) -> u64 {
        RngStream::new(self.seed).substream(TAG_LATENT).seed()
    }

    pub fn eval_seed(&self) -> u64 {
        RngStream::new(self.seed).substream(TAG_EVAL).seed()
    }

    pub fn embed_seed(&self) -> u64 {
        // evaluation embedding must not depend on the run seed, or FIDs from
        // different seeds would live in different spaces
        RngStream::new(0).substream(TAG_EMBED).seed()
    }

    pub fn augment_policy(&self) -> Result<AugmentPolicy> {
        AugmentPolicy::from_ops_str(&self.augment_ops)
    }

    pub fn ssl_objective(&self) -> SslObjectiveKind {
        match self.ssl {
            SslChoice::BarlowTwins => SslObjectiveKind::BarlowTwins {
                lambda1: self.weights.lambda1,
            },
            SslChoice::VicReg => SslObjectiveKind::VicReg(self.vicreg_weights),
            SslChoice::NtXent => SslObjectiveKind::NtXent {
                temperature: self.ntxent_temperature,
            },
        }
    }

    /// Per-network discriminator input channel lists for this level:
    /// (first group, second group). The baseline's single raw-image head
    /// lives in the first group.
    pub fn disc_inputs(&self) -> (Vec<usize>, Vec<usize>) {
        let f = self.flags();
        if !f.cnn_pyramid {
            (vec![3], vec![])
        } else if !f.second_network {
            (self.feature_channels.to_vec(), vec![])
        } else {
            (self.feature_channels.to_vec(), self.feature_channels.to_vec())
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 || !self.resolution.is_power_of_two() {
            return Err(Error::Config(format!(
                "resolution must be a power of two >= 8, got {}",
                self.resolution
            )));
        }
        if self.flags().cnn_pyramid && self.resolution < 32 {
            return Err(Error::Config(
                "feature pyramids need resolution >= 32".into(),
            ));
        }
        if self.batch < 2 {
            return Err(Error::Config("batch must be at least 2".into()));
        }
        if self.total_images == 0 {
            return Err(Error::Config("total_images must be positive".into()));
        }
        if self.effective_z_dim() < 2 {
            return Err(Error::Config("z_dim must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must be in [0, 1)".into()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.eval_interval == 0 || self.checkpoint_interval == 0 {
            return Err(Error::Config("intervals must be positive".into()));
        }
        if self.blur_sigma_max < 0.0 {
            return Err(Error::Config("blur_sigma_max must be >= 0".into()));
        }
        if self.feature_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("feature_channels must be nonzero".into()));
        }
        if self.gen_base_channels == 0 || self.disc_channels == 0 || self.head_width == 0 {
            return Err(Error::Config("channel widths must be nonzero".into()));
        }
        if self.ppl_epsilon <= 0.0 {
            return Err(Error::Config("ppl_epsilon must be positive".into()));
        }
        if self.knn_k == 0 {
            return Err(Error::Config("knn_k must be at least 1".into()));
        }
        self.weights
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.augment_policy()?;
        if self.l1 < 0.0 || !self.l1.is_finite() {
            return Err(Error::Config("l1 must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Canonical key/value view: sorted keys, normalized value rendering.
    /// Both the file writer and the digest build on this.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let f = |v: f64| -> String { format!("{v}") };
        let mut kv = vec![
            ("augment_ops".to_string(), self.augment_ops.clone()),
            ("batch".to_string(), self.batch.to_string()),
            ("beta1".to_string(), f(self.beta1)),
            ("beta2".to_string(), f(self.beta2)),
            ("blur_images".to_string(), self.blur_images.to_string()),
            ("blur_ramp".to_string(), self.blur_ramp.to_string()),
            ("blur_sigma_max".to_string(), f(self.blur_sigma_max)),
            ("checkpoint_interval".to_string(), self.checkpoint_interval.to_string()),
            ("dataset".to_string(), self.dataset.clone()),
            ("disc_channels".to_string(), self.disc_channels.to_string()),
            ("ema_decay".to_string(), f(self.ema_decay)),
            ("embed_dim".to_string(), self.embed_dim.to_string()),
            ("eval_interval".to_string(), self.eval_interval.to_string()),
            ("eval_samples".to_string(), self.eval_samples.to_string()),
            (
                "feature_channels".to_string(),
                self.feature_channels
                    .iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("gen_base_channels".to_string(), self.gen_base_channels.to_string()),
            ("head_width".to_string(), self.head_width.to_string()),
            ("knn_k".to_string(), self.knn_k.to_string()),
            ("l1".to_string(), f(self.l1)),
            ("lambda1".to_string(), f(self.weights.lambda1)),
            ("lambda_d_fake".to_string(), f(self.weights.lambda_d_fake)),
            ("lambda_d_real".to_string(), f(self.weights.lambda_d_real)),
            ("lambda_f".to_string(), f(self.weights.lambda_f)),
            ("lambda_g".to_string(), f(self.weights.lambda_g)),
            ("level".to_string(), self.level.to_string()),
            ("lr".to_string(), f(self.lr)),
            ("ntxent_temperature".to_string(), f(self.ntxent_temperature)),
            ("out_dir".to_string(), self.out_dir.clone()),
            ("ppl_epsilon".to_string(), f(self.ppl_epsilon)),
            ("ppl_paths".to_string(), self.ppl_paths.to_string()),
            ("resolution".to_string(), self.resolution.to_string()),
            ("seed".to_string(), self.seed.to_string()),
            ("ssl_objective".to_string(), self.ssl.name().to_string()),
            ("subset".to_string(), self.subset.to_string()),
            ("total_images".to_string(), self.total_images.to_string()),
            ("vicreg_covariance".to_string(), f(self.vicreg_weights.covariance)),
            ("vicreg_invariance".to_string(), f(self.vicreg_weights.invariance)),
            ("vicreg_variance".to_string(), f(self.vicreg_weights.variance)),
            ("vit_blocks".to_string(), self.vit_blocks.to_string()),
            ("vit_embed_dim".to_string(), self.vit_embed_dim.to_string()),
            ("xflip".to_string(), self.xflip.to_string()),
            ("z_dim".to_string(), self.z_dim.to_string()),
        ];
        kv.sort();
        kv
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let parse_u64 = |v: &str| -> Result<u64> {
            v.parse()
                .map_err(|_| Error::Config(format!("expected integer, got '{v}'")))
        };
        let parse_usize = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("expected integer, got '{v}'")))
        };
        let parse_f64 = |v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("expected number, got '{v}'")))
        };
        let parse_bool = |v: &str| -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("expected boolean, got '{v}'"))),
            }
        };
        match key.trim() {
            "level" => self.level = ConfigLevel::parse(v)?,
            "resolution" => self.resolution = parse_usize(v)?,
            "z_dim" => self.z_dim = parse_usize(v)?,
            "batch" => self.batch = parse_usize(v)?,
            "total_images" => self.total_images = parse_u64(v)?,
            "blur_sigma_max" => self.blur_sigma_max = parse_f64(v)?,
            "blur_images" => self.blur_images = parse_u64(v)?,
            "blur_ramp" => self.blur_ramp = parse_bool(v)?,
            "lambda_d_fake" => self.weights.lambda_d_fake = parse_f64(v)?,
            "lambda_d_real" => self.weights.lambda_d_real = parse_f64(v)?,
            "lambda_g" => self.weights.lambda_g = parse_f64(v)?,
            "lambda_f" => self.weights.lambda_f = parse_f64(v)?,
            "lambda1" => self.weights.lambda1 = parse_f64(v)?,
            "l1" => self.l1 = parse_f64(v)?,
            "ssl_objective" => self.ssl = SslChoice::parse(v)?,
            "ntxent_temperature" => self.ntxent_temperature = parse_f64(v)?,
            "vicreg_invariance" => self.vicreg_weights.invariance = parse_f64(v)?,
            "vicreg_variance" => self.vicreg_weights.variance = parse_f64(v)?,
            "vicreg_covariance" => self.vicreg_weights.covariance = parse_f64(v)?,
            "augment_ops" => self.augment_ops = v.to_string(),
            "seed" => self.seed = parse_u64(v)?,
            "ema_decay" => self.ema_decay = parse_f64(v)?,
            "lr" => self.lr = parse_f64(v)?,
            "beta1" => self.beta1 = parse_f64(v)?,
            "beta2" => self.beta2 = parse_f64(v)?,
            "eval_interval" => self.eval_interval = parse_u64(v)?,
            "checkpoint_interval" => self.checkpoint_interval = parse_u64(v)?,
            "eval_samples" => self.eval_samples = parse_usize(v)?,
            "dataset" => self.dataset = v.to_string(),
            "out_dir" => self.out_dir = v.to_string(),
            "subset" => self.subset = parse_usize(v)?,
            "xflip" => self.xflip = parse_bool(v)?,
            "gen_base_channels" => self.gen_base_channels = parse_usize(v)?,
            "disc_channels" => self.disc_channels = parse_usize(v)?,
            "feature_channels" => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 4 {
                    return Err(Error::Config(format!(
                        "feature_channels needs 4 comma-separated values, got '{v}'"
                    )));
                }
                let mut c = [0usize; 4];
                for (slot, p) in c.iter_mut().zip(parts) {
                    *slot = parse_usize(p)?;
                }
                self.feature_channels = c;
            }
            "vit_embed_dim" => self.vit_embed_dim = parse_usize(v)?,
            "vit_blocks" => self.vit_blocks = parse_usize(v)?,
            "head_width" => self.head_width = parse_usize(v)?,
            "ppl_paths" => self.ppl_paths = parse_usize(v)?,
            "ppl_epsilon" => self.ppl_epsilon = parse_f64(v)?,
            "knn_k" => self.knn_k = parse_usize(v)?,
            "embed_dim" => self.embed_dim = parse_usize(v)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parses a flat config file: one `key = value` per line, `#` comments,
    /// blank lines ignored.
    pub fn from_str_contents(contents: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_str(contents)?;
        Ok(cfg)
    }

    pub fn apply_str(&mut self, contents: &str) -> Result<()> {
        for (lineno, raw) in contents.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let contents = std::fs::read_to_string(path)?;
        let cfg = Self::from_str_contents(&contents)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Renders the canonical file form.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_key_values() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// SHA-256 over the canonical rendering; checkpoints store this so
    /// resume and eval can detect configuration drift.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.to_file_string().as_bytes());
        h.finalize().into()
    }

    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }
}
