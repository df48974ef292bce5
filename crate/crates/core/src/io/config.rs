//! Flat `key = value` run configuration with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use super::synth::{SynthKind, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::generation::{DenoiserConfig, DiffusionConfig, LmConfig, BETA_END, BETA_START};
use crate::model::ModelConfig;
use crate::tokenizer::{NetConfig, PatchConfig, TokenizerConfig};
use crate::training::{ModalityRule, StageSchedule};

/// Environment variable that replaces the built-in default seed.
pub const SEED_ENV: &str = "JOINTTOK_SEED";

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected 'key = value'", n + 1)));
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key '{k}'", n + 1)));
        }
    }
    Ok(out)
}

/// Everything a CLI run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub schedule: StageSchedule,
    pub dataset: SynthKind,
    pub num_videos: usize,
    pub batch_size: usize,
    /// write a checkpoint every this many iterations (0: only at stage ends)
    pub checkpoint_every: usize,
    pub kl_iters: usize,
    pub lm: LmConfig,
    pub lm_iters: usize,
    pub lm_batch: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub diffusion_steps: usize,
    pub denoiser: DenoiserConfig,
    pub denoiser_iters: usize,
    pub samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = ModelConfig::default();
        model.tokenizer.patch.hidden = 64;
        model.tokenizer.patch.resolutions = vec![32];
        model.tokenizer.patch.max_frames = 9;
        model.tokenizer.net.spatial_layers = 2;
        model.tokenizer.net.temporal_layers = 2;
        Self {
            seed: 0,
            model,
            schedule: StageSchedule {
                stage1_iters: 100,
                stage2_iters: 300,
                image_res_stage1: 32,
                joint_res_set: vec![32],
                modality_rule: ModalityRule::Alternate,
                video_len: 9,
            },
            dataset: SynthKind::MovingShapes,
            num_videos: 64,
            batch_size: 4,
            checkpoint_every: 0,
            kl_iters: 200,
            lm: LmConfig {
                num_classes: NUM_CLASSES,
                context: 48,
                ..LmConfig::default()
            },
            lm_iters: 300,
            lm_batch: 8,
            temperature: 1.0,
            top_k: 32,
            diffusion_steps: 100,
            denoiser: DenoiserConfig {
                max_tokens: 48,
                ..DenoiserConfig::default()
            },
            denoiser_iters: 300,
            samples: 4,
        }
    }
}

fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, T::Err> {
    v.split(',').map(|s| s.trim().parse()).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Defaults with the seed taken from [`SEED_ENV`] when set.
    pub fn defaults_from_env() -> Result<Self> {
        let mut c = Self::default();
        if let Ok(s) = std::env::var(SEED_ENV) {
            c.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}='{s}' is not an unsigned integer")))?;
        }
        Ok(c)
    }

    /// Parses config text over `base`; unknown keys are errors.
    pub fn parse_over(base: Self, text: &str) -> Result<Self> {
        let mut c = base;
        for (k, v) in parse_kv(text)? {
            c.set(&k, &v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_over(Self::defaults_from_env()?, text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
        }
        fn nums<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
            list(v).map_err(|_| Error::Config(format!("{key}: cannot parse list '{v}'")))
        }
        let tc = &mut self.model.tokenizer;
        match key {
            "seed" => self.seed = num(key, v)?,
            "patch" => tc.patch.patch = num(key, v)?,
            "temporal_patch" => tc.patch.temporal_patch = num(key, v)?,
            "hidden" => tc.patch.hidden = num(key, v)?,
            "resolutions" => tc.patch.resolutions = nums(key, v)?,
            "max_frames" => tc.patch.max_frames = num(key, v)?,
            "spatial_layers" => tc.net.spatial_layers = num(key, v)?,
            "temporal_layers" => tc.net.temporal_layers = num(key, v)?,
            "window" => tc.net.window = num(key, v)?,
            "heads" => tc.net.heads = num(key, v)?,
            "latent_dim" => tc.net.latent_dim = num(key, v)?,
            "mlp_ratio" => tc.net.mlp_ratio = num(key, v)?,
            "codebook_size" => self.model.codebook_size = num(key, v)?,
            "normalize_codes" => self.model.normalize_codes = num(key, v)?,
            "stage1_iters" => self.schedule.stage1_iters = num(key, v)?,
            "stage2_iters" => self.schedule.stage2_iters = num(key, v)?,
            "image_res_stage1" => self.schedule.image_res_stage1 = num(key, v)?,
            "joint_res_set" => self.schedule.joint_res_set = nums(key, v)?,
            "modality_rule" => self.schedule.modality_rule = v.parse()?,
            "video_len" => self.schedule.video_len = num(key, v)?,
            "dataset" => self.dataset = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "num_videos" => self.num_videos = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "kl_iters" => self.kl_iters = num(key, v)?,
            "lm_context" => self.lm.context = num(key, v)?,
            "lm_hidden" => self.lm.hidden = num(key, v)?,
            "lm_layers" => self.lm.layers = num(key, v)?,
            "lm_heads" => self.lm.heads = num(key, v)?,
            "lm_iters" => self.lm_iters = num(key, v)?,
            "lm_batch" => self.lm_batch = num(key, v)?,
            "temperature" => self.temperature = num(key, v)?,
            "top_k" => self.top_k = num(key, v)?,
            "diffusion_steps" => self.diffusion_steps = num(key, v)?,
            "denoiser_tokens" => self.denoiser.max_tokens = num(key, v)?,
            "denoiser_hidden" => self.denoiser.hidden = num(key, v)?,
            "denoiser_layers" => self.denoiser.layers = num(key, v)?,
            "denoiser_heads" => self.denoiser.heads = num(key, v)?,
            "denoiser_iters" => self.denoiser_iters = num(key, v)?,
            "samples" => self.samples = num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        self.sync();
        Ok(())
    }

    /// Keeps the derived sub-configs in step with the tokenizer.
    fn sync(&mut self) {
        self.lm.codebook_size = self.model.codebook_size;
        self.lm.num_classes = NUM_CLASSES;
        self.denoiser.latent_dim = self.model.tokenizer.net.latent_dim;
        self.denoiser.num_classes = NUM_CLASSES;
    }

    pub fn validate(&self) -> Result<()> {
        let tc = &self.model.tokenizer;
        tc.validate()?;
        let s = &self.schedule;
        s.validate(tc.patch.patch, tc.net.window)?;
        if s.total_iters() == 0 {
            return Err(Error::Config("stage1_iters + stage2_iters must be positive".into()));
        }
        for r in s.resolutions() {
            if !tc.patch.resolutions.contains(&r) {
                return Err(Error::Config(format!("schedule resolution {r} is not in resolutions")));
            }
        }
        if s.video_len > tc.patch.max_frames || tc.grid_for(s.video_len.max(1), tc.patch.patch, tc.patch.patch).is_err()
        {
            return Err(Error::Config(format!(
                "video_len {} must be 1 + a multiple of temporal_patch and at most max_frames {}",
                s.video_len, tc.patch.max_frames
            )));
        }
        if self.model.codebook_size < 2 {
            return Err(Error::Config("codebook_size must be at least 2".into()));
        }
        if self.num_videos == 0 || self.batch_size == 0 || self.lm_batch == 0 || self.samples == 0 {
            return Err(Error::Config("num_videos, batch_size, lm_batch and samples must be positive".into()));
        }
        self.lm.validate()?;
        if !(self.temperature > 0.0) || self.top_k == 0 || self.top_k > self.model.codebook_size {
            return Err(Error::Config("temperature must be positive and top_k in 1..=codebook_size".into()));
        }
        if self.diffusion_steps == 0 {
            return Err(Error::Config("diffusion_steps must be positive".into()));
        }
        if self.denoiser.hidden == 0 || self.denoiser.hidden % 2 != 0 || self.denoiser.hidden % self.denoiser.heads.max(1) != 0 {
            return Err(Error::Config("denoiser_hidden must be even and divisible by denoiser_heads".into()));
        }
        Ok(())
    }

    pub fn diffusion(&self) -> Result<DiffusionConfig> {
        DiffusionConfig::linear(self.diffusion_steps, BETA_START, BETA_END)
    }

    /// Resolved configuration as parseable text.
    pub fn to_text(&self) -> String {
        let tc: &TokenizerConfig = &self.model.tokenizer;
        let PatchConfig {
            patch,
            temporal_patch,
            hidden,
            resolutions,
            max_frames,
        } = &tc.patch;
        let NetConfig {
            spatial_layers,
            temporal_layers,
            window,
            heads,
            latent_dim,
            mlp_ratio,
        } = &tc.net;
        let s = &self.schedule;
        let rows: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("patch", patch.to_string()),
            ("temporal_patch", temporal_patch.to_string()),
            ("hidden", hidden.to_string()),
            ("resolutions", join(resolutions)),
            ("max_frames", max_frames.to_string()),
            ("spatial_layers", spatial_layers.to_string()),
            ("temporal_layers", temporal_layers.to_string()),
            ("window", window.to_string()),
            ("heads", heads.to_string()),
            ("latent_dim", latent_dim.to_string()),
            ("mlp_ratio", mlp_ratio.to_string()),
            ("codebook_size", self.model.codebook_size.to_string()),
            ("normalize_codes", self.model.normalize_codes.to_string()),
            ("stage1_iters", s.stage1_iters.to_string()),
            ("stage2_iters", s.stage2_iters.to_string()),
            ("image_res_stage1", s.image_res_stage1.to_string()),
            ("joint_res_set", join(&s.joint_res_set)),
            ("modality_rule", s.modality_rule.to_string()),
            ("video_len", s.video_len.to_string()),
            ("dataset", self.dataset.to_string()),
            ("num_videos", self.num_videos.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("kl_iters", self.kl_iters.to_string()),
            ("lm_context", self.lm.context.to_string()),
            ("lm_hidden", self.lm.hidden.to_string()),
            ("lm_layers", self.lm.layers.to_string()),
            ("lm_heads", self.lm.heads.to_string()),
            ("lm_iters", self.lm_iters.to_string()),
            ("lm_batch", self.lm_batch.to_string()),
            ("temperature", self.temperature.to_string()),
            ("top_k", self.top_k.to_string()),
            ("diffusion_steps", self.diffusion_steps.to_string()),
            ("denoiser_tokens", self.denoiser.max_tokens.to_string()),
            ("denoiser_hidden", self.denoiser.hidden.to_string()),
            ("denoiser_layers", self.denoiser.layers.to_string()),
            ("denoiser_heads", self.denoiser.heads.to_string()),
            ("denoiser_iters", self.denoiser_iters.to_string()),
            ("samples", self.samples.to_string()),
        ];
        let mut out = String::from("# resolved configuration\n");
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
