use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use super::{schedule_at, train_step_kl, train_step_vq, Adam, Directive, StageSchedule};
use crate::error::{Error, Result};
use crate::io::{synth_dataset, SynthKind};
use crate::model::{Head, Model};
use crate::quantizer::{CodebookStats, Noise};
use crate::tensor::{RngStream, Tensor};
use crate::tokenizer::Modality;

const DATA_STREAM: u64 = 0xda7a;
const NOISE_STREAM: u64 = 0x2015e;

/// Training clips grouped by resolution; each clip is `[F, H, W, 3]`.
/// Image batches take single random frames of the clips.
#[derive(Clone, Debug, Default)]
pub struct VideoCorpus {
    pub by_res: BTreeMap<usize, Vec<Tensor>>,
}

impl VideoCorpus {
    /// A synthetic corpus rendered at each resolution.
    pub fn synthetic(kind: SynthKind, n: usize, resolutions: &[usize], frames: usize, seed: u64) -> Result<Self> {
        let mut by_res = BTreeMap::new();
        for &r in resolutions {
            let clips = synth_dataset(kind, n, r, frames, seed)?.into_iter().map(|s| s.pixels).collect();
            by_res.insert(r, clips);
        }
        Ok(Self { by_res })
    }

    pub fn clips(&self, res: usize) -> Result<&[Tensor]> {
        match self.by_res.get(&res) {
            Some(c) if !c.is_empty() => Ok(c),
            _ => Err(Error::invalid(format!("no training clips at resolution {res}"))),
        }
    }

    /// `[B, F, H, W, 3]` batch (`F = 1` for images) drawn with `rng`.
    pub fn batch(&self, res: usize, modality: Modality, batch_size: usize, rng: &mut RngStream) -> Result<Tensor> {
        let clips = self.clips(res)?;
        let mut parts = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let clip = &clips[rng.below(clips.len())];
            let frames = clip.shape()[0];
            let part = match modality {
                Modality::Video if frames < 2 => {
                    return Err(Error::invalid(format!(
                        "video batch requested but clips at resolution {res} have {frames} frame"
                    )))
                }
                Modality::Video => clip.clone(),
                Modality::Image => clip.narrow(0, rng.below(frames), 1)?,
            };
            let mut shape = vec![1];
            shape.extend_from_slice(part.shape());
            parts.push(part.reshape(&shape)?);
        }
        Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub stage: u8,
    pub modality: Modality,
    pub resolution: usize,
    pub lr: f64,
    pub recon: f64,
    /// VQ loss, or unweighted KL for the Gaussian head
    pub vq_or_kl: f64,
    /// batch codebook usage and perplexity (VQ only)
    pub usage: Option<f64>,
    pub perplexity: Option<f64>,
}

pub const METRICS_HEADER: &str = "# iter\tstage\tmodality\tresolution\tlr\trecon\tvq_or_kl\tusage\tperplexity";

impl fmt::Display for MetricsRow {
    /// Tab-separated; floats use the shortest exact representation.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v}"));
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.iter,
            self.stage,
            self.modality.as_str(),
            self.resolution,
            self.lr,
            self.recon,
            self.vq_or_kl,
            opt(self.usage),
            opt(self.perplexity)
        )
    }
}

/// Drives a model through a [`StageSchedule`]. Every iteration's batch,
/// resolution and noise come from streams keyed by `(seed, iter)`, so runs
/// are reproducible and resumable.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub opt: Adam,
    pub schedule: StageSchedule,
    pub corpus: VideoCorpus,
    pub batch_size: usize,
    pub seed: u64,
    /// next iteration to run
    pub iter: usize,
}

impl Trainer {
    pub fn new(model: Model, schedule: StageSchedule, corpus: VideoCorpus, batch_size: usize, seed: u64) -> Result<Self> {
        let tc = &model.cfg.tokenizer;
        schedule.validate(tc.patch.patch, tc.net.window)?;
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for r in schedule.resolutions() {
            corpus.clips(r)?;
        }
        let opt = Adam::new(schedule.total_iters());
        Ok(Self {
            model,
            opt,
            schedule,
            corpus,
            batch_size,
            seed,
            iter: 0,
        })
    }

    pub fn done(&self) -> bool {
        self.iter >= self.schedule.total_iters()
    }

    pub fn directive(&self) -> Result<Directive> {
        schedule_at(self.iter, &self.schedule, self.seed)
    }

    /// Runs the next iteration.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let d = self.directive()?;
        let mut rng = RngStream::new(self.seed).split(DATA_STREAM).split(self.iter as u64);
        let batch = self.corpus.batch(d.resolution, d.modality, self.batch_size, &mut rng)?;
        let lr = self.opt.lr_at(self.iter);
        let row = match self.model.head() {
            Head::Vq => {
                let m = train_step_vq(&mut self.model, &batch, &mut self.opt, lr)?;
                MetricsRow {
                    iter: self.iter,
                    stage: d.stage,
                    modality: d.modality,
                    resolution: d.resolution,
                    lr,
                    recon: m.recon,
                    vq_or_kl: m.vq,
                    usage: Some(m.usage),
                    perplexity: Some(m.perplexity),
                }
            }
            Head::Kl => {
                let mut noise = RngStream::new(self.seed).split(NOISE_STREAM).split(self.iter as u64);
                let m = train_step_kl(&mut self.model, &batch, &mut self.opt, lr, Noise::Sample(&mut noise))?;
                MetricsRow {
                    iter: self.iter,
                    stage: d.stage,
                    modality: d.modality,
                    resolution: d.resolution,
                    lr,
                    recon: m.recon,
                    vq_or_kl: m.kl,
                    usage: None,
                    perplexity: None,
                }
            }
        };
        self.iter += 1;
        Ok(row)
    }

    /// Runs up to `n` iterations (stopping at the end of the schedule),
    /// writing one log line each.
    pub fn run(&mut self, n: usize, log: &mut dyn Write) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        for _ in 0..n {
            if self.done() {
                break;
            }
            let row = self.step()?;
            writeln!(log, "{row}")?;
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Reconstruction quality of `model` over `clips` (each `[F, H, W, 3]`).
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// per-clip mean squared error
    pub mse: Vec<f64>,
    pub mean_mse: f64,
    /// codebook statistics of the evaluation pass (VQ head only)
    pub codebook: Option<CodebookStats>,
}

/// Deterministic reconstruction of every clip; codebook usage counts are
/// reset first so the statistics cover exactly this pass.
pub fn evaluate(model: &mut Model, clips: &[Tensor], batch_size: usize) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(Error::invalid("evaluate: no clips"));
    }
    model.codebook.reset_usage();
    let mut mse = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(batch_size.max(1)) {
        let parts = chunk
            .iter()
            .map(|c| {
                let mut shape = vec![1];
                shape.extend_from_slice(c.shape());
                c.reshape(&shape)
            })
            .collect::<Result<Vec<_>>>()?;
        let x = Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)?;
        let x_hat = model.reconstruct(&x)?;
        let per = x.numel() / chunk.len();
        for (a, b) in x.data().chunks(per).zip(x_hat.data().chunks(per)) {
            mse.push(a.iter().zip(b).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / per as f64);
        }
    }
    let codebook = match model.head() {
        Head::Vq => Some(model.codebook.stats()?),
        Head::Kl => None,
    };
    let mean_mse = mse.iter().sum::<f64>() / mse.len() as f64;
    Ok(EvalReport { mse, mean_mse, codebook })
}
