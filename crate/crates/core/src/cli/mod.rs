//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use jointtok::generation::{
    ar_sample, ddpm_sample, frame_predict, Denoiser, GridMeta, PredictOptions, Sampling, TokenLm, TokenSequence,
};
use jointtok::io::{
    as_clip_batch, atomic_write, decode_file, encode_file, metrics_report, psnr, read_checkpoint, read_tensor_file,
    synth_dataset, write_checkpoint, write_tensor_file, Checkpoint, CheckpointKind, Dtype, RunConfig, Sample,
    TokenStream, NUM_CLASSES,
};
use jointtok::model::{Head, Model};
use jointtok::tensor::{RngStream, Tensor};
use jointtok::training::{Adam, StageSchedule, Trainer, VideoCorpus, METRICS_HEADER};
use jointtok::{Error, Result};

mod selftest;

pub use selftest::selftest;

const LM_STREAM: u64 = 0x1e;
const SAMPLE_STREAM: u64 = 0x6e;
const DENOISER_STREAM: u64 = 0xd5;

fn load_config(base: RunConfig, path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => {
            base.validate()?;
            Ok(base)
        }
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            RunConfig::parse_over(base, &text)
        }
    }
}

/// Config for a run that continues from a checkpoint; architecture keys
/// must not change.
fn config_over_checkpoint(ck: &Checkpoint, path: Option<&Path>) -> Result<RunConfig> {
    let base = ck.run_config()?;
    let cfg = load_config(base.clone(), path)?;
    if cfg.model != base.model {
        return Err(Error::Config("tokenizer architecture keys differ from the checkpoint".into()));
    }
    Ok(cfg)
}

fn write_resolved(path: &Path, cfg: &RunConfig) -> Result<()> {
    atomic_write(path, cfg.to_text().as_bytes())
}

fn prepare_out(out: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    write_resolved(&out.join(format!("{command}.resolved.cfg")), cfg)
}

fn beside(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Clips the generators train on: the dataset at the first joint resolution.
fn dataset(cfg: &RunConfig) -> Result<(usize, Vec<Sample>)> {
    let res = cfg.schedule.joint_res_set[0];
    Ok((res, synth_dataset(cfg.dataset, cfg.num_videos, res, cfg.schedule.video_len, cfg.seed)?))
}

fn run_trainer(tr: &mut Trainer, out: &Path, log_name: &str, ckpt: impl Fn(&Trainer) -> Result<()>) -> Result<()> {
    let mut log = format!("{METRICS_HEADER}\n");
    let mut last = None;
    while !tr.done() {
        let row = tr.step()?;
        let _ = writeln!(log, "{row}");
        ckpt(tr)?;
        last = Some(row);
    }
    atomic_write(&out.join(log_name), log.as_bytes())?;
    if let Some(r) = last {
        println!(
            "finished {} iterations: recon {} vq_or_kl {}",
            r.iter + 1,
            r.recon,
            r.vq_or_kl
        );
    }
    Ok(())
}

pub fn train(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(RunConfig::defaults_from_env()?, config)?;
    prepare_out(out, "train", &cfg)?;
    let corpus = VideoCorpus::synthetic(
        cfg.dataset,
        cfg.num_videos,
        &cfg.schedule.resolutions(),
        cfg.schedule.video_len,
        cfg.seed,
    )?;
    let model = Model::new(&cfg.model, cfg.seed)?;
    let mut tr = Trainer::new(model, cfg.schedule.clone(), corpus, cfg.batch_size, cfg.seed)?;
    let s1 = cfg.schedule.stage1_iters;
    let every = cfg.checkpoint_every;
    run_trainer(&mut tr, out, "metrics.tsv", |tr| {
        let it = tr.iter;
        let stage = if it <= s1 && s1 > 0 { 1 } else { 2 };
        if it == s1 && s1 > 0 && !tr.done() {
            let ck = Checkpoint::of_model(&tr.model, &cfg, Some(&tr.opt), 1, it as u64);
            write_checkpoint(&out.join("stage1.ckpt"), &ck)?;
        }
        if every > 0 && it % every == 0 && !tr.done() {
            let ck = Checkpoint::of_model(&tr.model, &cfg, Some(&tr.opt), stage, it as u64);
            write_checkpoint(&out.join(format!("iter{it:06}.ckpt")), &ck)?;
        }
        Ok(())
    })?;
    let stage = if cfg.schedule.stage2_iters > 0 { 2 } else { 1 };
    let ck = Checkpoint::of_model(&tr.model, &cfg, Some(&tr.opt), stage, tr.iter as u64);
    write_checkpoint(&out.join("tokenizer.ckpt"), &ck)?;
    println!("wrote {}", out.join("tokenizer.ckpt").display());
    Ok(())
}

pub fn finetune_kl(checkpoint: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let ck = read_checkpoint(checkpoint)?;
    let cfg = config_over_checkpoint(&ck, config)?;
    let mut model = ck.to_model()?;
    if model.head() != Head::Vq {
        return Err(Error::invalid("finetune-kl starts from a VQ checkpoint"));
    }
    if cfg.kl_iters == 0 {
        return Err(Error::Config("kl_iters must be positive".into()));
    }
    prepare_out(out, "finetune-kl", &cfg)?;
    model.enable_kl()?;
    let schedule = StageSchedule {
        stage1_iters: 0,
        stage2_iters: cfg.kl_iters,
        ..cfg.schedule.clone()
    };
    let corpus = VideoCorpus::synthetic(
        cfg.dataset,
        cfg.num_videos,
        &schedule.resolutions(),
        schedule.video_len,
        cfg.seed,
    )?;
    let mut tr = Trainer::new(model, schedule, corpus, cfg.batch_size, cfg.seed)?;
    run_trainer(&mut tr, out, "kl_metrics.tsv", |_| Ok(()))?;
    let ck = Checkpoint::of_model(&tr.model, &cfg, Some(&tr.opt), 2, ck.iter + tr.iter as u64);
    write_checkpoint(&out.join("kl.ckpt"), &ck)?;
    println!("wrote {}", out.join("kl.ckpt").display());
    Ok(())
}

pub fn encode(checkpoint: &Path, input: &Path, output: &Path, cond: Option<u32>) -> Result<()> {
    let ck = read_checkpoint(checkpoint)?;
    let summary = encode_file(input, &ck, output, cond)?;
    write_resolved(&beside(output, ".cfg"), &ck.run_config()?)?;
    println!("{summary}");
    Ok(())
}

pub fn decode(checkpoint: &Path, input: &Path, output: &Path) -> Result<()> {
    let ck = read_checkpoint(checkpoint)?;
    let x = decode_file(input, &ck, output)?;
    write_resolved(&beside(output, ".cfg"), &ck.run_config()?)?;
    println!("decoded {:?} to {}", x.shape(), output.display());
    Ok(())
}

fn vq_model(ck: &Checkpoint) -> Result<Model> {
    if ck.kind != CheckpointKind::Tokenizer || ck.head != Head::Vq {
        return Err(Error::invalid("this command needs a VQ tokenizer checkpoint"));
    }
    ck.to_model()
}

/// Loads the token model, or trains one on the class-labelled dataset.
fn obtain_lm(model: &mut Model, cfg: &RunConfig, lm: Option<&Path>, out: &Path) -> Result<TokenLm> {
    if let Some(p) = lm {
        let ck = read_checkpoint(p)?;
        let lm = ck.to_lm()?;
        if lm.cfg.codebook_size != model.codebook.size {
            return Err(Error::Config("LM vocabulary does not match the tokenizer codebook".into()));
        }
        return Ok(lm);
    }
    let (_, data) = dataset(cfg)?;
    let mut seqs = Vec::with_capacity(data.len());
    for s in &data {
        let (tokens, [_, sl, h, w]) = model.encode_indices(&as_clip_batch(&s.pixels)?)?;
        seqs.push(TokenSequence {
            tokens,
            cond: Some(s.class),
            meta: GridMeta::new(sl, h, w),
        });
    }
    if seqs[0].tokens.len() > cfg.lm.context {
        return Err(Error::Config(format!(
            "lm_context {} is shorter than the {} tokens of a clip",
            cfg.lm.context,
            seqs[0].tokens.len()
        )));
    }
    let mut lm = TokenLm::new(cfg.lm.clone(), cfg.seed)?;
    let mut opt = Adam::new(cfg.lm_iters);
    let mut log = String::from("# iter\tloss\n");
    for it in 0..cfg.lm_iters {
        let mut rng = RngStream::new(cfg.seed).split(LM_STREAM).split(it as u64);
        let batch: Vec<_> = (0..cfg.lm_batch).map(|_| seqs[rng.below(seqs.len())].clone()).collect();
        let lr = opt.lr_at(it);
        let loss = lm.train_step(&batch, &mut opt, lr)?;
        let _ = writeln!(log, "{it}\t{loss}");
    }
    atomic_write(&out.join("lm_metrics.tsv"), log.as_bytes())?;
    write_checkpoint(
        &out.join("lm.ckpt"),
        &Checkpoint::of_lm(&lm, cfg, Some(&opt), cfg.lm_iters as u64),
    )?;
    println!("trained token model for {} iterations", cfg.lm_iters);
    Ok(lm)
}

fn class_of(class: Option<usize>, i: usize) -> Result<usize> {
    match class {
        Some(c) if c >= NUM_CLASSES => Err(Error::invalid(format!("class {c} outside 0..{NUM_CLASSES}"))),
        Some(c) => Ok(c),
        None => Ok(i % NUM_CLASSES),
    }
}

fn sampling(cfg: &RunConfig) -> Sampling {
    Sampling {
        temperature: cfg.temperature,
        top_k: cfg.top_k,
    }
}

pub fn generate(
    checkpoint: &Path,
    lm: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
    class: Option<usize>,
) -> Result<()> {
    let ck = read_checkpoint(checkpoint)?;
    let cfg = config_over_checkpoint(&ck, config)?;
    let mut model = vq_model(&ck)?;
    prepare_out(out, "generate", &cfg)?;
    let lm = obtain_lm(&mut model, &cfg, lm, out)?;
    let res = cfg.schedule.joint_res_set[0];
    let (s, h, w) = cfg.model.tokenizer.grid_for(cfg.schedule.video_len, res, res)?;
    let meta = GridMeta::new(s, h, w);
    for i in 0..cfg.samples {
        let c = class_of(class, i)?;
        let mut rng = RngStream::new(cfg.seed).split(SAMPLE_STREAM).split(i as u64);
        let grid = ar_sample(&lm, Some(c), meta, sampling(&cfg), &mut rng)?;
        let video = model.decode_indices(&grid.indices, meta.as_grid())?;
        let stream = TokenStream {
            codebook_size: model.codebook.size,
            grid,
            cond: Some(c as u32),
        };
        atomic_write(&out.join(format!("sample{i}.ottk")), &stream.encode()?)?;
        write_tensor_file(&out.join(format!("sample{i}.otsr")), &video, Dtype::F32)?;
        println!("sample {i}: class {c}, shape {:?}", video.shape());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn predict_frames(
    checkpoint: &Path,
    lm: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
    input: Option<&Path>,
    prefix_slots: usize,
    future_slots: usize,
    slide: bool,
    class: Option<usize>,
) -> Result<()> {
    let ck = read_checkpoint(checkpoint)?;
    let cfg = config_over_checkpoint(&ck, config)?;
    let mut model = vq_model(&ck)?;
    prepare_out(out, "predict-frames", &cfg)?;
    let lm = obtain_lm(&mut model, &cfg, lm, out)?;
    let (clip, default_class) = match input {
        Some(p) => (as_clip_batch(&read_tensor_file(p)?)?, 0),
        None => {
            let (_, data) = dataset(&cfg)?;
            (as_clip_batch(&data[0].pixels)?, data[0].class)
        }
    };
    if prefix_slots == 0 {
        return Err(Error::invalid("prefix_slots must be at least 1"));
    }
    let frames = cfg.model.tokenizer.frames_for_slots(prefix_slots);
    if frames > clip.shape()[1] {
        return Err(Error::invalid(format!(
            "{prefix_slots} prefix slots need {frames} frames, clip has {}",
            clip.shape()[1]
        )));
    }
    let prefix = clip.narrow(1, 0, frames)?;
    let opts = PredictOptions {
        sampling: sampling(&cfg),
        cond: Some(class_of(class.or(Some(default_class)), 0)?),
        slide,
    };
    let mut rng = RngStream::new(cfg.seed).split(SAMPLE_STREAM);
    let p = frame_predict(&mut model, &lm, &prefix, future_slots, opts, &mut rng)?;
    write_tensor_file(&out.join("prediction.otsr"), &p.video, Dtype::F32)?;
    let stream = TokenStream {
        codebook_size: model.codebook.size,
        grid: p.grid,
        cond: opts.cond.map(|c| c as u32),
    };
    atomic_write(&out.join("prediction.ottk"), &stream.encode()?)?;
    println!("predicted {} frames from a {frames}-frame prefix", p.video.shape()[1]);
    Ok(())
}

pub fn diffuse(
    checkpoint: &Path,
    denoiser: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
    class: Option<usize>,
) -> Result<()> {
    let ck = read_checkpoint(checkpoint)?;
    let cfg = config_over_checkpoint(&ck, config)?;
    let model = ck.to_model()?;
    prepare_out(out, "diffuse", &cfg)?;
    let dc = cfg.diffusion()?;
    let (_, data) = dataset(&cfg)?;
    let latents = data
        .iter()
        .map(|s| model.encode_latent(&as_clip_batch(&s.pixels)?))
        .collect::<Result<Vec<_>>>()?;
    let shape = latents[0].shape().to_vec();
    let dn = match denoiser {
        Some(p) => read_checkpoint(p)?.to_denoiser()?,
        None => {
            let tokens: usize = shape[1..4].iter().product();
            if tokens > cfg.denoiser.max_tokens {
                return Err(Error::Config(format!(
                    "denoiser_tokens {} is smaller than the {tokens} latent tokens of a clip",
                    cfg.denoiser.max_tokens
                )));
            }
            let mut dn = Denoiser::new(cfg.denoiser.clone(), cfg.seed)?;
            let mut opt = Adam::new(cfg.denoiser_iters);
            let mut log = String::from("# iter\tloss\n");
            for it in 0..cfg.denoiser_iters {
                let mut rng = RngStream::new(cfg.seed).split(DENOISER_STREAM).split(it as u64);
                let pick: Vec<usize> = (0..cfg.lm_batch).map(|_| rng.below(latents.len())).collect();
                let z0 = Tensor::concat(&pick.iter().map(|&i| &latents[i]).collect::<Vec<_>>(), 0)?;
                let cond: Vec<usize> = pick.iter().map(|&i| data[i].class).collect();
                let lr = opt.lr_at(it);
                let loss = dn.train_step(&z0, Some(&cond), &dc, &mut opt, lr, &mut rng)?;
                let _ = writeln!(log, "{it}\t{loss}");
            }
            atomic_write(&out.join("denoiser_metrics.tsv"), log.as_bytes())?;
            write_checkpoint(
                &out.join("denoiser.ckpt"),
                &Checkpoint::of_denoiser(&dn, &cfg, Some(&opt), cfg.denoiser_iters as u64),
            )?;
            println!("trained denoiser for {} iterations", cfg.denoiser_iters);
            dn
        }
    };
    for i in 0..cfg.samples {
        let c = class_of(class, i)?;
        let mut rng = RngStream::new(cfg.seed).split(SAMPLE_STREAM).split(i as u64);
        let z = ddpm_sample(&shape, Some(&[c]), &dn, &dc, &mut rng)?;
        let video = model.decode_latent(&z)?;
        write_tensor_file(&out.join(format!("latent{i}.otsr")), &z, Dtype::F64)?;
        write_tensor_file(&out.join(format!("sample{i}.otsr")), &video, Dtype::F32)?;
        println!("sample {i}: class {c}, shape {:?}", video.shape());
    }
    Ok(())
}

pub fn eval(checkpoint: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let ck = read_checkpoint(checkpoint)?;
    let cfg = config_over_checkpoint(&ck, config)?;
    let mut model = ck.to_model()?;
    let (_, data) = dataset(&cfg)?;
    let mut report = String::from("# sample\tmse\tpsnr\n");
    let mut total = 0.0;
    for (i, s) in data.iter().enumerate() {
        let x = as_clip_batch(&s.pixels)?;
        let m = metrics_report(&x, &model.reconstruct(&x)?)?;
        total += m.mse;
        let _ = writeln!(report, "{i}\t{}\t{}", m.mse, m.psnr);
    }
    let mean = total / data.len() as f64;
    let _ = writeln!(report, "mean\t{mean}\t{}", psnr(mean));
    print!("{report}");
    if let Some(out) = out {
        prepare_out(out, "eval", &cfg)?;
        atomic_write(&out.join("eval.tsv"), report.as_bytes())?;
    }
    Ok(())
}
