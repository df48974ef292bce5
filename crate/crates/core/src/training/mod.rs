//! Losses, the Adam optimizer with its learning-rate schedule, the
//! progressive two-stage scheduler and the training loop.

mod optim;
mod schedule;
mod step;
mod trainer;

pub use optim::{default_warmup, lr_at, Adam, ADAM_EPS, BASE_LR, BETA1, BETA2, CLIP_NORM, WARMUP_FRACTION};
pub use schedule::{schedule_at, Directive, ModalityRule, StageSchedule};
pub use step::{train_step_kl, train_step_vq, KlMetrics, VqMetrics};
pub use trainer::{evaluate, EvalReport, MetricsRow, Trainer, VideoCorpus, METRICS_HEADER};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean squared error over all elements.
pub fn recon_loss(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Shape {
            op: "recon_loss",
            lhs: x.shape().to_vec(),
            rhs: x_hat.shape().to_vec(),
        });
    }
    if x.numel() == 0 {
        return Err(Error::invalid("recon_loss of an empty tensor"));
    }
    let s: f64 = x.data().iter().zip(x_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / x.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::quantizer::Noise;
    use crate::tensor::RngStream;
    use crate::tokenizer::{NetConfig, PatchConfig, TokenizerConfig};

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            tokenizer: TokenizerConfig {
                patch: PatchConfig {
                    patch: 4,
                    temporal_patch: 2,
                    hidden: 16,
                    resolutions: vec![8, 16],
                    max_frames: 5,
                },
                net: NetConfig {
                    spatial_layers: 1,
                    temporal_layers: 1,
                    window: 2,
                    heads: 2,
                    latent_dim: 4,
                    mlp_ratio: 2,
                },
            },
            codebook_size: 32,
            normalize_codes: true,
        }
    }

    #[test]
    fn recon_loss_examples() {
        let x = Tensor::zeros(&[2, 3]);
        assert_eq!(recon_loss(&x, &x).unwrap(), 0.0);
        assert_eq!(recon_loss(&x, &Tensor::ones(&[2, 3])).unwrap(), 1.0);
        assert!(recon_loss(&x, &Tensor::ones(&[3, 2])).is_err());
    }

    #[test]
    fn zero_decoder_on_zero_targets_has_zero_recon() {
        let mut m = Model::new(&tiny(), 1).unwrap();
        for id in [m.net.decoder.out_image.weight, m.net.decoder.out_video.weight] {
            let shape = m.store.get(id).shape().to_vec();
            m.store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        for b in [m.net.decoder.out_image.bias, m.net.decoder.out_video.bias].into_iter().flatten() {
            let shape = m.store.get(b).shape().to_vec();
            m.store.set(b, Tensor::zeros(&shape)).unwrap();
        }
        let mut opt = Adam::new(10);
        let x = Tensor::zeros(&[2, 5, 8, 8, 3]);
        let met = train_step_vq(&mut m, &x, &mut opt, 0.0).unwrap();
        assert_eq!(met.recon, 0.0);
        assert!(met.usage > 0.0 && met.usage <= 1.0);
    }

    #[test]
    fn one_step_touches_every_connected_parameter() {
        let mut m = Model::new(&tiny(), 2).unwrap();
        let before = m.store.clone();
        let mut opt = Adam::new(10);
        let x = RngStream::new(3).uniform_tensor(&[2, 5, 8, 8, 3], -1.0, 1.0);
        train_step_vq(&mut m, &x, &mut opt, 1e-3).unwrap();
        for (id, name, t) in m.store.iter() {
            assert_ne!(t, before.get(id), "{name} unchanged");
        }
    }

    #[test]
    fn kl_step_requires_kl_head_and_is_deterministic_without_noise() {
        let mut m = Model::new(&tiny(), 2).unwrap();
        let x = RngStream::new(3).uniform_tensor(&[1, 5, 8, 8, 3], -1.0, 1.0);
        let mut opt = Adam::new(10);
        assert!(train_step_kl(&mut m, &x, &mut opt, 1e-3, Noise::None).is_err());
        m.enable_kl().unwrap();
        let (mut a, mut b) = (m.clone(), m.clone());
        let (mut oa, mut ob) = (Adam::new(10), Adam::new(10));
        let ma = train_step_kl(&mut a, &x, &mut oa, 1e-3, Noise::None).unwrap();
        let mb = train_step_kl(&mut b, &x, &mut ob, 1e-3, Noise::None).unwrap();
        assert_eq!(ma, mb);
        assert!(ma.kl.is_finite());
    }

    #[test]
    fn zero_kl_weight_is_plain_autoencoding() {
        let mut m = Model::new(&tiny(), 2).unwrap();
        m.enable_kl().unwrap();
        m.kl.as_mut().unwrap().weight = 0.0;
        let x = RngStream::new(3).uniform_tensor(&[1, 1, 8, 8, 3], -1.0, 1.0);
        let met = train_step_kl(&mut m, &x, &mut Adam::new(10), 1e-3, Noise::None).unwrap();
        assert_eq!(met.total, met.recon);
        assert!(met.kl > 0.0);
    }
}
