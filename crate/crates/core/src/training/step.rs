use super::Adam;
use crate::error::{Error, Result};
use crate::model::{kl_forward, vq_forward, Model};
use crate::nn::Fwd;
use crate::quantizer::{usage_stats, Noise, Selection};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VqMetrics {
    pub total: f64,
    pub recon: f64,
    pub vq: f64,
    /// fraction of the codebook selected by this batch
    pub usage: f64,
    /// perplexity of this batch's selections
    pub perplexity: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlMetrics {
    pub total: f64,
    pub recon: f64,
    /// unweighted KL, summed over latents and averaged over the batch
    pub kl: f64,
    pub grad_norm: f64,
}

/// One VQ step: `recon + L_VQ`, Adam update of every reachable parameter,
/// then codebook re-normalization.
pub fn train_step_vq(model: &mut Model, batch: &Tensor, opt: &mut Adam, lr: f64) -> Result<VqMetrics> {
    let (metrics, grads) = {
        let mut f = Fwd::train(&model.store);
        let x = f.constant(batch.clone());
        let pass = vq_forward(&model.net, &mut model.codebook, &mut f, x, &Selection::Nearest)?;
        let total = f.g.add(pass.recon, pass.quant.loss)?;
        let recon = f.value(pass.recon).item();
        let vq = f.value(pass.quant.loss).item();
        let total_v = f.value(total).item();
        let mut counts = vec![0u64; model.codebook.size];
        for &k in &pass.quant.indices {
            counts[k] += 1;
        }
        let stats = usage_stats(&counts)?;
        let grads = f.g.backward(total).map_err(|e| dump("vq", e, &[("recon", recon), ("vq", vq)]))?;
        let metrics = VqMetrics {
            total: total_v,
            recon,
            vq,
            usage: stats.usage_fraction,
            perplexity: stats.perplexity,
            grad_norm: 0.0,
        };
        (metrics, f.param_grads(&grads))
    };
    let grad_norm = opt
        .update(&mut model.store, &grads, lr)
        .map_err(|e| dump("vq", e, &[("recon", metrics.recon), ("vq", metrics.vq)]))?;
    model.codebook.renormalize(&mut model.store)?;
    Ok(VqMetrics { grad_norm, ..metrics })
}

/// One KL fine-tuning step: `recon + λ3·KL` with reparameterized sampling.
pub fn train_step_kl(model: &mut Model, batch: &Tensor, opt: &mut Adam, lr: f64, noise: Noise<'_>) -> Result<KlMetrics> {
    let Some(head) = &model.kl else {
        return Err(Error::invalid("train_step_kl: model has no KL head (convert a VQ model first)"));
    };
    let (metrics, grads) = {
        let mut f = Fwd::train(&model.store);
        let x = f.constant(batch.clone());
        let pass = kl_forward(&model.net, &model.codebook, head, &mut f, x, noise)?;
        let total = f.g.add(pass.recon, pass.gauss.kl)?;
        let recon = f.value(pass.recon).item();
        let total_v = f.value(total).item();
        let kl = pass.gauss.kl_raw;
        let grads = f.g.backward(total).map_err(|e| dump("kl", e, &[("recon", recon), ("kl", kl)]))?;
        let metrics = KlMetrics {
            total: total_v,
            recon,
            kl,
            grad_norm: 0.0,
        };
        (metrics, f.param_grads(&grads))
    };
    let grad_norm = opt
        .update(&mut model.store, &grads, lr)
        .map_err(|e| dump("kl", e, &[("recon", metrics.recon), ("kl", metrics.kl)]))?;
    Ok(KlMetrics { grad_norm, ..metrics })
}

/// Re-labels a numeric failure with the per-term loss values of the step.
fn dump(kind: &str, e: Error, terms: &[(&str, f64)]) -> Error {
    match e {
        Error::NumericFault { op } => {
            let terms: Vec<String> = terms.iter().map(|(k, v)| format!("{k}={v}")).collect();
            Error::NumericFault {
                op: format!("train_step_{kind} [{}]: {op}", terms.join(" ")),
            }
        }
        other => other,
    }
}
