//! Instance encoder, classifier head and the local classification objective.

use crate::autodiff::{Graph, NodeId, ParamMap, Tensor};
use crate::data::MultimodalSample;
use crate::embedding::{fuse_node, route_condition_node, FusedRepresentation};
use crate::error::{Error, Result};
use crate::model::{names, ModelConfig};

/// Shared conv backbone over `[x ‖ mask]`, mean-pooled over time, then one
/// linear head per modality. Returns `M` nodes of width `D`.
pub fn encode_instance_node(g: &mut Graph<'_>, cfg: &ModelConfig, x: NodeId, mask: NodeId) -> Result<Vec<NodeId>> {
    let (xs, ms) = (g.value(x).shape().to_vec(), g.value(mask).shape().to_vec());
    if xs != ms || xs.len() != 2 || xs[1] != cfg.total_features() {
        return Err(Error::shape(
            "encode_instance",
            format!("input {xs:?}, mask {ms:?}, expected [L, {}]", cfg.total_features()),
        ));
    }
    let input = g.concat(&[x, mask])?;
    let (w, b) = (g.param("ins.conv.w")?, g.param("ins.conv.b")?);
    let h = g.conv1d(input, w, Some(b))?;
    let h = g.relu(h)?;
    let pooled = g.mean_rows(h)?;
    (0..cfg.modalities)
        .map(|m| {
            let (w, b) = (g.param(&names::head(m, "w"))?, g.param(&names::head(m, "b"))?);
            g.linear(pooled, w, Some(b))
        })
        .collect()
}

/// Plain-value form of [`encode_instance_node`].
pub fn encode_instance(params: &ParamMap, cfg: &ModelConfig, x: &Tensor, mask: &Tensor) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new(params);
    let (xn, mn) = (g.input(x.clone())?, g.input(mask.clone())?);
    let out = encode_instance_node(&mut g, cfg, xn, mn)?;
    Ok(out.into_iter().map(|n| g.value(n).data().to_vec()).collect())
}

/// Two-layer head from the `3DM` fused vector to class logits.
pub fn classify_node(g: &mut Graph<'_>, fused: NodeId) -> Result<NodeId> {
    let (w1, b1) = (g.param("cls.fc1.w")?, g.param("cls.fc1.b")?);
    let h = g.linear(fused, w1, Some(b1))?;
    let h = g.relu(h)?;
    let (w2, b2) = (g.param("cls.fc2.w")?, g.param("cls.fc2.b")?);
    g.linear(h, w2, Some(b2))
}

pub struct Forward {
    pub fused: NodeId,
    pub logits: NodeId,
}

/// Encoder, routing, fusion and classifier for one sample.
pub fn forward_node(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    x: &Tensor,
    mask: &Tensor,
    present: &[bool],
    no_cond: bool,
) -> Result<Forward> {
    if present.len() != cfg.modalities {
        return Err(Error::shape(
            "forward",
            format!("{} presence flags for {} modalities", present.len(), cfg.modalities),
        ));
    }
    let (xn, mn) = (g.input(x.clone())?, g.input(mask.clone())?);
    let instance = encode_instance_node(g, cfg, xn, mn)?;
    let conditions = (0..cfg.modalities)
        .map(|m| route_condition_node(g, present, m, cfg.embed_dim, no_cond))
        .collect::<Result<Vec<_>>>()?;
    let fused = fuse_node(g, &instance, &conditions)?;
    let logits = classify_node(g, fused)?;
    Ok(Forward { fused, logits })
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|v| v / z).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub class: usize,
    pub fused: FusedRepresentation,
}

/// Classify a sample from explicit inputs: `x̂` with an all-ones mask for
/// inference with imputation, or zero-filled `x^O` with its mask otherwise.
pub fn predict(
    params: &ParamMap,
    cfg: &ModelConfig,
    x: &Tensor,
    mask: &Tensor,
    present: &[bool],
    no_cond: bool,
) -> Result<Prediction> {
    let mut g = Graph::new(params);
    let f = forward_node(&mut g, cfg, x, mask, present, no_cond)?;
    let probs = softmax(g.value(f.logits).data());
    Ok(Prediction {
        class: argmax(&probs),
        probs,
        fused: FusedRepresentation::from_vec(cfg.embed_dim, g.value(f.fused).data().to_vec())?,
    })
}

/// Inputs the classifier sees for `sample` at inference. With `imputed`, the
/// reconstruction replaces the zero-filled values and the mask is all ones.
pub fn inference_inputs(sample: &MultimodalSample, imputed: Option<&Tensor>) -> (Tensor, Tensor) {
    match imputed {
        Some(xh) => (xh.clone(), Tensor::ones(xh.shape())),
        None => (sample.observed_concat(), sample.mask_concat()),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PhaseBReport {
    pub loss: f64,
    pub correct: usize,
    pub n: usize,
}

/// Batch-mean cross-entropy on zero-filled local observations. With
/// `backprop`, gradients of the mean are added into `params`.
pub fn phase_b_loss(
    params: &mut ParamMap,
    cfg: &ModelConfig,
    batch: &[&MultimodalSample],
    no_cond: bool,
    backprop: bool,
) -> Result<PhaseBReport> {
    if batch.is_empty() {
        return Err(Error::State("phase B step on an empty batch".into()));
    }
    let inv_n = 1.0 / batch.len() as f64;
    let mut report = PhaseBReport {
        n: batch.len(),
        ..Default::default()
    };
    for s in batch {
        if s.label >= cfg.classes {
            return Err(Error::shape("phase_b", format!("label {} for {} classes", s.label, cfg.classes)));
        }
        let grads = {
            let mut g = Graph::new(params);
            let f = forward_node(&mut g, cfg, &s.observed_concat(), &s.mask_concat(), &s.present, no_cond)?;
            if argmax(g.value(f.logits).data()) == s.label {
                report.correct += 1;
            }
            let loss = g.cross_entropy(f.logits, s.label)?;
            report.loss += g.value(loss).data()[0] * inv_n;
            if backprop {
                Some(g.backward_with(loss, Tensor::scalar(inv_n))?)
            } else {
                None
            }
        };
        if let Some(grads) = grads {
            grads.accumulate_into(params)?;
        }
    }
    Ok(report)
}
