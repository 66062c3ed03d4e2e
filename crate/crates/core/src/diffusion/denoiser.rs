//! Conditional noise predictor `ε_θ(z_t, t | c)`.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::embedding::condition_sequence_node;
use crate::error::Result;
use crate::model::{names, ModelConfig};

use super::moe::{encode_observed_context, MoEGate};

/// Per-sample inputs to a noise predictor. All tensors are `[L, F]`.
pub struct EpsInput<'s> {
    pub sample_id: u64,
    pub t: usize,
    /// `z_t` on target cells, zero elsewhere.
    pub noisy: NodeId,
    /// Conditioning values, zero outside `cond_mask`.
    pub cond_values: NodeId,
    pub cond_mask: NodeId,
    pub present: &'s [bool],
}

/// Anything that predicts the injected noise from graph inputs.
pub trait EpsModel {
    fn predict(&self, g: &mut Graph<'_>, input: &EpsInput<'_>) -> Result<NodeId>;
}

impl<F> EpsModel for F
where
    F: Fn(&mut Graph<'_>, &EpsInput<'_>) -> Result<NodeId>,
{
    fn predict(&self, g: &mut Graph<'_>, input: &EpsInput<'_>) -> Result<NodeId> {
        self(g, input)
    }
}

/// Sinusoidal embedding of a diffusion step.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Tensor::vector(out)
}

/// `c = [c_O ⊕ c_cond]`, one row per time step.
pub fn condition_bundle(
    g: &mut Graph<'_>,
    config: &ModelConfig,
    cond_values: NodeId,
    cond_mask: NodeId,
    present: &[bool],
    no_cond: bool,
) -> Result<NodeId> {
    let gate = MoEGate::new(config.experts, config.top_k)?;
    let c_o = encode_observed_context(g, cond_values, cond_mask, gate)?.context;
    let steps = g.value(cond_values).rows();
    let c_cond = condition_sequence_node(g, present, steps, config.embed_dim, no_cond)?;
    g.concat(&[c_o, c_cond])
}

/// The residual 1-D convolutional denoiser.
pub struct ConditionalDenoiser<'c> {
    pub config: &'c ModelConfig,
    pub no_cond: bool,
}

impl EpsModel for ConditionalDenoiser<'_> {
    fn predict(&self, g: &mut Graph<'_>, input: &EpsInput<'_>) -> Result<NodeId> {
        let c = condition_bundle(
            g,
            self.config,
            input.cond_values,
            input.cond_mask,
            input.present,
            self.no_cond,
        )?;
        let x = g.concat(&[input.noisy, input.cond_values, input.cond_mask, c])?;
        let (w, b) = (g.param("den.in.w")?, g.param("den.in.b")?);
        let mut h = g.linear(x, w, Some(b))?;

        let te = g.input(timestep_embedding(input.t, self.config.time_embed_dim))?;
        let (w, b) = (g.param("den.temb.w")?, g.param("den.temb.b")?);
        let te = g.linear(te, w, Some(b))?;
        let te = g.silu(te)?;

        for blk in 0..self.config.denoiser_blocks {
            let p = |part: &str| names::block(blk, part);
            let (tw, tb) = (g.param(&p("t.w"))?, g.param(&p("t.b"))?);
            let shift = g.linear(te, tw, Some(tb))?;
            let (lg, lb) = (g.param(&p("ln.g"))?, g.param(&p("ln.b"))?);
            let y = g.layer_norm(h, lg, lb)?;
            let y = g.silu(y)?;
            let (cw, cb) = (g.param(&p("conv1.w"))?, g.param(&p("conv1.b"))?);
            let y = g.conv1d(y, cw, Some(cb))?;
            let y = g.add_row(y, shift)?;
            let y = g.silu(y)?;
            let (cw, cb) = (g.param(&p("conv2.w"))?, g.param(&p("conv2.b"))?);
            let y = g.conv1d(y, cw, Some(cb))?;
            h = g.add(h, y)?;
        }
        let h = g.silu(h)?;
        let (w, b) = (g.param("den.out.w")?, g.param("den.out.b")?);
        g.linear(h, w, Some(b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::init;
    use crate::embedding::W_COND;
    use crate::model::ModelBundle;
    use crate::rng;

    fn small() -> ModelConfig {
        ModelConfig {
            modalities: 2,
            features: 1,
            l_ts: 8,
            embed_dim: 4,
            context_dim: 4,
            expert_hidden: 6,
            denoiser_hidden: 8,
            denoiser_blocks: 2,
            time_embed_dim: 8,
            encoder_width: 8,
            classifier_hidden: 8,
            ..Default::default()
        }
    }

    fn run(bundle: &ModelBundle, no_cond: bool, present: &[bool]) -> (Tensor, f64) {
        let cfg = &bundle.config;
        let mut r = rng::seeded(9);
        let mut g = Graph::new(&bundle.params);
        let noisy = g.input(init::standard_normal(&mut r, &[cfg.l_ts, 2])).unwrap();
        let vals = g.input(init::standard_normal(&mut r, &[cfg.l_ts, 2])).unwrap();
        let mask = g.input(Tensor::ones(&[cfg.l_ts, 2])).unwrap();
        let input = EpsInput {
            sample_id: 0,
            t: 5,
            noisy,
            cond_values: vals,
            cond_mask: mask,
            present,
        };
        let out = ConditionalDenoiser { config: cfg, no_cond }.predict(&mut g, &input).unwrap();
        let loss = g.sum_squares(out).unwrap();
        let grads = g.backward(loss).unwrap();
        let norm = grads.param(W_COND).map_or(0.0, Tensor::norm);
        (g.value(out).clone(), norm)
    }

    #[test]
    fn embedding_endpoints() {
        let e = timestep_embedding(0, 6);
        assert_eq!(e.data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!((timestep_embedding(3, 4).data()[0] - 3f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn output_shape_matches_features() {
        let b = ModelBundle::init(small(), 1).unwrap();
        let (out, _) = run(&b, false, &[true, true]);
        assert_eq!(out.shape(), &[8, 2]);
    }

    #[test]
    fn condition_path_is_live() {
        let mut b = ModelBundle::init(small(), 2).unwrap();
        let (before, norm) = run(&b, false, &[true, false]);
        assert!(norm > 0.0);
        let table = b.params.get_mut(W_COND).unwrap();
        table.data_mut().iter_mut().for_each(|v| *v += 0.5);
        let (after, _) = run(&b, false, &[true, false]);
        assert_ne!(before, after);
    }

    #[test]
    fn disabled_condition_ignores_the_table() {
        let mut b = ModelBundle::init(small(), 3).unwrap();
        let (before, norm) = run(&b, true, &[true, false]);
        assert_eq!(norm, 0.0);
        b.params.get_mut(W_COND).unwrap().data_mut()[0] += 1.0;
        assert_eq!(before, run(&b, true, &[true, false]).0);
    }
}
