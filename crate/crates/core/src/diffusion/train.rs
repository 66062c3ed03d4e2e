//! Self-supervised denoising loss over a batch.

use rand::{Rng as _, RngCore};

use crate::autodiff::{init, Graph, ParamMap, Tensor};
use crate::data::MultimodalSample;
use crate::error::Result;
use crate::rng;

use super::denoiser::{EpsInput, EpsModel};
use super::schedule::DiffusionSchedule;
use super::selfmask::{make_self_mask, SelfMaskPlan};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    /// Batch mean of the per-sample masked MSE.
    pub loss: f64,
    pub used: usize,
    pub skipped: usize,
}

/// Everything random about one sample's loss term.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub plan: SelfMaskPlan,
    pub t: usize,
    pub eps: Tensor,
}

/// Draw the mask plan, step and noise for `sample` from the stream
/// `(seed, sample.id)`.
pub fn draw_noise(
    sample: &MultimodalSample,
    sched: &DiffusionSchedule,
    mask_ratio: (f64, f64),
    seed: u64,
) -> Result<NoiseDraw> {
    let mut r = rng::stream(seed, &[sample.id]);
    let observed = sample.mask_concat();
    let plan = make_self_mask(&observed, mask_ratio, r.next_u64())?;
    let t = r.random_range(1..=sched.steps());
    let eps = init::standard_normal(&mut r, observed.shape());
    Ok(NoiseDraw { plan, t, eps })
}

/// Masked denoising loss `‖ε − ε_θ‖²` averaged over target cells, then over
/// the samples of the batch. With `backprop`, gradients of the batch mean are
/// added to the accumulators in `params`.
///
/// Samples with fewer than two observed cells are skipped.
pub fn diffusion_loss<M: EpsModel>(
    model: &M,
    params: &mut ParamMap,
    batch: &[&MultimodalSample],
    sched: &DiffusionSchedule,
    mask_ratio: (f64, f64),
    seed: u64,
    backprop: bool,
) -> Result<LossReport> {
    let mut draws = Vec::with_capacity(batch.len());
    let mut skipped = 0;
    for s in batch {
        match draw_noise(s, sched, mask_ratio, seed) {
            Ok(d) => draws.push((*s, d)),
            Err(crate::Error::Unsatisfiable(msg)) => {
                log::warn!("sample {} skipped: {msg}", s.id);
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if draws.is_empty() {
        return Ok(LossReport {
            loss: 0.0,
            used: 0,
            skipped,
        });
    }
    let inv_n = 1.0 / draws.len() as f64;
    let mut total = 0.0;
    for (sample, d) in &draws {
        let x = sample.observed_concat();
        let noised = sched.q_sample_masked(&x, d.t, &d.eps, &d.plan.target_mask)?;
        let noisy = noised.zip_map(&d.plan.target_mask, |z, m| z * m)?;
        let cond = x.zip_map(&d.plan.conditioning_mask, |v, m| v * m)?;

        let grads = {
            let mut g = Graph::new(params);
            let input = EpsInput {
                sample_id: sample.id,
                t: d.t,
                noisy: g.input(noisy)?,
                cond_values: g.input(cond)?,
                cond_mask: g.input(d.plan.conditioning_mask.clone())?,
                present: &sample.present,
            };
            let pred = model.predict(&mut g, &input)?;
            let eps = g.input(d.eps.clone())?;
            let target = g.input(d.plan.target_mask.clone())?;
            let diff = g.sub(pred, eps)?;
            let diff = g.hadamard(diff, target)?;
            let sq = g.sum_squares(diff)?;
            let loss = g.scale(sq, 1.0 / d.plan.target_count() as f64)?;
            total += g.value(loss).data()[0];
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
    Ok(LossReport {
        loss: total * inv_n,
        used: draws.len(),
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Adam, NodeId};
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::diffusion::ConditionalDenoiser;
    use crate::model::{ModelBundle, ModelConfig};
    use std::collections::HashMap;

    fn data(n: usize, seed: u64) -> Vec<MultimodalSample> {
        generate_synthetic(&SyntheticConfig {
            n,
            modalities: 2,
            l_ts: 12,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn zero_model(g: &mut Graph<'_>, inp: &EpsInput<'_>) -> Result<NodeId> {
        let shape = g.value(inp.noisy).shape().to_vec();
        g.input(Tensor::zeros(&shape))
    }

    #[test]
    fn oracle_denoiser_has_zero_loss() {
        let ds = data(6, 1);
        let sched = DiffusionSchedule::linear(20, 1e-4, 0.3).unwrap();
        let truth: HashMap<u64, Tensor> = ds.iter().map(|s| (s.id, s.observed_concat())).collect();
        let oracle = |g: &mut Graph<'_>, inp: &EpsInput<'_>| -> Result<NodeId> {
            let ab = sched.alpha_bar(inp.t);
            let x0 = &truth[&inp.sample_id];
            let eps = g.value(inp.noisy).zip_map(x0, |z, x| (z - ab.sqrt() * x) / (1.0 - ab).sqrt())?;
            g.input(eps)
        };
        let batch: Vec<_> = ds.iter().collect();
        let mut p = ParamMap::new();
        let r = diffusion_loss(&oracle, &mut p, &batch, &sched, (0.1, 0.9), 3, false).unwrap();
        assert_eq!(r.used, 6);
        assert!(r.loss < 1e-20, "{}", r.loss);
    }

    #[test]
    fn zero_denoiser_loss_is_noise_energy() {
        let ds = data(200, 2);
        let sched = DiffusionSchedule::linear(50, 1e-4, 0.1).unwrap();
        let batch: Vec<_> = ds.iter().collect();
        let mut p = ParamMap::new();
        let r = diffusion_loss(&zero_model, &mut p, &batch, &sched, (0.1, 0.9), 4, false).unwrap();
        // Oracle: the same draws, averaged directly.
        let mut oracle = 0.0;
        let mut cells = 0usize;
        for s in &ds {
            let d = draw_noise(s, &sched, (0.1, 0.9), 4).unwrap();
            let per: f64 = d.eps.data().iter().zip(d.plan.target_mask.data()).map(|(e, m)| e * e * m).sum();
            oracle += per / d.plan.target_count() as f64;
            cells += d.plan.target_count();
        }
        assert!(cells >= 1000);
        assert!((r.loss - oracle / 200.0).abs() < 1e-12);
        assert!((r.loss - 1.0).abs() < 0.1, "{}", r.loss);
    }

    #[test]
    fn sample_with_too_few_cells_is_skipped() {
        let mut ds = data(2, 3);
        for m in ds[0].masks.iter_mut() {
            m.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        ds[0].masks[0].data_mut()[0] = 1.0;
        let sched = DiffusionSchedule::linear(10, 1e-4, 0.1).unwrap();
        let batch: Vec<_> = ds.iter().collect();
        let r = diffusion_loss(&zero_model, &mut ParamMap::new(), &batch, &sched, (0.1, 0.9), 0, false).unwrap();
        assert_eq!((r.used, r.skipped), (1, 1));
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let ds = data(5, 4);
        let sched = DiffusionSchedule::linear(10, 1e-4, 0.2).unwrap();
        let fwd: Vec<_> = ds.iter().collect();
        let rev: Vec<_> = ds.iter().rev().collect();
        let a = diffusion_loss(&zero_model, &mut ParamMap::new(), &fwd, &sched, (0.1, 0.9), 1, false).unwrap();
        let b = diffusion_loss(&zero_model, &mut ParamMap::new(), &rev, &sched, (0.1, 0.9), 1, false).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
    }

    #[test]
    fn micro_denoiser_gradient_matches_finite_differences() {
        // ε̂ = w0 · noisy + w1 · cond_values + c
        let micro = |g: &mut Graph<'_>, inp: &EpsInput<'_>| -> Result<NodeId> {
            let x = g.concat(&[inp.noisy, inp.cond_values])?;
            let (w, c) = (g.param("w")?, g.param("c")?);
            g.linear(x, w, Some(c))
        };
        let make = |t: [f64; 3]| {
            let mut p = ParamMap::new();
            p.insert("w", Tensor::new(vec![2, 1], vec![t[0], t[1]]).unwrap());
            p.insert("c", Tensor::vector(vec![t[2]]));
            p
        };
        let ds: Vec<_> = data(4, 5)
            .into_iter()
            .map(|mut s| {
                s.modalities.truncate(1);
                s.masks.truncate(1);
                s.present.truncate(1);
                s
            })
            .collect();
        let batch: Vec<_> = ds.iter().collect();
        let sched = DiffusionSchedule::linear(10, 1e-4, 0.2).unwrap();
        let theta = [0.3, -0.2, 0.1];
        let mut p = make(theta);
        diffusion_loss(&micro, &mut p, &batch, &sched, (0.3, 0.7), 8, true).unwrap();
        let w = p.grad("w").unwrap().data();
        let analytic = [w[0], w[1], p.grad("c").unwrap().data()[0]];
        let f = |t: [f64; 3]| {
            diffusion_loss(&micro, &mut make(t), &batch, &sched, (0.3, 0.7), 8, false)
                .unwrap()
                .loss
        };
        let h = 1e-6;
        for i in 0..3 {
            let (mut up, mut dn) = (theta, theta);
            up[i] += h;
            dn[i] -= h;
            let numeric = (f(up) - f(dn)) / (2.0 * h);
            let rel = (numeric - analytic[i]).abs() / numeric.abs().max(1e-8);
            assert!(rel < 1e-4, "param {i}: {numeric} vs {}", analytic[i]);
        }
    }

    #[test]
    fn training_halves_the_loss() {
        let cfg = ModelConfig {
            modalities: 2,
            features: 1,
            l_ts: 12,
            embed_dim: 4,
            context_dim: 8,
            expert_hidden: 16,
            denoiser_hidden: 16,
            denoiser_blocks: 2,
            time_embed_dim: 8,
            encoder_width: 8,
            classifier_hidden: 8,
            ..Default::default()
        };
        let mut bundle = ModelBundle::init(cfg.clone(), 6).unwrap();
        let ds = data(8, 6);
        let batch: Vec<_> = ds.iter().collect();
        let sched = DiffusionSchedule::linear(20, 1e-4, 0.3).unwrap();
        let model = ConditionalDenoiser { config: &cfg, no_cond: false };
        let eval = |p: &mut ParamMap| diffusion_loss(&model, p, &batch, &sched, (0.1, 0.9), 77, false).unwrap().loss;
        let initial = eval(&mut bundle.params);
        let mut opt = Adam::new(3e-3).unwrap();
        // Fixed batch and fixed noise, so the objective does not move.
        for _ in 0..200 {
            diffusion_loss(&model, &mut bundle.params, &batch, &sched, (0.1, 0.9), 77, true).unwrap();
            opt.step(&mut bundle.params);
        }
        let last = eval(&mut bundle.params);
        assert!(last <= 0.5 * initial, "{initial} -> {last}");
    }
}
