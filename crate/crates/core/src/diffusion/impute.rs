//! Reverse-process imputation with observed cells clamped.

use rayon::prelude::*;

use crate::autodiff::{init, Graph, ParamMap, Tensor};
use crate::data::MultimodalSample;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

use super::denoiser::{EpsInput, EpsModel};
use super::schedule::DiffusionSchedule;

/// One ancestral sampling chain from `z_T ~ N(0, I)` down to `z_0` over the
/// cells where `observed` is 0. Returns `R ⊙ x + (1 − R) ⊙ z_0`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_chain<M: EpsModel>(
    model: &M,
    params: &ParamMap,
    sched: &DiffusionSchedule,
    x: &Tensor,
    observed: &Tensor,
    present: &[bool],
    sample_id: u64,
    rng: &mut Rng,
) -> Result<Tensor> {
    if x.shape() != observed.shape() {
        return Err(Error::shape(
            "impute",
            format!("values {:?} vs mask {:?}", x.shape(), observed.shape()),
        ));
    }
    let target = observed.map(|r| if r != 0.0 { 0.0 } else { 1.0 });
    let cond = x.zip_map(observed, |v, r| if r != 0.0 { v } else { 0.0 })?;
    let mut z = init::standard_normal(rng, x.shape());
    for t in (1..=sched.steps()).rev() {
        let noisy = z.zip_map(&target, |v, m| v * m)?;
        let eps_hat = {
            let mut g = Graph::new(params);
            let input = EpsInput {
                sample_id,
                t,
                noisy: g.input(noisy)?,
                cond_values: g.input(cond.clone())?,
                cond_mask: g.input(observed.clone())?,
                present,
            };
            let out = model.predict(&mut g, &input)?;
            g.value(out).clone()
        };
        let mean = sched.posterior_mean(&z, t, &eps_hat)?;
        z = if t > 1 {
            let sd = sched.posterior_variance(t).sqrt();
            let noise = init::standard_normal(rng, x.shape());
            mean.zip_map(&noise, |m, n| m + sd * n)?
        } else {
            mean
        };
        if !z.is_finite() {
            return Err(Error::NumericOverflow { op: "impute" });
        }
    }
    let mut out = x.clone();
    for ((o, &r), &zv) in out.data_mut().iter_mut().zip(observed.data()).zip(z.data()) {
        if r == 0.0 {
            *o = zv;
        }
    }
    Ok(out)
}

/// Impute the unobserved cells of `sample`, averaging `n_realizations`
/// chains. Randomness comes from the stream `(seed, sample.id)`. A sample
/// with nothing missing is returned unchanged.
pub fn impute<M: EpsModel>(
    model: &M,
    params: &ParamMap,
    sched: &DiffusionSchedule,
    sample: &MultimodalSample,
    n_realizations: usize,
    seed: u64,
) -> Result<Tensor> {
    let x = sample.observed_concat();
    let observed = sample.mask_concat();
    if observed.data().iter().all(|&r| r != 0.0) {
        return Ok(x);
    }
    if n_realizations == 0 {
        return Err(Error::Config("n_realizations must be >= 1".into()));
    }
    if !params.is_finite() {
        return Err(Error::NumericOverflow { op: "impute" });
    }
    let mut r = rng::stream(seed, &[sample.id]);
    let mut acc = reverse_chain(model, params, sched, &x, &observed, &sample.present, sample.id, &mut r)?;
    if n_realizations > 1 {
        for _ in 1..n_realizations {
            let next = reverse_chain(model, params, sched, &x, &observed, &sample.present, sample.id, &mut r)?;
            for ((a, &b), &o) in acc.data_mut().iter_mut().zip(next.data()).zip(observed.data()) {
                if o == 0.0 {
                    *a += b;
                }
            }
        }
        let inv = 1.0 / n_realizations as f64;
        for (a, &o) in acc.data_mut().iter_mut().zip(observed.data()) {
            if o == 0.0 {
                *a *= inv;
            }
        }
    }
    Ok(acc)
}

/// [`impute`] over many samples. The parallel path gives bit-identical
/// results because every sample draws from its own stream.
pub fn impute_all<M: EpsModel + Sync>(
    model: &M,
    params: &ParamMap,
    sched: &DiffusionSchedule,
    samples: &[MultimodalSample],
    n_realizations: usize,
    seed: u64,
    parallel: bool,
) -> Result<Vec<Tensor>> {
    let one = |s: &MultimodalSample| impute(model, params, sched, s, n_realizations, seed);
    if parallel {
        samples.par_iter().map(one).collect()
    } else {
        samples.iter().map(one).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::NodeId;
    use crate::data::{apply_missingness, generate_synthetic, MaskMode, MissingnessConfig, SyntheticConfig};
    use crate::diffusion::ConditionalDenoiser;
    use crate::model::{ModelBundle, ModelConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            modalities: 2,
            features: 1,
            l_ts: 10,
            embed_dim: 4,
            context_dim: 4,
            expert_hidden: 8,
            denoiser_hidden: 8,
            denoiser_blocks: 1,
            time_embed_dim: 8,
            encoder_width: 8,
            classifier_hidden: 8,
            ..Default::default()
        }
    }

    fn masked_data(seed: u64) -> Vec<MultimodalSample> {
        let mut ds = generate_synthetic(&SyntheticConfig {
            n: 6,
            modalities: 2,
            l_ts: 10,
            seed,
            ..Default::default()
        })
        .unwrap();
        apply_missingness(
            &mut ds,
            &MissingnessConfig {
                p_s: 1.0,
                p_w: 0.5,
                seed,
                mode: MaskMode::Cell,
            },
        )
        .unwrap();
        ds
    }

    #[test]
    fn nothing_missing_returns_input_bit_exactly() {
        let b = ModelBundle::init(tiny(), 0).unwrap();
        let ds = generate_synthetic(&SyntheticConfig {
            n: 2,
            modalities: 2,
            l_ts: 10,
            ..Default::default()
        })
        .unwrap();
        let sched = DiffusionSchedule::linear(5, 1e-4, 0.2).unwrap();
        let model = ConditionalDenoiser { config: &b.config, no_cond: false };
        let out = impute(&model, &b.params, &sched, &ds[0], 1, 0).unwrap();
        assert_eq!(out, ds[0].observed_concat());
    }

    #[test]
    fn observed_cells_are_conserved() {
        let b = ModelBundle::init(tiny(), 1).unwrap();
        let sched = DiffusionSchedule::linear(5, 1e-4, 0.2).unwrap();
        let model = ConditionalDenoiser { config: &b.config, no_cond: false };
        for s in masked_data(2) {
            let out = impute(&model, &b.params, &sched, &s, 2, 3).unwrap();
            let (x, r) = (s.observed_concat(), s.mask_concat());
            for ((o, xv), rv) in out.data().iter().zip(x.data()).zip(r.data()) {
                if *rv == 1.0 {
                    assert_eq!(o.to_bits(), xv.to_bits());
                }
            }
        }
    }

    #[test]
    fn one_step_oracle_recovers_ground_truth() {
        let ds = masked_data(4);
        let sched = DiffusionSchedule::from_betas(vec![0.3]).unwrap();
        let oracle = |g: &mut Graph<'_>, inp: &EpsInput<'_>| -> Result<NodeId> {
            let s = ds.iter().find(|s| s.id == inp.sample_id).unwrap();
            let truth = s.clean_concat();
            let ab = sched.alpha_bar(inp.t);
            let eps = g.value(inp.noisy).zip_map(&truth, |z, x| (z - ab.sqrt() * x) / (1.0 - ab).sqrt())?;
            g.input(eps)
        };
        for s in &ds {
            let out = impute(&oracle, &ParamMap::new(), &sched, s, 1, 5).unwrap();
            for (a, b) in out.data().iter().zip(s.clean_concat().data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn parallel_matches_sequential() {
        let b = ModelBundle::init(tiny(), 5).unwrap();
        let sched = DiffusionSchedule::linear(4, 1e-4, 0.2).unwrap();
        let model = ConditionalDenoiser { config: &b.config, no_cond: false };
        let ds = masked_data(6);
        let seq = impute_all(&model, &b.params, &sched, &ds, 1, 9, false).unwrap();
        let par = impute_all(&model, &b.params, &sched, &ds, 1, 9, true).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn non_finite_params_are_rejected() {
        let mut b = ModelBundle::init(tiny(), 5).unwrap();
        b.params.get_mut("den.out.b").unwrap().data_mut()[0] = f64::NAN;
        let sched = DiffusionSchedule::linear(4, 1e-4, 0.2).unwrap();
        let model = ConditionalDenoiser { config: &b.config, no_cond: false };
        let s = &masked_data(7)[0];
        assert!(matches!(
            impute(&model, &b.params, &sched, s, 1, 0),
            Err(Error::NumericOverflow { .. })
        ));
    }
}
