//! Local two-phase training on one client.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, ParamMap};
use crate::data::MultimodalSample;
use crate::diffusion::{diffusion_loss, ConditionalDenoiser, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::rng;
use crate::task::phase_b_loss;

/// Local optimization schedule shared by every client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalTraining {
    pub lr_diffusion: f64,
    pub lr_task: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl Default for LocalTraining {
    fn default() -> Self {
        LocalTraining {
            lr_diffusion: 1e-3,
            lr_task: 1e-3,
            batch_size: 32,
            local_epochs: 1,
        }
    }
}

impl LocalTraining {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_diffusion > 0.0 && self.lr_task > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be > 0".into()));
        }
        Ok(())
    }
}

/// A client: its sample ids and its working copy of the parameters.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    /// Indices into the federation's training set.
    pub samples: Vec<usize>,
    pub params: ParamMap,
}

impl ClientState {
    pub fn n_k(&self) -> usize {
        self.samples.len()
    }
}

/// What a client sends back after local training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalReport {
    pub client: usize,
    pub phase_a_loss: Option<f64>,
    pub phase_b_loss: Option<f64>,
    pub phase_b_accuracy: Option<f64>,
    pub diverged: bool,
}

/// Everything the local phases need that is fixed for a run.
pub struct LocalContext<'a> {
    pub model: &'a ModelConfig,
    pub schedule: &'a DiffusionSchedule,
    pub mask_ratio: (f64, f64),
    pub training: &'a LocalTraining,
    pub no_cond: bool,
    pub seed: u64,
}

fn batches(ids: &[usize], size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order = ids.to_vec();
    order.shuffle(&mut rng::seeded(seed));
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

/// Phase A then Phase B on `params`, each with a fresh optimizer.
#[allow(clippy::too_many_arguments)]
pub fn train_locally(
    params: &mut ParamMap,
    client: usize,
    data: &[MultimodalSample],
    ids: &[usize],
    round: u64,
    run_a: bool,
    run_b: bool,
    ctx: &LocalContext<'_>,
) -> Result<LocalReport> {
    let mut report = LocalReport {
        client,
        ..Default::default()
    };
    let tr = ctx.training;
    let base = rng::derive(ctx.seed, &[round, client as u64]);

    if run_a && tr.local_epochs > 0 {
        let model = ConditionalDenoiser {
            config: ctx.model,
            no_cond: ctx.no_cond,
        };
        let mut opt = Adam::new(tr.lr_diffusion)?;
        let (mut sum, mut count) = (0.0, 0usize);
        for epoch in 0..tr.local_epochs as u64 {
            for (bi, batch) in batches(ids, tr.batch_size, rng::derive(base, &[0, epoch])).iter().enumerate() {
                let samples: Vec<&MultimodalSample> = batch.iter().map(|&i| &data[i]).collect();
                let step_seed = rng::derive(base, &[1, epoch, bi as u64]);
                let r = diffusion_loss(&model, params, &samples, ctx.schedule, ctx.mask_ratio, step_seed, true)?;
                if r.used > 0 {
                    opt.step(params);
                    sum += r.loss;
                    count += 1;
                } else {
                    params.zero_grads();
                }
            }
        }
        report.phase_a_loss = (count > 0).then(|| sum / count as f64);
    }

    if run_b && tr.local_epochs > 0 {
        let mut opt = Adam::new(tr.lr_task)?;
        let (mut sum, mut count) = (0.0, 0usize);
        let (mut correct, mut seen) = (0usize, 0usize);
        for epoch in 0..tr.local_epochs as u64 {
            for batch in batches(ids, tr.batch_size, rng::derive(base, &[2, epoch])) {
                let samples: Vec<&MultimodalSample> = batch.iter().map(|&i| &data[i]).collect();
                let r = phase_b_loss(params, ctx.model, &samples, ctx.no_cond, true)?;
                opt.step(params);
                sum += r.loss;
                count += 1;
                correct += r.correct;
                seen += r.n;
            }
        }
        report.phase_b_loss = (count > 0).then(|| sum / count as f64);
        report.phase_b_accuracy = (seen > 0).then(|| correct as f64 / seen as f64);
    }
    Ok(report)
}
