//! Round orchestration: broadcast, local two-phase training, upload and
//! aggregation.

mod client;
mod fedavg;

pub use client::{train_locally, ClientState, LocalContext, LocalReport, LocalTraining};
pub use fedavg::{fedavg, fedavg_weights, Upload};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamMap;
use crate::data::{FederatedPartition, MultimodalSample};
use crate::error::{Error, Result};
use crate::rng;

/// `round(participation · K)` distinct client ids, drawn from the stream
/// `(seed, round)` and returned in ascending order.
pub fn sample_clients(k: usize, participation: f64, seed: u64, round: u64) -> Result<Vec<usize>> {
    if !(participation > 0.0 && participation <= 1.0) {
        return Err(Error::Config(format!("participation {participation} outside (0, 1]")));
    }
    let count = (participation * k as f64).round() as usize;
    if count == 0 {
        return Err(Error::Config(format!(
            "participation {participation} of {k} clients selects nobody"
        )));
    }
    let mut ids = index::sample(&mut rng::stream(seed, &[round]), k, count).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

#[derive(Clone, Debug)]
pub struct ServerState {
    pub global: ParamMap,
    /// Number of completed rounds.
    pub round: u64,
    pub seed: u64,
}

impl ServerState {
    pub fn new(global: ParamMap, seed: u64) -> Self {
        ServerState { global, round: 0, seed }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundPlan {
    pub selected: Vec<usize>,
    pub run_phase_a: bool,
    pub run_phase_b: bool,
    pub no_imputation: bool,
    pub no_cond: bool,
    /// Train selected clients on the rayon pool.
    pub parallel: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u64,
    pub selected: Vec<usize>,
    pub excluded: Vec<usize>,
    pub phase_a_loss: Option<f64>,
    pub phase_b_loss: Option<f64>,
    pub phase_b_accuracy: Option<f64>,
    pub clients: Vec<LocalReport>,
}

/// Build one client per partition entry, each holding a copy of `global`.
pub fn make_clients(partition: &FederatedPartition, data: &[MultimodalSample], global: &ParamMap) -> Result<Vec<ClientState>> {
    let index_of: std::collections::HashMap<u64, usize> = data.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
    partition
        .assignments
        .iter()
        .enumerate()
        .map(|(k, ids)| {
            let samples = ids
                .iter()
                .map(|id| {
                    index_of
                        .get(id)
                        .copied()
                        .ok_or_else(|| Error::State(format!("client {k} references unknown sample {id}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if samples.is_empty() {
                return Err(Error::State(format!("client {k} has no samples")));
            }
            Ok(ClientState {
                id: k,
                samples,
                params: global.clone(),
            })
        })
        .collect()
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// One communication round. Selected clients receive a copy of the global
/// parameters, train locally and upload; the server replaces its global state
/// with the sample-weighted average. Unselected clients are left untouched.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    data: &[MultimodalSample],
    plan: &RoundPlan,
    ctx: &LocalContext<'_>,
) -> Result<RoundReport> {
    if plan.selected.is_empty() {
        return Err(Error::Config("a round needs at least one selected client".into()));
    }
    for c in clients.iter() {
        if !c.params.same_schema(&server.global) {
            return Err(Error::Protocol(format!("client {} has a divergent parameter schema", c.id)));
        }
    }
    let round = server.round + 1;
    let mut chosen: Vec<&mut ClientState> = clients
        .iter_mut()
        .filter(|c| plan.selected.contains(&c.id))
        .collect();
    if chosen.len() != plan.selected.len() {
        return Err(Error::Config(format!("selection {:?} names unknown clients", plan.selected)));
    }
    let global = &server.global;
    let work = |c: &mut &mut ClientState| -> Result<LocalReport> {
        c.params = global.clone();
        let local_ctx = LocalContext {
            no_cond: plan.no_cond,
            ..*ctx
        };
        match train_locally(&mut c.params, c.id, data, &c.samples, round, plan.run_phase_a, plan.run_phase_b, &local_ctx) {
            Ok(r) => Ok(r),
            Err(Error::NumericOverflow { op }) => {
                log::warn!("client {} diverged in {op}", c.id);
                Ok(LocalReport {
                    client: c.id,
                    diverged: true,
                    ..Default::default()
                })
            }
            Err(e) => Err(e),
        }
    };
    let reports: Vec<LocalReport> = if plan.parallel {
        chosen.par_iter_mut().map(work).collect::<Result<_>>()?
    } else {
        chosen.iter_mut().map(work).collect::<Result<_>>()?
    };

    let uploads: Vec<Upload> = chosen
        .iter()
        .zip(&reports)
        .filter(|(c, r)| {
            let keep = !r.diverged && c.params.is_finite();
            if !keep {
                log::warn!("client {} excluded from aggregation", c.id);
            }
            keep
        })
        .map(|(c, _)| Upload {
            client: c.id,
            params: c.params.clone(),
            n: c.n_k(),
        })
        .collect();
    let excluded: Vec<usize> = chosen
        .iter()
        .map(|c| c.id)
        .filter(|id| !uploads.iter().any(|u| u.client == *id))
        .collect();
    if uploads.is_empty() {
        return Err(Error::NumericOverflow { op: "round" });
    }
    server.global = fedavg(&uploads)?;
    server.global.zero_grads();
    server.round = round;
    Ok(RoundReport {
        round,
        selected: plan.selected.clone(),
        excluded,
        phase_a_loss: mean_of(reports.iter().map(|r| r.phase_a_loss)),
        phase_b_loss: mean_of(reports.iter().map(|r| r.phase_b_loss)),
        phase_b_accuracy: mean_of(reports.iter().map(|r| r.phase_b_accuracy)),
        clients: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, partition, PartitionConfig, SyntheticConfig};
    use crate::diffusion::DiffusionSchedule;
    use crate::model::{ModelBundle, ModelConfig};

    fn small() -> ModelConfig {
        ModelConfig {
            modalities: 2,
            features: 1,
            l_ts: 8,
            embed_dim: 4,
            context_dim: 4,
            expert_hidden: 4,
            denoiser_hidden: 8,
            denoiser_blocks: 1,
            time_embed_dim: 4,
            encoder_width: 4,
            classifier_hidden: 4,
            ..Default::default()
        }
    }

    struct Setup {
        data: Vec<MultimodalSample>,
        clients: Vec<ClientState>,
        server: ServerState,
        cfg: ModelConfig,
        sched: DiffusionSchedule,
        training: LocalTraining,
    }

    fn setup(k: usize, epochs: usize) -> Setup {
        let data = generate_synthetic(&SyntheticConfig {
            n: 24,
            modalities: 2,
            l_ts: 8,
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        let part = partition(
            &data,
            &PartitionConfig {
                clients: k,
                dirichlet_alpha: 10.0,
                overlap_ratio: 0.0,
                seed: 2,
            },
        )
        .unwrap();
        let cfg = small();
        let bundle = ModelBundle::init(cfg.clone(), 3).unwrap();
        let clients = make_clients(&part, &data, &bundle.params).unwrap();
        Setup {
            data,
            clients,
            server: ServerState::new(bundle.params, 4),
            cfg,
            sched: DiffusionSchedule::linear(5, 1e-4, 0.2).unwrap(),
            training: LocalTraining {
                batch_size: 8,
                local_epochs: epochs,
                ..Default::default()
            },
        }
    }

    fn plan(selected: Vec<usize>, parallel: bool) -> RoundPlan {
        RoundPlan {
            selected,
            run_phase_a: true,
            run_phase_b: true,
            no_imputation: false,
            no_cond: false,
            parallel,
        }
    }

    fn round(s: &mut Setup, p: &RoundPlan) -> RoundReport {
        let ctx = LocalContext {
            model: &s.cfg,
            schedule: &s.sched,
            mask_ratio: (0.1, 0.9),
            training: &s.training,
            no_cond: false,
            seed: 5,
        };
        run_round(&mut s.server, &mut s.clients, &s.data, p, &ctx).unwrap()
    }

    #[test]
    fn full_participation_of_all_clients() {
        assert_eq!(sample_clients(5, 1.0, 0, 3).unwrap(), vec![0, 1, 2, 3, 4]);
        let sel = sample_clients(6, 0.5, 9, 1).unwrap();
        assert_eq!(sel.len(), 3);
        assert!(sel.windows(2).all(|w| w[0] < w[1]));
        assert!(sample_clients(3, 0.1, 0, 0).is_err());
        assert!(sample_clients(3, 0.0, 0, 0).is_err());
    }

    #[test]
    fn single_client_round_adopts_local_update() {
        let mut s = setup(1, 1);
        let r = round(&mut s, &plan(vec![0], false));
        assert_eq!(s.server.global, {
            let mut p = s.clients[0].params.clone();
            p.zero_grads();
            p
        });
        assert_eq!(r.round, 1);
        assert!(r.phase_a_loss.is_some() && r.phase_b_loss.is_some());
    }

    #[test]
    fn zero_local_steps_leave_global_unchanged() {
        let mut s = setup(3, 0);
        let before = s.server.global.clone();
        round(&mut s, &plan(vec![0, 1, 2], false));
        assert_eq!(s.server.global, before);
    }

    #[test]
    fn unselected_clients_are_untouched() {
        let mut s = setup(3, 1);
        let before = s.clients[1].params.clone();
        round(&mut s, &plan(vec![0, 2], false));
        assert_eq!(s.clients[1].params, before);
        assert_ne!(s.clients[0].params, before);
    }

    #[test]
    fn parallel_round_is_bit_identical() {
        let mut a = setup(3, 1);
        let mut b = setup(3, 1);
        let ra = round(&mut a, &plan(vec![0, 1, 2], false));
        let rb = round(&mut b, &plan(vec![0, 1, 2], true));
        assert_eq!(ra, rb);
        assert_eq!(a.server.global.to_bytes(), b.server.global.to_bytes());
    }

    #[test]
    fn divergent_schema_is_rejected() {
        let mut s = setup(2, 1);
        s.clients[1].params.insert("stray", crate::autodiff::Tensor::scalar(0.0));
        let ctx = LocalContext {
            model: &s.cfg,
            schedule: &s.sched,
            mask_ratio: (0.1, 0.9),
            training: &s.training,
            no_cond: false,
            seed: 5,
        };
        let err = run_round(&mut s.server, &mut s.clients, &s.data, &plan(vec![0], false), &ctx);
        assert!(matches!(err, Err(Error::Protocol(_))));
    }
}
