//! End-to-end runs: data preparation, federated training, evaluation,
//! ablation sweeps and the `(p_s, p_w)` grid.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamMap;
use crate::config::{AblationFlags, DataSource, ExperimentConfig};
use crate::data::{
    apply_missingness, generate_synthetic, load_csv, partition, resample_to_length, stratified_split, CsvSchema,
    FeatureStats, MultimodalSample, PartitionConfig, SyntheticConfig,
};
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::eval::{
    emit_reports, feature_reconstruction_analysis, improvement_fractions, ClassificationMetrics, Evaluator,
    FeatureDistanceRecord,
};
use crate::federation::{make_clients, run_round, sample_clients, LocalContext, RoundPlan, RoundReport, ServerState};
use crate::model::ModelBundle;
use crate::rng;

// Labels of the independent random streams derived from the run seed.
const STREAM_DATA: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_MASK_TRAIN: u64 = 3;
const STREAM_MASK_TEST: u64 = 4;
const STREAM_PARTITION: u64 = 5;
const STREAM_INIT: u64 = 6;
const STREAM_CLIENTS: u64 = 7;
const STREAM_TRAIN: u64 = 8;
const STREAM_IMPUTE: u64 = 9;
const STREAM_ANALYSIS: u64 = 10;

/// Train/test data of one run, after normalization and missingness.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Vec<MultimodalSample>,
    pub test: Vec<MultimodalSample>,
    /// The test split before missingness was applied.
    pub test_clean: Vec<MultimodalSample>,
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Vec<MultimodalSample>> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => generate_synthetic(&SyntheticConfig {
            n: d.n,
            modalities: d.modalities,
            l_ts: d.l_ts,
            l_f: d.l_f,
            classes: d.classes,
            noise_sigma: d.noise_sigma,
            class_offset: d.class_offset,
            seed: rng::derive(cfg.seed, &[STREAM_DATA]),
        }),
        DataSource::Csv => {
            let path = d.csv_path.as_ref().expect("validated");
            let mut samples = load_csv(path, &CsvSchema::numbered(d.modalities, d.l_f))?;
            for s in &mut samples {
                if s.len_ts() != d.l_ts {
                    for m in 0..s.num_modalities() {
                        s.modalities[m] = resample_to_length(&s.modalities[m], d.l_ts)?;
                        s.masks[m] = resample_to_length(&s.masks[m], d.l_ts)?.map(|v| if v >= 1.0 { 1.0 } else { 0.0 });
                    }
                }
                if s.label >= d.classes {
                    return Err(Error::Config(format!("sample {} has label {} but data.classes = {}", s.id, s.label, d.classes)));
                }
            }
            Ok(samples)
        }
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let dataset = load_dataset(cfg)?;
    let (mut train, mut test) = stratified_split(dataset, cfg.data.test_fraction, rng::derive(cfg.seed, &[STREAM_SPLIT]));
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("train/test split left one side empty".into()));
    }
    let stats = FeatureStats::fit(&train)?;
    stats.apply(&mut train);
    stats.apply(&mut test);
    let test_clean = test.clone();
    apply_missingness(&mut train, &cfg.missingness_config(rng::derive(cfg.seed, &[STREAM_MASK_TRAIN])))?;
    apply_missingness(&mut test, &cfg.missingness_config(rng::derive(cfg.seed, &[STREAM_MASK_TEST])))?;
    Ok(PreparedData { train, test, test_clean })
}

pub fn checkpoint_path(out: &Path, round: u64) -> PathBuf {
    out.join("ckpt").join(format!("round_{round}.bin"))
}

/// Federated training result.
pub struct TrainedModel {
    pub bundle: ModelBundle,
    pub reports: Vec<RoundReport>,
}

/// Run every configured round, writing `reports/rounds.jsonl` and periodic
/// checkpoints under `out`. A numeric failure checkpoints the last good
/// global state before returning the error.
pub fn train_federated(cfg: &ExperimentConfig, data: &PreparedData, no_cond: bool, out: &Path) -> Result<TrainedModel> {
    let model_cfg = cfg.model_config();
    let schedule = cfg.diffusion.schedule()?;
    let mut bundle = ModelBundle::init(model_cfg.clone(), rng::derive(cfg.seed, &[STREAM_INIT]))?;
    let f = &cfg.federation;
    let part = partition(
        &data.train,
        &PartitionConfig {
            clients: f.clients,
            dirichlet_alpha: f.dirichlet_alpha,
            overlap_ratio: f.overlap_ratio,
            seed: rng::derive(cfg.seed, &[STREAM_PARTITION]),
        },
    )?;
    let mut clients = make_clients(&part, &data.train, &bundle.params)?;
    let mut server = ServerState::new(bundle.params.clone(), rng::derive(cfg.seed, &[STREAM_CLIENTS]));

    let reports_dir = out.join("reports");
    fs::create_dir_all(&reports_dir).map_err(|e| Error::io(&reports_dir, e))?;
    fs::create_dir_all(out.join("ckpt")).map_err(|e| Error::io(out.join("ckpt"), e))?;
    let jsonl = reports_dir.join("rounds.jsonl");
    let mut log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&jsonl)
        .map_err(|e| Error::io(&jsonl, e))?;

    let ctx = LocalContext {
        model: &model_cfg,
        schedule: &schedule,
        mask_ratio: cfg.diffusion.mask_ratio(),
        training: &cfg.training,
        no_cond,
        seed: rng::derive(cfg.seed, &[STREAM_TRAIN]),
    };
    let mut reports = Vec::with_capacity(f.rounds);
    for t in 1..=f.rounds as u64 {
        let plan = RoundPlan {
            selected: sample_clients(f.clients, f.participation, server.seed, t)?,
            run_phase_a: true,
            run_phase_b: true,
            no_imputation: cfg.ablation.no_imputation,
            no_cond,
            parallel: f.parallel,
        };
        let report = match run_round(&mut server, &mut clients, &data.train, &plan, &ctx) {
            Ok(r) => r,
            Err(e @ Error::NumericOverflow { .. }) => {
                let path = checkpoint_path(out, server.round);
                server.global.save(&path)?;
                log::error!("round {t} diverged; last good state saved to {}", path.display());
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        log::info!(
            "round {t}: phase A loss {:?}, phase B loss {:?}",
            report.phase_a_loss,
            report.phase_b_loss
        );
        let line = serde_json::to_string(&report).map_err(|e| Error::Serialization(e.to_string()))?;
        writeln!(log_file, "{line}").map_err(|e| Error::io(&jsonl, e))?;
        if t % f.checkpoint_every as u64 == 0 || t == f.rounds as u64 {
            server.global.save(checkpoint_path(out, t))?;
        }
        reports.push(report);
    }
    bundle.params = server.global;
    bundle.trained = true;
    Ok(TrainedModel { bundle, reports })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLoss {
    pub round: u64,
    pub phase_a: Option<f64>,
    pub phase_b: Option<f64>,
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub variant: String,
    pub seed: u64,
    pub p_s: f64,
    pub p_w: f64,
    pub no_imputation: bool,
    pub no_cond: bool,
    pub rounds: usize,
    pub test: ClassificationMetrics,
    pub frac_l2: Option<f64>,
    pub frac_cos: Option<f64>,
    pub analysis_samples: usize,
    pub round_losses: Vec<RoundLoss>,
}

/// Evaluation of one trained model under every inference mode requested.
pub struct VariantResult {
    pub flags: AblationFlags,
    pub summary: ExperimentSummary,
    pub records: Vec<FeatureDistanceRecord>,
}

fn evaluator<'a>(cfg: &ExperimentConfig, bundle: &'a ModelBundle, schedule: &'a DiffusionSchedule, no_cond: bool) -> Evaluator<'a> {
    Evaluator {
        bundle,
        schedule,
        n_realizations: cfg.diffusion.n_realizations,
        no_cond,
        seed: rng::derive(cfg.seed, &[STREAM_IMPUTE]),
        parallel: cfg.federation.parallel,
    }
}

/// Feature-reconstruction records for a trained model, or none when the
/// analysis is disabled.
pub fn run_analysis(cfg: &ExperimentConfig, data: &PreparedData, bundle: &ModelBundle, no_cond: bool) -> Result<Vec<FeatureDistanceRecord>> {
    if !cfg.analysis.enabled {
        return Ok(Vec::new());
    }
    let schedule = cfg.diffusion.schedule()?;
    let ev = evaluator(cfg, bundle, &schedule, no_cond);
    feature_reconstruction_analysis(&ev, &data.test_clean, &cfg.analysis_mask(rng::derive(cfg.seed, &[STREAM_ANALYSIS])))
}

/// Evaluate `trained` with and/or without imputation at inference.
pub fn evaluate_trained(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    trained: &TrainedModel,
    no_cond: bool,
    imputation_modes: &[bool],
) -> Result<Vec<VariantResult>> {
    let schedule = cfg.diffusion.schedule()?;
    let ev = evaluator(cfg, &trained.bundle, &schedule, no_cond);
    let records = run_analysis(cfg, data, &trained.bundle, no_cond)?;
    let (frac_l2, frac_cos) = if records.is_empty() {
        (None, None)
    } else {
        let (a, b) = improvement_fractions(&records);
        (Some(a), Some(b))
    };
    let imputed = if imputation_modes.iter().any(|&no_imp| !no_imp) {
        Some(ev.impute(&data.test)?)
    } else {
        None
    };
    let round_losses: Vec<RoundLoss> = trained
        .reports
        .iter()
        .map(|r| RoundLoss {
            round: r.round,
            phase_a: r.phase_a_loss,
            phase_b: r.phase_b_loss,
        })
        .collect();
    imputation_modes
        .iter()
        .map(|&no_imputation| {
            let flags = AblationFlags { no_imputation, no_cond };
            let test = ev.metrics(&data.test, if no_imputation { None } else { imputed.as_deref() })?;
            Ok(VariantResult {
                flags,
                summary: ExperimentSummary {
                    variant: flags.name().to_string(),
                    seed: cfg.seed,
                    p_s: cfg.missingness.p_s,
                    p_w: cfg.missingness.p_w,
                    no_imputation,
                    no_cond,
                    rounds: cfg.federation.rounds,
                    test,
                    frac_l2,
                    frac_cos,
                    analysis_samples: records.len(),
                    round_losses: round_losses.clone(),
                },
                records: records.clone(),
            })
        })
        .collect()
}

/// One run with the configured ablation flags; reports go to `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentSummary> {
    let data = prepare_data(cfg)?;
    let trained = train_federated(cfg, &data, cfg.ablation.no_cond, out)?;
    let mut results = evaluate_trained(cfg, &data, &trained, cfg.ablation.no_cond, &[cfg.ablation.no_imputation])?;
    let r = results.pop().expect("one variant");
    emit_reports(out, &r.summary, &r.records)?;
    Ok(r.summary)
}

/// Every combination of the listed flags, `full` first.
pub fn ablation_combinations(no_imputation: bool, no_cond: bool) -> Vec<AblationFlags> {
    let mut out = vec![AblationFlags::default()];
    for ni in [false, true] {
        for nc in [false, true] {
            let f = AblationFlags {
                no_imputation: ni,
                no_cond: nc,
            };
            if (ni || nc) && (!ni || no_imputation) && (!nc || no_cond) {
                out.push(f);
            }
        }
    }
    out
}

/// Run each flag combination, writing `out/<variant>/metrics.json`. Models
/// are trained once per `no_cond` value; the imputation flag only changes
/// inference.
pub fn run_ablation_sweep(cfg: &ExperimentConfig, combos: &[AblationFlags], out: &Path) -> Result<Vec<ExperimentSummary>> {
    let data = prepare_data(cfg)?;
    let mut results: Vec<Option<ExperimentSummary>> = vec![None; combos.len()];
    for no_cond in [false, true] {
        let wanted: Vec<usize> = (0..combos.len()).filter(|&i| combos[i].no_cond == no_cond).collect();
        if wanted.is_empty() {
            continue;
        }
        let train_dir = out.join(if no_cond { "train_no_cond" } else { "train_full" });
        let trained = train_federated(cfg, &data, no_cond, &train_dir)?;
        let modes: Vec<bool> = wanted.iter().map(|&i| combos[i].no_imputation).collect();
        for (i, r) in wanted.into_iter().zip(evaluate_trained(cfg, &data, &trained, no_cond, &modes)?) {
            emit_reports(&out.join(r.flags.name()), &r.summary, &r.records)?;
            results[i] = Some(r.summary);
        }
    }
    Ok(results.into_iter().map(|r| r.expect("every combination evaluated")).collect())
}

/// Seed of grid cell `(i, j)`; injective over the grid for a fixed base.
pub fn cell_seed(base: u64, i: usize, j: usize, cols: usize) -> u64 {
    let idx = (i * cols + j) as u64 + 1;
    rng::mix(base.wrapping_add(idx.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

pub const GRID_SUMMARY_FILE: &str = "grid_summary.csv";

/// Run every `(p_s, p_w)` cell, each with `combos` variants, and write a
/// combined `grid_summary.csv` with one row per cell and variant.
pub fn run_grid(
    cfg: &ExperimentConfig,
    p_s: &[f64],
    p_w: &[f64],
    combos: &[AblationFlags],
    out: &Path,
) -> Result<Vec<ExperimentSummary>> {
    if p_s.is_empty() || p_w.is_empty() {
        return Err(Error::Config("grid needs at least one p_s and one p_w value".into()));
    }
    let mut all = Vec::new();
    for (i, &ps) in p_s.iter().enumerate() {
        for (j, &pw) in p_w.iter().enumerate() {
            let mut cell = cfg.clone();
            cell.missingness.p_s = ps;
            cell.missingness.p_w = pw;
            cell.seed = cell_seed(cfg.seed, i, j, p_w.len());
            cell.validate()?;
            let dir = out.join(format!("ps{ps}_pw{pw}"));
            all.extend(run_ablation_sweep(&cell, combos, &dir)?);
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(GRID_SUMMARY_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))?;
    let ser = |e: csv::Error| Error::Serialization(format!("{}: {e}", path.display()));
    w.write_record(["p_s", "p_w", "seed", "variant", "accuracy", "macro_f1", "f1", "auroc", "frac_l2", "frac_cos"])
        .map_err(ser)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for s in &all {
        w.write_record([
            s.p_s.to_string(),
            s.p_w.to_string(),
            s.seed.to_string(),
            s.variant.clone(),
            s.test.accuracy.to_string(),
            s.test.macro_f1.to_string(),
            s.test.f1.to_string(),
            opt(s.test.auroc),
            opt(s.frac_l2),
            opt(s.frac_cos),
        ])
        .map_err(ser)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(all)
}

/// Highest-numbered checkpoint under `out/ckpt`.
pub fn latest_checkpoint(out: &Path) -> Result<PathBuf> {
    let dir = out.join("ckpt");
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut best: Option<(u64, PathBuf)> = None;
    for e in entries {
        let path = e.map_err(|e| Error::io(&dir, e))?.path();
        let round = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("round_")?.strip_suffix(".bin")?.parse::<u64>().ok());
        if let Some(r) = round {
            if best.as_ref().is_none_or(|(b, _)| r > *b) {
                best = Some((r, path));
            }
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| Error::State(format!("no checkpoint in {}", dir.display())))
}

/// Feature-reconstruction analysis from a saved checkpoint.
pub fn analyze_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<(f64, f64, usize)> {
    let params = ParamMap::load(checkpoint)?;
    let bundle = ModelBundle::from_params(cfg.model_config(), params)?;
    let data = prepare_data(cfg)?;
    let mut forced = cfg.clone();
    forced.analysis.enabled = true;
    let records = run_analysis(&forced, &data, &bundle, cfg.ablation.no_cond)?;
    let (l2, cos) = improvement_fractions(&records);
    let summary = serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "frac_l2": l2,
        "frac_cos": cos,
        "analysis_samples": records.len(),
    });
    emit_reports(out, &summary, &records)?;
    Ok((l2, cos, records.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combinations_cover_the_requested_flags() {
        assert_eq!(ablation_combinations(false, false).len(), 1);
        let both = ablation_combinations(true, true);
        let names: Vec<_> = both.iter().map(|f| f.name()).collect();
        assert_eq!(names, ["full", "no_cond", "no_imputation", "no_imputation+no_cond"]);
        assert_eq!(ablation_combinations(true, false).len(), 2);
    }

    #[test]
    fn cell_seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for i in 0..20 {
            for j in 0..20 {
                assert!(seen.insert(cell_seed(7, i, j, 20)));
            }
        }
        assert_eq!(cell_seed(7, 1, 2, 5), cell_seed(7, 1, 2, 5));
    }

    #[test]
    fn empty_grid_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        assert!(matches!(run_grid(&cfg, &[], &[0.2], &[AblationFlags::default()], dir.path()), Err(Error::Config(_))));
    }
}
