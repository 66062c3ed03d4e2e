//! Learnable prompt embeddings: the cross-modal condition table `W_cond`
//! (`M × M × D`), the modality profile table `W_mod` (`M × D`), condition
//! routing and the per-modality `[instance ‖ modality ‖ condition]` fusion.
//!
//! Each operation has a plain form over tensors and a graph form that records
//! on an autodiff tape. Both sum rows in the same order, so they agree bit for
//! bit.

use crate::autodiff::{init, Graph, NodeId, ParamMap, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Parameter name of the condition table.
pub const W_COND: &str = "w_cond.table";
/// Parameter name of the modality profile table.
pub const W_MOD: &str = "w_mod.table";

const EMBED_INIT_SIGMA: f64 = 0.02;

/// `table[i, m]` is the contribution of source modality `i` to target `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct CondEmbedding {
    table: Tensor,
}

impl CondEmbedding {
    pub fn new(table: Tensor) -> Result<Self> {
        let s = table.shape();
        if s.len() != 3 || s[0] != s[1] || s[0] == 0 || s[2] == 0 {
            return Err(Error::shape("cond_embedding", format!("expected [M, M, D], got {s:?}")));
        }
        Ok(CondEmbedding { table })
    }

    pub fn init(modalities: usize, dim: usize, rng: &mut Rng) -> Self {
        CondEmbedding {
            table: init::gaussian(rng, &[modalities, modalities, dim], EMBED_INIT_SIGMA),
        }
    }

    pub fn from_params(params: &ParamMap) -> Result<Self> {
        let t = params
            .get(W_COND)
            .ok_or_else(|| Error::State(format!("missing `{W_COND}`")))?;
        Self::new(t.clone())
    }

    pub fn modalities(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[2]
    }

    pub fn entry(&self, source: usize, target: usize) -> &[f64] {
        let (m, d) = (self.modalities(), self.dim());
        let off = (source * m + target) * d;
        &self.table.data()[off..off + d]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.table
    }

    pub fn into_tensor(self) -> Tensor {
        self.table
    }
}

/// Row `m` is the profile of modality `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModEmbedding {
    table: Tensor,
}

impl ModEmbedding {
    pub fn new(table: Tensor) -> Result<Self> {
        if table.rank() != 2 || table.is_empty() {
            return Err(Error::shape("mod_embedding", format!("expected [M, D], got {:?}", table.shape())));
        }
        Ok(ModEmbedding { table })
    }

    pub fn init(modalities: usize, dim: usize, rng: &mut Rng) -> Self {
        ModEmbedding {
            table: init::gaussian(rng, &[modalities, dim], EMBED_INIT_SIGMA),
        }
    }

    pub fn from_params(params: &ParamMap) -> Result<Self> {
        let t = params
            .get(W_MOD)
            .ok_or_else(|| Error::State(format!("missing `{W_MOD}`")))?;
        Self::new(t.clone())
    }

    pub fn row(&self, m: usize) -> &[f64] {
        self.table.row(m)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.table
    }

    pub fn into_tensor(self) -> Tensor {
        self.table
    }
}

/// Flat rows (`source * M + target`) of the condition table used for target
/// modality `m` under presence pattern `present`.
pub fn routing_rows(present: &[bool], m: usize) -> Result<Vec<usize>> {
    let n = present.len();
    if m >= n {
        return Err(Error::Routing(format!("target modality {m} out of {n}")));
    }
    if present[m] {
        return Ok(vec![m * n + m]);
    }
    let rows: Vec<usize> = (0..n).filter(|&i| present[i]).map(|i| i * n + m).collect();
    if rows.is_empty() {
        return Err(Error::Routing("no observed modality to route a condition from".into()));
    }
    Ok(rows)
}

/// Condition vector for target modality `m`: the self-condition `W[m, m]` when
/// `m` is present, otherwise the mean of `W[i, m]` over present sources `i`.
pub fn route_condition(w_cond: &CondEmbedding, present: &[bool], m: usize) -> Result<Vec<f64>> {
    if present.len() != w_cond.modalities() {
        return Err(Error::shape(
            "route_condition",
            format!("{} indicators for {} modalities", present.len(), w_cond.modalities()),
        ));
    }
    let rows = routing_rows(present, m)?;
    let d = w_cond.dim();
    let mut out = vec![0.0; d];
    for &r in &rows {
        let entry = &w_cond.tensor().data()[r * d..(r + 1) * d];
        for (o, v) in out.iter_mut().zip(entry) {
            *o += v;
        }
    }
    let k = rows.len() as f64;
    out.iter_mut().for_each(|v| *v /= k);
    Ok(out)
}

/// Routed conditions of every modality, concatenated in index order (`M·D`).
pub fn sample_condition_vector(w_cond: &CondEmbedding, present: &[bool]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(present.len() * w_cond.dim());
    for m in 0..present.len() {
        out.extend(route_condition(w_cond, present, m)?);
    }
    Ok(out)
}

/// The sample condition vector repeated over `l_ts` time steps.
pub fn condition_sequence(w_cond: &CondEmbedding, present: &[bool], l_ts: usize) -> Result<Tensor> {
    let v = sample_condition_vector(w_cond, present)?;
    let mut data = Vec::with_capacity(l_ts * v.len());
    for _ in 0..l_ts {
        data.extend_from_slice(&v);
    }
    Tensor::matrix(l_ts, v.len(), data)
}

/// Sample-level fused vector: for each modality `m` in order,
/// `[instance_m ‖ W_mod[m] ‖ condition_m]`, each segment `D` wide.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedRepresentation {
    dim: usize,
    data: Vec<f64>,
}

impl FusedRepresentation {
    pub fn from_vec(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(3 * dim) {
            return Err(Error::shape("fused", format!("{} values with D={dim}", data.len())));
        }
        Ok(FusedRepresentation { dim, data })
    }

    pub fn modalities(&self) -> usize {
        self.data.len() / (3 * self.dim)
    }

    pub fn per_modality(&self, m: usize) -> &[f64] {
        &self.data[m * 3 * self.dim..(m + 1) * 3 * self.dim]
    }

    pub fn instance(&self, m: usize) -> &[f64] {
        &self.per_modality(m)[..self.dim]
    }

    pub fn modality(&self, m: usize) -> &[f64] {
        &self.per_modality(m)[self.dim..2 * self.dim]
    }

    pub fn condition(&self, m: usize) -> &[f64] {
        &self.per_modality(m)[2 * self.dim..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

pub fn fuse(
    instance: &[Vec<f64>],
    w_mod: &ModEmbedding,
    w_cond: &CondEmbedding,
    present: &[bool],
) -> Result<FusedRepresentation> {
    let d = w_cond.dim();
    let m = present.len();
    if instance.len() != m || w_mod.tensor().rows() != m || w_mod.tensor().cols() != d {
        return Err(Error::shape(
            "fuse",
            format!(
                "{} instance vectors, W_mod {:?}, W_cond {:?}",
                instance.len(),
                w_mod.tensor().shape(),
                w_cond.tensor().shape()
            ),
        ));
    }
    let mut data = Vec::with_capacity(3 * d * m);
    for (k, ins) in instance.iter().enumerate() {
        if ins.len() != d {
            return Err(Error::shape("fuse", format!("instance vector {k} has {} values, D={d}", ins.len())));
        }
        data.extend_from_slice(ins);
        data.extend_from_slice(w_mod.row(k));
        data.extend(route_condition(w_cond, present, k)?);
    }
    FusedRepresentation::from_vec(d, data)
}

/// Graph form of [`route_condition`]. With `disabled` the condition is a zero
/// vector (the no-condition ablation).
pub fn route_condition_node(
    g: &mut Graph<'_>,
    present: &[bool],
    m: usize,
    dim: usize,
    disabled: bool,
) -> Result<NodeId> {
    if disabled {
        return g.input(Tensor::zeros(&[dim]));
    }
    let table = g.param(W_COND)?;
    let rows = routing_rows(present, m)?;
    g.rows_mean(table, &rows)
}

/// Graph form of [`condition_sequence`]: `[l_ts, M·D]`.
pub fn condition_sequence_node(
    g: &mut Graph<'_>,
    present: &[bool],
    l_ts: usize,
    dim: usize,
    disabled: bool,
) -> Result<NodeId> {
    let parts = (0..present.len())
        .map(|m| route_condition_node(g, present, m, dim, disabled))
        .collect::<Result<Vec<_>>>()?;
    let v = g.concat(&parts)?;
    g.broadcast_rows(v, l_ts)
}

/// Graph form of [`fuse`], given per-modality instance and condition nodes.
pub fn fuse_node(g: &mut Graph<'_>, instance: &[NodeId], conditions: &[NodeId]) -> Result<NodeId> {
    if instance.len() != conditions.len() {
        return Err(Error::shape(
            "fuse",
            format!("{} instance vs {} condition vectors", instance.len(), conditions.len()),
        ));
    }
    let table = g.param(W_MOD)?;
    let mut parts = Vec::with_capacity(3 * instance.len());
    for (m, (&ins, &cond)) in instance.iter().zip(conditions).enumerate() {
        let profile = g.rows_mean(table, &[m])?;
        parts.extend([ins, profile, cond]);
    }
    g.concat(&parts)
}
