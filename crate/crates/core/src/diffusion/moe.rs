//! Mixture-of-experts encoder for the observed context `c_O`.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::names;

/// Gate configuration: `experts` feed-forward blocks, `top_k` routed per time step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MoEGate {
    pub experts: usize,
    pub top_k: usize,
}

impl MoEGate {
    pub fn new(experts: usize, top_k: usize) -> Result<Self> {
        if experts == 0 || top_k == 0 || top_k > experts {
            return Err(Error::Config(format!(
                "top-{top_k} routing over {experts} experts"
            )));
        }
        Ok(MoEGate { experts, top_k })
    }
}

/// Indices of the `k` largest entries; ties go to the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Output of [`encode_observed_context`].
pub struct ContextEncoding {
    /// `[L, context_dim]`.
    pub context: NodeId,
    /// Selected experts at each time step.
    pub selected: Vec<Vec<usize>>,
    /// Gate weights `[L, E]`, zero outside the selection.
    pub gates: NodeId,
}

/// Route each time step of `[values ⊙ mask, mask]` to its top-k experts
/// and return the gate-weighted sum of their outputs.
pub fn encode_observed_context(
    g: &mut Graph<'_>,
    values: NodeId,
    mask: NodeId,
    gate: MoEGate,
) -> Result<ContextEncoding> {
    if g.value(values).shape() != g.value(mask).shape() {
        return Err(Error::shape(
            "encode_observed_context",
            format!("values {:?} vs mask {:?}", g.value(values).shape(), g.value(mask).shape()),
        ));
    }
    let masked = g.hadamard(values, mask)?;
    let input = g.concat(&[masked, mask])?;

    let gw = g.param(names::GATE_W)?;
    let gb = g.param(names::GATE_B)?;
    let logits = g.linear(input, gw, Some(gb))?;
    if g.value(logits).cols() != gate.experts {
        return Err(Error::shape(
            "encode_observed_context",
            format!("gate has {} outputs for {} experts", g.value(logits).cols(), gate.experts),
        ));
    }
    let scores = g.value(logits).clone();
    let steps = scores.rows();
    let mut keep = vec![false; steps * gate.experts];
    let mut selected = Vec::with_capacity(steps);
    for r in 0..steps {
        let sel = top_k_indices(scores.row(r), gate.top_k);
        for &e in &sel {
            keep[r * gate.experts + e] = true;
        }
        selected.push(sel);
    }
    let gates = g.softmax_masked(logits, Some(&keep))?;

    let mut acc: Option<NodeId> = None;
    for e in 0..gate.experts {
        if !selected.iter().any(|s| s.contains(&e)) {
            continue;
        }
        let w1 = g.param(&names::expert(e, "fc1.w"))?;
        let b1 = g.param(&names::expert(e, "fc1.b"))?;
        let w2 = g.param(&names::expert(e, "fc2.w"))?;
        let b2 = g.param(&names::expert(e, "fc2.b"))?;
        let h = g.linear(input, w1, Some(b1))?;
        let h = g.silu(h)?;
        let out = g.linear(h, w2, Some(b2))?;
        let weight = g.slice(gates, e, e + 1)?;
        let weighted = g.mul_col(out, weight)?;
        acc = Some(match acc {
            None => weighted,
            Some(a) => g.add(a, weighted)?,
        });
    }
    Ok(ContextEncoding {
        context: acc.expect("top_k >= 1 selects at least one expert"),
        selected,
        gates,
    })
}
