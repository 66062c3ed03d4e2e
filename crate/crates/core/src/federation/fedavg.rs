//! Sample-weighted parameter averaging.

use crate::autodiff::{ParamMap, Tensor};
use crate::error::{Error, Result};

/// One client's contribution to an aggregation.
#[derive(Clone, Debug)]
pub struct Upload {
    pub client: usize,
    pub params: ParamMap,
    pub n: usize,
}

/// `n_k / Σ n` for each entry of `ns`.
pub fn fedavg_weights(ns: &[usize]) -> Vec<f64> {
    let total: usize = ns.iter().sum();
    ns.iter().map(|&n| n as f64 / total as f64).collect()
}

/// Weighted average of the uploads, entry by entry.
///
/// Uploads are reduced in client-id order whatever order they arrive in. The
/// average is accumulated as `v_ref + Σ w_k (v_k − v_ref)` around the first
/// upload, so identical inputs reproduce themselves exactly. Uploads with
/// non-finite values are dropped with a warning and the remaining weights
/// renormalized.
pub fn fedavg(uploads: &[Upload]) -> Result<ParamMap> {
    let mut ordered: Vec<&Upload> = uploads.iter().collect();
    ordered.sort_by_key(|u| u.client);
    if ordered.windows(2).any(|w| w[0].client == w[1].client) {
        return Err(Error::Protocol("two uploads from the same client".into()));
    }
    let Some(first) = ordered.first() else {
        return Err(Error::Protocol("aggregation needs at least one upload".into()));
    };
    if let Some(bad) = ordered.iter().find(|u| !u.params.same_schema(&first.params)) {
        return Err(Error::Protocol(format!(
            "client {} uploaded a parameter map with a different schema",
            bad.client
        )));
    }
    let finite: Vec<&Upload> = ordered
        .iter()
        .copied()
        .filter(|u| {
            let ok = u.params.is_finite();
            if !ok {
                log::warn!("client {} uploaded non-finite parameters; excluded", u.client);
            }
            ok
        })
        .collect();
    if finite.is_empty() {
        return Err(Error::NumericOverflow { op: "fedavg" });
    }
    if finite.iter().any(|u| u.n == 0) {
        return Err(Error::Protocol("upload with zero samples".into()));
    }
    let weights = fedavg_weights(&finite.iter().map(|u| u.n).collect::<Vec<_>>());
    let reference = &finite[0].params;
    let mut out = ParamMap::new();
    for (name, entry) in reference.iter() {
        let base = entry.value.data();
        let mut acc = vec![0.0; base.len()];
        for (u, &w) in finite.iter().zip(&weights).skip(1) {
            let v = u.params.get(name).expect("schema checked").data();
            for ((a, &x), &r) in acc.iter_mut().zip(v).zip(base) {
                *a += w * (x - r);
            }
        }
        let data = base.iter().zip(&acc).map(|(&r, &a)| r + a).collect();
        out.insert(name, Tensor::new(entry.value.shape().to_vec(), data)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_map(v: f64) -> ParamMap {
        let mut p = ParamMap::new();
        p.insert("probe", Tensor::scalar(v));
        p
    }

    fn up(client: usize, v: f64, n: usize) -> Upload {
        Upload {
            client,
            params: scalar_map(v),
            n,
        }
    }

    #[test]
    fn hand_computed_weighted_mean() {
        let out = fedavg(&[up(0, 0.0, 1), up(1, 4.0, 3)]).unwrap();
        assert_eq!(out.get("probe").unwrap().data(), &[3.0]);
        let out = fedavg(&[up(0, 1.0, 5), up(1, 2.0, 5), up(2, 3.0, 5)]).unwrap();
        assert_eq!(out.get("probe").unwrap().data(), &[2.0]);
    }

    #[test]
    fn single_upload_is_identity() {
        let out = fedavg(&[up(4, 0.1 + 0.2, 7)]).unwrap();
        assert_eq!(out.get("probe").unwrap().data()[0].to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn non_finite_upload_is_excluded() {
        let out = fedavg(&[up(0, f64::NAN, 10), up(1, 2.0, 1), up(2, 5.0, 2)]).unwrap();
        assert_eq!(out.get("probe").unwrap().data(), &[4.0]);
        assert!(matches!(fedavg(&[up(0, f64::INFINITY, 1)]), Err(Error::NumericOverflow { .. })));
    }

    #[test]
    fn schema_mismatch_is_a_protocol_error() {
        let mut other = scalar_map(1.0);
        other.insert("extra", Tensor::scalar(0.0));
        let bad = Upload {
            client: 1,
            params: other,
            n: 1,
        };
        assert!(matches!(fedavg(&[up(0, 1.0, 1), bad]), Err(Error::Protocol(_))));
        assert!(matches!(fedavg(&[]), Err(Error::Protocol(_))));
    }

    #[test]
    fn weights_with_power_of_two_total_sum_to_one() {
        let w = fedavg_weights(&[3, 5, 7, 1, 16]);
        assert_eq!(w.iter().sum::<f64>(), 1.0);
    }

    fn map_of(vals: &[f64]) -> ParamMap {
        let mut p = ParamMap::new();
        p.insert("a", Tensor::vector(vals.to_vec()));
        p
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(ns in proptest::collection::vec(1usize..1000, 1..12)) {
            let s: f64 = fedavg_weights(&ns).iter().sum();
            prop_assert!((s - 1.0).abs() <= ns.len() as f64 * f64::EPSILON);
        }

        #[test]
        fn identical_uploads_are_a_fixed_point(
            vals in proptest::collection::vec(-1e3f64..1e3, 1..6),
            ns in proptest::collection::vec(1usize..50, 1..6),
        ) {
            let ups: Vec<_> = ns.iter().enumerate()
                .map(|(k, &n)| Upload { client: k, params: map_of(&vals), n })
                .collect();
            prop_assert_eq!(fedavg(&ups).unwrap(), map_of(&vals));
        }

        #[test]
        fn order_does_not_matter(
            vals in proptest::collection::vec(-1e3f64..1e3, 2..6),
            ns in proptest::collection::vec(1usize..50, 2..6),
            rot in 0usize..6,
        ) {
            let k = vals.len().min(ns.len());
            let ups: Vec<_> = (0..k)
                .map(|i| Upload { client: i, params: map_of(&[vals[i], -vals[i]]), n: ns[i] })
                .collect();
            let mut shuffled = ups.clone();
            shuffled.rotate_left(rot % k);
            shuffled.reverse();
            prop_assert_eq!(fedavg(&ups).unwrap(), fedavg(&shuffled).unwrap());
        }

        #[test]
        fn scaling_commutes_with_averaging(
            vals in proptest::collection::vec(-1e3f64..1e3, 2..6),
            ns in proptest::collection::vec(1usize..50, 2..6),
            exp in -8i32..8,
            lambda in -4.0f64..4.0,
        ) {
            let k = vals.len().min(ns.len());
            let ups = |s: f64| -> Vec<Upload> {
                (0..k).map(|i| Upload { client: i, params: map_of(&[s * vals[i]]), n: ns[i] }).collect()
            };
            let base = fedavg(&ups(1.0)).unwrap().get("a").unwrap().data()[0];
            // Power-of-two factors are exact in floating point.
            let p2 = 2f64.powi(exp);
            let scaled = fedavg(&ups(p2)).unwrap().get("a").unwrap().data()[0];
            prop_assert_eq!(scaled, p2 * base);
            let scaled = fedavg(&ups(lambda)).unwrap().get("a").unwrap().data()[0];
            prop_assert!((scaled - lambda * base).abs() <= 1e-9 * (1.0 + base.abs()));
        }
    }
}
