//! Server-side aggregation rules over client update deltas: FedAvg, Krum,
//! MultiKrum, and RLR sign-voting.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::model::ParamVector;

/// Ordered set of `(client_id, delta)` pairs for one round. Construction
/// sorts by client id and validates uniqueness and equal lengths.
#[derive(Clone, Debug)]
pub struct UpdateSet {
    entries: Vec<(u32, ParamVector)>,
}

impl UpdateSet {
    pub fn new(mut entries: Vec<(u32, ParamVector)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(SimError::Aggregation("update set is empty".into()));
        }
        entries.sort_by_key(|(id, _)| *id);
        for pair in entries.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(SimError::Aggregation(format!(
                    "duplicate client id {} in update set",
                    pair[0].0
                )));
            }
        }
        let dim = entries[0].1.len();
        if let Some((id, _)) = entries.iter().find(|(_, v)| v.len() != dim) {
            return Err(SimError::Aggregation(format!(
                "client {} uploaded a vector of different length",
                id
            )));
        }
        Ok(UpdateSet { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries[0].1.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(u32, ParamVector)> {
        self.entries.iter()
    }

    fn vectors(&self) -> Vec<&ParamVector> {
        self.entries.iter().map(|(_, v)| v).collect()
    }
}

/// Aggregation rule selected by the `aggregation` config string.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "rule")]
pub enum AggregationRule {
    FedAvg,
    Krum { f: usize },
    MultiKrum { f: usize, m_keep: usize },
    Rlr { threshold: u32, server_lr: f64 },
}

impl AggregationRule {
    pub fn aggregate(&self, updates: &UpdateSet) -> Result<ParamVector> {
        match *self {
            AggregationRule::FedAvg => aggregate_fedavg(updates),
            AggregationRule::Krum { f } => aggregate_krum(updates, f),
            AggregationRule::MultiKrum { f, m_keep } => aggregate_multikrum(updates, f, m_keep),
            AggregationRule::Rlr { threshold, server_lr } => {
                aggregate_rlr(updates, threshold, server_lr)
            }
        }
    }
}

/// Coordinatewise arithmetic mean.
pub fn aggregate_fedavg(updates: &UpdateSet) -> Result<ParamVector> {
    let vectors = updates.vectors();
    let mut sum = ParamVector::zeros(updates.dim());
    for v in &vectors {
        sum = sum.add(v)?;
    }
    Ok(sum.scale(1.0 / vectors.len() as f64))
}

/// Krum scores: for each update, the sum of squared distances to its
/// `n - f - 2` nearest other updates.
fn krum_scores(updates: &UpdateSet, f: usize) -> Result<Vec<f64>> {
    let n = updates.len();
    if n < f + 3 {
        return Err(SimError::Aggregation(format!(
            "krum needs n >= f + 3 (n = {}, f = {})",
            n, f
        )));
    }
    let vectors = updates.vectors();
    let neighbors = n - f - 2;
    let mut scores = Vec::with_capacity(n);
    for i in 0..n {
        let mut dists: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| vectors[i].squared_distance(vectors[j]))
            .collect::<Result<_>>()?;
        dists.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
        scores.push(dists[..neighbors].iter().sum());
    }
    Ok(scores)
}

/// Indices of the `k` lowest-score updates; ties break toward the lower
/// client id (entries are already sorted by id).
fn lowest_score_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// The single update minimizing the Krum score.
pub fn aggregate_krum(updates: &UpdateSet, f: usize) -> Result<ParamVector> {
    let scores = krum_scores(updates, f)?;
    let winner = lowest_score_indices(&scores, 1)[0];
    Ok(updates.entries[winner].1.clone())
}

/// Mean of the `m_keep` lowest-Krum-score updates.
pub fn aggregate_multikrum(updates: &UpdateSet, f: usize, m_keep: usize) -> Result<ParamVector> {
    let n = updates.len();
    if m_keep < 1 || m_keep > n.saturating_sub(f) {
        return Err(SimError::Aggregation(format!(
            "multikrum needs 1 <= m_keep <= n - f (n = {}, f = {}, m_keep = {})",
            n, f, m_keep
        )));
    }
    let scores = krum_scores(updates, f)?;
    let keep = lowest_score_indices(&scores, m_keep);
    let mut sum = ParamVector::zeros(updates.dim());
    for &i in &keep {
        sum = sum.add(&updates.entries[i].1)?;
    }
    Ok(sum.scale(1.0 / m_keep as f64))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Robust learning rate: per coordinate, the server learning rate keeps its
/// sign only where at least `threshold` clients agree in update sign; the
/// mean update is scaled by the signed rate.
pub fn aggregate_rlr(updates: &UpdateSet, threshold: u32, server_lr: f64) -> Result<ParamVector> {
    let mean = aggregate_fedavg(updates)?;
    let dim = updates.dim();
    let mut out = Vec::with_capacity(dim);
    for d in 0..dim {
        let votes: f64 = updates.iter().map(|(_, v)| sign(v.as_slice()[d])).sum();
        let rate = if votes.abs() >= threshold as f64 {
            server_lr
        } else {
            -server_lr
        };
        out.push(rate * mean.as_slice()[d]);
    }
    Ok(ParamVector::from_vec(out))
}

/// Parse an aggregation rule from its config string and parameters.
pub fn rule_from_config(
    name: &str,
    krum_f: usize,
    multikrum_keep: usize,
    rlr_threshold: u32,
    server_lr: f64,
) -> Result<AggregationRule> {
    match name {
        "fedavg" => Ok(AggregationRule::FedAvg),
        "krum" => Ok(AggregationRule::Krum { f: krum_f }),
        "multikrum" => Ok(AggregationRule::MultiKrum { f: krum_f, m_keep: multikrum_keep }),
        "rlr" => Ok(AggregationRule::Rlr { threshold: rlr_threshold, server_lr }),
        other => Err(SimError::Config {
            key: "aggregation".into(),
            detail: format!(
                "unknown rule `{}` (expected fedavg | krum | multikrum | rlr)",
                other
            ),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use rand::Rng;

    fn set(vs: &[Vec<f64>]) -> UpdateSet {
        UpdateSet::new(
            vs.iter()
                .enumerate()
                .map(|(i, v)| (i as u32, ParamVector::from_vec(v.clone())))
                .collect(),
        )
        .unwrap()
    }

    /// Exhaustive O(n^2) Krum selection used as the oracle.
    fn krum_brute_force(vs: &[Vec<f64>], f: usize) -> usize {
        let n = vs.len();
        let d2 = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
        };
        let mut best = (f64::INFINITY, usize::MAX);
        for i in 0..n {
            let mut dists: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d2(&vs[i], &vs[j])).collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let score: f64 = dists[..n - f - 2].iter().sum();
            if score < best.0 {
                best = (score, i);
            }
        }
        best.1
    }

    #[test]
    fn fedavg_singleton_and_symmetry() {
        let s = set(&[vec![1.0, -2.0]]);
        assert_eq!(aggregate_fedavg(&s).unwrap().as_slice(), &[1.0, -2.0]);

        let s = set(&[vec![3.0, -1.0], vec![-3.0, 1.0]]);
        assert_eq!(aggregate_fedavg(&s).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn fedavg_hand_arithmetic() {
        let s = set(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(aggregate_fedavg(&s).unwrap().as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn empty_update_set_is_rejected() {
        assert!(UpdateSet::new(vec![]).is_err());
    }

    #[test]
    fn duplicate_client_ids_rejected() {
        let e = vec![
            (1u32, ParamVector::from_vec(vec![0.0])),
            (1u32, ParamVector::from_vec(vec![1.0])),
        ];
        assert!(UpdateSet::new(e).is_err());
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let e = vec![
            (0u32, ParamVector::from_vec(vec![0.0])),
            (1u32, ParamVector::from_vec(vec![1.0, 2.0])),
        ];
        assert!(UpdateSet::new(e).is_err());
    }

    #[test]
    fn krum_identical_updates_tie_break_low_id() {
        let s = set(&[vec![1.0], vec![1.0], vec![1.0], vec![1.0]]);
        assert_eq!(aggregate_krum(&s, 1).unwrap().as_slice(), &[1.0]);
    }

    #[test]
    fn krum_rejects_small_sets() {
        let s = set(&[vec![1.0], vec![2.0], vec![3.0]]);
        assert!(aggregate_krum(&s, 1).is_err());
    }

    #[test]
    fn krum_never_selects_far_outlier() {
        let mut rng = rng_from(41);
        for _ in 0..20 {
            let mut vs: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..3).map(|_| rng.gen::<f64>() * 0.1).collect())
                .collect();
            vs.push(vec![100.0, 100.0, 100.0]);
            let s = set(&vs);
            let selected = aggregate_krum(&s, 1).unwrap();
            let norm: f64 = selected.as_slice().iter().map(|v| v * v).sum::<f64>();
            assert!(norm < 1.0, "outlier selected: {:?}", selected.as_slice());
        }
    }

    #[test]
    fn krum_matches_brute_force_oracle() {
        let mut rng = rng_from(43);
        for trial in 0..50 {
            let n = 4 + (trial % 5); // 4..8
            let dim = 1 + (trial % 16);
            let f = if n >= 5 { 1 + trial % 2 } else { 1 };
            let f = f.min(n - 3);
            let vs: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dim).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect())
                .collect();
            let s = set(&vs);
            let expected = krum_brute_force(&vs, f);
            let selected = aggregate_krum(&s, f).unwrap();
            assert_eq!(
                selected.as_slice(),
                vs[expected].as_slice(),
                "trial {} n={} f={}",
                trial,
                n,
                f
            );
        }
    }

    #[test]
    fn multikrum_reductions() {
        let mut rng = rng_from(47);
        let vs: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.gen()).collect()).collect();
        let s = set(&vs);
        // m_keep = 1 equals krum.
        assert_eq!(
            aggregate_multikrum(&s, 1, 1).unwrap(),
            aggregate_krum(&s, 1).unwrap()
        );
        // keep-all equals fedavg (f chosen so the precondition holds).
        let all = aggregate_multikrum(&s, 0, 6).unwrap();
        let avg = aggregate_fedavg(&s).unwrap();
        for (a, b) in all.as_slice().iter().zip(avg.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn multikrum_excludes_outlier() {
        let vs = vec![
            vec![0.1, 0.0],
            vec![0.0, 0.1],
            vec![0.05, 0.05],
            vec![0.0, 0.0],
            vec![50.0, 50.0],
        ];
        let s = set(&vs);
        let agg = aggregate_multikrum(&s, 1, 3).unwrap();
        assert!(agg.as_slice().iter().all(|&v| v < 1.0), "{:?}", agg.as_slice());
    }

    #[test]
    fn multikrum_validates_m_keep() {
        let vs: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let s = set(&vs);
        assert!(aggregate_multikrum(&s, 1, 0).is_err());
        assert!(aggregate_multikrum(&s, 1, 5).is_err());
    }

    #[test]
    fn rlr_threshold_zero_is_plain_mean_times_lr() {
        let s = set(&[vec![1.0, -1.0], vec![2.0, 3.0]]);
        let out = aggregate_rlr(&s, 0, 0.5).unwrap();
        assert_eq!(out.as_slice(), &[0.75, 0.5]);
    }

    #[test]
    fn rlr_unanimous_agreement_keeps_sign() {
        let s = set(&[vec![1.0, -2.0], vec![3.0, -4.0], vec![5.0, -6.0]]);
        let out = aggregate_rlr(&s, 3, 1.0).unwrap();
        assert_eq!(out.as_slice(), &[3.0, -4.0]);
    }

    #[test]
    fn rlr_disagreement_flips_coordinate() {
        // Votes sum to 1 < 2, so the coordinate flips: -lr * mean = -1/3.
        let s = set(&[vec![1.0], vec![1.0], vec![-1.0]]);
        let out = aggregate_rlr(&s, 2, 1.0).unwrap();
        assert!((out.as_slice()[0] - (-1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn rules_are_permutation_invariant() {
        let mut rng = rng_from(53);
        let vs: Vec<Vec<f64>> = (0..6).map(|_| (0..5).map(|_| rng.gen()).collect()).collect();
        let forward: Vec<(u32, ParamVector)> = vs
            .iter()
            .enumerate()
            .map(|(i, v)| (i as u32, ParamVector::from_vec(v.clone())))
            .collect();
        let mut reversed = forward.clone();
        reversed.reverse();
        let a = UpdateSet::new(forward).unwrap();
        let b = UpdateSet::new(reversed).unwrap();
        for rule in [
            AggregationRule::FedAvg,
            AggregationRule::Krum { f: 1 },
            AggregationRule::MultiKrum { f: 1, m_keep: 3 },
            AggregationRule::Rlr { threshold: 4, server_lr: 1.0 },
        ] {
            assert_eq!(rule.aggregate(&a).unwrap(), rule.aggregate(&b).unwrap());
        }
    }

    #[test]
    fn fedavg_translation_equivariance() {
        let mut rng = rng_from(59);
        let vs: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.gen()).collect()).collect();
        let c = 2.5;
        let shifted: Vec<Vec<f64>> = vs.iter().map(|v| v.iter().map(|x| x + c).collect()).collect();
        let base = aggregate_fedavg(&set(&vs)).unwrap();
        let moved = aggregate_fedavg(&set(&shifted)).unwrap();
        for (a, b) in base.as_slice().iter().zip(moved.as_slice()) {
            assert!((a + c - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rule_string_parsing() {
        assert_eq!(rule_from_config("fedavg", 1, 1, 4, 1.0).unwrap(), AggregationRule::FedAvg);
        assert!(matches!(
            rule_from_config("krum", 2, 1, 4, 1.0).unwrap(),
            AggregationRule::Krum { f: 2 }
        ));
        assert!(rule_from_config("median", 1, 1, 4, 1.0).is_err());
    }
}
