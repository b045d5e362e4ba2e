//! Detection metrics over labelled trial scores.
//!
//! A trial is accepted when its score is at or above the threshold. The
//! sweep visits every distinct score in ascending order and finally `+inf`,
//! so the first point is always `p_miss = 0` and the last `p_fa = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ScoreSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams {
            p_target: 0.05,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn new(p_target: f64, c_miss: f64, c_fa: f64) -> Result<Self> {
        let p = DcfParams { p_target, c_miss, c_fa };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::invalid(format!(
                "p_target must be in (0, 1), got {}",
                self.p_target
            )));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0) || !self.c_miss.is_finite() || !self.c_fa.is_finite() {
            return Err(Error::invalid("DCF costs must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// Scores and labels of a labelled score set.
pub fn labelled(set: &ScoreSet) -> Result<(&[f64], &[bool])> {
    let labels = set
        .trials()
        .labels()
        .ok_or_else(|| Error::invalid("score set has no target/nontarget labels"))?;
    Ok((set.scores(), labels))
}

pub fn det_points(scores: &[f64], labels: &[bool]) -> Result<Vec<DetPoint>> {
    crate::error::ensure_dim(scores.len(), labels.len())?;
    crate::error::ensure_finite(scores, "score")?;
    let n_tgt = labels.iter().filter(|&&l| l).count();
    let n_non = labels.len() - n_tgt;
    if n_tgt == 0 || n_non == 0 {
        return Err(Error::SingleClassTrials);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut points = Vec::new();
    // counts of trials strictly below the current threshold
    let (mut tgt_below, mut non_below) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        points.push(DetPoint {
            threshold,
            p_miss: tgt_below as f64 / n_tgt as f64,
            p_fa: (n_non - non_below) as f64 / n_non as f64,
        });
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tgt_below += 1;
            } else {
                non_below += 1;
            }
            i += 1;
        }
    }
    points.push(DetPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    debug_assert!(points
        .windows(2)
        .all(|w| w[1].p_miss >= w[0].p_miss && w[1].p_fa <= w[0].p_fa));
    Ok(points)
}

/// Equal error rate in `[0, 1]`, linearly interpolated between the two DET
/// points where `p_miss - p_fa` changes sign.
pub fn eer(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let points = det_points(scores, labels)?;
    Ok(eer_from_points(&points))
}

pub fn eer_from_points(points: &[DetPoint]) -> f64 {
    let diff = |p: &DetPoint| p.p_miss - p.p_fa;
    let i = points
        .iter()
        .position(|p| diff(p) >= 0.0)
        .expect("last DET point has p_miss - p_fa = 1");
    let cur = &points[i];
    if diff(cur) == 0.0 || i == 0 {
        return cur.p_miss;
    }
    let prev = &points[i - 1];
    let (dm, df) = (cur.p_miss - prev.p_miss, cur.p_fa - prev.p_fa);
    // p_miss and p_fa meet at prev + t * (cur - prev)
    let t = (prev.p_fa - prev.p_miss) / (dm - df);
    prev.p_miss + t * dm
}

/// Normalized minimum detection cost.
pub fn min_dcf(scores: &[f64], labels: &[bool], params: &DcfParams) -> Result<f64> {
    params.validate()?;
    let points = det_points(scores, labels)?;
    Ok(min_dcf_from_points(&points, params))
}

pub fn min_dcf_from_points(points: &[DetPoint], params: &DcfParams) -> f64 {
    let miss_w = params.c_miss * params.p_target;
    let fa_w = params.c_fa * (1.0 - params.p_target);
    let norm = miss_w.min(fa_w);
    points
        .iter()
        .map(|p| (miss_w * p.p_miss + fa_w * p.p_fa) / norm)
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Fraction in `[0, 1]`.
    pub eer: f64,
    pub min_dcf: f64,
}

pub fn evaluate(set: &ScoreSet, params: &DcfParams) -> Result<Evaluation> {
    params.validate()?;
    let (scores, labels) = labelled(set)?;
    let points = det_points(scores, labels)?;
    Ok(Evaluation {
        eer: eer_from_points(&points),
        min_dcf: min_dcf_from_points(&points, params),
    })
}

/// Relative improvement in percent: `100 (prev - cur) / prev`.
pub fn rel_delta(prev_eer: f64, cur_eer: f64) -> Result<f64> {
    if !(prev_eer > 0.0) || !prev_eer.is_finite() || !cur_eer.is_finite() {
        return Err(Error::invalid(format!("relative delta needs prev > 0, got {prev_eer}")));
    }
    Ok(100.0 * (prev_eer - cur_eer) / prev_eer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// p_miss / p_fa at threshold `t` by direct counting.
    fn rates_at(scores: &[f64], labels: &[bool], t: f64) -> (f64, f64) {
        let nt = labels.iter().filter(|&&l| l).count() as f64;
        let nn = labels.len() as f64 - nt;
        let miss = scores.iter().zip(labels).filter(|(s, l)| **l && **s < t).count() as f64;
        let fa = scores.iter().zip(labels).filter(|(s, l)| !**l && **s >= t).count() as f64;
        (miss / nt, fa / nn)
    }

    fn oracle_points(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64, f64)> {
        let mut ts: Vec<f64> = scores.to_vec();
        ts.push(f64::INFINITY);
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts.into_iter()
            .map(|t| {
                let (m, f) = rates_at(scores, labels, t);
                (t, m, f)
            })
            .collect()
    }

    fn oracle_eer(scores: &[f64], labels: &[bool]) -> f64 {
        let pts = oracle_points(scores, labels);
        for w in pts.windows(2) {
            let (_, m0, f0) = w[0];
            let (_, m1, f1) = w[1];
            if m0 == f0 {
                return m0;
            }
            if m0 < f0 && m1 > f1 {
                // solve m0 + t(m1-m0) = f0 + t(f1-f0)
                let t = (f0 - m0) / ((m1 - m0) - (f1 - f0));
                return m0 + t * (m1 - m0);
            }
        }
        pts.last().unwrap().1
    }

    #[test]
    fn separated_and_degenerate() {
        let s = [0.9, 0.8, 0.1, 0.2];
        let l = [true, true, false, false];
        let pts = det_points(&s, &l).unwrap();
        assert!(pts.iter().any(|p| p.p_miss == 0.0 && p.p_fa == 0.0));
        assert_eq!(eer(&s, &l).unwrap(), 0.0);
        assert_eq!(min_dcf(&s, &l, &DcfParams::default()).unwrap(), 0.0);
        let inverted: Vec<bool> = l.iter().map(|b| !b).collect();
        assert_eq!(eer(&s, &inverted).unwrap(), 1.0);

        let flat = [0.5; 4];
        let pts = det_points(&flat, &l).unwrap();
        let pairs: Vec<(f64, f64)> = pts.iter().map(|p| (p.p_miss, p.p_fa)).collect();
        assert_eq!(pairs, vec![(0.0, 1.0), (1.0, 0.0)]);
        assert_eq!(min_dcf(&flat, &l, &DcfParams::default()).unwrap(), 1.0);

        assert!(matches!(det_points(&s, &[true; 4]), Err(Error::SingleClassTrials)));
    }

    #[test]
    fn small_eer_case_matches_oracle() {
        let s = [0.9, 0.8, 0.2, 0.7, 0.1, 0.15];
        let l = [true, true, true, false, false, false];
        let e = eer(&s, &l).unwrap();
        assert!((e - oracle_eer(&s, &l)).abs() < 1e-15);
        assert!((e - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rel_delta_examples() {
        assert_eq!(rel_delta(3.0, 3.0).unwrap(), 0.0);
        assert_eq!(rel_delta(10.0, 5.0).unwrap(), 50.0);
        let d = rel_delta(16.123, 12.108).unwrap();
        assert!((d - 24.90231346523599).abs() < 1e-9);
        assert!(rel_delta(0.0, 1.0).is_err());
    }

    #[test]
    fn evaluate_requires_labels() {
        use crate::types::{ids, TrialList};
        let u = ids(&["a", "b"]).unwrap();
        let t = TrialList::new(vec![(u[0].clone(), u[1].clone()), (u[0].clone(), u[0].clone())], None).unwrap();
        let set = ScoreSet::new(t.clone(), vec![0.1, 0.9]).unwrap();
        assert!(evaluate(&set, &DcfParams::default()).is_err());
        let set = ScoreSet::new(t.with_labels(vec![false, true]).unwrap(), vec![0.1, 0.9]).unwrap();
        assert_eq!(evaluate(&set, &DcfParams::default()).unwrap().eer, 0.0);
    }

    fn case() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..=20).prop_flat_map(|n| {
            (
                prop::collection::vec((0i32..8).prop_map(|v| v as f64 * 0.25), n),
                prop::collection::vec(any::<bool>(), n),
            )
                .prop_filter("both classes", |(_, l)| l.iter().any(|&b| b) && l.iter().any(|&b| !b))
        })
    }

    proptest! {
        #[test]
        fn matches_exhaustive_oracle((s, l) in case()) {
            let pts = det_points(&s, &l).unwrap();
            let got: Vec<(f64, f64, f64)> = pts.iter().map(|p| (p.threshold, p.p_miss, p.p_fa)).collect();
            prop_assert_eq!(got, oracle_points(&s, &l));
            prop_assert_eq!(eer(&s, &l).unwrap(), oracle_eer(&s, &l));
        }

        #[test]
        fn min_dcf_matches_exhaustive_oracle((s, l) in case(), p in 0.01f64..0.99) {
            let params = DcfParams::new(p, 1.0, 1.0).unwrap();
            let norm = p.min(1.0 - p);
            let best = oracle_points(&s, &l)
                .into_iter()
                .map(|(_, m, f)| (p * m + (1.0 - p) * f) / norm)
                .fold(f64::INFINITY, f64::min);
            prop_assert_eq!(min_dcf(&s, &l, &params).unwrap(), best);
        }

        #[test]
        fn eer_invariant_under_monotone_maps((s, l) in case(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
            let mapped: Vec<f64> = s.iter().map(|v| (a * v + b).exp()).collect();
            prop_assert!((eer(&s, &l).unwrap() - eer(&mapped, &l).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn min_dcf_bounds((s, l) in case(), p in 0.01f64..0.99) {
            let dcf = min_dcf(&s, &l, &DcfParams::new(p, 1.0, 1.0).unwrap()).unwrap();
            prop_assert!((0.0..=1.0).contains(&dcf));
            let half = min_dcf(&s, &l, &DcfParams::new(0.5, 1.0, 1.0).unwrap()).unwrap();
            prop_assert!(half >= eer(&s, &l).unwrap() - 1e-12);
        }
    }
}
