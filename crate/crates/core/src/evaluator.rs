//! Unseen/seen accuracy, harmonic mean, confidence intervals and the
//! unseen-error ratio.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Composition;
use crate::sampler::Episode;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("episode has no {0} query samples")]
    EmptyPartition(&'static str),
    #[error("aggregation needs at least 2 episodes, got {0}")]
    TooFewEpisodes(usize),
    #[error("error ratio undefined: no unseen-to-unseen errors ({u_to_s} unseen-to-seen)")]
    UndefinedRatio { u_to_s: usize },
    #[error("{expected} predictions expected, got {got}")]
    PredictionCount { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub truth: Composition,
    pub predicted: Composition,
    pub unseen: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeResult {
    pub predictions: Vec<Prediction>,
    pub seen: Vec<Composition>,
    pub unseen: Vec<Composition>,
}

impl EpisodeResult {
    /// Pairs each query sample of `episode` with its predicted composition.
    pub fn from_episode(episode: &Episode, predicted: &[Composition]) -> Result<Self, EvalError> {
        if predicted.len() != episode.query.len() {
            return Err(EvalError::PredictionCount { expected: episode.query.len(), got: predicted.len() });
        }
        let predictions = episode
            .query
            .iter()
            .zip(predicted)
            .map(|(&(_, truth), &predicted)| Prediction { truth, predicted, unseen: episode.is_unseen(truth) })
            .collect();
        Ok(Self { predictions, seen: episode.seen.clone(), unseen: episode.unseen.clone() })
    }

    /// `(correct, total)` over seen and unseen queries.
    pub fn counts(&self) -> ((usize, usize), (usize, usize)) {
        let mut s = (0, 0);
        let mut u = (0, 0);
        for p in &self.predictions {
            let slot = if p.unseen { &mut u } else { &mut s };
            slot.1 += 1;
            slot.0 += usize::from(p.truth == p.predicted);
        }
        (s, u)
    }
}

/// `(seen accuracy, unseen accuracy)` as fractions.
pub fn episode_accuracy(r: &EpisodeResult) -> Result<(f64, f64), EvalError> {
    let ((sc, st), (uc, ut)) = r.counts();
    if st == 0 {
        return Err(EvalError::EmptyPartition("seen"));
    }
    if ut == 0 {
        return Err(EvalError::EmptyPartition("unseen"));
    }
    Ok((sc as f64 / st as f64, uc as f64 / ut as f64))
}

/// `2·SA·UA / (SA + UA)`, zero when both are zero.
pub fn harmonic_mean(sa: f64, ua: f64) -> f64 {
    if sa + ua == 0.0 {
        0.0
    } else {
        2.0 * sa * ua / (sa + ua)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub u_to_s: usize,
    pub u_to_u: usize,
    pub u_to_unfeasible: usize,
}

impl ErrorCounts {
    pub fn ratio(&self) -> Result<f64, EvalError> {
        if self.u_to_u == 0 {
            Err(EvalError::UndefinedRatio { u_to_s: self.u_to_s })
        } else {
            Ok(self.u_to_s as f64 / self.u_to_u as f64)
        }
    }
}

/// Buckets wrong predictions on unseen queries by where they land.
pub fn error_counts(results: &[EpisodeResult]) -> ErrorCounts {
    let mut c = ErrorCounts::default();
    for r in results {
        for p in r.predictions.iter().filter(|p| p.unseen && p.truth != p.predicted) {
            if r.seen.contains(&p.predicted) {
                c.u_to_s += 1;
            } else if r.unseen.contains(&p.predicted) {
                c.u_to_u += 1;
            } else {
                c.u_to_unfeasible += 1;
            }
        }
    }
    c
}

/// `(U → S) / (U → U)` over all results.
pub fn error_ratio(results: &[EpisodeResult]) -> Result<f64, EvalError> {
    error_counts(results).ratio()
}

/// Metrics in percent; `ci95` entries are half-widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ua: f64,
    pub sa: f64,
    pub hm: f64,
    pub ua_ci95: f64,
    pub sa_ci95: f64,
    pub error_ratio: Option<f64>,
    pub errors: ErrorCounts,
    pub n_episodes: usize,
}

fn mean_ci(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

pub fn aggregate(results: &[EpisodeResult]) -> Result<MetricsReport, EvalError> {
    if results.len() < 2 {
        return Err(EvalError::TooFewEpisodes(results.len()));
    }
    let mut sa = Vec::with_capacity(results.len());
    let mut ua = Vec::with_capacity(results.len());
    for r in results {
        let (s, u) = episode_accuracy(r)?;
        sa.push(100.0 * s);
        ua.push(100.0 * u);
    }
    let (sa, sa_ci95) = mean_ci(&sa);
    let (ua, ua_ci95) = mean_ci(&ua);
    let errors = error_counts(results);
    Ok(MetricsReport {
        ua,
        sa,
        hm: harmonic_mean(sa, ua),
        ua_ci95,
        sa_ci95,
        error_ratio: errors.ratio().ok(),
        errors,
        n_episodes: results.len(),
    })
}

/// Mean and sample standard deviation of a metric across seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub n_seeds: usize,
    pub ua: MeanStd,
    pub sa: MeanStd,
    pub hm: MeanStd,
}

pub fn seed_summary(reports: &[MetricsReport]) -> SeedSummary {
    let ms = |f: fn(&MetricsReport) -> f64| {
        let xs: Vec<f64> = reports.iter().map(f).collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        MeanStd { mean, std }
    };
    SeedSummary { n_seeds: reports.len(), ua: ms(|r| r.ua), sa: ms(|r| r.sa), hm: ms(|r| r.hm) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(a: usize, b: usize) -> Composition {
        Composition::new(a, b)
    }

    /// Seen {(0,0), (1,1)}, unseen {(0,1), (1,0)}; `(1,2)` lies outside both.
    fn result(seen: &[(bool, Composition)], unseen: &[(bool, Composition)]) -> EpisodeResult {
        let mut predictions = Vec::new();
        for &(ok, truth) in seen {
            predictions.push(Prediction { truth, predicted: if ok { truth } else { c(0, 1) }, unseen: false });
        }
        for &(ok, truth) in unseen {
            predictions.push(Prediction { truth, predicted: if ok { truth } else { c(0, 0) }, unseen: true });
        }
        EpisodeResult { predictions, seen: vec![c(0, 0), c(1, 1)], unseen: vec![c(0, 1), c(1, 0)] }
    }

    #[test]
    fn accuracy_examples() {
        let all = result(&[(true, c(0, 0)), (true, c(1, 1))], &[(true, c(0, 1))]);
        assert_eq!(episode_accuracy(&all).unwrap(), (1.0, 1.0));
        let half = result(&[(true, c(0, 0))], &[(false, c(0, 1)), (false, c(1, 0))]);
        assert_eq!(episode_accuracy(&half).unwrap(), (1.0, 0.0));
        let r = result(
            &[(true, c(0, 0)), (true, c(1, 1)), (true, c(0, 0)), (false, c(1, 1))],
            &[(true, c(0, 1)), (false, c(1, 0))],
        );
        assert_eq!(episode_accuracy(&r).unwrap(), (0.75, 0.5));
        assert_eq!(r.counts(), ((3, 4), (1, 2)));
        let empty = result(&[(true, c(0, 0))], &[]);
        assert_eq!(episode_accuracy(&empty), Err(EvalError::EmptyPartition("unseen")));
    }

    #[test]
    fn harmonic_mean_examples() {
        assert!((harmonic_mean(19.01, 10.44) - 13.47).abs() < 0.01);
        assert_eq!(harmonic_mean(7.5, 7.5), 7.5);
        assert_eq!(harmonic_mean(30.0, 0.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    }

    proptest! {
        #[test]
        fn harmonic_mean_bounds(a in 0.0f64..100.0, b in 0.0f64..100.0) {
            let h = harmonic_mean(a, b);
            prop_assert_eq!(h, harmonic_mean(b, a));
            prop_assert!(h <= 2.0 * a.min(b) + 1e-12);
            prop_assert!(h <= a.max(b) + 1e-12);
        }
    }

    #[test]
    fn aggregate_examples() {
        let r = result(&[(true, c(0, 0)), (false, c(1, 1))], &[(true, c(0, 1)), (false, c(1, 0))]);
        let rep = aggregate(&[r.clone(), r.clone(), r.clone()]).unwrap();
        assert_eq!((rep.sa, rep.ua, rep.sa_ci95, rep.ua_ci95), (50.0, 50.0, 0.0, 0.0));

        let a = result(&[(true, c(0, 0))], &[(true, c(0, 1)), (true, c(0, 1)), (false, c(1, 0)), (false, c(1, 0)), (false, c(1, 0))]);
        let b = result(&[(true, c(0, 0))], &[(true, c(0, 1)), (true, c(0, 1)), (true, c(0, 1)), (false, c(1, 0)), (false, c(1, 0))]);
        assert!((aggregate(&[a, b]).unwrap().ua - 50.0).abs() < 1e-12);
        assert_eq!(aggregate(&[r]), Err(EvalError::TooFewEpisodes(1)));
    }

    #[test]
    fn aggregate_matches_recomputation_and_ignores_order() {
        // seen accuracies 1, 0.5, 1/3; unseen 0, 1, 0.5
        let e1 = result(&[(true, c(0, 0))], &[(false, c(0, 1))]);
        let e2 = result(&[(true, c(0, 0)), (false, c(1, 1))], &[(true, c(1, 0))]);
        let e3 = result(&[(true, c(0, 0)), (false, c(1, 1)), (false, c(0, 0))], &[(true, c(0, 1)), (false, c(1, 0))]);
        let rep = aggregate(&[e1.clone(), e2.clone(), e3.clone()]).unwrap();
        let sa = [100.0, 50.0, 100.0 / 3.0];
        let ua = [0.0, 100.0, 50.0];
        let m = |x: &[f64]| x.iter().sum::<f64>() / 3.0;
        let ci = |x: &[f64]| {
            let mu = m(x);
            1.96 * (x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 2.0).sqrt() / 3f64.sqrt()
        };
        assert!((rep.sa - m(&sa)).abs() < 1e-12);
        assert!((rep.ua - m(&ua)).abs() < 1e-12);
        assert!((rep.sa_ci95 - ci(&sa)).abs() < 1e-12);
        assert!((rep.ua_ci95 - ci(&ua)).abs() < 1e-12);
        assert!((rep.hm - 2.0 * m(&sa) * m(&ua) / (m(&sa) + m(&ua))).abs() < 1e-12);
        let back = aggregate(&[e3, e1, e2]).unwrap();
        assert!((back.sa - rep.sa).abs() < 1e-12 && (back.ua - rep.ua).abs() < 1e-12 && back.errors == rep.errors);
    }

    #[test]
    fn error_ratio_examples() {
        let to_seen = result(&[], &[(false, c(0, 1)), (false, c(1, 0))]);
        assert_eq!(error_ratio(&[to_seen]), Err(EvalError::UndefinedRatio { u_to_s: 2 }));

        let wrong = |truth: Composition, predicted: Composition| Prediction { truth, predicted, unseen: true };
        let mut r = result(&[], &[]);
        for _ in 0..4 {
            r.predictions.push(wrong(c(0, 1), c(1, 1)));
        }
        for _ in 0..2 {
            r.predictions.push(wrong(c(0, 1), c(1, 0)));
        }
        assert_eq!(error_ratio(std::slice::from_ref(&r)).unwrap(), 2.0);

        r.predictions.push(wrong(c(1, 0), c(1, 2)));
        let counts = error_counts(&[r.clone()]);
        assert_eq!(counts, ErrorCounts { u_to_s: 4, u_to_u: 2, u_to_unfeasible: 1 });
        assert_eq!(error_ratio(&[r]).unwrap(), 2.0);
    }

    #[test]
    fn seed_summary_mean_and_std() {
        let rep = |x: f64| MetricsReport {
            ua: x,
            sa: 2.0 * x,
            hm: harmonic_mean(2.0 * x, x),
            ua_ci95: 0.0,
            sa_ci95: 0.0,
            error_ratio: None,
            errors: ErrorCounts::default(),
            n_episodes: 2,
        };
        let s = seed_summary(&[rep(1.0), rep(2.0), rep(3.0)]);
        assert_eq!(s.n_seeds, 3);
        assert_eq!(s.ua, MeanStd { mean: 2.0, std: 1.0 });
        assert_eq!(s.sa.mean, 4.0);
    }
}
