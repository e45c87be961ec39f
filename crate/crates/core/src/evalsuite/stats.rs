use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A correlation that may have been forced to 0 by a constant input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corr {
    pub value: f64,
    pub degenerate: bool,
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("lengths {} and {} differ", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least 2 points".into()));
    }
    Ok(())
}

/// Pearson correlation; 0 with the degenerate flag when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<Corr> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Corr {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Corr {
        value: (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// 1-based ranks; tied values share their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<Corr> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// `1 − SSE / SST` of `pred` against `truth`; `None` when `truth` is constant.
pub fn r2_score(truth: &[f64], pred: &[f64]) -> Option<f64> {
    let n = truth.len() as f64;
    let m = truth.iter().sum::<f64>() / n;
    let sst: f64 = truth.iter().map(|t| (t - m).powi(2)).sum();
    if sst == 0.0 {
        return None;
    }
    let sse: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum();
    Some(1.0 - sse / sst)
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Kendall-style concordance count, used to cross-check the hand case.
    fn concordance(x: &[f64], y: &[f64]) -> (usize, usize) {
        let (mut c, mut d) = (0, 0);
        for i in 0..x.len() {
            for j in i + 1..x.len() {
                let s = (x[i] - x[j]) * (y[i] - y[j]);
                if s > 0.0 {
                    c += 1;
                } else if s < 0.0 {
                    d += 1;
                }
            }
        }
        (c, d)
    }

    #[test]
    fn spearman_hand_cases() {
        let x: Vec<f64> = (0..10).map(|i| i as f64 - 4.5).collect();
        let cube: Vec<f64> = x.iter().map(|v| v * v * v).collect();
        assert_eq!(spearman(&x, &cube).unwrap().value, 1.0);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(spearman(&x, &neg).unwrap().value, -1.0);
        let (a, b) = ([1.0, 2.0, 3.0, 4.0], [1.0, 3.0, 2.0, 4.0]);
        // 1 − 6Σd²/(n(n²−1)) with d = (0,−1,1,0): 1 − 12/60
        assert!((spearman(&a, &b).unwrap().value - 0.8).abs() < 1e-15);
        // one discordant pair out of six
        assert_eq!(concordance(&a, &b), (5, 1));
        let c = spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(c.degenerate && c.value == 0.0);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    proptest! {
        #[test]
        fn spearman_is_rank_then_pearson(xs in prop::collection::vec((-5i32..5, -5i32..5), 3..40)) {
            let x: Vec<f64> = xs.iter().map(|p| p.0 as f64).collect();
            let y: Vec<f64> = xs.iter().map(|p| p.1 as f64).collect();
            // independent rank oracle: count strictly-smaller plus half of equal others
            let rank = |v: &[f64]| -> Vec<f64> {
                v.iter()
                    .map(|a| {
                        let less = v.iter().filter(|b| *b < a).count() as f64;
                        let eq = v.iter().filter(|b| *b == a).count() as f64;
                        less + (eq + 1.0) / 2.0
                    })
                    .collect()
            };
            let expect = pearson(&rank(&x), &rank(&y)).unwrap().value;
            prop_assert!((spearman(&x, &y).unwrap().value - expect).abs() <= 1e-12);
        }

        #[test]
        fn spearman_ignores_monotone_transforms(xs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 3..30)) {
            let x: Vec<f64> = xs.iter().map(|p| p.0).collect();
            let y: Vec<f64> = xs.iter().map(|p| p.1).collect();
            let fx: Vec<f64> = x.iter().map(|v| v.exp() + 2.0 * v).collect();
            let gy: Vec<f64> = y.iter().map(|v| v.powi(3)).collect();
            let a = spearman(&x, &y).unwrap().value;
            prop_assert!((spearman(&fx, &gy).unwrap().value - a).abs() <= 1e-12);
        }
    }
}
