//! Rank and linear correlation plus the repeated random-split protocol.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Paired predictions and opinion scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub prediction: Vec<f64>,
    pub mos: Vec<f64>,
}

impl ScoreTable {
    pub fn new(prediction: Vec<f64>, mos: Vec<f64>) -> Result<Self> {
        if prediction.len() != mos.len() {
            return Err(Error::param("table", "prediction and mos lengths differ"));
        }
        if prediction.len() < 2 {
            return Err(Error::param("table", "need at least two pairs"));
        }
        if prediction.iter().chain(&mos).any(|v| !v.is_finite()) {
            return Err(Error::param("table", "non-finite value"));
        }
        Ok(ScoreTable { prediction, mos })
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new(pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1).collect())
    }

    pub fn len(&self) -> usize {
        self.mos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mos.is_empty()
    }
}

fn pearson(x: &[f64], y: &[f64], what: &'static str) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(what));
    }
    Ok(sxy / libm::sqrt(sxx * syy))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = alloc::vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
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

pub fn plcc(table: &ScoreTable) -> Result<f64> {
    pearson(&table.prediction, &table.mos, "plcc: zero variance")
}

pub fn srcc(table: &ScoreTable) -> Result<f64> {
    pearson(
        &average_ranks(&table.prediction),
        &average_ranks(&table.mos),
        "srcc: zero rank variance",
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitProtocol {
    pub n_splits: usize,
    pub train_frac: f64,
    pub base_seed: u64,
}

impl SplitProtocol {
    pub fn new(base_seed: u64) -> Self {
        SplitProtocol {
            n_splits: 10,
            train_frac: 0.8,
            base_seed,
        }
    }

    /// `(train, test)` index lists per split.
    pub fn splits(&self, n: usize) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
        if self.n_splits == 0 || !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::Protocol("need n_splits >= 1 and train_frac in (0, 1)".into()));
        }
        let n_train = libm::round(self.train_frac * n as f64) as usize;
        if n_train == 0 || n.saturating_sub(n_train) < 2 {
            return Err(Error::Protocol(format!(
                "{n} items give a train/test split of {}/{}; need a non-empty train set and at least two test items",
                n_train,
                n.saturating_sub(n_train)
            )));
        }
        Ok((0..self.n_splits)
            .map(|k| {
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut rng::seeded(rng::derive_seed(self.base_seed, "split", k as u64)));
                let test = idx.split_off(n_train);
                (idx, test)
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub split: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub srcc: f64,
    pub plcc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub splits: Vec<SplitResult>,
    pub mean_srcc: f64,
    pub mean_plcc: f64,
}

impl SplitReport {
    pub fn from_results(splits: Vec<SplitResult>) -> Self {
        let n = splits.len().max(1) as f64;
        SplitReport {
            mean_srcc: splits.iter().map(|s| s.srcc).sum::<f64>() / n,
            mean_plcc: splits.iter().map(|s| s.plcc).sum::<f64>() / n,
            splits,
        }
    }

    pub fn to_markdown(&self, label: &str) -> String {
        let mut out = render_table("Split", &[]);
        for s in &self.splits {
            out.push_str(&row(&format!("{}", s.split), s.srcc, s.plcc));
        }
        out.push_str(&row(&format!("**{label} (mean)**"), self.mean_srcc, self.mean_plcc));
        out
    }
}

fn row(label: &str, srcc: f64, plcc: f64) -> String {
    format!("| {label} | {srcc:.3} | {plcc:.3} |\n")
}

/// Two-column SRCC/PLCC markdown table, three decimals per cell.
pub fn render_table(first_column: &str, rows: &[(String, f64, f64)]) -> String {
    let mut out = format!("| {first_column} | SRCC | PLCC |\n|---|---|---|\n");
    for (label, s, p) in rows {
        out.push_str(&row(label, *s, *p));
    }
    out
}

/// Trains on each split's training indices and scores its test indices.
pub fn run_split_protocol<M>(
    n_items: usize,
    protocol: &SplitProtocol,
    mut train_fn: impl FnMut(usize, &[usize]) -> Result<M>,
    mut eval_fn: impl FnMut(&M, &[usize]) -> Result<ScoreTable>,
) -> Result<SplitReport> {
    let mut results = Vec::with_capacity(protocol.n_splits);
    for (k, (train, test)) in protocol.splits(n_items)?.into_iter().enumerate() {
        let model = train_fn(k, &train)?;
        let table = eval_fn(&model, &test)?;
        results.push(SplitResult {
            split: k,
            train_size: train.len(),
            test_size: test.len(),
            srcc: srcc(&table)?,
            plcc: plcc(&table)?,
        });
    }
    Ok(SplitReport::from_results(results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table(x: &[f64], y: &[f64]) -> ScoreTable {
        ScoreTable::new(x.to_vec(), y.to_vec()).unwrap()
    }

    // Textbook formula with n-1 denominators.
    fn oracle_pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0);
        let sx = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let sy = (y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        cov / (sx * sy)
    }

    // Rank = 1 + #smaller + (#equal - 1)/2, counted pairwise.
    fn oracle_ranks(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|a| {
                let less = v.iter().filter(|b| *b < a).count() as f64;
                let eq = v.iter().filter(|b| *b == a).count() as f64;
                1.0 + less + (eq - 1.0) / 2.0
            })
            .collect()
    }

    #[test]
    fn plcc_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((plcc(&table(&x, &x.map(|v| 2.0 * v + 1.0))).unwrap() - 1.0).abs() < 1e-15);
        assert!((plcc(&table(&x, &x.map(|v| -v))).unwrap() + 1.0).abs() < 1e-15);
        let y = [1.2, 1.9, 3.4, 3.5];
        assert!((plcc(&table(&x, &y)).unwrap() - oracle_pearson(&x, &y)).abs() < 1e-12);
    }

    #[test]
    fn srcc_examples() {
        let x = [1.0, 2.0, 2.0, 3.0];
        let y = [1.0, 3.0, 2.0, 4.0];
        let want = oracle_pearson(&oracle_ranks(&x), &oracle_ranks(&y));
        assert!((srcc(&table(&x, &y)).unwrap() - want).abs() < 1e-12);
        let a = [0.1, 0.5, 0.7, 2.0, 9.0];
        assert_eq!(srcc(&table(&a, &a.map(|v: f64| v.exp()))).unwrap(), 1.0);
        assert_eq!(srcc(&table(&a, &a.map(|v| -v))).unwrap(), -1.0);
    }

    #[test]
    fn degenerate_inputs_are_errors() {
        assert!(matches!(
            plcc(&table(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0])),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(srcc(&table(&[1.0, 2.0], &[5.0, 5.0])).is_err());
        assert!(ScoreTable::new(alloc::vec![1.0], alloc::vec![1.0]).is_err());
        assert!(ScoreTable::new(alloc::vec![1.0, f64::NAN], alloc::vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let p = SplitProtocol::new(7);
        let s = p.splits(100).unwrap();
        assert_eq!(s.len(), 10);
        for (train, test) in &s {
            assert_eq!((train.len(), test.len()), (80, 20));
            let mut all: Vec<usize> = train.iter().chain(test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..100).collect::<Vec<_>>());
        }
        assert_eq!(s, p.splits(100).unwrap());
        assert_ne!(s[0], s[1]);
        assert!(matches!(p.splits(5), Err(Error::Protocol(_))));
    }

    #[test]
    fn oracle_predictor_scores_one() {
        let mos: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * 2.0 + 3.0).collect();
        let report = run_split_protocol(
            mos.len(),
            &SplitProtocol::new(3),
            |_, _| Ok(()),
            |_, test| {
                let m: Vec<f64> = test.iter().map(|&i| mos[i]).collect();
                ScoreTable::new(m.clone(), m)
            },
        )
        .unwrap();
        assert_eq!(report.splits.len(), 10);
        assert!((report.mean_srcc - 1.0).abs() < 1e-12 && (report.mean_plcc - 1.0).abs() < 1e-12);
        let md = report.to_markdown("oracle");
        assert_eq!(md.lines().count(), 13);
        assert!(md.contains("| **oracle (mean)** | 1.000 | 1.000 |"));
    }

    fn arb_table() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..=30).prop_flat_map(|n| {
            (
                proptest::collection::vec((0i32..8).prop_map(|v| v as f64 * 0.5), n),
                proptest::collection::vec(-5.0f64..5.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn matches_bruteforce((x, y) in arb_table()) {
            let t = table(&x, &y);
            let (rx, ry) = (oracle_ranks(&x), oracle_ranks(&y));
            match srcc(&t) {
                Ok(v) => prop_assert!((v - oracle_pearson(&rx, &ry)).abs() < 1e-12),
                Err(_) => prop_assert!(rx.iter().all(|r| *r == rx[0]) || ry.iter().all(|r| *r == ry[0])),
            }
            if let Ok(v) = plcc(&t) {
                prop_assert!((v - oracle_pearson(&x, &y)).abs() < 1e-12);
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
            }
        }

        #[test]
        fn srcc_rank_invariance(x in proptest::collection::vec(-3.0f64..3.0, 3..30), seed in 0u64..1000) {
            let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v + ((i as u64 + seed) % 5) as f64).collect();
            let t = table(&x, &y);
            let warped = table(&x.iter().map(|v| v.powi(3) + 2.0 * v).collect::<Vec<_>>(), &y.iter().map(|v| v.exp()).collect::<Vec<_>>());
            if let (Ok(a), Ok(b)) = (srcc(&t), srcc(&warped)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn plcc_affine_invariance(x in proptest::collection::vec(-3.0f64..3.0, 3..30), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let y: Vec<f64> = x.iter().map(|v| v.sin()).collect();
            if let Ok(p) = plcc(&table(&x, &y)) {
                let scaled: Vec<f64> = x.iter().map(|v| a * v + b).collect();
                prop_assert!((plcc(&table(&scaled, &y)).unwrap() - p).abs() < 1e-9);
                let flipped: Vec<f64> = x.iter().map(|v| -a * v + b).collect();
                prop_assert!((plcc(&table(&flipped, &y)).unwrap() + p).abs() < 1e-9);
            }
        }
    }
}
