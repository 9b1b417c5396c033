//! Combinatorially symmetric cross-validation and the probability of
//! backtest overfitting.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BLOCKS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PboResult {
    pub pbo: f64,
    /// One logit of the selected trial's relative out-of-sample rank per split.
    pub logits: Vec<f64>,
    /// True when every trial scored identically in every split.
    pub degenerate: bool,
    pub blocks: usize,
}

#[derive(Clone, Copy, Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn merge(self, o: Moments) -> Moments {
        if self.n == 0.0 {
            return o;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        Moments {
            n,
            mean: self.mean + d * o.n / n,
            m2: self.m2 + o.m2 + d * d * self.n * o.n / n,
        }
    }

    /// Mean over sample standard deviation; a flat series scores 0 when its
    /// mean is 0 and ±∞ otherwise.
    fn sharpe(self) -> f64 {
        let var = if self.n > 1.0 { self.m2 / (self.n - 1.0) } else { 0.0 };
        if var > 0.0 {
            self.mean / var.sqrt()
        } else if self.mean == 0.0 {
            0.0
        } else {
            self.mean.signum() * f64::INFINITY
        }
    }
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut c: Vec<usize> = (0..k).collect();
    if k > n {
        return out;
    }
    loop {
        out.push(c.clone());
        let Some(i) = (0..k).rev().find(|&i| c[i] != i + n - k) else {
            return out;
        };
        c[i] += 1;
        for j in (i + 1)..k {
            c[j] = c[j - 1] + 1;
        }
    }
}

/// Rank of `scores[idx]` among `scores`, 1 = lowest, ties share the midrank.
fn midrank(scores: &[f64], idx: usize) -> f64 {
    let v = scores[idx];
    let below = scores.iter().filter(|&&s| s < v).count() as f64;
    let equal = scores.iter().filter(|&&s| s == v).count() as f64;
    below + (equal + 1.0) / 2.0
}

/// PBO from precomputed performance scores, one row per split and one
/// column per trial. The in-sample winner is the first column attaining the
/// maximum.
pub fn pbo_from_scores(is_scores: &DMatrix<f64>, oos_scores: &DMatrix<f64>) -> Result<PboResult> {
    if is_scores.shape() != oos_scores.shape() {
        return Err(Error::Dimension("in-sample and out-of-sample scores differ in shape".into()));
    }
    let (splits, trials) = is_scores.shape();
    if trials < 2 || splits == 0 {
        return Err(Error::InsufficientData(format!("PBO needs 2 trials and 1 split, got {trials} and {splits}")));
    }
    if is_scores.iter().chain(oos_scores.iter()).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("pbo_from_scores"));
    }
    let degenerate = (0..splits).all(|s| {
        let a = is_scores[(s, 0)];
        let b = oos_scores[(s, 0)];
        (1..trials).all(|j| is_scores[(s, j)] == a && oos_scores[(s, j)] == b)
    });
    if degenerate {
        return Ok(PboResult {
            pbo: 0.5,
            logits: vec![0.0; splits],
            degenerate: true,
            blocks: 0,
        });
    }
    let mut logits = Vec::with_capacity(splits);
    for s in 0..splits {
        let is_row: Vec<f64> = is_scores.row(s).iter().copied().collect();
        let best = (0..trials).fold(0, |b, j| if is_row[j] > is_row[b] { j } else { b });
        let oos_row: Vec<f64> = oos_scores.row(s).iter().copied().collect();
        let w = midrank(&oos_row, best) / (trials as f64 + 1.0);
        logits.push((w / (1.0 - w)).ln());
    }
    let pbo = logits.iter().filter(|&&l| l <= 0.0).count() as f64 / splits as f64;
    Ok(PboResult {
        pbo,
        logits,
        degenerate: false,
        blocks: 0,
    })
}

/// CSCV over `returns` (periods × trials) split into `blocks` contiguous,
/// near-equal row blocks. Every half of the blocks serves once as the
/// in-sample set with the rest out of sample; trials are scored by SR.
pub fn cscv_pbo(returns: &DMatrix<f64>, blocks: usize) -> Result<PboResult> {
    let (t, trials) = returns.shape();
    if blocks < 2 || blocks % 2 != 0 {
        return Err(Error::invalid(format!("CSCV block count {blocks} must be even and at least 2")));
    }
    if blocks > t {
        return Err(Error::invalid(format!("CSCV block count {blocks} exceeds {t} periods")));
    }
    if trials < 2 {
        return Err(Error::InsufficientData(format!("CSCV needs 2 trials, got {trials}")));
    }
    if returns.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cscv_pbo"));
    }
    let stats: Vec<Vec<Moments>> = (0..blocks)
        .map(|b| {
            let (lo, hi) = (b * t / blocks, (b + 1) * t / blocks);
            (0..trials)
                .map(|j| {
                    let col = returns.view((lo, j), (hi - lo, 1));
                    let n = (hi - lo) as f64;
                    let mean = col.sum() / n;
                    let m2 = col.iter().map(|r| (r - mean) * (r - mean)).sum();
                    Moments { n, mean, m2 }
                })
                .collect()
        })
        .collect();
    let combos = combinations(blocks, blocks / 2);
    let score = |set: &[usize]| -> Vec<f64> {
        (0..trials)
            .map(|j| set.iter().fold(Moments::default(), |m, &b| m.merge(stats[b][j])).sharpe())
            .collect()
    };
    let rows: Vec<(Vec<f64>, Vec<f64>)> = combos
        .par_iter()
        .map(|is_set| {
            let oos_set: Vec<usize> = (0..blocks).filter(|b| !is_set.contains(b)).collect();
            (score(is_set), score(&oos_set))
        })
        .collect();
    let is_scores = DMatrix::from_fn(rows.len(), trials, |r, c| rows[r].0[c]);
    let oos_scores = DMatrix::from_fn(rows.len(), trials, |r, c| rows[r].1[c]);
    let mut res = pbo_from_scores(&is_scores, &oos_scores)?;
    res.blocks = blocks;
    Ok(res)
}
