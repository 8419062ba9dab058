//! Protocol-level bookkeeping: detection matrices, QBER extraction, the
//! d-dimensional channel entropy, analytic secret-key rates, thresholds, and
//! basis sifting.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::mubs::MubSet;
use crate::{Error, Result};

/// How a detection matrix came to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Raw,
    TargetCorrected,
    Theoretical,
    Simulated,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Provenance::Raw => "raw",
            Provenance::TargetCorrected => "target_corrected",
            Provenance::Theoretical => "theoretical",
            Provenance::Simulated => "simulated",
        };
        write!(f, "{s}")
    }
}

/// Detection probabilities for every (sent state, projector) pair: a 2d×2d
/// matrix of two d×d blocks per side, rows = preparations, columns =
/// projectors, first d indices in one basis and the last d in the other.
///
/// Row/column ordering follows the labels as given (measured data sometimes
/// arrives with states permuted within a basis); the label lists carry that
/// permutation explicitly, and the diagonal is trusted only because
/// construction enforces `row_labels == col_labels`.
#[derive(Debug, Clone)]
pub struct DetectionMatrix {
    d: usize,
    row_labels: Vec<String>,
    col_labels: Vec<String>,
    probs: DMatrix<f64>,
    provenance: Provenance,
}

/// Slack allowed on published/measured block-row sums (3-decimal rounding).
const ROW_SUM_TOL: f64 = 5e-3;

impl DetectionMatrix {
    /// Wraps a probability matrix. Entries must lie in [0, 1+ε]; each d-wide
    /// block row must sum to 1 within a rounding tolerance; the i-th row and
    /// column must carry the same state label.
    pub fn new(
        d: usize,
        row_labels: Vec<String>,
        col_labels: Vec<String>,
        probs: DMatrix<f64>,
        provenance: Provenance,
    ) -> Result<Self> {
        let n = 2 * d;
        if probs.nrows() != n || probs.ncols() != n {
            return Err(Error::BasisMismatch(format!(
                "expected {n}×{n} probabilities, got {}×{}",
                probs.nrows(),
                probs.ncols()
            )));
        }
        if row_labels.len() != n || col_labels.len() != n {
            return Err(Error::BasisMismatch(format!(
                "expected {n} row and column labels, got {} and {}",
                row_labels.len(),
                col_labels.len()
            )));
        }
        for i in 0..n {
            if row_labels[i] != col_labels[i] {
                return Err(Error::BasisMismatch(format!(
                    "row {i} is {} but column {i} is {}; the diagonal must pair \
                     identical states",
                    row_labels[i], col_labels[i]
                )));
            }
        }
        for (idx, &p) in probs.iter().enumerate() {
            if !(-1e-12..=1.0 + 1e-9).contains(&p) {
                return Err(Error::InvalidArgument(format!(
                    "probability entry {idx} out of range: {p}"
                )));
            }
        }
        for row in 0..n {
            for blk in 0..2 {
                let sum: f64 = (0..d).map(|j| probs[(row, blk * d + j)]).sum();
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::NotNormalized {
                        context: format!("block row ({}, block {blk})", row_labels[row]),
                        deviation: (sum - 1.0).abs(),
                    });
                }
            }
        }
        Ok(DetectionMatrix {
            d,
            row_labels,
            col_labels,
            probs,
            provenance,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn row_labels(&self) -> &[String] {
        &self.row_labels
    }

    pub fn col_labels(&self) -> &[String] {
        &self.col_labels
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    pub fn prob(&self, row: usize, col: usize) -> f64 {
        self.probs[(row, col)]
    }

    /// Same matrix with every d-wide block row rescaled to sum exactly 1.
    pub fn normalized(&self) -> Self {
        let mut probs = self.probs.clone();
        let n = 2 * self.d;
        for row in 0..n {
            for blk in 0..2 {
                let sum: f64 = (0..self.d).map(|j| probs[(row, blk * self.d + j)]).sum();
                for j in 0..self.d {
                    probs[(row, blk * self.d + j)] /= sum;
                }
            }
        }
        DetectionMatrix {
            probs,
            ..self.clone()
        }
    }

    /// The confusion distribution over received symbols for a sent symbol,
    /// averaged over the two same-basis blocks and normalized — the channel
    /// the encryption demo resamples from.
    pub fn confusion_row(&self, symbol: usize) -> Result<Vec<f64>> {
        if symbol >= self.d {
            return Err(Error::InvalidArgument(format!(
                "symbol {symbol} out of range for d={}",
                self.d
            )));
        }
        let d = self.d;
        let mut row: Vec<f64> = (0..d)
            .map(|j| 0.5 * (self.probs[(symbol, j)] + self.probs[(d + symbol, d + j)]))
            .collect();
        let sum: f64 = row.iter().sum();
        for p in &mut row {
            *p /= sum;
        }
        Ok(row)
    }
}

/// QBER summary of one detection matrix.
#[derive(Debug, Clone, Serialize)]
pub struct QberReport {
    pub d: usize,
    /// 1 − mean of all 2d same-basis diagonal elements.
    pub q: f64,
    /// The same average restricted to each preparation basis.
    pub per_basis: [f64; 2],
    pub provenance: Provenance,
}

/// QBER: one minus the average of the on-diagonal elements of the two
/// same-basis blocks.
pub fn qber(matrix: &DetectionMatrix) -> QberReport {
    let d = matrix.d();
    let mean_block = |blk: usize| -> f64 {
        (0..d).map(|i| matrix.prob(blk * d + i, blk * d + i)).sum::<f64>() / d as f64
    };
    let m0 = mean_block(0);
    let m1 = mean_block(1);
    QberReport {
        d,
        q: 1.0 - 0.5 * (m0 + m1),
        per_basis: [1.0 - m0, 1.0 - m1],
        provenance: matrix.provenance(),
    }
}

fn xlog2(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.log2()
    }
}

/// The d-ary channel entropy
/// h_d(Q) = −Q·log₂(Q/(d−1)) − (1−Q)·log₂(1−Q), on Q ∈ [0, (d−1)/d].
pub fn entropy_d(q: f64, d: usize) -> Result<f64> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!("dimension {d} < 2")));
    }
    let qmax = (d as f64 - 1.0) / d as f64;
    if !(0.0..=qmax + 1e-12).contains(&q) {
        return Err(Error::InvalidArgument(format!(
            "error rate {q} outside [0, {qmax:.4}] for d={d}"
        )));
    }
    let dm1 = d as f64 - 1.0;
    Ok(-xlog2(q) + q * dm1.log2() - xlog2(1.0 - q))
}

/// How a key rate was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RateMethod {
    Analytic,
    DualNumeric,
}

/// A secret-key rate in bits per sifted photon.
#[derive(Debug, Clone, Serialize)]
pub struct KeyRate {
    pub d: usize,
    pub q: f64,
    pub r: f64,
    pub method: RateMethod,
}

/// One-way analytic rate R(Q) = log₂(d) − 2·h_d(Q). Negative values mean no
/// distillable key at this error rate.
pub fn key_rate_analytic(q: f64, d: usize) -> Result<KeyRate> {
    let h = entropy_d(q, d)?;
    Ok(KeyRate {
        d,
        q,
        r: (d as f64).log2() - 2.0 * h,
        method: RateMethod::Analytic,
    })
}

/// The error rate where R(Q) crosses zero, by bisection to 1e-6.
pub fn threshold_q0(d: usize) -> Result<f64> {
    let qmax = (d as f64 - 1.0) / d as f64;
    let rate = |q: f64| key_rate_analytic(q, d).map(|k| k.r);
    let mut lo = 0.0;
    let mut hi = qmax;
    if rate(lo)? <= 0.0 || rate(hi)? >= 0.0 {
        return Err(Error::Convergence(
            "key rate does not bracket a zero crossing".into(),
        ));
    }
    while hi - lo > 1e-6 {
        let mid = 0.5 * (lo + hi);
        if rate(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Error-rate ceiling of the d = 4 protocol when two-way post-processing is
/// allowed; the bound itself is quoted, not derived here.
pub fn two_way_threshold_d4() -> f64 {
    0.315
}

/// Positions kept after basis reconciliation, with the symbol pair at each.
#[derive(Debug, Clone, Serialize)]
pub struct SiftResult {
    pub pairs: Vec<(u8, u8)>,
    pub ratio: f64,
}

/// Keeps only the positions where both parties chose the same basis.
pub fn sift(
    alice_bases: &[u8],
    bob_bases: &[u8],
    outcomes: &[(u8, u8)],
) -> Result<SiftResult> {
    if alice_bases.len() != bob_bases.len() || alice_bases.len() != outcomes.len() {
        return Err(Error::BasisMismatch(format!(
            "sequence lengths differ: {} bases vs {} bases vs {} outcomes",
            alice_bases.len(),
            bob_bases.len(),
            outcomes.len()
        )));
    }
    if alice_bases.is_empty() {
        return Err(Error::InvalidArgument("empty transmission".into()));
    }
    let pairs: Vec<(u8, u8)> = alice_bases
        .iter()
        .zip(bob_bases)
        .zip(outcomes)
        .filter(|((a, b), _)| a == b)
        .map(|(_, &o)| o)
        .collect();
    let ratio = pairs.len() as f64 / alice_bases.len() as f64;
    Ok(SiftResult { pairs, ratio })
}

/// The ideal detection matrix of a MUB pair: Born probabilities of every
/// (sent, projected) combination — identity blocks on the diagonal, flat
/// 1/d blocks off it.
pub fn theoretical_matrix(mubs: &MubSet) -> DetectionMatrix {
    let d = mubs.d();
    let n = 2 * d;
    let mut probs = DMatrix::<f64>::zeros(n, n);
    let mut labels = Vec::with_capacity(n);
    for b in 0..2 {
        for i in 0..d {
            labels.push(mubs.label(b, i).to_string());
        }
    }
    for br in 0..2 {
        for i in 0..d {
            for bc in 0..2 {
                for j in 0..d {
                    let sent = mubs.state(br, i).expect("index in range");
                    let proj = mubs.state(bc, j).expect("index in range");
                    probs[(br * d + i, bc * d + j)] = sent.fidelity(proj);
                }
            }
        }
    }
    DetectionMatrix::new(d, labels.clone(), labels, probs, Provenance::Theoretical)
        .expect("Born probabilities are normalized")
}
