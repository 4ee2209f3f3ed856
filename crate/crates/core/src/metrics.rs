//! Inter-rater reliability statistics.
//!
//! Scores are class labels in `0..k`. All kappas are computed from a
//! [`ConfusionMatrix`] so that the engine-vs-human comparison and the
//! rater-vs-rater comparison share one code path.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
    total: u64,
}

impl ConfusionMatrix {
    /// Builds a matrix from explicit counts (row = rater A, column = rater B).
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|r| r.len() != k) {
            return Err(Error::shape("confusion", &[k, k], &[counts.first().map_or(0, Vec::len)]));
        }
        let flat: Vec<u64> = counts.into_iter().flatten().collect();
        let total = flat.iter().sum();
        Ok(ConfusionMatrix { k, counts: flat, total })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.k + j]
    }

    pub fn to_rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn transpose(&self) -> Self {
        let k = self.k;
        let mut counts = vec![0; k * k];
        for i in 0..k {
            for j in 0..k {
                counts[j * k + i] = self.counts[i * k + j];
            }
        }
        ConfusionMatrix { k, counts, total: self.total }
    }

    fn require_mass(&self) -> Result<f64> {
        if self.total == 0 {
            Err(Error::Empty("confusion matrix has no observations".into()))
        } else {
            Ok(self.total as f64)
        }
    }

    /// Proportion `x[i][j]`.
    pub fn proportion(&self, i: usize, j: usize) -> f64 {
        self.count(i, j) as f64 / self.total as f64
    }

    /// Row (rater A) and column (rater B) marginal proportions.
    pub fn marginals(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.total as f64;
        let mut rows = vec![0.0; self.k];
        let mut cols = vec![0.0; self.k];
        for i in 0..self.k {
            for j in 0..self.k {
                let c = self.count(i, j) as f64 / n;
                rows[i] += c;
                cols[j] += c;
            }
        }
        (rows, cols)
    }
}

/// Tabulates paired scores into a `k × k` matrix.
pub fn confusion(a: &[usize], b: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if a.len() != b.len() {
        return Err(Error::shape("confusion", &[a.len()], &[b.len()]));
    }
    if a.is_empty() {
        return Err(Error::Empty("no score pairs".into()));
    }
    let mut counts = vec![0u64; k * k];
    for (&x, &y) in a.iter().zip(b) {
        if x >= k || y >= k {
            return Err(Error::OutOfRange(format!("score pair ({x}, {y}) outside 0..{k}")));
        }
        counts[x * k + y] += 1;
    }
    Ok(ConfusionMatrix { k, counts, total: a.len() as u64 })
}

/// Fraction of pairs on the diagonal.
pub fn exact_agreement(m: &ConfusionMatrix) -> Result<f64> {
    let n = m.require_mass()?;
    let diag: u64 = (0..m.k).map(|i| m.count(i, i)).sum();
    Ok(diag as f64 / n)
}

/// Cohen's (unweighted) kappa.
pub fn cohen_kappa(m: &ConfusionMatrix) -> Result<f64> {
    m.require_mass()?;
    let p_o = exact_agreement(m)?;
    let (rows, cols) = m.marginals();
    let p_e: f64 = rows.iter().zip(&cols).map(|(r, c)| r * c).sum();
    if (1.0 - p_e).abs() <= f64::EPSILON {
        return Err(Error::UndefinedKappa("chance agreement is 1".into()));
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

fn disagreement_weight(i: usize, j: usize, k: usize) -> f64 {
    let d = i as f64 - j as f64;
    let span = (k - 1) as f64;
    d * d / (span * span)
}

/// Quadratic weighted kappa: `1 − Σ w·O / Σ w·E` with `w = (i−j)²/(k−1)²`.
pub fn qwk(m: &ConfusionMatrix) -> Result<f64> {
    m.require_mass()?;
    if m.k < 2 {
        return Err(Error::Param("quadratic weighted kappa needs k >= 2".into()));
    }
    let (rows, cols) = m.marginals();
    let mut observed = 0.0;
    let mut expected = 0.0;
    for i in 0..m.k {
        for j in 0..m.k {
            let w = disagreement_weight(i, j, m.k);
            observed += w * m.proportion(i, j);
            expected += w * rows[i] * cols[j];
        }
    }
    if expected <= 0.0 {
        return Err(Error::UndefinedKappa("expected weighted disagreement is 0".into()));
    }
    Ok(1.0 - observed / expected)
}

/// The agreement-weighted form `1 − Σ w·x / Σ m·x` with
/// `w = 1 − (i−j)²/(k−1)²` and `m = x(1−x)`.
///
/// Nonstandard: it does not equal 1 under perfect agreement. Kept only to
/// study how it differs from [`qwk`].
pub fn qwk_agreement_weighted(m: &ConfusionMatrix) -> Result<f64> {
    m.require_mass()?;
    if m.k < 2 {
        return Err(Error::Param("weighted kappa needs k >= 2".into()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..m.k {
        for j in 0..m.k {
            let x = m.proportion(i, j);
            num += (1.0 - disagreement_weight(i, j, m.k)) * x;
            den += x * (1.0 - x) * x;
        }
    }
    if den == 0.0 {
        return Err(Error::UndefinedKappa("literal denominator is 0".into()));
    }
    Ok(1.0 - num / den)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum QwkVariant {
    #[default]
    Standard,
    AgreementWeighted,
}

impl QwkVariant {
    pub fn compute(self, m: &ConfusionMatrix) -> Result<f64> {
        match self {
            QwkVariant::Standard => qwk(m),
            QwkVariant::AgreementWeighted => qwk_agreement_weighted(m),
        }
    }
}

impl std::str::FromStr for QwkVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(QwkVariant::Standard),
            "agreement-weighted" => Ok(QwkVariant::AgreementWeighted),
            other => Err(Error::Config(format!("unknown qwk variant {other:?} (standard | agreement-weighted)"))),
        }
    }
}

/// Engine-vs-human agreement on one item.
#[derive(Clone, Debug, PartialEq)]
pub struct AgreementReport {
    pub n: usize,
    /// qwk(predicted, initial)
    pub qwk_engine: f64,
    /// qwk(reliability, initial)
    pub qwk_human: f64,
    pub acc_engine: f64,
    pub acc_human: f64,
}

impl AgreementReport {
    pub fn engine_at_least_human(&self) -> bool {
        self.qwk_engine >= self.qwk_human
    }
}

pub fn compare_engine_to_human(
    initial: &[usize],
    reliability: &[usize],
    predicted: &[usize],
    k: usize,
) -> Result<AgreementReport> {
    compare_engine_to_human_with(initial, reliability, predicted, k, QwkVariant::Standard)
}

pub fn compare_engine_to_human_with(
    initial: &[usize],
    reliability: &[usize],
    predicted: &[usize],
    k: usize,
    variant: QwkVariant,
) -> Result<AgreementReport> {
    if initial.len() != predicted.len() {
        return Err(Error::shape("compare", &[initial.len()], &[predicted.len()]));
    }
    let engine = confusion(predicted, initial, k)?;
    let human = confusion(reliability, initial, k)?;
    Ok(AgreementReport {
        n: initial.len(),
        qwk_engine: variant.compute(&engine)?,
        qwk_human: variant.compute(&human)?,
        acc_engine: exact_agreement(&engine)?,
        acc_human: exact_agreement(&human)?,
    })
}

pub const REPORT_HEADER: &str = "item\tn\tqwk_engine\tqwk_human\tacc_engine\tacc_human";

/// TSV with one row per item, in the given order.
pub fn report_tsv(rows: &[(i64, AgreementReport)]) -> String {
    let mut out = String::new();
    writeln!(out, "{REPORT_HEADER}").unwrap();
    for (item, r) in rows {
        writeln!(
            out,
            "{item}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            r.n, r.qwk_engine, r.qwk_human, r.acc_engine, r.acc_human
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[u64]]) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let c = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(c, m(&[&[1, 0, 0], &[0, 1, 0], &[0, 0, 1]]));
        let c = confusion(&[0, 0, 1, 1, 0, 1], &[0, 1, 1, 0, 0, 1], 2).unwrap();
        assert_eq!(c.to_rows(), vec![vec![2, 1], vec![1, 2]]);
        assert!(matches!(confusion(&[0], &[5], 3), Err(Error::OutOfRange(_))));
        assert!(confusion(&[0, 1], &[0], 3).is_err());
    }

    #[test]
    fn exact_agreement_examples() {
        assert_eq!(exact_agreement(&m(&[&[1, 0, 0], &[0, 1, 0], &[0, 0, 1]])).unwrap(), 1.0);
        let a = exact_agreement(&m(&[&[2, 1], &[1, 2]])).unwrap();
        assert!((a - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(exact_agreement(&m(&[&[0, 3], &[2, 0]])).unwrap(), 0.0);
        assert!(exact_agreement(&m(&[&[0, 0], &[0, 0]])).is_err());
    }

    #[test]
    fn cohen_kappa_examples() {
        assert_eq!(cohen_kappa(&m(&[&[5, 0], &[0, 5]])).unwrap(), 1.0);
        let k = cohen_kappa(&m(&[&[2, 1], &[1, 2]])).unwrap();
        assert!((k - 1.0 / 3.0).abs() < 1e-12);
        assert!(matches!(cohen_kappa(&m(&[&[4, 0], &[0, 0]])), Err(Error::UndefinedKappa(_))));
    }

    #[test]
    fn qwk_examples() {
        assert_eq!(qwk(&m(&[&[3, 0, 0], &[0, 1, 0], &[0, 0, 2]])).unwrap(), 1.0);
        let q = qwk(&m(&[&[2, 1], &[1, 2]])).unwrap();
        assert!((q - 1.0 / 3.0).abs() < 1e-12);
        // B = k-1-A, balanced over 3 classes
        let rev = confusion(&[0, 1, 2], &[2, 1, 0], 3).unwrap();
        assert!(qwk(&rev).unwrap() < 0.0);
        assert!(matches!(qwk(&m(&[&[0, 0], &[0, 7]])), Err(Error::UndefinedKappa(_))));
    }

    #[test]
    fn literal_variant_is_not_one_on_agreement() {
        let c = m(&[&[2, 0], &[0, 2]]);
        let v = qwk_agreement_weighted(&c).unwrap();
        assert!((v - 1.0).abs() > 0.1, "{v}");
    }

    #[test]
    fn engine_vs_human_examples() {
        let initial = [0, 1, 2, 2, 1, 0, 3];
        let reliability = [0, 1, 1, 2, 2, 0, 3];
        let r = compare_engine_to_human(&initial, &reliability, &initial, 4).unwrap();
        assert_eq!(r.qwk_engine, 1.0);
        assert!(r.engine_at_least_human());
        let r = compare_engine_to_human(&initial, &reliability, &reliability, 4).unwrap();
        assert!((r.qwk_engine - r.qwk_human).abs() < 1e-12);
    }

    #[test]
    fn report_tsv_layout() {
        let r = AgreementReport { n: 3, qwk_engine: 1.0, qwk_human: 0.5, acc_engine: 1.0, acc_human: 0.25 };
        let tsv = report_tsv(&[(1, r)]);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], REPORT_HEADER);
        assert_eq!(lines[1], "1\t3\t1.000000\t0.500000\t1.000000\t0.250000");
    }
}
