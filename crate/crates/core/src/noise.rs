//! Superimposed-noise diagnostics over a ledger of rank-one edits.
//!
//! Every quantity is computed from the `(α, β, k)` triples directly, using
//! `Δᵢ k = (kᵀβᵢ) αᵢ`; full update matrices are never materialized.
//! Edit indices are 1-based, matching the order edits were applied.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::editor::EditOutcome;
use crate::error::{EditError, Result};
use crate::linalg::{serde_mat, serde_vec};

pub const LEDGER_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub index: usize,
    #[serde(with = "serde_vec")]
    pub alpha: DVector<f64>,
    #[serde(with = "serde_vec")]
    pub beta: DVector<f64>,
    #[serde(with = "serde_vec")]
    pub key: DVector<f64>,
    pub constrained: bool,
}

/// Append-only record of applied edits plus the pre-edit weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EditLedger {
    initial_w: DMatrix<f64>,
    entries: Vec<LedgerEntry>,
}

impl EditLedger {
    pub fn new(initial_w: DMatrix<f64>) -> Self {
        Self {
            initial_w,
            entries: Vec::new(),
        }
    }

    pub fn initial_w(&self) -> &DMatrix<f64> {
        &self.initial_w
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, key: DVector<f64>, outcome: &EditOutcome) {
        self.entries.push(LedgerEntry {
            index: self.entries.len() + 1,
            alpha: outcome.alpha.clone(),
            beta: outcome.beta.clone(),
            key,
            constrained: outcome.constrained,
        });
    }

    /// `Σ αᵢ βᵢᵀ` over the first `len` entries, summed in insertion order.
    pub fn accumulated_update(&self, len: usize) -> DMatrix<f64> {
        let mut acc = DMatrix::zeros(self.initial_w.nrows(), self.initial_w.ncols());
        for entry in &self.entries[..len.min(self.entries.len())] {
            acc += &entry.alpha * entry.beta.transpose();
        }
        acc
    }

    /// JSON-lines: a header `{schema_version, initial_W}` then one record per edit.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let header = LedgerHeader {
            schema_version: LEDGER_SCHEMA_VERSION,
            initial_w: self.initial_w.clone(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for entry in &self.entries {
            serde_json::to_writer(&mut out, entry)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()));
        let header: LedgerHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(EditError::Empty("ledger file")),
        };
        if header.schema_version != LEDGER_SCHEMA_VERSION {
            return Err(EditError::SchemaVersion {
                expected: LEDGER_SCHEMA_VERSION,
                found: header.schema_version,
            });
        }
        let mut ledger = EditLedger::new(header.initial_w);
        for line in lines {
            let entry: LedgerEntry = serde_json::from_str(&line?)?;
            if entry.index != ledger.len() + 1 {
                return Err(EditError::InvalidConfig(format!(
                    "ledger record {} out of order (expected {})",
                    entry.index,
                    ledger.len() + 1
                )));
            }
            ledger.entries.push(entry);
        }
        Ok(ledger)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut out = std::io::BufWriter::new(file);
        self.write_jsonl(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }
}

#[derive(Serialize, Deserialize)]
struct LedgerHeader {
    schema_version: u32,
    #[serde(rename = "initial_W", with = "serde_mat")]
    initial_w: DMatrix<f64>,
}

fn check_index(entries: &[LedgerEntry], e: usize) -> Result<()> {
    if e == 0 || e > entries.len() {
        return Err(EditError::IndexOutOfRange {
            index: e,
            len: entries.len(),
        });
    }
    Ok(())
}

/// `Σᵢ Δᵢ k` for the given key.
fn summed_response(entries: &[LedgerEntry], key: &DVector<f64>) -> DVector<f64> {
    let mut acc = DVector::zeros(entries.first().map_or(0, |x| x.alpha.len()));
    for entry in entries {
        acc.axpy(key.dot(&entry.beta), &entry.alpha, 1.0);
    }
    acc
}

/// Superimposed noise on edit `e`: `‖Σᵢ Δᵢ k_e‖² − ‖Δ_e k_e‖²`.
///
/// Negative values (destructive interference) are returned unchanged.
pub fn noise_for_edit(entries: &[LedgerEntry], e: usize) -> Result<f64> {
    check_index(entries, e)?;
    let target = &entries[e - 1];
    let total = summed_response(entries, &target.key);
    let own = &target.alpha * target.key.dot(&target.beta);
    Ok(total.norm_squared() - own.norm_squared())
}

/// Same quantity as [`noise_for_edit`], as the explicit double sum
/// `Σ_{(i,j)≠(e,e)} (k_eᵀβᵢ)(αᵢᵀαⱼ)(βⱼᵀk_e)`.
pub fn noise_expansion(entries: &[LedgerEntry], e: usize) -> Result<f64> {
    check_index(entries, e)?;
    let key = &entries[e - 1].key;
    let activation: Vec<f64> = entries.iter().map(|x| key.dot(&x.beta)).collect();
    let mut sum = 0.0;
    for (i, a) in entries.iter().enumerate() {
        for (j, b) in entries.iter().enumerate() {
            if i == e - 1 && j == e - 1 {
                continue;
            }
            sum += activation[i] * a.alpha.dot(&b.alpha) * activation[j];
        }
    }
    Ok(sum)
}

/// Splits the noise an edit sees at the moment it is applied into the
/// accumulated interference from earlier edits and the cross term between
/// the new update and those edits: `(‖Σ_{i<e} Δᵢ k_e‖², 2 Σ_{i<e} (k_eᵀβ_e)(α_eᵀαᵢ)(βᵢᵀk_e))`.
pub fn insertion_noise_terms(entries: &[LedgerEntry], e: usize) -> Result<(f64, f64)> {
    check_index(entries, e)?;
    let current = &entries[e - 1];
    let earlier = &entries[..e - 1];
    let history = summed_response(earlier, &current.key);
    let own_activation = current.key.dot(&current.beta);
    let cross: f64 = earlier
        .iter()
        .map(|x| own_activation * current.alpha.dot(&x.alpha) * x.beta.dot(&current.key))
        .sum();
    Ok((history.norm_squared(), 2.0 * cross))
}

/// Mean of [`noise_for_edit`] over every edit in `entries`.
pub fn average_noise(entries: &[LedgerEntry]) -> Result<f64> {
    if entries.is_empty() {
        return Err(EditError::Empty("ledger"));
    }
    let total: f64 = (1..=entries.len())
        .into_par_iter()
        .map(|e| noise_for_edit(entries, e))
        .collect::<Result<Vec<_>>>()?
        .iter()
        .sum();
    Ok(total / entries.len() as f64)
}

/// Mean off-diagonal activation `kᵢᵀβⱼ`, normalized by `T·(T−1)`.
pub fn mean_cross_activation(entries: &[LedgerEntry]) -> Result<f64> {
    let t = entries.len();
    if t < 2 {
        return Err(EditError::InvalidConfig(format!(
            "cross activation needs at least 2 edits, got {t}"
        )));
    }
    let sum: f64 = entries
        .par_iter()
        .enumerate()
        .map(|(i, a)| {
            entries
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| a.key.dot(&b.beta))
                .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(sum / (t * (t - 1)) as f64)
}

pub const OVERLAP_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapSummary {
    /// Mean of `|αᵢᵀαⱼ| / (‖αᵢ‖‖αⱼ‖)` over the counted pairs.
    pub mean: f64,
    pub max: f64,
    /// Counts over `[0, 1]` in equal-width bins.
    pub histogram: Vec<usize>,
    pub pairs: usize,
    /// 1-based indices of edits with a zero influence vector.
    pub zero_norm: Vec<usize>,
}

/// Normalized influence-vector overlap over all pairs `i < j`.
pub fn influence_overlap(entries: &[LedgerEntry]) -> Result<OverlapSummary> {
    influence_overlap_where(entries, |_| true)
}

/// Like [`influence_overlap`] but only over pairs `i < j` whose later edit
/// `j` (1-based) satisfies `select`.
pub fn influence_overlap_where(
    entries: &[LedgerEntry],
    select: impl Fn(usize) -> bool,
) -> Result<OverlapSummary> {
    if entries.len() < 2 {
        return Err(EditError::InvalidConfig(format!(
            "overlap needs at least 2 edits, got {}",
            entries.len()
        )));
    }
    let norms: Vec<f64> = entries.iter().map(|x| x.alpha.norm()).collect();
    let zero_norm: Vec<usize> = (0..entries.len())
        .filter(|&i| norms[i] == 0.0)
        .map(|i| i + 1)
        .collect();
    let mut histogram = vec![0; OVERLAP_BINS];
    let (mut sum, mut max, mut pairs) = (0.0, 0.0f64, 0usize);
    for j in 0..entries.len() {
        if norms[j] == 0.0 || !select(j + 1) {
            continue;
        }
        for i in 0..j {
            if norms[i] == 0.0 {
                continue;
            }
            let c = (entries[i].alpha.dot(&entries[j].alpha) / (norms[i] * norms[j])).abs().min(1.0);
            sum += c;
            max = max.max(c);
            pairs += 1;
            let bin = ((c * OVERLAP_BINS as f64) as usize).min(OVERLAP_BINS - 1);
            histogram[bin] += 1;
        }
    }
    Ok(OverlapSummary {
        mean: if pairs > 0 { sum / pairs as f64 } else { 0.0 },
        max,
        histogram,
        pairs,
        zero_norm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviationBound {
    /// `‖(W + ΣΔᵢ) k_e‖`.
    pub lhs: f64,
    /// `‖W k_e‖ + ‖ΣΔᵢ k_e‖`.
    pub rhs: f64,
}

pub fn deviation_bound(ledger: &EditLedger, e: usize) -> Result<DeviationBound> {
    deviation_bound_prefix(ledger, ledger.len(), e)
}

/// Triangle bound for edit `e` using only the first `len` entries.
pub fn deviation_bound_prefix(ledger: &EditLedger, len: usize, e: usize) -> Result<DeviationBound> {
    let entries = &ledger.entries()[..len.min(ledger.len())];
    check_index(entries, e)?;
    let key = &entries[e - 1].key;
    let base = ledger.initial_w() * key;
    let shift = summed_response(entries, key);
    Ok(DeviationBound {
        lhs: (&base + &shift).norm(),
        rhs: base.norm() + shift.norm(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    pub mean_shift: f64,
    /// `std(post)/std(pre)` per output dimension; NaN where `std(pre) = 0`.
    pub per_dim_std_ratio: Vec<f64>,
    /// Dimensions whose pre-edit spread is zero.
    pub degenerate_dims: Vec<usize>,
}

fn column_mean_std(m: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = m.nrows() as f64;
    let mean = DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n));
    let std = DVector::from_iterator(
        m.ncols(),
        m.column_iter().zip(mean.iter()).map(|(c, &mu)| {
            (c.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n - 1.0)).sqrt()
        }),
    );
    (mean, std)
}

/// Shift of the output distribution between two equally-shaped samples
/// (one row per probe input).
pub fn representation_drift(pre: &DMatrix<f64>, post: &DMatrix<f64>) -> Result<Drift> {
    if pre.shape() != post.shape() {
        return Err(EditError::DimensionMismatch {
            expected: pre.nrows(),
            found: post.nrows(),
            context: "drift sample shapes",
        });
    }
    if pre.nrows() < 2 {
        return Err(EditError::Empty("drift needs at least 2 samples"));
    }
    let (mean_pre, std_pre) = column_mean_std(pre);
    let (mean_post, std_post) = column_mean_std(post);
    let mut degenerate_dims = Vec::new();
    let per_dim_std_ratio = (0..pre.ncols())
        .map(|d| {
            if std_pre[d] == 0.0 {
                degenerate_dims.push(d);
                f64::NAN
            } else {
                std_post[d] / std_pre[d]
            }
        })
        .collect();
    Ok(Drift {
        mean_shift: (mean_post - mean_pre).norm(),
        per_dim_std_ratio,
        degenerate_dims,
    })
}
