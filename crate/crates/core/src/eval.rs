//! Efficacy, generalization and specificity over the toy readout, in the
//! argmax ("top") and pairwise-probability ("larger") variants.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EditError, Result};
use crate::world::{argmax, token_probs, Fact, FactUniverse};

/// Default cap on the number of unrelated probe keys.
pub const MAX_PROBES: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub efficacy_top: f64,
    pub generalization_top: f64,
    pub specificity_top: f64,
    pub efficacy_larger: f64,
    pub generalization_larger: f64,
    pub specificity_larger: f64,
    pub n_evaluated: usize,
}

/// Unrelated prompts: pool keys that are never edited, with the token the
/// pre-edit layer predicted for each.
#[derive(Debug, Clone, PartialEq)]
pub struct UnrelatedProbes {
    pub keys: Vec<DVector<f64>>,
    pub pre_tokens: Vec<usize>,
}

impl UnrelatedProbes {
    pub fn new(keys: Vec<DVector<f64>>, pre_w: &DMatrix<f64>, embed: &DMatrix<f64>) -> Result<Self> {
        let pre_tokens = keys
            .iter()
            .map(|k| Ok(argmax(&token_probs(pre_w, k, embed)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { keys, pre_tokens })
    }

    /// First `min(n_facts, 500)` pool rows, labelled by `pre_w`.
    pub fn from_universe(universe: &FactUniverse, pre_w: &DMatrix<f64>) -> Result<Self> {
        let count = universe.facts.len().min(MAX_PROBES);
        Self::new(universe.probe_keys(count), pre_w, &universe.embed)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

struct Counts {
    hits: usize,
    total: usize,
}

impl Counts {
    fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }
}

fn count_where<T: Sync>(items: &[T], pred: impl Fn(&T) -> Result<bool> + Sync + Send) -> Result<Counts> {
    let flags = items.par_iter().map(pred).collect::<Result<Vec<bool>>>()?;
    Ok(Counts {
        hits: flags.iter().filter(|&&f| f).count(),
        total: flags.len(),
    })
}

fn check_inputs(facts: &[&Fact], probes: &UnrelatedProbes) -> Result<()> {
    if facts.is_empty() {
        return Err(EditError::Empty("edited fact set"));
    }
    if probes.is_empty() {
        return Err(EditError::Empty("unrelated probes"));
    }
    Ok(())
}

fn rephrase_pairs<'a>(facts: &[&'a Fact]) -> Vec<(&'a Fact, &'a DVector<f64>)> {
    facts
        .iter()
        .flat_map(|f| f.rephrase_keys.iter().map(move |k| (*f, k)))
        .collect()
}

/// Probe `j` is paired with edited fact `j`, for `j < min(|facts|, |probes|)`.
fn probe_pairs<'a>(facts: &[&'a Fact], probes: &'a UnrelatedProbes) -> Vec<(usize, &'a Fact)> {
    (0..facts.len().min(probes.len())).map(|j| (j, facts[j])).collect()
}

/// `(efficacy, generalization, specificity)` by argmax.
pub fn metrics_top(
    w: &DMatrix<f64>,
    embed: &DMatrix<f64>,
    facts: &[&Fact],
    probes: &UnrelatedProbes,
) -> Result<(f64, f64, f64)> {
    check_inputs(facts, probes)?;
    let predicts = |k: &DVector<f64>, token: usize| -> Result<bool> {
        Ok(argmax(&token_probs(w, k, embed)?) == token)
    };
    let eff = count_where(facts, |f| predicts(&f.key, f.target_token))?;
    let gen = count_where(&rephrase_pairs(facts), |(f, k)| predicts(k, f.target_token))?;
    let spe = count_where(&probe_pairs(facts, probes), |&(j, _)| {
        predicts(&probes.keys[j], probes.pre_tokens[j])
    })?;
    Ok((eff.rate(), gen.rate(), spe.rate()))
}

/// `(efficacy, generalization, specificity)` by strict pairwise probability
/// comparison: target over original for edited prompts, pre-edit token over
/// the paired fact's target for unrelated prompts.
pub fn metrics_larger(
    w: &DMatrix<f64>,
    embed: &DMatrix<f64>,
    facts: &[&Fact],
    probes: &UnrelatedProbes,
) -> Result<(f64, f64, f64)> {
    check_inputs(facts, probes)?;
    let prefers = |k: &DVector<f64>, winner: usize, loser: usize| -> Result<bool> {
        let p = token_probs(w, k, embed)?;
        Ok(p[winner] > p[loser])
    };
    let eff = count_where(facts, |f| prefers(&f.key, f.target_token, f.original_token))?;
    let gen = count_where(&rephrase_pairs(facts), |(f, k)| {
        prefers(k, f.target_token, f.original_token)
    })?;
    let spe = count_where(&probe_pairs(facts, probes), |&(j, f)| {
        prefers(&probes.keys[j], probes.pre_tokens[j], f.target_token)
    })?;
    Ok((eff.rate(), gen.rate(), spe.rate()))
}

pub fn evaluate(
    w: &DMatrix<f64>,
    embed: &DMatrix<f64>,
    facts: &[&Fact],
    probes: &UnrelatedProbes,
) -> Result<MetricReport> {
    let (efficacy_top, generalization_top, specificity_top) = metrics_top(w, embed, facts, probes)?;
    let (efficacy_larger, generalization_larger, specificity_larger) =
        metrics_larger(w, embed, facts, probes)?;
    Ok(MetricReport {
        efficacy_top,
        generalization_top,
        specificity_top,
        efficacy_larger,
        generalization_larger,
        specificity_larger,
        n_evaluated: facts.len(),
    })
}
