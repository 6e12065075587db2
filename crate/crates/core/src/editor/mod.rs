//! Sequential rank-one editing of the linear layer.
//!
//! Each edit trains an output residual `R` for the fact's key, picks an
//! activation vector `β` by the configured method, and applies `Δ = R βᵀ`.
//! The deltaedit method additionally projects `R` away from the dominant
//! column space of earlier edits whenever the history excitation crosses a
//! sliding threshold.

mod projector;
mod residual;
mod solver;
mod threshold;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EditError, Result};
use crate::linalg::{self, check_len, serde_mat};
use crate::world::{EditableLayer, Fact};

pub use projector::{build_history_projector, compute_null_projection, rank_cap, HistoryProjector};
pub use residual::{train_residual, train_residual_traced, ResidualFit};
pub use solver::{solve_alpha_beta, solve_memit, solve_null_space_beta};
pub use threshold::{dynamic_threshold, history_excitation, should_constrain, update_threshold_stats};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Memit,
    AlphaEdit,
    DeltaEdit,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Memit, Method::AlphaEdit, Method::DeltaEdit];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Memit => "memit",
            Method::AlphaEdit => "alphaedit",
            Method::DeltaEdit => "deltaedit",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = EditError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "memit" => Ok(Method::Memit),
            "alphaedit" => Ok(Method::AlphaEdit),
            "deltaedit" => Ok(Method::DeltaEdit),
            other => Err(EditError::InvalidConfig(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditConfig {
    pub method: Method,
    /// Threshold width `η` in `t = m + η√v`.
    pub eta: f64,
    /// Sliding-average coefficient `δ`.
    pub delta_coef: f64,
    pub train_steps: usize,
    pub learn_rate: f64,
    /// Residual training stops once the target logit leads by this much.
    pub early_stop_margin: f64,
    pub warmup_edits: usize,
    pub rank_cap_ratio: f64,
    pub eig_zero_rel: f64,
    /// Observations above `m + κ√v` are not folded into the statistics.
    pub outlier_kappa: f64,
    /// Also update the statistics on constrained edits. Off by default.
    pub stats_on_constrained: bool,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            method: Method::DeltaEdit,
            eta: 1.5,
            delta_coef: 0.9,
            train_steps: 25,
            learn_rate: 0.5,
            early_stop_margin: 1.0,
            warmup_edits: 5,
            rank_cap_ratio: 0.75,
            eig_zero_rel: 1e-10,
            outlier_kappa: 10.0,
            stats_on_constrained: false,
        }
    }
}

impl EditConfig {
    pub fn with_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn deltaedit() -> Self {
        Self::with_method(Method::DeltaEdit)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(EditError::InvalidConfig(msg.to_string()));
        if !(0.0..=1.0).contains(&self.delta_coef) {
            return bad("delta_coef must lie in [0,1]");
        }
        if !(self.rank_cap_ratio > 0.0 && self.rank_cap_ratio <= 1.0) {
            return bad("rank_cap_ratio must lie in (0,1]");
        }
        if self.train_steps == 0 {
            return bad("train_steps must be >= 1");
        }
        if !(self.learn_rate > 0.0 && self.learn_rate.is_finite()) {
            return bad("learn_rate must be positive and finite");
        }
        if !(self.eig_zero_rel >= 0.0) {
            return bad("eig_zero_rel must be non-negative");
        }
        if self.eta.is_nan() || self.outlier_kappa.is_nan() {
            return bad("eta and outlier_kappa must be numbers");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditorState {
    pub layer: EditableLayer,
    /// Sum of every applied `α βᵀ`.
    pub delta_history: DMatrix<f64>,
    /// Running `Σ k kᵀ` over edited keys.
    pub kp_gram: DMatrix<f64>,
    /// Projector onto the null space of the preserved-knowledge covariance.
    pub null_proj: DMatrix<f64>,
    pub c0: DMatrix<f64>,
    pub mean_stat: f64,
    pub var_stat: f64,
    pub edit_count: usize,
    pub constraint_activations: usize,
    pub config: EditConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutcome {
    pub alpha: DVector<f64>,
    pub beta: DVector<f64>,
    pub residual: DVector<f64>,
    pub constrained: bool,
    pub history_excitation: f64,
    /// Directions removed by the history projector (0 when unconstrained).
    pub retained_directions: usize,
}

impl EditOutcome {
    pub fn update(&self) -> DMatrix<f64> {
        &self.alpha * self.beta.transpose()
    }
}

impl EditorState {
    pub fn new(w: DMatrix<f64>, c0: DMatrix<f64>, config: EditConfig) -> Result<Self> {
        config.validate()?;
        let (d_out, d_in) = w.shape();
        if c0.shape() != (d_in, d_in) {
            return Err(EditError::DimensionMismatch {
                expected: d_in,
                found: c0.nrows(),
                context: "C0 vs W columns",
            });
        }
        let null_proj = compute_null_projection(&c0, config.eig_zero_rel)?;
        Ok(Self {
            layer: EditableLayer::new(w),
            delta_history: DMatrix::zeros(d_out, d_in),
            kp_gram: DMatrix::zeros(d_in, d_in),
            null_proj,
            c0,
            mean_stat: 0.0,
            var_stat: 0.0,
            edit_count: 0,
            constraint_activations: 0,
            config,
        })
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.layer.w
    }

    pub fn d_in(&self) -> usize {
        self.layer.w.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.layer.w.nrows()
    }

    /// Runs one edit. On error the state is left untouched.
    pub fn apply_edit(&mut self, fact: &Fact, embed: &DMatrix<f64>) -> Result<EditOutcome> {
        let config = self.config.clone();
        let key = &fact.key;
        check_len(key, self.d_in(), "fact key vs editor")?;

        let (constrained, excitation) = should_constrain(self, key, &config);
        let history = if constrained {
            Some(build_history_projector(
                &self.delta_history,
                config.rank_cap_ratio,
                config.eig_zero_rel,
            )?)
        } else {
            None
        };
        let stats = if !constrained || config.stats_on_constrained {
            threshold::guarded_stats_update(self, excitation, &config)
        } else {
            None
        };

        let residual = train_residual(
            &self.layer.w,
            key,
            fact.target_token,
            embed,
            history.as_ref().map(|h| &h.projector),
            &config,
        )?;
        let (alpha, beta) = solve_alpha_beta(&residual, key, self, &config)?;

        let update = &alpha * beta.transpose();
        let w_next = &self.layer.w + &update;
        if !linalg::all_finite_mat(&w_next) {
            return Err(EditError::NonFinite("edited weights"));
        }

        self.layer.w = w_next;
        self.delta_history += &update;
        self.kp_gram += key * key.transpose();
        if let Some((m, v)) = stats {
            self.mean_stat = m;
            self.var_stat = v;
        }
        if constrained {
            self.constraint_activations += 1;
        }
        self.edit_count += 1;

        Ok(EditOutcome {
            alpha,
            beta,
            residual,
            constrained,
            history_excitation: excitation,
            retained_directions: history.map_or(0, |h| h.retained()),
        })
    }

    pub fn to_checkpoint_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&CheckpointFile::from(self))?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        file.into_state()
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json()?)?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_json(&std::fs::read_to_string(path)?)
    }
}

/// Free-function form of [`EditorState::apply_edit`] that leaves the input
/// state untouched and returns the successor.
pub fn apply_edit(
    state: &EditorState,
    fact: &Fact,
    embed: &DMatrix<f64>,
) -> Result<(EditorState, EditOutcome)> {
    let mut next = state.clone();
    let outcome = next.apply_edit(fact, embed)?;
    Ok((next, outcome))
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    schema_version: u32,
    #[serde(rename = "W", with = "serde_mat")]
    w: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    delta_history: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    kp_gram: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    null_proj: DMatrix<f64>,
    #[serde(with = "serde_mat")]
    c0: DMatrix<f64>,
    m: f64,
    v: f64,
    edit_count: usize,
    constraint_activations: usize,
    config: EditConfig,
}

impl From<&EditorState> for CheckpointFile {
    fn from(s: &EditorState) -> Self {
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            w: s.layer.w.clone(),
            delta_history: s.delta_history.clone(),
            kp_gram: s.kp_gram.clone(),
            null_proj: s.null_proj.clone(),
            c0: s.c0.clone(),
            m: s.mean_stat,
            v: s.var_stat,
            edit_count: s.edit_count,
            constraint_activations: s.constraint_activations,
            config: s.config.clone(),
        }
    }
}

impl CheckpointFile {
    fn into_state(self) -> Result<EditorState> {
        if self.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(EditError::SchemaVersion {
                expected: CHECKPOINT_SCHEMA_VERSION,
                found: self.schema_version,
            });
        }
        self.config.validate()?;
        let (d_out, d_in) = self.w.shape();
        let shapes = [
            (self.delta_history.shape(), (d_out, d_in), "delta_history"),
            (self.kp_gram.shape(), (d_in, d_in), "kp_gram"),
            (self.null_proj.shape(), (d_in, d_in), "null_proj"),
            (self.c0.shape(), (d_in, d_in), "c0"),
        ];
        for (found, expected, context) in shapes {
            if found != expected {
                return Err(EditError::DimensionMismatch {
                    expected: expected.0,
                    found: found.0,
                    context,
                });
            }
        }
        Ok(EditorState {
            layer: EditableLayer::new(self.w),
            delta_history: self.delta_history,
            kp_gram: self.kp_gram,
            null_proj: self.null_proj,
            c0: self.c0,
            mean_stat: self.m,
            var_stat: self.v,
            edit_count: self.edit_count,
            constraint_activations: self.constraint_activations,
            config: self.config,
        })
    }
}
