//! Synthetic fact universe: token readout embeddings, fact keys with
//! paraphrases, and a low-rank pool of preserved-knowledge keys.
//!
//! The editable "model" is a single linear layer `W` (d_out × d_in) followed
//! by a softmax readout against the token embeddings: token scores are
//! `embed · (W k)`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, weighted::WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::error::{EditError, Result};
use crate::linalg::{self, check_len, serde_mat, serde_vec, serde_vec_list};

pub const UNIVERSE_SCHEMA_VERSION: u32 = 1;

/// Fact keys whose cosine reaches this value are considered duplicates.
const MAX_KEY_COSINE: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UniverseConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub vocab_size: usize,
    pub n_facts: usize,
    pub n_pool: usize,
    /// Fraction of `d_in` spanned by the preserved-knowledge pool.
    pub rho: f64,
    pub seed: u64,
    pub n_rephrase: usize,
    /// Minimum cosine between a fact key and each of its paraphrase keys.
    pub cos_min: f64,
    /// Overall norm scale of fact and pool keys.
    pub key_scale: f64,
    /// Relative size of the per-fact random component of a key.
    pub key_noise: f64,
    /// Relative size of the offset shared by every fact key.
    pub key_shared: f64,
    /// Log-normal spread of per-fact key norms; 0 keeps every fact at the
    /// same scale.
    pub key_norm_spread: f64,
    /// Relative size of the perturbation used to draw paraphrase keys.
    pub rephrase_noise: f64,
    pub ridge_lambda: f64,
    /// Number of relations facts are grouped into. Facts of one relation
    /// share a key direction and a ranking of likely target tokens.
    pub n_relations: usize,
    /// Relative size of the relation direction in a fact key.
    pub key_relation: f64,
    /// Zipf exponent of the per-relation target distribution; 0 draws
    /// targets uniformly.
    pub target_skew: f64,
    /// Norm of the output the initial layer is fit to produce for each fact.
    pub readout_scale: f64,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        Self {
            d_in: 64,
            d_out: 64,
            vocab_size: 256,
            n_facts: 500,
            n_pool: 1024,
            rho: 0.5,
            seed: 0,
            n_rephrase: 2,
            cos_min: 0.9,
            key_scale: 4.0,
            key_noise: 0.5,
            key_shared: 1.0,
            key_norm_spread: 0.0,
            rephrase_noise: 0.3,
            ridge_lambda: 1e-4,
            n_relations: 1,
            key_relation: 0.0,
            target_skew: 0.0,
            readout_scale: 6.0,
        }
    }
}

impl UniverseConfig {
    /// Square layer (`d_in = d_out = dim`) with the remaining defaults.
    pub fn square(dim: usize, vocab_size: usize, n_facts: usize, seed: u64) -> Self {
        Self {
            d_in: dim,
            d_out: dim,
            vocab_size,
            n_facts,
            n_pool: (4 * dim).max(dim),
            seed,
            ..Self::default()
        }
    }

    /// Dimension of the subspace spanned by the preserved-knowledge pool.
    pub fn pool_rank(&self) -> usize {
        (self.rho * self.d_in as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(EditError::InvalidConfig(msg));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad(format!("rho must lie in (0,1), got {}", self.rho));
        }
        if self.d_in == 0 || self.d_out == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.pool_rank() == 0 {
            return bad(format!("floor(rho * d_in) is zero for rho={} d_in={}", self.rho, self.d_in));
        }
        if self.n_facts == 0 {
            return bad("n_facts must be >= 1".into());
        }
        if self.n_pool < self.d_in {
            return bad(format!("n_pool ({}) must be >= d_in ({})", self.n_pool, self.d_in));
        }
        if !(self.cos_min > 0.0 && self.cos_min < 1.0) {
            return bad(format!("cos_min must lie in (0,1), got {}", self.cos_min));
        }
        if !(self.key_norm_spread >= 0.0 && self.key_norm_spread.is_finite()) {
            return bad(format!("key_norm_spread must be finite and >= 0, got {}", self.key_norm_spread));
        }
        if self.n_relations == 0 {
            return bad("n_relations must be >= 1".into());
        }
        if !(self.target_skew >= 0.0 && self.target_skew.is_finite()) {
            return bad(format!("target_skew must be finite and >= 0, got {}", self.target_skew));
        }
        if !(self.key_scale > 0.0) || !(self.readout_scale > 0.0) || !(self.ridge_lambda > 0.0) {
            return bad("key_scale, readout_scale and ridge_lambda must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fact {
    #[serde(with = "serde_vec")]
    pub key: DVector<f64>,
    #[serde(with = "serde_vec_list")]
    pub rephrase_keys: Vec<DVector<f64>>,
    pub original_token: usize,
    pub target_token: usize,
}

/// The single editable weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditableLayer {
    #[serde(with = "serde_mat")]
    pub w: DMatrix<f64>,
}

impl EditableLayer {
    pub fn new(w: DMatrix<f64>) -> Self {
        Self { w }
    }

    pub fn is_finite(&self) -> bool {
        linalg::all_finite_mat(&self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactUniverse {
    pub config: UniverseConfig,
    /// Token readout embeddings, one unit-norm row per token.
    pub embed: DMatrix<f64>,
    pub facts: Vec<Fact>,
    /// Preserved-knowledge keys, one per row.
    pub unrelated_pool: DMatrix<f64>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn unit_gaussian(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    let v = gaussian_vec(rng, n);
    let norm = v.norm();
    v / norm
}

fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.dot(b) / (a.norm() * b.norm())
}

/// Builds a deterministic universe from `config`.
pub fn generate_universe(config: &UniverseConfig) -> Result<FactUniverse> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (d_in, d_out, vocab) = (config.d_in, config.d_out, config.vocab_size);

    let mut embed = DMatrix::zeros(vocab, d_out);
    for t in 0..vocab {
        let row = unit_gaussian(&mut rng, d_out);
        embed.set_row(t, &row.transpose());
    }

    // Random orthonormal basis; the first `rank` columns span the pool subspace.
    let rank = config.pool_rank();
    let basis = DMatrix::from_fn(d_in, d_in, |_, _| rng.sample::<f64, _>(StandardNormal))
        .qr()
        .q();
    let pool_basis = basis.columns(0, rank).into_owned();
    let mut unrelated_pool = DMatrix::zeros(config.n_pool, d_in);
    let pool_coef_scale = config.key_scale / (rank as f64).sqrt();
    for i in 0..config.n_pool {
        let coef = gaussian_vec(&mut rng, rank) * pool_coef_scale;
        let row = &pool_basis * coef;
        unrelated_pool.set_row(i, &row.transpose());
    }

    // Token codes: each token gets a fixed unit direction in key space, so
    // a fact key carries information about the token it currently recalls.
    let encoder = DMatrix::from_fn(d_in, d_out, |_, _| rng.sample::<f64, _>(StandardNormal));
    let shared = unit_gaussian(&mut rng, d_in);
    let noise_scale = config.key_noise / (d_in as f64).sqrt();

    let relation_dirs: Vec<DVector<f64>> = (0..config.n_relations).map(|_| unit_gaussian(&mut rng, d_in)).collect();
    let relation_ranking: Vec<Vec<usize>> = (0..config.n_relations)
        .map(|_| {
            let mut perm: Vec<usize> = (0..vocab).collect();
            perm.shuffle(&mut rng);
            perm
        })
        .collect();
    let popularity = if config.target_skew > 0.0 {
        let weights = (1..=vocab).map(|r| (r as f64).powf(-config.target_skew));
        Some(WeightedIndex::new(weights).map_err(|e| EditError::InvalidConfig(e.to_string()))?)
    } else {
        None
    };

    let mut facts: Vec<Fact> = Vec::with_capacity(config.n_facts);
    for _ in 0..config.n_facts {
        let relation = rng.random_range(0..config.n_relations);
        let original_token = rng.random_range(0..vocab);
        let target_token = match &popularity {
            Some(dist) => loop {
                let t = relation_ranking[relation][dist.sample(&mut rng)];
                if t != original_token {
                    break t;
                }
            },
            None => {
                let t = rng.random_range(0..vocab - 1);
                t + usize::from(t >= original_token)
            }
        };
        let code = {
            let c = &encoder * embed.row(original_token).transpose();
            let n = c.norm();
            c / n
        };
        let norm_factor = if config.key_norm_spread > 0.0 {
            (config.key_norm_spread * rng.sample::<f64, _>(StandardNormal)).exp()
        } else {
            1.0
        };
        let key = loop {
            let candidate = (&code
                + gaussian_vec(&mut rng, d_in) * noise_scale
                + &shared * config.key_shared
                + &relation_dirs[relation] * config.key_relation)
                * (config.key_scale * norm_factor);
            if facts.iter().all(|f| cosine(&f.key, &candidate) < MAX_KEY_COSINE) {
                break candidate;
            }
        };
        let rephrase_keys = (0..config.n_rephrase)
            .map(|_| {
                let mut perturb = unit_gaussian(&mut rng, d_in) * (config.rephrase_noise * key.norm());
                loop {
                    let candidate = &key + &perturb;
                    if cosine(&key, &candidate) >= config.cos_min {
                        break candidate;
                    }
                    perturb *= 0.8;
                }
            })
            .collect();
        facts.push(Fact {
            key,
            rephrase_keys,
            original_token,
            target_token,
        });
    }

    Ok(FactUniverse {
        config: config.clone(),
        embed,
        facts,
        unrelated_pool,
    })
}

impl FactUniverse {
    pub fn d_in(&self) -> usize {
        self.config.d_in
    }

    pub fn d_out(&self) -> usize {
        self.config.d_out
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.nrows()
    }

    /// Pre-edit layer: ridge regression from fact keys to scaled embeddings
    /// of their original tokens.
    pub fn initial_weights(&self) -> Result<DMatrix<f64>> {
        let n = self.facts.len();
        let keys = DMatrix::from_fn(self.d_in(), n, |r, c| self.facts[c].key[r]);
        let targets = DMatrix::from_fn(self.d_out(), n, |r, c| {
            self.config.readout_scale * self.embed[(self.facts[c].original_token, r)]
        });
        let mut gram = &keys * keys.transpose();
        for i in 0..self.d_in() {
            gram[(i, i)] += self.config.ridge_lambda;
        }
        let rhs = &keys * targets.transpose();
        let chol = gram
            .cholesky()
            .ok_or(EditError::Singular("ridge normal equations"))?;
        Ok(chol.solve(&rhs).transpose())
    }

    /// Covariance of the preserved-knowledge keys.
    pub fn c0(&self) -> Result<DMatrix<f64>> {
        estimate_c0(&self.unrelated_pool)
    }

    /// Pool keys used as unrelated prompts during evaluation.
    pub fn probe_keys(&self, count: usize) -> Vec<DVector<f64>> {
        let count = count.min(self.unrelated_pool.nrows());
        (0..count)
            .map(|i| self.unrelated_pool.row(i).transpose())
            .collect()
    }

    /// Checks the structural invariants of a generated or loaded universe.
    pub fn validate(&self) -> Result<()> {
        if self.embed.ncols() != self.d_out() {
            return Err(EditError::DimensionMismatch {
                expected: self.d_out(),
                found: self.embed.ncols(),
                context: "embed columns",
            });
        }
        if self.unrelated_pool.ncols() != self.d_in() {
            return Err(EditError::DimensionMismatch {
                expected: self.d_in(),
                found: self.unrelated_pool.ncols(),
                context: "pool columns",
            });
        }
        let vocab = self.vocab_size();
        for fact in &self.facts {
            check_len(&fact.key, self.d_in(), "fact key")?;
            for r in &fact.rephrase_keys {
                check_len(r, self.d_in(), "rephrase key")?;
            }
            if fact.original_token >= vocab || fact.target_token >= vocab {
                return Err(EditError::InvalidConfig("token index outside vocabulary".into()));
            }
            if fact.original_token == fact.target_token {
                return Err(EditError::InvalidConfig("fact target equals original token".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&UniverseFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: UniverseFile = serde_json::from_str(text)?;
        file.into_universe()
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Dims {
    d_in: usize,
    d_out: usize,
    vocab_size: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct UniverseFile {
    schema_version: u32,
    seed: u64,
    dims: Dims,
    config: UniverseConfig,
    #[serde(with = "serde_mat")]
    embed: DMatrix<f64>,
    facts: Vec<Fact>,
    #[serde(with = "serde_mat")]
    unrelated_pool: DMatrix<f64>,
}

impl From<&FactUniverse> for UniverseFile {
    fn from(u: &FactUniverse) -> Self {
        Self {
            schema_version: UNIVERSE_SCHEMA_VERSION,
            seed: u.config.seed,
            dims: Dims {
                d_in: u.d_in(),
                d_out: u.d_out(),
                vocab_size: u.vocab_size(),
            },
            config: u.config.clone(),
            embed: u.embed.clone(),
            facts: u.facts.clone(),
            unrelated_pool: u.unrelated_pool.clone(),
        }
    }
}

impl UniverseFile {
    fn into_universe(self) -> Result<FactUniverse> {
        if self.schema_version != UNIVERSE_SCHEMA_VERSION {
            return Err(EditError::SchemaVersion {
                expected: UNIVERSE_SCHEMA_VERSION,
                found: self.schema_version,
            });
        }
        let mut config = self.config;
        config.seed = self.seed;
        config.d_in = self.dims.d_in;
        config.d_out = self.dims.d_out;
        config.vocab_size = self.dims.vocab_size;
        let universe = FactUniverse {
            config,
            embed: self.embed,
            facts: self.facts,
            unrelated_pool: self.unrelated_pool,
        };
        universe.validate()?;
        Ok(universe)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.map(|x| (x - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &DVector<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Token probabilities for key `k` under layer `w`.
pub fn token_probs(w: &DMatrix<f64>, k: &DVector<f64>, embed: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_len(k, w.ncols(), "key vs W columns")?;
    if embed.ncols() != w.nrows() {
        return Err(EditError::DimensionMismatch {
            expected: w.nrows(),
            found: embed.ncols(),
            context: "embed columns vs W rows",
        });
    }
    Ok(softmax(&(embed * (w * k))))
}

/// Predicted token: argmax of the softmax readout, lowest index on ties.
pub fn model_predict(w: &DMatrix<f64>, k: &DVector<f64>, embed: &DMatrix<f64>) -> Result<usize> {
    Ok(argmax(&token_probs(w, k, embed)?))
}

/// `C0 = (1/n) Σ k kᵀ` over the rows of `pool`.
pub fn estimate_c0(pool: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if pool.nrows() == 0 {
        return Err(EditError::Empty("C0 pool"));
    }
    let mut c0 = pool.transpose() * pool / pool.nrows() as f64;
    linalg::symmetrize(&mut c0);
    Ok(c0)
}
