//! Sliding mean/variance of the history excitation and the dynamic
//! threshold `t = m + η·√v` that switches the orthogonal constraint on.

use nalgebra::DVector;

use super::{EditConfig, EditorState, Method};

/// One sliding-average step. The variance term uses the already-updated mean.
pub fn update_threshold_stats(mean: f64, var: f64, value: f64, delta_coef: f64) -> (f64, f64) {
    let mean_next = delta_coef * mean + (1.0 - delta_coef) * value;
    let dev = value - mean_next;
    let var_next = delta_coef * var + (1.0 - delta_coef) * dev * dev;
    (mean_next, var_next)
}

pub fn dynamic_threshold(mean: f64, var: f64, eta: f64) -> f64 {
    mean + eta * var.max(0.0).sqrt()
}

/// `‖Δ_history k‖²` for the key about to be edited.
pub fn history_excitation(state: &EditorState, key: &DVector<f64>) -> f64 {
    (&state.delta_history * key).norm_squared()
}

/// Returns whether the orthogonal constraint fires for `key`, along with the
/// excitation it was judged on.
pub fn should_constrain(state: &EditorState, key: &DVector<f64>, config: &EditConfig) -> (bool, f64) {
    let excitation = history_excitation(state, key);
    let fires = config.method == Method::DeltaEdit
        && state.edit_count >= config.warmup_edits
        && excitation > dynamic_threshold(state.mean_stat, state.var_stat, config.eta);
    (fires, excitation)
}

/// Statistics after observing `excitation`, honoring warmup and the outlier
/// guard. `None` means the observation is rejected and stats stay as they are.
pub(crate) fn guarded_stats_update(
    state: &EditorState,
    excitation: f64,
    config: &EditConfig,
) -> Option<(f64, f64)> {
    if !excitation.is_finite() {
        return None;
    }
    let in_warmup = state.edit_count < config.warmup_edits;
    let outlier = excitation > dynamic_threshold(state.mean_stat, state.var_stat, config.outlier_kappa);
    if !in_warmup && outlier {
        return None;
    }
    Some(update_threshold_stats(
        state.mean_stat,
        state.var_stat,
        excitation,
        config.delta_coef,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_computed_first_step() {
        let (m, v) = update_threshold_stats(0.0, 0.0, 10.0, 0.9);
        assert!((m - 1.0).abs() < 1e-12);
        assert!((v - 8.1).abs() < 1e-12);
    }

    #[test]
    fn value_at_mean_decays_variance() {
        let (m, v) = update_threshold_stats(2.5, 3.0, 2.5, 0.7);
        assert_eq!(m, 2.5);
        assert!((v - 0.7 * 3.0).abs() < 1e-15);
    }

    #[test]
    fn frozen_when_coefficient_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (m, v, x) = (rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>() * 100.0);
            assert_eq!(update_threshold_stats(m, v, x, 1.0), (m, v));
        }
    }

    fn deltaedit_state(count: usize, mean: f64, var: f64) -> EditorState {
        let config = EditConfig::deltaedit();
        let mut s = EditorState::new(DMatrix::zeros(2, 2), DMatrix::identity(2, 2), config).unwrap();
        s.edit_count = count;
        s.mean_stat = mean;
        s.var_stat = var;
        s
    }

    #[test]
    fn warmup_blocks_constraint() {
        let mut s = deltaedit_state(0, 0.0, 0.0);
        s.delta_history = DMatrix::identity(2, 2) * 10.0;
        let key = DVector::from_vec(vec![1.0, 0.0]);
        let (fires, exc) = should_constrain(&s, &key, &s.config.clone());
        assert!(!fires);
        assert_eq!(exc, 100.0);
    }

    #[test]
    fn zero_history_never_fires() {
        let s = deltaedit_state(10, 0.0, 0.0);
        let key = DVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(should_constrain(&s, &key, &s.config.clone()), (false, 0.0));
    }

    #[test]
    fn threshold_arithmetic() {
        // excitation 4.5 against t = 1 + 1.5·√4 = 4
        let mut s = deltaedit_state(10, 1.0, 4.0);
        s.delta_history = DMatrix::from_diagonal(&DVector::from_vec(vec![4.5f64.sqrt(), 0.0]));
        let key = DVector::from_vec(vec![1.0, 0.0]);
        let config = EditConfig { eta: 1.5, ..EditConfig::deltaedit() };
        let (fires, exc) = should_constrain(&s, &key, &config);
        assert!((exc - 4.5).abs() < 1e-12);
        assert!(fires);
        let memit = EditConfig { method: Method::Memit, ..config };
        assert!(!should_constrain(&s, &key, &memit).0);
    }

    #[test]
    fn outlier_guard_rejects_spikes_after_warmup() {
        let config = EditConfig::deltaedit();
        let s = deltaedit_state(10, 1.0, 1.0);
        // 1 + 10·1 = 11 is the acceptance bound
        assert!(guarded_stats_update(&s, 11.0, &config).is_some());
        assert!(guarded_stats_update(&s, 11.5, &config).is_none());
        assert!(guarded_stats_update(&s, f64::NAN, &config).is_none());
        let warm = deltaedit_state(2, 1.0, 1.0);
        assert!(guarded_stats_update(&warm, 1e6, &config).is_some());
    }
}
