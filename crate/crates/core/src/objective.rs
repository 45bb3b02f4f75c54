//! The shifted latent next-token loss with stop-gradient targets, and
//! collapse diagnostics over token batches.

use crate::autodiff::{Id, Scalar, Tape};
use crate::error::{CoreError, Result};

pub const NORM_EPS: f64 = 1e-8;

/// Collapse alarm thresholds applied to [`CollapseStats`].
pub const COLLAPSE_COSINE_THRESHOLD: f64 = 0.95;
pub const COLLAPSE_STD_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub shift_enabled: bool,
    pub stopgrad_enabled: bool,
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            shift_enabled: true,
            stopgrad_enabled: true,
            eps: NORM_EPS,
        }
    }
}

/// 1 - mean cosine between predictions and their (detached) targets.
///
/// Shift on: position t predicts token t+1, averaged over t=1..T-1.
/// Shift off (ablation): same-position alignment over all T.
/// Stop-gradient off (ablation): targets stay live in the graph.
pub fn next_token_loss<F: Scalar>(
    tape: &mut Tape<F>,
    predictions: Id,
    targets: Id,
    cfg: &LossConfig,
) -> Result<Id> {
    let sp = tape.shape(predictions);
    let st = tape.shape(targets);
    if sp != st {
        return Err(CoreError::ShapeMismatch(format!(
            "predictions ({}, {}) vs targets ({}, {})",
            sp.rows, sp.cols, st.rows, st.cols
        )));
    }
    let t_len = sp.rows;
    let (preds, targs, count) = if cfg.shift_enabled {
        if t_len < 2 {
            return Err(CoreError::InvalidArgument(format!(
                "shifted loss needs T >= 2, got T={t_len}"
            )));
        }
        (
            tape.slice_rows(predictions, 0, t_len - 1)?,
            tape.slice_rows(targets, 1, t_len - 1)?,
            t_len - 1,
        )
    } else {
        (predictions, targets, t_len)
    };
    let targs = if cfg.stopgrad_enabled {
        tape.stop_gradient(targs)
    } else {
        targs
    };
    let eps = F::from_f64(cfg.eps);
    let pn = tape.l2_normalize_rows(preds, eps);
    let tn = tape.l2_normalize_rows(targs, eps);
    let prod = tape.mul(pn, tn)?;
    let total = tape.sum(prod);
    let mean_cos = tape.scale(total, F::from_f64(1.0 / count as f64));
    let neg = tape.scale(mean_cos, F::from_f64(-1.0));
    Ok(tape.add_scalar(neg, F::one()))
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct CollapseStats {
    pub mean_pairwise_cosine: f64,
    pub per_dim_std_mean: f64,
}

impl CollapseStats {
    pub fn is_collapsed(&self) -> bool {
        self.mean_pairwise_cosine > COLLAPSE_COSINE_THRESHOLD
            || self.per_dim_std_mean < COLLAPSE_STD_THRESHOLD
    }
}

/// Mean cosine over all distinct token pairs, plus the mean
/// per-dimension standard deviation of the normalized tokens.
pub fn collapse_stats(tokens: &[Vec<f64>]) -> Result<CollapseStats> {
    let n = tokens.len();
    if n < 2 {
        return Err(CoreError::InvalidArgument(
            "collapse stats need at least 2 tokens".into(),
        ));
    }
    let dim = tokens[0].len();
    let normalized: Vec<Vec<f64>> = tokens
        .iter()
        .map(|t| {
            let norm = t.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            t.iter().map(|v| v / norm).collect()
        })
        .collect();
    // mean pairwise cosine via the Gram identity: sum_{i != j} <ni, nj>
    // = ||sum ni||^2 - sum ||ni||^2
    let mut acc = vec![0.0f64; dim];
    let mut self_dot = 0.0;
    for t in &normalized {
        for (a, v) in acc.iter_mut().zip(t) {
            *a += v;
        }
        self_dot += t.iter().map(|v| v * v).sum::<f64>();
    }
    let total: f64 = acc.iter().map(|v| v * v).sum();
    let pairs = (n * (n - 1)) as f64;
    let mean_pairwise_cosine = (total - self_dot) / pairs;

    let mut std_sum = 0.0;
    for d in 0..dim {
        let mean = normalized.iter().map(|t| t[d]).sum::<f64>() / n as f64;
        let var = normalized
            .iter()
            .map(|t| (t[d] - mean) * (t[d] - mean))
            .sum::<f64>()
            / n as f64;
        std_sum += var.sqrt();
    }
    Ok(CollapseStats {
        mean_pairwise_cosine,
        per_dim_std_mean: std_sum / dim as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss_value(preds: Vec<f64>, targs: Vec<f64>, t: usize, c: usize, cfg: &LossConfig) -> f64 {
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.param(t, c, preds).unwrap();
        let z = tape.param(t, c, targs).unwrap();
        let l = next_token_loss(&mut tape, p, z, cfg).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn perfect_prediction_is_zero() {
        // predictions at t equal targets at t+1
        let targs = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let preds = vec![0.0, 1.0, 1.0, 1.0, 9.0, 9.0];
        let l = loss_value(preds, targs, 3, 2, &LossConfig::default());
        assert!(l.abs() < 1e-9);
    }

    #[test]
    fn orthogonal_is_one_antiparallel_is_two() {
        let targs = vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let ortho = vec![1.0, 0.0, 1.0, 0.0, 5.0, 5.0];
        assert!((loss_value(ortho, targs.clone(), 3, 2, &LossConfig::default()) - 1.0).abs() < 1e-9);
        let anti = vec![0.0, -1.0, 0.0, -3.0, 5.0, 5.0];
        assert!((loss_value(anti, targs, 3, 2, &LossConfig::default()) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn loss_in_range_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let t = 4;
            let c = 6;
            let preds: Vec<f64> = (0..t * c).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let targs: Vec<f64> = (0..t * c).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let l = loss_value(preds.clone(), targs.clone(), t, c, &LossConfig::default());
            assert!((0.0..=2.0).contains(&l));
            let scaled: Vec<f64> = preds.iter().map(|v| v * 37.5).collect();
            let l2 = loss_value(scaled, targs, t, c, &LossConfig::default());
            assert!((l - l2).abs() < 1e-6);
        }
    }

    #[test]
    fn t1_rejected_with_shift_allowed_without() {
        let cfg = LossConfig::default();
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.param(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let z = tape.param(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!(next_token_loss(&mut tape, p, z, &cfg).is_err());
        let noshift = LossConfig {
            shift_enabled: false,
            ..cfg
        };
        let l = next_token_loss(&mut tape, p, z, &noshift).unwrap();
        assert!(tape.scalar(l).abs() < 1e-9);
    }

    #[test]
    fn stopgrad_blocks_target_branch() {
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.param(3, 4, vec![0.3; 12]).unwrap();
        let z = tape.param(3, 4, (0..12).map(|i| 0.1 * i as f64 + 0.1).collect()).unwrap();
        let l = next_token_loss(&mut tape, p, z, &LossConfig::default()).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(z).is_none(), "detached branch must receive no gradient");
        assert!(g.get(p).is_some());
    }

    #[test]
    fn live_targets_receive_gradient_when_stopgrad_off() {
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.param(3, 4, vec![0.3; 12]).unwrap();
        let z = tape.param(3, 4, (0..12).map(|i| 0.1 * i as f64 + 0.1).collect()).unwrap();
        let cfg = LossConfig {
            stopgrad_enabled: false,
            ..LossConfig::default()
        };
        let l = next_token_loss(&mut tape, p, z, &cfg).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(z).is_some());
    }

    #[test]
    fn last_prediction_gets_zero_gradient_with_shift() {
        let mut tape: Tape<f64> = Tape::new();
        let t = 4;
        let c = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = tape
            .param(t, c, (0..t * c).map(|_| rng.gen::<f64>() - 0.5).collect())
            .unwrap();
        let z = tape
            .param(t, c, (0..t * c).map(|_| rng.gen::<f64>() - 0.5).collect())
            .unwrap();
        let l = next_token_loss(&mut tape, p, z, &LossConfig::default()).unwrap();
        let g = tape.backward(l).unwrap();
        let gp = g.get(p).unwrap();
        assert!(gp[(t - 1) * c..].iter().all(|&v| v == 0.0));
        assert!(gp[..(t - 1) * c].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn collapse_stats_extremes() {
        let identical = vec![vec![0.5, 0.5, 0.0]; 6];
        let s = collapse_stats(&identical).unwrap();
        assert!((s.mean_pairwise_cosine - 1.0).abs() < 1e-9);
        assert!(s.per_dim_std_mean < 1e-12);
        assert!(s.is_collapsed());

        let basis: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let s = collapse_stats(&basis).unwrap();
        assert!(s.mean_pairwise_cosine.abs() < 1e-9);
        assert!(!s.is_collapsed());
    }

    #[test]
    fn random_gaussian_tokens_near_zero_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tokens: Vec<Vec<f64>> = (0..1000)
            .map(|_| {
                (0..64)
                    .map(|_| {
                        // Box-Muller
                        let u1: f64 = rng.gen::<f64>().max(1e-12);
                        let u2: f64 = rng.gen();
                        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                    })
                    .collect()
            })
            .collect();
        let s = collapse_stats(&tokens).unwrap();
        assert!(s.mean_pairwise_cosine.abs() < 0.05);
    }

    #[test]
    fn too_few_tokens_rejected() {
        assert!(collapse_stats(&[vec![1.0, 0.0]]).is_err());
    }
}
