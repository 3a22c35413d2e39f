//! Parallel FastICA with the log-cosh contrast (`g = tanh`).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{explained_variance_from, rank_by_explained_variance, IcaFitConfig, IcaModel};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

pub fn fit_ica(x: &FeatureMatrix, cfg: &IcaFitConfig) -> Result<IcaModel> {
    if !(cfg.tolerance > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {}", cfg.tolerance)));
    }
    if cfg.n_components == 0 {
        return Err(Error::Config("n_components must be positive".into()));
    }
    if x.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config(format!("feature matrix for tap {} has non-finite entries", x.tap)));
    }
    let (n, d, c) = (x.rows, x.cols, cfg.n_components);
    if n < 2 {
        return Err(Error::InsufficientRank { rank: 0, requested: c });
    }

    let data = DMatrix::from_row_slice(n, d, &x.values);
    let mean = DVector::from_iterator(d, data.column_iter().map(|col| col.mean()));
    let mut centered = data;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }

    let svd = centered.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sigma_max = order.first().map_or(0.0, |&i| svd.singular_values[i]);
    let tol = sigma_max * n.max(d) as f64 * f64::EPSILON;
    let rank = order
        .iter()
        .filter(|&&i| svd.singular_values[i] > tol)
        .count()
        .min(n - 1);
    if c > rank {
        return Err(Error::InsufficientRank { rank, requested: c });
    }

    let scale = (n as f64).sqrt();
    let mut whiten = DMatrix::zeros(c, d);
    let mut dewhiten = DMatrix::zeros(d, c);
    for (k, &i) in order.iter().take(c).enumerate() {
        let sigma = svd.singular_values[i];
        whiten.row_mut(k).copy_from(&(v_t.row(i) * (scale / sigma)));
        dewhiten.column_mut(k).copy_from(&(v_t.row(i).transpose() * (sigma / scale)));
    }

    // Whitened samples as columns: c × n, unit covariance (1/n).
    let z = &whiten * centered.transpose();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = DMatrix::from_fn(c, c, |_, _| rng.gen_range(-1.0..1.0));
    let mut w = symmetric_decorrelation(&init);
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..cfg.max_iterations {
        iterations += 1;
        let wz = &w * &z;
        let g = wz.map(f64::tanh);
        let g_prime_mean = DVector::from_iterator(c, g.row_iter().map(|r| r.iter().map(|t| 1.0 - t * t).sum::<f64>() / n as f64));
        let mut next = (&g * z.transpose()) / n as f64;
        for (i, mut row) in next.row_iter_mut().enumerate() {
            row -= w.row(i) * g_prime_mean[i];
        }
        let next = symmetric_decorrelation(&next);
        let lim = next
            .row_iter()
            .zip(w.row_iter())
            .map(|(a, b)| (a.dot(&b).abs() - 1.0).abs())
            .fold(0.0, f64::max);
        w = next;
        if lim < cfg.tolerance {
            converged = true;
            break;
        }
    }

    let mut mixing = dewhiten * w.transpose();
    // Fix the arbitrary sign: the largest-magnitude loading of each mixing
    // column is positive.
    for k in 0..c {
        let col = mixing.column(k);
        let peak = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if peak < 0.0 {
            mixing.column_mut(k).neg_mut();
            w.row_mut(k).neg_mut();
        }
    }
    let combined = &w * &whiten;

    let s = centered * combined.transpose();
    let explained_variance = (0..c)
        .map(|i| explained_variance_from(x, &mean, &mixing, &s, i))
        .collect::<Result<Vec<_>>>()?;
    let selected = rank_by_explained_variance(&explained_variance, cfg.select.min(c));

    Ok(IcaModel {
        tap: x.tap,
        config: cfg.clone(),
        mean,
        whiten,
        unmix: w,
        combined,
        mixing,
        explained_variance,
        selected,
        converged,
        iterations,
    })
}

/// `(W Wᵀ)^{-1/2} W`
fn symmetric_decorrelation(w: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(w * w.transpose());
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.max(f64::MIN_POSITIVE).sqrt()));
    &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose() * w
}
