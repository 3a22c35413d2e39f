//! Independent component analysis of Gram features.
//!
//! A fitted model maps a feature vector `x` to components
//! `s = W (x − μ)` with `W = R K`: `K` whitens (`c × dim`), `R` is the
//! orthogonal FastICA rotation (`c × c`). The mixing matrix `A` (`dim × c`)
//! satisfies `W A = I`, so `x̂ = μ + A s`.

mod fastica;
mod io;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::backbone::TapId;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

pub use fastica::fit_ica;
pub use io::{metadata_path, ICA_MAGIC};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct IcaFitConfig {
    pub n_components: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub seed: u64,
    /// How many top components to keep as exploration axes.
    pub select: usize,
}

impl Default for IcaFitConfig {
    fn default() -> Self {
        Self {
            n_components: 100,
            tolerance: 1e-4,
            max_iterations: 200,
            seed: 0,
            select: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcaModel {
    pub tap: TapId,
    pub config: IcaFitConfig,
    pub mean: DVector<f64>,
    pub whiten: DMatrix<f64>,
    pub unmix: DMatrix<f64>,
    pub combined: DMatrix<f64>,
    pub mixing: DMatrix<f64>,
    pub explained_variance: Vec<f64>,
    pub selected: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
}

impl IcaModel {
    pub fn n_components(&self) -> usize {
        self.combined.nrows()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::dim(self.dim(), len));
        }
        Ok(())
    }

    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let centered = DVector::from_iterator(x.len(), x.iter().zip(self.mean.iter()).map(|(a, m)| a - m));
        Ok((&self.combined * centered).iter().copied().collect())
    }

    /// Components restricted to `indices`, in that order.
    pub fn transform_components(&self, x: &[f64], indices: &[usize]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        indices
            .iter()
            .map(|&i| {
                self.check_component(i)?;
                Ok(self
                    .combined
                    .row(i)
                    .iter()
                    .zip(x.iter().zip(self.mean.iter()))
                    .map(|(w, (a, m))| w * (a - m))
                    .sum())
            })
            .collect()
    }

    /// All rows of a feature matrix in component space (`n × c`).
    pub fn transform_matrix(&self, x: &FeatureMatrix) -> Result<DMatrix<f64>> {
        self.check_dim(x.cols)?;
        let mut centered = DMatrix::from_row_slice(x.rows, x.cols, &x.values);
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        Ok(centered * self.combined.transpose())
    }

    fn check_component(&self, i: usize) -> Result<()> {
        if i >= self.n_components() {
            return Err(Error::ComponentOutOfRange {
                index: i,
                count: self.n_components(),
            });
        }
        Ok(())
    }

    /// `μ + A s`, with `s` masked to `keep_only` when given.
    pub fn reconstruct(&self, s: &[f64], keep_only: Option<&BTreeSet<usize>>) -> Result<Vec<f64>> {
        if s.len() != self.n_components() {
            return Err(Error::dim(self.n_components(), s.len()));
        }
        let mut masked = DVector::from_column_slice(s);
        if let Some(keep) = keep_only {
            for &i in keep {
                self.check_component(i)?;
            }
            for (i, v) in masked.iter_mut().enumerate() {
                if !keep.contains(&i) {
                    *v = 0.0;
                }
            }
        }
        Ok((&self.mean + &self.mixing * masked).iter().copied().collect())
    }

    /// `1 − ‖X − X̂_i‖²_F / ‖X‖²_F` where `X̂_i` keeps only component `i`.
    pub fn explained_variance(&self, x: &FeatureMatrix, i: usize) -> Result<f64> {
        self.check_component(i)?;
        let s = self.transform_matrix(x)?;
        explained_variance_from(x, &self.mean, &self.mixing, &s, i)
    }

    /// The `k` components with the largest explained variance.
    pub fn select_components(&self, k: usize) -> Vec<usize> {
        rank_by_explained_variance(&self.explained_variance, k)
    }

    /// Euclidean norm of the selected components of `x`.
    pub fn selected_norm(&self, x: &[f64]) -> Result<f64> {
        Ok(self
            .transform_components(x, &self.selected)?
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt())
    }
}

pub(crate) fn explained_variance_from(
    x: &FeatureMatrix,
    mean: &DVector<f64>,
    mixing: &DMatrix<f64>,
    s: &DMatrix<f64>,
    i: usize,
) -> Result<f64> {
    let total: f64 = x.values.iter().map(|v| v * v).sum();
    if total == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let a = mixing.column(i);
    let mut residual = 0.0;
    for r in 0..x.rows {
        let sri = s[(r, i)];
        for (j, &v) in x.row(r).iter().enumerate() {
            let d = v - mean[j] - sri * a[j];
            residual += d * d;
        }
    }
    Ok(1.0 - residual / total)
}

/// Indices of the `k` largest values, descending; ties go to the lower index.
pub fn rank_by_explained_variance(evs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..evs.len()).collect();
    idx.sort_by(|&a, &b| evs[b].total_cmp(&evs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Reference-image thresholds published for the original ResNet50 study
/// (lowest-20% criterion over 50,000 images). Kept as metadata only.
pub const PUBLISHED_REFERENCE_THRESHOLDS: [(&str, f64); 3] =
    [("conv1", 1.22), ("layer3", 1.73), ("avgpool", 0.79)];
pub const PUBLISHED_REFERENCE_COUNT: usize = 614;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSelection {
    pub percentile: f64,
    pub thresholds: BTreeMap<TapId, f64>,
    /// Sorted ids whose selected-component norm is within the threshold at
    /// every tap.
    pub image_ids: Vec<String>,
}

/// Linear-interpolated percentile of unsorted values (`p` in `[0, 100]`).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

/// Picks images near the origin of every tap's selected component space.
pub fn select_reference_images(
    models: &BTreeMap<TapId, IcaModel>,
    features: &BTreeMap<TapId, FeatureMatrix>,
    pct: f64,
) -> Result<ReferenceSelection> {
    if !(0.0..=100.0).contains(&pct) {
        return Err(Error::Config(format!("percentile {pct} outside [0, 100]")));
    }
    let mut thresholds = BTreeMap::new();
    let mut passing: Option<BTreeSet<String>> = None;
    let mut id_set: Option<BTreeSet<String>> = None;
    for (tap, model) in models {
        let fm = features
            .get(tap)
            .ok_or_else(|| Error::Config(format!("no features for tap {tap}")))?;
        if fm.rows == 0 {
            return Err(Error::Config(format!("empty feature matrix for tap {tap}")));
        }
        let ids: BTreeSet<String> = fm.image_ids.iter().cloned().collect();
        match &id_set {
            Some(prev) if *prev != ids => {
                return Err(Error::Config(format!("tap {tap} was extracted on a different image set")))
            }
            _ => id_set = Some(ids),
        }
        let norms = (0..fm.rows)
            .map(|r| model.selected_norm(fm.row(r)))
            .collect::<Result<Vec<_>>>()?;
        let threshold = percentile(&norms, pct);
        thresholds.insert(*tap, threshold);
        let below: BTreeSet<String> = fm
            .image_ids
            .iter()
            .zip(&norms)
            .filter(|(_, &n)| n <= threshold)
            .map(|(id, _)| id.clone())
            .collect();
        passing = Some(match passing {
            None => below,
            Some(prev) => prev.intersection(&below).cloned().collect(),
        });
    }
    let image_ids: Vec<String> = passing.unwrap_or_default().into_iter().collect();
    if image_ids.is_empty() {
        return Err(Error::EmptySelection { percentile: pct });
    }
    Ok(ReferenceSelection {
        percentile: pct,
        thresholds,
        image_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_examples() {
        assert_eq!(rank_by_explained_variance(&[0.1, 0.5, 0.3], 2), vec![1, 2]);
        assert_eq!(rank_by_explained_variance(&[0.1, 0.5, 0.3], 3), vec![1, 2, 0]);
        assert_eq!(rank_by_explained_variance(&[0.2, 0.2, 0.2], 2), vec![0, 1]);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[3.0], 20.0), 3.0);
        assert_eq!(percentile(&[4.0, 0.0, 2.0], 50.0), 2.0);
        assert!((percentile(&[0.0, 10.0], 20.0) - 2.0).abs() < 1e-15);
    }
}
