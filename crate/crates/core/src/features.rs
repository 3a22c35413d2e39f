//! Gram-matrix texture features.
//!
//! For a feature map `F` (filters × positions), `G_ij = Σ_k F_ik F_jk`. Only
//! the upper triangle including the diagonal is kept, row-major, so a map with
//! `m` filters yields `m(m+1)/2` values. No normalization by position count.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FeatureMap, TapId};
use crate::container;
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub const FEATURE_MATRIX_MAGIC: &[u8] = b"MAMEFM1";

#[derive(Debug, Clone, PartialEq)]
pub struct GramVector {
    pub tap: TapId,
    pub filters: usize,
    pub values: Vec<f64>,
}

pub fn gram_dim(filters: usize) -> usize {
    filters * (filters + 1) / 2
}

/// Index of `(i, j)`, `i <= j`, in the packed upper triangle.
pub fn packed_index(filters: usize, i: usize, j: usize) -> usize {
    debug_assert!(i <= j && j < filters);
    i * filters - i * (i + 1) / 2 + j
}

impl GramVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Full symmetric `m × m` matrix, row-major.
    pub fn to_full(&self) -> Vec<f64> {
        let m = self.filters;
        let mut full = vec![0.0; m * m];
        for i in 0..m {
            for j in i..m {
                let v = self.values[packed_index(m, i, j)];
                full[i * m + j] = v;
                full[j * m + i] = v;
            }
        }
        full
    }
}

pub fn gram(fm: &FeatureMap) -> GramVector {
    let m = fm.filters;
    let mut values = Vec::with_capacity(gram_dim(m));
    for i in 0..m {
        let fi = fm.filter(i);
        for j in i..m {
            values.push(fi.iter().zip(fm.filter(j)).map(|(a, b)| a * b).sum());
        }
    }
    GramVector {
        tap: fm.tap,
        filters: m,
        values,
    }
}

/// Pulls a gradient on the packed Gram vector back onto the feature map.
///
/// With `M` symmetric, `M_ij = M_ji = c_ij` off the diagonal and `M_ii = 2 c_ii`,
/// `∂L/∂F = M F`.
pub fn gram_backward(fm: &FeatureMap, grad_packed: &[f64]) -> Vec<f64> {
    let m = fm.filters;
    let k = fm.positions;
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for j in i..m {
            let c = grad_packed[packed_index(m, i, j)];
            if c == 0.0 {
                continue;
            }
            if i == j {
                let (src, dst) = (fm.filter(i), &mut out[i * k..(i + 1) * k]);
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += 2.0 * c * s);
            } else {
                let (fi, fj) = (fm.filter(i), fm.filter(j));
                {
                    let dst = &mut out[i * k..(i + 1) * k];
                    dst.iter_mut().zip(fj).for_each(|(d, &s)| *d += c * s);
                }
                let dst = &mut out[j * k..(j + 1) * k];
                dst.iter_mut().zip(fi).for_each(|(d, &s)| *d += c * s);
            }
        }
    }
    out
}

/// Gram vectors of one tap over an image set, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub tap: TapId,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub image_ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct FeatureSidecar {
    tap: TapId,
    image_ids: Vec<String>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        container::Writer::new(FEATURE_MATRIX_MAGIC)
            .string(self.tap.as_str())
            .matrix(self.rows, self.cols, &self.values)
            .finish()
    }

    pub fn from_bytes(bytes: &[u8], image_ids: Vec<String>) -> Result<Self> {
        let mut r = container::Reader::new(bytes, FEATURE_MATRIX_MAGIC)?;
        let tap: TapId = r.string()?.parse()?;
        let (rows, cols, values) = r.matrix()?;
        r.finish()?;
        if image_ids.len() != rows {
            return Err(Error::dim(format!("{rows} image ids"), image_ids.len()));
        }
        Ok(Self {
            tap,
            rows,
            cols,
            values,
            image_ids,
        })
    }

    /// Writes `path` (binary) and `path.ids.json` (image ids).
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let sidecar = sidecar_path(path);
        let json = serde_json::to_vec_pretty(&FeatureSidecar {
            tap: self.tap,
            image_ids: self.image_ids.clone(),
        })?;
        std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let sidecar = sidecar_path(path);
        let meta: FeatureSidecar = serde_json::from_slice(
            &std::fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?,
        )?;
        let fm = Self::from_bytes(&bytes, meta.image_ids)?;
        if fm.tap != meta.tap {
            return Err(Error::Format(format!(
                "sidecar tap {} does not match container tap {}",
                meta.tap, fm.tap
            )));
        }
        Ok(fm)
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ids.json");
    s.into()
}

/// Gram vectors of every image at every requested tap.
///
/// Images are split across worker threads; rows keep input order. Mis-sized
/// images are collected and reported together.
pub fn extract_corpus(
    backbone: &Backbone,
    images: &[(String, ImageTensor)],
    taps: &[TapId],
) -> Result<BTreeMap<TapId, FeatureMatrix>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(images.len().max(1));
    let chunk = images.len().div_ceil(workers).max(1);
    let results: Vec<Result<BTreeMap<TapId, GramVector>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = images
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|(_, img)| {
                            let maps = backbone.forward(img, taps)?;
                            Ok(maps.into_iter().map(|(t, fm)| (t, gram(&fm))).collect())
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("feature worker panicked"))
            .collect()
    });

    let mut failures = Vec::new();
    let mut grams = Vec::with_capacity(images.len());
    for ((id, _), r) in images.iter().zip(results) {
        match r {
            Ok(g) => grams.push(g),
            Err(e) => failures.push((id.clone(), e.to_string())),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Corpus(failures));
    }

    let ids: Vec<String> = images.iter().map(|(id, _)| id.clone()).collect();
    Ok(taps
        .iter()
        .map(|&tap| {
            let cols = gram_dim(backbone.tap_filters(tap));
            let mut values = Vec::with_capacity(cols * grams.len());
            for g in &grams {
                values.extend_from_slice(&g[&tap].values);
            }
            (
                tap,
                FeatureMatrix {
                    tap,
                    rows: grams.len(),
                    cols,
                    values,
                    image_ids: ids.clone(),
                },
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fm(filters: usize, positions: usize, values: Vec<f64>) -> FeatureMap {
        FeatureMap {
            tap: TapId::Early,
            filters,
            positions,
            values,
        }
    }

    #[test]
    fn constant_single_filter() {
        let g = gram(&fm(1, 5, vec![0.3; 5]));
        assert_eq!(g.values.len(), 1);
        assert!((g.values[0] - 5.0 * 0.09).abs() < 1e-15);
    }

    #[test]
    fn two_filter_example() {
        // Σ_k F_ik F_jk by hand: G11 = 1+4, G12 = 3+8, G22 = 9+16
        let g = gram(&fm(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(g.values, vec![5.0, 11.0, 25.0]);
        let full = g.to_full();
        assert_eq!(full, vec![5.0, 11.0, 11.0, 25.0]);
    }

    #[test]
    fn packed_index_enumerates_upper_triangle() {
        let m = 5;
        let mut expected = 0;
        for i in 0..m {
            for j in i..m {
                assert_eq!(packed_index(m, i, j), expected);
                expected += 1;
            }
        }
        assert_eq!(expected, gram_dim(m));
        assert_eq!(gram_dim(16), 136);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let values: Vec<f64> = (0..3 * 4).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let map = fm(3, 4, values.clone());
        let coeffs: Vec<f64> = (0..6).map(|i| 0.3 * i as f64 - 0.7).collect();
        let loss = |v: &[f64]| -> f64 {
            let g = gram(&fm(3, 4, v.to_vec()));
            g.values.iter().zip(&coeffs).map(|(a, b)| a * b).sum()
        };
        let analytic = gram_backward(&map, &coeffs);
        let h = 1e-6;
        for idx in 0..values.len() {
            let mut up = values.clone();
            let mut dn = values.clone();
            up[idx] += h;
            dn[idx] -= h;
            let fd = (loss(&up) - loss(&dn)) / (2.0 * h);
            assert!((fd - analytic[idx]).abs() < 1e-7, "{idx}: {fd} vs {}", analytic[idx]);
        }
    }

    #[test]
    fn feature_matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("early.fm");
        let m = FeatureMatrix {
            tap: TapId::Mid,
            rows: 2,
            cols: 3,
            values: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5],
            image_ids: vec!["a".into(), "b".into()],
        };
        m.save(&path).unwrap();
        assert_eq!(FeatureMatrix::load(&path).unwrap(), m);
        let bytes = m.to_bytes();
        assert!(FeatureMatrix::from_bytes(&bytes[..bytes.len() - 1], m.image_ids.clone()).is_err());
    }

    proptest! {
        #[test]
        fn spatial_permutation_invariance(
            values in proptest::collection::vec(-2.0f64..2.0, 3 * 6),
            rot in 0usize..6,
        ) {
            let a = gram(&fm(3, 6, values.clone()));
            let mut permuted = values.clone();
            for f in 0..3 {
                permuted[f * 6..(f + 1) * 6].rotate_left(rot);
            }
            let b = gram(&fm(3, 6, permuted));
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn quadratic_scaling(
            values in proptest::collection::vec(-2.0f64..2.0, 2 * 5),
            alpha in 0.01f64..10.0,
        ) {
            let a = gram(&fm(2, 5, values.clone()));
            let b = gram(&fm(2, 5, values.iter().map(|v| v * alpha).collect()));
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((alpha * alpha * x - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }
    }
}
