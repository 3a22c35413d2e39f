//! Reference computations written independently of the library code they
//! check.

use mame_core::analysis::GrayImage;
use mame_core::backbone::{Activation, ConvSpec, FnLoss, InputShape, Pooling, StageSpec};
use mame_core::features::{gram, gram_backward, gram_dim, FeatureMatrix};
use mame_core::ica::IcaModel;
use mame_core::{Backbone, BackboneConfig, FeatureMap, ImageTensor, TapId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn matrix(tap: TapId, rows: usize, cols: usize, values: Vec<f64>) -> FeatureMatrix {
    FeatureMatrix {
        tap,
        rows,
        cols,
        values,
        image_ids: (0..rows).map(|i| format!("img{i:04}")).collect(),
    }
}

/// `n` samples of `k` independent uniform sources mixed by `mixing` (k×k, row-major).
pub fn mixture(n: usize, mixing: &[f64], k: usize, seed: u64) -> (Vec<Vec<f64>>, FeatureMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let mut values = Vec::with_capacity(n * k);
    for t in 0..n {
        for row in 0..k {
            values.push((0..k).map(|j| mixing[row * k + j] * sources[j][t]).sum());
        }
    }
    (sources, matrix(TapId::Early, n, k, values))
}

pub fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Components of every training row via explicit loops over the stored maps.
pub fn components_by_hand(model: &IcaModel, x: &FeatureMatrix) -> Vec<Vec<f64>> {
    (0..x.rows)
        .map(|r| {
            (0..model.n_components())
                .map(|i| {
                    let mut acc = 0.0;
                    for j in 0..x.cols {
                        acc += model.combined[(i, j)] * (x.values[r * x.cols + j] - model.mean[j]);
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Components of `image` computed without the library's Gram or transform
/// code: explicit filter products in packed order, then `W (g − μ)`.
pub fn image_components_by_hand(backbone: &Backbone, model: &IcaModel, image: &ImageTensor, tap: TapId) -> Vec<f64> {
    let map = &backbone.forward(image, &[tap]).unwrap()[&tap];
    let (m, k) = (map.filters, map.positions);
    let mut g = Vec::with_capacity(gram_dim(m));
    for i in 0..m {
        for j in i..m {
            let mut acc = 0.0;
            for p in 0..k {
                acc += map.values[i * k + p] * map.values[j * k + p];
            }
            g.push(acc);
        }
    }
    (0..model.n_components())
        .map(|r| (0..g.len()).map(|c| model.combined[(r, c)] * (g[c] - model.mean[c])).sum())
        .collect()
}

/// For each source, the best |corr| with any recovered component.
pub fn recovery_best_corr(sources: &[Vec<f64>], model: &IcaModel, x: &FeatureMatrix) -> Vec<f64> {
    let s = components_by_hand(model, x);
    sources
        .iter()
        .map(|src| {
            (0..model.n_components())
                .map(|c| {
                    let comp: Vec<f64> = s.iter().map(|row| row[c]).collect();
                    corr(src, &comp).abs()
                })
                .fold(0.0, f64::max)
        })
        .collect()
}

pub struct Whitening {
    pub max_abs_mean: f64,
    /// Largest |cov − I| entry of the training components.
    pub max_cov_error: f64,
    /// Largest |W Wᵀ − I| entry of the unmixing matrix.
    pub max_orthogonality_error: f64,
}

pub fn whitening(model: &IcaModel, x: &FeatureMatrix) -> Whitening {
    let s = components_by_hand(model, x);
    let n = s.len() as f64;
    let c = model.n_components();
    let mut out = Whitening {
        max_abs_mean: 0.0,
        max_cov_error: 0.0,
        max_orthogonality_error: 0.0,
    };
    let w = &model.unmix;
    let ww = w * w.transpose();
    for i in 0..c {
        let mean: f64 = s.iter().map(|r| r[i]).sum::<f64>() / n;
        out.max_abs_mean = out.max_abs_mean.max(mean.abs());
        for j in 0..c {
            let cov: f64 = s.iter().map(|r| r[i] * r[j]).sum::<f64>() / n;
            let eye = if i == j { 1.0 } else { 0.0 };
            out.max_cov_error = out.max_cov_error.max((cov - eye).abs());
            out.max_orthogonality_error = out.max_orthogonality_error.max((ww[(i, j)] - eye).abs());
        }
    }
    out
}

/// `1 − ‖X − X̂_i‖²_F / ‖X‖²_F` evaluated from scratch.
pub fn ev_oracle(model: &IcaModel, x: &FeatureMatrix, i: usize) -> f64 {
    let s = components_by_hand(model, x);
    let mut num = 0.0;
    let mut den = 0.0;
    for r in 0..x.rows {
        let mut keep = vec![0.0; model.n_components()];
        keep[i] = s[r][i];
        for j in 0..x.cols {
            let mut xhat = model.mean[j];
            for (k, sk) in keep.iter().enumerate() {
                xhat += model.mixing[(j, k)] * sk;
            }
            let v = x.values[r * x.cols + j];
            num += (v - xhat).powi(2);
            den += v * v;
        }
    }
    1.0 - num / den
}

/// Weighted statistics of one 11×11 SSIM window with the 2-D Gaussian
/// written out.
pub fn ssim_window(a: &GrayImage, b: &GrayImage, y0: usize, x0: usize) -> f64 {
    let sigma: f64 = 1.5;
    let mut weights = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (mut ma, mut mb) = (0.0, 0.0);
    for i in 0..11 {
        for j in 0..11 {
            let wt = weights[i][j] / total;
            ma += wt * a.at(y0 + i, x0 + j);
            mb += wt * b.at(y0 + i, x0 + j);
        }
    }
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for i in 0..11 {
        for j in 0..11 {
            let wt = weights[i][j] / total;
            let (da, db) = (a.at(y0 + i, x0 + j) - ma, b.at(y0 + i, x0 + j) - mb);
            va += wt * da * da;
            vb += wt * db * db;
            cov += wt * da * db;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

pub fn random_backbone_config(rng: &mut ChaCha8Rng, size: usize) -> BackboneConfig {
    let channels = if rng.gen_bool(0.5) { 3 } else { 1 };
    let mut stages = Vec::new();
    let mut side = size;
    for s in 0..3 {
        let kernel = *[1usize, 2, 3].iter().filter(|&&k| k <= side).last().unwrap();
        let kernel = rng.gen_range(1..=kernel);
        let stride = if side - kernel >= 2 { rng.gen_range(1..=2) } else { 1 };
        let after_conv = (side - kernel) / stride + 1;
        let pooling = match (s, rng.gen_range(0..3)) {
            (2, _) => Pooling::GlobalAverage,
            (_, 0) if after_conv >= 4 => Pooling::Max { size: 2 },
            _ => Pooling::None,
        };
        side = match pooling {
            Pooling::Max { size } => after_conv / size,
            _ => after_conv,
        };
        stages.push(StageSpec {
            name: format!("s{s}"),
            convs: vec![ConvSpec {
                kernel,
                stride,
                filters: rng.gen_range(2..=5),
            }],
            activation: if rng.gen_bool(0.8) { Activation::Relu } else { Activation::Identity },
            pooling,
        });
    }
    BackboneConfig {
        input: InputShape {
            height: size,
            width: size,
            channels,
        },
        stages,
        taps: [(TapId::Early, 0), (TapId::Mid, 1), (TapId::Late, 2)].into(),
        seed: rng.gen(),
    }
}

/// Random linear functional of every tap's Gram matrix.
pub fn gram_loss(seed: u64) -> impl Fn(TapId, &FeatureMap) -> (f64, Vec<f64>) {
    move |tap, map| {
        let g = gram(map);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ tap as u64);
        let coeffs: Vec<f64> = (0..g.values.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = g.values.iter().zip(&coeffs).map(|(a, b)| a * b).sum();
        (loss, gram_backward(map, &coeffs))
    }
}

fn loss_at(backbone: &Backbone, image: &ImageTensor, seed: u64) -> f64 {
    let maps = backbone.forward(image, &TapId::ALL).unwrap();
    let f = gram_loss(seed);
    TapId::ALL.iter().map(|t| f(*t, &maps[t]).0).sum()
}

pub struct GradientCheck {
    pub size: usize,
    pub pixels: usize,
    /// Probes straddling a ReLU or max-pool switch, left out of the comparison.
    pub kinks: usize,
    /// ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖) over the kept pixels.
    pub relative_error: f64,
    /// Analytic loss minus a separate forward evaluation.
    pub loss_mismatch: f64,
}

/// Central differences (step `h`) of a random Gram functional on a random
/// backbone drawn from `rng`, against the analytic input gradient.
pub fn gradient_check(rng: &mut ChaCha8Rng, h: f64) -> GradientCheck {
    let size = rng.gen_range(8..=16);
    let cfg = random_backbone_config(rng, size);
    let backbone = Backbone::new(cfg.clone()).unwrap_or_else(|e| panic!("{e} for {cfg:?}"));
    let c = cfg.input.channels;
    let pixels: Vec<f64> = (0..size * size * c).map(|_| rng.gen_range(0.05..0.95)).collect();
    let image = ImageTensor::new(size, size, c, pixels.clone()).unwrap();
    let loss_seed = rng.gen();
    let analytic = backbone
        .grad_wrt_input(&image, &FnLoss::new(TapId::ALL.to_vec(), gram_loss(loss_seed)))
        .unwrap();
    let base = loss_at(&backbone, &image, loss_seed);

    // A probe whose forward and backward one-sided slopes disagree straddles
    // a point where the loss has no derivative.
    let (mut analytic_kept, mut numeric_kept) = (Vec::new(), Vec::new());
    let mut kinks = 0;
    for i in 0..pixels.len() {
        let mut plus = pixels.clone();
        let mut minus = pixels.clone();
        plus[i] += h;
        minus[i] -= h;
        let lp = loss_at(&backbone, &ImageTensor::new(size, size, c, plus).unwrap(), loss_seed);
        let lm = loss_at(&backbone, &ImageTensor::new(size, size, c, minus).unwrap(), loss_seed);
        let (fwd, bwd) = ((lp - base) / h, (base - lm) / h);
        if (fwd - bwd).abs() > 1e-2 * fwd.abs().max(bwd.abs()).max(1e-6) {
            kinks += 1;
            continue;
        }
        analytic_kept.push(analytic.gradient[i]);
        numeric_kept.push((lp - lm) / (2.0 * h));
    }
    let diff: f64 = analytic_kept.iter().zip(&numeric_kept).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = norm(&analytic_kept).max(norm(&numeric_kept));
    GradientCheck {
        size,
        pixels: pixels.len(),
        kinks,
        relative_error: if scale == 0.0 { diff } else { diff / scale },
        loss_mismatch: analytic.loss - base,
    }
}
