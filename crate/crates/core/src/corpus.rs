//! Image corpora: the seeded synthetic texture set and PNG manifests.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: PathBuf,
}

/// Reads a JSON list of `{id, path}`; relative paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for e in &mut entries {
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
    }
    Ok(entries)
}

/// Loads every manifest image, collecting all failures before erroring.
pub fn load_manifest_images(entries: &[ManifestEntry]) -> Result<Vec<(String, ImageTensor)>> {
    let mut images = Vec::with_capacity(entries.len());
    let mut failures = Vec::new();
    for e in entries {
        match ImageTensor::read_png(&e.path) {
            Ok(img) => images.push((e.id.clone(), img)),
            Err(err) => failures.push((e.id.clone(), err.to_string())),
        }
    }
    if !failures.is_empty() {
        return Err(Error::Corpus(failures));
    }
    Ok(images)
}

/// Writes images as PNG under `dir` plus `dir/manifest.json`.
pub fn write_corpus(dir: &Path, images: &[(String, ImageTensor)]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(images.len());
    for (id, img) in images {
        let file = format!("{id}.png");
        img.write_png(&dir.join(&file))?;
        entries.push(ManifestEntry {
            id: id.clone(),
            path: file.into(),
        });
    }
    let manifest = dir.join("manifest.json");
    std::fs::write(&manifest, serde_json::to_vec_pretty(&entries)?).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Seeded synthetic textures: oriented gratings, blurred color noise, blob
/// fields and checkerboards, each mixed with a little pixel noise. Values
/// are already 8-bit quantized so a PNG round trip is lossless.
pub fn desk_corpus(count: usize, size: usize, seed: u64) -> Vec<(String, ImageTensor)> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i as u64);
            let img = texture(&mut rng, i % 4, size).quantized();
            (format!("desk{i:04}"), img)
        })
        .collect()
}

fn texture(rng: &mut ChaCha8Rng, kind: usize, size: usize) -> ImageTensor {
    let n = size * size;
    let mut planes = vec![vec![0.0; n]; 3];
    let base: [f64; 3] = [rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7)];
    let contrast = rng.gen_range(0.1..0.35);
    match kind {
        0 => {
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let freq = rng.gen_range(0.05..0.35);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let tint: [f64; 3] = [rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0)];
            for y in 0..size {
                for x in 0..size {
                    let u = x as f64 * theta.cos() + y as f64 * theta.sin();
                    let v = (freq * u * std::f64::consts::TAU + phase).sin();
                    for c in 0..3 {
                        planes[c][y * size + x] = base[c] + contrast * tint[c] * v;
                    }
                }
            }
        }
        1 => {
            let radius = rng.gen_range(1..5);
            for (c, plane) in planes.iter_mut().enumerate() {
                let noise: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let blurred = box_blur(&noise, size, radius);
                let peak = blurred.iter().fold(1e-9f64, |a, v| a.max(v.abs()));
                for (p, b) in plane.iter_mut().zip(&blurred) {
                    *p = base[c] + contrast * b / peak;
                }
            }
        }
        2 => {
            let blobs = rng.gen_range(4..14);
            for plane in planes.iter_mut() {
                plane.iter_mut().for_each(|p| *p = 0.0);
            }
            for _ in 0..blobs {
                let (cx, cy) = (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64));
                let sigma = rng.gen_range(2.0..8.0);
                let amp: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                for y in 0..size {
                    for x in 0..size {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        let g = (-d2 / (2.0 * sigma * sigma)).exp();
                        for c in 0..3 {
                            planes[c][y * size + x] += amp[c] * g;
                        }
                    }
                }
            }
            for (c, plane) in planes.iter_mut().enumerate() {
                let peak = plane.iter().fold(1e-9f64, |a, v| a.max(v.abs()));
                plane.iter_mut().for_each(|p| *p = base[c] + contrast * *p / peak);
            }
        }
        _ => {
            let cell = rng.gen_range(2..10);
            let tint: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            for y in 0..size {
                for x in 0..size {
                    let s = if (x / cell + y / cell) % 2 == 0 { 1.0 } else { -1.0 };
                    for c in 0..3 {
                        planes[c][y * size + x] = base[c] + contrast * tint[c] * s;
                    }
                }
            }
        }
    }
    let jitter = rng.gen_range(0.01..0.05);
    let mut data = Vec::with_capacity(n * 3);
    for p in 0..n {
        for plane in &planes {
            data.push(plane[p] + jitter * rng.gen_range(-1.0..1.0));
        }
    }
    ImageTensor::from_clamped(size, size, 3, data).expect("valid synthetic texture")
}

fn box_blur(src: &[f64], size: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let at = |x: isize, y: isize| {
        let cx = x.clamp(0, size as isize - 1) as usize;
        let cy = y.clamp(0, size as isize - 1) as usize;
        src[cy * size + cx]
    };
    let mut out = vec![0.0; src.len()];
    let norm = ((2 * r + 1) * (2 * r + 1)) as f64;
    for y in 0..size as isize {
        for x in 0..size as isize {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    acc += at(x + dx, y + dy);
                }
            }
            out[y as usize * size + x as usize] = acc / norm;
        }
    }
    out
}
