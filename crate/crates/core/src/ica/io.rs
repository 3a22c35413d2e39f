//! `MAMEICA1` persistence: a binary container with the five model matrices
//! (mean, whitening, unmixing, combined, mixing) and a JSON sidecar with the
//! tap, fit configuration, explained variances, selection and convergence.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{IcaFitConfig, IcaModel};
use crate::backbone::TapId;
use crate::container;
use crate::error::{Error, Result};

pub const ICA_MAGIC: &[u8] = b"MAMEICA1";

#[derive(Debug, Serialize, Deserialize)]
struct IcaMetadata {
    format: String,
    tap: TapId,
    seed: u64,
    config: IcaFitConfig,
    explained_variance: Vec<f64>,
    selected: Vec<usize>,
    converged: bool,
    iterations: usize,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl IcaModel {
    pub fn matrices_to_bytes(&self) -> Vec<u8> {
        let mut w = container::Writer::new(ICA_MAGIC);
        w.string(self.tap.as_str())
            .matrix(1, self.mean.len(), self.mean.as_slice());
        for m in [&self.whiten, &self.unmix, &self.combined, &self.mixing] {
            w.matrix(m.nrows(), m.ncols(), &row_major(m));
        }
        w.finish()
    }

    pub fn metadata_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&IcaMetadata {
            format: String::from_utf8_lossy(ICA_MAGIC).into_owned(),
            tap: self.tap,
            seed: self.config.seed,
            config: self.config.clone(),
            explained_variance: self.explained_variance.clone(),
            selected: self.selected.clone(),
            converged: self.converged,
            iterations: self.iterations,
        })?)
    }

    pub fn from_parts(bytes: &[u8], metadata: &str) -> Result<Self> {
        let meta: IcaMetadata = serde_json::from_str(metadata)?;
        if meta.format.as_bytes() != ICA_MAGIC {
            return Err(Error::Format(format!("unsupported ICA metadata format {}", meta.format)));
        }
        let mut r = container::Reader::new(bytes, ICA_MAGIC)?;
        let tap: TapId = r.string()?.parse()?;
        if tap != meta.tap {
            return Err(Error::Format(format!("metadata tap {} does not match matrices tap {tap}", meta.tap)));
        }
        let mut read = || -> Result<DMatrix<f64>> {
            let (rows, cols, values) = r.matrix()?;
            Ok(DMatrix::from_row_slice(rows, cols, &values))
        };
        let mean = read()?;
        let (whiten, unmix, combined, mixing) = (read()?, read()?, read()?, read()?);
        r.finish()?;
        let (c, d) = (combined.nrows(), combined.ncols());
        let shapes_ok = mean.nrows() == 1
            && mean.ncols() == d
            && whiten.shape() == (c, d)
            && unmix.shape() == (c, c)
            && mixing.shape() == (d, c)
            && meta.explained_variance.len() == c
            && meta.selected.iter().all(|&i| i < c);
        if !shapes_ok {
            return Err(Error::Format("inconsistent ICA matrix shapes".into()));
        }
        Ok(IcaModel {
            tap,
            config: meta.config,
            mean: DVector::from_row_slice(mean.as_slice()),
            whiten,
            unmix,
            combined,
            mixing,
            explained_variance: meta.explained_variance,
            selected: meta.selected,
            converged: meta.converged,
            iterations: meta.iterations,
        })
    }

    /// Writes `path` (matrices) and `path.json` (metadata).
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.matrices_to_bytes()).map_err(|e| Error::io(path, e))?;
        let meta = metadata_path(path);
        std::fs::write(&meta, self.metadata_json()?).map_err(|e| Error::io(&meta, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let meta = metadata_path(path);
        let json = std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        Self::from_parts(&bytes, &json)
    }
}

pub fn metadata_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
