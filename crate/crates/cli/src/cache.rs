//! Content-addressed store of certified H0 spectra, so that statistics can be
//! recomputed without repeating eigensolves.

use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use qbilliard_core::quantum::{self, BasisSpec, Spectrum};
use qbilliard_core::BilliardShape;
use sha2::{Digest, Sha256};

use crate::pipeline::{io_err, write_with, RunError};

/// Bump when anything that changes computed levels changes.
const CACHE_FORMAT: &str = "qbilliard-spectrum-cache-2";

#[derive(Debug, Clone)]
pub struct SpectrumCache {
    root: PathBuf,
}

/// Hex sha256 over the exact bit patterns of every input of the solve.
pub fn cache_key(shape: &BilliardShape, basis: &BasisSpec, inflation: f64) -> String {
    let mut h = Sha256::new();
    h.update(CACHE_FORMAT.as_bytes());
    for v in [
        shape.width,
        shape.height,
        shape.curvature1,
        shape.offset1,
        shape.curvature2,
        shape.offset2,
        basis.step_height,
        basis.keep_fraction,
        inflation,
    ] {
        h.update(v.to_bits().to_le_bytes());
    }
    h.update((basis.n_max_x as u64).to_le_bytes());
    h.update((basis.n_max_y as u64).to_le_bytes());
    hex::encode(h.finalize())
}

impl SpectrumCache {
    pub fn new(root: PathBuf) -> Result<Self, RunError> {
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Self { root })
    }

    pub fn entry_dir(&self, key: &str) -> PathBuf {
        self.root.join(key)
    }

    /// Certified spectrum with eigenvectors, from the cache when present.
    /// The flag reports a cache hit.
    pub fn stability_check(
        &self,
        shape: &BilliardShape,
        basis: &BasisSpec,
        inflation: f64,
    ) -> Result<(Spectrum, bool), RunError> {
        let key = cache_key(shape, basis, inflation);
        let dir = self.entry_dir(&key);
        if dir.is_dir() {
            match load(&dir) {
                Ok(s) if s.shape == *shape && s.basis == *basis => return Ok((s, true)),
                Ok(_) => log::warn!("cache entry {key} does not match its key; recomputing"),
                Err(e) => log::warn!("cache entry {key} unreadable ({e}); recomputing"),
            }
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        let spectrum = quantum::stability_check(shape, basis, inflation)?;
        store(&self.root, &dir, &spectrum)?;
        Ok((spectrum, false))
    }
}

fn load(dir: &Path) -> Result<Spectrum, RunError> {
    let path = dir.join("spectrum.txt");
    let table = quantum::read_spectrum(BufReader::new(File::open(&path).map_err(io_err(&path))?))?;
    let path = dir.join("eigenvectors.txt");
    let vectors = quantum::read_eigenvectors(BufReader::new(File::open(&path).map_err(io_err(&path))?))?;
    let mut spectrum = table.spectrum;
    if vectors.ncols() != spectrum.len() || vectors.nrows() != spectrum.basis.dimension() {
        return Err(RunError::Cache(format!(
            "eigenvectors are {}x{}, expected {}x{}",
            vectors.nrows(),
            vectors.ncols(),
            spectrum.basis.dimension(),
            spectrum.len()
        )));
    }
    if spectrum.stable_count.is_none() {
        return Err(RunError::Cache("entry was never certified".into()));
    }
    spectrum.eigenvectors = Some(Arc::new(vectors));
    spectrum.warnings = table.meta.into_iter().filter(|(k, _)| k == "warning").map(|(_, v)| v).collect();
    Ok(spectrum)
}

/// Writes into a scratch directory and renames it, so a crash never leaves
/// a half-written entry under a valid key.
fn store(root: &Path, dir: &Path, spectrum: &Spectrum) -> Result<(), RunError> {
    let tmp = root.join(format!(
        ".partial-{}-{}",
        dir.file_name().and_then(|n| n.to_str()).unwrap_or("entry"),
        std::process::id()
    ));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    fs::create_dir_all(&tmp).map_err(io_err(&tmp))?;
    let meta: Vec<(String, String)> = spectrum.warnings.iter().map(|w| ("warning".to_string(), w.clone())).collect();
    write_with(&tmp.join("spectrum.txt"), |w| quantum::write_spectrum(w, spectrum, &meta))?;
    let vectors = spectrum.vectors()?;
    write_with(&tmp.join("eigenvectors.txt"), |w| quantum::write_eigenvectors(w, (**vectors).as_ref()))?;
    fs::rename(&tmp, dir).map_err(io_err(dir))
}
