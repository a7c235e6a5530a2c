//! Retained posterior draws, in memory and on disk.
//!
//! On-disk layout of a draw directory:
//!
//! - `draws.json`: dimensions, sites, years, sampler config, hyperparameters.
//! - `beta_NNNNN.bin`: f64 little-endian, `[draw][site][ℓ = 0..=L][8]`.
//! - `variance_NNNNN.bin`: f64 little-endian, per draw Σ_β (64, row-major),
//!   σ²_ε (`[j][s]`, 2n), σ²_q (8).
//! - `chunks.json`: chunk files with draw counts and SHA-256 digests.
//! - `trace.csv`: one row per sweep, burn-in included.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gibbs::{DrawSink, Hyperparameters, ModelState, SamplerConfig};
use crate::harmonic::{CoefMatrix, CoefVector, STATE_DIM};
use crate::ingest::{f64_from_le_bytes, f64_le_bytes, sha256_hex, Site, YearInfo};

pub const DRAWS_FORMAT: &str = "seasonal-dstm-draws/1";

pub const COEF_LABELS: [&str; STATE_DIM] = ["tmin_a1", "tmin_b1", "tmin_a2", "tmin_b2", "tmax_a1", "tmax_b1", "tmax_a2", "tmax_b2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawMetadata {
    pub format: String,
    pub layout: String,
    pub n_sites: usize,
    /// Fitted years L; β has L + 1 slots per site, slot 0 being β_0.
    pub n_years: usize,
    pub n_knots: usize,
    pub sites: Vec<Site>,
    pub years: Vec<YearInfo>,
    pub phi: f64,
    pub jitter: f64,
    pub sampler: SamplerConfig,
    pub hyperparameters: Hyperparameters,
    pub n_draws: usize,
    /// 1-based sweep index of each retained draw.
    pub sweeps: Vec<usize>,
}

impl DrawMetadata {
    pub fn new(
        sites: Vec<Site>,
        years: Vec<YearInfo>,
        n_knots: usize,
        phi: f64,
        jitter: f64,
        sampler: SamplerConfig,
        hyperparameters: Hyperparameters,
    ) -> Self {
        Self {
            format: DRAWS_FORMAT.into(),
            layout: "f64 little-endian; beta [draw][site][slot 0..=L][8 coefficients: tmin a1 b1 a2 b2, tmax a1 b1 a2 b2]; variance [draw][Sigma_beta 64 row-major, sigma2_eps [variable][site], sigma2_w 8]".into(),
            n_sites: sites.len(),
            n_years: years.len(),
            n_knots,
            sites,
            years,
            phi,
            jitter,
            sampler,
            hyperparameters,
            n_draws: 0,
            sweeps: Vec::new(),
        }
    }

    fn beta_len(&self) -> usize {
        self.n_sites * (self.n_years + 1) * STATE_DIM
    }

    fn variance_len(&self) -> usize {
        STATE_DIM * STATE_DIM + 2 * self.n_sites + STATE_DIM
    }

    fn check_state(&self, state: &ModelState) -> Result<()> {
        if state.n_sites() != self.n_sites || state.n_years() != self.n_years {
            return Err(invalid("state dimensions do not match draw metadata"));
        }
        Ok(())
    }
}

fn encode_variances(state: &ModelState, out: &mut Vec<f64>) {
    for i in 0..STATE_DIM {
        for j in 0..STATE_DIM {
            out.push(state.sigma_beta[(i, j)]);
        }
    }
    out.extend_from_slice(state.sigma2_eps_all());
    out.extend_from_slice(&state.sigma2_w);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkEntry {
    pub draws: usize,
    pub beta_file: String,
    pub beta_sha256: String,
    pub variance_file: String,
    pub variance_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkManifest {
    pub chunks: Vec<ChunkEntry>,
}

/// Retained draws held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub meta: DrawMetadata,
    beta: Vec<f64>,
    variance: Vec<f64>,
}

impl PosteriorDraws {
    pub fn new(meta: DrawMetadata) -> Self {
        let mut meta = meta;
        meta.n_draws = 0;
        meta.sweeps.clear();
        Self { meta, beta: Vec::new(), variance: Vec::new() }
    }

    pub fn n_draws(&self) -> usize {
        self.meta.n_draws
    }

    pub fn n_sites(&self) -> usize {
        self.meta.n_sites
    }

    pub fn n_years(&self) -> usize {
        self.meta.n_years
    }

    pub fn push(&mut self, sweep: usize, state: &ModelState) -> Result<()> {
        self.meta.check_state(state)?;
        self.beta.extend(state.beta_flat());
        encode_variances(state, &mut self.variance);
        self.meta.n_draws += 1;
        self.meta.sweeps.push(sweep);
        Ok(())
    }

    /// β at slot `slot` (0 = β_0, ℓ = fitted year index + 1).
    pub fn beta(&self, draw: usize, slot: usize, site: usize) -> CoefVector {
        let o = ((draw * self.meta.n_sites + site) * (self.meta.n_years + 1) + slot) * STATE_DIM;
        CoefVector::from_column_slice(&self.beta[o..o + STATE_DIM])
    }

    /// β for fitted year `year` (zero-based into `meta.years`).
    pub fn beta_year(&self, draw: usize, year: usize, site: usize) -> CoefVector {
        self.beta(draw, year + 1, site)
    }

    fn variance_record(&self, draw: usize) -> &[f64] {
        let len = self.meta.variance_len();
        &self.variance[draw * len..(draw + 1) * len]
    }

    pub fn sigma_beta(&self, draw: usize) -> CoefMatrix {
        let v = self.variance_record(draw);
        CoefMatrix::from_fn(|i, j| v[i * STATE_DIM + j])
    }

    pub fn sigma2_eps(&self, draw: usize, var: usize, site: usize) -> f64 {
        self.variance_record(draw)[STATE_DIM * STATE_DIM + var * self.meta.n_sites + site]
    }

    pub fn sigma2_w(&self, draw: usize) -> [f64; STATE_DIM] {
        let v = self.variance_record(draw);
        let o = STATE_DIM * STATE_DIM + 2 * self.meta.n_sites;
        v[o..o + STATE_DIM].try_into().unwrap()
    }

    /// Draws at the given indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut out = Self::new(self.meta.clone());
        let (bl, vl) = (self.meta.beta_len(), self.meta.variance_len());
        for &d in indices {
            if d >= self.n_draws() {
                return Err(invalid(format!("draw {d} out of range")));
            }
            out.beta.extend_from_slice(&self.beta[d * bl..(d + 1) * bl]);
            out.variance.extend_from_slice(&self.variance[d * vl..(d + 1) * vl]);
            out.meta.n_draws += 1;
            out.meta.sweeps.push(self.meta.sweeps[d]);
        }
        Ok(out)
    }

    pub fn year_index(&self, label: i32) -> Option<usize> {
        self.meta.years.iter().position(|y| y.label == label)
    }

    /// Read a draw directory, verifying every chunk checksum.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta: DrawMetadata = serde_json::from_slice(&fs::read(dir.join("draws.json"))?)?;
        if meta.format != DRAWS_FORMAT {
            return Err(Error::Data(format!("unsupported draw format '{}'", meta.format)));
        }
        let manifest: ChunkManifest = serde_json::from_slice(&fs::read(dir.join("chunks.json"))?)?;
        let mut out = Self::new(meta.clone());
        for c in &manifest.chunks {
            for (file, sha, len, dst) in [
                (&c.beta_file, &c.beta_sha256, meta.beta_len(), &mut out.beta),
                (&c.variance_file, &c.variance_sha256, meta.variance_len(), &mut out.variance),
            ] {
                let bytes = fs::read(dir.join(file))?;
                if &sha256_hex(&bytes) != sha {
                    return Err(Error::Data(format!("checksum mismatch for {file}")));
                }
                let values = f64_from_le_bytes(&bytes)?;
                if values.len() != c.draws * len {
                    return Err(Error::Data(format!("{file} has {} values, expected {}", values.len(), c.draws * len)));
                }
                dst.extend(values);
            }
        }
        out.meta = meta;
        if out.beta.len() != out.meta.n_draws * out.meta.beta_len() || out.meta.sweeps.len() != out.meta.n_draws {
            return Err(Error::Data("draw count in metadata does not match chunks".into()));
        }
        Ok(out)
    }
}

impl DrawSink for PosteriorDraws {
    fn record_draw(&mut self, sweep: usize, state: &ModelState) -> Result<()> {
        self.push(sweep, state)
    }
}

/// Streams retained draws to chunk files and every sweep to `trace.csv`.
pub struct DrawWriter {
    dir: PathBuf,
    meta: DrawMetadata,
    chunk_draws: usize,
    beta: Vec<f64>,
    variance: Vec<f64>,
    pending: usize,
    manifest: ChunkManifest,
    trace: BufWriter<File>,
}

impl DrawWriter {
    pub fn create(dir: &Path, meta: DrawMetadata, chunk_draws: usize) -> Result<Self> {
        if chunk_draws == 0 {
            return Err(invalid("chunk size must be positive"));
        }
        fs::create_dir_all(dir)?;
        let mut trace = BufWriter::new(File::create(dir.join("trace.csv"))?);
        let mut header = vec!["sweep".to_string()];
        header.extend(COEF_LABELS.iter().map(|c| format!("sigma_beta_{c}")));
        header.extend(COEF_LABELS.iter().map(|c| format!("sigma2_w_{c}")));
        header.push("sigma2_eps_tmin_mean".into());
        header.push("sigma2_eps_tmax_mean".into());
        writeln!(trace, "{}", header.join(","))?;
        let mut meta = meta;
        meta.n_draws = 0;
        meta.sweeps.clear();
        Ok(Self { dir: dir.to_path_buf(), meta, chunk_draws, beta: Vec::new(), variance: Vec::new(), pending: 0, manifest: ChunkManifest { chunks: Vec::new() }, trace })
    }

    fn flush_chunk(&mut self) -> Result<()> {
        if self.pending == 0 {
            return Ok(());
        }
        let k = self.manifest.chunks.len();
        let beta = f64_le_bytes(&self.beta);
        let variance = f64_le_bytes(&self.variance);
        let entry = ChunkEntry {
            draws: self.pending,
            beta_file: format!("beta_{k:05}.bin"),
            beta_sha256: sha256_hex(&beta),
            variance_file: format!("variance_{k:05}.bin"),
            variance_sha256: sha256_hex(&variance),
        };
        fs::write(self.dir.join(&entry.beta_file), beta)?;
        fs::write(self.dir.join(&entry.variance_file), variance)?;
        self.manifest.chunks.push(entry);
        self.beta.clear();
        self.variance.clear();
        self.pending = 0;
        Ok(())
    }

    /// Write the final chunk, the manifest and the metadata.
    pub fn finish(mut self) -> Result<DrawMetadata> {
        self.flush_chunk()?;
        self.trace.flush()?;
        fs::write(self.dir.join("chunks.json"), serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        fs::write(self.dir.join("draws.json"), serde_json::to_string_pretty(&self.meta)? + "\n")?;
        Ok(self.meta)
    }
}

impl DrawSink for DrawWriter {
    fn record_trace(&mut self, sweep: usize, state: &ModelState) -> Result<()> {
        let n = state.n_sites() as f64;
        let eps = state.sigma2_eps_all();
        let half = state.n_sites();
        let mut row = vec![sweep.to_string()];
        row.extend((0..STATE_DIM).map(|q| state.sigma_beta[(q, q)].to_string()));
        row.extend(state.sigma2_w.iter().map(|v| v.to_string()));
        row.push((eps[..half].iter().sum::<f64>() / n).to_string());
        row.push((eps[half..].iter().sum::<f64>() / n).to_string());
        writeln!(self.trace, "{}", row.join(","))?;
        Ok(())
    }

    fn record_draw(&mut self, sweep: usize, state: &ModelState) -> Result<()> {
        self.meta.check_state(state)?;
        self.beta.extend(state.beta_flat());
        encode_variances(state, &mut self.variance);
        self.pending += 1;
        self.meta.n_draws += 1;
        self.meta.sweeps.push(sweep);
        if self.pending == self.chunk_draws {
            self.flush_chunk()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spatial::Location;
    use rand::{Rng, SeedableRng};

    fn meta(n: usize, l: usize) -> DrawMetadata {
        let sites = (0..n).map(|i| Site { id: format!("s{i}"), location: Location::new(i as f64, 0.0), grid: Some((0, i)) }).collect();
        let years = (0..l).map(|y| YearInfo { label: 2000 + y as i32, days: 365 }).collect();
        DrawMetadata::new(sites, years, 2, 1.0, 1e-8, SamplerConfig::default(), Hyperparameters::default())
    }

    fn random_state(n: usize, l: usize, rng: &mut impl Rng) -> ModelState {
        let mut st = ModelState::new(n, l, 2);
        for s in 0..n {
            for y in 0..=l {
                st.set_beta(y, s, CoefVector::from_fn(|_, _| rng.random()));
            }
            st.set_sigma2_eps(0, s, rng.random());
            st.set_sigma2_eps(1, s, rng.random());
        }
        st.sigma_beta = CoefMatrix::from_fn(|i, j| (i * 8 + j) as f64);
        st.sigma2_w = [rng.random(); 8];
        st
    }

    #[test]
    fn writer_round_trip_across_chunks() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let states: Vec<_> = (0..7).map(|_| random_state(3, 2, &mut rng)).collect();
        let dir = tempfile::tempdir().unwrap();
        let mut w = DrawWriter::create(dir.path(), meta(3, 2), 3).unwrap();
        let mut mem = PosteriorDraws::new(meta(3, 2));
        for (i, s) in states.iter().enumerate() {
            w.record_trace(i + 1, s).unwrap();
            w.record_draw(i + 1, s).unwrap();
            mem.record_draw(i + 1, s).unwrap();
        }
        let m = w.finish().unwrap();
        assert_eq!(m.n_draws, 7);
        let loaded = PosteriorDraws::load(dir.path()).unwrap();
        assert_eq!(loaded, mem);
        let manifest: ChunkManifest = serde_json::from_slice(&fs::read(dir.path().join("chunks.json")).unwrap()).unwrap();
        assert_eq!(manifest.chunks.iter().map(|c| c.draws).collect::<Vec<_>>(), vec![3, 3, 1]);
        for d in 0..7 {
            assert_eq!(loaded.beta(d, 2, 1), *states[d].beta(2, 1));
            assert_eq!(loaded.sigma_beta(d), states[d].sigma_beta);
            assert_eq!(loaded.sigma2_eps(d, 1, 2), states[d].sigma2_eps(1, 2));
            assert_eq!(loaded.sigma2_w(d), states[d].sigma2_w);
        }
        let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
        assert_eq!(trace.lines().count(), 8);

        let mut bytes = fs::read(dir.path().join("beta_00001.bin")).unwrap();
        bytes[3] ^= 0x10;
        fs::write(dir.path().join("beta_00001.bin"), bytes).unwrap();
        assert!(PosteriorDraws::load(dir.path()).is_err());
    }

    #[test]
    fn empty_draw_set_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let w = DrawWriter::create(dir.path(), meta(2, 1), 10).unwrap();
        w.finish().unwrap();
        let d = PosteriorDraws::load(dir.path()).unwrap();
        assert_eq!(d.n_draws(), 0);
    }

    #[test]
    fn subset_selects_draws() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut mem = PosteriorDraws::new(meta(2, 1));
        let states: Vec<_> = (0..4).map(|_| random_state(2, 1, &mut rng)).collect();
        for (i, s) in states.iter().enumerate() {
            mem.push(i + 1, s).unwrap();
        }
        let sub = mem.subset(&[3, 1]).unwrap();
        assert_eq!(sub.n_draws(), 2);
        assert_eq!(sub.beta(0, 1, 0), *states[3].beta(1, 0));
        assert_eq!(sub.meta.sweeps, vec![4, 2]);
        assert!(mem.subset(&[4]).is_err());
    }
}
