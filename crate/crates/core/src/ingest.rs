//! Daily min/max temperature panels: loading, validation, centering,
//! grid thinning and the native on-disk format.
//!
//! Values are stored variable-major, then year, then site, then day:
//! `[j][ℓ][s][t]` with `t` running over the `T_ℓ` days of year ℓ.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::spatial::Location;

/// Days in a Gregorian year.
pub fn calendar(year: i32) -> usize {
    if NaiveDate::from_ymd_opt(year, 2, 29).is_some() {
        366
    } else {
        365
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub id: String,
    pub location: Location,
    /// Logical grid position (row, col), when sites lie on a lattice.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct YearInfo {
    pub label: i32,
    pub days: usize,
}

/// Dense daily series for both variables, `[j][ℓ][s][t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    n_sites: usize,
    days: Vec<usize>,
    year_start: Vec<usize>,
    per_variable: usize,
    values: Vec<f64>,
}

impl Observations {
    pub fn zeros(n_sites: usize, days: Vec<usize>) -> Self {
        let mut year_start = Vec::with_capacity(days.len());
        let mut acc = 0;
        for &t in &days {
            year_start.push(acc);
            acc += t * n_sites;
        }
        Self { n_sites, days, year_start, per_variable: acc, values: vec![0.0; 2 * acc] }
    }

    pub fn from_values(n_sites: usize, days: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let mut o = Self::zeros(n_sites, days);
        if values.len() != o.values.len() {
            return Err(invalid(format!("expected {} values, got {}", o.values.len(), values.len())));
        }
        o.values = values;
        Ok(o)
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn n_years(&self) -> usize {
        self.days.len()
    }

    pub fn days(&self) -> &[usize] {
        &self.days
    }

    pub fn total_days(&self) -> usize {
        self.days.iter().sum()
    }

    fn offset(&self, var: usize, year: usize, site: usize) -> usize {
        var * self.per_variable + self.year_start[year] + site * self.days[year]
    }

    pub fn series(&self, var: usize, year: usize, site: usize) -> &[f64] {
        let o = self.offset(var, year, site);
        &self.values[o..o + self.days[year]]
    }

    pub fn series_mut(&mut self, var: usize, year: usize, site: usize) -> &mut [f64] {
        let o = self.offset(var, year, site);
        let t = self.days[year];
        &mut self.values[o..o + t]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Every series of one variable in one year, in site order.
    pub fn year_block_mut(&mut self, var: usize, year: usize) -> &mut [f64] {
        let o = self.offset(var, year, 0);
        let len = self.days[year] * self.n_sites;
        &mut self.values[o..o + len]
    }

    fn select_sites(&self, keep: &[usize]) -> Self {
        let mut out = Self::zeros(keep.len(), self.days.clone());
        for j in 0..2 {
            for l in 0..self.n_years() {
                for (new, &old) in keep.iter().enumerate() {
                    out.series_mut(j, l, new).copy_from_slice(self.series(j, l, old));
                }
            }
        }
        out
    }
}

/// Uncentered panel as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPanel {
    pub sites: Vec<Site>,
    pub years: Vec<YearInfo>,
    pub observations: Observations,
}

impl RawPanel {
    /// Validate finiteness and tmin ≤ tmax.
    pub fn new(sites: Vec<Site>, years: Vec<YearInfo>, observations: Observations) -> Result<Self> {
        check_shape(&sites, &years, &observations)?;
        for (l, y) in years.iter().enumerate() {
            for (s, site) in sites.iter().enumerate() {
                let lo = observations.series(0, l, s);
                let hi = observations.series(1, l, s);
                for t in 0..y.days {
                    if !lo[t].is_finite() || !hi[t].is_finite() {
                        return Err(Error::Data(format!("non-finite value at site {} year {} day {}", site.id, y.label, t + 1)));
                    }
                    if lo[t] > hi[t] {
                        return Err(Error::Data(format!(
                            "tmin {} > tmax {} at site {} year {} day {}",
                            lo[t],
                            hi[t],
                            site.id,
                            y.label,
                            t + 1
                        )));
                    }
                }
            }
        }
        Ok(Self { sites, years, observations })
    }
}

fn check_shape(sites: &[Site], years: &[YearInfo], obs: &Observations) -> Result<()> {
    if sites.is_empty() || years.is_empty() {
        return Err(invalid("panel needs at least one site and one year"));
    }
    if obs.n_sites() != sites.len() || obs.days() != years.iter().map(|y| y.days).collect::<Vec<_>>().as_slice() {
        return Err(invalid("observation dimensions do not match site/year metadata"));
    }
    Ok(())
}

/// Centered panel: every (variable, year, site) series has zero mean.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureDataset {
    sites: Vec<Site>,
    years: Vec<YearInfo>,
    observations: Observations,
    /// Removed means, `[j][ℓ][s]`.
    offsets: Vec<f64>,
}

const CENTER_TOL: f64 = 1e-9;

impl TemperatureDataset {
    /// Assemble from already-centered series; offsets in `[j][ℓ][s]` order.
    pub fn from_centered(sites: Vec<Site>, years: Vec<YearInfo>, observations: Observations, offsets: Vec<f64>) -> Result<Self> {
        check_shape(&sites, &years, &observations)?;
        if offsets.len() != 2 * years.len() * sites.len() {
            return Err(invalid("offset array has wrong length"));
        }
        if observations.values().iter().chain(offsets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite value in dataset".into()));
        }
        for j in 0..2 {
            for l in 0..years.len() {
                for s in 0..sites.len() {
                    let z = observations.series(j, l, s);
                    let m = z.iter().sum::<f64>() / z.len() as f64;
                    if m.abs() > CENTER_TOL {
                        return Err(Error::Data(format!("series (var {j}, year {}, site {}) has mean {m}, not centered", years[l].label, sites[s].id)));
                    }
                }
            }
        }
        Ok(Self { sites, years, observations, offsets })
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn locations(&self) -> Vec<Location> {
        self.sites.iter().map(|s| s.location).collect()
    }

    pub fn years(&self) -> &[YearInfo] {
        &self.years
    }

    pub fn observations(&self) -> &Observations {
        &self.observations
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn n_years(&self) -> usize {
        self.years.len()
    }

    pub fn offset(&self, var: usize, year: usize, site: usize) -> f64 {
        self.offsets[(var * self.years.len() + year) * self.sites.len() + site]
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn year_index(&self, label: i32) -> Option<usize> {
        self.years.iter().position(|y| y.label == label)
    }

    /// Re-add the centering offsets.
    pub fn uncentered(&self) -> Observations {
        let mut o = self.observations.clone();
        for j in 0..2 {
            for l in 0..self.n_years() {
                for s in 0..self.n_sites() {
                    let off = self.offset(j, l, s);
                    o.series_mut(j, l, s).iter_mut().for_each(|v| *v += off);
                }
            }
        }
        o
    }

    fn select_sites(&self, keep: &[usize], regrid: impl Fn(&Site) -> Option<(usize, usize)>) -> Self {
        let sites = keep
            .iter()
            .map(|&i| {
                let mut s = self.sites[i].clone();
                s.grid = regrid(&s);
                s
            })
            .collect();
        let mut offsets = Vec::with_capacity(2 * self.n_years() * keep.len());
        for j in 0..2 {
            for l in 0..self.n_years() {
                offsets.extend(keep.iter().map(|&i| self.offset(j, l, i)));
            }
        }
        Self { sites, years: self.years.clone(), observations: self.observations.select_sites(keep), offsets }
    }
}

/// Subtract each (variable, year, site) mean.
pub fn center_by_year(raw: &RawPanel) -> TemperatureDataset {
    let n = raw.sites.len();
    let ly = raw.years.len();
    let mut obs = raw.observations.clone();
    let mut offsets = vec![0.0; 2 * ly * n];
    for j in 0..2 {
        for l in 0..ly {
            for s in 0..n {
                let z = obs.series_mut(j, l, s);
                let m = z.iter().sum::<f64>() / z.len() as f64;
                z.iter_mut().for_each(|v| *v -= m);
                offsets[(j * ly + l) * n + s] = m;
            }
        }
    }
    TemperatureDataset { sites: raw.sites.clone(), years: raw.years.clone(), observations: obs, offsets }
}

/// Column names of the input CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub site_id: String,
    pub x: String,
    pub y: String,
    pub date: String,
    pub tmin: String,
    pub tmax: String,
    /// Optional explicit grid indices; inferred from a regular lattice of
    /// coordinates when absent.
    pub row: Option<String>,
    pub col: Option<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            site_id: "site_id".into(),
            x: "x".into(),
            y: "y".into(),
            date: "date".into(),
            tmin: "tmin".into(),
            tmax: "tmax".into(),
            row: None,
            col: None,
        }
    }
}

struct SiteAccum {
    location: Location,
    grid: Option<(usize, usize)>,
    days: BTreeMap<NaiveDate, (f64, f64)>,
}

/// Read a long-format CSV (one row per site-day) into a complete panel.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<RawPanel> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Data(format!("missing column '{name}' in {}", path.display())))
    };
    let (ci, cx, cy, cd, clo, chi) = (col(&schema.site_id)?, col(&schema.x)?, col(&schema.y)?, col(&schema.date)?, col(&schema.tmin)?, col(&schema.tmax)?);
    let grid_cols = match (&schema.row, &schema.col) {
        (Some(r), Some(c)) => Some((col(r)?, col(c)?)),
        (None, None) => None,
        _ => return Err(invalid("grid row and col columns must be given together")),
    };

    let mut order: Vec<String> = Vec::new();
    let mut acc: HashMap<String, SiteAccum> = HashMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = line + 2;
        let num = |k: usize, what: &str| -> Result<f64> {
            let v: f64 = rec
                .get(k)
                .unwrap_or("")
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("line {line}: cannot parse {what} '{}'", rec.get(k).unwrap_or(""))))?;
            if !v.is_finite() {
                return Err(Error::Data(format!("line {line}: non-finite {what}")));
            }
            Ok(v)
        };
        let id = rec.get(ci).unwrap_or("").trim().to_string();
        let location = Location::new(num(cx, "x")?, num(cy, "y")?);
        let date = NaiveDate::parse_from_str(rec.get(cd).unwrap_or("").trim(), "%Y-%m-%d")
            .map_err(|e| Error::Data(format!("line {line}: bad date: {e}")))?;
        let (lo, hi) = (num(clo, "tmin")?, num(chi, "tmax")?);
        if lo > hi {
            return Err(Error::Data(format!("line {line}: tmin {lo} > tmax {hi} at site {id} on {date}")));
        }
        let grid = match grid_cols {
            Some((r, c)) => {
                let idx = |k: usize| -> Result<usize> {
                    rec.get(k)
                        .unwrap_or("")
                        .trim()
                        .parse()
                        .map_err(|_| Error::Data(format!("line {line}: bad grid index")))
                };
                Some((idx(r)?, idx(c)?))
            }
            None => None,
        };
        let entry = acc.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            SiteAccum { location, grid, days: BTreeMap::new() }
        });
        if entry.location != location || entry.grid != grid {
            return Err(Error::Data(format!("line {line}: site {id} changes coordinates")));
        }
        if entry.days.insert(date, (lo, hi)).is_some() {
            return Err(Error::Data(format!("line {line}: duplicate record for site {id} on {date}")));
        }
    }
    if order.is_empty() {
        return Err(Error::Data(format!("{} has no records", path.display())));
    }

    let all_years: BTreeSet<i32> = acc.values().flat_map(|a| a.days.keys().map(|d| d.year())).collect();
    let (first, last) = (*all_years.first().unwrap(), *all_years.last().unwrap());
    let years: Vec<YearInfo> = (first..=last).map(|y| YearInfo { label: y, days: calendar(y) }).collect();

    let mut gaps = Vec::new();
    for id in &order {
        let a = &acc[id];
        for y in &years {
            let mut d = NaiveDate::from_ymd_opt(y.label, 1, 1).unwrap();
            while d.year() == y.label {
                if !a.days.contains_key(&d) {
                    gaps.push(format!("site {id}: {d}"));
                }
                d = d.succ_opt().unwrap();
            }
        }
    }
    if !gaps.is_empty() {
        return Err(Error::IncompletePanel { gaps });
    }

    let mut sites: Vec<Site> = order.iter().map(|id| Site { id: id.clone(), location: acc[id].location, grid: acc[id].grid }).collect();
    if grid_cols.is_none() {
        infer_grid(&mut sites);
    }
    let mut obs = Observations::zeros(sites.len(), years.iter().map(|y| y.days).collect());
    for (s, id) in order.iter().enumerate() {
        let a = &acc[id];
        for (l, y) in years.iter().enumerate() {
            let vals: Vec<(f64, f64)> = a.days.range(NaiveDate::from_ymd_opt(y.label, 1, 1).unwrap()..NaiveDate::from_ymd_opt(y.label + 1, 1, 1).unwrap()).map(|(_, v)| *v).collect();
            for (t, (lo, hi)) in vals.into_iter().enumerate() {
                obs.series_mut(0, l, s)[t] = lo;
                obs.series_mut(1, l, s)[t] = hi;
            }
        }
    }
    RawPanel::new(sites, years, obs)
}

/// Assign (row, col) when coordinates form a regular lattice.
fn infer_grid(sites: &mut [Site]) {
    fn axis(values: impl Iterator<Item = f64>) -> Option<Vec<f64>> {
        let mut v: Vec<f64> = values.collect();
        v.sort_by(f64::total_cmp);
        v.dedup();
        if v.len() > 2 {
            let step = v[1] - v[0];
            if v.windows(2).any(|w| ((w[1] - w[0]) - step).abs() > 1e-6 * step.abs().max(1e-300)) {
                return None;
            }
        }
        Some(v)
    }
    let (Some(xs), Some(ys)) = (axis(sites.iter().map(|s| s.location.x)), axis(sites.iter().map(|s| s.location.y))) else {
        return;
    };
    let mut seen = BTreeSet::new();
    for s in sites.iter() {
        let r = ys.binary_search_by(|v| v.total_cmp(&s.location.y)).unwrap();
        let c = xs.binary_search_by(|v| v.total_cmp(&s.location.x)).unwrap();
        if !seen.insert((r, c)) {
            return;
        }
    }
    for s in sites.iter_mut() {
        let r = ys.binary_search_by(|v| v.total_cmp(&s.location.y)).unwrap();
        let c = xs.binary_search_by(|v| v.total_cmp(&s.location.x)).unwrap();
        s.grid = Some((r, c));
    }
}

/// Write a panel in the long CSV format read by [`load_csv`]. Day counts
/// must follow the Gregorian calendar.
pub fn write_csv(path: &Path, sites: &[Site], years: &[YearInfo], obs: &Observations) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let with_grid = sites.iter().all(|s| s.grid.is_some());
    let mut header = vec!["site_id", "x", "y", "date", "tmin", "tmax"];
    if with_grid {
        header.extend(["row", "col"]);
    }
    w.write_record(&header)?;
    for (s, site) in sites.iter().enumerate() {
        for (l, y) in years.iter().enumerate() {
            if calendar(y.label) != y.days {
                return Err(invalid(format!("year {} has {} days; CSV export needs calendar years", y.label, y.days)));
            }
            let mut d = NaiveDate::from_ymd_opt(y.label, 1, 1).unwrap();
            let (lo, hi) = (obs.series(0, l, s), obs.series(1, l, s));
            for t in 0..y.days {
                let mut rec = vec![
                    site.id.clone(),
                    site.location.x.to_string(),
                    site.location.y.to_string(),
                    d.format("%Y-%m-%d").to_string(),
                    lo[t].to_string(),
                    hi[t].to_string(),
                ];
                if let Some((r, c)) = site.grid {
                    rec.push(r.to_string());
                    rec.push(c.to_string());
                }
                w.write_record(&rec)?;
                d = d.succ_opt().unwrap();
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn grid_of(site: &Site) -> Result<(usize, usize)> {
    site.grid.ok_or_else(|| invalid(format!("site {} has no grid indices", site.id)))
}

/// Indices of sites whose grid position is ≡ 0 modulo `stride` on both axes.
pub fn thin_indices(sites: &[Site], stride: (usize, usize)) -> Result<Vec<usize>> {
    let (kx, ky) = stride;
    if kx == 0 || ky == 0 {
        return Err(invalid("thinning stride must be positive"));
    }
    let mut keep = Vec::new();
    for (i, s) in sites.iter().enumerate() {
        let (r, c) = grid_of(s)?;
        if c % kx == 0 && r % ky == 0 {
            keep.push(i);
        }
    }
    Ok(keep)
}

/// Keep every `stride`-th grid column (x) and row (y). Kept sites are
/// re-indexed on the coarser grid, so strides compose multiplicatively.
pub fn thin_grid(dataset: &TemperatureDataset, stride: (usize, usize)) -> Result<TemperatureDataset> {
    let keep = thin_indices(dataset.sites(), stride)?;
    if keep.is_empty() {
        return Err(invalid("thinning removed every site"));
    }
    Ok(dataset.select_sites(&keep, |s| s.grid.map(|(r, c)| (r / stride.1, c / stride.0))))
}

/// Rectangular window of grid indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCrop {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
}

/// Window of the 349×277 North American Lambert conformal grid that,
/// thinned with stride (2, 2), yields 71 × 51 = 3621 sites.
pub const NORTH_AMERICA_CROP: GridCrop = GridCrop { rows: 70..171, cols: 96..237 };

pub fn crop_indices(sites: &[Site], crop: &GridCrop) -> Result<Vec<usize>> {
    let mut keep = Vec::new();
    for (i, s) in sites.iter().enumerate() {
        let (r, c) = grid_of(s)?;
        if crop.rows.contains(&r) && crop.cols.contains(&c) {
            keep.push(i);
        }
    }
    Ok(keep)
}

/// Restrict to a grid window; indices are re-based to the window origin.
pub fn crop_grid(dataset: &TemperatureDataset, crop: &GridCrop) -> Result<TemperatureDataset> {
    let keep = crop_indices(dataset.sites(), crop)?;
    if keep.is_empty() {
        return Err(invalid("crop window contains no sites"));
    }
    Ok(dataset.select_sites(&keep, |s| s.grid.map(|(r, c)| (r - crop.rows.start, c - crop.cols.start))))
}

pub const DATASET_FORMAT: &str = "seasonal-dstm-dataset/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetMeta {
    format: String,
    layout: String,
    n_sites: usize,
    n_years: usize,
    sites: Vec<Site>,
    years: Vec<YearInfo>,
    values_file: String,
    values_sha256: String,
    offsets_file: String,
    offsets_sha256: String,
}

pub(crate) fn f64_le_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub(crate) fn f64_from_le_bytes(bytes: &[u8]) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return Err(Error::Data("binary array length is not a multiple of 8".into()));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Persist as `dataset.json` plus `values.bin` / `offsets.bin`
/// (little-endian f64, `[j][ℓ][s][t]` and `[j][ℓ][s]`).
pub fn save_dataset(dataset: &TemperatureDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let values = f64_le_bytes(dataset.observations.values());
    let offsets = f64_le_bytes(&dataset.offsets);
    let meta = DatasetMeta {
        format: DATASET_FORMAT.into(),
        layout: "f64 little-endian; values [variable][year][site][day], offsets [variable][year][site]; variable 0 = tmin, 1 = tmax".into(),
        n_sites: dataset.n_sites(),
        n_years: dataset.n_years(),
        sites: dataset.sites.clone(),
        years: dataset.years.clone(),
        values_file: "values.bin".into(),
        values_sha256: sha256_hex(&values),
        offsets_file: "offsets.bin".into(),
        offsets_sha256: sha256_hex(&offsets),
    };
    fs::write(dir.join("values.bin"), values)?;
    fs::write(dir.join("offsets.bin"), offsets)?;
    fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<TemperatureDataset> {
    let meta: DatasetMeta = serde_json::from_slice(&fs::read(dir.join("dataset.json"))?)?;
    if meta.format != DATASET_FORMAT {
        return Err(Error::Data(format!("unsupported dataset format '{}'", meta.format)));
    }
    let read = |file: &str, sha: &str| -> Result<Vec<f64>> {
        let bytes = fs::read(dir.join(file))?;
        if sha256_hex(&bytes) != sha {
            return Err(Error::Data(format!("checksum mismatch for {file}")));
        }
        f64_from_le_bytes(&bytes)
    };
    let values = read(&meta.values_file, &meta.values_sha256)?;
    let offsets = read(&meta.offsets_file, &meta.offsets_sha256)?;
    let obs = Observations::from_values(meta.sites.len(), meta.years.iter().map(|y| y.days).collect(), values)?;
    TemperatureDataset::from_centered(meta.sites, meta.years, obs, offsets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;
    use std::io::Write;

    fn grid_sites(nx: usize, ny: usize) -> Vec<Site> {
        let mut v = Vec::new();
        for r in 0..ny {
            for c in 0..nx {
                v.push(Site { id: format!("r{r}c{c}"), location: Location::new(c as f64 * 10.0, r as f64 * 10.0), grid: Some((r, c)) });
            }
        }
        v
    }

    fn panel(nx: usize, ny: usize, years: &[i32], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> RawPanel {
        let sites = grid_sites(nx, ny);
        let years: Vec<YearInfo> = years.iter().map(|&y| YearInfo { label: y, days: calendar(y) }).collect();
        let mut obs = Observations::zeros(sites.len(), years.iter().map(|y| y.days).collect());
        for j in 0..2 {
            for l in 0..years.len() {
                for s in 0..sites.len() {
                    for (t, v) in obs.series_mut(j, l, s).iter_mut().enumerate() {
                        *v = f(j, l, s, t);
                    }
                }
            }
        }
        RawPanel::new(sites, years, obs).unwrap()
    }

    #[test]
    fn calendar_years() {
        assert_eq!(calendar(1980), 366);
        assert_eq!(calendar(1979), 365);
        assert_eq!(calendar(2000), 366);
        assert_eq!(calendar(1900), 365);
    }

    #[test]
    fn centering_examples() {
        let raw = panel(1, 1, &[1979], |j, _, _, _| 3.0 + j as f64);
        let d = center_by_year(&raw);
        assert!(d.observations().values().iter().all(|&v| v == 0.0));
        assert_eq!(d.offset(0, 0, 0), 3.0);
        assert_eq!(d.offset(1, 0, 0), 4.0);

        let raw = panel(1, 1, &[1979], |j, _, _, t| 5.0 * j as f64 + (2.0 * PI * t as f64 / 365.0).cos());
        let d = center_by_year(&raw);
        assert!(d.offset(0, 0, 0).abs() < 1e-12);
        for (a, b) in d.observations().series(0, 0, 0).iter().zip(raw.observations.series(0, 0, 0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn centering_round_trip_random() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let noise: Vec<f64> = (0..2 * 2 * 6 * 366).map(|_| rng.random_range(-10.0..10.0)).collect();
        let raw = panel(3, 2, &[1979, 1980], |j, l, s, t| noise[((l * 6 + s) * 366 + t) % noise.len()] - 20.0 + 30.0 * j as f64);
        let d = center_by_year(&raw);
        for j in 0..2 {
            for l in 0..2 {
                for s in 0..6 {
                    let m: f64 = d.observations().series(j, l, s).iter().sum::<f64>();
                    assert!(m.abs() / 366.0 < 1e-9);
                }
            }
        }
        let back = d.uncentered();
        for (a, b) in back.values().iter().zip(raw.observations.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn raw_validation() {
        let sites = grid_sites(1, 1);
        let years = vec![YearInfo { label: 1979, days: 365 }];
        let mut obs = Observations::zeros(1, vec![365]);
        obs.series_mut(0, 0, 0)[10] = 1.0;
        assert!(matches!(RawPanel::new(sites.clone(), years.clone(), obs.clone()), Err(Error::Data(_))));
        obs.series_mut(0, 0, 0)[10] = f64::NAN;
        assert!(matches!(RawPanel::new(sites, years, obs), Err(Error::Data(_))));
    }

    #[test]
    fn thinning() {
        let raw = panel(4, 4, &[1979], |j, _, s, t| j as f64 * 10.0 + s as f64 + t as f64 * 0.01);
        let d = center_by_year(&raw);
        let same = thin_grid(&d, (1, 1)).unwrap();
        assert_eq!(same, d);
        let t2 = thin_grid(&d, (2, 2)).unwrap();
        assert_eq!(t2.n_sites(), 4);
        assert_eq!(t2.sites().iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["r0c0", "r0c2", "r2c0", "r2c2"]);
        assert_eq!(t2.observations().series(1, 0, 1), d.observations().series(1, 0, 2));
        let big = center_by_year(&panel(8, 8, &[1979], |j, _, _, _| j as f64));
        let twice = thin_grid(&thin_grid(&big, (2, 2)).unwrap(), (2, 2)).unwrap();
        let once = thin_grid(&big, (4, 4)).unwrap();
        assert_eq!(twice, once);

        let mut bad = d.clone();
        bad.sites[0].grid = None;
        assert!(thin_grid(&bad, (2, 2)).is_err());
    }

    #[test]
    fn reference_crop_yields_3621_sites() {
        let sites: Vec<Site> = (0..277)
            .flat_map(|r| (0..349).map(move |c| Site { id: format!("{r}-{c}"), location: Location::new(c as f64, r as f64), grid: Some((r, c)) }))
            .collect();
        let window = crop_indices(&sites, &NORTH_AMERICA_CROP).unwrap();
        let rebased: Vec<Site> = window
            .iter()
            .map(|&i| {
                let mut s = sites[i].clone();
                let (r, c) = s.grid.unwrap();
                s.grid = Some((r - NORTH_AMERICA_CROP.rows.start, c - NORTH_AMERICA_CROP.cols.start));
                s
            })
            .collect();
        assert_eq!(thin_indices(&rebased, (2, 2)).unwrap().len(), 3621);
    }

    fn write_lines(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn year_rows(site: &str, year: i32, skip: Option<u32>) -> Vec<String> {
        let mut d = NaiveDate::from_ymd_opt(year, 1, 1).unwrap();
        let mut out = Vec::new();
        while d.year() == year {
            if Some(d.ordinal()) != skip {
                let t = d.ordinal() as f64;
                out.push(format!("{site},1.5,2.5,{},{},{}", d, -3.0 + (t / 58.0).sin(), 12.0 + (t / 58.0).sin()));
            }
            d = d.succ_opt().unwrap();
        }
        out
    }

    #[test]
    fn csv_single_site_year() {
        let mut lines = vec!["site_id,x,y,date,tmin,tmax".to_string()];
        lines.extend(year_rows("a", 1979, None));
        let f = write_lines(&lines);
        let p = load_csv(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!(p.sites.len(), 1);
        assert_eq!(p.years, vec![YearInfo { label: 1979, days: 365 }]);
        assert_eq!(p.observations.series(1, 0, 0).len(), 365);
    }

    #[test]
    fn csv_missing_day_is_reported() {
        let mut lines = vec!["site_id,x,y,date,tmin,tmax".to_string()];
        lines.extend(year_rows("a", 1979, Some(45)));
        let f = write_lines(&lines);
        match load_csv(f.path(), &CsvSchema::default()) {
            Err(Error::IncompletePanel { gaps }) => assert_eq!(gaps, vec!["site a: 1979-02-14".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_rejects_bad_values() {
        let mut lines = vec!["site_id,x,y,date,tmin,tmax".to_string()];
        lines.extend(year_rows("a", 1979, None));
        lines[5] = "a,1.5,2.5,1979-01-05,20.0,10.0".into();
        let f = write_lines(&lines);
        let err = load_csv(f.path(), &CsvSchema::default()).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains("tmin")), "{err}");
        lines[5] = "a,1.5,2.5,1979-01-05,NaN,10.0".into();
        let f = write_lines(&lines);
        assert!(matches!(load_csv(f.path(), &CsvSchema::default()), Err(Error::Data(_))));
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let raw = panel(3, 2, &[1979, 1980], |j, _, _, _| rng.random_range(-20.0..0.0) + 25.0 * j as f64);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        write_csv(&path, &raw.sites, &raw.years, &raw.observations).unwrap();
        let back = load_csv(&path, &CsvSchema { row: Some("row".into()), col: Some("col".into()), ..CsvSchema::default() }).unwrap();
        assert_eq!(back, raw);
        // Without the explicit grid columns the lattice is inferred.
        let inferred = load_csv(&path, &CsvSchema::default()).unwrap();
        assert_eq!(inferred.sites, raw.sites);
    }

    #[test]
    fn native_format_round_trip() {
        let raw = panel(2, 2, &[1979, 1980], |j, l, s, t| (t as f64 * 0.1).sin() * (1.0 + s as f64) + l as f64 + 10.0 * j as f64);
        let d = center_by_year(&raw);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), d);
        let mut bytes = fs::read(dir.path().join("values.bin")).unwrap();
        bytes[0] ^= 1;
        fs::write(dir.path().join("values.bin"), bytes).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}
