//! Analytic pencil-beam dose model.
//!
//! Each beam deposits `D0 · exp(−μ·depth) · exp(−(r/σ)²)` in every patient
//! voxel, where depth is measured along the beam axis from the point where the
//! central axis enters the Brain mask and `r` is the off-axis distance.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::case::{Case, VoxelGrid};
use crate::geom::{self, Vec3};

/// Linear attenuation coefficient per mm.
pub const MU_PER_MM: f64 = 0.004;
/// Per-beam values below this fraction of the beam maximum are dropped.
pub const CUTOFF_FRACTION: f64 = 1e-3;
/// Off-axis exponent beyond which the kernel is never evaluated (e^-12 ≪ cutoff).
const MAX_GAUSS_EXPONENT: f64 = 12.0;
const KERNEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DoseError {
    #[error("invalid case: {0}")]
    InvalidCase(String),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("invalid beam: {0}")]
    InvalidBeam(String),
    #[error("influence cache: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamSpec {
    /// Unit propagation direction (source toward isocenter).
    pub direction: Vec3,
    pub isocenter_mm: Vec3,
    pub aperture_radius_mm: f64,
}

impl BeamSpec {
    pub fn new(direction: Vec3, isocenter_mm: Vec3, aperture_radius_mm: f64) -> Self {
        Self { direction, isocenter_mm, aperture_radius_mm }
    }

    pub fn validate(&self) -> Result<(), DoseError> {
        if ((geom::norm(self.direction)) - 1.0).abs() > 1e-9 {
            return Err(DoseError::InvalidBeam(format!("direction {:?} is not unit length", self.direction)));
        }
        if !(self.aperture_radius_mm > 0.0 && self.aperture_radius_mm.is_finite()) {
            return Err(DoseError::InvalidBeam(format!(
                "aperture radius must be > 0, got {}",
                self.aperture_radius_mm
            )));
        }
        if self.isocenter_mm.iter().any(|x| !x.is_finite()) {
            return Err(DoseError::InvalidBeam("isocenter must be finite".into()));
        }
        Ok(())
    }

    pub fn sigma_mm(&self) -> f64 {
        self.aperture_radius_mm / 2.0
    }
}

/// Kernel value for unit `D0`.
pub fn kernel(depth_mm: f64, off_axis_mm: f64, sigma_mm: f64) -> f64 {
    (-MU_PER_MM * depth_mm).exp() * (-(off_axis_mm / sigma_mm).powi(2)).exp()
}

/// Sparse per-voxel dose of one beam at unit weight; indices ascending.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BeamInfluence {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl BeamInfluence {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn get(&self, voxel: usize) -> f64 {
        match self.indices.binary_search(&(voxel as u32)) {
            Ok(k) => self.values[k],
            Err(_) => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoseInfluence {
    case_id: String,
    grid: VoxelGrid,
    d0: f64,
    beams: Vec<BeamInfluence>,
}

impl DoseInfluence {
    pub fn new(
        case_id: impl Into<String>,
        grid: VoxelGrid,
        d0: f64,
        beams: Vec<BeamInfluence>,
    ) -> Result<Self, DoseError> {
        let n = grid.len();
        for (b, beam) in beams.iter().enumerate() {
            if beam.indices.len() != beam.values.len() {
                return Err(DoseError::InvalidCase(format!("beam {b}: index/value length mismatch")));
            }
            if beam.indices.windows(2).any(|w| w[0] >= w[1]) || beam.indices.last().is_some_and(|&i| i as usize >= n) {
                return Err(DoseError::InvalidCase(format!("beam {b}: indices unsorted or out of bounds")));
            }
            if beam.values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(DoseError::InvalidCase(format!("beam {b}: negative or non-finite entry")));
            }
        }
        Ok(Self { case_id: case_id.into(), grid, d0, beams })
    }

    pub fn case_id(&self) -> &str {
        &self.case_id
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    /// Calibration constant applied to every beam.
    pub fn d0(&self) -> f64 {
        self.d0
    }

    pub fn n_beams(&self) -> usize {
        self.beams.len()
    }

    pub fn beam(&self, b: usize) -> &BeamInfluence {
        &self.beams[b]
    }

    pub fn beams(&self) -> &[BeamInfluence] {
        &self.beams
    }

    pub fn nnz(&self) -> usize {
        self.beams.iter().map(BeamInfluence::nnz).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoseDistribution {
    grid: VoxelGrid,
    dose: Vec<f64>,
}

impl DoseDistribution {
    pub fn new(grid: VoxelGrid, dose: Vec<f64>) -> Result<Self, DoseError> {
        if dose.len() != grid.len() {
            return Err(DoseError::InvalidCase(format!("dose has {} voxels but grid has {}", dose.len(), grid.len())));
        }
        if dose.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(DoseError::InvalidCase("dose must be finite and nonnegative".into()));
        }
        Ok(Self { grid, dose })
    }

    pub fn uniform(grid: VoxelGrid, gy: f64) -> Result<Self, DoseError> {
        let n = grid.len();
        Self::new(grid, vec![gy; n])
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.dose
    }

    pub fn get(&self, voxel: usize) -> f64 {
        self.dose[voxel]
    }

    pub fn max(&self) -> f64 {
        self.dose.iter().copied().fold(0.0, f64::max)
    }
}

/// Parameter along `dir` (from `origin`) where the ray first enters a voxel of
/// `inside`, using an exact grid traversal. Falls back to the grid entry
/// point, then to `None` when the ray misses the grid.
pub fn surface_entry(grid: &VoxelGrid, inside: &[bool], origin: Vec3, dir: Vec3) -> Option<f64> {
    let (lo, hi) = grid.bounds();
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
        } else {
            let (ta, tb) = ((lo[a] - origin[a]) / dir[a], (hi[a] - origin[a]) / dir[a]);
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    if t0 > t1 {
        return None;
    }
    let dims = grid.dims();
    let sp = grid.spacing_mm();
    let eps = 1e-9 * sp.iter().copied().fold(f64::INFINITY, f64::min);
    let start = geom::add(origin, geom::scale(dir, t0 + eps));
    let mut cell = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let f = ((start[a] - lo[a]) / sp[a]).floor() as i64;
        cell[a] = f.clamp(0, dims[a] as i64 - 1);
        if dir[a] > 1e-15 {
            step[a] = 1;
            t_max[a] = (lo[a] + (cell[a] + 1) as f64 * sp[a] - origin[a]) / dir[a];
            t_delta[a] = sp[a] / dir[a];
        } else if dir[a] < -1e-15 {
            step[a] = -1;
            t_max[a] = (lo[a] + cell[a] as f64 * sp[a] - origin[a]) / dir[a];
            t_delta[a] = -sp[a] / dir[a];
        }
    }
    let mut t_enter = t0;
    loop {
        let idx = grid.linear_index([cell[0] as usize, cell[1] as usize, cell[2] as usize]);
        if inside[idx] {
            return Some(t_enter);
        }
        let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        if !t_max[a].is_finite() || t_max[a] > t1 {
            return Some(t0);
        }
        t_enter = t_max[a];
        cell[a] += step[a];
        if cell[a] < 0 || cell[a] >= dims[a] as i64 {
            return Some(t0);
        }
        t_max[a] += t_delta[a];
    }
}

/// Unit-D0 influence of one beam restricted to `patient` voxels, before the
/// relative cutoff is applied.
fn raw_beam(grid: &VoxelGrid, patient_bitmap: &[bool], patient: &[u32], beam: &BeamSpec) -> BeamInfluence {
    let dir = beam.direction;
    let iso = beam.isocenter_mm;
    // Ray parameters are measured from the isocenter; trace from well outside the grid.
    let (lo, hi) = grid.bounds();
    let far = geom::dist(lo, hi) + geom::dist(iso, geom::scale(geom::add(lo, hi), 0.5));
    let source = geom::sub(iso, geom::scale(dir, far));
    let t_entry = surface_entry(grid, patient_bitmap, source, dir).map(|t| t - far).unwrap_or(0.0);
    let sigma = beam.sigma_mm();
    let max_r2 = MAX_GAUSS_EXPONENT * sigma * sigma;
    let mut out = BeamInfluence::default();
    for &v in patient {
        let p = geom::sub(grid.center(v as usize), iso);
        let t = geom::dot(p, dir);
        let r2 = (geom::dot(p, p) - t * t).max(0.0);
        if r2 > max_r2 {
            continue;
        }
        let depth = (t - t_entry).max(0.0);
        out.indices.push(v);
        out.values.push(kernel(depth, r2.sqrt(), sigma));
    }
    out
}

fn apply_cutoff(mut b: BeamInfluence, d0: f64) -> BeamInfluence {
    let cut = b.max() * CUTOFF_FRACTION;
    let mut k = 0;
    for j in 0..b.indices.len() {
        if b.values[j] >= cut && b.values[j] > 0.0 {
            b.indices[k] = b.indices[j];
            b.values[k] = b.values[j] * d0;
            k += 1;
        }
    }
    b.indices.truncate(k);
    b.values.truncate(k);
    b
}

/// Voxel used to calibrate `D0`: the one nearest the PTV centroid.
pub fn calibration_voxel(case: &Case) -> usize {
    let c = case.ptv_centroid();
    let grid = case.grid();
    case.grid().voxel_at(c).unwrap_or_else(|| {
        *case
            .ptv()
            .voxels()
            .iter()
            .min_by(|a, b| {
                geom::dist2(grid.center(**a as usize), c).total_cmp(&geom::dist2(grid.center(**b as usize), c))
            })
            .expect("PTV non-empty") as usize
    })
}

pub fn compute_influence(case: &Case) -> Result<DoseInfluence, DoseError> {
    if case.beams().is_empty() {
        return Err(DoseError::InvalidCase(format!("case {} has no beams", case.id())));
    }
    for b in case.beams() {
        b.validate()?;
    }
    let grid = case.grid();
    let patient = case.brain();
    let bitmap = patient.bitmap(grid);
    let raw: Vec<BeamInfluence> =
        case.beams().par_iter().map(|b| raw_beam(grid, &bitmap, patient.voxels(), b)).collect();
    let cal = calibration_voxel(case);
    let total: f64 = raw.iter().map(|b| b.get(cal)).sum();
    if !(total > 0.0) {
        return Err(DoseError::InvalidCase(format!(
            "case {}: beams deliver no dose at the calibration point",
            case.id()
        )));
    }
    let d0 = case.prescription_gy() / total;
    let beams = raw.into_par_iter().map(|b| apply_cutoff(b, d0)).collect();
    tracing::debug!(case = case.id(), beams = case.beams().len(), d0, "computed influence");
    DoseInfluence::new(case.id(), grid.clone(), d0, beams)
}

pub fn compose_dose(influence: &DoseInfluence, weights: &[f64]) -> Result<DoseDistribution, DoseError> {
    if weights.len() != influence.n_beams() {
        return Err(DoseError::InvalidWeights(format!("{} weights for {} beams", weights.len(), influence.n_beams())));
    }
    if let Some((b, w)) = weights.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w >= 0.0)) {
        return Err(DoseError::InvalidWeights(format!("weight {b} is {w}")));
    }
    let mut dose = vec![0.0; influence.grid.len()];
    for (beam, &w) in influence.beams.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for (&i, &v) in beam.indices.iter().zip(&beam.values) {
            dose[i as usize] += w * v;
        }
    }
    Ok(DoseDistribution { grid: influence.grid.clone(), dose })
}

const CACHE_MAGIC: &[u8; 8] = b"SRSINFL1";
const CACHE_VERSION: u32 = 1;

/// Hash of the engine constants; changes whenever cached influence would be stale.
pub fn engine_constants_hash() -> String {
    let mut h = Sha256::new();
    h.update(KERNEL_VERSION.to_le_bytes());
    h.update(MU_PER_MM.to_le_bytes());
    h.update(CUTOFF_FRACTION.to_le_bytes());
    h.update(MAX_GAUSS_EXPONENT.to_le_bytes());
    hex::encode(&h.finalize()[..8])
}

/// Cache key: case id, engine constants and a digest of the case geometry.
pub fn cache_key(case: &Case) -> String {
    let mut h = Sha256::new();
    let file = case.to_file();
    h.update(serde_json::to_vec(&(&file.grid, &file.beams, file.prescription_gy)).expect("serializable"));
    h.update(
        serde_json::to_vec(
            &file
                .structures
                .iter()
                .filter(|s| s.role == crate::case::StructureRole::Brain || s.role == crate::case::StructureRole::Ptv)
                .collect::<Vec<_>>(),
        )
        .expect("serializable"),
    );
    format!("{}:{}:{}", case.id(), engine_constants_hash(), hex::encode(&h.finalize()[..8]))
}

pub fn write_cache(influence: &DoseInfluence, key: &str, mut w: impl Write) -> Result<(), DoseError> {
    let err = |e: std::io::Error| DoseError::Cache(e.to_string());
    w.write_all(CACHE_MAGIC).map_err(err)?;
    w.write_u32::<LittleEndian>(CACHE_VERSION).map_err(err)?;
    w.write_u32::<LittleEndian>(key.len() as u32).map_err(err)?;
    w.write_all(key.as_bytes()).map_err(err)?;
    for d in influence.grid.dims() {
        w.write_u64::<LittleEndian>(d as u64).map_err(err)?;
    }
    for x in influence.grid.spacing_mm().into_iter().chain(influence.grid.origin_mm()) {
        w.write_f64::<LittleEndian>(x).map_err(err)?;
    }
    w.write_f64::<LittleEndian>(influence.d0).map_err(err)?;
    w.write_u64::<LittleEndian>(influence.beams.len() as u64).map_err(err)?;
    for b in &influence.beams {
        w.write_u64::<LittleEndian>(b.nnz() as u64).map_err(err)?;
        for &i in &b.indices {
            w.write_u32::<LittleEndian>(i).map_err(err)?;
        }
        for &v in &b.values {
            w.write_f64::<LittleEndian>(v).map_err(err)?;
        }
    }
    Ok(())
}

/// Reads a cache stream; returns `Ok(None)` when its key differs from `key`.
pub fn read_cache(case_id: &str, key: &str, mut r: impl Read) -> Result<Option<DoseInfluence>, DoseError> {
    let err = |e: std::io::Error| DoseError::Cache(e.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(err)?;
    if &magic != CACHE_MAGIC {
        return Err(DoseError::Cache("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(err)?;
    if version != CACHE_VERSION {
        return Ok(None);
    }
    let klen = r.read_u32::<LittleEndian>().map_err(err)? as usize;
    if klen > 4096 {
        return Err(DoseError::Cache("key too long".into()));
    }
    let mut kbuf = vec![0u8; klen];
    r.read_exact(&mut kbuf).map_err(err)?;
    if kbuf != key.as_bytes() {
        return Ok(None);
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r.read_u64::<LittleEndian>().map_err(err)? as usize;
    }
    let mut f = [0.0; 6];
    for x in &mut f {
        *x = r.read_f64::<LittleEndian>().map_err(err)?;
    }
    let grid =
        VoxelGrid::new(dims, [f[0], f[1], f[2]], [f[3], f[4], f[5]]).map_err(|e| DoseError::Cache(e.to_string()))?;
    let d0 = r.read_f64::<LittleEndian>().map_err(err)?;
    let nb = r.read_u64::<LittleEndian>().map_err(err)? as usize;
    let mut beams = Vec::with_capacity(nb.min(1 << 16));
    for _ in 0..nb {
        let nnz = r.read_u64::<LittleEndian>().map_err(err)? as usize;
        if nnz > grid.len() {
            return Err(DoseError::Cache("beam nnz exceeds grid size".into()));
        }
        let mut indices = vec![0u32; nnz];
        r.read_u32_into::<LittleEndian>(&mut indices).map_err(err)?;
        let mut values = vec![0f64; nnz];
        r.read_f64_into::<LittleEndian>(&mut values).map_err(err)?;
        beams.push(BeamInfluence { indices, values });
    }
    DoseInfluence::new(case_id, grid, d0, beams).map(Some).map_err(|e| DoseError::Cache(e.to_string()))
}

pub fn cache_path(dir: &Path, case: &Case) -> PathBuf {
    dir.join(format!("{}.infl", case.id()))
}

/// Loads influence from `dir` when a matching cache file exists, otherwise
/// computes it and writes the cache.
pub fn compute_influence_cached(case: &Case, dir: &Path) -> Result<DoseInfluence, DoseError> {
    let key = cache_key(case);
    let path = cache_path(dir, case);
    if let Ok(file) = std::fs::File::open(&path) {
        match read_cache(case.id(), &key, std::io::BufReader::new(file)) {
            Ok(Some(inf)) => return Ok(inf),
            Ok(None) => tracing::info!(path = %path.display(), "stale influence cache"),
            Err(e) => tracing::warn!(path = %path.display(), error = %e, "unreadable influence cache"),
        }
    }
    let inf = compute_influence(case)?;
    std::fs::create_dir_all(dir).map_err(|e| DoseError::Cache(e.to_string()))?;
    let file = std::fs::File::create(&path).map_err(|e| DoseError::Cache(e.to_string()))?;
    let mut w = std::io::BufWriter::new(file);
    write_cache(&inf, &key, &mut w)?;
    w.flush().map_err(|e| DoseError::Cache(e.to_string()))?;
    Ok(inf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::case::{StructureMask, StructureRole};

    /// Cube phantom: brain fills the grid, PTV is a small central sphere.
    fn phantom(beams: Vec<BeamSpec>) -> Case {
        let g = VoxelGrid::centered([21; 3], [2.0; 3]).unwrap();
        let brain = StructureMask::new("Brain", StructureRole::Brain, &g, 0..g.len()).unwrap();
        let ptv = StructureMask::sphere("PTV", StructureRole::Ptv, &g, [0.0; 3], 3.0).unwrap();
        Case::new("phantom", g, vec![brain, ptv], 18.0, beams).unwrap()
    }

    #[test]
    fn isocenter_dose_matches_closed_form() {
        let beam = BeamSpec::new([1.0, 0.0, 0.0], [0.0; 3], 6.0);
        let case = phantom(vec![beam.clone()]);
        let inf = compute_influence(&case).unwrap();
        // entry at the left face of the grid: x = -21 mm
        let depth = 21.0;
        let iso = case.grid().voxel_at([0.0; 3]).unwrap();
        let expected = inf.d0() * (-0.004f64 * depth).exp();
        assert!((inf.beam(0).get(iso) - expected).abs() < 1e-12);
        // one beam at unit weight delivers the prescription at the calibration voxel
        assert!((inf.beam(0).get(iso) - 18.0).abs() < 1e-9);
        // off-axis voxel 4 mm lateral, 6 mm deeper
        let v = case.grid().voxel_at([6.0, 4.0, 0.0]).unwrap();
        let off = inf.d0() * (-0.004f64 * 27.0).exp() * (-(4.0f64 / 3.0).powi(2)).exp();
        assert!((inf.beam(0).get(v) - off).abs() < 1e-12);
    }

    #[test]
    fn three_sigma_falloff() {
        let beam = BeamSpec::new([0.0, 0.0, 1.0], [0.0; 3], 4.0);
        let case = phantom(vec![beam]);
        let inf = compute_influence(&case).unwrap();
        let on = inf.beam(0).get(case.grid().voxel_at([0.0, 0.0, 0.0]).unwrap());
        let off = inf.beam(0).get(case.grid().voxel_at([6.0, 0.0, 0.0]).unwrap());
        assert!(off <= on * (-9.0f64).exp() * (1.0 + 1e-12));
    }

    #[test]
    fn empty_beam_list_is_invalid() {
        let case = phantom(vec![]);
        assert!(matches!(compute_influence(&case), Err(DoseError::InvalidCase(_))));
    }

    #[test]
    fn entry_is_found_at_mask_boundary() {
        let g = VoxelGrid::new([10, 1, 1], [1.0; 3], [0.5, 0.0, 0.0]).unwrap();
        let mut inside = vec![false; 10];
        for v in inside.iter_mut().skip(4) {
            *v = true;
        }
        let t = surface_entry(&g, &inside, [-5.0, 0.0, 0.0], [1.0, 0.0, 0.0]).unwrap();
        assert!((t - 9.0).abs() < 1e-9, "{t}");
        let none = vec![false; 10];
        let t = surface_entry(&g, &none, [-5.0, 0.0, 0.0], [1.0, 0.0, 0.0]).unwrap();
        assert!((t - 5.0).abs() < 1e-9);
        assert!(surface_entry(&g, &inside, [-5.0, 3.0, 0.0], [1.0, 0.0, 0.0]).is_none());
    }

    #[test]
    fn compose_rejects_bad_weights() {
        let case = phantom(vec![BeamSpec::new([1.0, 0.0, 0.0], [0.0; 3], 6.0)]);
        let inf = compute_influence(&case).unwrap();
        assert!(matches!(compose_dose(&inf, &[-1.0]), Err(DoseError::InvalidWeights(_))));
        assert!(matches!(compose_dose(&inf, &[1.0, 1.0]), Err(DoseError::InvalidWeights(_))));
        assert_eq!(compose_dose(&inf, &[0.0]).unwrap().max(), 0.0);
    }

    #[test]
    fn cutoff_drops_small_values() {
        let case = phantom(vec![BeamSpec::new([0.0, 1.0, 0.0], [0.0; 3], 6.0)]);
        let inf = compute_influence(&case).unwrap();
        let b = inf.beam(0);
        assert!(b.values.iter().all(|&v| v >= b.max() * CUTOFF_FRACTION));
    }

    #[test]
    fn cache_round_trip_and_key_mismatch() {
        let case = phantom(vec![BeamSpec::new([1.0, 0.0, 0.0], [0.0; 3], 6.0)]);
        let inf = compute_influence(&case).unwrap();
        let mut buf = Vec::new();
        write_cache(&inf, "k1", &mut buf).unwrap();
        assert_eq!(read_cache("phantom", "k1", &buf[..]).unwrap().unwrap(), inf);
        assert!(read_cache("phantom", "k2", &buf[..]).unwrap().is_none());
        assert!(read_cache("phantom", "k1", &b"garbage!"[..]).is_err());
    }
}
