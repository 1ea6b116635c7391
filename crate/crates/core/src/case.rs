//! Voxel grids, anatomical structure masks and synthetic cranial cases.
//!
//! Structures are sorted sets of linear voxel indices on a [`VoxelGrid`]. A
//! voxel belongs to a sphere or ellipsoid when its center lies inside it.
//! Synthetic cases stand in for patient CT and contours: a brain ellipsoid,
//! a spherical PTV with a concentric GTV, six small organs at risk and a
//! fixed beamlet arrangement aimed at the target.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dose::BeamSpec;
use crate::geom::{self, Vec3};

/// Single-fraction SRS prescription used throughout the cohort.
pub const DEFAULT_PRESCRIPTION_GY: f64 = 18.0;
/// Clinical dose-grid resolution.
pub const CLINICAL_SPACING_MM: f64 = 1.25;
/// Coarser spacing used by the default synthetic grid.
pub const DEFAULT_SPACING_MM: f64 = 2.5;
pub const DEFAULT_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CaseError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("invalid case: {0}")]
    InvalidCase(String),
    #[error("case file error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid", into = "RawGrid")]
pub struct VoxelGrid {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct RawGrid {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
}

impl TryFrom<RawGrid> for VoxelGrid {
    type Error = CaseError;

    fn try_from(raw: RawGrid) -> Result<Self, Self::Error> {
        VoxelGrid::new(raw.dims, raw.spacing_mm, raw.origin_mm)
    }
}

impl From<VoxelGrid> for RawGrid {
    fn from(g: VoxelGrid) -> Self {
        RawGrid { dims: g.dims, spacing_mm: g.spacing_mm, origin_mm: g.origin_mm }
    }
}

impl VoxelGrid {
    /// `origin_mm` is the center of voxel (0, 0, 0).
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], origin_mm: [f64; 3]) -> Result<Self, CaseError> {
        if dims.contains(&0) {
            return Err(CaseError::InvalidSpec(format!("grid dims must be >= 1, got {dims:?}")));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(CaseError::InvalidSpec(format!("grid spacing must be > 0, got {spacing_mm:?}")));
        }
        if origin_mm.iter().any(|o| !o.is_finite()) {
            return Err(CaseError::InvalidSpec("grid origin must be finite".into()));
        }
        let total = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        match total {
            Some(n) if n <= u32::MAX as usize => {}
            _ => return Err(CaseError::InvalidSpec(format!("grid {dims:?} is too large"))),
        }
        Ok(Self { dims, spacing_mm, origin_mm })
    }

    /// Grid whose geometric center sits at the origin of patient coordinates.
    pub fn centered(dims: [usize; 3], spacing_mm: [f64; 3]) -> Result<Self, CaseError> {
        let origin = [0, 1, 2].map(|a| -((dims[a] as f64 - 1.0) / 2.0) * spacing_mm[a]);
        Self::new(dims, spacing_mm, origin)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f64; 3] {
        self.spacing_mm
    }

    pub fn origin_mm(&self) -> [f64; 3] {
        self.origin_mm
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn voxel_volume_cc(&self) -> f64 {
        self.spacing_mm.iter().product::<f64>() / 1000.0
    }

    pub fn linear_index(&self, ijk: [usize; 3]) -> usize {
        ijk[0] + self.dims[0] * (ijk[1] + self.dims[1] * ijk[2])
    }

    pub fn ijk(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    pub fn center(&self, index: usize) -> Vec3 {
        let ijk = self.ijk(index);
        [0, 1, 2].map(|a| self.origin_mm[a] + ijk[a] as f64 * self.spacing_mm[a])
    }

    /// Lower and upper corners of the volume covered by the grid's voxels.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let lo = [0, 1, 2].map(|a| self.origin_mm[a] - 0.5 * self.spacing_mm[a]);
        let hi = [0, 1, 2].map(|a| lo[a] + self.dims[a] as f64 * self.spacing_mm[a]);
        (lo, hi)
    }

    /// Voxel whose cell contains `p`, if any.
    pub fn voxel_at(&self, p: Vec3) -> Option<usize> {
        let mut ijk = [0usize; 3];
        for a in 0..3 {
            let f = (p[a] - self.origin_mm[a]) / self.spacing_mm[a] + 0.5;
            if !(f >= 0.0) || f >= self.dims[a] as f64 {
                return None;
            }
            ijk[a] = f as usize;
        }
        Some(self.linear_index(ijk))
    }

    pub fn same_shape(&self, other: &VoxelGrid) -> bool {
        self == other
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StructureRole {
    #[serde(rename = "PTV")]
    Ptv,
    #[serde(rename = "GTV")]
    Gtv,
    Brain,
    Brainstem,
    OpticChiasm,
    OpticNerveL,
    OpticNerveR,
    CochleaL,
    CochleaR,
    Ring,
}

impl StructureRole {
    /// Organs at risk reported with a maximum dose. Together with the normal
    /// brain (reported as V12Gy) they form the seven secondary endpoints.
    pub const SERIAL_OARS: [StructureRole; 6] = [
        StructureRole::Brainstem,
        StructureRole::OpticChiasm,
        StructureRole::OpticNerveL,
        StructureRole::OpticNerveR,
        StructureRole::CochleaL,
        StructureRole::CochleaR,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StructureRole::Ptv => "PTV",
            StructureRole::Gtv => "GTV",
            StructureRole::Brain => "Brain",
            StructureRole::Brainstem => "Brainstem",
            StructureRole::OpticChiasm => "OpticChiasm",
            StructureRole::OpticNerveL => "OpticNerveL",
            StructureRole::OpticNerveR => "OpticNerveR",
            StructureRole::CochleaL => "CochleaL",
            StructureRole::CochleaR => "CochleaR",
            StructureRole::Ring => "Ring",
        }
    }

    /// Snake-case stem used in metric ids, e.g. `cochlea_r`.
    pub fn metric_stem(self) -> &'static str {
        match self {
            StructureRole::Ptv => "ptv",
            StructureRole::Gtv => "gtv",
            StructureRole::Brain => "brain",
            StructureRole::Brainstem => "brainstem",
            StructureRole::OpticChiasm => "optic_chiasm",
            StructureRole::OpticNerveL => "optic_nerve_l",
            StructureRole::OpticNerveR => "optic_nerve_r",
            StructureRole::CochleaL => "cochlea_l",
            StructureRole::CochleaR => "cochlea_r",
            StructureRole::Ring => "ring",
        }
    }

    pub fn is_lateral(self) -> bool {
        matches!(
            self,
            StructureRole::OpticNerveL | StructureRole::OpticNerveR | StructureRole::CochleaL | StructureRole::CochleaR
        )
    }
}

impl fmt::Display for StructureRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StructureRole {
    type Err = CaseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let all = [
            StructureRole::Ptv,
            StructureRole::Gtv,
            StructureRole::Brain,
            StructureRole::Brainstem,
            StructureRole::OpticChiasm,
            StructureRole::OpticNerveL,
            StructureRole::OpticNerveR,
            StructureRole::CochleaL,
            StructureRole::CochleaR,
            StructureRole::Ring,
        ];
        all.into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| CaseError::Format(format!("unknown structure role {s:?}")))
    }
}

/// A named set of voxels on a particular grid shape.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureMask {
    name: String,
    role: StructureRole,
    grid_dims: [usize; 3],
    voxels: Vec<u32>,
}

impl StructureMask {
    pub fn new(
        name: impl Into<String>,
        role: StructureRole,
        grid: &VoxelGrid,
        voxels: impl IntoIterator<Item = usize>,
    ) -> Result<Self, CaseError> {
        let name = name.into();
        if name.trim().is_empty() {
            return Err(CaseError::InvalidSpec("structure name must not be empty".into()));
        }
        let n = grid.len();
        let mut v = Vec::new();
        for idx in voxels {
            if idx >= n {
                return Err(CaseError::Geometry(format!(
                    "structure {name}: voxel index {idx} outside grid of {n} voxels"
                )));
            }
            v.push(idx as u32);
        }
        v.sort_unstable();
        v.dedup();
        Ok(Self { name, role, grid_dims: grid.dims(), voxels: v })
    }

    /// Voxels whose centers satisfy `inside`.
    pub fn from_predicate(
        name: impl Into<String>,
        role: StructureRole,
        grid: &VoxelGrid,
        inside: impl Fn(Vec3) -> bool,
    ) -> Result<Self, CaseError> {
        let voxels = (0..grid.len()).filter(|&i| inside(grid.center(i)));
        Self::new(name, role, grid, voxels)
    }

    pub fn sphere(
        name: impl Into<String>,
        role: StructureRole,
        grid: &VoxelGrid,
        center: Vec3,
        radius_mm: f64,
    ) -> Result<Self, CaseError> {
        if !(radius_mm > 0.0) {
            return Err(CaseError::InvalidSpec(format!("sphere radius must be > 0, got {radius_mm}")));
        }
        let r2 = radius_mm * radius_mm;
        Self::from_predicate(name, role, grid, |p| geom::dist2(p, center) <= r2)
    }

    pub fn ellipsoid(
        name: impl Into<String>,
        role: StructureRole,
        grid: &VoxelGrid,
        center: Vec3,
        radii_mm: Vec3,
    ) -> Result<Self, CaseError> {
        if radii_mm.iter().any(|&r| !(r > 0.0)) {
            return Err(CaseError::InvalidSpec(format!("ellipsoid radii must be > 0, got {radii_mm:?}")));
        }
        Self::from_predicate(name, role, grid, |p| {
            (0..3).map(|a| ((p[a] - center[a]) / radii_mm[a]).powi(2)).sum::<f64>() <= 1.0
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn role(&self) -> StructureRole {
        self.role
    }

    pub fn grid_dims(&self) -> [usize; 3] {
        self.grid_dims
    }

    pub fn voxels(&self) -> &[u32] {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        u32::try_from(index).map(|i| self.voxels.binary_search(&i).is_ok()).unwrap_or(false)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    fn check_grid(&self, other: &StructureMask) -> Result<(), CaseError> {
        if self.grid_dims != other.grid_dims {
            return Err(CaseError::Geometry(format!(
                "mask {} is on a {:?} grid but {} is on {:?}",
                self.name, self.grid_dims, other.name, other.grid_dims
            )));
        }
        Ok(())
    }

    /// Set difference `self \ other`; keeps `self`'s role.
    pub fn difference(&self, other: &StructureMask) -> Result<StructureMask, CaseError> {
        self.check_grid(other)?;
        let mut out = Vec::with_capacity(self.voxels.len());
        let mut j = 0;
        for &v in &self.voxels {
            while j < other.voxels.len() && other.voxels[j] < v {
                j += 1;
            }
            if j >= other.voxels.len() || other.voxels[j] != v {
                out.push(v);
            }
        }
        Ok(StructureMask {
            name: format!("{}-{}", self.name, other.name),
            role: self.role,
            grid_dims: self.grid_dims,
            voxels: out,
        })
    }

    pub fn intersection(&self, other: &StructureMask) -> Result<StructureMask, CaseError> {
        self.check_grid(other)?;
        let mut out = Vec::new();
        let (mut i, mut j) = (0, 0);
        while i < self.voxels.len() && j < other.voxels.len() {
            match self.voxels[i].cmp(&other.voxels[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    out.push(self.voxels[i]);
                    i += 1;
                    j += 1;
                }
            }
        }
        Ok(StructureMask {
            name: format!("{}&{}", self.name, other.name),
            role: self.role,
            grid_dims: self.grid_dims,
            voxels: out,
        })
    }

    pub fn union(&self, other: &StructureMask) -> Result<StructureMask, CaseError> {
        self.check_grid(other)?;
        let set: BTreeSet<u32> = self.voxels.iter().chain(&other.voxels).copied().collect();
        Ok(StructureMask {
            name: format!("{}|{}", self.name, other.name),
            role: self.role,
            grid_dims: self.grid_dims,
            voxels: set.into_iter().collect(),
        })
    }

    pub fn is_subset_of(&self, other: &StructureMask) -> bool {
        self.grid_dims == other.grid_dims && self.voxels.iter().all(|&v| other.voxels.binary_search(&v).is_ok())
    }

    /// Dense membership bitmap over the grid.
    pub fn bitmap(&self, grid: &VoxelGrid) -> Vec<bool> {
        let mut m = vec![false; grid.len()];
        for &v in &self.voxels {
            m[v as usize] = true;
        }
        m
    }
}

/// Volume of a mask in cubic centimeters.
pub fn structure_volume(mask: &StructureMask, grid: &VoxelGrid) -> Result<f64, CaseError> {
    if mask.grid_dims != grid.dims() {
        return Err(CaseError::Geometry(format!(
            "mask {} built for {:?} evaluated on {:?}",
            mask.name,
            mask.grid_dims,
            grid.dims()
        )));
    }
    if let Some(&last) = mask.voxels.last() {
        if last as usize >= grid.len() {
            return Err(CaseError::Geometry(format!("mask {} has out-of-bounds voxels", mask.name)));
        }
    }
    Ok(mask.len() as f64 * grid.voxel_volume_cc())
}

/// `a \ b`, e.g. brain minus GTV for the normal-brain structure.
pub fn subtract_masks(a: &StructureMask, b: &StructureMask) -> Result<StructureMask, CaseError> {
    a.difference(b)
}

/// A planning problem: grid, contours, prescription and fixed beams.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    id: String,
    grid: VoxelGrid,
    structures: Vec<StructureMask>,
    prescription_gy: f64,
    beams: Vec<BeamSpec>,
}

impl Case {
    pub fn new(
        id: impl Into<String>,
        grid: VoxelGrid,
        structures: Vec<StructureMask>,
        prescription_gy: f64,
        beams: Vec<BeamSpec>,
    ) -> Result<Self, CaseError> {
        let id = id.into();
        if id.trim().is_empty() {
            return Err(CaseError::InvalidCase("case id must not be empty".into()));
        }
        if !(prescription_gy > 0.0 && prescription_gy.is_finite()) {
            return Err(CaseError::InvalidCase(format!("prescription must be > 0, got {prescription_gy}")));
        }
        let mut names = BTreeSet::new();
        for s in &structures {
            if s.grid_dims != grid.dims() {
                return Err(CaseError::Geometry(format!("structure {} is not on the case grid", s.name)));
            }
            if !names.insert(s.name.clone()) {
                return Err(CaseError::InvalidCase(format!("duplicate structure name {}", s.name)));
            }
        }
        let count = |role| structures.iter().filter(|s| s.role == role).count();
        if count(StructureRole::Ptv) != 1 {
            return Err(CaseError::InvalidCase("case needs exactly one PTV".into()));
        }
        if count(StructureRole::Brain) != 1 {
            return Err(CaseError::InvalidCase("case needs exactly one Brain".into()));
        }
        if count(StructureRole::Gtv) > 1 {
            return Err(CaseError::InvalidCase("case has more than one GTV".into()));
        }
        let ptv = structures.iter().find(|s| s.role == StructureRole::Ptv).expect("counted");
        if ptv.is_empty() {
            return Err(CaseError::InvalidCase("PTV mask is empty".into()));
        }
        let brain = structures.iter().find(|s| s.role == StructureRole::Brain).expect("counted");
        if let Some(gtv) = structures.iter().find(|s| s.role == StructureRole::Gtv) {
            if !gtv.is_subset_of(brain) {
                return Err(CaseError::Geometry("GTV extends outside Brain".into()));
            }
        }
        for b in &beams {
            b.validate().map_err(|e| CaseError::InvalidCase(e.to_string()))?;
        }
        Ok(Self { id, grid, structures, prescription_gy, beams })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn structures(&self) -> &[StructureMask] {
        &self.structures
    }

    pub fn prescription_gy(&self) -> f64 {
        self.prescription_gy
    }

    pub fn beams(&self) -> &[BeamSpec] {
        &self.beams
    }

    pub fn structure(&self, name: &str) -> Option<&StructureMask> {
        self.structures.iter().find(|s| s.name == name)
    }

    pub fn by_role(&self, role: StructureRole) -> Option<&StructureMask> {
        self.structures.iter().find(|s| s.role == role)
    }

    pub fn ptv(&self) -> &StructureMask {
        self.by_role(StructureRole::Ptv).expect("validated at construction")
    }

    pub fn brain(&self) -> &StructureMask {
        self.by_role(StructureRole::Brain).expect("validated at construction")
    }

    pub fn gtv(&self) -> Option<&StructureMask> {
        self.by_role(StructureRole::Gtv)
    }

    /// Brain minus GTV (the whole brain when no GTV is contoured).
    pub fn normal_brain(&self) -> StructureMask {
        match self.gtv() {
            Some(gtv) => self.brain().difference(gtv).expect("same grid").with_name("NormalBrain"),
            None => self.brain().clone().with_name("NormalBrain"),
        }
    }

    /// Mean position of the PTV voxel centers.
    pub fn ptv_centroid(&self) -> Vec3 {
        let ptv = self.ptv();
        let mut c = [0.0; 3];
        for &v in ptv.voxels() {
            let p = self.grid.center(v as usize);
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        c.map(|x| x / ptv.len() as f64)
    }

    /// Returns a copy with one more structure (e.g. an optimization ring).
    pub fn with_structure(&self, mask: StructureMask) -> Result<Case, CaseError> {
        let mut structures = self.structures.clone();
        structures.push(mask);
        Case::new(self.id.clone(), self.grid.clone(), structures, self.prescription_gy, self.beams.clone())
    }

    pub fn to_file(&self) -> CaseFile {
        let [nx, ny, _] = self.grid.dims();
        let slice_len = (nx * ny) as u32;
        let structures = self
            .structures
            .iter()
            .map(|s| {
                let mut slices: Vec<SliceRuns> = Vec::new();
                for &v in &s.voxels {
                    let z = (v / slice_len) as usize;
                    let local = v % slice_len;
                    match slices.last_mut() {
                        Some(sl) if sl.z == z => match sl.runs.last_mut() {
                            Some(run) if run[0] + run[1] == local => run[1] += 1,
                            _ => sl.runs.push([local, 1]),
                        },
                        _ => slices.push(SliceRuns { z, runs: vec![[local, 1]] }),
                    }
                }
                StructureRecord { name: s.name.clone(), role: s.role, slices }
            })
            .collect();
        CaseFile {
            format: CASE_FILE_FORMAT.to_string(),
            version: CASE_FILE_VERSION,
            id: self.id.clone(),
            grid: self.grid.clone(),
            prescription_gy: self.prescription_gy,
            structures,
            beams: self.beams.clone(),
        }
    }

    pub fn from_file(file: CaseFile) -> Result<Case, CaseError> {
        if file.format != CASE_FILE_FORMAT {
            return Err(CaseError::Format(format!("unexpected format tag {:?}", file.format)));
        }
        if file.version != CASE_FILE_VERSION {
            return Err(CaseError::Format(format!("unsupported case file version {}", file.version)));
        }
        let grid = file.grid;
        let [nx, ny, nz] = grid.dims();
        let slice_len = nx * ny;
        let mut structures = Vec::with_capacity(file.structures.len());
        for rec in file.structures {
            let mut voxels = Vec::new();
            for sl in &rec.slices {
                if sl.z >= nz {
                    return Err(CaseError::Geometry(format!("structure {}: slice z={} out of range", rec.name, sl.z)));
                }
                for run in &sl.runs {
                    let (start, len) = (run[0] as usize, run[1] as usize);
                    if start + len > slice_len {
                        return Err(CaseError::Geometry(format!(
                            "structure {}: run {:?} exceeds slice size",
                            rec.name, run
                        )));
                    }
                    voxels.extend((start..start + len).map(|l| sl.z * slice_len + l));
                }
            }
            structures.push(StructureMask::new(rec.name, rec.role, &grid, voxels)?);
        }
        Case::new(file.id, grid, structures, file.prescription_gy, file.beams)
    }

    pub fn save_json(&self, path: &Path) -> Result<(), CaseError> {
        let text = serde_json::to_string(&self.to_file()).map_err(|e| CaseError::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| CaseError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load_json(path: &Path) -> Result<Case, CaseError> {
        let text = std::fs::read_to_string(path).map_err(|e| CaseError::Io(format!("{}: {e}", path.display())))?;
        let file: CaseFile = serde_json::from_str(&text).map_err(|e| CaseError::Format(e.to_string()))?;
        Case::from_file(file)
    }
}

pub const CASE_FILE_FORMAT: &str = "srsplan-case";
pub const CASE_FILE_VERSION: u32 = 1;

/// On-disk case document. Structure voxels are run-length encoded per z
/// slice; a run `[start, len]` covers in-slice indices `start..start+len`
/// where the in-slice index is `i + nx * j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFile {
    pub format: String,
    pub version: u32,
    pub id: String,
    pub grid: VoxelGrid,
    pub prescription_gy: f64,
    pub structures: Vec<StructureRecord>,
    pub beams: Vec<BeamSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureRecord {
    pub name: String,
    pub role: StructureRole,
    pub slices: Vec<SliceRuns>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRuns {
    pub z: usize,
    pub runs: Vec<[u32; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { dims: [DEFAULT_DIM; 3], spacing_mm: [DEFAULT_SPACING_MM; 3] }
    }
}

impl GridSpec {
    /// 1.25 mm clinical resolution over the same field of view as the default grid.
    pub fn clinical() -> Self {
        let n = (DEFAULT_DIM as f64 * DEFAULT_SPACING_MM / CLINICAL_SPACING_MM) as usize;
        Self { dims: [n; 3], spacing_mm: [CLINICAL_SPACING_MM; 3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SphereSpec {
    pub center_mm: Vec3,
    pub radius_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidSpec {
    pub center_mm: Vec3,
    pub radii_mm: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OarSpec {
    pub role: StructureRole,
    pub center_mm: Vec3,
    pub radius_mm: f64,
}

/// Fixed beam geometry: `directions` beam directions spread over the sphere
/// (rotated by `seed`), each carrying a square grid of parallel beamlets
/// covering the PTV projection plus `rim_mm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamArrangement {
    pub directions: usize,
    pub beamlet_spacing_mm: f64,
    pub aperture_radius_mm: f64,
    pub rim_mm: f64,
    pub seed: u64,
}

impl Default for BeamArrangement {
    fn default() -> Self {
        Self { directions: 12, beamlet_spacing_mm: 3.0, aperture_radius_mm: 8.0, rim_mm: 4.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub id: String,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_prescription")]
    pub prescription_gy: f64,
    pub brain: EllipsoidSpec,
    pub ptv: SphereSpec,
    /// PTV = GTV expanded by this margin.
    #[serde(default = "default_gtv_margin")]
    pub gtv_margin_mm: f64,
    pub oars: Vec<OarSpec>,
    #[serde(default)]
    pub beams: BeamArrangement,
}

fn default_prescription() -> f64 {
    DEFAULT_PRESCRIPTION_GY
}

fn default_gtv_margin() -> f64 {
    1.0
}

impl CaseSpec {
    /// Default synthetic anatomy (x: patient left, y: anterior, z: superior)
    /// with the PTV placed at `ptv`.
    pub fn with_default_anatomy(id: impl Into<String>, ptv: SphereSpec) -> Self {
        let oar = |role, c: Vec3, r| OarSpec { role, center_mm: c, radius_mm: r };
        Self {
            id: id.into(),
            grid: GridSpec::default(),
            prescription_gy: DEFAULT_PRESCRIPTION_GY,
            brain: EllipsoidSpec { center_mm: [0.0, 0.0, 0.0], radii_mm: [70.0, 62.0, 56.0] },
            ptv,
            gtv_margin_mm: default_gtv_margin(),
            oars: vec![
                oar(StructureRole::Brainstem, [0.0, -12.0, -28.0], 9.0),
                oar(StructureRole::OpticChiasm, [0.0, 14.0, -14.0], 4.0),
                oar(StructureRole::OpticNerveL, [12.0, 30.0, -16.0], 3.5),
                oar(StructureRole::OpticNerveR, [-12.0, 30.0, -16.0], 3.5),
                oar(StructureRole::CochleaL, [32.0, -8.0, -28.0], 3.5),
                oar(StructureRole::CochleaR, [-32.0, -8.0, -28.0], 3.5),
            ],
            beams: BeamArrangement::default(),
        }
    }

    fn validate(&self) -> Result<(), CaseError> {
        if self.id.trim().is_empty() {
            return Err(CaseError::InvalidSpec("case id must not be empty".into()));
        }
        if !(self.ptv.radius_mm > 0.0) {
            return Err(CaseError::InvalidSpec(format!("PTV radius must be > 0, got {}", self.ptv.radius_mm)));
        }
        if self.brain.radii_mm.iter().any(|&r| !(r > 0.0)) {
            return Err(CaseError::InvalidSpec("brain radii must be > 0".into()));
        }
        for o in &self.oars {
            if !(o.radius_mm > 0.0) {
                return Err(CaseError::InvalidSpec(format!("{} radius must be > 0", o.role)));
            }
            if matches!(o.role, StructureRole::Ptv | StructureRole::Gtv | StructureRole::Brain | StructureRole::Ring) {
                return Err(CaseError::InvalidSpec(format!("{} is not an organ-at-risk role", o.role)));
            }
        }
        if !(self.gtv_margin_mm >= 0.0 && self.gtv_margin_mm < self.ptv.radius_mm) {
            return Err(CaseError::InvalidSpec(format!(
                "GTV margin {} must be in [0, PTV radius)",
                self.gtv_margin_mm
            )));
        }
        if !(self.prescription_gy > 0.0) {
            return Err(CaseError::InvalidSpec("prescription must be > 0".into()));
        }
        let b = &self.beams;
        if b.directions == 0 {
            return Err(CaseError::InvalidSpec("beam arrangement needs at least one direction".into()));
        }
        if !(b.beamlet_spacing_mm > 0.0 && b.aperture_radius_mm > 0.0 && b.rim_mm >= 0.0) {
            return Err(CaseError::InvalidSpec("beamlet spacing and aperture must be > 0, rim >= 0".into()));
        }
        Ok(())
    }
}

/// Builds a voxelized case from `spec`. Pure function of the spec.
pub fn generate_synthetic_case(spec: &CaseSpec) -> Result<Case, CaseError> {
    spec.validate()?;
    let grid = VoxelGrid::centered(spec.grid.dims, spec.grid.spacing_mm)?;
    let (lo, hi) = grid.bounds();
    let c = spec.ptv.center_mm;
    let r = spec.ptv.radius_mm;
    if (0..3).any(|a| c[a] - r < lo[a] || c[a] + r > hi[a]) {
        return Err(CaseError::Geometry(format!(
            "PTV sphere at {c:?} radius {r} mm is not inside the grid {lo:?}..{hi:?}"
        )));
    }
    let brain =
        StructureMask::ellipsoid("Brain", StructureRole::Brain, &grid, spec.brain.center_mm, spec.brain.radii_mm)?;
    let ptv = StructureMask::sphere("PTV", StructureRole::Ptv, &grid, c, r)?;
    if ptv.is_empty() {
        return Err(CaseError::Geometry("PTV contains no voxel centers at this resolution".into()));
    }
    if !ptv.is_subset_of(&brain) {
        return Err(CaseError::Geometry("PTV extends outside Brain".into()));
    }
    let mut structures = vec![brain, ptv];
    let gtv = StructureMask::sphere("GTV", StructureRole::Gtv, &grid, c, r - spec.gtv_margin_mm)?;
    if !gtv.is_empty() {
        structures.push(gtv);
    }
    for o in &spec.oars {
        structures.push(StructureMask::sphere(o.role.as_str(), o.role, &grid, o.center_mm, o.radius_mm)?);
    }
    let beams = beam_arrangement(&spec.beams, c, r);
    Case::new(spec.id.clone(), grid, structures, spec.prescription_gy, beams)
}

/// Beamlets for every direction of the arrangement, aimed at `target`.
pub fn beam_arrangement(arr: &BeamArrangement, target: Vec3, target_radius_mm: f64) -> Vec<BeamSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(arr.seed);
    let rot = geom::random_rotation(&mut rng);
    let reach = target_radius_mm + arr.rim_mm;
    let k = (reach / arr.beamlet_spacing_mm).floor() as i64;
    let mut beams = Vec::new();
    for d in geom::fibonacci_sphere(arr.directions) {
        let dir = geom::normalize(geom::mat_vec(&rot, d));
        let (u, v) = geom::orthonormal_basis(dir);
        for a in -k..=k {
            for b in -k..=k {
                let (du, dv) = (a as f64 * arr.beamlet_spacing_mm, b as f64 * arr.beamlet_spacing_mm);
                if du * du + dv * dv > reach * reach + 1e-9 {
                    continue;
                }
                let iso = geom::add(target, geom::add(geom::scale(u, du), geom::scale(v, dv)));
                beams.push(BeamSpec::new(dir, iso, arr.aperture_radius_mm));
            }
        }
    }
    beams
}

/// Template plus sampling ranges for a synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub template: CaseSpec,
    #[serde(default = "default_radius_range")]
    pub ptv_radius_mm: [f64; 2],
    /// Minimum gap between the PTV surface and every OAR surface.
    #[serde(default = "default_clearance")]
    pub min_clearance_mm: f64,
    /// PTV centers are drawn inside the brain ellipsoid shrunk by this factor.
    #[serde(default = "default_center_scale")]
    pub center_region_scale: f64,
}

fn default_radius_range() -> [f64; 2] {
    [5.0, 9.0]
}

fn default_clearance() -> f64 {
    8.0
}

fn default_center_scale() -> f64 {
    0.6
}

impl Default for CohortSpec {
    fn default() -> Self {
        let ptv = SphereSpec { center_mm: [20.0, 10.0, 10.0], radius_mm: 7.0 };
        Self {
            template: CaseSpec::with_default_anatomy("synthetic", ptv),
            ptv_radius_mm: default_radius_range(),
            min_clearance_mm: default_clearance(),
            center_region_scale: default_center_scale(),
        }
    }
}

/// Draws `count` case specs from the cohort template, deterministically per seed.
pub fn cohort_case_specs(cohort: &CohortSpec, count: usize, seed: u64) -> Result<Vec<CaseSpec>, CaseError> {
    let [rmin, rmax] = cohort.ptv_radius_mm;
    if !(rmin > 0.0 && rmax >= rmin) {
        return Err(CaseError::InvalidSpec(format!("invalid PTV radius range {:?}", cohort.ptv_radius_mm)));
    }
    if !(cohort.center_region_scale > 0.0 && cohort.center_region_scale <= 1.0) {
        return Err(CaseError::InvalidSpec("center_region_scale must be in (0, 1]".into()));
    }
    let t = &cohort.template;
    let grid = VoxelGrid::centered(t.grid.dims, t.grid.spacing_mm)?;
    let (lo, hi) = grid.bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut specs = Vec::with_capacity(count);
    for i in 0..count {
        let mut placed = None;
        for _ in 0..10_000 {
            let radius = if rmax > rmin { rng.random_range(rmin..=rmax) } else { rmin };
            let radius = (radius * 4.0).round() / 4.0;
            let mut u = [0.0; 3];
            loop {
                u = u.map(|_| rng.random_range(-1.0..=1.0));
                if geom::dot(u, u) <= 1.0 {
                    break;
                }
            }
            let center = [0, 1, 2].map(|a| {
                let v = t.brain.center_mm[a] + u[a] * t.brain.radii_mm[a] * cohort.center_region_scale;
                (v * 2.0).round() / 2.0
            });
            let in_grid = (0..3).all(|a| center[a] - radius >= lo[a] && center[a] + radius <= hi[a]);
            let clear = t
                .oars
                .iter()
                .all(|o| geom::dist(center, o.center_mm) - o.radius_mm - radius >= cohort.min_clearance_mm);
            let in_brain = (0..3)
                .map(|a| ((center[a] - t.brain.center_mm[a]) / (t.brain.radii_mm[a] - radius - 2.0)).powi(2))
                .sum::<f64>()
                <= 1.0;
            if in_grid && clear && in_brain {
                placed = Some((center, radius));
                break;
            }
        }
        let (center, radius) = placed.ok_or_else(|| {
            CaseError::InvalidSpec("could not place a PTV satisfying the clearance constraints".into())
        })?;
        let mut spec = t.clone();
        spec.id = format!("{}-{:03}", t.id, i + 1);
        spec.ptv = SphereSpec { center_mm: center, radius_mm: radius };
        spec.beams.seed = rng.random();
        specs.push(spec);
    }
    Ok(specs)
}

pub fn generate_cohort(cohort: &CohortSpec, count: usize, seed: u64) -> Result<Vec<Case>, CaseError> {
    cohort_case_specs(cohort, count, seed)?.iter().map(generate_synthetic_case).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid(n: usize, h: f64) -> VoxelGrid {
        VoxelGrid::centered([n; 3], [h; 3]).unwrap()
    }

    #[test]
    fn voxel_volume_is_product_of_spacings() {
        let g = VoxelGrid::new([2, 3, 4], [1.0, 2.0, 2.5], [0.0; 3]).unwrap();
        assert!((g.voxel_volume_cc() - 0.005).abs() < 1e-15);
        assert_eq!(g.len(), 24);
    }

    #[test]
    fn grid_rejects_degenerate_dims_and_spacing() {
        assert!(VoxelGrid::new([0, 1, 1], [1.0; 3], [0.0; 3]).is_err());
        assert!(VoxelGrid::new([1, 1, 1], [1.0, 0.0, 1.0], [0.0; 3]).is_err());
        assert!(VoxelGrid::new([1, 1, 1], [1.0, -1.0, 1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn index_round_trip() {
        let g = VoxelGrid::new([5, 7, 3], [1.0; 3], [0.0; 3]).unwrap();
        for idx in 0..g.len() {
            assert_eq!(g.linear_index(g.ijk(idx)), idx);
            assert_eq!(g.voxel_at(g.center(idx)), Some(idx));
        }
        assert_eq!(g.voxel_at([-0.6, 0.0, 0.0]), None);
    }

    #[test]
    fn full_grid_volume() {
        let g = VoxelGrid::new([16; 3], [1.0; 3], [0.0; 3]).unwrap();
        let all = StructureMask::new("all", StructureRole::Brain, &g, 0..g.len()).unwrap();
        assert!((structure_volume(&all, &g).unwrap() - 4.096).abs() < 1e-12);
        let empty = StructureMask::new("none", StructureRole::Brain, &g, []).unwrap();
        assert_eq!(structure_volume(&empty, &g).unwrap(), 0.0);
    }

    #[test]
    fn sphere_volume_radius_5mm_at_1mm() {
        let g = grid(21, 1.0);
        let m = StructureMask::sphere("s", StructureRole::Ptv, &g, [0.0; 3], 5.0).unwrap();
        let analytic = 4.0 / 3.0 * PI * 125.0 / 1000.0;
        let v = structure_volume(&m, &g).unwrap();
        assert!((v - analytic).abs() / analytic < 0.05, "{v} vs {analytic}");
    }

    #[test]
    fn out_of_bounds_index_is_geometry_error() {
        let g = grid(4, 1.0);
        let err = StructureMask::new("x", StructureRole::Brain, &g, [64]).unwrap_err();
        assert!(matches!(err, CaseError::Geometry(_)));
        let m = StructureMask::new("x", StructureRole::Brain, &g, [3]).unwrap();
        assert!(matches!(structure_volume(&m, &grid(5, 1.0)), Err(CaseError::Geometry(_))));
    }

    #[test]
    fn subtract_self_and_disjoint() {
        let g = grid(10, 1.0);
        let a = StructureMask::new("a", StructureRole::Brain, &g, [1, 2, 3, 10]).unwrap();
        let b = StructureMask::new("b", StructureRole::Gtv, &g, [500, 501]).unwrap();
        assert!(subtract_masks(&a, &a).unwrap().is_empty());
        assert_eq!(subtract_masks(&a, &b).unwrap().voxels(), a.voxels());
        let other = StructureMask::new("c", StructureRole::Gtv, &grid(11, 1.0), [1]).unwrap();
        assert!(matches!(subtract_masks(&a, &other), Err(CaseError::Geometry(_))));
    }

    #[test]
    fn brain_minus_gtv_counts() {
        let g = grid(64, 2.5);
        let brain = StructureMask::sphere("Brain", StructureRole::Brain, &g, [0.0; 3], 60.0).unwrap();
        let gtv = StructureMask::sphere("GTV", StructureRole::Gtv, &g, [5.0, 0.0, 0.0], 8.0).unwrap();
        // independent count by scanning voxel centers
        let (mut nb, mut ng) = (0usize, 0usize);
        for i in 0..g.len() {
            let p = g.center(i);
            let in_b = p.iter().map(|x| x * x).sum::<f64>() <= 3600.0;
            let in_g = (p[0] - 5.0).powi(2) + p[1] * p[1] + p[2] * p[2] <= 64.0;
            nb += in_b as usize;
            ng += (in_b && in_g) as usize;
        }
        let nbrain = subtract_masks(&brain, &gtv).unwrap();
        let expected = (nb - ng) as f64 * g.voxel_volume_cc();
        assert!((structure_volume(&nbrain, &g).unwrap() - expected).abs() < 1e-9);
    }

    fn spec() -> CaseSpec {
        CaseSpec::with_default_anatomy("t", SphereSpec { center_mm: [20.0, 10.0, 10.0], radius_mm: 7.0 })
    }

    #[test]
    fn ptv_radius_10_at_clinical_spacing() {
        let mut s = spec();
        s.grid = GridSpec { dims: [48; 3], spacing_mm: [CLINICAL_SPACING_MM; 3] };
        s.brain = EllipsoidSpec { center_mm: [0.0; 3], radii_mm: [28.0; 3] };
        s.ptv = SphereSpec { center_mm: [0.0; 3], radius_mm: 10.0 };
        s.oars.clear();
        s.beams.directions = 2;
        let case = generate_synthetic_case(&s).unwrap();
        let v = structure_volume(case.ptv(), case.grid()).unwrap();
        assert!((v - 4.189).abs() / 4.189 < 0.05, "PTV volume {v}");
    }

    #[test]
    fn invalid_specs() {
        let mut s = spec();
        s.ptv.radius_mm = 0.0;
        assert!(matches!(generate_synthetic_case(&s), Err(CaseError::InvalidSpec(_))));
        let mut s = spec();
        s.ptv.center_mm = [78.0, 0.0, 0.0];
        assert!(matches!(generate_synthetic_case(&s), Err(CaseError::Geometry(_))));
        let mut s = spec();
        s.ptv.center_mm = [66.0, 0.0, 0.0];
        s.ptv.radius_mm = 8.0;
        assert!(matches!(generate_synthetic_case(&s), Err(CaseError::Geometry(_))));
    }

    #[test]
    fn synthetic_case_is_deterministic_and_consistent() {
        let a = generate_synthetic_case(&spec()).unwrap();
        let b = generate_synthetic_case(&spec()).unwrap();
        assert_eq!(a, b);
        assert!(a.ptv().is_subset_of(a.brain()));
        assert!(a.gtv().unwrap().is_subset_of(a.ptv()));
        for role in StructureRole::SERIAL_OARS {
            assert!(a.by_role(role).is_some_and(|m| !m.is_empty()), "{role}");
        }
        assert!(!a.beams().is_empty());
    }

    #[test]
    fn case_file_round_trip() {
        let case = generate_synthetic_case(&spec()).unwrap();
        let json = serde_json::to_string(&case.to_file()).unwrap();
        let back = Case::from_file(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(case, back);
    }

    #[test]
    fn case_invariants_enforced() {
        let g = grid(8, 1.0);
        let brain = StructureMask::new("Brain", StructureRole::Brain, &g, 0..100).unwrap();
        let ptv = StructureMask::new("PTV", StructureRole::Ptv, &g, 10..20).unwrap();
        let gtv_out = StructureMask::new("GTV", StructureRole::Gtv, &g, [200]).unwrap();
        assert!(Case::new("c", g.clone(), vec![brain.clone(), ptv.clone()], 18.0, vec![]).is_ok());
        assert!(Case::new("c", g.clone(), vec![brain.clone()], 18.0, vec![]).is_err());
        assert!(Case::new("c", g.clone(), vec![brain.clone(), ptv.clone()], 0.0, vec![]).is_err());
        assert!(Case::new("c", g.clone(), vec![brain.clone(), ptv.clone(), gtv_out], 18.0, vec![]).is_err());
        let ptv2 = ptv.clone().with_name("PTV2");
        assert!(Case::new("c", g, vec![brain, ptv, ptv2], 18.0, vec![]).is_err());
    }

    #[test]
    fn cohort_is_deterministic_and_clear_of_oars() {
        let cohort = CohortSpec::default();
        let a = cohort_case_specs(&cohort, 5, 7).unwrap();
        let b = cohort_case_specs(&cohort, 5, 7).unwrap();
        assert_eq!(a, b);
        for s in &a {
            for o in &s.oars {
                let gap = geom::dist(s.ptv.center_mm, o.center_mm) - o.radius_mm - s.ptv.radius_mm;
                assert!(gap >= cohort.min_clearance_mm);
            }
        }
    }
}
