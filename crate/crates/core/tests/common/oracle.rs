//! Brute-force voxel-counting oracle for plan metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srsplan_core::case::{StructureMask, StructureRole, VoxelGrid};
use srsplan_core::dose::DoseDistribution;
use srsplan_core::evaluator::*;
use srsplan_core::geom::dist2;

pub struct RandomDose {
    pub grid: VoxelGrid,
    pub dose: DoseDistribution,
    pub brain: StructureMask,
    pub ptv: StructureMask,
    pub gtv: StructureMask,
    pub rx: f64,
    pub bin_width: f64,
}

/// Random grid of 32 to 64 voxels per axis carrying a blob-shaped dose with
/// values planted exactly on the metric thresholds and bin edges.
pub fn random_dose(seed: u64) -> RandomDose {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [rng.random_range(32..=64), rng.random_range(32..=64), rng.random_range(32..=64)];
    let spacing = [1.25, 2.0, 2.5][rng.random_range(0..3)];
    let grid = VoxelGrid::centered(dims, [spacing; 3]).unwrap();
    let half: Vec<f64> = dims.iter().map(|&d| d as f64 * spacing / 2.0).collect();
    let min_half = half.iter().copied().fold(f64::INFINITY, f64::min);
    let brain = StructureMask::ellipsoid(
        "Brain",
        StructureRole::Brain,
        &grid,
        [0.0; 3],
        [half[0] * 0.9, half[1] * 0.9, half[2] * 0.9],
    )
    .unwrap();
    let r_ptv = min_half * rng.random_range(0.12..0.25);
    let c = [
        rng.random_range(-0.2..0.2) * min_half,
        rng.random_range(-0.2..0.2) * min_half,
        rng.random_range(-0.2..0.2) * min_half,
    ];
    let ptv = StructureMask::sphere("PTV", StructureRole::Ptv, &grid, c, r_ptv).unwrap();
    let gtv = StructureMask::sphere("GTV", StructureRole::Gtv, &grid, c, r_ptv * 0.6).unwrap();

    let rx = 18.0;
    let bin_width = [0.1, 0.05, 0.25, 0.5][rng.random_range(0..4)];
    let blobs: Vec<([f64; 3], f64, f64)> = (0..rng.random_range(1..4))
        .map(|_| {
            let off = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let center = [c[0] + off[0], c[1] + off[1], c[2] + off[2]];
            (center, rng.random_range(15.0..26.0), r_ptv * rng.random_range(0.8..2.5))
        })
        .collect();
    let quantize = rng.random_bool(0.5);
    let values: Vec<f64> = (0..grid.len())
        .map(|i| {
            let p = grid.center(i);
            let mut d: f64 =
                blobs.iter().map(|(bc, peak, w)| peak * (-dist2(p, *bc) / (w * w)).exp()).fold(0.0, f64::max);
            if quantize {
                d = (d / bin_width).round() * bin_width;
            }
            match rng.random_range(0..50) {
                0 => rx,
                1 => V12_THRESHOLD_GY,
                2 => rx / 2.0,
                3 => rng.random_range(0..200) as f64 * bin_width,
                _ => d,
            }
        })
        .collect();
    let dose = DoseDistribution::new(grid.clone(), values).unwrap();
    RandomDose { grid, dose, brain, ptv, gtv, rx, bin_width }
}

fn membership(grid: &VoxelGrid, mask: &StructureMask) -> Vec<bool> {
    let mut m = vec![false; grid.len()];
    for &v in mask.voxels() {
        m[v as usize] = true;
    }
    m
}

/// Voxel counts `#{d >= k·bw}` for k = 0, 1, ... up to and including the
/// first empty threshold.
pub fn dvh_counts(doses: &[f64], bin_width: f64) -> Vec<usize> {
    let mut sorted = doses.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut out = Vec::new();
    for k in 0.. {
        let t = k as f64 * bin_width;
        let n = sorted.len() - sorted.partition_point(|&d| d < t);
        out.push(n);
        if n == 0 {
            break;
        }
    }
    out
}

/// Compares every metric against direct voxel counts. Returns a description
/// of the first mismatch.
pub fn check_metrics(r: &RandomDose) -> Result<(), String> {
    let d = r.dose.values();
    let n = r.grid.len();
    let in_ptv = membership(&r.grid, &r.ptv);
    let in_brain = membership(&r.grid, &r.brain);
    let in_gtv = membership(&r.grid, &r.gtv);

    for (mask, inside) in [(&r.brain, &in_brain), (&r.ptv, &in_ptv), (&r.gtv, &in_gtv)] {
        let doses: Vec<f64> = (0..n).filter(|&i| inside[i]).map(|i| d[i]).collect();
        let counts = dvh_counts(&doses, r.bin_width);
        let curve = compute_dvh(&r.dose, mask, r.bin_width).map_err(|e| e.to_string())?;
        if curve.cumulative.len() != counts.len() {
            return Err(format!("{}: {} bins vs {}", mask.name(), curve.cumulative.len(), counts.len()));
        }
        for (k, (&f, &c)) in curve.cumulative.iter().zip(&counts).enumerate() {
            if f != c as f64 / doses.len() as f64 {
                return Err(format!("{} bin {k}: {f} vs {c}/{}", mask.name(), doses.len()));
            }
        }
        let dmax = doses.iter().copied().fold(0.0, f64::max);
        if max_dose(&r.dose, mask).map_err(|e| e.to_string())? != dmax {
            return Err(format!("{} dmax", mask.name()));
        }
    }

    let (mut tv, mut piv, mut tv_piv, mut v50, mut v12) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for i in 0..n {
        tv += in_ptv[i] as usize;
        piv += (d[i] >= r.rx) as usize;
        tv_piv += (in_ptv[i] && d[i] >= r.rx) as usize;
        v50 += (d[i] >= r.rx / 2.0) as usize;
        v12 += (in_brain[i] && !in_gtv[i] && d[i] >= V12_THRESHOLD_GY) as usize;
    }
    let counts = conformity_counts(&r.dose, &r.ptv, r.rx).map_err(|e| e.to_string())?;
    if counts != (tv, piv, tv_piv) {
        return Err(format!("conformity counts {counts:?} vs {:?}", (tv, piv, tv_piv)));
    }
    let cov = coverage(&r.dose, &r.ptv, r.rx).map_err(|e| e.to_string())?;
    if cov != 100.0 * tv_piv as f64 / tv as f64 {
        return Err(format!("coverage {cov}"));
    }
    let ci = conformity_index(&r.dose, &r.ptv, r.rx).map_err(|e| e.to_string())?;
    let want_ci = if piv == 0 { 0.0 } else { (tv_piv * tv_piv) as f64 / (tv * piv) as f64 };
    if ci != want_ci {
        return Err(format!("ci {ci} vs {want_ci}"));
    }
    match gradient_index(&r.dose, r.rx) {
        Ok(gi) if piv > 0 && gi == v50 as f64 / piv as f64 => {}
        Err(EvalError::UndefinedMetric(_)) if piv == 0 => {}
        other => return Err(format!("gi {other:?} with piv {piv} v50 {v50}")),
    }
    let v = v12_normal_brain(&r.dose, &r.brain, &r.gtv).map_err(|e| e.to_string())?;
    if v != v12 as f64 * r.grid.voxel_volume_cc() {
        return Err(format!("v12 {v} vs {v12} voxels"));
    }
    Ok(())
}
