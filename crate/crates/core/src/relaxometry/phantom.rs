//! Synthetic thalamus-like phantoms for desk-scale experiments.
//!
//! Regions are ellipsoids painted in list order (later regions overwrite
//! earlier ones where they overlap). Intensities follow the signed
//! inversion-recovery model plus additive Gaussian noise, and the sparse label
//! map keeps only voxels whose whole neighbourhood ball of the erosion radius
//! carries the same dense label.

use serde::{Deserialize, Serialize};

use super::fit::{FitStatus, QuantMaps, T1Bracket};
use super::signal::ir_signal;
use super::{AcqParams, RelaxError};
use crate::rng::{purpose, Stream};
use crate::volume::{Geometry, SparseLabelVolume, Volume3D, NUM_NUCLEI, UNLABELED};

/// Relative nucleus sizes (percent of the thalamus) in label order.
pub const NUCLEUS_VOLUME_PERCENT: [f64; NUM_NUCLEI] =
    [3.9, 3.1, 1.5, 5.5, 13.3, 1.3, 27.6, 8.1, 3.4, 16.2, 6.3, 1.8, 7.4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tissue {
    pub pd: f64,
    pub t1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    /// Ellipsoid centre in voxel coordinates.
    pub center: [f64; 3],
    /// Semi-axes in voxels.
    pub radii: [f64; 3],
    pub label: u8,
    pub pd: f64,
    pub t1: f64,
}

impl Region {
    fn contains(&self, i: usize, j: usize, k: usize) -> bool {
        let p = [i as f64, j as f64, k as f64];
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// Tissue outside every region; doubles as the white-matter reference.
    pub background: Tissue,
    pub regions: Vec<Region>,
    pub noise_sigma: f64,
    /// Label erosion radius in voxels.
    pub erosion_radius: usize,
}

impl PhantomSpec {
    /// Thirteen ellipsoidal nuclei with volumes proportional to
    /// [`NUCLEUS_VOLUME_PERCENT`], distinct T1 values in 700..1500 ms, set in
    /// white-matter-like background. `layout_seed` jitters positions and
    /// relaxation values so that subjects differ.
    pub fn thalamus(dims: [usize; 3], layout_seed: u64) -> Self {
        let mut rng = Stream::new(layout_seed, purpose::PHANTOM_LAYOUT, 0);
        let n: f64 = dims.iter().map(|&d| d as f64).product();
        // Thalamus occupies a fifth of the field of view.
        let thalamus_voxels = 0.2 * n;
        let mut slots: Vec<[f64; 3]> = Vec::new();
        for &fz in &[0.35, 0.65] {
            for &fy in &[0.3, 0.5, 0.7] {
                for &fx in &[0.3, 0.5, 0.7] {
                    slots.push([fx, fy, fz]);
                }
            }
        }
        rng.shuffle(&mut slots);
        // Paint large nuclei first so small ones survive overlaps.
        let mut order: Vec<usize> = (0..NUM_NUCLEI).collect();
        order.sort_by(|&a, &b| NUCLEUS_VOLUME_PERCENT[b].total_cmp(&NUCLEUS_VOLUME_PERCENT[a]));
        let regions = order
            .iter()
            .zip(&slots)
            .map(|(&c, slot)| {
                let volume = thalamus_voxels * NUCLEUS_VOLUME_PERCENT[c] / 100.0;
                let r = (3.0 * volume / (4.0 * std::f64::consts::PI)).cbrt();
                let center = [0, 1, 2].map(|a| slot[a] * (dims[a] as f64 - 1.0) + rng.uniform_range(-1.0, 1.0));
                let t1 = (700.0 + c as f64 * 800.0 / 12.0) * rng.uniform_range(0.98, 1.02);
                let pd = (0.75 + 0.01 * c as f64) * rng.uniform_range(0.98, 1.02);
                Region {
                    center,
                    radii: [r.max(1.0); 3],
                    label: (c + 1) as u8,
                    pd,
                    t1,
                }
            })
            .collect();
        Self {
            dims,
            background: Tissue { pd: 0.7, t1: 600.0 },
            regions,
            noise_sigma: 0.0,
            erosion_radius: 1,
        }
    }

    pub fn validate(&self) -> Result<(), RelaxError> {
        let bracket = T1Bracket::default();
        let fail = |msg: String| Err(RelaxError::Phantom(msg));
        if self.dims.contains(&0) {
            return fail(format!("dims {:?}", self.dims));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return fail(format!("noise sigma {}", self.noise_sigma));
        }
        let tissues = std::iter::once((0u8, self.background.pd, self.background.t1))
            .chain(self.regions.iter().map(|r| (r.label, r.pd, r.t1)));
        for (label, pd, t1) in tissues {
            if !bracket.contains(t1) {
                return fail(format!(
                    "label {label}: T1 {t1} outside [{}, {}]",
                    bracket.min, bracket.max
                ));
            }
            if !(pd >= 0.0) || !pd.is_finite() {
                return fail(format!("label {label}: PD {pd}"));
            }
        }
        for r in &self.regions {
            if !(1..=NUM_NUCLEI as u8).contains(&r.label) {
                return fail(format!("region label {} outside [1, 13]", r.label));
            }
            if r.radii.iter().any(|&x| !(x > 0.0)) {
                return fail(format!("region {} radii {:?}", r.label, r.radii));
            }
        }
        Ok(())
    }
}

/// Generated subject: acquisitions, ground truth and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub mprage: Volume3D,
    pub fgatir: Volume3D,
    pub truth: QuantMaps,
    /// Dense labels before erosion (every voxel labeled).
    pub dense_labels: SparseLabelVolume,
    pub labels: SparseLabelVolume,
    /// Background (white-matter) voxels.
    pub wm_mask: Volume3D,
}

pub fn make_phantom(spec: &PhantomSpec, acq: &AcqParams, seed: u64) -> Result<Phantom, RelaxError> {
    spec.validate()?;
    acq.validate()?;
    let geom = Geometry::unit(spec.dims);
    let n = geom.len();
    let mut dense = vec![0u8; n];
    let mut pd = vec![spec.background.pd; n];
    let mut t1 = vec![spec.background.t1; n];
    for region in &spec.regions {
        for idx in 0..n {
            let (i, j, k) = geom.coords(idx);
            if region.contains(i, j, k) {
                dense[idx] = region.label;
                pd[idx] = region.pd;
                t1[idx] = region.t1;
            }
        }
    }
    let mut noise1 = Stream::new(seed, purpose::PHANTOM_NOISE, 0);
    let mut noise2 = Stream::new(seed, purpose::PHANTOM_NOISE, 1);
    let mut mprage = Vec::with_capacity(n);
    let mut fgatir = Vec::with_capacity(n);
    for idx in 0..n {
        let s1 = ir_signal(pd[idx], t1[idx], acq.ti1, acq.tr)?;
        let s2 = ir_signal(pd[idx], t1[idx], acq.ti2, acq.tr)?;
        if spec.noise_sigma > 0.0 {
            mprage.push(s1 + spec.noise_sigma * noise1.normal());
            fgatir.push(s2 + spec.noise_sigma * noise2.normal());
        } else {
            mprage.push(s1);
            fgatir.push(s2);
        }
    }
    let sparse = erode_labels(&geom, &dense, spec.erosion_radius);
    let wm_mask = dense.iter().map(|&l| if l == 0 { 1.0 } else { 0.0 }).collect();
    Ok(Phantom {
        mprage: Volume3D::new(geom.clone(), mprage)?,
        fgatir: Volume3D::new(geom.clone(), fgatir)?,
        truth: QuantMaps {
            pd: Volume3D::new(geom.clone(), pd)?,
            t1: Volume3D::new(geom.clone(), t1)?,
            status: vec![FitStatus::Ok; n],
        },
        dense_labels: SparseLabelVolume::new(geom.clone(), dense)?,
        labels: SparseLabelVolume::new(geom.clone(), sparse)?,
        wm_mask: Volume3D::new(geom, wm_mask)?,
    })
}

/// Keeps a voxel's label only if every in-bounds voxel within `radius`
/// (Euclidean, in voxels) has the same label.
fn erode_labels(geom: &Geometry, dense: &[u8], radius: usize) -> Vec<u8> {
    if radius == 0 {
        return dense.to_vec();
    }
    let r = radius as isize;
    let offsets: Vec<[isize; 3]> = (-r..=r)
        .flat_map(|dz| (-r..=r).flat_map(move |dy| (-r..=r).map(move |dx| [dx, dy, dz])))
        .filter(|o| o.iter().map(|v| v * v).sum::<isize>() <= r * r)
        .collect();
    let dims = geom.dims.map(|d| d as isize);
    (0..dense.len())
        .map(|idx| {
            let (i, j, k) = geom.coords(idx);
            let label = dense[idx];
            let uniform = offsets.iter().all(|o| {
                let p = [i as isize + o[0], j as isize + o[1], k as isize + o[2]];
                if (0..3).any(|a| p[a] < 0 || p[a] >= dims[a]) {
                    return true;
                }
                dense[geom.index(p[0] as usize, p[1] as usize, p[2] as usize)] == label
            });
            if uniform {
                label
            } else {
                UNLABELED
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_spec(radius: f64, erosion: usize) -> PhantomSpec {
        PhantomSpec {
            dims: [16, 16, 16],
            background: Tissue { pd: 0.7, t1: 600.0 },
            regions: vec![Region {
                center: [8.0, 8.0, 8.0],
                radii: [radius; 3],
                label: 3,
                pd: 0.9,
                t1: 1100.0,
            }],
            noise_sigma: 0.0,
            erosion_radius: erosion,
        }
    }

    #[test]
    fn erosion_shrinks_region() {
        let p = make_phantom(&sphere_spec(5.0, 1), &AcqParams::default(), 0).unwrap();
        let region = p.dense_labels.class_counts()[3];
        let labeled = p.labels.class_counts()[3];
        assert!(region > 0);
        assert!(labeled < region);
        assert!(labeled > 0);
        // Boundary voxels of both tissues are unlabeled.
        assert!(p.labels.labeled_count() < p.labels.len());
    }

    #[test]
    fn no_erosion_keeps_every_label() {
        let p = make_phantom(&sphere_spec(5.0, 0), &AcqParams::default(), 0).unwrap();
        assert_eq!(p.labels, p.dense_labels);
    }

    #[test]
    fn same_seed_same_data() {
        let mut spec = PhantomSpec::thalamus([12, 12, 12], 3);
        spec.noise_sigma = 0.01;
        let a = make_phantom(&spec, &AcqParams::default(), 11).unwrap();
        let b = make_phantom(&spec, &AcqParams::default(), 11).unwrap();
        assert_eq!(a, b);
        let c = make_phantom(&spec, &AcqParams::default(), 12).unwrap();
        assert_ne!(a.mprage, c.mprage);
    }

    #[test]
    fn thalamus_layout_has_all_nuclei() {
        let spec = PhantomSpec::thalamus([24, 24, 24], 0);
        spec.validate().unwrap();
        assert_eq!(spec.regions.len(), 13);
        let p = make_phantom(&spec, &AcqParams::default(), 0).unwrap();
        let counts = p.dense_labels.class_counts();
        assert!(counts[1..].iter().all(|&c| c > 0), "{counts:?}");
        // PuL (label 7) is the largest nucleus.
        assert_eq!((1..=13).max_by_key(|&c| counts[c]).unwrap(), 7);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = sphere_spec(3.0, 1);
        s.regions[0].label = 14;
        assert!(s.validate().is_err());
        let mut s = sphere_spec(3.0, 1);
        s.regions[0].t1 = 20_000.0;
        assert!(s.validate().is_err());
        let mut s = sphere_spec(3.0, 1);
        s.noise_sigma = -1.0;
        assert!(s.validate().is_err());
    }
}
