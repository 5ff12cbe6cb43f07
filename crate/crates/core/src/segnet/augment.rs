//! Random flip, affine resampling and crop, evaluated directly on the crop
//! grid. Images use trilinear interpolation with zero outside the volume;
//! labels use nearest neighbour with UNLABELED outside.

use serde::{Deserialize, Serialize};

use super::{Sample, SegError};
use crate::rng::Stream;
use crate::volume::UNLABELED;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub max_rotation_deg: f64,
    /// Maximum absolute shift per axis, voxels.
    pub max_translation: f64,
    pub crop: [usize; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_min: 0.9,
            scale_max: 1.1,
            max_rotation_deg: 10.0,
            max_translation: 5.0,
            crop: [32; 3],
        }
    }
}

/// One draw of augmentation parameters. The affine maps output positions to
/// source positions: `q = c + R S (p - c) - t` about the volume centre `c`,
/// with `R = Rz Ry Rx`. Flipping mirrors axis 0 of the source afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub scale: [f64; 3],
    pub rotation_deg: [f64; 3],
    pub translation: [f64; 3],
    pub crop_origin: [usize; 3],
}

impl AugmentParams {
    pub fn identity(crop_origin: [usize; 3]) -> Self {
        Self {
            flip: false,
            scale: [1.0; 3],
            rotation_deg: [0.0; 3],
            translation: [0.0; 3],
            crop_origin,
        }
    }

    pub fn draw(cfg: &AugmentConfig, dims: [usize; 3], rng: &mut Stream) -> Result<Self, SegError> {
        check_crop(cfg.crop, dims)?;
        let flip = rng.uniform() < cfg.flip_prob;
        let scale = [0; 3].map(|_| rng.uniform_range(cfg.scale_min, cfg.scale_max));
        let rotation_deg = [0; 3].map(|_| rng.uniform_range(-cfg.max_rotation_deg, cfg.max_rotation_deg));
        let translation = [0; 3].map(|_| rng.uniform_range(-cfg.max_translation, cfg.max_translation));
        let mut crop_origin = [0; 3];
        for a in 0..3 {
            crop_origin[a] = rng.below(dims[a] - cfg.crop[a] + 1);
        }
        Ok(Self {
            flip,
            scale,
            rotation_deg,
            translation,
            crop_origin,
        })
    }

    fn matrix(&self) -> [[f64; 3]; 3] {
        let [ax, ay, az] = self.rotation_deg.map(f64::to_radians);
        let rx = [[1.0, 0.0, 0.0], [0.0, ax.cos(), -ax.sin()], [0.0, ax.sin(), ax.cos()]];
        let ry = [[ay.cos(), 0.0, ay.sin()], [0.0, 1.0, 0.0], [-ay.sin(), 0.0, ay.cos()]];
        let rz = [[az.cos(), -az.sin(), 0.0], [az.sin(), az.cos(), 0.0], [0.0, 0.0, 1.0]];
        let mut m = matmul(&matmul(&rz, &ry), &rx);
        for row in &mut m {
            for (a, v) in row.iter_mut().enumerate() {
                *v *= self.scale[a];
            }
        }
        m
    }
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

fn check_crop(crop: [usize; 3], dims: [usize; 3]) -> Result<(), SegError> {
    if let Some(a) = (0..3).find(|&a| crop[a] == 0 || crop[a] > dims[a]) {
        return Err(SegError::Shape(format!(
            "crop {} larger than volume {} on axis {a}",
            crop[a], dims[a]
        )));
    }
    Ok(())
}

fn trilinear(src: &[f64], dims: [usize; 3], q: [f64; 3]) -> f64 {
    let [h, w, l] = dims;
    let f = q.map(f64::floor);
    let t = [q[0] - f[0], q[1] - f[1], q[2] - f[2]];
    let base = f.map(|v| v as i64);
    let mut acc = 0.0;
    for corner in 0..8 {
        let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let mut wgt = 1.0;
        for a in 0..3 {
            wgt *= if o[a] == 1 { t[a] } else { 1.0 - t[a] };
        }
        if wgt == 0.0 {
            continue;
        }
        let p = [base[0] + o[0] as i64, base[1] + o[1] as i64, base[2] + o[2] as i64];
        if p[0] < 0 || p[1] < 0 || p[2] < 0 || p[0] >= h as i64 || p[1] >= w as i64 || p[2] >= l as i64 {
            continue;
        }
        acc += wgt * src[p[0] as usize + h * (p[1] as usize + w * p[2] as usize)];
    }
    acc
}

/// Applies drawn parameters, producing a `crop`-sized sample.
pub fn apply_augment(sample: &Sample, params: &AugmentParams, crop: [usize; 3]) -> Result<Sample, SegError> {
    let dims = sample.dims;
    check_crop(crop, dims)?;
    for a in 0..3 {
        if params.crop_origin[a] + crop[a] > dims[a] {
            return Err(SegError::Shape(format!(
                "crop origin {:?} out of bounds on axis {a}",
                params.crop_origin
            )));
        }
    }
    let m = params.matrix();
    let c = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let n: usize = crop.iter().product();
    let mut sources = Vec::with_capacity(n);
    for k in 0..crop[2] {
        for j in 0..crop[1] {
            for i in 0..crop[0] {
                let p = [
                    (i + params.crop_origin[0]) as f64 - c[0],
                    (j + params.crop_origin[1]) as f64 - c[1],
                    (k + params.crop_origin[2]) as f64 - c[2],
                ];
                let mut q = [0.0; 3];
                for a in 0..3 {
                    q[a] = c[a] + m[a][0] * p[0] + m[a][1] * p[1] + m[a][2] * p[2] - params.translation[a];
                }
                if params.flip {
                    q[0] = (dims[0] as f64 - 1.0) - q[0];
                }
                sources.push(q);
            }
        }
    }
    let channels = sample
        .channels
        .iter()
        .map(|ch| sources.iter().map(|&q| trilinear(ch, dims, q)).collect())
        .collect();
    let labels = sources
        .iter()
        .map(|q| {
            let r = q.map(f64::round);
            if (0..3).any(|a| r[a] < 0.0 || r[a] > dims[a] as f64 - 1.0) {
                UNLABELED
            } else {
                sample.labels[r[0] as usize + dims[0] * (r[1] as usize + dims[1] * r[2] as usize)]
            }
        })
        .collect();
    Sample::new(crop, channels, labels)
}

/// Draws parameters from `rng` and applies them.
pub fn augment(sample: &Sample, rng: &mut Stream, cfg: &AugmentConfig) -> Result<Sample, SegError> {
    let params = AugmentParams::draw(cfg, sample.dims, rng)?;
    apply_augment(sample, &params, cfg.crop)
}

/// Left-right mirror of image and labels together (no class remapping).
pub fn flip_sample(sample: &Sample) -> Sample {
    let [h, w, l] = sample.dims;
    let mirror = |v: usize| {
        let i = v % h;
        v - i + (h - 1 - i)
    };
    let n = h * w * l;
    Sample {
        dims: sample.dims,
        channels: sample
            .channels
            .iter()
            .map(|c| (0..n).map(|v| c[mirror(v)]).collect())
            .collect(),
        labels: (0..n).map(|v| sample.labels[mirror(v)]).collect(),
    }
}
