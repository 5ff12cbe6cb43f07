//! Soft Dice over labeled voxels only.

use super::{tensor_shape, SegError};
use crate::autodiff::{GradTargets, Graph, Mode, Tensor};
use crate::volume::{SparseLabelVolume, UNLABELED};

/// Dense tensors derived from a sparse label map.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTargets {
    /// One-hot `[1, classes, D, H, W]`; all zeros at unlabeled voxels.
    pub target: Tensor,
    /// `[1, 1, D, H, W]`, 1 at labeled voxels.
    pub mask: Tensor,
    /// `[1, classes, 1, 1, 1]`: `1 / #present` for classes with labeled
    /// voxels, 0 otherwise.
    pub class_weights: Tensor,
    pub present: Vec<bool>,
}

impl LabelTargets {
    pub fn new(labels: &[u8], dims: [usize; 3], num_classes: usize) -> Result<Self, SegError> {
        let n: usize = dims.iter().product();
        if labels.len() != n {
            return Err(SegError::Shape(format!("{} labels for dims {dims:?}", labels.len())));
        }
        let mut target = Tensor::zeros(tensor_shape(dims, num_classes));
        let mut mask = Tensor::zeros(tensor_shape(dims, 1));
        let mut present = vec![false; num_classes];
        for (v, &l) in labels.iter().enumerate() {
            if l == UNLABELED {
                continue;
            }
            let c = l as usize;
            if c >= num_classes {
                return Err(SegError::Shape(format!(
                    "label {c} at voxel {v} exceeds {num_classes} classes"
                )));
            }
            target.slab_mut(0, c)[v] = 1.0;
            mask.data_mut()[v] = 1.0;
            present[c] = true;
        }
        let count = present.iter().filter(|p| **p).count();
        if count == 0 {
            return Err(SegError::NoLabels);
        }
        let w: Vec<f64> = present
            .iter()
            .map(|&p| if p { 1.0 / count as f64 } else { 0.0 })
            .collect();
        Ok(Self {
            target,
            mask,
            class_weights: Tensor::new([1, num_classes, 1, 1, 1], w)?,
            present,
        })
    }

    pub fn from_volume(labels: &SparseLabelVolume, num_classes: usize) -> Result<Self, SegError> {
        Self::new(labels.labels(), labels.dims(), num_classes)
    }
}

/// Dice loss of `probs` against sparse targets, with the gradient with
/// respect to `probs`.
pub fn dice_loss_with_grad(probs: &Tensor, targets: &LabelTargets) -> Result<(f64, Tensor), SegError> {
    if probs.shape() != targets.target.shape() {
        return Err(SegError::Shape(format!(
            "probs {:?} vs targets {:?}",
            probs.shape(),
            targets.target.shape()
        )));
    }
    let mut g = Graph::new();
    let p = g.input("p");
    let t = g.input("t");
    let m = g.input("m");
    let w = g.input("w");
    let dice = g.dice_terms(p, t, m);
    let mean = g.reduce_sum(dice, Some(w));
    let neg = g.scale(mean, -1.0);
    let one = g.constant(Tensor::scalar(1.0));
    let loss = g.add(one, neg);
    g.forward(
        &[
            ("p", probs),
            ("t", &targets.target),
            ("m", &targets.mask),
            ("w", &targets.class_weights),
        ],
        Mode::Eval,
        0,
    )?;
    let value = g.value(loss)?.data()[0];
    let mut grads = g.backward(loss, &Tensor::scalar(1.0), GradTargets::Inputs)?;
    let dp = grads.inputs.remove("p").expect("probs gradient");
    Ok((value, dp))
}

/// `1 - mean over present classes of (2 sum pg + eps) / (sum p + sum g + eps)`,
/// sums over labeled voxels.
pub fn dice_loss(probs: &Tensor, labels: &SparseLabelVolume) -> Result<f64, SegError> {
    let targets = LabelTargets::from_volume(labels, probs.channels())?;
    Ok(dice_loss_with_grad(probs, &targets)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{numeric_input_gradient, relative_error};
    use crate::rng::{purpose, Stream};
    use crate::volume::Geometry;

    fn one_hot(labels: &[u8], dims: [usize; 3], c: usize, wrong: bool) -> Tensor {
        let mut t = Tensor::zeros(tensor_shape(dims, c));
        for (v, &l) in labels.iter().enumerate() {
            let cls = if l == UNLABELED { 0 } else { l as usize };
            let cls = if wrong { (cls + 1) % c } else { cls };
            t.slab_mut(0, cls)[v] = 1.0;
        }
        t
    }

    #[test]
    fn perfect_overlap() {
        let dims = [4, 2, 2];
        let labels: Vec<u8> = (0..16).map(|v| (v % 3) as u8).collect();
        let vol = SparseLabelVolume::new(Geometry::unit(dims), labels.clone()).unwrap();
        assert!(dice_loss(&one_hot(&labels, dims, 3, false), &vol).unwrap() <= 1e-5);
        assert!(dice_loss(&one_hot(&labels, dims, 3, true), &vol).unwrap() >= 1.0 - 1e-3);
    }

    #[test]
    fn uniform_half_half() {
        // 16 voxels, 8 per class, p = 0.5 everywhere:
        // sum pg = 4, sum p = 8, sum g = 8 per class, dice = (8 + e) / (16 + e).
        let dims = [4, 2, 2];
        let labels: Vec<u8> = (0..16).map(|v| (v / 8) as u8).collect();
        let vol = SparseLabelVolume::new(Geometry::unit(dims), labels).unwrap();
        let probs = Tensor::full(tensor_shape(dims, 2), 0.5);
        let e = 1e-5;
        let expect = 1.0 - (8.0 + e) / (16.0 + e);
        let got = dice_loss(&probs, &vol).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.5).abs() < 1e-6);
    }

    #[test]
    fn unlabeled_voxels_do_not_matter() {
        let dims = [4, 4, 2];
        let mut rng = Stream::new(2, purpose::TEST_DATA, 0);
        let labels: Vec<u8> = (0..32)
            .map(|_| {
                if rng.uniform() < 0.4 {
                    UNLABELED
                } else {
                    rng.below(3) as u8
                }
            })
            .collect();
        let t = LabelTargets::new(&labels, dims, 3).unwrap();
        let p1 = Tensor::uniform(tensor_shape(dims, 3), 0.0, 1.0, &mut rng);
        let mut p2 = p1.clone();
        for (v, &l) in labels.iter().enumerate() {
            if l == UNLABELED {
                for c in 0..3 {
                    p2.slab_mut(0, c)[v] = rng.uniform();
                }
            }
        }
        assert_eq!(
            dice_loss_with_grad(&p1, &t).unwrap().0,
            dice_loss_with_grad(&p2, &t).unwrap().0
        );
    }

    #[test]
    fn no_labels_is_error() {
        assert_eq!(
            LabelTargets::new(&[UNLABELED; 8], [2, 2, 2], 2),
            Err(SegError::NoLabels)
        );
    }

    #[test]
    fn gradient_matches_differences() {
        let dims = [3, 2, 2];
        let mut rng = Stream::new(4, purpose::TEST_DATA, 0);
        let labels: Vec<u8> = (0..12)
            .map(|v| if v % 5 == 0 { UNLABELED } else { rng.below(4) as u8 })
            .collect();
        let t = LabelTargets::new(&labels, dims, 4).unwrap();
        let p = Tensor::uniform(tensor_shape(dims, 4), 0.05, 0.95, &mut rng);
        let (_, dp) = dice_loss_with_grad(&p, &t).unwrap();
        let mut g = Graph::new();
        let pi = g.input("p");
        let ti = g.input("t");
        let mi = g.input("m");
        let wi = g.input("w");
        let d = g.dice_terms(pi, ti, mi);
        let s = g.reduce_sum(d, Some(wi));
        let loss = g.scale(s, -1.0);
        let inputs = [("p", &p), ("t", &t.target), ("m", &t.mask), ("w", &t.class_weights)];
        let idx: Vec<usize> = (0..p.len()).collect();
        let num = numeric_input_gradient(
            &mut g,
            &inputs,
            loss,
            &Tensor::scalar(1.0),
            Mode::Eval,
            0,
            "p",
            &idx,
            1e-5,
        )
        .unwrap();
        assert!(relative_error(dp.data(), &num) < 1e-6);
    }
}
