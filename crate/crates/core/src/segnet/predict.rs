use super::unet::SegModel;
use super::{Sample, SegError};
use crate::autodiff::Mode;
use crate::volume::{Geometry, SparseLabelVolume, Volume3D};

/// Per-class probabilities and the argmax labeling, in volume layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub dims: [usize; 3],
    pub probs: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
}

impl Prediction {
    pub fn prob_volume(&self, class: usize, geom: &Geometry) -> Result<Volume3D, SegError> {
        Ok(Volume3D::new(geom.clone(), self.probs[class].clone())?)
    }

    pub fn label_volume(&self, geom: &Geometry) -> Result<SparseLabelVolume, SegError> {
        Ok(SparseLabelVolume::new(geom.clone(), self.labels.clone())?)
    }
}

/// Whole-volume inference; ties in the argmax go to the lower class index.
pub fn predict(model: &mut SegModel, sample: &Sample, mode: Mode, key: u64) -> Result<Prediction, SegError> {
    if sample.num_channels() != model.config.in_channels {
        return Err(SegError::Shape(format!(
            "sample has {} channels, model expects {}",
            sample.num_channels(),
            model.config.in_channels
        )));
    }
    let classes = model.config.num_classes;
    let probs = model.forward_probs(&sample.to_tensor(), mode, key)?;
    let per_class: Vec<Vec<f64>> = (0..classes).map(|c| probs.slab(0, c).to_vec()).collect();
    let labels = (0..sample.len())
        .map(|v| {
            let mut best = 0;
            for c in 1..classes {
                if per_class[c][v] > per_class[best][v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Ok(Prediction {
        dims: sample.dims,
        probs: per_class,
        labels,
    })
}
