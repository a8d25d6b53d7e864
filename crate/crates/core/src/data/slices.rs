//! Axial 2-D training samples.

use serde::{Deserialize, Serialize};

use super::Volume;
use crate::domain::Modality;
use crate::error::Result;
use crate::metrics::{labels_to_regions, BinaryMask};
use crate::tensor::Tensor;
use crate::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlicePolicy {
    #[default]
    All,
    /// Only slices with at least one tumour voxel.
    TumorOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    pub subject: String,
    pub index: usize,
    /// `4×H×W`, modality order.
    pub image: Tensor<f32>,
    /// WT, TC, ET.
    pub masks: [BinaryMask; 3],
}

impl SliceSample {
    pub fn image_as<T: Scalar>(&self) -> Tensor<T> {
        self.image.cast()
    }

    pub fn targets<T: Scalar>(&self) -> [Tensor<T>; 3] {
        [self.masks[0].to_tensor(), self.masks[1].to_tensor(), self.masks[2].to_tensor()]
    }

    pub fn has_tumor(&self) -> bool {
        !self.masks[0].is_empty()
    }
}

pub fn extract_slices(vol: &Volume, policy: SlicePolicy) -> Result<Vec<SliceSample>> {
    vol.validate()?;
    let [d, h, w] = vol.shape;
    let plane = h * w;
    let mut out = Vec::new();
    for z in 0..d {
        let labels = &vol.labels[z * plane..(z + 1) * plane];
        if policy == SlicePolicy::TumorOnly && labels.iter().all(|&l| l == 0) {
            continue;
        }
        let mut data = Vec::with_capacity(4 * plane);
        for m in Modality::ALL {
            data.extend_from_slice(&vol.channel(m)[z * plane..(z + 1) * plane]);
        }
        out.push(SliceSample {
            subject: vol.subject.clone(),
            index: z,
            image: Tensor::new(vec![4, h, w], data)?,
            masks: labels_to_regions(labels, &[h, w])?,
        });
    }
    Ok(out)
}
