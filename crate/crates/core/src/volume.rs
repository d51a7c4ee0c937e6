//! Image volumes and label maps.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    Ct,
    Mri,
    Synth,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Ct => "CT",
            Modality::Mri => "MRI",
            Modality::Synth => "SYNTH",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "CT" => Ok(Modality::Ct),
            "MRI" => Ok(Modality::Mri),
            "SYNTH" => Ok(Modality::Synth),
            other => Err(Error::Invalid(format!("unknown modality `{other}`"))),
        }
    }
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "spacing must be positive, got {spacing:?}"
        )))
    }
}

/// Dense `[C, D, H, W]` image with voxel spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Tensor<f32>,
    pub spacing: [f64; 3],
    pub modality: Modality,
}

impl Volume {
    pub fn new(data: Tensor<f32>, spacing: [f64; 3], modality: Modality) -> Result<Self> {
        if data.ndim() != 4 || data.shape()[0] == 0 {
            return Err(Error::Shape(format!(
                "volume data must be [C, D, H, W] with C >= 1, got {:?}",
                data.shape()
            )));
        }
        check_spacing(spacing)?;
        Ok(Self {
            data,
            spacing,
            modality,
        })
    }

    /// Single-channel volume with unit spacing.
    pub fn from_grid(grid: Tensor<f32>, modality: Modality) -> Result<Self> {
        let [d, h, w] = grid.spatial();
        Self::new(grid.reshape(&[1, d, h, w])?, [1.0; 3], modality)
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        self.data.spatial()
    }

    pub fn with_data(&self, data: Tensor<f32>) -> Self {
        Self {
            data,
            spacing: self.spacing,
            modality: self.modality,
        }
    }
}

/// Integer label grid `[D, H, W]` with a per-class availability mask.
///
/// `available[k] == false` marks a class that is not annotated in this
/// volume, so its absence carries no information.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    labels: Vec<u8>,
    shape: [usize; 3],
    num_classes: usize,
    available: Vec<bool>,
    pub spacing: [f64; 3],
}

impl LabelMap {
    pub fn new(labels: Vec<u8>, shape: [usize; 3], num_classes: usize) -> Result<Self> {
        Self::with_availability(
            labels,
            shape,
            num_classes,
            vec![true; num_classes],
            [1.0; 3],
        )
    }

    pub fn with_availability(
        labels: Vec<u8>,
        shape: [usize; 3],
        num_classes: usize,
        mut available: Vec<bool>,
        spacing: [f64; 3],
    ) -> Result<Self> {
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::Invalid(format!(
                "num_classes {num_classes} out of range"
            )));
        }
        if labels.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "{} labels for shape {shape:?}",
                labels.len()
            )));
        }
        if available.len() != num_classes {
            return Err(Error::Shape(format!(
                "availability mask has {} entries, expected {num_classes}",
                available.len()
            )));
        }
        check_spacing(spacing)?;
        if let Some((index, &label)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= num_classes)
        {
            return Err(Error::InvalidLabel {
                label,
                index,
                num_classes,
            });
        }
        available[0] = true;
        Ok(Self {
            labels,
            shape,
            num_classes,
            available,
            spacing,
        })
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn available(&self) -> &[bool] {
        &self.available
    }

    pub fn set_available(&mut self, class: usize, available: bool) {
        if class > 0 && class < self.num_classes {
            self.available[class] = available;
        }
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> u8 {
        let [_, h, w] = self.shape;
        self.labels[(z * h + y) * w + x]
    }

    /// Copy with a different label buffer of the same shape and metadata.
    pub fn with_labels(&self, labels: Vec<u8>, shape: [usize; 3]) -> Result<Self> {
        Self::with_availability(
            labels,
            shape,
            self.num_classes,
            self.available.clone(),
            self.spacing,
        )
    }

    pub fn label_set(&self) -> BTreeSet<u8> {
        self.labels.iter().copied().collect()
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    /// `[K, D, H, W]` one-hot encoding.
    pub fn one_hot(&self) -> Tensor<f32> {
        let n = self.labels.len();
        let [d, h, w] = self.shape;
        let mut data = vec![0.0f32; self.num_classes * n];
        for (i, &l) in self.labels.iter().enumerate() {
            data[l as usize * n + i] = 1.0;
        }
        Tensor::new(vec![self.num_classes, d, h, w], data).expect("one-hot shape")
    }
}
