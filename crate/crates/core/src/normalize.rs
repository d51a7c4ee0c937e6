//! Intensity normalization for CT and MRI inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::Volume;

/// Hounsfield window `[low, high]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub low: f32,
    pub high: f32,
}

impl Window {
    pub const fn new(low: f32, high: f32) -> Self {
        Self { low, high }
    }
}

/// Wide, soft-tissue and liver-ish windows.
pub const DEFAULT_CT_WINDOWS: [Window; 3] = [
    Window::new(-1000.0, 400.0),
    Window::new(-160.0, 240.0),
    Window::new(40.0, 560.0),
];

pub const MRI_CLIP: f32 = 5.0;

fn single_channel(v: &Volume, what: &str) -> Result<()> {
    if v.channels() != 1 {
        return Err(Error::Invalid(format!(
            "{what} normalization expects one channel, got {}",
            v.channels()
        )));
    }
    Ok(())
}

/// Clamps a CT volume to each window and maps it linearly onto `[0, 1]`,
/// one output channel per window.
pub fn normalize_ct(v: &Volume, windows: &[Window]) -> Result<Volume> {
    single_channel(v, "CT")?;
    if windows.len() != 3 {
        return Err(Error::Invalid(format!(
            "expected 3 CT windows, got {}",
            windows.len()
        )));
    }
    if let Some(w) = windows.iter().find(|w| !(w.low < w.high)) {
        return Err(Error::Invalid(format!(
            "window low {} must be below high {}",
            w.low, w.high
        )));
    }
    let [d, h, w] = v.spatial();
    let src = v.data.data();
    let mut data = Vec::with_capacity(3 * src.len());
    for win in windows {
        let span = win.high - win.low;
        data.extend(
            src.iter()
                .map(|&x| (x.clamp(win.low, win.high) - win.low) / span),
        );
    }
    Ok(v.with_data(Tensor::new(vec![3, d, h, w], data)?))
}

/// Z-scores clipped to `[-MRI_CLIP, MRI_CLIP]`; `None` for constant input.
pub(crate) fn standardize_clipped(src: &[f32]) -> Option<Vec<f64>> {
    let n = src.len() as f64;
    let mean = src.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = src.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return None;
    }
    let std = var.sqrt();
    let clip = MRI_CLIP as f64;
    Some(
        src.iter()
            .map(|&x| ((x as f64 - mean) / std).clamp(-clip, clip))
            .collect(),
    )
}

/// Z-score, clip to `[-5, 5]`, then min-max onto `[0, 1]`. A constant volume
/// maps to 0.5 everywhere.
pub fn normalize_mri(v: &Volume) -> Result<Volume> {
    single_channel(v, "MRI")?;
    let Some(z) = standardize_clipped(v.data.data()) else {
        return Ok(v.with_data(v.data.map(|_| 0.5)));
    };
    let lo = z.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let data = z.iter().map(|&x| ((x - lo) / (hi - lo)) as f32).collect();
    Ok(v.with_data(Tensor::new(v.data.shape().to_vec(), data)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Modality;

    fn vol(values: &[f32]) -> Volume {
        let t = Tensor::new(vec![1, 1, 1, values.len()], values.to_vec()).unwrap();
        Volume::new(t, [1.0; 3], Modality::Ct).unwrap()
    }

    #[test]
    fn ct_window_endpoints_and_clamping() {
        let w = [
            Window::new(-100.0, 100.0),
            Window::new(0.0, 50.0),
            Window::new(10.0, 20.0),
        ];
        let out = normalize_ct(&vol(&[-100.0, 100.0, -500.0]), &w).unwrap();
        assert_eq!(out.data.channel(0).data(), &[0.0, 1.0, 0.0]);
        assert_eq!(out.data.channel(1).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn default_windows_on_a_ramp() {
        // hand evaluation of (clamp(x) - low) / (high - low)
        let out = normalize_ct(&vol(&[-300.0, 100.0, 300.0]), &DEFAULT_CT_WINDOWS).unwrap();
        let expect = [
            [0.5, 0.785_714_3, 0.928_571_4],
            [0.0, 0.65, 1.0],
            [0.0, 0.115_384_6, 0.5],
        ];
        for (c, row) in expect.iter().enumerate() {
            for (a, b) in out.data.channel(c).data().iter().zip(row) {
                assert!((a - b).abs() < 1e-6, "channel {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn inverted_window_rejected() {
        let w = [
            Window::new(10.0, 10.0),
            Window::new(0.0, 1.0),
            Window::new(0.0, 1.0),
        ];
        assert!(normalize_ct(&vol(&[0.0]), &w).is_err());
    }

    #[test]
    fn mri_constant_is_half() {
        let out = normalize_mri(&vol(&[3.0; 5])).unwrap();
        assert!(out.data.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn mri_two_voxels() {
        let out = normalize_mri(&vol(&[0.0, 10.0])).unwrap();
        assert_eq!(out.data.data(), &[0.0, 1.0]);
    }

    #[test]
    fn mri_outlier_is_clipped_at_five_sigma() {
        // 99 zeros and one 1000: mean 10, variance 9900, so the outlier sits near 9.95 sigma
        let mut values = vec![0.0f32; 99];
        values.push(1000.0);
        let z = standardize_clipped(&values).unwrap();
        assert_eq!(z[99], 5.0);
        assert!((z[0] + 10.0 / 9900f64.sqrt()).abs() < 1e-9);
        let out = normalize_mri(&vol(&values)).unwrap();
        assert_eq!(out.data.data()[0], 0.0);
        assert_eq!(out.data.data()[99], 1.0);
    }
}
