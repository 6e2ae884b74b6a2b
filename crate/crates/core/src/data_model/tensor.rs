use serde::{Deserialize, Serialize};

use crate::error::{shape_err, ApexError, Result};
use crate::linalg::Matrix;

/// Dense `F × T × D` tensor in `f64`, laid out `(f, t, d)` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    freq: usize,
    time: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(freq: usize, time: usize, channels: usize) -> Self {
        Self {
            freq,
            time,
            channels,
            data: vec![0.0; freq * time * channels],
        }
    }

    pub fn from_vec(freq: usize, time: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != freq * time * channels {
            return Err(shape_err!(
                "{freq}x{time}x{channels} tensor needs {} values, got {}",
                freq * time * channels,
                data.len()
            ));
        }
        Ok(Self {
            freq,
            time,
            channels,
            data,
        })
    }

    pub fn from_fn(
        freq: usize,
        time: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(freq * time * channels);
        for fi in 0..freq {
            for ti in 0..time {
                for d in 0..channels {
                    data.push(f(fi, ti, d));
                }
            }
        }
        Self {
            freq,
            time,
            channels,
            data,
        }
    }

    pub fn freq(&self) -> usize {
        self.freq
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, f: usize, t: usize, d: usize) -> f64 {
        self.data[(f * self.time + t) * self.channels + d]
    }

    #[inline]
    pub fn set(&mut self, f: usize, t: usize, d: usize, v: f64) {
        self.data[(f * self.time + t) * self.channels + d] = v;
    }

    /// The channel vector at one spatial cell.
    pub fn fiber(&self, f: usize, t: usize) -> &[f64] {
        let start = (f * self.time + t) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn fiber_mut(&mut self, f: usize, t: usize) -> &mut [f64] {
        let start = (f * self.time + t) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    pub fn scaled(&self, s: f64) -> Tensor3 {
        Tensor3 {
            freq: self.freq,
            time: self.time,
            channels: self.channels,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }
}

/// A backbone feature map as exported for one sample. Values are kept in
/// `f32` exactly as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub sample_id: String,
    pub freq_bins: usize,
    pub time_frames: usize,
    pub channels: usize,
    pub input_freq_bins: usize,
    pub input_time_frames: usize,
    pub values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        sample_id: impl Into<String>,
        (freq_bins, time_frames, channels): (usize, usize, usize),
        (input_freq_bins, input_time_frames): (usize, usize),
        values: Vec<f32>,
    ) -> Result<Self> {
        let fm = Self {
            sample_id: sample_id.into(),
            freq_bins,
            time_frames,
            channels,
            input_freq_bins,
            input_time_frames,
            values,
        };
        fm.validate()?;
        Ok(fm)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.freq_bins * self.time_frames * self.channels {
            return Err(shape_err!(
                "feature map {} declares {}x{}x{} but holds {} values",
                self.sample_id,
                self.freq_bins,
                self.time_frames,
                self.channels,
                self.values.len()
            ));
        }
        if self.freq_bins == 0 || self.time_frames == 0 || self.channels == 0 {
            return Err(shape_err!("feature map {} has an empty axis", self.sample_id));
        }
        if self.freq_bins > self.input_freq_bins || self.time_frames > self.input_time_frames {
            return Err(shape_err!(
                "feature map {} latent grid {}x{} exceeds input geometry {}x{}",
                self.sample_id,
                self.freq_bins,
                self.time_frames,
                self.input_freq_bins,
                self.input_time_frames
            ));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(ApexError::Data(format!(
                "feature map {} contains non-finite values",
                self.sample_id
            )));
        }
        Ok(())
    }

    pub fn input_geometry(&self) -> InputGeometry {
        InputGeometry {
            freq_bins: self.input_freq_bins,
            time_frames: self.input_time_frames,
        }
    }

    pub fn to_tensor(&self) -> Tensor3 {
        Tensor3 {
            freq: self.freq_bins,
            time: self.time_frames,
            channels: self.channels,
            data: self.values.iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Size of the model input spectrogram.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputGeometry {
    pub freq_bins: usize,
    pub time_frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramImage {
    pub sample_id: String,
    pub freq_bins: usize,
    pub time_frames: usize,
    pub values: Vec<f32>,
}

impl SpectrogramImage {
    pub fn new(sample_id: impl Into<String>, freq_bins: usize, time_frames: usize, values: Vec<f32>) -> Result<Self> {
        let s = Self {
            sample_id: sample_id.into(),
            freq_bins,
            time_frames,
            values,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.freq_bins * self.time_frames {
            return Err(shape_err!(
                "spectrogram {} declares {}x{} but holds {} values",
                self.sample_id,
                self.freq_bins,
                self.time_frames,
                self.values.len()
            ));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(ApexError::Data(format!(
                "spectrogram {} contains non-finite values",
                self.sample_id
            )));
        }
        Ok(())
    }

    pub fn geometry(&self) -> InputGeometry {
        InputGeometry {
            freq_bins: self.freq_bins,
            time_frames: self.time_frames,
        }
    }

    #[inline]
    pub fn get(&self, f: usize, t: usize) -> f32 {
        self.values[f * self.time_frames + t]
    }
}

/// Linear classification head `l = W v + b` over pooled features.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl ClassifierHead {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weights.rows() != bias.len() {
            return Err(shape_err!(
                "head has {} weight rows but {} biases",
                weights.rows(),
                bias.len()
            ));
        }
        if !weights.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(ApexError::Data("classifier head has non-finite entries".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn channels(&self) -> usize {
        self.weights.cols()
    }
}

/// Global average pooling over the spatial axes.
pub fn gap(z: &Tensor3) -> Vec<f64> {
    let mut v = vec![0.0; z.channels()];
    for f in 0..z.freq() {
        for t in 0..z.time() {
            for (acc, x) in v.iter_mut().zip(z.fiber(f, t)) {
                *acc += x;
            }
        }
    }
    let n = (z.freq() * z.time()) as f64;
    v.iter_mut().for_each(|x| *x /= n);
    v
}

pub fn logits(head: &ClassifierHead, v: &[f64]) -> Result<Vec<f64>> {
    let mut l = head.weights.matvec(v)?;
    for (li, b) in l.iter_mut().zip(&head.bias) {
        *li += b;
    }
    Ok(l)
}
