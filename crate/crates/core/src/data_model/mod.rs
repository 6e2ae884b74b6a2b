//! Interchange formats and the in-memory model for exported feature maps,
//! classifier heads, spectrograms and dataset manifests.

pub mod container;
pub mod manifest;
pub mod tensor;

use std::path::Path;

pub use container::{
    read_feature_map, read_head, read_spectrogram, read_tensor_file, write_tensor_file, Container,
    Kind, Payload, TensorFile,
};
pub use manifest::{load_manifest, write_manifest, Manifest, SampleRecord, Split, TaskKind};
pub use tensor::{gap, logits, ClassifierHead, FeatureMap, InputGeometry, SpectrogramImage, Tensor3};

use crate::error::{ApexError, Result};

/// Feature maps of a dataset together with their labels and split tags,
/// index-aligned.
#[derive(Clone, Debug)]
pub struct FeatureMapSet {
    pub maps: Vec<FeatureMap>,
    pub labels: Vec<Vec<usize>>,
    pub splits: Vec<Split>,
}

impl FeatureMapSet {
    pub fn new(maps: Vec<FeatureMap>, labels: Vec<Vec<usize>>, splits: Vec<Split>) -> Result<Self> {
        if maps.len() != labels.len() || maps.len() != splits.len() {
            return Err(ApexError::Shape("feature set columns differ in length".into()));
        }
        if let Some(first) = maps.first() {
            let dims = (first.freq_bins, first.time_frames, first.channels);
            if let Some(bad) = maps
                .iter()
                .find(|m| (m.freq_bins, m.time_frames, m.channels) != dims)
            {
                return Err(ApexError::Shape(format!(
                    "feature map {} has a different shape than {}",
                    bad.sample_id, first.sample_id
                )));
            }
        }
        Ok(Self { maps, labels, splits })
    }

    /// Loads every feature map referenced by `manifest`, resolving relative
    /// paths against `base_dir`.
    pub fn load(manifest: &Manifest, base_dir: &Path) -> Result<Self> {
        let mut maps = Vec::with_capacity(manifest.samples.len());
        for rec in &manifest.samples {
            let fm = read_feature_map(base_dir.join(&rec.path))?;
            if fm.sample_id != rec.sample_id {
                return Err(ApexError::Validation(format!(
                    "manifest entry '{}' points at a file for '{}'",
                    rec.sample_id, fm.sample_id
                )));
            }
            maps.push(fm);
        }
        Self::new(
            maps,
            manifest.samples.iter().map(|s| s.labels.clone()).collect(),
            manifest.samples.iter().map(|s| s.split).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.maps.first().map_or(0, |m| m.channels)
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }
}
