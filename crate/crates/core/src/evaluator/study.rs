//! Masking ablation: does removing the region an explanation points at hurt
//! the model more than removing a random region of the same shape?

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::masking::{apply_mask, random_mask_like, MaskSpec, DEFAULT_FLOOR, DEFAULT_SOFTNESS};
use super::metrics::{argmax, Condition, MetricReport};
use crate::data_model::{gap, logits, FeatureMapSet, SpectrogramImage};
use crate::disentangler::{apply_transform, DisentangleState, FoldedHead};
use crate::error::{ApexError, Result};
use crate::explainer::{channel_contributions, localize_region, Region};
use crate::schemes::Scheme;

/// Maps a (possibly masked) input spectrogram of sample `index` to class
/// logits by running the real model.
pub trait SpectrogramModel: Sync {
    fn logits(&self, index: usize, spectrogram: &SpectrogramImage) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub attenuation_floor: f64,
    pub edge_softness: usize,
    pub seeds: Vec<u64>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            attenuation_floor: DEFAULT_FLOOR,
            edge_softness: DEFAULT_SOFTNESS,
            seeds: vec![0, 1, 2, 3],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeStudy {
    pub scheme: Scheme,
    pub no_mask: MetricReport,
    pub apex_mask: MetricReport,
    pub random_mask: Vec<MetricReport>,
    pub random_cmap: MeanStd,
    pub random_auroc: MeanStd,
    pub random_t1_acc: MeanStd,
    pub random_aeer: MeanStd,
}

impl SchemeStudy {
    /// `mean random cmAP − APEX cmAP`: how much more the explained region
    /// matters than a random one.
    pub fn cmap_gap(&self) -> f64 {
        self.random_cmap.mean - self.apex_mask.cmap
    }

    pub fn t1_gap(&self) -> f64 {
        self.random_t1_acc.mean - self.apex_mask.t1_acc
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub samples: usize,
    pub schemes: Vec<SchemeStudy>,
}

/// Region of the top-1 contributing channel for the predicted class.
pub fn apex_region(state: &DisentangleState, folded: &FoldedHead, features: &FeatureMapSet, index: usize) -> Result<Region> {
    let fm = &features.maps[index];
    let zhat = apply_transform(&state.u, &fm.to_tensor())?;
    let y = argmax(&logits(folded, &gap(&zhat))?);
    let top = channel_contributions(&zhat, folded, y)?[0].0;
    Ok(localize_region(&zhat, top, state.scheme(), fm.input_geometry()))
}

fn evaluate(
    model: &dyn SpectrogramModel,
    spectrograms: &[SpectrogramImage],
    samples: &[usize],
    labels: &[Vec<usize>],
    masks: Option<&[MaskSpec]>,
    condition: Condition,
) -> Result<MetricReport> {
    let logits: Vec<Vec<f64>> = samples
        .par_iter()
        .enumerate()
        .map(|(j, &i)| match masks {
            Some(m) => model.logits(i, &apply_mask(&spectrograms[i], &m[j])?),
            None => model.logits(i, &spectrograms[i]),
        })
        .collect::<Result<_>>()?;
    MetricReport::from_logits(&logits, labels, condition)
}

/// For each `(state, folded head)` pair — one per scheme — evaluates the
/// unmasked model, APEX-guided masks, and one random placement per seed.
pub fn masking_study(
    features: &FeatureMapSet,
    spectrograms: &[SpectrogramImage],
    samples: &[usize],
    fitted: &[(&DisentangleState, &FoldedHead)],
    model: &dyn SpectrogramModel,
    config: &StudyConfig,
) -> Result<StudyReport> {
    if spectrograms.len() != features.len() {
        return Err(ApexError::Data(format!(
            "masking needs a spectrogram for every sample ({} of {})",
            spectrograms.len(),
            features.len()
        )));
    }
    if samples.is_empty() {
        return Err(ApexError::Data("masking study over zero samples".into()));
    }
    if config.seeds.is_empty() {
        return Err(ApexError::Validation("masking study needs at least one random seed".into()));
    }
    let labels: Vec<Vec<usize>> = samples.iter().map(|&i| features.labels[i].clone()).collect();
    let no_mask = evaluate(model, spectrograms, samples, &labels, None, Condition::NoMask)?;
    let mask_of = |region: Region| MaskSpec {
        region,
        attenuation_floor: config.attenuation_floor,
        edge_softness: config.edge_softness,
    };

    let mut schemes = Vec::with_capacity(fitted.len());
    for &(state, folded) in fitted {
        let scheme = state.scheme();
        let regions: Vec<Region> = samples
            .par_iter()
            .map(|&i| apex_region(state, folded, features, i))
            .collect::<Result<_>>()?;
        let apex_masks: Vec<MaskSpec> = regions.iter().map(|&r| mask_of(r)).collect();
        let mut apex_mask = evaluate(model, spectrograms, samples, &labels, Some(&apex_masks), Condition::ApexMask)?;
        apex_mask.scheme = Some(scheme);

        let mut random_mask = Vec::with_capacity(config.seeds.len());
        for &seed in &config.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((scheme.code() as u64) << 32));
            let masks: Vec<MaskSpec> = regions
                .iter()
                .zip(samples)
                .map(|(r, &i)| Ok(mask_of(random_mask_like(r, spectrograms[i].geometry(), &mut rng)?)))
                .collect::<Result<_>>()?;
            let mut rep = evaluate(model, spectrograms, samples, &labels, Some(&masks), Condition::RandomMask)?;
            rep.scheme = Some(scheme);
            rep.seeds = vec![seed];
            random_mask.push(rep);
        }
        let col = |f: fn(&MetricReport) -> f64| MeanStd::of(&random_mask.iter().map(f).collect::<Vec<_>>());
        let mut no_mask = no_mask.clone();
        no_mask.scheme = Some(scheme);
        schemes.push(SchemeStudy {
            scheme,
            random_cmap: col(|r| r.cmap),
            random_auroc: col(|r| r.auroc),
            random_t1_acc: col(|r| r.t1_acc),
            random_aeer: col(|r| r.aeer),
            no_mask,
            apex_mask,
            random_mask,
        });
    }
    Ok(StudyReport {
        config: config.clone(),
        samples: samples.len(),
        schemes,
    })
}

impl StudyReport {
    /// Aligned text table, one block per scheme.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<15} {:<12} {:>15} {:>15} {:>15} {:>15}",
            "scheme", "condition", "cmAP", "AUROC", "T1-Acc", "aEER"
        );
        let one = |v: f64| format!("{v:.4}");
        let pm = |m: MeanStd| format!("{:.4}±{:.4}", m.mean, m.std);
        for s in &self.schemes {
            for (cond, cells) in [
                (
                    "no_mask",
                    [one(s.no_mask.cmap), one(s.no_mask.auroc), one(s.no_mask.t1_acc), one(s.no_mask.aeer)],
                ),
                (
                    "random_mask",
                    [pm(s.random_cmap), pm(s.random_auroc), pm(s.random_t1_acc), pm(s.random_aeer)],
                ),
                (
                    "apex_mask",
                    [
                        one(s.apex_mask.cmap),
                        one(s.apex_mask.auroc),
                        one(s.apex_mask.t1_acc),
                        one(s.apex_mask.aeer),
                    ],
                ),
            ] {
                let _ = writeln!(
                    out,
                    "{:<15} {:<12} {:>15} {:>15} {:>15} {:>15}",
                    s.scheme.as_str(),
                    cond,
                    cells[0],
                    cells[1],
                    cells[2],
                    cells[3]
                );
            }
        }
        out
    }
}
