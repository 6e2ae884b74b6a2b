//! Inference-time explanations: which channels carry the predicted class,
//! where they fire, and which training exemplars they stand for.

mod render;

pub use render::{read_pgm, render_explanation, write_pgm, RenderedFiles};

use serde::{Deserialize, Serialize};

use crate::data_model::{gap, logits, FeatureMap, InputGeometry, Tensor3};
use crate::disentangler::{apply_transform, DisentangleState, FoldedHead};
use crate::error::{shape_err, ApexError, Result};
use crate::prototype_bank::{query_bank, PrototypeBank, PrototypeEntry};
use crate::schemes::{select, Coords, Scheme};

pub const DEFAULT_TOP_K: usize = 4;

/// An area of the input spectrogram, in input bins, half-open.
///
/// Square covers `f_range × t_range`; Time covers all frequencies in
/// `t_range`; Frequency covers all frames in `f_range`; TimeFrequency is the
/// union of the row band and the column band.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub kind: Scheme,
    pub f_range: Option<(usize, usize)>,
    pub t_range: Option<(usize, usize)>,
}

impl Region {
    pub fn contains(&self, f: usize, t: usize) -> bool {
        let in_f = self.f_range.is_some_and(|(lo, hi)| (lo..hi).contains(&f));
        let in_t = self.t_range.is_some_and(|(lo, hi)| (lo..hi).contains(&t));
        match self.kind {
            Scheme::Square => in_f && in_t,
            Scheme::Time => in_t,
            Scheme::Frequency => in_f,
            Scheme::TimeFrequency => in_f || in_t,
        }
    }

    pub fn fits(&self, geom: InputGeometry) -> bool {
        let ok = |r: Option<(usize, usize)>, n: usize| r.is_none_or(|(lo, hi)| lo < hi && hi <= n);
        ok(self.f_range, geom.freq_bins) && ok(self.t_range, geom.time_frames)
    }

    /// Whether the two regions share at least one input cell.
    pub fn overlaps(&self, other: &Region, geom: InputGeometry) -> bool {
        (0..geom.freq_bins).any(|f| (0..geom.time_frames).any(|t| self.contains(f, t) && other.contains(f, t)))
    }
}

/// Input range `[i·n_in/n, (i+1)·n_in/n)` covered by latent index `i`.
pub fn latent_to_input(i: usize, n: usize, n_in: usize) -> (usize, usize) {
    (i * n_in / n, (i + 1) * n_in / n)
}

/// Maps latent coordinates to an input region for `scheme`.
pub fn region_from_coords(coords: Coords, scheme: Scheme, latent: (usize, usize), geom: InputGeometry) -> Region {
    let (freq, time) = latent;
    let f_range = coords.f.map(|f| latent_to_input(f, freq, geom.freq_bins));
    let t_range = coords.t.map(|t| latent_to_input(t, time, geom.time_frames));
    match scheme {
        Scheme::Time => Region {
            kind: scheme,
            f_range: None,
            t_range,
        },
        Scheme::Frequency => Region {
            kind: scheme,
            f_range,
            t_range: None,
        },
        Scheme::Square | Scheme::TimeFrequency => Region {
            kind: scheme,
            f_range,
            t_range,
        },
    }
}

pub fn localize_region(zhat: &Tensor3, k: usize, scheme: Scheme, geom: InputGeometry) -> Region {
    let coords = select(zhat, k, scheme).coords;
    region_from_coords(coords, scheme, (zhat.freq(), zhat.time()), geom)
}

/// `Wf[y, k] · gap(zhat)[k]` for every channel, before the ReLU.
pub fn signed_contributions(zhat: &Tensor3, folded: &FoldedHead, y: usize) -> Result<Vec<f64>> {
    if y >= folded.num_classes() {
        return Err(ApexError::Validation(format!(
            "class {y} out of range for {} classes",
            folded.num_classes()
        )));
    }
    if zhat.channels() != folded.channels() {
        return Err(shape_err!(
            "head has {} channels, map has {}",
            folded.channels(),
            zhat.channels()
        ));
    }
    Ok(gap(zhat)
        .iter()
        .zip(folded.weights.row(y))
        .map(|(g, w)| w * g)
        .collect())
}

/// ReLU'd per-channel evidence for class `y`, ranked descending (ties to the
/// lower channel).
pub fn channel_contributions(zhat: &Tensor3, folded: &FoldedHead, y: usize) -> Result<Vec<(usize, f64)>> {
    let mut ranked: Vec<(usize, f64)> = signed_contributions(zhat, folded, y)?
        .into_iter()
        .map(|c| c.max(0.0))
        .enumerate()
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(ranked)
}

/// A heatmap over the input grid with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub freq_bins: usize,
    pub time_frames: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn get(&self, f: usize, t: usize) -> f64 {
        self.values[f * self.time_frames + t]
    }
}

/// Bilinear resize with half-pixel centers, edges clamped.
pub fn bilinear_resize(src: &[f64], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    let axis = |dst: usize, n: usize, n_out: usize| -> (usize, usize, f64) {
        let x = ((dst as f64 + 0.5) * n as f64 / n_out as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let (f0, f1, a) = axis(i, h, oh);
        for j in 0..ow {
            let (t0, t1, b) = axis(j, w, ow);
            let top = src[f0 * w + t0] * (1.0 - b) + src[f0 * w + t1] * b;
            let bottom = src[f1 * w + t0] * (1.0 - b) + src[f1 * w + t1] * b;
            out.push(top * (1.0 - a) + bottom * a);
        }
    }
    out
}

/// `ReLU(Wf[y, k] · zhat[., ., k] + b[y] / D)`, divided by its maximum, then
/// upsampled bilinearly to the input grid.
pub fn channel_heatmap(zhat: &Tensor3, folded: &FoldedHead, y: usize, k: usize, geom: InputGeometry) -> Result<Heatmap> {
    if y >= folded.num_classes() || k >= zhat.channels() || zhat.channels() != folded.channels() {
        return Err(shape_err!("heatmap for class {y}, channel {k} is out of range"));
    }
    let w = folded.weights[(y, k)];
    let b = folded.bias[y] / zhat.channels() as f64;
    let (fr, tm) = (zhat.freq(), zhat.time());
    let mut cam: Vec<f64> = (0..fr * tm)
        .map(|i| (w * zhat.get(i / tm, i % tm, k) + b).max(0.0))
        .collect();
    let peak = cam.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        cam.iter_mut().for_each(|v| *v /= peak);
    }
    let values = if (fr, tm) == (geom.freq_bins, geom.time_frames) {
        cam
    } else {
        bilinear_resize(&cam, (fr, tm), (geom.freq_bins, geom.time_frames))
    };
    Ok(Heatmap {
        freq_bins: geom.freq_bins,
        time_frames: geom.time_frames,
        values,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelExplanation {
    pub channel: usize,
    pub contribution: f64,
    pub region: Region,
    #[serde(skip)]
    pub heatmap: Option<Heatmap>,
    pub prototypes: Vec<PrototypeEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub sample_id: String,
    pub scheme: Scheme,
    pub predicted_class: usize,
    pub logits: Vec<f64>,
    pub input_geometry: InputGeometry,
    /// Every channel, ranked.
    pub contributions: Vec<(usize, f64)>,
    /// The top-k channels in detail.
    pub channels: Vec<ChannelExplanation>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn explain(
    sample: &FeatureMap,
    state: &DisentangleState,
    folded: &FoldedHead,
    bank: &PrototypeBank,
    top_k: usize,
) -> Result<Explanation> {
    if bank.scheme != state.scheme() {
        return Err(ApexError::Config(format!(
            "bank was built for the {} scheme but the state uses {}",
            bank.scheme,
            state.scheme()
        )));
    }
    if bank.channels() != state.channels() {
        return Err(shape_err!(
            "bank covers {} channels, state has {}",
            bank.channels(),
            state.channels()
        ));
    }
    let zhat = apply_transform(&state.u, &sample.to_tensor())?;
    let scores = logits(folded, &gap(&zhat))?;
    let y = argmax(&scores);
    let contributions = channel_contributions(&zhat, folded, y)?;
    let geom = sample.input_geometry();
    let top_k = top_k.min(state.channels());
    let channels = contributions[..top_k]
        .iter()
        .map(|&(k, c)| {
            Ok(ChannelExplanation {
                channel: k,
                contribution: c,
                region: localize_region(&zhat, k, state.scheme(), geom),
                heatmap: Some(channel_heatmap(&zhat, folded, y, k, geom)?),
                prototypes: query_bank(bank, k, bank.m)?.to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Explanation {
        sample_id: sample.sample_id.clone(),
        scheme: state.scheme(),
        predicted_class: y,
        logits: scores,
        input_geometry: geom,
        contributions,
        channels,
    })
}
