//! Soft spectrogram masks and same-shape random placements.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{InputGeometry, SpectrogramImage};
use crate::error::{ApexError, Result};
use crate::explainer::Region;
use crate::schemes::Scheme;

pub const DEFAULT_FLOOR: f64 = 0.1;
pub const DEFAULT_SOFTNESS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub region: Region,
    pub attenuation_floor: f64,
    pub edge_softness: usize,
}

impl MaskSpec {
    pub fn new(region: Region) -> Self {
        Self {
            region,
            attenuation_floor: DEFAULT_FLOOR,
            edge_softness: DEFAULT_SOFTNESS,
        }
    }

    pub fn validate(&self, geom: InputGeometry) -> Result<()> {
        // a floor of exactly 1 is the identity mask and is allowed
        if !(0.0..=1.0).contains(&self.attenuation_floor) {
            return Err(ApexError::Validation(format!(
                "attenuation floor {} outside [0, 1]",
                self.attenuation_floor
            )));
        }
        if !self.region.fits(geom) {
            return Err(ApexError::Validation(format!(
                "mask region {:?} does not fit a {}x{} spectrogram",
                self.region, geom.freq_bins, geom.time_frames
            )));
        }
        Ok(())
    }
}

/// Taper weight of `x` inside `[lo, hi)`: 1/s, 2/s, … rising from the
/// border, reaching 1 after `s` bins. `s` is capped at half the width.
fn taper(x: usize, (lo, hi): (usize, usize), softness: usize) -> f64 {
    let s = softness.min((hi - lo) / 2);
    if s == 0 {
        return 1.0;
    }
    let d = (x - lo).min(hi - 1 - x);
    ((d + 1) as f64 / s as f64).min(1.0)
}

/// Mask strength at `(f, t)`: 0 outside the region, 1 deep inside.
pub fn mask_weight(spec: &MaskSpec, f: usize, t: usize) -> f64 {
    let r = &spec.region;
    let s = spec.edge_softness;
    let wf = r
        .f_range
        .filter(|(lo, hi)| (*lo..*hi).contains(&f))
        .map(|range| taper(f, range, s));
    let wt = r
        .t_range
        .filter(|(lo, hi)| (*lo..*hi).contains(&t))
        .map(|range| taper(t, range, s));
    match r.kind {
        Scheme::Square => match (wf, wt) {
            (Some(a), Some(b)) => a * b,
            _ => 0.0,
        },
        Scheme::Time => wt.unwrap_or(0.0),
        Scheme::Frequency => wf.unwrap_or(0.0),
        Scheme::TimeFrequency => wf.unwrap_or(0.0).max(wt.unwrap_or(0.0)),
    }
}

/// Multiplies each bin by `1 − (1 − floor) · w`, where `w` is the taper
/// weight of the bin.
pub fn apply_mask(spectrogram: &SpectrogramImage, spec: &MaskSpec) -> Result<SpectrogramImage> {
    spec.validate(spectrogram.geometry())?;
    let mut out = spectrogram.clone();
    let tf = spectrogram.time_frames;
    for (i, v) in out.values.iter_mut().enumerate() {
        let w = mask_weight(spec, i / tf, i % tf);
        if w > 0.0 {
            *v = (*v as f64 * (1.0 - (1.0 - spec.attenuation_floor) * w)) as f32;
        }
    }
    Ok(out)
}

/// A region of the same kind and extent placed uniformly at random.
pub fn random_mask_like(region: &Region, geom: InputGeometry, rng: &mut impl Rng) -> Result<Region> {
    if !region.fits(geom) {
        return Err(ApexError::Validation("region does not fit the geometry".into()));
    }
    let mut place = |r: Option<(usize, usize)>, n: usize| {
        r.map(|(lo, hi)| {
            let len = hi - lo;
            let start = rng.random_range(0..=n - len);
            (start, start + len)
        })
    };
    let f_range = place(region.f_range, geom.freq_bins);
    let t_range = place(region.t_range, geom.time_frames);
    Ok(Region {
        kind: region.kind,
        f_range,
        t_range,
    })
}
