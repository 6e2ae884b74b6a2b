//! Prototype coordinate selection schemes, prototype extraction, the purity
//! score and channel activation.
//!
//! Every scheme reduces to a set of weighted cells: the prototype vector is
//! `Σ w · zhat[f, t, :]` over those cells. The weights only depend on where
//! the argmax landed, so holding the coordinates fixed makes the prototype
//! linear in `zhat`, which is what [`purity_gradient`] differentiates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data_model::Tensor3;
use crate::error::ApexError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Square,
    Time,
    Frequency,
    TimeFrequency,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Square, Scheme::Time, Scheme::Frequency, Scheme::TimeFrequency];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Square => "square",
            Scheme::Time => "time",
            Scheme::Frequency => "frequency",
            Scheme::TimeFrequency => "time_frequency",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = ApexError;

    fn from_str(s: &str) -> Result<Self, ApexError> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "square" | "s" => Ok(Scheme::Square),
            "time" | "t" => Ok(Scheme::Time),
            "frequency" | "freq" | "f" => Ok(Scheme::Frequency),
            "time_frequency" | "timefrequency" | "tf" => Ok(Scheme::TimeFrequency),
            other => Err(ApexError::Config(format!("unknown scheme '{other}'"))),
        }
    }
}

/// Selected latent coordinates. Which fields are set depends on the scheme.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Coords {
    pub f: Option<usize>,
    pub t: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeVector {
    pub channel: usize,
    pub scheme: Scheme,
    pub coords: Coords,
    pub vector: Vec<f64>,
    pub source_sample: String,
}

impl PrototypeVector {
    pub fn from_sample(mut self, sample_id: impl Into<String>) -> Self {
        self.source_sample = sample_id.into();
        self
    }
}

/// Cells (with weights) whose channel vectors are averaged into a prototype.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub coords: Coords,
    pub cells: Vec<(usize, usize, f64)>,
}

impl Selection {
    pub fn vector(&self, z: &Tensor3) -> Vec<f64> {
        let mut p = vec![0.0; z.channels()];
        for &(f, t, w) in &self.cells {
            for (acc, x) in p.iter_mut().zip(z.fiber(f, t)) {
                *acc += w * x;
            }
        }
        p
    }
}

fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

fn time_star(z: &Tensor3, k: usize) -> usize {
    let nf = z.freq() as f64;
    argmax_first((0..z.time()).map(|t| (0..z.freq()).map(|f| z.get(f, t, k)).sum::<f64>() / nf))
}

fn freq_star(z: &Tensor3, k: usize) -> usize {
    let nt = z.time() as f64;
    argmax_first((0..z.freq()).map(|f| (0..z.time()).map(|t| z.get(f, t, k)).sum::<f64>() / nt))
}

/// Coordinates and cell weights for `scheme` on channel `k` of `zhat`.
/// Ties go to the lowest index (row-major `(f, t)` for squares).
pub fn select(zhat: &Tensor3, k: usize, scheme: Scheme) -> Selection {
    assert!(k < zhat.channels(), "channel {k} out of range");
    let (nf, nt) = (zhat.freq(), zhat.time());
    match scheme {
        Scheme::Square => {
            let idx = argmax_first(
                (0..nf).flat_map(|f| (0..nt).map(move |t| (f, t))).map(|(f, t)| zhat.get(f, t, k)),
            );
            let (f, t) = (idx / nt, idx % nt);
            Selection {
                coords: Coords { f: Some(f), t: Some(t) },
                cells: vec![(f, t, 1.0)],
            }
        }
        Scheme::Time => {
            let t = time_star(zhat, k);
            let w = 1.0 / nf as f64;
            Selection {
                coords: Coords { f: None, t: Some(t) },
                cells: (0..nf).map(|f| (f, t, w)).collect(),
            }
        }
        Scheme::Frequency => {
            let f = freq_star(zhat, k);
            let w = 1.0 / nt as f64;
            Selection {
                coords: Coords { f: Some(f), t: None },
                cells: (0..nt).map(|t| (f, t, w)).collect(),
            }
        }
        Scheme::TimeFrequency => {
            let t = time_star(zhat, k);
            let f = freq_star(zhat, k);
            let (wt, wf) = (0.5 / nf as f64, 0.5 / nt as f64);
            let mut cells: Vec<(usize, usize, f64)> = (0..nf).map(|fi| (fi, t, wt)).collect();
            cells.extend((0..nt).map(|ti| (f, ti, wf)));
            Selection {
                coords: Coords { f: Some(f), t: Some(t) },
                cells,
            }
        }
    }
}

pub fn extract(zhat: &Tensor3, k: usize, scheme: Scheme) -> PrototypeVector {
    match scheme {
        Scheme::Square => extract_square(zhat, k),
        Scheme::Time => extract_time(zhat, k),
        Scheme::Frequency => extract_frequency(zhat, k),
        Scheme::TimeFrequency => extract_time_frequency(zhat, k),
    }
}

pub fn extract_square(zhat: &Tensor3, k: usize) -> PrototypeVector {
    let sel = select(zhat, k, Scheme::Square);
    let (f, t) = (sel.coords.f.unwrap(), sel.coords.t.unwrap());
    PrototypeVector {
        channel: k,
        scheme: Scheme::Square,
        coords: sel.coords,
        vector: zhat.fiber(f, t).to_vec(),
        source_sample: String::new(),
    }
}

pub fn extract_time(zhat: &Tensor3, k: usize) -> PrototypeVector {
    assert!(k < zhat.channels(), "channel {k} out of range");
    let t = time_star(zhat, k);
    let nf = zhat.freq() as f64;
    PrototypeVector {
        channel: k,
        scheme: Scheme::Time,
        coords: Coords { f: None, t: Some(t) },
        vector: (0..zhat.channels())
            .map(|d| (0..zhat.freq()).map(|f| zhat.get(f, t, d)).sum::<f64>() / nf)
            .collect(),
        source_sample: String::new(),
    }
}

pub fn extract_frequency(zhat: &Tensor3, k: usize) -> PrototypeVector {
    assert!(k < zhat.channels(), "channel {k} out of range");
    let f = freq_star(zhat, k);
    let nt = zhat.time() as f64;
    PrototypeVector {
        channel: k,
        scheme: Scheme::Frequency,
        coords: Coords { f: Some(f), t: None },
        vector: (0..zhat.channels())
            .map(|d| (0..zhat.time()).map(|t| zhat.get(f, t, d)).sum::<f64>() / nt)
            .collect(),
        source_sample: String::new(),
    }
}

pub fn extract_time_frequency(zhat: &Tensor3, k: usize) -> PrototypeVector {
    let pt = extract_time(zhat, k);
    let pf = extract_frequency(zhat, k);
    PrototypeVector {
        channel: k,
        scheme: Scheme::TimeFrequency,
        coords: Coords { f: pf.coords.f, t: pt.coords.t },
        vector: pt.vector.iter().zip(&pf.vector).map(|(a, b)| 0.5 * (a + b)).collect(),
        source_sample: String::new(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PurityScore {
    pub value: f64,
    /// Set when the prototype vector is exactly zero and purity is undefined.
    pub degenerate: bool,
}

pub fn purity_of(vector: &[f64], k: usize) -> PurityScore {
    let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return PurityScore { value: 0.0, degenerate: true };
    }
    PurityScore {
        value: (vector[k].abs() / norm).min(1.0),
        degenerate: false,
    }
}

/// `|p_k| / ‖p‖₂`; zero for a zero vector.
pub fn purity(p: &PrototypeVector) -> f64 {
    let score = purity_of(&p.vector, p.channel);
    if score.degenerate {
        log::debug!(
            "degenerate prototype: zero vector for channel {} of '{}'",
            p.channel,
            p.source_sample
        );
    }
    score.value
}

/// Sum of channel `k` over all spatial cells.
pub fn channel_activation(zhat: &Tensor3, k: usize) -> f64 {
    let mut s = 0.0;
    for f in 0..zhat.freq() {
        for t in 0..zhat.time() {
            s += zhat.get(f, t, k);
        }
    }
    s
}

/// Gradient of `|p_k| / ‖p‖` with respect to `p`. Zero for a zero vector.
pub fn purity_grad_vector(vector: &[f64], k: usize) -> (PurityScore, Vec<f64>) {
    let score = purity_of(vector, k);
    if score.degenerate {
        return (score, vec![0.0; vector.len()]);
    }
    let sq: f64 = vector.iter().map(|v| v * v).sum();
    let norm = sq.sqrt();
    let abs_k = vector[k].abs();
    let sign_k = if vector[k] > 0.0 {
        1.0
    } else if vector[k] < 0.0 {
        -1.0
    } else {
        0.0
    };
    let mut g: Vec<f64> = vector.iter().map(|&v| -abs_k * v / (sq * norm)).collect();
    g[k] += sign_k / norm;
    (score, g)
}

/// Purity gradient with respect to `zhat`, coordinates held fixed.
///
/// Stored in factored form: the gradient at cell `(f, t)` is
/// `w · d_vector` for each `(f, t, w)` in `selection.cells`, zero elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct PurityGradient {
    pub purity: PurityScore,
    pub selection: Selection,
    pub d_vector: Vec<f64>,
}

impl PurityGradient {
    pub fn to_dense(&self, freq: usize, time: usize) -> Tensor3 {
        let d = self.d_vector.len();
        let mut g = Tensor3::zeros(freq, time, d);
        for &(f, t, w) in &self.selection.cells {
            for (dst, dv) in g.fiber_mut(f, t).iter_mut().zip(&self.d_vector) {
                *dst += w * dv;
            }
        }
        g
    }
}

pub fn purity_gradient(zhat: &Tensor3, k: usize, scheme: Scheme) -> PurityGradient {
    let selection = select(zhat, k, scheme);
    let p = selection.vector(zhat);
    let (purity, d_vector) = purity_grad_vector(&p, k);
    PurityGradient {
        purity,
        selection,
        d_vector,
    }
}
