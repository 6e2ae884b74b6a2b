//! The final per-channel exemplar bank.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{Container, FeatureMapSet, Kind, Payload, Split, Tensor3};
use crate::disentangler::{activations_under, apply_transform, rank_samples, DisentangleState, FoldedHead};
use crate::error::{ApexError, Result};
use crate::schemes::{extract, purity_of, Coords, Scheme};

pub const BANK_VERSION: u32 = 1;
pub const DEFAULT_BANK_SIZE: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl std::str::FromStr for Polarity {
    type Err = ApexError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" | "pos" => Ok(Polarity::Positive),
            "negative" | "neg" => Ok(Polarity::Negative),
            other => Err(ApexError::Config(format!("unknown polarity '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeEntry {
    pub sample_id: String,
    pub activation: f64,
    pub coords: Coords,
    pub prototype_vector: Vec<f64>,
    pub purity: f64,
    pub dominant_class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub scheme: Scheme,
    pub polarity: Polarity,
    pub m: usize,
    /// Indexed by channel, ranked.
    pub per_channel: Vec<Vec<PrototypeEntry>>,
}

/// Class with the largest folded-head weight on channel `k`; ties go to the
/// lower class index.
pub fn dominant_class(folded: &FoldedHead, k: usize) -> usize {
    let w = &folded.weights;
    let mut best = 0;
    for c in 1..w.rows() {
        if w[(c, k)] > w[(best, k)] {
            best = c;
        }
    }
    best
}

pub fn build_bank(
    state: &DisentangleState,
    features: &FeatureMapSet,
    folded: &FoldedHead,
    m: usize,
    polarity: Polarity,
) -> Result<PrototypeBank> {
    if m < 1 {
        return Err(ApexError::Validation("bank size must be at least 1".into()));
    }
    let d = state.channels();
    if features.channels() != d || folded.channels() != d {
        return Err(ApexError::Shape(format!(
            "bank inputs disagree on channel count (state {d}, features {}, head {})",
            features.channels(),
            folded.channels()
        )));
    }
    let train = features.indices(Split::Train);
    if train.is_empty() {
        return Err(ApexError::Data("cannot build a bank from an empty train split".into()));
    }
    let tensors: Vec<Tensor3> = train.par_iter().map(|&i| features.maps[i].to_tensor()).collect();
    let local: Vec<usize> = (0..train.len()).collect();
    let activations = activations_under(&state.u, &tensors, &local)?;
    let m = m.min(train.len());

    let per_channel = (0..d)
        .into_par_iter()
        .map(|k| {
            rank_samples(features, &train, &activations, k, polarity == Polarity::Positive)
                .into_iter()
                .take(m)
                .map(|j| {
                    let zhat = apply_transform(&state.u, &tensors[j])?;
                    let proto = extract(&zhat, k, state.scheme());
                    Ok(PrototypeEntry {
                        sample_id: features.maps[train[j]].sample_id.clone(),
                        activation: activations[j][k],
                        coords: proto.coords,
                        purity: purity_of(&proto.vector, k).value,
                        prototype_vector: proto.vector,
                        dominant_class: dominant_class(folded, k),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(PrototypeBank {
        scheme: state.scheme(),
        polarity,
        m,
        per_channel,
    })
}

pub fn query_bank(bank: &PrototypeBank, channel: usize, top: usize) -> Result<&[PrototypeEntry]> {
    let list = bank.per_channel.get(channel).ok_or_else(|| {
        ApexError::Validation(format!(
            "channel {channel} out of range for a bank with {} channels",
            bank.per_channel.len()
        ))
    })?;
    Ok(&list[..top.min(list.len())])
}

#[derive(Serialize, Deserialize)]
struct EntryMeta {
    sample_id: String,
    activation: f64,
    coords: Coords,
    purity: f64,
    dominant_class: usize,
}

#[derive(Serialize, Deserialize)]
struct BankMeta {
    bank_version: u32,
    scheme: Scheme,
    polarity: Polarity,
    m: usize,
    entries: Vec<Vec<EntryMeta>>,
}

impl PrototypeBank {
    pub fn channels(&self) -> usize {
        self.per_channel.len()
    }

    /// Prototype vectors go in the payload as `[D, m, D]` f64; everything
    /// else rides in the metadata block.
    pub fn to_container(&self) -> Result<Container> {
        let d = self.channels();
        let rows = self.per_channel.first().map_or(0, |l| l.len());
        if self.per_channel.iter().any(|l| l.len() != rows) {
            return Err(ApexError::Shape("bank lists differ in length".into()));
        }
        let mut payload = Vec::with_capacity(d * rows * d);
        let mut entries = Vec::with_capacity(d);
        for list in &self.per_channel {
            let mut metas = Vec::with_capacity(list.len());
            for e in list {
                if e.prototype_vector.len() != d {
                    return Err(ApexError::Shape(format!("prototype for '{}' has wrong length", e.sample_id)));
                }
                payload.extend_from_slice(&e.prototype_vector);
                metas.push(EntryMeta {
                    sample_id: e.sample_id.clone(),
                    activation: e.activation,
                    coords: e.coords,
                    purity: e.purity,
                    dominant_class: e.dominant_class,
                });
            }
            entries.push(metas);
        }
        let meta = BankMeta {
            bank_version: BANK_VERSION,
            scheme: self.scheme,
            polarity: self.polarity,
            m: self.m,
            entries,
        };
        Container::new(Kind::Bank, vec![d as u64, rows as u64, d as u64], &meta, Payload::F64(payload))
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(Kind::Bank)?;
        let meta: BankMeta = c.meta()?;
        if meta.bank_version != BANK_VERSION {
            return Err(ApexError::Format(format!(
                "bank version {} is not supported (expected {BANK_VERSION})",
                meta.bank_version
            )));
        }
        let [d, rows, d2] = c.dims[..] else {
            return Err(ApexError::Format(format!("bank container has dims {:?}", c.dims)));
        };
        let (d, rows) = (d as usize, rows as usize);
        if d2 as usize != d || meta.entries.len() != d || meta.entries.iter().any(|l| l.len() != rows) {
            return Err(ApexError::Format("bank metadata does not match its payload".into()));
        }
        let values = c.payload.to_f64();
        let mut chunks = values.chunks_exact(d.max(1));
        let per_channel = meta
            .entries
            .into_iter()
            .map(|list| {
                list.into_iter()
                    .map(|e| PrototypeEntry {
                        sample_id: e.sample_id,
                        activation: e.activation,
                        coords: e.coords,
                        prototype_vector: chunks.next().map(<[f64]>::to_vec).unwrap_or_default(),
                        purity: e.purity,
                        dominant_class: e.dominant_class,
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            scheme: meta.scheme,
            polarity: meta.polarity,
            m: meta.m,
            per_channel,
        })
    }
}

pub fn persist_bank(bank: &PrototypeBank, path: impl AsRef<Path>) -> Result<()> {
    bank.to_container()?.write(path)
}

pub fn load_bank(path: impl AsRef<Path>) -> Result<PrototypeBank> {
    PrototypeBank::from_container(&Container::read(path)?)
}
