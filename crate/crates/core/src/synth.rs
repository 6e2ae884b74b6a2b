//! A synthetic benchmark with known answers: localized concepts are planted
//! in spectrograms, a known linear "backbone" mixes the per-concept maps
//! with an invertible matrix, and a known head reads the classes out.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{
    gap, logits, write_manifest, write_tensor_file, ClassifierHead, FeatureMap, FeatureMapSet, Manifest, SampleRecord,
    SpectrogramImage, Split, TaskKind, Tensor3, TensorFile,
};
use crate::error::{ApexError, Result};
use crate::evaluator::SpectrogramModel;
use crate::linalg::{mat_exp, mat_inverse_via_exp, Matrix};
use crate::schemes::Scheme;

pub const BACKGROUND: f64 = 0.1;
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const HEAD_FILE: &str = "head.apx";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub channels: usize,
    pub freq: usize,
    pub time: usize,
    pub input_freq: usize,
    pub input_time: usize,
    /// Concepts per kind, in the order Square, Time, Frequency,
    /// TimeFrequency. Concept `j` lives in channel `j`.
    pub concepts_per_kind: usize,
    pub num_classes: usize,
    pub num_samples: usize,
    pub max_concepts_per_sample: usize,
    pub amplitude: (f64, f64),
    pub noise_sigma: f64,
    /// Spectral norm of `R` in `mixing = exp(R)`; 0 gives the identity.
    pub mixing_norm: f64,
    /// Scale each concept's per-cell level by `(F + T − 1) / cells` so every
    /// kind carries the same total activation (point events are loud, bands
    /// are quiet).
    pub equal_energy: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            freq: 8,
            time: 8,
            input_freq: 32,
            input_time: 32,
            concepts_per_kind: 4,
            num_classes: 8,
            num_samples: 500,
            max_concepts_per_sample: 2,
            amplitude: (1.0, 2.0),
            noise_sigma: 0.05,
            mixing_norm: 2.3,
            equal_energy: true,
            seed: 0,
        }
    }
}

pub const MAX_CONDITION: f64 = 100.0;

impl SynthConfig {
    pub fn num_concepts(&self) -> usize {
        4 * self.concepts_per_kind
    }

    pub fn concept_kind(&self, j: usize) -> Scheme {
        Scheme::ALL[j / self.concepts_per_kind]
    }

    /// Classes own consecutive runs of concepts; with the defaults each
    /// class owns two concepts of one kind.
    pub fn class_of_concept(&self, j: usize) -> usize {
        j * self.num_classes / self.num_concepts()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ApexError::Validation(m));
        if self.channels == 0 || self.freq == 0 || self.time == 0 {
            return bad("channels, freq and time must be positive".into());
        }
        if self.freq > self.input_freq || self.time > self.input_time {
            return bad(format!(
                "latent grid {}x{} larger than input {}x{}",
                self.freq, self.time, self.input_freq, self.input_time
            ));
        }
        if self.concepts_per_kind == 0 || self.num_concepts() > self.channels {
            return bad(format!(
                "{} concepts need 1..={} per kind",
                self.num_concepts(),
                self.channels / 4
            ));
        }
        if self.num_classes == 0 || self.num_classes > self.num_concepts() {
            return bad(format!("num_classes must be in 1..={}", self.num_concepts()));
        }
        if self.max_concepts_per_sample == 0 || self.max_concepts_per_sample > self.num_concepts() {
            return bad("max_concepts_per_sample out of range".into());
        }
        let (lo, hi) = self.amplitude;
        if !(lo > 0.0 && hi >= lo) {
            return bad("amplitude range must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.mixing_norm >= 0.0) {
            return bad("noise_sigma and mixing_norm must be non-negative".into());
        }
        if self.num_samples == 0 {
            return bad("num_samples must be positive".into());
        }
        Ok(())
    }
}

/// Largest singular value by power iteration on `MᵀM`.
pub fn spectral_norm(m: &Matrix) -> f64 {
    let n = m.cols();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mtm = m.transpose().matmul(m).expect("square");
    let mut lambda = 0.0;
    for _ in 0..500 {
        let w = mtm.matvec(&v).expect("shape");
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = w.iter().map(|x| x / norm).collect();
        if (norm - lambda).abs() <= 1e-14 * norm {
            lambda = norm;
            break;
        }
        lambda = norm;
    }
    lambda.sqrt()
}

/// `‖M‖₂ · ‖M⁻¹‖₂`.
pub fn condition_number(m: &Matrix, m_inv: &Matrix) -> f64 {
    spectral_norm(m) * spectral_norm(m_inv)
}

/// `R` with Gaussian entries rescaled to spectral norm `norm`.
pub fn random_generator(d: usize, norm: f64, rng: &mut impl Rng) -> Matrix {
    if norm == 0.0 {
        return Matrix::zeros(d, d);
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let r = Matrix::from_fn(d, d, |_, _| normal.sample(rng));
    let s = spectral_norm(&r);
    r.scaled(norm / s)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedConcept {
    pub concept: usize,
    pub kind: Scheme,
    /// Latent row (Square, Frequency, TimeFrequency).
    pub f: Option<usize>,
    /// Latent column (Square, Time, TimeFrequency).
    pub t: Option<usize>,
    pub amplitude: f64,
}

impl PlantedConcept {
    pub fn covers(&self, f: usize, t: usize) -> bool {
        match self.kind {
            Scheme::Square => self.f == Some(f) && self.t == Some(t),
            Scheme::Time => self.t == Some(t),
            Scheme::Frequency => self.f == Some(f),
            Scheme::TimeFrequency => self.f == Some(f) || self.t == Some(t),
        }
    }

    pub fn cell_count(&self, freq: usize, time: usize) -> usize {
        match self.kind {
            Scheme::Square => 1,
            Scheme::Time => freq,
            Scheme::Frequency => time,
            Scheme::TimeFrequency => freq + time - 1,
        }
    }

    /// Value the concept adds to each covered cell.
    pub fn level(&self, cfg: &SynthConfig) -> f64 {
        if cfg.equal_energy {
            self.amplitude * (cfg.freq + cfg.time - 1) as f64 / self.cell_count(cfg.freq, cfg.time) as f64
        } else {
            self.amplitude
        }
    }

    /// The planted location as an input-space region.
    pub fn region(&self, cfg: &SynthConfig) -> crate::explainer::Region {
        let map = |i: usize, n: usize, n_in: usize| crate::explainer::latent_to_input(i, n, n_in);
        crate::explainer::Region {
            kind: self.kind,
            f_range: self.f.map(|f| map(f, cfg.freq, cfg.input_freq)),
            t_range: self.t.map(|t| map(t, cfg.time, cfg.input_time)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleTruth {
    pub sample_id: String,
    pub labels: Vec<usize>,
    pub concepts: Vec<PlantedConcept>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub mixing: Matrix,
    pub mixing_inverse: Matrix,
    pub condition_number: f64,
    /// Concept indices owned by each class.
    pub class_concepts: Vec<Vec<usize>>,
    pub samples: Vec<SampleTruth>,
}

impl GroundTruth {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| ApexError::Format(format!("ground truth: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| ApexError::Format(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }
}

pub struct SynthDataset {
    pub truth: GroundTruth,
    pub features: FeatureMapSet,
    pub spectrograms: Vec<SpectrogramImage>,
    pub head: ClassifierHead,
    pub manifest: Manifest,
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const NOISE_STREAM: u64 = 1 << 32;

pub fn sample_id(i: usize) -> String {
    format!("syn{i:05}")
}

/// Draws the concepts of one sample. Concepts of one sample never share a
/// latent row or column (a band may still cross another band), so no
/// concept sits inside another's footprint.
fn plant(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<PlantedConcept> {
    let count = rng.random_range(1..=cfg.max_concepts_per_sample);
    let mut chosen = rand::seq::index::sample(rng, cfg.num_concepts(), count).into_vec();
    chosen.sort_unstable();
    let mut planted: Vec<PlantedConcept> = Vec::with_capacity(count);
    for j in chosen {
        let kind = cfg.concept_kind(j);
        let amplitude = rng.random_range(cfg.amplitude.0..=cfg.amplitude.1);
        let mut attempt = 0;
        let p = loop {
            let f = rng.random_range(0..cfg.freq);
            let t = rng.random_range(0..cfg.time);
            let (f, t) = match kind {
                Scheme::Square | Scheme::TimeFrequency => (Some(f), Some(t)),
                Scheme::Time => (None, Some(t)),
                Scheme::Frequency => (Some(f), None),
            };
            let p = PlantedConcept {
                concept: j,
                kind,
                f,
                t,
                amplitude,
            };
            let clash = planted
                .iter()
                .any(|q| (p.f.is_some() && p.f == q.f) || (p.t.is_some() && p.t == q.t));
            attempt += 1;
            // tiny grids may not admit disjoint placements
            if !clash || attempt > 64 {
                break p;
            }
        };
        planted.push(p);
    }
    planted
}

/// Noise-free, unmixed concept map: channel `j` carries concept `j`.
pub fn pure_concept_map(cfg: &SynthConfig, concepts: &[PlantedConcept]) -> Tensor3 {
    let mut c = Tensor3::zeros(cfg.freq, cfg.time, cfg.channels);
    for p in concepts {
        for f in 0..cfg.freq {
            for t in 0..cfg.time {
                if p.covers(f, t) {
                    c.set(f, t, p.concept, c.get(f, t, p.concept) + p.level(cfg));
                }
            }
        }
    }
    c
}

fn clean_spectrogram(cfg: &SynthConfig, concepts: &[PlantedConcept]) -> Vec<f64> {
    let mut x = vec![BACKGROUND; cfg.input_freq * cfg.input_time];
    for fi in 0..cfg.input_freq {
        let f = fi * cfg.freq / cfg.input_freq;
        for ti in 0..cfg.input_time {
            let t = ti * cfg.time / cfg.input_time;
            for p in concepts {
                if p.covers(f, t) {
                    x[fi * cfg.input_time + ti] += p.level(cfg);
                }
            }
        }
    }
    x
}

/// The known backbone: each concept's evidence in a latent cell is its
/// amplitude scaled by how much of the cell's input block survived (the
/// ratio of the observed to the clean spectrogram), then mixed and noised.
#[derive(Clone, Debug)]
pub struct SynthBackbone {
    pub truth: GroundTruth,
    pub head: ClassifierHead,
}

impl SynthBackbone {
    pub fn new(truth: GroundTruth, head: ClassifierHead) -> Self {
        Self { truth, head }
    }

    fn noise(&self, index: usize) -> Vec<f64> {
        let cfg = &self.truth.config;
        let n = cfg.freq * cfg.time * cfg.channels;
        if cfg.noise_sigma == 0.0 {
            return vec![0.0; n];
        }
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
        let mut rng = sample_rng(cfg.seed, NOISE_STREAM + index as u64);
        (0..n).map(|_| normal.sample(&mut rng)).collect()
    }

    pub fn features(&self, index: usize, spectrogram: &SpectrogramImage) -> Result<Tensor3> {
        let cfg = &self.truth.config;
        let truth = self
            .truth
            .samples
            .get(index)
            .ok_or_else(|| ApexError::Validation(format!("no ground truth for sample {index}")))?;
        if spectrogram.freq_bins != cfg.input_freq || spectrogram.time_frames != cfg.input_time {
            return Err(ApexError::Shape("spectrogram geometry differs from the benchmark".into()));
        }
        let clean = clean_spectrogram(cfg, &truth.concepts);
        let mut c = Tensor3::zeros(cfg.freq, cfg.time, cfg.channels);
        for f in 0..cfg.freq {
            let (f0, f1) = crate::explainer::latent_to_input(f, cfg.freq, cfg.input_freq);
            for t in 0..cfg.time {
                let (t0, t1) = crate::explainer::latent_to_input(t, cfg.time, cfg.input_time);
                let mut kept = 0.0;
                for fi in f0..f1 {
                    for ti in t0..t1 {
                        let i = fi * cfg.input_time + ti;
                        kept += spectrogram.values[i] as f64 / clean[i];
                    }
                }
                kept /= ((f1 - f0) * (t1 - t0)) as f64;
                for p in &truth.concepts {
                    if p.covers(f, t) {
                        c.set(f, t, p.concept, c.get(f, t, p.concept) + p.level(cfg) * kept);
                    }
                }
            }
        }
        let m = &self.truth.mixing;
        let mut z = Tensor3::from_vec(cfg.freq, cfg.time, cfg.channels, self.noise(index))?;
        for f in 0..cfg.freq {
            for t in 0..cfg.time {
                let mixed = m.matvec(c.fiber(f, t))?;
                for (o, v) in z.fiber_mut(f, t).iter_mut().zip(mixed) {
                    *o += v;
                }
            }
        }
        Ok(z)
    }
}

impl SpectrogramModel for SynthBackbone {
    fn logits(&self, index: usize, spectrogram: &SpectrogramImage) -> Result<Vec<f64>> {
        logits(&self.head, &gap(&self.features(index, spectrogram)?))
    }
}

/// Builds the whole benchmark in memory; deterministic in `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let d = cfg.channels;
    let mut rng = sample_rng(cfg.seed, 0);
    let r = random_generator(d, cfg.mixing_norm, &mut rng);
    let mixing = mat_exp(&r)?;
    let mixing_inverse = mat_inverse_via_exp(&r)?;
    let cond = condition_number(&mixing, &mixing_inverse);
    if cond > MAX_CONDITION {
        return Err(ApexError::Validation(format!(
            "mixing condition number {cond:.1} exceeds {MAX_CONDITION}"
        )));
    }

    let class_concepts: Vec<Vec<usize>> = (0..cfg.num_classes)
        .map(|c| (0..cfg.num_concepts()).filter(|&j| cfg.class_of_concept(j) == c).collect())
        .collect();

    // pure head: each present concept adds its amplitude to its class logit
    let mut w_pure = Matrix::zeros(cfg.num_classes, d);
    for j in 0..cfg.num_concepts() {
        let probe = PlantedConcept {
            concept: j,
            kind: cfg.concept_kind(j),
            f: Some(0),
            t: Some(0),
            amplitude: 1.0,
        };
        let footprint = probe.level(cfg) * probe.cell_count(cfg.freq, cfg.time) as f64;
        w_pure[(cfg.class_of_concept(j), j)] = (cfg.freq * cfg.time) as f64 / footprint;
    }
    let w_cls = w_pure.matmul(&mixing_inverse)?;
    let w_cls = Matrix::from_fn(cfg.num_classes, d, |r, c| w_cls[(r, c)] as f32 as f64);
    let head = ClassifierHead::new(w_cls, vec![-0.5; cfg.num_classes])?;

    let samples: Vec<SampleTruth> = (0..cfg.num_samples)
        .map(|i| {
            let mut rng = sample_rng(cfg.seed, 1 + i as u64);
            let concepts = plant(cfg, &mut rng);
            let mut labels: Vec<usize> = concepts.iter().map(|p| cfg.class_of_concept(p.concept)).collect();
            labels.dedup();
            SampleTruth {
                sample_id: sample_id(i),
                labels,
                concepts,
            }
        })
        .collect();

    let truth = GroundTruth {
        config: cfg.clone(),
        mixing,
        mixing_inverse,
        condition_number: cond,
        class_concepts,
        samples,
    };
    let backbone = SynthBackbone::new(truth, head);

    let spectrograms: Vec<SpectrogramImage> = backbone
        .truth
        .samples
        .iter()
        .map(|s| {
            let x = clean_spectrogram(cfg, &s.concepts);
            SpectrogramImage::new(
                s.sample_id.clone(),
                cfg.input_freq,
                cfg.input_time,
                x.into_iter().map(|v| v as f32).collect(),
            )
        })
        .collect::<Result<_>>()?;

    let maps: Vec<FeatureMap> = (0..cfg.num_samples)
        .into_par_iter()
        .map(|i| {
            let z = backbone.features(i, &spectrograms[i])?;
            FeatureMap::new(
                sample_id(i),
                (cfg.freq, cfg.time, d),
                (cfg.input_freq, cfg.input_time),
                z.as_slice().iter().map(|&v| v as f32).collect(),
            )
        })
        .collect::<Result<_>>()?;

    let splits: Vec<Split> = (0..cfg.num_samples)
        .map(|i| if i % 5 == 4 { Split::Test } else { Split::Train })
        .collect();
    let labels: Vec<Vec<usize>> = backbone.truth.samples.iter().map(|s| s.labels.clone()).collect();
    let manifest = Manifest {
        class_names: (0..cfg.num_classes).map(|c| format!("class{c}")).collect(),
        task_kind: TaskKind::MultiLabel,
        annotations: [("source".to_string(), "synthetic".to_string())].into_iter().collect(),
        samples: (0..cfg.num_samples)
            .map(|i| SampleRecord {
                sample_id: sample_id(i),
                path: format!("features/{}.apx", sample_id(i)),
                labels: labels[i].clone(),
                split: splits[i],
                spectrogram: Some(format!("spectrograms/{}.apx", sample_id(i))),
            })
            .collect(),
    };
    let features = FeatureMapSet::new(maps, labels, splits)?;
    let SynthBackbone { truth, head } = backbone;
    Ok(SynthDataset {
        truth,
        features,
        spectrograms,
        head,
        manifest,
    })
}

impl SynthDataset {
    pub fn backbone(&self) -> SynthBackbone {
        SynthBackbone::new(self.truth.clone(), self.head.clone())
    }

    /// Writes manifest, containers and ground truth under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("features"))?;
        fs::create_dir_all(dir.join("spectrograms"))?;
        for (rec, (fm, spec)) in self
            .manifest
            .samples
            .iter()
            .zip(self.features.maps.iter().zip(&self.spectrograms))
        {
            write_tensor_file(&TensorFile::FeatureMap(fm.clone()), dir.join(&rec.path))?;
            if let Some(p) = &rec.spectrogram {
                write_tensor_file(&TensorFile::Spectrogram(spec.clone()), dir.join(p))?;
            }
        }
        write_tensor_file(&TensorFile::Head(self.head.clone()), dir.join(HEAD_FILE))?;
        self.truth.save(dir.join(GROUND_TRUTH_FILE))?;
        let manifest = dir.join(MANIFEST_FILE);
        write_manifest(&self.manifest, &manifest)?;
        Ok(manifest)
    }
}

/// `M = U · mixing`; mean over rows of `max |M[r, ·]| / ‖M[r, ·]‖₂`.
/// 1 means perfect unmixing up to permutation and sign.
pub fn recovery_score(learned_u: &Matrix, mixing: &Matrix) -> Result<f64> {
    let m = learned_u.matmul(mixing)?;
    let mut total = 0.0;
    for r in 0..m.rows() {
        let row = m.row(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            total += row.iter().fold(0.0f64, |a, v| a.max(v.abs())) / norm;
        }
    }
    Ok(total / m.rows() as f64)
}

/// For each learned channel, the concept it most resembles: argmax over
/// concepts of `|(U · mixing)[k, j]|`.
pub fn channel_assignment(learned_u: &Matrix, mixing: &Matrix) -> Result<Vec<usize>> {
    let m = learned_u.matmul(mixing)?;
    Ok((0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if v.abs() > row[best].abs() {
                    best = j;
                }
            }
            best
        })
        .collect())
}
