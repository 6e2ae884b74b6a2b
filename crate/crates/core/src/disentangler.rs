//! Training of the channel transform `U = exp(A)` against the purity
//! objective, and the head fold `W U⁻¹` that keeps logits unchanged.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_model::{gap, logits, ClassifierHead, Container, FeatureMapSet, Kind, Payload, Split, Tensor3};
use crate::error::{shape_err, ApexError, Result};
use crate::linalg::{adam_step, mat_exp, mat_exp_vjp, mat_inverse_via_exp, AdamState, Matrix};
use crate::schemes::{purity_of, select, Coords, Scheme};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentangleConfig {
    pub scheme: Scheme,
    pub epochs: usize,
    pub recalc_interval: usize,
    pub proto_count_start: usize,
    pub proto_count_end: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for DisentangleConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Square,
            epochs: 20,
            recalc_interval: 2,
            proto_count_start: 100,
            proto_count_end: 5,
            batch_size: 512,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-5,
            seed: 0,
        }
    }
}

impl DisentangleConfig {
    pub fn with_scheme(scheme: Scheme) -> Self {
        Self {
            scheme,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ApexError::Validation(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.recalc_interval < 1 {
            return bad("recalc_interval must be at least 1");
        }
        if self.proto_count_end < 1 || self.proto_count_start < self.proto_count_end {
            return bad("need proto_count_start >= proto_count_end >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        Ok(())
    }

    /// Whether prototype sets are recomputed at the start of `epoch`.
    pub fn is_recalc_epoch(&self, epoch: usize) -> bool {
        epoch.is_multiple_of(self.recalc_interval)
    }
}

/// Number of prototypes per channel at `epoch`: linear from
/// `proto_count_start` at epoch 0 to `proto_count_end` at the last epoch,
/// rounded half up.
pub fn proto_count_at(epoch: usize, config: &DisentangleConfig) -> usize {
    if config.epochs <= 1 {
        return config.proto_count_start;
    }
    let epoch = epoch.min(config.epochs - 1);
    let start = config.proto_count_start as f64;
    let end = config.proto_count_end as f64;
    let x = start - epoch as f64 * (start - end) / (config.epochs - 1) as f64;
    (x + 0.5).floor() as usize
}

/// One member of a channel's prototype set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtoRef {
    pub sample_id: String,
    #[serde(skip)]
    pub index: usize,
    pub coords: Coords,
    pub activation: f64,
}

#[derive(Clone, Debug)]
pub struct DisentangleState {
    pub config: DisentangleConfig,
    pub a: Matrix,
    pub u: Matrix,
    pub u_inv: Matrix,
    pub adam: AdamState,
    pub epoch: usize,
    /// Indexed by channel.
    pub protosets: Vec<Vec<ProtoRef>>,
}

impl DisentangleState {
    /// Starts at `A = 0`, i.e. the untouched baseline model.
    pub fn new(config: DisentangleConfig, channels: usize) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(channels, channels, config.lr, config.beta1, config.beta2, config.weight_decay)?;
        Ok(Self {
            config,
            a: Matrix::zeros(channels, channels),
            u: Matrix::identity(channels),
            u_inv: Matrix::identity(channels),
            adam,
            epoch: 0,
            protosets: vec![Vec::new(); channels],
        })
    }

    pub fn channels(&self) -> usize {
        self.a.rows()
    }

    pub fn set_a(&mut self, a: Matrix) -> Result<()> {
        if a.rows() != self.channels() || !a.is_square() {
            return Err(shape_err!("A must be {0}x{0}", self.channels()));
        }
        self.u = mat_exp(&a)?;
        self.u_inv = mat_inverse_via_exp(&a)?;
        self.a = a;
        Ok(())
    }

    pub fn scheme(&self) -> Scheme {
        self.config.scheme
    }

    /// Frobenius residual of `U · U⁻¹ − I`.
    pub fn inverse_residual(&self) -> f64 {
        let n = self.channels();
        self.u
            .matmul(&self.u_inv)
            .and_then(|p| p.sub(&Matrix::identity(n)))
            .map(|r| r.frobenius_norm())
            .unwrap_or(f64::INFINITY)
    }

    pub fn transform(&self, z: &Tensor3) -> Result<Tensor3> {
        apply_transform(&self.u, z)
    }
}

/// `zhat[f, t, :] = U · z[f, t, :]` for every cell.
pub fn apply_transform(u: &Matrix, z: &Tensor3) -> Result<Tensor3> {
    let d = z.channels();
    if u.rows() != d || u.cols() != d {
        return Err(shape_err!(
            "transform is {}x{} but feature map has {d} channels",
            u.rows(),
            u.cols()
        ));
    }
    let mut out = Tensor3::zeros(z.freq(), z.time(), d);
    for f in 0..z.freq() {
        for t in 0..z.time() {
            let src = z.fiber(f, t);
            let dst = out.fiber_mut(f, t);
            for (r, o) in dst.iter_mut().enumerate() {
                *o = u.row(r).iter().zip(src).map(|(a, b)| a * b).sum();
            }
        }
    }
    Ok(out)
}

/// Head with `U⁻¹` folded into its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedHead(pub ClassifierHead);

impl std::ops::Deref for FoldedHead {
    type Target = ClassifierHead;

    fn deref(&self) -> &ClassifierHead {
        &self.0
    }
}

/// `W_cls · U⁻¹` with `U⁻¹ = exp(−A)`; the bias is unchanged.
pub fn fold_head(head: &ClassifierHead, state: &DisentangleState) -> Result<FoldedHead> {
    if head.channels() != state.channels() {
        return Err(shape_err!(
            "head expects {} channels, transform has {}",
            head.channels(),
            state.channels()
        ));
    }
    let weights = head.weights.matmul(&mat_inverse_via_exp(&state.a)?)?;
    Ok(FoldedHead(ClassifierHead::new(weights, head.bias.clone())?))
}

/// Converts every feature map to `f64` once.
pub fn tensors_of(features: &FeatureMapSet) -> Vec<Tensor3> {
    features.maps.par_iter().map(|m| m.to_tensor()).collect()
}

/// For each channel, the `m` training samples with the highest channel
/// activation under the current transform; ties go to the smaller sample id.
pub fn recalc_prototype_sets(
    state: &DisentangleState,
    features: &FeatureMapSet,
    tensors: &[Tensor3],
    m: usize,
) -> Result<Vec<Vec<ProtoRef>>> {
    let train = features.indices(Split::Train);
    if train.is_empty() {
        return Err(ApexError::Data("no training samples to select prototypes from".into()));
    }
    let m = if m > train.len() {
        log::warn!("requested {m} prototypes per channel but only {} training samples; clamping", train.len());
        train.len()
    } else {
        m.max(1)
    };
    let activations = activations_under(&state.u, tensors, &train)?;
    (0..state.channels())
        .into_par_iter()
        .map(|k| {
            rank_samples(features, &train, &activations, k, true)
                .into_iter()
                .take(m)
                .map(|j| {
                    let idx = train[j];
                    let zhat = apply_transform(&state.u, &tensors[idx])?;
                    Ok(ProtoRef {
                        sample_id: features.maps[idx].sample_id.clone(),
                        index: idx,
                        coords: select(&zhat, k, state.config.scheme).coords,
                        activation: activations[j][k],
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Channel activations of `U z` for each listed sample, using
/// `activ(U z, k) = Σ_j U[k, j] · Σ_{f,t} z[f, t, j]`.
pub(crate) fn activations_under(u: &Matrix, tensors: &[Tensor3], samples: &[usize]) -> Result<Vec<Vec<f64>>> {
    samples
        .par_iter()
        .map(|&i| {
            let z = &tensors[i];
            let cells = (z.freq() * z.time()) as f64;
            let sums: Vec<f64> = gap(z).iter().map(|v| v * cells).collect();
            u.matvec(&sums)
        })
        .collect()
}

/// Positions into `samples` ordered by activation in channel `k`
/// (descending or ascending); ties go to the smaller sample id.
pub(crate) fn rank_samples(
    features: &FeatureMapSet,
    samples: &[usize],
    activations: &[Vec<f64>],
    k: usize,
    descending: bool,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&x, &y| {
        let by_value = activations[x][k].total_cmp(&activations[y][k]);
        let by_value = if descending { by_value.reverse() } else { by_value };
        by_value.then_with(|| features.maps[samples[x]].sample_id.cmp(&features.maps[samples[y]].sample_id))
    });
    order
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub mean_purity: f64,
    pub grad_a: Matrix,
    pub degenerate: usize,
}

/// `1 − mean purity` over `(sample index, channel)` pairs, with the gradient
/// with respect to `A`. Coordinates are re-selected on a fresh forward pass
/// through the current `U` and then held fixed.
pub fn purity_loss(state: &DisentangleState, tensors: &[Tensor3], batch: &[(usize, usize)]) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(ApexError::Validation("purity loss over an empty batch".into()));
    }
    let d = state.channels();
    let scheme = state.config.scheme;
    // per pair: purity, dpurity/dp, q with p = U q
    let parts: Vec<(f64, bool, Vec<f64>, Vec<f64>)> = batch
        .par_iter()
        .map(|&(i, k)| {
            let z = &tensors[i];
            let zhat = apply_transform(&state.u, z)?;
            let sel = select(&zhat, k, scheme);
            let p = sel.vector(&zhat);
            let (score, dp) = crate::schemes::purity_grad_vector(&p, k);
            Ok((score.value, score.degenerate, dp, sel.vector(z)))
        })
        .collect::<Result<_>>()?;

    let scale = 1.0 / batch.len() as f64;
    let mut grad_u = Matrix::zeros(d, d);
    let mut purity_sum = 0.0;
    let mut degenerate = 0;
    for (purity, degen, dp, q) in &parts {
        purity_sum += purity;
        degenerate += *degen as usize;
        let g = grad_u.as_mut_slice();
        for (r, &dpr) in dp.iter().enumerate() {
            if dpr == 0.0 {
                continue;
            }
            let row = &mut g[r * d..(r + 1) * d];
            for (gv, qv) in row.iter_mut().zip(q) {
                // loss = 1 − mean purity
                *gv -= scale * dpr * qv;
            }
        }
    }
    if degenerate > 0 {
        log::debug!("{degenerate} degenerate prototypes in batch");
    }
    let mean_purity = purity_sum * scale;
    Ok(LossOutput {
        loss: 1.0 - mean_purity,
        mean_purity,
        grad_a: mat_exp_vjp(&state.a, &grad_u)?,
        degenerate,
    })
}

/// Mean purity of the current prototype sets, evaluated fresh under `U`.
pub fn mean_protoset_purity(state: &DisentangleState, tensors: &[Tensor3]) -> Result<f64> {
    let pairs = protoset_pairs(&state.protosets);
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let scheme = state.config.scheme;
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, k)| {
            let zhat = apply_transform(&state.u, &tensors[i])?;
            Ok(purity_of(&select(&zhat, k, scheme).vector(&zhat), k).value)
        })
        .collect::<Result<_>>()?;
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

fn protoset_pairs(sets: &[Vec<ProtoRef>]) -> Vec<(usize, usize)> {
    sets.iter()
        .enumerate()
        .flat_map(|(k, set)| set.iter().map(move |p| (p.index, k)))
        .collect()
}

/// Agreement between the original pipeline and the folded pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    /// Max over samples and classes of `|l_new − l_old| / max(|l_old|, 1e-8)`.
    pub max_rel_deviation: f64,
    pub argmax_agreement: f64,
    pub samples: usize,
}

pub fn relative_deviation(new: f64, old: f64) -> f64 {
    (new - old).abs() / old.abs().max(1e-8)
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

/// Runs both pipelines on every sample: `W · GAP(Z) + b` against
/// `(W U⁻¹) · GAP(U Z) + b`.
pub fn invariance_report(
    head: &ClassifierHead,
    folded: &FoldedHead,
    u: &Matrix,
    tensors: &[Tensor3],
) -> Result<InvarianceReport> {
    let per_sample: Vec<(f64, bool)> = tensors
        .par_iter()
        .map(|z| {
            let old = logits(head, &gap(z))?;
            let new = logits(folded, &gap(&apply_transform(u, z)?))?;
            let dev = old
                .iter()
                .zip(&new)
                .map(|(&o, &n)| relative_deviation(n, o))
                .fold(0.0, f64::max);
            Ok((dev, argmax(&old) == argmax(&new)))
        })
        .collect::<Result<_>>()?;
    let n = per_sample.len();
    Ok(InvarianceReport {
        max_rel_deviation: per_sample.iter().map(|p| p.0).fold(0.0, f64::max),
        argmax_agreement: if n == 0 {
            1.0
        } else {
            per_sample.iter().filter(|p| p.1).count() as f64 / n as f64
        },
        samples: n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub proto_count: usize,
    pub recalculated: bool,
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_purity: f64,
    pub invariance_residual: f64,
    pub argmax_agreement: f64,
}

impl EpochLog {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} proto_count={} recalc={} steps={} loss={:.6} mean_purity={:.6} invariance_residual={:.3e} argmax_agreement={:.4}",
            self.epoch,
            self.proto_count,
            self.recalculated,
            self.steps,
            self.mean_loss,
            self.mean_purity,
            self.invariance_residual,
            self.argmax_agreement
        )
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub state: DisentangleState,
    pub folded: FoldedHead,
    pub log: Vec<EpochLog>,
    /// Mean purity of the `proto_count_end` sets selected under `U = I`.
    pub initial_mean_purity: f64,
    /// Mean purity of the final `proto_count_end` sets under the learned `U`.
    pub final_mean_purity: f64,
}

/// Full optimization schedule: prototype sets are recomputed every
/// `recalc_interval` epochs with [`proto_count_at`] members, and every
/// epoch makes one shuffled minibatch pass over all `(sample, channel)`
/// pairs. A final recalculation with `proto_count_end` members closes the run.
pub fn fit(config: &DisentangleConfig, features: &FeatureMapSet, head: &ClassifierHead) -> Result<FitOutcome> {
    fit_with_observer(config, features, head, |_, _| {})
}

pub fn fit_with_observer(
    config: &DisentangleConfig,
    features: &FeatureMapSet,
    head: &ClassifierHead,
    mut observer: impl FnMut(&EpochLog, &DisentangleState),
) -> Result<FitOutcome> {
    config.validate()?;
    if features.is_empty() {
        return Err(ApexError::Data("empty feature set".into()));
    }
    let d = features.channels();
    if head.channels() != d {
        return Err(shape_err!("head expects {} channels, features have {d}", head.channels()));
    }
    let tensors = tensors_of(features);
    let mut state = DisentangleState::new(config.clone(), d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let baseline = DisentangleState {
        protosets: recalc_prototype_sets(&state, features, &tensors, config.proto_count_end)?,
        ..state.clone()
    };
    let initial_mean_purity = mean_protoset_purity(&baseline, &tensors)?;

    let mut log = Vec::with_capacity(config.epochs);
    let mut proto_count = proto_count_at(0, config);
    for epoch in 0..config.epochs {
        state.epoch = epoch;
        let recalculated = config.is_recalc_epoch(epoch);
        if recalculated {
            proto_count = proto_count_at(epoch, config);
            state.protosets = recalc_prototype_sets(&state, features, &tensors, proto_count)?;
        }
        let mut pairs = protoset_pairs(&state.protosets);
        pairs.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut steps = 0;
        for batch in pairs.chunks(config.batch_size) {
            let out = purity_loss(&state, &tensors, batch)?;
            if !out.loss.is_finite() || !out.grad_a.is_finite() {
                return Err(ApexError::Numeric(format!(
                    "non-finite purity loss at epoch {epoch}, step {steps} (loss={})",
                    out.loss
                )));
            }
            let a = adam_step(&state.a, &out.grad_a, &mut state.adam)?;
            state.set_a(a)?;
            loss_sum += out.loss;
            steps += 1;
        }

        let folded = fold_head(head, &state)?;
        let inv = invariance_report(head, &folded, &state.u, &tensors)?;
        let entry = EpochLog {
            epoch,
            proto_count,
            recalculated,
            steps,
            mean_loss: if steps > 0 { loss_sum / steps as f64 } else { 0.0 },
            mean_purity: mean_protoset_purity(&state, &tensors)?,
            invariance_residual: inv.max_rel_deviation,
            argmax_agreement: inv.argmax_agreement,
        };
        log::info!("{}", entry.to_line());
        observer(&entry, &state);
        log.push(entry);
    }

    state.epoch = config.epochs;
    state.protosets = recalc_prototype_sets(&state, features, &tensors, config.proto_count_end)?;
    let final_mean_purity = mean_protoset_purity(&state, &tensors)?;
    let folded = fold_head(head, &state)?;
    Ok(FitOutcome {
        state,
        folded,
        log,
        initial_mean_purity,
        final_mean_purity,
    })
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    config: DisentangleConfig,
    epoch: usize,
    protosets: Vec<Vec<ProtoRef>>,
}

impl DisentangleState {
    /// Serializes `A` (as f64), the config, and the prototype sets.
    pub fn to_container(&self) -> Result<Container> {
        let d = self.channels() as u64;
        Container::new(
            Kind::State,
            vec![d, d],
            &StateMeta {
                config: self.config.clone(),
                epoch: self.epoch,
                protosets: self.protosets.clone(),
            },
            Payload::F64(self.a.as_slice().to_vec()),
        )
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(Kind::State)?;
        if c.dims.len() != 2 || c.dims[0] != c.dims[1] {
            return Err(ApexError::Format(format!("state container has dims {:?}", c.dims)));
        }
        let meta: StateMeta = c.meta()?;
        let d = c.dims[0] as usize;
        let mut state = DisentangleState::new(meta.config, d)?;
        state.set_a(Matrix::from_vec(d, d, c.payload.to_f64())?)?;
        state.epoch = meta.epoch;
        if meta.protosets.len() != d {
            return Err(ApexError::Format("state prototype sets do not cover every channel".into()));
        }
        state.protosets = meta.protosets;
        Ok(state)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    /// Restores `ProtoRef::index` after loading, using sample ids.
    pub fn resolve_indices(&mut self, features: &FeatureMapSet) -> Result<()> {
        let lookup: std::collections::HashMap<&str, usize> = features
            .maps
            .iter()
            .enumerate()
            .map(|(i, m)| (m.sample_id.as_str(), i))
            .collect();
        for set in &mut self.protosets {
            for p in set.iter_mut() {
                p.index = *lookup.get(p.sample_id.as_str()).ok_or_else(|| {
                    ApexError::Validation(format!("prototype sample '{}' not in feature set", p.sample_id))
                })?;
            }
        }
        Ok(())
    }
}
