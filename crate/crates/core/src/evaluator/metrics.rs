//! Detection and classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{ApexError, Result};

fn counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(ApexError::Validation(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(ApexError::Data("scores must be finite".into()));
    }
    Ok(())
}

/// Equal error rate, accepting when `score ≥ θ`. Thresholds are swept over
/// the distinct scores (plus one above the maximum); the crossing of FAR and
/// FRR is interpolated linearly between neighbouring thresholds.
pub fn eer(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, neg) = counts(labels);
    if pos == 0 || neg == 0 {
        return Err(ApexError::Validation("EER needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // θ at the smallest score: everything accepted
    let (mut fa, mut fr) = (neg, 0usize);
    let rates = |fa: usize, fr: usize| (fa as f64 / neg as f64, fr as f64 / pos as f64);
    let mut prev = rates(fa, fr);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                fr += 1;
            } else {
                fa -= 1;
            }
            i += 1;
        }
        let cur = rates(fa, fr);
        let (d0, d1) = (prev.0 - prev.1, cur.0 - cur.1);
        if d0 == 0.0 {
            return Ok(prev.0);
        }
        if d1 <= 0.0 {
            let t = d0 / (d0 - d1);
            return Ok(prev.0 + t * (cur.0 - prev.0));
        }
        prev = cur;
    }
    unreachable!("FAR - FRR ends at -1")
}

/// Mann-Whitney estimate of `P(score_pos > score_neg)`, ties counting half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, neg) = counts(labels);
    if pos == 0 || neg == 0 {
        return Err(ApexError::Validation("AUROC needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks, 1-based
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * order[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision with tied scores treated as one threshold. `None` when
/// there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    check_lengths(scores, labels)?;
    let (pos, _) = counts(labels);
    if pos == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let before = tp;
        while i < order.len() && scores[order[i]] == s {
            tp += labels[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        ap += (tp - before) as f64 / pos as f64 * (tp as f64 / seen as f64);
    }
    Ok(Some(ap))
}

/// Per-class one-vs-rest label columns from label sets.
pub fn label_columns(labels: &[Vec<usize>], num_classes: usize) -> Vec<Vec<bool>> {
    (0..num_classes)
        .map(|c| labels.iter().map(|l| l.contains(&c)).collect())
        .collect()
}

fn score_column(scores: &[Vec<f64>], c: usize) -> Vec<f64> {
    scores.iter().map(|s| s[c]).collect()
}

fn check_matrix(scores: &[Vec<f64>], labels: &[Vec<usize>]) -> Result<usize> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(ApexError::Validation("need one label set per non-empty score row".into()));
    }
    let n = scores[0].len();
    if n == 0 || scores.iter().any(|s| s.len() != n) {
        return Err(ApexError::Validation("score rows differ in length".into()));
    }
    if labels.iter().flatten().any(|&l| l >= n) {
        return Err(ApexError::Validation(format!("label out of range for {n} classes")));
    }
    Ok(n)
}

/// Class-mean average precision over classes with at least one positive.
pub fn cmap(scores: &[Vec<f64>], labels: &[Vec<usize>]) -> Result<f64> {
    let n = check_matrix(scores, labels)?;
    let cols = label_columns(labels, n);
    let mut aps = Vec::new();
    let mut skipped = Vec::new();
    for (c, col) in cols.iter().enumerate() {
        match average_precision(&score_column(scores, c), col)? {
            Some(ap) => aps.push(ap),
            None => skipped.push(c),
        }
    }
    if !skipped.is_empty() {
        log::warn!("cmAP excludes classes without positives: {skipped:?}");
    }
    if aps.is_empty() {
        return Err(ApexError::Validation("no class has a positive sample".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Index of the largest value, first on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose top-1 class is in their label set.
pub fn t1_acc(logits: &[Vec<f64>], labels: &[Vec<usize>]) -> Result<f64> {
    check_matrix(logits, labels)?;
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(l, y)| y.contains(&argmax(l)))
        .count();
    Ok(hits as f64 / logits.len() as f64)
}

/// Per-class EER and AUROC over classes that have both positives and
/// negatives.
fn per_class(scores: &[Vec<f64>], labels: &[Vec<usize>], f: fn(&[f64], &[bool]) -> Result<f64>) -> Result<Vec<f64>> {
    let n = check_matrix(scores, labels)?;
    let mut out = Vec::new();
    for (c, col) in label_columns(labels, n).iter().enumerate() {
        let (p, q) = counts(col);
        if p > 0 && q > 0 {
            out.push(f(&score_column(scores, c), col)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    NoMask,
    RandomMask,
    ApexMask,
}

impl Condition {
    pub fn as_str(self) -> &'static str {
        match self {
            Condition::NoMask => "no_mask",
            Condition::RandomMask => "random_mask",
            Condition::ApexMask => "apex_mask",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub condition: Condition,
    pub scheme: Option<crate::schemes::Scheme>,
    pub seeds: Vec<u64>,
    /// One-vs-rest EER per class that has both label values.
    pub eer: Vec<f64>,
    pub aeer: f64,
    pub cmap: f64,
    pub auroc: f64,
    pub t1_acc: f64,
}

impl MetricReport {
    pub fn from_logits(logits: &[Vec<f64>], labels: &[Vec<usize>], condition: Condition) -> Result<Self> {
        let eers = per_class(logits, labels, eer)?;
        let aucs = per_class(logits, labels, auroc)?;
        let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        Ok(Self {
            condition,
            scheme: None,
            seeds: Vec::new(),
            aeer: mean(&eers),
            eer: eers,
            cmap: cmap(logits, labels)?,
            auroc: mean(&aucs),
            t1_acc: t1_acc(logits, labels)?,
        })
    }
}
