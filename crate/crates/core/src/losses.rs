//! Loss terms and their composition into the shape-related, shape-erased,
//! integrated and total training objectives.

use crate::array::Array;
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use serde::Serialize;

/// Default hinge margin for the batch-hard triplet loss.
pub const DEFAULT_TRIPLET_MARGIN: f64 = 0.3;

/// Mean softmax cross-entropy against integer class labels.
pub fn hard_ce(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let v = tape.value(logits);
    if v.rank() != 2 || v.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: format!("hard_ce with {} labels", labels.len()),
            left: v.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let (b, c) = (v.rows(), v.cols());
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: c,
        });
    }
    let ls = tape.log_softmax(logits)?;
    let mut mask = Array::zeros(vec![b, c]);
    for (i, &label) in labels.iter().enumerate() {
        mask.set2(i, label, -1.0 / b as f64);
    }
    let mask = tape.constant(mask)?;
    let picked = tape.mul(ls, mask)?;
    tape.sum(picked)
}

/// Mean cross-entropy between the softmax of `logits` and the softmax of
/// `target_logits`; the target distribution is gradient-stopped.
pub fn soft_ce(tape: &mut Tape, logits: NodeId, target_logits: NodeId) -> Result<NodeId> {
    let (vl, vt) = (tape.value(logits), tape.value(target_logits));
    if vl.shape() != vt.shape() || vl.rank() != 2 {
        return Err(Error::ShapeMismatch {
            context: "soft_ce".into(),
            left: vl.shape().to_vec(),
            right: vt.shape().to_vec(),
        });
    }
    let b = vl.rows();
    let frozen = tape.detach(target_logits)?;
    let t_log = tape.log_softmax(frozen)?;
    let t_prob = tape.exp(t_log)?;
    let ls = tape.log_softmax(logits)?;
    let prod = tape.mul(t_prob, ls)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / b as f64)
}

/// Batch-hard triplet loss: per anchor, hinge on the hardest positive and
/// hardest negative Euclidean distances within the batch. Anchors span all
/// batch samples of both modalities.
pub fn triplet_batch_hard(
    tape: &mut Tape,
    features: NodeId,
    labels: &[usize],
    margin: f64,
) -> Result<NodeId> {
    let v = tape.value(features);
    if v.rank() != 2 || v.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: format!("triplet_batch_hard with {} labels", labels.len()),
            left: v.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    let b = v.rows();
    let mut pos = vec![false; b * b];
    let mut neg = vec![false; b * b];
    for i in 0..b {
        let mut has_pos = false;
        let mut has_neg = false;
        for j in 0..b {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                pos[i * b + j] = true;
                has_pos = true;
            } else {
                neg[i * b + j] = true;
                has_neg = true;
            }
        }
        if !has_pos {
            return Err(Error::MissingTripletPair {
                anchor: i,
                label: labels[i],
                kind: "positive",
            });
        }
        if !has_neg {
            return Err(Error::MissingTripletPair {
                anchor: i,
                label: labels[i],
                kind: "negative",
            });
        }
    }
    let d = tape.pairwise_dist(features)?;
    let hardest_pos = tape.row_max_masked(d, &pos)?;
    let hardest_neg = tape.row_min_masked(d, &neg)?;
    let diff = tape.sub(hardest_pos, hardest_neg)?;
    let shifted = tape.add_scalar(diff, margin)?;
    let hinge = tape.relu(shifted)?;
    tape.mean(hinge)
}

/// Mean over the batch of `||z_sr - target||^2 / m`; the target is
/// gradient-stopped (it comes from the teacher).
pub fn srmse(tape: &mut Tape, z_sr: NodeId, target: NodeId) -> Result<NodeId> {
    let (va, vb) = (tape.value(z_sr), tape.value(target));
    if va.shape() != vb.shape() || va.rank() != 2 {
        return Err(Error::ShapeMismatch {
            context: "srmse".into(),
            left: va.shape().to_vec(),
            right: vb.shape().to_vec(),
        });
    }
    let (b, m) = (va.rows(), va.cols());
    let frozen = tape.detach(target)?;
    let diff = tape.sub(z_sr, frozen)?;
    let sq = tape.sq_norm(diff)?;
    tape.scale(sq, 1.0 / (b * m) as f64)
}

/// Named scalar loss components plus the composed totals and weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBundle {
    pub id: f64,
    pub triplet: f64,
    pub kl: f64,
    pub seid: f64,
    pub sekl: f64,
    pub srmse: f64,
    pub srkl: f64,
    pub sid: f64,
    pub ortho: f64,
    pub sr: f64,
    pub se: f64,
    pub int: f64,
    pub total: f64,
    pub alpha_sr: f64,
    pub alpha_se: f64,
}

/// The component nodes feeding [`compose`].
#[derive(Clone, Copy)]
pub struct LossTerms {
    pub id: NodeId,
    pub triplet: NodeId,
    pub kl: NodeId,
    pub seid: NodeId,
    pub sekl: NodeId,
    pub srmse: NodeId,
    pub srkl: NodeId,
    pub sid: NodeId,
    pub ortho: NodeId,
}

/// Composed objective: `total = int + alpha_sr * sr + alpha_se * se + ortho
/// + sid` with `sr = srmse + srkl`, `se = seid + sekl`,
/// `int = id + triplet + kl`.
pub struct Composed {
    pub sr: NodeId,
    pub se: NodeId,
    pub int: NodeId,
    pub total: NodeId,
    pub bundle: LossBundle,
}

pub fn compose(
    tape: &mut Tape,
    terms: &LossTerms,
    alpha_sr: f64,
    alpha_se: f64,
) -> Result<Composed> {
    if !(0.0..=1.0).contains(&alpha_sr)
        || !(0.0..=1.0).contains(&alpha_se)
        || (alpha_sr + alpha_se - 1.0).abs() > 1e-12
    {
        return Err(Error::Invalid(format!(
            "weights must lie in [0,1] and sum to 1, got ({alpha_sr}, {alpha_se})"
        )));
    }
    let named = [
        ("id", terms.id),
        ("triplet", terms.triplet),
        ("kl", terms.kl),
        ("seid", terms.seid),
        ("sekl", terms.sekl),
        ("srmse", terms.srmse),
        ("srkl", terms.srkl),
        ("sid", terms.sid),
        ("ortho", terms.ortho),
    ];
    for (name, node) in named {
        let v = tape.value(node);
        if !v.is_scalar() || !v.scalar_value().is_finite() {
            return Err(Error::NonFiniteComponent(name.into()));
        }
    }
    let sr = tape.add(terms.srmse, terms.srkl)?;
    let se = tape.add(terms.seid, terms.sekl)?;
    let it = tape.add(terms.id, terms.triplet)?;
    let int = tape.add(it, terms.kl)?;
    let sr_w = tape.scale(sr, alpha_sr)?;
    let se_w = tape.scale(se, alpha_se)?;
    let t1 = tape.add(int, sr_w)?;
    let t2 = tape.add(t1, se_w)?;
    let t3 = tape.add(t2, terms.ortho)?;
    let total = tape.add(t3, terms.sid)?;
    let bundle = LossBundle {
        id: tape.scalar(terms.id),
        triplet: tape.scalar(terms.triplet),
        kl: tape.scalar(terms.kl),
        seid: tape.scalar(terms.seid),
        sekl: tape.scalar(terms.sekl),
        srmse: tape.scalar(terms.srmse),
        srkl: tape.scalar(terms.srkl),
        sid: tape.scalar(terms.sid),
        ortho: tape.scalar(terms.ortho),
        sr: tape.scalar(sr),
        se: tape.scalar(se),
        int: tape.scalar(int),
        total: tape.scalar(total),
        alpha_sr,
        alpha_se,
    };
    Ok(Composed {
        sr,
        se,
        int,
        total,
        bundle,
    })
}
