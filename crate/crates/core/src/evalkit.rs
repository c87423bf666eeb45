//! Cross-modal retrieval evaluation (CMC / mAP) and linear-probe
//! diagnostics for shape erasure.

use crate::array::{euclidean, Array};
use crate::error::{Error, Result};
use crate::parallel;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const PROBE_RIDGE_LAMBDA: f64 = 1e-3;

/// Rank-k accuracies (nondecreasing in k) and mean average precision.
#[derive(Clone, Debug, Serialize)]
pub struct RetrievalResult {
    pub cmc: Vec<f64>,
    pub map: f64,
}

impl RetrievalResult {
    pub fn cmc_at(&self, k: usize) -> f64 {
        if k == 0 {
            return 0.0;
        }
        let idx = k.min(self.cmc.len()) - 1;
        self.cmc[idx]
    }
}

/// Euclidean-distance ranking per query with stable tie-breaking by gallery
/// index. `CMC@k` is the fraction of queries with a correct match in the top
/// `k`; AP per query is the mean of precision at the ranks of its correct
/// matches.
pub fn retrieval_eval(
    query_feats: &Array,
    query_labels: &[usize],
    gallery_feats: &Array,
    gallery_labels: &[usize],
) -> Result<RetrievalResult> {
    if query_feats.rank() != 2
        || gallery_feats.rank() != 2
        || query_feats.cols() != gallery_feats.cols()
    {
        return Err(Error::ShapeMismatch {
            context: "retrieval_eval feature width".into(),
            left: query_feats.shape().to_vec(),
            right: gallery_feats.shape().to_vec(),
        });
    }
    let q = query_feats.rows();
    let g = gallery_feats.rows();
    if q != query_labels.len() || g != gallery_labels.len() {
        return Err(Error::Invalid(format!(
            "label counts ({}, {}) do not match feature rows ({q}, {g})",
            query_labels.len(),
            gallery_labels.len()
        )));
    }
    for &label in query_labels {
        if !gallery_labels.contains(&label) {
            return Err(Error::QueryLabelMissing(label));
        }
    }

    // (first correct rank, average precision) per query, queries independent
    let per_query: Vec<(usize, f64)> = parallel::map_indexed(q, |qi| {
        let qrow = query_feats.row(qi);
        let mut order: Vec<(f64, usize)> = (0..g)
            .map(|gi| (euclidean(qrow, gallery_feats.row(gi)), gi))
            .collect();
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut first_rank = g;
        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        for (rank0, &(_, gi)) in order.iter().enumerate() {
            if gallery_labels[gi] == query_labels[qi] {
                hits += 1;
                precision_sum += hits as f64 / (rank0 + 1) as f64;
                if first_rank == g {
                    first_rank = rank0;
                }
            }
        }
        (first_rank, precision_sum / hits as f64)
    });

    let mut cmc = vec![0.0; g];
    let mut map = 0.0;
    for &(first_rank, ap) in &per_query {
        cmc[first_rank] += 1.0;
        map += ap;
    }
    let mut acc = 0.0;
    for c in cmc.iter_mut() {
        acc += *c;
        *c = acc / q as f64;
    }
    Ok(RetrievalResult {
        cmc,
        map: map / q as f64,
    })
}

/// Ridge-regularized linear probe from features to target codes, fit on a
/// seeded half split and scored as R-squared on the held-out half, averaged
/// over target dimensions.
pub fn shape_probe(features: &Array, codes: &Array, seed: u64) -> Result<f64> {
    let n = features.rows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let split = n / 2;
    let (fit_idx, eval_idx) = idx.split_at(split);
    probe_r2(features, codes, fit_idx, eval_idx)
}

/// Probe variant whose fit/eval split keeps whole groups (identities) on one
/// side, so only structure that generalizes to unseen identities counts. A
/// probe that merely memorizes identity clusters scores near zero here.
pub fn shape_probe_grouped(
    features: &Array,
    codes: &Array,
    groups: &[usize],
    seed: u64,
) -> Result<f64> {
    if groups.len() != features.rows() {
        return Err(Error::Invalid(format!(
            "group labels ({}) do not match feature rows ({})",
            groups.len(),
            features.rows()
        )));
    }
    let mut unique: Vec<usize> = groups.to_vec();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() < 2 {
        return Err(Error::Invalid("grouped probe needs at least 2 groups".into()));
    }
    unique.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (fit_groups, _) = unique.split_at(unique.len() / 2);
    let mut fit_idx = Vec::new();
    let mut eval_idx = Vec::new();
    for (i, g) in groups.iter().enumerate() {
        if fit_groups.contains(g) {
            fit_idx.push(i);
        } else {
            eval_idx.push(i);
        }
    }
    probe_r2(features, codes, &fit_idx, &eval_idx)
}

fn probe_r2(features: &Array, codes: &Array, fit_idx: &[usize], eval_idx: &[usize]) -> Result<f64> {
    if features.rank() != 2 || codes.rank() != 2 || features.rows() != codes.rows() {
        return Err(Error::ShapeMismatch {
            context: "shape_probe rows".into(),
            left: features.shape().to_vec(),
            right: codes.shape().to_vec(),
        });
    }
    let n = features.rows();
    let d = features.cols();
    if n <= d + 1 || fit_idx.len() <= d {
        return Err(Error::Invalid(format!(
            "probe needs more samples than feature dims, got n={n} (fit {}), d={d}",
            fit_idx.len()
        )));
    }

    let t = codes.cols();
    // center on the fit split
    let mut f_mean = vec![0.0; d];
    let mut y_mean = vec![0.0; t];
    for &i in fit_idx {
        for (m, &v) in f_mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
        for (m, &v) in y_mean.iter_mut().zip(codes.row(i)) {
            *m += v;
        }
    }
    f_mean.iter_mut().for_each(|m| *m /= fit_idx.len() as f64);
    y_mean.iter_mut().for_each(|m| *m /= fit_idx.len() as f64);

    // normal equations with ridge
    let mut xtx = vec![0.0; d * d];
    let mut xty = vec![0.0; d * t];
    for &i in fit_idx {
        let row = features.row(i);
        let y = codes.row(i);
        for a in 0..d {
            let fa = row[a] - f_mean[a];
            for b in a..d {
                xtx[a * d + b] += fa * (row[b] - f_mean[b]);
            }
            for j in 0..t {
                xty[a * t + j] += fa * (y[j] - y_mean[j]);
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            xtx[a * d + b] = xtx[b * d + a];
        }
        xtx[a * d + a] += PROBE_RIDGE_LAMBDA;
    }
    let w = solve_spd(&xtx, &xty, d, t)?;

    // out-of-sample R^2 against the fit-mean baseline, averaged over dims
    let mut ss_res = vec![0.0; t];
    let mut ss_tot = vec![0.0; t];
    for &i in eval_idx {
        let row = features.row(i);
        let y = codes.row(i);
        for j in 0..t {
            let mut pred = y_mean[j];
            for a in 0..d {
                pred += (row[a] - f_mean[a]) * w[a * t + j];
            }
            ss_res[j] += (y[j] - pred) * (y[j] - pred);
            ss_tot[j] += (y[j] - y_mean[j]) * (y[j] - y_mean[j]);
        }
    }
    let r2 = (0..t)
        .map(|j| {
            if ss_tot[j] > 0.0 {
                1.0 - ss_res[j] / ss_tot[j]
            } else {
                0.0
            }
        })
        .sum::<f64>()
        / t as f64;
    Ok(r2)
}

/// Cholesky solve of `A X = B` for symmetric positive-definite `A (d,d)` and
/// `B (d,t)` flattened row-major.
pub(crate) fn solve_spd(a: &[f64], b: &[f64], d: usize, t: usize) -> Result<Vec<f64>> {
    // decompose A = L L^T
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::Invalid(
                        "probe normal equations are not positive definite".into(),
                    ));
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    // forward/backward substitution per target column
    let mut x = vec![0.0; d * t];
    for j in 0..t {
        let mut y = vec![0.0; d];
        for i in 0..d {
            let mut s = b[i * t + j];
            for k in 0..i {
                s -= l[i * d + k] * y[k];
            }
            y[i] = s / l[i * d + i];
        }
        for i in (0..d).rev() {
            let mut s = y[i];
            for k in (i + 1)..d {
                s -= l[k * d + i] * x[k * t + j];
            }
            x[i * t + j] = s / l[i * d + i];
        }
    }
    Ok(x)
}

/// Per-feature-set evaluation emitted at epoch boundaries and by the `eval`
/// command.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct EvalReport {
    pub cmc1: f64,
    pub cmc5: f64,
    pub cmc10: f64,
    pub map: f64,
    pub map_zsr: f64,
    pub map_zse: f64,
    pub r2_z: f64,
    pub r2_zsr: f64,
    pub r2_zse: f64,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "cmc1 = {}", self.cmc1)?;
        writeln!(f, "cmc5 = {}", self.cmc5)?;
        writeln!(f, "cmc10 = {}", self.cmc10)?;
        writeln!(f, "map = {}", self.map)?;
        writeln!(f, "map_zsr = {}", self.map_zsr)?;
        writeln!(f, "map_zse = {}", self.map_zse)?;
        writeln!(f, "r2_z = {}", self.r2_z)?;
        writeln!(f, "r2_zsr = {}", self.r2_zsr)?;
        writeln!(f, "r2_zse = {}", self.r2_zse)
    }
}
