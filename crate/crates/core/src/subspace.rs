//! Semi-orthogonal projector and the orthogonal decomposition of the
//! integrated representation into shape-related and shape-erased components.

use crate::array::{self, Array};
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use rand::Rng;

/// Trainable projector `P (n, m)`, `m < n`. Columns span the shape-related
/// subspace; the orthogonal complement holds the shape-erased component.
#[derive(Clone, Debug)]
pub struct Projector {
    p: Array,
}

impl Projector {
    pub fn new(p: Array) -> Result<Self> {
        if p.rank() != 2 || p.shape()[1] >= p.shape()[0] {
            return Err(Error::Invalid(format!(
                "projector needs shape (n, m) with m < n, got {:?}",
                p.shape()
            )));
        }
        if !p.all_finite() {
            return Err(Error::Invalid("projector entries must be finite".into()));
        }
        Ok(Projector { p })
    }

    /// Standard normal entries scaled by `1/sqrt(n)` so columns start near
    /// unit norm.
    pub fn init<R: Rng>(n: usize, m: usize, rng: &mut R) -> Result<Self> {
        if m >= n {
            return Err(Error::Invalid(format!(
                "projector needs m < n, got n={n}, m={m}"
            )));
        }
        let scale = 1.0 / (n as f64).sqrt();
        Ok(Projector {
            p: Array::randn(vec![n, m], scale, rng),
        })
    }

    pub fn n(&self) -> usize {
        self.p.shape()[0]
    }

    pub fn m(&self) -> usize {
        self.p.shape()[1]
    }

    pub fn matrix(&self) -> &Array {
        &self.p
    }

    pub fn matrix_mut(&mut self) -> &mut Array {
        &mut self.p
    }
}

/// Split `z (batch, n)` into `z_sr = P^T z (batch, m)` and the residual
/// `z_se = (I - P P^T) z (batch, n)`, differentiable through both `z` and `P`.
pub fn decompose(tape: &mut Tape, z: NodeId, p: NodeId) -> Result<(NodeId, NodeId)> {
    let vz = tape.value(z);
    let vp = tape.value(p);
    if vz.rank() != 2 || vp.rank() != 2 || vz.cols() != vp.rows() {
        return Err(Error::ShapeMismatch {
            context: format!("decompose (expected z cols = n = {})", vp.rows()),
            left: vz.shape().to_vec(),
            right: vp.shape().to_vec(),
        });
    }
    let z_sr = tape.matmul(z, p)?;
    let pt = tape.transpose(p)?;
    let back = tape.matmul(z_sr, pt)?;
    let z_se = tape.sub(z, back)?;
    Ok((z_sr, z_se))
}

/// Mean column-wise L1 deviation of `P^T P` from the identity:
/// `(1/m) sum_j || (P^T P)_j - (I_m)_j ||_1`. Zero exactly when `P` is
/// semi-orthogonal; differentiable in `P`.
pub fn ortho_penalty(tape: &mut Tape, p: NodeId) -> Result<NodeId> {
    let m = tape.value(p).cols();
    let pt = tape.transpose(p)?;
    let gram = tape.matmul(pt, p)?;
    let eye = tape.constant(identity(m))?;
    let dev = tape.sub(gram, eye)?;
    let l1 = tape.l1_norm(dev)?;
    tape.scale(l1, 1.0 / m as f64)
}

/// Cross-orthogonality penalty between two independent projectors:
/// `(1/m2) sum_j || (P1^T P2)_j ||_1`. Used by the two-projector variant.
pub fn cross_penalty(tape: &mut Tape, p1: NodeId, p2: NodeId) -> Result<NodeId> {
    let m2 = tape.value(p2).cols();
    let p1t = tape.transpose(p1)?;
    let cross = tape.matmul(p1t, p2)?;
    let l1 = tape.l1_norm(cross)?;
    tape.scale(l1, 1.0 / m2 as f64)
}

/// Plain-array decomposition for evaluation paths.
pub fn decompose_plain(z: &Array, p: &Array) -> Result<(Array, Array)> {
    let z_sr = array::matmul(z, p)?;
    let back = array::matmul(&z_sr, &array::transpose(p))?;
    let z_se = array::sub(z, &back)?;
    Ok((z_sr, z_se))
}

/// Plain-array penalty value for diagnostics.
pub fn ortho_penalty_value(p: &Array) -> f64 {
    let gram = array::matmul(&array::transpose(p), p).unwrap();
    let m = p.cols();
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            let target = if i == j { 1.0 } else { 0.0 };
            total += (gram.at2(i, j) - target).abs();
        }
    }
    total / m as f64
}

/// Mean absolute cosine similarity over all distinct column pairs of `P`.
pub fn mean_pairwise_abs_cosine(p: &Array) -> f64 {
    let (n, m) = (p.rows(), p.cols());
    let mut norms = vec![0.0; m];
    for j in 0..m {
        let mut s = 0.0;
        for i in 0..n {
            s += p.at2(i, j) * p.at2(i, j);
        }
        norms[j] = s.sqrt();
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for a in 0..m {
        for b in (a + 1)..m {
            let mut dot = 0.0;
            for i in 0..n {
                dot += p.at2(i, a) * p.at2(i, b);
            }
            total += (dot / (norms[a] * norms[b])).abs();
            count += 1;
        }
    }
    total / count as f64
}

fn identity(m: usize) -> Array {
    let mut a = Array::zeros(vec![m, m]);
    for i in 0..m {
        a.set2(i, i, 1.0);
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, value_and_grad, Params};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run_decompose(z: Array, p: Array) -> (Array, Array) {
        let mut tape = Tape::new();
        let zn = tape.constant(z).unwrap();
        let pn = tape.constant(p).unwrap();
        let (sr, se) = decompose(&mut tape, zn, pn).unwrap();
        (tape.value(sr).clone(), tape.value(se).clone())
    }

    #[test]
    fn axis_aligned_projector() {
        let p = Array::from_vec(vec![3, 1], vec![1.0, 0.0, 0.0]).unwrap();
        let z = Array::from_vec(vec![1, 3], vec![2.0, 3.0, 4.0]).unwrap();
        let (sr, se) = run_decompose(z, p);
        assert_eq!(sr.data(), &[2.0]);
        assert_eq!(se.data(), &[0.0, 3.0, 4.0]);
    }

    #[test]
    fn orthonormal_two_column_case() {
        let s = 1.0 / 2f64.sqrt();
        // columns (e1+e2)/sqrt2 and (e3-e4)/sqrt2
        let p = Array::from_vec(vec![4, 2], vec![s, 0.0, s, 0.0, 0.0, s, 0.0, -s]).unwrap();
        let z = Array::from_vec(vec![1, 4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let (sr, se) = run_decompose(z, p);
        assert!((sr.data()[0] - 2f64.sqrt()).abs() < 1e-12);
        assert!(sr.data()[1].abs() < 1e-12);
        let want = [0.0, 0.0, 1.0, 1.0];
        for (got, want) in se.data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    proptest! {
        /// P z_sr + z_se reconstructs z for arbitrary P and z.
        #[test]
        fn reconstruction_identity(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = Array::randn(vec![3, 6], 1.0, &mut rng);
            let p = Array::randn(vec![6, 2], 1.0, &mut rng);
            let (sr, se) = run_decompose(z.clone(), p.clone());
            let rebuilt = array::add(&array::matmul(&sr, &array::transpose(&p)).unwrap(), &se).unwrap();
            prop_assert!(rebuilt.max_abs_diff(&z) < 1e-12);
        }
    }

    #[test]
    fn component_orthogonality_for_orthonormal_p() {
        // exactly orthonormal columns: scaled standard basis rotations
        let s = 1.0 / 2f64.sqrt();
        let p = Array::from_vec(vec![4, 2], vec![s, 0.0, s, 0.0, 0.0, s, 0.0, -s]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let z = Array::randn(vec![1, 4], 1.0, &mut rng);
            let (sr, se) = run_decompose(z, p.clone());
            let proj = array::matmul(&sr, &array::transpose(&p)).unwrap();
            let dot: f64 = proj.data().iter().zip(se.data()).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-10, "dot {dot}");
        }
    }

    fn penalty_value(p: Array) -> f64 {
        let mut tape = Tape::new();
        let pn = tape.constant(p).unwrap();
        let pen = ortho_penalty(&mut tape, pn).unwrap();
        tape.scalar(pen)
    }

    #[test]
    fn penalty_zero_for_basis_projector() {
        let mut p = Array::zeros(vec![5, 3]);
        for j in 0..3 {
            p.set2(j, j, 1.0);
        }
        assert_eq!(penalty_value(p), 0.0);
    }

    #[test]
    fn penalty_hand_case_both_columns_e1() {
        // P^T P = [[1,1],[1,1]] -> (1/2)(1+1) = 1
        let p = Array::from_vec(vec![3, 2], vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((penalty_value(p) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn penalty_zero_iff_semi_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let p = Array::randn(vec![6, 2], 0.5, &mut rng);
            let pen = penalty_value(p.clone());
            let gram = array::matmul(&array::transpose(&p), &p).unwrap();
            let mut dev: f64 = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    let t = if i == j { 1.0 } else { 0.0 };
                    dev = dev.max((gram.at2(i, j) - t).abs());
                }
            }
            if dev < 1e-12 {
                assert!(pen < 1e-12);
            } else {
                assert!(pen > 0.0);
            }
        }
        // and exactly zero implies gram == identity
        let mut p = Array::zeros(vec![4, 2]);
        p.set2(0, 0, 1.0);
        p.set2(2, 1, 1.0);
        assert_eq!(penalty_value(p), 0.0);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // random P: entries of P^T P - I almost surely away from zero
        let mut params = Params::new();
        params.insert("p", Array::randn(vec![5, 2], 0.6, &mut rng));
        let report = grad_check(
            |t, b| ortho_penalty(t, b.get("p")),
            &params,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-6, "{report}");
    }

    #[test]
    fn decompose_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = Params::new();
        params.insert("z", Array::randn(vec![3, 5], 1.0, &mut rng));
        params.insert("p", Array::randn(vec![5, 2], 0.5, &mut rng));
        let report = grad_check(
            |t, b| {
                let (sr, se) = decompose(t, b.get("z"), b.get("p"))?;
                let a = t.sq_norm(sr)?;
                let bb = t.sq_norm(se)?;
                let sc = t.scale(bb, 0.7)?;
                t.add(a, sc)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-6, "{report}");
    }

    #[test]
    fn decompose_dimension_mismatch_names_n() {
        let mut tape = Tape::new();
        let z = tape.constant(Array::zeros(vec![2, 5])).unwrap();
        let p = tape.constant(Array::zeros(vec![4, 2])).unwrap();
        let err = decompose(&mut tape, z, p).unwrap_err().to_string();
        assert!(err.contains("n = 4"), "{err}");
    }

    #[test]
    fn projector_shape_validation() {
        assert!(Projector::new(Array::zeros(vec![4, 4])).is_err());
        assert!(Projector::new(Array::zeros(vec![4, 5])).is_err());
        assert!(Projector::new(Array::zeros(vec![5, 2])).is_ok());
    }

    /// Freshly initialized projector at the full documented scale has mean
    /// pairwise column |cosine| near sqrt(2 / (pi n)) ~ 0.0176; the observed
    /// reference value is about 0.015.
    #[test]
    fn init_cosine_at_reference_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let proj = Projector::init(2048, 512, &mut rng).unwrap();
        let c = mean_pairwise_abs_cosine(proj.matrix());
        assert!((0.012..0.022).contains(&c), "mean |cos| {c}");
    }

    #[test]
    fn init_cosine_at_desk_scale_matches_theory() {
        // E|cos| = sqrt(2/(pi n)) for random directions
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let proj = Projector::init(64, 16, &mut rng).unwrap();
        let c = mean_pairwise_abs_cosine(proj.matrix());
        let expect = (2.0 / (std::f64::consts::PI * 64.0)).sqrt();
        assert!((c - expect).abs() < 0.035, "got {c}, expect {expect}");
    }

    #[test]
    fn gradient_flows_through_p_in_training_style_use() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = Params::new();
        params.insert("p", Array::randn(vec![4, 2], 0.5, &mut rng));
        let z = Array::randn(vec![3, 4], 1.0, &mut rng);
        let (_, grads) = value_and_grad(
            |t, b| {
                let zc = t.constant(z.clone())?;
                let (sr, _se) = decompose(t, zc, b.get("p"))?;
                t.sq_norm(sr)
            },
            &params,
        )
        .unwrap();
        assert!(grads.get("p").unwrap().max_abs() > 0.0);
    }
}
