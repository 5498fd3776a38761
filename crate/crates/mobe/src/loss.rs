//! Training objectives.
//!
//! All losses are built from graph primitives so gradients come out of the
//! same reverse sweep as everything else. Batch conventions: representations
//! and embeddings are row-per-sample matrices; identities are one-hot rows.

use crate::counters;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const SRA_EPSILON: f64 = 1e-6;

fn check_rows(op: &'static str, g: &Graph, a: NodeId, rows: usize) -> Result<()> {
    let shape = g.value(a).shape();
    if shape.len() != 2 || shape[0] != rows {
        return Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![rows, 0],
        });
    }
    Ok(())
}

fn check_one_hot(op: &'static str, identity: &Tensor) -> Result<()> {
    let shape = identity.shape();
    if shape.len() != 2 {
        return Err(Error::invalid(format!("{op}: identities must be a matrix")));
    }
    for i in 0..shape[0] {
        let row = identity.row(i);
        let ones = row.iter().filter(|v| **v == 1.0).count();
        let zeros = row.iter().filter(|v| **v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::invalid(format!(
                "{op}: identity row {i} is not one-hot"
            )));
        }
    }
    Ok(())
}

/// Mean cross-entropy of `softmax(logits)` against one-hot identities.
pub fn router_loss(g: &mut Graph, logits: NodeId, identity: &Tensor) -> Result<NodeId> {
    check_one_hot("router_loss", identity)?;
    let n = identity.shape()[0];
    check_rows("router_loss", g, logits, n)?;
    if g.value(logits).shape()[1] != identity.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "router_loss",
            lhs: g.value(logits).shape().to_vec(),
            rhs: identity.shape().to_vec(),
        });
    }
    let logp = g.log_softmax(logits, 1)?;
    let target = g.constant(identity.clone());
    let picked = g.mul(logp, target)?;
    let per_sample = g.sum_axis(picked, 1)?;
    let mean = g.mean_all(per_sample);
    Ok(g.neg(mean))
}

/// Per-label binary cross-entropy with logits, averaged over batch and labels.
pub fn classification_loss(g: &mut Graph, logits: NodeId, labels: &Tensor) -> Result<NodeId> {
    if labels.data().iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::invalid(
            "classification_loss: labels must be exactly 0 or 1",
        ));
    }
    if g.value(logits).shape() != labels.shape() {
        return Err(Error::ShapeMismatch {
            op: "classification_loss",
            lhs: g.value(logits).shape().to_vec(),
            rhs: labels.shape().to_vec(),
        });
    }
    let target = g.constant(labels.clone());
    let elementwise = g.bce_with_logits(logits, target)?;
    Ok(g.mean_all(elementwise))
}

/// Mean squared error over all elements.
pub fn mse_loss(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean_all(sq))
}

/// Bidirectional contrastive loss over in-batch dot products: each row of
/// `hf` pairs with the same row of `y`; both directions sum their per-sample
/// negative log-softmax terms.
pub fn retrieval_loss(g: &mut Graph, hf: NodeId, y: NodeId, tau: f64) -> Result<NodeId> {
    if tau <= 0.0 {
        return Err(Error::invalid(format!(
            "retrieval temperature must be positive, got {tau}"
        )));
    }
    let sh = g.value(hf).shape().to_vec();
    let sy = g.value(y).shape().to_vec();
    if sh != sy || sh.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "retrieval_loss",
            lhs: sh,
            rhs: sy,
        });
    }
    let n = sh[0];
    let logits = g.matmul_nt(hf, y)?;
    let logits = if tau != 1.0 {
        g.mul_scalar(logits, 1.0 / tau)
    } else {
        logits
    };
    let eye = {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data_mut()[i * n + i] = 1.0;
        }
        g.constant(t)
    };
    let row_logp = g.log_softmax(logits, 1)?;
    let row_diag = g.mul(row_logp, eye)?;
    let loss_fmri = g.sum_all(row_diag);
    let col_logp = g.log_softmax(logits, 0)?;
    let col_diag = g.mul(col_logp, eye)?;
    let loss_image = g.sum_all(col_diag);
    let total = g.add(loss_fmri, loss_image)?;
    Ok(g.neg(total))
}

/// Reconstruction objective: mean-squared error of the prior output against
/// the image embeddings, plus the bidirectional contrastive term.
pub fn reconstruction_loss(
    g: &mut Graph,
    prior_out: NodeId,
    y: NodeId,
    hf: NodeId,
    tau: f64,
) -> Result<NodeId> {
    let mse = mse_loss(g, prior_out, y)?;
    let retri = retrieval_loss(g, hf, y, tau)?;
    g.add(mse, retri)
}

/// Closed form of the relation-alignment objective given the two similarity
/// values, with the same clamping the graph version applies.
pub fn sra_value(sim_fy: f64, sim_fi: f64, epsilon: f64) -> f64 {
    let a = sim_fy.max(epsilon);
    let b = sim_fi.max(epsilon);
    -(a / (a + b)).ln()
}

/// Gram matrix of row-normalized vectors, diagonal included.
fn gram(g: &mut Graph, rows: NodeId, normalize: bool) -> Result<NodeId> {
    counters::count_gram_computation();
    let rows = if normalize {
        g.l2_normalize(rows, 1)?
    } else {
        rows
    };
    g.matmul_nt(rows, rows)
}

fn flat_cosine(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let prod = g.mul(a, b)?;
    let dot = g.sum_all(prod);
    let aa = g.mul(a, a)?;
    let asq = g.sum_all(aa);
    let anorm = g.sqrt(asq)?;
    let bb = g.mul(b, b)?;
    let bsq = g.sum_all(bb);
    let bnorm = g.sqrt(bsq)?;
    let denom = g.mul(anorm, bnorm)?;
    g.div(dot, denom)
}

/// Semantic relation alignment: pull the batch relation structure of the
/// representations toward the image relations and away from the identity
/// relations.
///
/// `-log( sim(M_F, M_Y) / (sim(M_F, M_Y) + sim(M_F, M_I)) )` where the `M`s
/// are Gram matrices of row-normalized `f` and `y` and of the one-hot
/// identities, and `sim` is the cosine of the flattened matrices (diagonal
/// included); both sims are clamped to at least `epsilon` so the logarithm
/// stays finite.
pub fn sra_loss(
    g: &mut Graph,
    f: NodeId,
    y: NodeId,
    identity: &Tensor,
    epsilon: f64,
) -> Result<NodeId> {
    check_one_hot("sra_loss", identity)?;
    let n = identity.shape()[0];
    if n < 2 {
        return Err(Error::invalid(
            "sra_loss: batch must hold at least 2 samples",
        ));
    }
    let mut subjects_seen = std::collections::BTreeSet::new();
    for i in 0..n {
        let row = identity.row(i);
        let subject = row.iter().position(|v| *v == 1.0).expect("one-hot checked");
        subjects_seen.insert(subject);
    }
    if subjects_seen.len() < 2 {
        return Err(Error::invalid(
            "sra_loss: batch holds a single subject; the identity relation is constant \
             (check the stratified sampler)",
        ));
    }
    check_rows("sra_loss", g, f, n)?;
    check_rows("sra_loss", g, y, n)?;

    let m_f = gram(g, f, true)?;
    let m_y = gram(g, y, true)?;
    let ident = g.constant(identity.clone());
    let m_i = gram(g, ident, false)?;

    let sim_fy = flat_cosine(g, m_f, m_y)?;
    let sim_fi = flat_cosine(g, m_f, m_i)?;
    let a = g.clamp_min(sim_fy, epsilon);
    let b = g.clamp_min(sim_fi, epsilon);
    let denom = g.add(a, b)?;
    let log_denom = g.log(denom)?;
    let log_a = g.log(a)?;
    g.sub(log_denom, log_a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::rng;
    use rand::Rng;

    fn rand_matrix(rows: usize, cols: usize, seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut r = rng::stream(seed, "loss-test");
        Tensor::from_vec(
            &[rows, cols],
            (0..rows * cols).map(|_| r.random_range(lo..hi)).collect(),
        )
        .unwrap()
    }

    fn unit_rows(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut t = rand_matrix(rows, cols, seed, -1.0, 1.0);
        for i in 0..rows {
            let norm: f64 = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in &mut t.data_mut()[i * cols..(i + 1) * cols] {
                *v /= norm;
            }
        }
        t
    }

    fn one_hot(rows: &[usize], n: usize) -> Tensor {
        crate::synth::Dataset::identity_rows(rows, n)
    }

    #[test]
    fn router_loss_uniform_logits_is_ln_s() {
        let mut g = Graph::new(0);
        let logits = g.constant(Tensor::zeros(&[6, 4]));
        let identity = one_hot(&[0, 1, 2, 3, 0, 1], 4);
        let loss = router_loss(&mut g, logits, &identity).unwrap();
        assert!((g.value(loss).data()[0] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn router_loss_saturated_margin_tends_to_zero() {
        let mut g = Graph::new(0);
        let mut t = Tensor::filled(&[3, 4], -40.0);
        for (i, s) in [1usize, 3, 0].iter().enumerate() {
            t.data_mut()[i * 4 + s] = 40.0;
        }
        let logits = g.constant(t);
        let identity = one_hot(&[1, 3, 0], 4);
        let loss = router_loss(&mut g, logits, &identity).unwrap();
        assert!(g.value(loss).data()[0] < 1e-12);
    }

    #[test]
    fn router_loss_matches_scalar_oracle() {
        let logits_t = rand_matrix(8, 5, 3, -2.0, 2.0);
        let subjects = [0usize, 4, 2, 1, 3, 3, 0, 2];
        let identity = one_hot(&subjects, 5);

        // per-sample scalar loop: -log softmax at the true class, averaged
        let mut expected = 0.0;
        for i in 0..8 {
            let row = logits_t.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let p_true = (row[subjects[i]] - mx).exp() / z;
            expected -= p_true.ln();
        }
        expected /= 8.0;

        let mut g = Graph::new(0);
        let logits = g.constant(logits_t);
        let loss = router_loss(&mut g, logits, &identity).unwrap();
        assert!((g.value(loss).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn classification_loss_zero_logits_is_ln_two() {
        let mut g = Graph::new(0);
        let logits = g.constant(Tensor::zeros(&[5, 8]));
        let labels = one_hot(&[0, 3, 5, 7, 2], 8); // any 0/1 pattern works
        let loss = classification_loss(&mut g, logits, &labels).unwrap();
        assert!((g.value(loss).data()[0] - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn classification_loss_saturates_to_zero() {
        let labels = Tensor::from_vec(&[2, 3], vec![1., 0., 1., 0., 0., 1.]).unwrap();
        let logits_t = Tensor::from_vec(&[2, 3], vec![10., -10., 10., -10., -10., 10.]).unwrap();
        let mut g = Graph::new(0);
        let logits = g.constant(logits_t);
        let loss = classification_loss(&mut g, logits, &labels).unwrap();
        assert!(g.value(loss).data()[0] < 1e-4);
    }

    #[test]
    fn classification_loss_matches_elementwise_oracle() {
        let logits_t = rand_matrix(6, 7, 9, -3.0, 3.0);
        let mut labels = Tensor::zeros(&[6, 7]);
        let mut r = rng::stream(10, "labels");
        for v in labels.data_mut() {
            *v = if r.random::<bool>() { 1.0 } else { 0.0 };
        }

        let mut expected = 0.0;
        for (z, y) in logits_t.data().iter().zip(labels.data()) {
            let p = 1.0 / (1.0 + (-z).exp());
            expected -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        expected /= 42.0;

        let mut g = Graph::new(0);
        let logits = g.constant(logits_t);
        let loss = classification_loss(&mut g, logits, &labels).unwrap();
        assert!((g.value(loss).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn classification_loss_rejects_soft_labels() {
        let mut g = Graph::new(0);
        let logits = g.constant(Tensor::zeros(&[1, 2]));
        let labels = Tensor::from_vec(&[1, 2], vec![0.5, 1.0]).unwrap();
        assert!(classification_loss(&mut g, logits, &labels).is_err());
    }

    #[test]
    fn retrieval_loss_single_sample_is_zero() {
        let mut g = Graph::new(0);
        let hf = g.constant(unit_rows(1, 6, 1));
        let y = g.constant(unit_rows(1, 6, 2));
        let loss = retrieval_loss(&mut g, hf, y, 1.0).unwrap();
        assert_eq!(g.value(loss).data()[0], 0.0);
    }

    #[test]
    fn retrieval_loss_identity_logits_closed_form() {
        // rows of hf and y chosen so hf . y^T is exactly the 2x2 identity
        let hf_t = Tensor::from_vec(&[2, 2], vec![1., 0., 0., 1.]).unwrap();
        let y_t = Tensor::from_vec(&[2, 2], vec![1., 0., 0., 1.]).unwrap();
        let mut g = Graph::new(0);
        let hf = g.constant(hf_t);
        let y = g.constant(y_t);
        let loss = retrieval_loss(&mut g, hf, y, 1.0).unwrap();
        let expected = 4.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((g.value(loss).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn retrieval_loss_matches_double_loop_oracle() {
        let n = 7;
        let e = 5;
        let hf_t = unit_rows(n, e, 21);
        let y_t = unit_rows(n, e, 22);
        let tau = 0.7;

        let dot = |a: &Tensor, i: usize, b: &Tensor, j: usize| -> f64 {
            a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum::<f64>() / tau
        };
        let mut expected = 0.0;
        for j in 0..n {
            let mut zr = 0.0;
            let mut zc = 0.0;
            for k in 0..n {
                zr += dot(&hf_t, j, &y_t, k).exp();
                zc += dot(&hf_t, k, &y_t, j).exp();
            }
            expected -= (dot(&hf_t, j, &y_t, j).exp() / zr).ln();
            expected -= (dot(&hf_t, j, &y_t, j).exp() / zc).ln();
        }

        let mut g = Graph::new(0);
        let hf = g.constant(hf_t);
        let y = g.constant(y_t);
        let loss = retrieval_loss(&mut g, hf, y, tau).unwrap();
        assert!((g.value(loss).data()[0] - expected).abs() < 1e-10);
    }

    #[test]
    fn retrieval_loss_rejects_non_positive_temperature() {
        let mut g = Graph::new(0);
        let hf = g.constant(unit_rows(2, 4, 1));
        let y = g.constant(unit_rows(2, 4, 2));
        assert!(retrieval_loss(&mut g, hf, y, 0.0).is_err());
        assert!(retrieval_loss(&mut g, hf, y, -1.0).is_err());
    }

    #[test]
    fn retrieval_loss_invariant_under_joint_permutation() {
        let n = 6;
        let hf_t = unit_rows(n, 4, 31);
        let y_t = unit_rows(n, 4, 32);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permute = |t: &Tensor| {
            let mut out = Tensor::zeros(&[n, 4]);
            for (dst, &src) in perm.iter().enumerate() {
                out.data_mut()[dst * 4..(dst + 1) * 4].copy_from_slice(t.row(src));
            }
            out
        };
        let eval = |a: Tensor, b: Tensor| {
            let mut g = Graph::new(0);
            let hf = g.constant(a);
            let y = g.constant(b);
            let loss = retrieval_loss(&mut g, hf, y, 1.0).unwrap();
            g.value(loss).data()[0]
        };
        let base = eval(hf_t.clone(), y_t.clone());
        let permuted = eval(permute(&hf_t), permute(&y_t));
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_loss_perfect_prior_single_sample_is_zero() {
        let y_t = unit_rows(1, 5, 41);
        let mut g = Graph::new(0);
        let y = g.constant(y_t.clone());
        let prior = g.constant(y_t.clone());
        let hf = g.constant(unit_rows(1, 5, 42));
        let loss = reconstruction_loss(&mut g, prior, y, hf, 1.0).unwrap();
        assert_eq!(g.value(loss).data()[0], 0.0);
    }

    #[test]
    fn reconstruction_loss_unit_offset_adds_one() {
        let n = 4;
        let y_t = unit_rows(n, 5, 43);
        let mut shifted = y_t.clone();
        for v in shifted.data_mut() {
            *v += 1.0;
        }
        let hf_t = unit_rows(n, 5, 44);

        let mut g = Graph::new(0);
        let y = g.constant(y_t);
        let prior = g.constant(shifted);
        let hf = g.constant(hf_t.clone());
        let loss = reconstruction_loss(&mut g, prior, y, hf, 1.0).unwrap();

        let mut g2 = Graph::new(0);
        let y2 = g2.constant(unit_rows(n, 5, 43));
        let hf2 = g2.constant(hf_t);
        let retri = retrieval_loss(&mut g2, hf2, y2, 1.0).unwrap();
        let expected = 1.0 + g2.value(retri).data()[0];
        assert!((g.value(loss).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_loss_is_sum_of_components() {
        let n = 5;
        let y_t = unit_rows(n, 6, 45);
        let prior_t = rand_matrix(n, 6, 46, -1.0, 1.0);
        let hf_t = unit_rows(n, 6, 47);

        let mut g = Graph::new(0);
        let y = g.constant(y_t.clone());
        let prior = g.constant(prior_t.clone());
        let hf = g.constant(hf_t.clone());
        let combined = reconstruction_loss(&mut g, prior, y, hf, 1.0).unwrap();

        let mut g2 = Graph::new(0);
        let y2 = g2.constant(y_t);
        let prior2 = g2.constant(prior_t);
        let hf2 = g2.constant(hf_t);
        let mse = mse_loss(&mut g2, prior2, y2).unwrap();
        let retri = retrieval_loss(&mut g2, hf2, y2, 1.0).unwrap();
        let expected = g2.value(mse).data()[0] + g2.value(retri).data()[0];
        assert!((g.value(combined).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn sra_loss_equal_relations_balanced_is_ln_two() {
        // f rows equal to the one-hot identities: all three Grams coincide
        let identity = one_hot(&[0, 1, 0, 1], 2);
        let mut g = Graph::new(0);
        let f = g.constant(identity.clone());
        let y = g.constant(identity.clone());
        let loss = sra_loss(&mut g, f, y, &identity, SRA_EPSILON).unwrap();
        assert!((g.value(loss).data()[0] - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sra_loss_clamped_identity_similarity_limit() {
        // construct f so <M_F, M_I> is exactly zero: same-subject pairs cancel
        let f_t = Tensor::from_vec(
            &[4, 2],
            vec![1., 0., -1., 0., 0., 1., 0., -1.],
        )
        .unwrap();
        let identity = one_hot(&[0, 0, 1, 1], 2);
        let mut g = Graph::new(0);
        let f = g.constant(f_t.clone());
        let y = g.constant(f_t);
        let loss = sra_loss(&mut g, f, y, &identity, SRA_EPSILON).unwrap();
        let expected = (1.0 + SRA_EPSILON).ln(); // -log(1/(1+eps))
        assert!((g.value(loss).data()[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn sra_loss_matches_from_scratch_oracle() {
        let n = 6;
        let f_t = rand_matrix(n, 5, 51, -1.0, 1.0);
        let y_t = unit_rows(n, 4, 52);
        let subjects = [0usize, 1, 0, 1, 1, 0];
        let identity = one_hot(&subjects, 2);

        // explicit recomputation: normalize rows, build Grams, cosine, ratio
        let normalize_rows = |t: &Tensor| -> Vec<Vec<f64>> {
            (0..t.shape()[0])
                .map(|i| {
                    let row = t.row(i);
                    let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    row.iter().map(|v| v / norm).collect()
                })
                .collect()
        };
        let gram_of = |rows: &[Vec<f64>]| -> Vec<f64> {
            let n = rows.len();
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    m[i * n + j] = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                }
            }
            m
        };
        let cos = |a: &[f64], b: &[f64]| -> f64 {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let mf = gram_of(&normalize_rows(&f_t));
        let my = gram_of(&normalize_rows(&y_t));
        let ident_rows: Vec<Vec<f64>> = (0..n).map(|i| identity.row(i).to_vec()).collect();
        let mi = gram_of(&ident_rows);
        let expected = sra_value(cos(&mf, &my), cos(&mf, &mi), SRA_EPSILON);

        let mut g = Graph::new(0);
        let f = g.constant(f_t);
        let y = g.constant(y_t);
        let loss = sra_loss(&mut g, f, y, &identity, SRA_EPSILON).unwrap();
        assert!((g.value(loss).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn sra_loss_rejects_single_subject_batches() {
        let identity = one_hot(&[1, 1, 1], 3);
        let mut g = Graph::new(0);
        let f = g.constant(rand_matrix(3, 4, 53, -1.0, 1.0));
        let y = g.constant(unit_rows(3, 4, 54));
        let err = sra_loss(&mut g, f, y, &identity, SRA_EPSILON)
            .unwrap_err()
            .to_string();
        assert!(err.contains("sampler"), "{err}");
    }

    #[test]
    fn sra_value_is_monotone_in_first_similarity() {
        let b = 0.42;
        let mut last = f64::INFINITY;
        for step in 1..50 {
            let a = step as f64 / 50.0;
            let v = sra_value(a, b, SRA_EPSILON);
            assert!(v < last, "not strictly decreasing at a={a}");
            last = v;
        }
    }

    #[test]
    fn sra_loss_invariant_under_rotation_of_representations() {
        let n = 6;
        let f_t = rand_matrix(n, 3, 60, -1.0, 1.0);
        let y_t = unit_rows(n, 4, 61);
        let identity = one_hot(&[0, 1, 2, 0, 1, 2], 3);

        // a 3-D rotation from composed Givens rotations
        let (a, b, c) = (0.6f64, -1.1f64, 0.35f64);
        let rot = |v: &[f64]| -> Vec<f64> {
            let (x, y, z) = (v[0], v[1], v[2]);
            let (x, y) = (x * a.cos() - y * a.sin(), x * a.sin() + y * a.cos());
            let (y, z) = (y * b.cos() - z * b.sin(), y * b.sin() + z * b.cos());
            let (x, z) = (x * c.cos() - z * c.sin(), x * c.sin() + z * c.cos());
            vec![x, y, z]
        };
        let mut rotated = Tensor::zeros(&[n, 3]);
        for i in 0..n {
            rotated.data_mut()[i * 3..(i + 1) * 3].copy_from_slice(&rot(f_t.row(i)));
        }

        let eval = |f_t: Tensor| {
            let mut g = Graph::new(0);
            let f = g.constant(f_t);
            let y = g.constant(y_t.clone());
            let loss = sra_loss(&mut g, f, y, &identity, SRA_EPSILON).unwrap();
            g.value(loss).data()[0]
        };
        assert!((eval(f_t) - eval(rotated)).abs() < 1e-9);
    }

    #[test]
    fn all_losses_are_non_negative_on_random_batches() {
        for seed in 0..10 {
            let n = 5;
            let mut g = Graph::new(0);
            let logits = g.constant(rand_matrix(n, 4, 100 + seed, -3.0, 3.0));
            let identity = one_hot(&[0, 1, 2, 3, 1], 4);
            let l = router_loss(&mut g, logits, &identity).unwrap();
            assert!(g.value(l).data()[0] >= 0.0);

            let hf = g.constant(unit_rows(n, 6, 200 + seed));
            let y = g.constant(unit_rows(n, 6, 300 + seed));
            let l = retrieval_loss(&mut g, hf, y, 1.0).unwrap();
            assert!(g.value(l).data()[0] >= 0.0);

            let f = g.constant(rand_matrix(n, 7, 400 + seed, -1.0, 1.0));
            let l = sra_loss(&mut g, f, y, &identity, SRA_EPSILON).unwrap();
            assert!(g.value(l).data()[0] >= 0.0);
        }
    }

    #[test]
    fn losses_pass_finite_difference_checks() {
        // differentiable inputs only; targets and identities are constants
        let router_build: gradcheck::BuildFn = |g, ids| {
            let identity = one_hot(&[0, 2, 1], 3);
            router_loss(g, ids[0], &identity)
        };
        let cls_build: gradcheck::BuildFn = |g, ids| {
            let labels = Tensor::from_vec(&[3, 3], vec![1., 0., 1., 0., 0., 1., 1., 1., 0.]).unwrap();
            classification_loss(g, ids[0], &labels)
        };
        let retri_build: gradcheck::BuildFn = |g, ids| retrieval_loss(g, ids[0], ids[1], 0.8);
        let recon_build: gradcheck::BuildFn =
            |g, ids| reconstruction_loss(g, ids[0], ids[1], ids[2], 1.0);
        let sra_build: gradcheck::BuildFn = |g, ids| {
            let identity = one_hot(&[0, 1, 0, 1, 1], 2);
            sra_loss(g, ids[0], ids[1], &identity, SRA_EPSILON)
        };

        let cases: Vec<(&str, Vec<Tensor>, gradcheck::BuildFn)> = vec![
            ("router", vec![rand_matrix(3, 3, 70, -2.0, 2.0)], router_build),
            ("classification", vec![rand_matrix(3, 3, 71, -2.0, 2.0)], cls_build),
            (
                "retrieval",
                vec![unit_rows(4, 5, 72), unit_rows(4, 5, 73)],
                retri_build,
            ),
            (
                "reconstruction",
                vec![
                    rand_matrix(4, 5, 74, -1.0, 1.0),
                    unit_rows(4, 5, 75),
                    unit_rows(4, 5, 76),
                ],
                recon_build,
            ),
            (
                "sra",
                vec![rand_matrix(5, 4, 77, -1.0, 1.0), unit_rows(5, 6, 78)],
                sra_build,
            ),
        ];
        for (name, inputs, build) in cases {
            let err = gradcheck::max_rel_err(&inputs, build, 0).unwrap();
            assert!(
                err <= gradcheck::DEFAULT_TOLERANCE,
                "{name}: max rel err {err}"
            );
        }
    }
}
