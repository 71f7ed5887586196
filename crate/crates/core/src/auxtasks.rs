//! Auxiliary objectives on the list-wise representation: key-factor
//! reconstruction, click / pull-down prediction, and a cosine-similarity
//! InfoNCE contrast between an anchor, a behavior-preserving positive and
//! negatives from other requests.
//!
//! Every loss has a companion that also returns the gradient with respect to
//! its inputs (logits or representation vectors), which the trainer chains
//! into the network backward pass.

use ndarray::Array2;

use crate::agent::ModelParams;
use crate::simulator::sigmoid;

/// Probability clamp for cross entropy.
pub const PROB_EPS: f64 = 1e-7;
/// Guard on the cosine-similarity denominator.
pub const COSINE_EPS: f64 = 1e-12;

/// Sigmoid outputs of the three auxiliary heads.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxOutputs {
    /// `K x M`
    pub y_hat: Vec<Vec<f64>>,
    pub z_hat: Vec<f64>,
    pub p_hat: f64,
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

pub fn cross_entropy(y: f64, y_hat: f64) -> f64 {
    let p = clamp_prob(y_hat);
    -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
}

/// Cross entropy of `sigmoid(logit)` and its derivative w.r.t. the logit.
/// The derivative is zero where the clamp is active.
pub fn cross_entropy_logit(y: f64, logit: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    let loss = cross_entropy(y, p);
    let grad = if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
        0.0
    } else {
        p - y
    };
    (loss, grad)
}

/// `sum_m beta_m * sum_k CE(y[k][m], y_hat[k][m])`
pub fn rat_loss(y_hat: &[Vec<f64>], y: &[Vec<u8>], beta: &[f64]) -> f64 {
    y_hat
        .iter()
        .zip(y)
        .map(|(pred, label)| {
            pred.iter()
                .zip(label)
                .zip(beta)
                .map(|((&p, &l), &b)| b * cross_entropy(f64::from(l), p))
                .sum::<f64>()
        })
        .sum()
}

/// Reconstruction loss on raw logits (row-major `K x M`) with the logit gradient.
pub fn rat_loss_logits(logits: &[f64], y: &[Vec<u8>], beta: &[f64]) -> (f64, Vec<f64>) {
    let m = beta.len();
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for (k, labels) in y.iter().enumerate() {
        for (f, &label) in labels.iter().enumerate() {
            let (l, g) = cross_entropy_logit(f64::from(label), logits[k * m + f]);
            loss += beta[f] * l;
            grad[k * m + f] = beta[f] * g;
        }
    }
    (loss, grad)
}

/// `sum_k CE(z_k, z_hat_k) + CE(p, p_hat)`
pub fn pat_loss(z_hat: &[f64], z: &[u8], p_hat: f64, p: u8) -> f64 {
    z_hat
        .iter()
        .zip(z)
        .map(|(&zh, &zk)| cross_entropy(f64::from(zk), zh))
        .sum::<f64>()
        + cross_entropy(f64::from(p), p_hat)
}

/// Prediction loss on click logits and the pull-down logit, with gradients.
pub fn pat_loss_logits(
    click_logits: &[f64],
    z: &[u8],
    pull_logit: f64,
    p: u8,
) -> (f64, Vec<f64>, f64) {
    let mut loss = 0.0;
    let grad = click_logits
        .iter()
        .zip(z)
        .map(|(&l, &zk)| {
            let (ce, g) = cross_entropy_logit(f64::from(zk), l);
            loss += ce;
            g
        })
        .collect();
    let (ce, g_pull) = cross_entropy_logit(f64::from(p), pull_logit);
    (loss + ce, grad, g_pull)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> f64 {
    dot(u, v) / (norm(u) * norm(v)).max(COSINE_EPS)
}

/// Cosine similarity and its gradients w.r.t. `u` and `v`.
pub fn cosine_similarity_grad(u: &[f64], v: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (nu, nv) = (norm(u), norm(v));
    let den = nu * nv;
    let uv = dot(u, v);
    if den <= COSINE_EPS {
        let s = uv / COSINE_EPS;
        let du = v.iter().map(|x| x / COSINE_EPS).collect();
        let dv = u.iter().map(|x| x / COSINE_EPS).collect();
        return (s, du, dv);
    }
    let s = uv / den;
    let du = u
        .iter()
        .zip(v)
        .map(|(a, b)| b / den - s * a / (nu * nu))
        .collect();
    let dv = u
        .iter()
        .zip(v)
        .map(|(a, b)| a / den - s * b / (nv * nv))
        .collect();
    (s, du, dv)
}

/// InfoNCE with cosine similarity: `-log softmax` of the positive among the
/// positive and negatives, with logits `s / temperature`.
pub fn clat_loss(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], temperature: f64) -> f64 {
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(cosine_similarity(anchor, positive) / temperature);
    logits.extend(
        negatives
            .iter()
            .map(|n| cosine_similarity(anchor, n) / temperature),
    );
    log_sum_exp(&logits) - logits[0]
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Gradients of [`clat_loss`] w.r.t. every input vector.
pub struct ClatGrad {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

pub fn clat_loss_grad(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    temperature: f64,
) -> ClatGrad {
    let mut sims = Vec::with_capacity(negatives.len() + 1);
    sims.push(cosine_similarity_grad(anchor, positive));
    for n in negatives {
        sims.push(cosine_similarity_grad(anchor, n));
    }
    let logits: Vec<f64> = sims.iter().map(|(s, _, _)| s / temperature).collect();
    let lse = log_sum_exp(&logits);
    let loss = lse - logits[0];
    let mut d_anchor = vec![0.0; anchor.len()];
    let mut others = Vec::with_capacity(sims.len());
    for (i, (_, du, dv)) in sims.into_iter().enumerate() {
        let softmax = (logits[i] - lse).exp();
        let d_logit = (softmax - if i == 0 { 1.0 } else { 0.0 }) / temperature;
        for (a, g) in d_anchor.iter_mut().zip(&du) {
            *a += d_logit * g;
        }
        others.push(dv.into_iter().map(|g| d_logit * g).collect::<Vec<f64>>());
    }
    let positive_grad = others.remove(0);
    ClatGrad {
        loss,
        anchor: d_anchor,
        positive: positive_grad,
        negatives: others,
    }
}

fn head_probs(mlp: &crate::agent::Mlp, e_list: &[f64]) -> Vec<f64> {
    let x = Array2::from_shape_vec((1, e_list.len()), e_list.to_vec()).expect("row vector");
    mlp.forward(&x)
        .row(0)
        .iter()
        .map(|&l| clamp_prob(sigmoid(l)))
        .collect()
}

/// MLP3 output reshaped to `K x M` probabilities.
pub fn rat_predict(e_list: &[f64], params: &ModelParams) -> Vec<Vec<f64>> {
    let m = params.config.num_factors;
    head_probs(&params.rat_head, e_list)
        .chunks(m)
        .map(<[f64]>::to_vec)
        .collect()
}

/// Per-slot click probabilities (MLP4) and the pull-down probability (MLP5).
pub fn pat_predict(e_list: &[f64], params: &ModelParams) -> (Vec<f64>, f64) {
    let z = head_probs(&params.ctr_head, e_list);
    let p = head_probs(&params.pull_head, e_list)[0];
    (z, p)
}

pub fn aux_outputs(e_list: &[f64], params: &ModelParams) -> AuxOutputs {
    let (z_hat, p_hat) = pat_predict(e_list, params);
    AuxOutputs {
        y_hat: rat_predict(e_list, params),
        z_hat,
        p_hat,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TOL: f64 = 1e-6;

    #[test]
    fn cross_entropy_examples() {
        assert!(cross_entropy(1.0, 1.0 - PROB_EPS) < 1e-6);
        assert!((cross_entropy(1.0, 0.5) - 0.693147).abs() < TOL);
        assert!((cross_entropy(0.0, 0.9) - 2.302585).abs() < TOL);
        assert!(cross_entropy(1.0, 0.0).is_finite());
    }

    #[test]
    fn rat_loss_examples() {
        let y = vec![vec![1u8, 0], vec![0, 1]];
        let perfect = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(rat_loss(&perfect, &y, &[0.5, 0.5]) < 1e-6);
        let half = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let beta = [0.7, 0.2];
        let expected = 0.9 * 2.0 * std::f64::consts::LN_2;
        assert!((rat_loss(&half, &y, &beta) - expected).abs() < 1e-12);
        let got = rat_loss(&[vec![0.8], vec![0.3]], &[vec![1], vec![0]], &[1.0]);
        assert!((got - 0.579818).abs() < TOL);
    }

    #[test]
    fn pat_loss_examples() {
        assert!(pat_loss(&[1.0, 0.0, 1.0], &[1, 0, 1], 1.0, 1) < 1e-5);
        let expected = 4.0 * std::f64::consts::LN_2;
        assert!((pat_loss(&[0.5; 3], &[1, 0, 1], 0.5, 0) - expected).abs() < 1e-12);
        let got = pat_loss(&[0.9, 0.2], &[1, 0], 0.6, 1);
        assert!((got - 0.839329).abs() < TOL);
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine_similarity(&v, &v) - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&v, &neg) + 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]).abs() < 1e-9);
    }

    #[test]
    fn clat_examples() {
        let a = [1.0, 2.0];
        let negs: Vec<&[f64]> = vec![&a; 9];
        assert!((clat_loss(&a, &a, &negs, 1.0) - 10f64.ln()).abs() < TOL);
        let neg = [-1.0, -2.0];
        let got = clat_loss(&a, &a, &[&neg], 1.0);
        assert!((got - 0.126928).abs() < TOL);
    }

    #[test]
    fn logit_helpers_match_probability_forms() {
        let logits = [0.3, -1.1, 2.5, 0.0];
        let y = vec![vec![1u8, 0], vec![0, 1]];
        let beta = [0.6, 0.4];
        let probs: Vec<Vec<f64>> = logits
            .chunks(2)
            .map(|c| c.iter().map(|&l| sigmoid(l)).collect())
            .collect();
        let (l, _) = rat_loss_logits(&logits, &y, &beta);
        assert!((l - rat_loss(&probs, &y, &beta)).abs() < 1e-12);
        let (l, _, _) = pat_loss_logits(&logits[..3], &[1, 0, 0], logits[3], 1);
        let z: Vec<f64> = logits[..3].iter().map(|&x| sigmoid(x)).collect();
        assert!((l - pat_loss(&z, &[1, 0, 0], 0.5, 1)).abs() < 1e-12);
    }

    #[test]
    fn clat_grad_matches_finite_differences() {
        let a = vec![0.4, -0.3, 1.1];
        let p = vec![0.5, 0.1, 0.9];
        let n1 = vec![-0.7, 0.2, 0.3];
        let n2 = vec![0.1, 1.5, -0.4];
        let tau = 0.7;
        let g = clat_loss_grad(&a, &p, &[&n1, &n2], tau);
        let f = |a: &[f64], p: &[f64], n1: &[f64], n2: &[f64]| clat_loss(a, p, &[n1, n2], tau);
        let h = 1e-6;
        for i in 0..3 {
            let bump = |v: &Vec<f64>, d: f64| {
                let mut w = v.clone();
                w[i] += d;
                w
            };
            let fd = (f(&bump(&a, h), &p, &n1, &n2) - f(&bump(&a, -h), &p, &n1, &n2)) / (2.0 * h);
            assert!((fd - g.anchor[i]).abs() < 1e-7);
            let fd = (f(&a, &bump(&p, h), &n1, &n2) - f(&a, &bump(&p, -h), &n1, &n2)) / (2.0 * h);
            assert!((fd - g.positive[i]).abs() < 1e-7);
            let fd = (f(&a, &p, &n1, &bump(&n2, h)) - f(&a, &p, &n1, &bump(&n2, -h))) / (2.0 * h);
            assert!((fd - g.negatives[1][i]).abs() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn clat_is_scale_invariant(
            a in prop::collection::vec(-2.0f64..2.0, 4),
            p in prop::collection::vec(-2.0f64..2.0, 4),
            n in prop::collection::vec(-2.0f64..2.0, 4),
            scale in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&a) > 1e-3 && norm(&p) > 1e-3 && norm(&n) > 1e-3);
            let base = clat_loss(&a, &p, &[&n], 1.0);
            let sc = |v: &[f64]| v.iter().map(|x| x * scale).collect::<Vec<_>>();
            let scaled = clat_loss(&sc(&a), &sc(&p), &[&sc(&n)], 1.0);
            prop_assert!((base - scaled).abs() < 1e-9);
            prop_assert!(base > 0.0);
        }

        #[test]
        fn clat_decreases_as_positive_aligns(
            n in prop::collection::vec(-2.0f64..2.0, 3),
        ) {
            prop_assume!(norm(&n) > 1e-2);
            let a = [1.0, 0.0, 0.0];
            // cos(a, p) = cos(theta) rises as theta goes from pi to 0
            let mut prev = f64::INFINITY;
            for step in 0..=20 {
                let theta = std::f64::consts::PI * (1.0 - step as f64 / 20.0);
                let p = [theta.cos(), theta.sin(), 0.0];
                let l = clat_loss(&a, &p, &[&n], 1.0);
                prop_assert!(l > 0.0);
                prop_assert!(l < prev);
                prev = l;
            }
        }

        #[test]
        fn losses_are_nonnegative(
            probs in prop::collection::vec(0.0f64..=1.0, 6),
            labels in prop::collection::vec(0u8..=1, 6),
        ) {
            let y_hat: Vec<Vec<f64>> = probs.chunks(2).map(<[f64]>::to_vec).collect();
            let y: Vec<Vec<u8>> = labels.chunks(2).map(<[u8]>::to_vec).collect();
            prop_assert!(rat_loss(&y_hat, &y, &[0.5, 0.5]) >= 0.0);
            prop_assert!(pat_loss(&probs[..5], &labels[..5], probs[5], labels[5]) >= 0.0);
        }
    }
}
