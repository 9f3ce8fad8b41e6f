//! Cosine similarity and the two training objectives, with gradients with
//! respect to both embeddings of every pair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Margin and mining switch for the contrastive objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub margin: f64,
    pub hard_mining: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            margin: 0.5,
            hard_mining: true,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0 && self.margin <= 1.0) {
            return Err(Error::Config(format!("margin {} outside (0, 1]", self.margin)));
        }
        Ok(())
    }
}

/// Affine map of cosine into (ε, 1 − ε) so that both logs of the
/// cross-entropy stay finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRemap {
    pub epsilon: f64,
}

impl Default for SimilarityRemap {
    fn default() -> Self {
        Self { epsilon: 1e-7 }
    }
}

impl SimilarityRemap {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Config(format!("epsilon {} outside (0, 0.5)", self.epsilon)));
        }
        Ok(())
    }

    /// Returns the remapped similarity and its derivative w.r.t. cosine
    /// (zero where the clamp is active).
    fn apply(&self, cos: f64) -> (f64, f64) {
        let raw = 0.5 * (1.0 + cos);
        if raw < self.epsilon {
            (self.epsilon, 0.0)
        } else if raw > 1.0 - self.epsilon {
            (1.0 - self.epsilon, 0.0)
        } else {
            (raw, 0.5)
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    Ok(cosine_with_grad(u, v)?.0)
}

/// Cosine plus ∂cos/∂u and ∂cos/∂v. The clamp to [-1, 1] is treated as
/// the identity for differentiation.
pub fn cosine_with_grad(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch(format!(
            "vectors of length {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 || !nu.is_finite() || !nv.is_finite() {
        return Err(Error::ZeroNorm);
    }
    let raw = dot(u, v) / (nu * nv);
    let inv = 1.0 / (nu * nv);
    let gu = u
        .iter()
        .zip(v)
        .map(|(&ui, &vi)| vi * inv - raw * ui / (nu * nu))
        .collect();
    let gv = u
        .iter()
        .zip(v)
        .map(|(&ui, &vi)| ui * inv - raw * vi / (nv * nv))
        .collect();
    Ok((raw.clamp(-1.0, 1.0), gu, gv))
}

/// Batch loss and its gradients w.r.t. the first and second embedding of
/// each pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_a: Vec<Vec<f64>>,
    pub grad_b: Vec<Vec<f64>>,
    /// Pairs (or pair terms) that contributed to the loss.
    pub kept: usize,
}

impl LossOutput {
    fn zeros(pairs: usize, d: usize) -> Self {
        Self {
            loss: 0.0,
            grad_a: vec![vec![0.0; d]; pairs],
            grad_b: vec![vec![0.0; d]; pairs],
            kept: 0,
        }
    }
}

/// `(u, v, label)` with label in {0, 1}.
pub type LabeledPair<'a> = (&'a [f64], &'a [f64], u8);

/// Mean of ½[Y·(1−D)² + (1−Y)·max(0, m − (1−D))²] over the kept pairs,
/// D = cosine. With hard mining, negatives closer than the farthest
/// positive and positives farther than the closest negative are kept.
pub fn contrastive_loss(pairs: &[LabeledPair<'_>], cfg: &ContrastiveConfig) -> Result<LossOutput> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let d = pairs[0].0.len();
    let mut sims = Vec::with_capacity(pairs.len());
    for &(u, v, y) in pairs {
        if y > 1 {
            return Err(Error::InvalidLabel(y));
        }
        if u.len() != d || v.len() != d {
            return Err(Error::ShapeMismatch("pairs have inconsistent embedding widths".into()));
        }
        sims.push(cosine_with_grad(u, v)?);
    }

    let dist = |i: usize| 1.0 - sims[i].0;
    let mut keep = vec![true; pairs.len()];
    if cfg.hard_mining {
        let pos_max = (0..pairs.len()).filter(|&i| pairs[i].2 == 1).map(dist).reduce(f64::max);
        let neg_min = (0..pairs.len()).filter(|&i| pairs[i].2 == 0).map(dist).reduce(f64::min);
        for (i, k) in keep.iter_mut().enumerate() {
            *k = match pairs[i].2 {
                1 => neg_min.is_none_or(|m| dist(i) > m),
                _ => pos_max.is_none_or(|m| dist(i) < m),
            };
        }
    }

    let mut out = LossOutput::zeros(pairs.len(), d);
    let kept = keep.iter().filter(|&&k| k).count();
    if kept == 0 {
        return Ok(out);
    }
    let scale = 1.0 / kept as f64;
    let mut total = 0.0;
    for (i, (cos, gu, gv)) in sims.iter().enumerate() {
        if !keep[i] {
            continue;
        }
        // dL/dcos for this pair
        let dl_dcos = if pairs[i].2 == 1 {
            let dd = 1.0 - cos;
            total += 0.5 * dd * dd;
            -dd
        } else {
            let hinge = cfg.margin - (1.0 - cos);
            if hinge > 0.0 {
                total += 0.5 * hinge * hinge;
                hinge
            } else {
                0.0
            }
        };
        let w = dl_dcos * scale;
        out.grad_a[i].iter_mut().zip(gu).for_each(|(g, x)| *g = w * x);
        out.grad_b[i].iter_mut().zip(gv).for_each(|(g, x)| *g = w * x);
    }
    out.loss = total * scale;
    out.kept = kept;
    Ok(out)
}

/// Binary cross-entropy over every (u_i, v_j) in the batch, with the pair
/// labeled positive iff i = j, averaged over all B² terms.
pub fn multiple_negatives_loss(pairs: &[(&[f64], &[f64])], remap: &SimilarityRemap) -> Result<LossOutput> {
    remap.validate()?;
    let b = pairs.len();
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let d = pairs[0].0.len();
    if pairs.iter().any(|(u, v)| u.len() != d || v.len() != d) {
        return Err(Error::ShapeMismatch("pairs have inconsistent embedding widths".into()));
    }
    let mut out = LossOutput::zeros(b, d);
    let scale = 1.0 / (b * b) as f64;
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..b {
            let (cos, gu, gv) = cosine_with_grad(pairs[i].0, pairs[j].1)?;
            let (s, ds_dcos) = remap.apply(cos);
            let dl_ds = if i == j {
                total -= s.ln();
                -1.0 / s
            } else {
                total -= (1.0 - s).ln();
                1.0 / (1.0 - s)
            };
            let w = dl_ds * ds_dcos * scale;
            if w != 0.0 {
                out.grad_a[i].iter_mut().zip(&gu).for_each(|(g, x)| *g += w * x);
                out.grad_b[j].iter_mut().zip(&gv).for_each(|(g, x)| *g += w * x);
            }
        }
    }
    out.loss = total * scale;
    out.kept = b * b;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Unit vector in the plane at the given cosine to (1, 0).
    fn at_cos(c: f64) -> Vec<f64> {
        vec![c, (1.0 - c * c).max(0.0).sqrt()]
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[0.3, -2.0], &[0.3, -2.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap(),
            0.7071067811865475,
            epsilon = 1e-15
        );
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm)));
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn contrastive_examples() {
        let e1 = [1.0, 0.0];
        let cfg = ContrastiveConfig::default();
        let l = contrastive_loss(&[(&e1, &e1, 1)], &cfg).unwrap();
        assert_abs_diff_eq!(l.loss, 0.0, epsilon = 1e-12);

        let v = at_cos(0.2);
        assert_abs_diff_eq!(
            contrastive_loss(&[(&e1, &v, 0)], &cfg).unwrap().loss,
            0.0,
            epsilon = 1e-12
        );
        let v = at_cos(0.9);
        assert_abs_diff_eq!(
            contrastive_loss(&[(&e1, &v, 0)], &cfg).unwrap().loss,
            0.08,
            epsilon = 1e-12
        );
        let v = at_cos(0.5);
        assert_abs_diff_eq!(
            contrastive_loss(&[(&e1, &v, 1)], &cfg).unwrap().loss,
            0.125,
            epsilon = 1e-12
        );
    }

    #[test]
    fn contrastive_rejects_bad_input() {
        let e = [1.0, 0.0];
        let cfg = ContrastiveConfig::default();
        assert!(matches!(
            contrastive_loss(&[(&e, &e, 2)], &cfg),
            Err(Error::InvalidLabel(2))
        ));
        assert!(matches!(contrastive_loss(&[], &cfg), Err(Error::EmptyBatch)));
        let bad = ContrastiveConfig {
            margin: 0.0,
            hard_mining: true,
        };
        assert!(contrastive_loss(&[(&e, &e, 1)], &bad).is_err());
    }

    #[test]
    fn hard_mining_keeps_only_overlap() {
        let e1 = [1.0, 0.0];
        let (p_close, p_far) = (at_cos(0.95), at_cos(0.3));
        let (n_close, n_far) = (at_cos(0.6), at_cos(-0.5));
        let batch = [
            (&e1[..], &p_close[..], 1),
            (&e1[..], &p_far[..], 1),
            (&e1[..], &n_close[..], 0),
            (&e1[..], &n_far[..], 0),
        ];
        let mined = contrastive_loss(&batch, &ContrastiveConfig::default()).unwrap();
        // positive distances {0.05, 0.7}, negative distances {0.4, 1.5}:
        // keep the far positive (0.7 > 0.4) and the close negative (0.4 < 0.7)
        assert_eq!(mined.kept, 2);
        let expected = 0.5 * (0.5 * 0.7f64.powi(2) + 0.5 * 0.1f64.powi(2));
        assert_abs_diff_eq!(mined.loss, expected, epsilon = 1e-12);
        assert!(mined.grad_a[0].iter().all(|&g| g == 0.0));
        assert!(mined.grad_a[3].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn nothing_kept_gives_zero_loss() {
        let e1 = [1.0, 0.0];
        let same = at_cos(0.5);
        let batch = [(&e1[..], &same[..], 1), (&e1[..], &same[..], 0)];
        let out = contrastive_loss(&batch, &ContrastiveConfig::default()).unwrap();
        assert_eq!(out.kept, 0);
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn multiple_negatives_examples() {
        let (e1, e2) = ([1.0, 0.0], [0.0, 1.0]);
        let batch = [(&e1[..], &e2[..]), (&e1[..], &e2[..])];
        let out = multiple_negatives_loss(&batch, &SimilarityRemap::default()).unwrap();
        assert_abs_diff_eq!(out.loss, std::f64::consts::LN_2, epsilon = 1e-12);

        let delta: f64 = 1e-9;
        let (u1, u2) = (vec![1.0, 0.0], vec![-1.0, 0.0]);
        let v1 = [(1.0 - delta), (1.0 - (1.0 - delta) * (1.0 - delta)).sqrt()];
        let v2: Vec<f64> = v1.iter().map(|x| -x).collect();
        let batch = [(&u1[..], &v1[..]), (&u2[..], &v2[..])];
        let out = multiple_negatives_loss(&batch, &SimilarityRemap::default()).unwrap();
        assert!(out.loss < 2e-7, "loss {}", out.loss);

        let one = [(&e1[..], &e2[..])];
        assert!(matches!(
            multiple_negatives_loss(&one, &SimilarityRemap::default()),
            Err(Error::BatchTooSmall(1))
        ));
    }

    fn random_vecs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    // Central differences on the embeddings themselves.
    fn check_fd<F: Fn(&[Vec<f64>], &[Vec<f64>]) -> f64>(
        us: &[Vec<f64>],
        vs: &[Vec<f64>],
        out: &LossOutput,
        f: F,
        tol: f64,
    ) {
        let h = 1e-6;
        for side in 0..2 {
            for i in 0..us.len() {
                for j in 0..us[0].len() {
                    let (mut up, mut vp) = (us.to_vec(), vs.to_vec());
                    let (mut um, mut vm) = (us.to_vec(), vs.to_vec());
                    if side == 0 {
                        up[i][j] += h;
                        um[i][j] -= h;
                    } else {
                        vp[i][j] += h;
                        vm[i][j] -= h;
                    }
                    let num = (f(&up, &vp) - f(&um, &vm)) / (2.0 * h);
                    let ana = if side == 0 { out.grad_a[i][j] } else { out.grad_b[i][j] };
                    let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                    assert!(rel < tol, "side {side} pair {i} dim {j}: analytic {ana} numeric {num}");
                }
            }
        }
    }

    #[test]
    fn multiple_negatives_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let us = random_vecs(&mut rng, 3, 5);
        let vs = random_vecs(&mut rng, 3, 5);
        let remap = SimilarityRemap::default();
        let eval = |us: &[Vec<f64>], vs: &[Vec<f64>]| {
            let b: Vec<(&[f64], &[f64])> = us.iter().zip(vs).map(|(u, v)| (&u[..], &v[..])).collect();
            multiple_negatives_loss(&b, &remap).unwrap().loss
        };
        let b: Vec<(&[f64], &[f64])> = us.iter().zip(&vs).map(|(u, v)| (&u[..], &v[..])).collect();
        let out = multiple_negatives_loss(&b, &remap).unwrap();
        check_fd(&us, &vs, &out, eval, 1e-6);
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let us = random_vecs(&mut rng, 6, 4);
        let vs = random_vecs(&mut rng, 6, 4);
        let labels = [1u8, 0, 1, 0, 1, 0];
        for hard in [false, true] {
            let cfg = ContrastiveConfig {
                margin: 0.5,
                hard_mining: hard,
            };
            let eval = |us: &[Vec<f64>], vs: &[Vec<f64>]| {
                let b: Vec<LabeledPair> = us
                    .iter()
                    .zip(vs)
                    .zip(labels)
                    .map(|((u, v), y)| (&u[..], &v[..], y))
                    .collect();
                contrastive_loss(&b, &cfg).unwrap().loss
            };
            let b: Vec<LabeledPair> = us
                .iter()
                .zip(&vs)
                .zip(labels)
                .map(|((u, v), y)| (&u[..], &v[..], y))
                .collect();
            let out = contrastive_loss(&b, &cfg).unwrap();
            check_fd(&us, &vs, &out, eval, 1e-6);
        }
    }

    fn plain_mean_oracle(pairs: &[(Vec<f64>, Vec<f64>, u8)], m: f64) -> f64 {
        let mut s = 0.0;
        for (u, v, y) in pairs {
            let c = dot(u, v) / (dot(u, u).sqrt() * dot(v, v).sqrt());
            let y = *y as f64;
            s += 0.5 * (y * (1.0 - c).powi(2) + (1.0 - y) * (m - (1.0 - c)).max(0.0).powi(2));
        }
        s / pairs.len() as f64
    }

    proptest! {
        #[test]
        fn cosine_is_scale_invariant(u in proptest::collection::vec(-4.0f64..4.0, 6), v in proptest::collection::vec(-4.0f64..4.0, 6), a in 0u32..6, b in 0u32..6) {
            prop_assume!(dot(&u, &u) > 1e-6 && dot(&v, &v) > 1e-6);
            // powers of two scale exactly
            let (sa, sb) = (2f64.powi(a as i32), 2f64.powi(b as i32 - 3));
            let us: Vec<f64> = u.iter().map(|x| x * sa).collect();
            let vs: Vec<f64> = v.iter().map(|x| x * sb).collect();
            prop_assert_eq!(cosine(&us, &vs).unwrap(), cosine(&u, &v).unwrap());
            prop_assert_eq!(cosine(&u, &v).unwrap(), cosine(&v, &u).unwrap());
        }

        #[test]
        fn contrastive_without_mining_is_plain_mean(seed in any::<u64>(), n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pairs: Vec<(Vec<f64>, Vec<f64>, u8)> = (0..n)
                .map(|_| {
                    let u = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let v = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                    (u, v, rng.random_range(0..2u8))
                })
                .collect();
            let b: Vec<LabeledPair> = pairs.iter().map(|(u, v, y)| (&u[..], &v[..], *y)).collect();
            let cfg = ContrastiveConfig { margin: 0.5, hard_mining: false };
            let out = contrastive_loss(&b, &cfg).unwrap();
            prop_assert!((out.loss - plain_mean_oracle(&pairs, 0.5)).abs() < 1e-12);
            prop_assert!(out.loss >= 0.0);
            let mined = contrastive_loss(&b, &ContrastiveConfig::default()).unwrap();
            prop_assert!(mined.loss >= 0.0);
            // swapping the two sides of every pair changes nothing
            let swapped: Vec<LabeledPair> = pairs.iter().map(|(u, v, y)| (&v[..], &u[..], *y)).collect();
            let sw = contrastive_loss(&swapped, &ContrastiveConfig::default()).unwrap();
            prop_assert!((sw.loss - mined.loss).abs() < 1e-12);
        }

        #[test]
        fn multiple_negatives_is_permutation_invariant(seed in any::<u64>(), n in 2usize..7) {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let us = random_vecs(&mut rng, n, 4);
            let vs = random_vecs(&mut rng, n, 4);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let a: Vec<(&[f64], &[f64])> = (0..n).map(|i| (&us[i][..], &vs[i][..])).collect();
            let b: Vec<(&[f64], &[f64])> = order.iter().map(|&i| (&us[i][..], &vs[i][..])).collect();
            let la = multiple_negatives_loss(&a, &SimilarityRemap::default()).unwrap().loss;
            let lb = multiple_negatives_loss(&b, &SimilarityRemap::default()).unwrap().loss;
            prop_assert!((la - lb).abs() < 1e-12);
        }
    }
}
