//! Loss terms: bidirectional triplet retrieval loss, latent KL terms, the
//! modality-consistency KL and the Pearson reconstruction loss.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::latent::{kl_rows, GaussianVars};
use crate::nn::{Init, Linear};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mining {
    /// Most violating in-batch negative per anchor.
    Hardest,
    /// Average over all in-batch negatives.
    Mean,
}

pub fn cosine_sim<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_sim", a.len(), b.len()));
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == T::zero() || nb == T::zero() {
        return Err(Error::ZeroNorm);
    }
    Ok(a.dot(&b) / (na * nb))
}

/// `max(0, s(a, n) − s(a, p) + margin)`.
pub fn triplet_loss<T: Scalar>(
    anchor: ArrayView1<T>,
    positive: ArrayView1<T>,
    negative: ArrayView1<T>,
    margin: T,
) -> Result<T> {
    let v = cosine_sim(anchor, negative)? - cosine_sim(anchor, positive)? + margin;
    Ok(v.max(T::zero()))
}

/// One direction of the retrieval loss over a `B × B` similarity matrix whose
/// rows are anchors and whose diagonal holds the positives.
fn directional<T: Scalar>(g: &mut Graph<T>, sims: Var, margin: T, mining: Mining) -> Var {
    let b = g.shape(sims).0;
    let eye = g.constant(Array2::eye(b));
    let off = g.constant(Array2::from_shape_fn((b, b), |(i, j)| {
        if i == j {
            T::zero()
        } else {
            T::one()
        }
    }));
    let diag = g.mul(sims, eye);
    let pos = g.sum_rows(diag);
    let neg_pos = g.neg(pos);
    let viol = g.add_col(sims, neg_pos);
    let viol = g.add_scalar(viol, margin);
    let viol = g.relu(viol);
    let viol = g.mul(viol, off);
    match mining {
        Mining::Hardest => {
            let worst = g.row_max(viol);
            g.mean_all(worst)
        }
        Mining::Mean => {
            let total = g.sum_all(viol);
            g.scale(total, T::of(1.0 / (b * (b - 1)) as f64))
        }
    }
}

/// Image→recipe plus recipe→image triplet loss over in-batch negatives.
pub fn retrieval_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    e_v: Var,
    e_r: Var,
    margin: T,
    mining: Mining,
) -> Result<Var> {
    let (b, d) = g.shape(e_v);
    if g.shape(e_r) != (b, d) {
        return Err(Error::shape(
            "retrieval_loss",
            format!("({b}, {d})"),
            format!("{:?}", g.shape(e_r)),
        ));
    }
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let nv = g.normalize_rows(e_v);
    let nr = g.normalize_rows(e_r);
    let nrt = g.transpose(nr);
    let sims = g.matmul(nv, nrt);
    let im2rec = directional(g, sims, margin, mining);
    let simt = g.transpose(sims);
    let rec2im = directional(g, simt, margin, mining);
    Ok(g.add(im2rec, rec2im))
}

pub fn retrieval_loss<T: Scalar>(
    e_v: ArrayView2<T>,
    e_r: ArrayView2<T>,
    margin: T,
    mining: Mining,
) -> Result<T> {
    for row in e_v.outer_iter().chain(e_r.outer_iter()) {
        if row.dot(&row) == T::zero() {
            return Err(Error::ZeroNorm);
        }
    }
    let mut g = Graph::inference();
    let a = g.constant(e_v.to_owned());
    let b = g.constant(e_r.to_owned());
    let l = retrieval_loss_graph(&mut g, a, b, margin, mining)?;
    Ok(g.value(l)[[0, 0]])
}

/// Batch mean of `KL(q ‖ p)`.
pub fn kl_mean<T: Scalar>(g: &mut Graph<T>, q: GaussianVars, p: GaussianVars) -> Var {
    let rows = kl_rows(g, q, p);
    g.mean_all(rows)
}

/// Sum of the per-side batch-mean KL terms of whichever sides are latent.
pub fn kl_loss<T: Scalar>(
    g: &mut Graph<T>,
    image: Option<(GaussianVars, GaussianVars)>,
    recipe: Option<(GaussianVars, GaussianVars)>,
) -> Var {
    let terms: Vec<Var> = [image, recipe]
        .into_iter()
        .flatten()
        .map(|(q, p)| kl_mean(g, q, p))
        .collect();
    match terms.as_slice() {
        [] => g.scalar(T::zero()),
        [a] => *a,
        [a, b] => g.add(*a, *b),
        _ => unreachable!(),
    }
}

/// Batch mean of `KL(p_v ‖ p_r)`, in that single direction.
pub fn consistency_loss<T: Scalar>(g: &mut Graph<T>, p_v: GaussianVars, p_r: GaussianVars) -> Var {
    kl_mean(g, p_v, p_r)
}

/// Sample correlation across the coordinates of two vectors.
pub fn pearson<T: Scalar>(x: ArrayView1<T>, y: ArrayView1<T>) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::shape("pearson", x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument(
            "pearson needs at least 2 coordinates".into(),
        ));
    }
    let n = T::of(x.len() as f64);
    let mx = x.sum() / n;
    let my = y.sum() / n;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (a, b) in x.iter().zip(y.iter()) {
        let (da, db) = (*a - mx, *b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == T::zero() || syy == T::zero() {
        return Err(Error::ZeroVariance);
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Per-row Pearson correlation of two `B × d` matrices, as `B × 1`.
pub fn pearson_rows<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let ca = g.center_rows(a);
    let cb = g.center_rows(b);
    let na = g.normalize_rows(ca);
    let nb = g.normalize_rows(cb);
    let prod = g.mul(na, nb);
    g.sum_rows(prod)
}

/// Two-layer maps from embeddings back to the other modality's representation.
#[derive(Debug, Clone)]
pub struct ReconHeads {
    /// image embedding → recipe representation
    pub to_recipe: (Linear, Linear),
    /// recipe embedding → image representation
    pub to_image: (Linear, Linear),
}

impl ReconHeads {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        embed_dim: usize,
        hidden: usize,
        recipe_dim: usize,
        image_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut two = |name: &str, out: usize| {
            (
                Linear::new(
                    store,
                    &format!("recon.{name}.l1"),
                    embed_dim,
                    hidden,
                    Init::Xavier,
                    rng,
                ),
                Linear::new(
                    store,
                    &format!("recon.{name}.l2"),
                    hidden,
                    out,
                    Init::Xavier,
                    rng,
                ),
            )
        };
        ReconHeads {
            to_recipe: two("to_recipe", recipe_dim),
            to_image: two("to_image", image_dim),
        }
    }

    fn apply<T: Scalar>(
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        net: &(Linear, Linear),
        x: Var,
    ) -> Var {
        let h = net.0.forward(g, store, x);
        let h = g.tanh(h);
        net.1.forward(g, store, h)
    }

    /// `mean(1 − P(f_r(e_v), s_r)) + mean(1 − P(f_v(e_r), s_v))`.
    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        e_v: Var,
        e_r: Var,
        s_v: Var,
        s_r: Var,
    ) -> Var {
        let s_r_hat = Self::apply(g, store, &self.to_recipe, e_v);
        let s_v_hat = Self::apply(g, store, &self.to_image, e_r);
        reconstruction_loss_graph(g, s_r_hat, s_r, s_v_hat, s_v)
    }
}

pub fn reconstruction_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    s_r_hat: Var,
    s_r: Var,
    s_v_hat: Var,
    s_v: Var,
) -> Var {
    let side = |g: &mut Graph<T>, a: Var, b: Var| {
        let p = pearson_rows(g, a, b);
        let m = g.mean_all(p);
        let n = g.neg(m);
        g.add_scalar(n, T::one())
    };
    let r = side(g, s_r_hat, s_r);
    let v = side(g, s_v_hat, s_v);
    g.add(r, v)
}

/// `(1 − P(s_r', s_r)) + (1 − P(s_v', s_v))` for one pair of reconstructions.
pub fn reconstruction_loss<T: Scalar>(
    s_r_hat: ArrayView1<T>,
    s_r: ArrayView1<T>,
    s_v_hat: ArrayView1<T>,
    s_v: ArrayView1<T>,
) -> Result<T> {
    Ok(T::of(2.0) - pearson(s_r_hat, s_r)? - pearson(s_v_hat, s_v)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ret: f64,
    pub l_kl: f64,
    pub l_cos: f64,
    pub l_rec: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub total: f64,
}

/// `l_ret + α·l_kl + β·l_cos + γ·l_rec`.
pub fn total_loss(
    l_ret: f64,
    l_kl: f64,
    l_cos: f64,
    l_rec: f64,
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> LossBreakdown {
    LossBreakdown {
        l_ret,
        l_kl,
        l_cos,
        l_rec,
        alpha,
        beta,
        gamma,
        total: l_ret + alpha * l_kl + beta * l_cos + gamma * l_rec,
    }
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_ret, self.l_kl, self.l_cos, self.l_rec, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_matrix;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_examples() {
        let a: Array1<f64> = array![1.0, 2.0, -0.5];
        assert!((cosine_sim(a.view(), a.view()).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(
            cosine_sim(array![1.0, 0.0].view(), array![0.0, 3.0].view()).unwrap(),
            0.0
        );
        let neg = -&a;
        assert!((cosine_sim(a.view(), neg.view()).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            cosine_sim(array![0.0, 0.0].view(), a.slice(ndarray::s![..2])),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn triplet_examples() {
        let a: Array1<f64> = array![1.0, 0.0];
        let p = array![1.0, 0.0];
        let n = array![0.0, 1.0];
        assert_eq!(
            triplet_loss(a.view(), p.view(), n.view(), 0.3).unwrap(),
            0.0
        );
        assert!((triplet_loss(a.view(), n.view(), n.view(), 0.3).unwrap() - 0.3).abs() < 1e-15);
        let p = array![0.0, 1.0];
        let n = array![1.0, 0.0];
        assert!((triplet_loss(a.view(), p.view(), n.view(), 0.3).unwrap() - 1.3).abs() < 1e-15);
    }

    #[test]
    fn retrieval_examples() {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        for mining in [Mining::Hardest, Mining::Mean] {
            assert_eq!(
                retrieval_loss(e.view(), e.view(), 0.3, mining).unwrap(),
                0.0
            );
        }
        let same: Array2<f64> = array![[0.3, 0.4], [0.3, 0.4], [0.3, 0.4]];
        for mining in [Mining::Hardest, Mining::Mean] {
            let l = retrieval_loss(same.view(), same.view(), 0.3, mining).unwrap();
            assert!((l - 0.6).abs() < 1e-12, "{l}");
        }
        let one = array![[1.0, 0.0]];
        assert!(matches!(
            retrieval_loss(one.view(), one.view(), 0.3, Mining::Hardest),
            Err(Error::BatchTooSmall(1))
        ));
    }

    /// All `2·B·(B−1)` triplets enumerated one by one.
    fn brute_force_mean(ev: &Array2<f64>, er: &Array2<f64>, m: f64) -> f64 {
        let b = ev.nrows();
        let mut i2r = 0.0;
        let mut r2i = 0.0;
        for i in 0..b {
            for j in 0..b {
                if i != j {
                    i2r += triplet_loss(ev.row(i), er.row(i), er.row(j), m).unwrap();
                    r2i += triplet_loss(er.row(i), ev.row(i), ev.row(j), m).unwrap();
                }
            }
        }
        let n = (b * (b - 1)) as f64;
        i2r / n + r2i / n
    }

    fn brute_force_hardest(ev: &Array2<f64>, er: &Array2<f64>, m: f64) -> f64 {
        let b = ev.nrows();
        let mut total = 0.0;
        for i in 0..b {
            let worst = |anchor: &Array2<f64>, cands: &Array2<f64>| {
                (0..b)
                    .filter(|j| *j != i)
                    .map(|j| triplet_loss(anchor.row(i), cands.row(i), cands.row(j), m).unwrap())
                    .fold(0.0, f64::max)
            };
            total += worst(ev, er) + worst(er, ev);
        }
        total / b as f64
    }

    #[test]
    fn mining_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for b in 2..=5 {
            for _ in 0..5 {
                let ev = random_matrix(b, 6, 1.0, &mut rng);
                let er = random_matrix(b, 6, 1.0, &mut rng);
                let mean = retrieval_loss(ev.view(), er.view(), 0.3, Mining::Mean).unwrap();
                assert!((mean - brute_force_mean(&ev, &er, 0.3)).abs() < 1e-12);
                let hard = retrieval_loss(ev.view(), er.view(), 0.3, Mining::Hardest).unwrap();
                assert!((hard - brute_force_hardest(&ev, &er, 0.3)).abs() < 1e-12);
            }
        }
    }

    fn gauss(g: &mut Graph<f64>, mu: Array2<f64>, sigma: Array2<f64>) -> GaussianVars {
        GaussianVars {
            mu: g.constant(mu),
            sigma: g.constant(sigma),
        }
    }

    #[test]
    fn kl_loss_examples() {
        let mut g = Graph::inference();
        let p = gauss(&mut g, array![[0.0]], array![[1.0]]);
        let q = gauss(&mut g, array![[1.0]], array![[1.0]]);
        let zero = kl_loss(&mut g, Some((p, p)), Some((q, q)));
        assert_eq!(g.value(zero)[[0, 0]], 0.0);
        let one_sided = kl_loss(&mut g, Some((p, p)), Some((q, p)));
        assert!((g.value(one_sided)[[0, 0]] - 0.5).abs() < 1e-15);
        let c = consistency_loss(&mut g, q, p);
        assert!((g.value(c)[[0, 0]] - 0.5).abs() < 1e-15);
        let same = consistency_loss(&mut g, p, p);
        assert_eq!(g.value(same)[[0, 0]], 0.0);
    }

    #[test]
    fn kl_loss_averages_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut g = Graph::inference();
        let mut mk = |g: &mut Graph<f64>| {
            gauss(
                g,
                random_matrix(3, 4, 1.0, &mut rng),
                random_matrix(3, 4, 1.0, &mut rng).mapv(|v| v.abs() + 0.1),
            )
        };
        let (qv, pv, qr, pr) = (mk(&mut g), mk(&mut g), mk(&mut g), mk(&mut g));
        let l = kl_loss(&mut g, Some((qv, pv)), Some((qr, pr)));
        let mut expected = 0.0;
        for r in 0..3 {
            expected += crate::latent::kl_diag(&qv.row(&g, r), &pv.row(&g, r)).unwrap() / 3.0;
            expected += crate::latent::kl_diag(&qr.row(&g, r), &pr.row(&g, r)).unwrap() / 3.0;
        }
        assert!((g.value(l)[[0, 0]] - expected).abs() < 1e-12);
        let a = consistency_loss(&mut g, pv, pr);
        let b = consistency_loss(&mut g, pr, pv);
        assert!((g.value(a)[[0, 0]] - g.value(b)[[0, 0]]).abs() > 1e-6);
    }

    #[test]
    fn pearson_examples() {
        let x: Array1<f64> = array![1.0, 2.0, 3.0];
        assert!((pearson(x.view(), x.view()).unwrap() - 1.0).abs() < 1e-15);
        let y = x.mapv(|v| 2.5 * v - 7.0);
        assert!((pearson(x.view(), y.view()).unwrap() - 1.0).abs() < 1e-15);
        let expected = 9.0 / (2.0 * 21f64.sqrt());
        assert!(
            (pearson(x.view(), array![1.0, 2.0, 4.0].view()).unwrap() - expected).abs() < 1e-12
        );
        assert!(matches!(
            pearson(x.view(), array![2.0, 2.0, 2.0].view()),
            Err(Error::ZeroVariance)
        ));
        assert!(pearson(array![1.0].view(), array![1.0].view()).is_err());
    }

    #[test]
    fn reconstruction_examples() {
        let s: Array1<f64> = array![0.3, -1.0, 2.0, 0.5];
        let scaled = s.mapv(|v| 3.0 * v + 1.0);
        assert!(
            reconstruction_loss(scaled.view(), s.view(), scaled.view(), s.view())
                .unwrap()
                .abs()
                < 1e-12
        );
        let anti = s.mapv(|v| -v);
        assert!(
            (reconstruction_loss(anti.view(), s.view(), anti.view(), s.view()).unwrap() - 4.0)
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn total_examples() {
        let b = total_loss(1.5, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0);
        assert_eq!(b.total, 1.5);
        let b1 = total_loss(1.5, 2.0, 3.0, 4.0, 0.1, 0.002, 0.008);
        let b2 = total_loss(1.5, 2.0, 3.0, 4.0, 0.1, 0.002, 0.016);
        let rec1 = b1.total - (1.5 + 0.1 * 2.0 + 0.002 * 3.0);
        let rec2 = b2.total - (1.5 + 0.1 * 2.0 + 0.002 * 3.0);
        assert!((rec2 - 2.0 * rec1).abs() < 1e-15);
    }

    #[test]
    fn retrieval_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..5 {
            let inputs = vec![
                random_matrix(4, 5, 1.0, &mut rng),
                random_matrix(4, 5, 1.0, &mut rng),
            ];
            for mining in [Mining::Hardest, Mining::Mean] {
                crate::gradcheck::assert_grads_match(&inputs, |g, v| {
                    retrieval_loss_graph(g, v[0], v[1], 0.3, mining).unwrap()
                });
            }
            let inputs = vec![
                random_matrix(3, 6, 1.0, &mut rng),
                random_matrix(3, 6, 1.0, &mut rng),
                random_matrix(3, 4, 1.0, &mut rng),
                random_matrix(3, 4, 1.0, &mut rng),
            ];
            crate::gradcheck::assert_grads_match(&inputs, |g, v| {
                reconstruction_loss_graph(g, v[0], v[1], v[2], v[3])
            });
        }
    }

    proptest! {
        #[test]
        fn losses_are_nonnegative(seed in 0u64..500, b in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ev = random_matrix(b, 4, 1.0, &mut rng);
            let er = random_matrix(b, 4, 1.0, &mut rng);
            for mining in [Mining::Hardest, Mining::Mean] {
                prop_assert!(retrieval_loss(ev.view(), er.view(), 0.3, mining).unwrap() >= 0.0);
            }
            let r = reconstruction_loss(ev.row(0), er.row(0), ev.row(1), er.row(1)).unwrap();
            prop_assert!((-1e-12..=4.0 + 1e-12).contains(&r));
        }

        #[test]
        fn retrieval_is_scale_invariant(seed in 0u64..500, k in 0.01f64..100.0, row in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ev = random_matrix(4, 5, 1.0, &mut rng);
            let er = random_matrix(4, 5, 1.0, &mut rng);
            let mut scaled = ev.clone();
            scaled.row_mut(row).mapv_inplace(|v| v * k);
            for mining in [Mining::Hardest, Mining::Mean] {
                let a = retrieval_loss(ev.view(), er.view(), 0.3, mining).unwrap();
                let b = retrieval_loss(scaled.view(), er.view(), 0.3, mining).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
