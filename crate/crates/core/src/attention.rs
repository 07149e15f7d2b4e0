//! Attention pooling: a softmax-weighted sum of context rows, each scored as
//! `vᵀ tanh(W·query + U·context)`.
//!
//! One primitive serves every pooling site: region pooling in the image
//! encoder, word and sentence pooling in the recipe encoder, the decoder's
//! ingredient attention and the image-side posterior.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Segments, Var};
use crate::params::{ParamId, ParamStore, SMALL_UNIFORM};
use crate::scalar::Scalar;

/// Plain values of one pooling site.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPoolParams<T> {
    /// `d_q × d_a`
    pub w: Array2<T>,
    /// `d_c × d_a`
    pub u: Array2<T>,
    /// `d_a`
    pub v: Array1<T>,
}

impl<T: Scalar> AttentionPoolParams<T> {
    pub fn zeros(query_dim: usize, context_dim: usize, attn_dim: usize) -> Self {
        AttentionPoolParams {
            w: Array2::zeros((query_dim, attn_dim)),
            u: Array2::zeros((context_dim, attn_dim)),
            v: Array1::zeros(attn_dim),
        }
    }

    pub fn query_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn context_dim(&self) -> usize {
        self.u.nrows()
    }
}

/// Handles of one pooling site inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AttentionPool {
    pub w: ParamId,
    pub u: ParamId,
    pub v: ParamId,
    pub query_dim: usize,
    pub context_dim: usize,
    pub attn_dim: usize,
}

/// Query supplied to a pooling call.
#[derive(Debug, Clone, Copy)]
pub enum Query {
    /// One `1 × d_q` query shared by every segment.
    Shared(Var),
    /// One query row per segment (`S × d_q`).
    PerSegment(Var),
}

#[derive(Debug, Clone, Copy)]
pub struct Pooled {
    /// `S × d_c`
    pub pooled: Var,
    /// `N × 1`, summing to one within each segment.
    pub weights: Var,
}

impl AttentionPool {
    /// Uniform `[-0.02, 0.02]` initialization.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        query_dim: usize,
        context_dim: usize,
        attn_dim: usize,
        rng: &mut R,
    ) -> Self {
        AttentionPool {
            w: store.uniform(format!("{name}.w"), query_dim, attn_dim, SMALL_UNIFORM, rng),
            u: store.uniform(
                format!("{name}.u"),
                context_dim,
                attn_dim,
                SMALL_UNIFORM,
                rng,
            ),
            v: store.uniform(format!("{name}.v"), attn_dim, 1, SMALL_UNIFORM, rng),
            query_dim,
            context_dim,
            attn_dim,
        }
    }

    pub fn from_params<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        params: &AttentionPoolParams<T>,
    ) -> Self {
        let attn_dim = params.v.len();
        AttentionPool {
            w: store.add(format!("{name}.w"), params.w.clone(), true),
            u: store.add(format!("{name}.u"), params.u.clone(), true),
            v: store.add(
                format!("{name}.v"),
                params
                    .v
                    .clone()
                    .into_shape_with_order((attn_dim, 1))
                    .unwrap(),
                true,
            ),
            query_dim: params.w.nrows(),
            context_dim: params.u.nrows(),
            attn_dim,
        }
    }

    pub fn params<T: Scalar>(&self, store: &ParamStore<T>) -> AttentionPoolParams<T> {
        AttentionPoolParams {
            w: store.value(self.w).clone(),
            u: store.value(self.u).clone(),
            v: store.value(self.v).column(0).to_owned(),
        }
    }

    /// Pool each segment of `contexts` (`N × d_c`).
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        query: Query,
        contexts: Var,
        segments: &Segments,
    ) -> Result<Pooled> {
        let (n, dc) = g.shape(contexts);
        if dc != self.context_dim {
            return Err(Error::shape("attention contexts", self.context_dim, dc));
        }
        if n != segments.total() {
            return Err(Error::shape("attention segments", n, segments.total()));
        }
        let w = g.param(store, self.w);
        let u = g.param(store, self.u);
        let v = g.param(store, self.v);
        let keys = g.matmul(contexts, u);
        let hidden = match query {
            Query::Shared(q) => {
                let qd = g.shape(q);
                if qd != (1, self.query_dim) {
                    return Err(Error::shape(
                        "attention query",
                        format!("(1, {})", self.query_dim),
                        format!("{qd:?}"),
                    ));
                }
                let qw = g.matmul(q, w);
                g.add_row(keys, qw)
            }
            Query::PerSegment(q) => {
                let qd = g.shape(q);
                if qd != (segments.len(), self.query_dim) {
                    return Err(Error::shape(
                        "attention queries",
                        format!("({}, {})", segments.len(), self.query_dim),
                        format!("{qd:?}"),
                    ));
                }
                let qw = g.matmul(q, w);
                let expanded = g.gather_rows(qw, &segments.owners());
                g.add(keys, expanded)
            }
        };
        let act = g.tanh(hidden);
        let scores = g.matmul(act, v);
        let weights = g.segment_softmax(scores, segments);
        let weighted = g.mul_col(contexts, weights);
        let pooled = g.segment_sum(weighted, segments);
        Ok(Pooled { pooled, weights })
    }
}

/// Pool `contexts` (`N × d_c`) against one query; masked rows get weight
/// exactly zero. Returns `(pooled, weights)`.
pub fn attention_pool<T: Scalar>(
    query: ArrayView1<T>,
    contexts: ArrayView2<T>,
    mask: &[bool],
    params: &AttentionPoolParams<T>,
) -> Result<(Array1<T>, Array1<T>)> {
    let n = contexts.nrows();
    if mask.len() != n {
        return Err(Error::shape("attention mask", n, mask.len()));
    }
    if query.len() != params.query_dim() {
        return Err(Error::shape(
            "attention query",
            params.query_dim(),
            query.len(),
        ));
    }
    if contexts.ncols() != params.context_dim() {
        return Err(Error::shape(
            "attention contexts",
            params.context_dim(),
            contexts.ncols(),
        ));
    }
    let live: Vec<usize> = (0..n).filter(|i| mask[*i]).collect();
    let segments = Segments::from_lengths([live.len()])?;

    let mut store = ParamStore::new();
    let pool = AttentionPool::from_params(&mut store, "pool", params);
    let mut g = Graph::inference();
    let q = g.constant(query.to_owned().insert_axis(ndarray::Axis(0)));
    let c = g.constant(contexts.to_owned());
    let c = g.gather_rows(c, &live);
    let out = pool.forward(&mut g, &store, Query::Shared(q), c, &segments)?;

    let mut weights = Array1::zeros(n);
    for (k, i) in live.iter().enumerate() {
        weights[*i] = g.value(out.weights)[[k, 0]];
    }
    Ok((g.value(out.pooled).row(0).to_owned(), weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_grads_match, random_matrix};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(
        rng: &mut ChaCha8Rng,
        dq: usize,
        dc: usize,
        da: usize,
    ) -> AttentionPoolParams<f64> {
        AttentionPoolParams {
            w: random_matrix(dq, da, 1.0, rng),
            u: random_matrix(dc, da, 1.0, rng),
            v: random_matrix(da, 1, 1.0, rng).column(0).to_owned(),
        }
    }

    #[test]
    fn single_context_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = random_params(&mut rng, 3, 4, 4);
        let ctx = array![[0.5, -1.0, 2.0, 0.25]];
        let (pooled, w) =
            attention_pool(array![1.0, 2.0, 3.0].view(), ctx.view(), &[true], &params).unwrap();
        assert_eq!(w, array![1.0]);
        assert_eq!(pooled, ctx.row(0));
    }

    #[test]
    fn zero_params_average() {
        let params = AttentionPoolParams::<f64>::zeros(2, 2, 2);
        let ctx = array![[1.0, 0.0], [0.0, 3.0], [2.0, 3.0]];
        let (pooled, w) =
            attention_pool(array![0.3, 0.1].view(), ctx.view(), &[true; 3], &params).unwrap();
        for x in w.iter() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((pooled[0] - 1.0).abs() < 1e-15);
        assert!((pooled[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn identity_params_match_direct_formula() {
        // scores: s1 = tanh(1+1) + tanh(0+0) = tanh 2, s2 = tanh(1) + tanh(1)
        let params = AttentionPoolParams {
            w: Array2::<f64>::eye(2),
            u: Array2::eye(2),
            v: array![1.0, 1.0],
        };
        let ctx = array![[1.0, 0.0], [0.0, 1.0]];
        let (pooled, w) =
            attention_pool(array![1.0, 0.0].view(), ctx.view(), &[true, true], &params).unwrap();
        // 50-digit mpmath evaluation of softmax([tanh 2, 2 tanh 1])
        let w1 = 0.363_741_672_407_231_93;
        let w2 = 0.636_258_327_592_768_1;
        assert!((w[0] - w1).abs() < 1e-15, "{}", w[0]);
        assert!((w[1] - w2).abs() < 1e-15, "{}", w[1]);
        assert!((pooled[0] - w1).abs() < 1e-15);
        assert!((pooled[1] - w2).abs() < 1e-15);
    }

    #[test]
    fn masked_positions_get_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = random_params(&mut rng, 2, 3, 3);
        let ctx = random_matrix(4, 3, 1.0, &mut rng);
        let (_, w) = attention_pool(
            array![0.1, 0.2].view(),
            ctx.view(),
            &[true, false, true, false],
            &params,
        )
        .unwrap();
        assert_eq!(w[1], 0.0);
        assert_eq!(w[3], 0.0);
        assert!((w.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_masked_is_an_error() {
        let params = AttentionPoolParams::<f64>::zeros(2, 2, 2);
        let ctx = Array2::zeros((2, 2));
        let err = attention_pool(
            array![0.0, 0.0].view(),
            ctx.view(),
            &[false, false],
            &params,
        )
        .unwrap_err();
        assert_eq!(err.to_string(), "no attendable positions");
    }

    #[test]
    fn query_dimension_checked() {
        let params = AttentionPoolParams::<f64>::zeros(2, 2, 2);
        let ctx = Array2::zeros((2, 2));
        assert!(attention_pool(array![0.0].view(), ctx.view(), &[true, true], &params).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (dq, dc, da, n) = (3, 4, 5, 6);
            let inputs = vec![
                random_matrix(1, dq, 1.0, &mut rng),
                random_matrix(n, dc, 1.0, &mut rng),
                random_matrix(dq, da, 1.0, &mut rng),
                random_matrix(dc, da, 1.0, &mut rng),
                random_matrix(da, 1, 1.0, &mut rng),
            ];
            let proj = random_matrix(2, dc, 1.0, &mut rng);
            let seg = Segments::from_lengths([2, 4]).unwrap();
            assert_grads_match(&inputs, |g, v| {
                // exercise the pooling through free graph inputs
                let keys = g.matmul(v[1], v[3]);
                let qw = g.matmul(v[0], v[2]);
                let h = g.add_row(keys, qw);
                let h = g.tanh(h);
                let s = g.matmul(h, v[4]);
                let w = g.segment_softmax(s, &seg);
                let wc = g.mul_col(v[1], w);
                let pooled = g.segment_sum(wc, &seg);
                let p = g.constant(proj.clone());
                let m = g.mul(pooled, p);
                g.sum_all(m)
            });
        }
    }

    proptest! {
        #[test]
        fn weights_form_distribution(seed in 0u64..1000, n in 1usize..8, shift in -5.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = random_params(&mut rng, 3, 3, 3);
            let ctx = random_matrix(n, 3, 2.0, &mut rng);
            let q = random_matrix(1, 3, 1.0, &mut rng).row(0).to_owned();
            let mask = vec![true; n];
            let (pooled, w) = attention_pool(q.view(), ctx.view(), &mask, &params).unwrap();
            prop_assert!(w.iter().all(|x| *x >= 0.0));
            prop_assert!((w.sum() - 1.0).abs() < 1e-12);
            // convex hull: pooled within per-coordinate bounds of the contexts
            for j in 0..3 {
                let col = ctx.column(j);
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(pooled[j] >= lo - 1e-12 && pooled[j] <= hi + 1e-12);
            }
            // a constant shift of every score leaves the weights unchanged
            let mut g = Graph::<f64>::inference();
            let s = g.constant(random_matrix(n, 1, 1.0, &mut rng));
            let shifted = g.add_scalar(s, shift);
            let seg = Segments::from_lengths([n]).unwrap();
            let a = g.segment_softmax(s, &seg);
            let b = g.segment_softmax(shifted, &seg);
            for i in 0..n {
                prop_assert!((g.value(a)[[i, 0]] - g.value(b)[[i, 0]]).abs() < 1e-12);
            }
        }

        #[test]
        fn permutation_equivariance(seed in 0u64..1000, n in 2usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = random_params(&mut rng, 2, 3, 4);
            let ctx = random_matrix(n, 3, 1.0, &mut rng);
            let q = random_matrix(1, 2, 1.0, &mut rng).row(0).to_owned();
            let mask: Vec<bool> = (0..n).map(|i| i % 3 != 1).collect();
            let perm: Vec<usize> = rand::seq::index::sample(&mut rng, n, n).into_vec();
            let pctx = ctx.select(ndarray::Axis(0), &perm);
            let pmask: Vec<bool> = perm.iter().map(|i| mask[*i]).collect();
            let (p1, w1) = attention_pool(q.view(), ctx.view(), &mask, &params).unwrap();
            let (p2, w2) = attention_pool(q.view(), pctx.view(), &pmask, &params).unwrap();
            for (k, i) in perm.iter().enumerate() {
                prop_assert!((w2[k] - w1[*i]).abs() < 1e-12);
            }
            for j in 0..3 {
                prop_assert!((p1[j] - p2[j]).abs() < 1e-12);
            }
        }
    }
}
