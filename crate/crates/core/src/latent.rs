//! Diagonal-Gaussian latent variables: prior/posterior heads, reparameterized
//! sampling, embedding heads and the closed-form KL divergence.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Init, Linear};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Lower bound applied to every scale after the softplus.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Initial bias of the scale layer; `softplus(-6) ≈ 0.0025`, so sampling noise
/// starts well below the signal in `mu`.
pub const SIGMA_BIAS_INIT: f64 = -6.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDiag<T> {
    pub mu: Array1<T>,
    pub sigma: Array1<T>,
}

impl<T: Scalar> GaussianDiag<T> {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Batched Gaussian parameters inside a graph, `B × d_z` each.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVars {
    pub mu: Var,
    pub sigma: Var,
}

impl GaussianVars {
    pub fn row<T: Scalar>(&self, g: &Graph<T>, r: usize) -> GaussianDiag<T> {
        GaussianDiag {
            mu: g.value(self.mu).row(r).to_owned(),
            sigma: g.value(self.sigma).row(r).to_owned(),
        }
    }
}

/// `mu = s·W_mu + b_mu`, `sigma = softplus(s·W_sigma + b_sigma)`.
#[derive(Debug, Clone)]
pub struct GaussianHead {
    pub mu: Linear,
    pub sigma: Linear,
}

impl GaussianHead {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        latent: usize,
        rng: &mut R,
    ) -> Self {
        let mu = Linear::new(
            store,
            &format!("{name}.mu"),
            input,
            latent,
            Init::Xavier,
            rng,
        );
        let sigma = Linear::new(
            store,
            &format!("{name}.sigma"),
            input,
            latent,
            Init::Xavier,
            rng,
        );
        store.value_mut(sigma.b).fill(T::of(SIGMA_BIAS_INIT));
        GaussianHead { mu, sigma }
    }

    pub fn input_dim(&self) -> usize {
        self.mu.input
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.output
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        s: Var,
    ) -> Result<GaussianVars> {
        let d = g.shape(s).1;
        if d != self.input_dim() {
            return Err(Error::shape("gaussian head input", self.input_dim(), d));
        }
        let mu = self.mu.forward(g, store, s);
        let pre = self.sigma.forward(g, store, s);
        let sigma = g.softplus(pre, T::of(SIGMA_FLOOR));
        Ok(GaussianVars { mu, sigma })
    }

    /// Evaluate on a single representation vector.
    pub fn eval<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        s: ArrayView1<T>,
    ) -> Result<GaussianDiag<T>> {
        let mut g = Graph::inference();
        let x = g.constant(s.to_owned().insert_axis(Axis(0)));
        let out = self.forward(&mut g, store, x)?;
        Ok(out.row(&g, 0))
    }
}

/// `e = tanh(z·W + b)`.
#[derive(Debug, Clone)]
pub struct EmbedHead {
    pub linear: Linear,
}

impl EmbedHead {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        latent: usize,
        embed: usize,
        rng: &mut R,
    ) -> Self {
        EmbedHead {
            linear: Linear::new(store, name, latent, embed, Init::Xavier, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Var {
        let y = self.linear.forward(g, store, z);
        g.tanh(y)
    }

    pub fn eval<T: Scalar>(&self, store: &ParamStore<T>, z: ArrayView1<T>) -> Array1<T> {
        let mut g = Graph::inference();
        let x = g.constant(z.to_owned().insert_axis(Axis(0)));
        let e = self.forward(&mut g, store, x);
        g.value(e).row(0).to_owned()
    }
}

/// `z = mu + sigma ⊙ eps`.
pub fn reparam_sample<T: Scalar>(q: &GaussianDiag<T>, eps: ArrayView1<T>) -> Array1<T> {
    &q.mu + &(&q.sigma * &eps)
}

pub fn reparam<T: Scalar>(g: &mut Graph<T>, q: GaussianVars, eps: Var) -> Var {
    let noise = g.mul(q.sigma, eps);
    g.add(q.mu, noise)
}

/// Closed-form `KL(q ‖ p)` for diagonal Gaussians.
pub fn kl_diag<T: Scalar>(q: &GaussianDiag<T>, p: &GaussianDiag<T>) -> Result<T> {
    if q.dim() != p.dim() {
        return Err(Error::shape("kl_diag", q.dim(), p.dim()));
    }
    let half = T::of(0.5);
    let mut total = T::zero();
    for i in 0..q.dim() {
        let (qm, qs, pm, ps) = (q.mu[i], q.sigma[i], p.mu[i], p.sigma[i]);
        let dm = qm - pm;
        total += (ps / qs).ln() + (qs * qs + dm * dm) / (T::of(2.0) * ps * ps) - half;
    }
    Ok(total)
}

/// Per-row `KL(q ‖ p)` as a `B × 1` column.
pub fn kl_rows<T: Scalar>(g: &mut Graph<T>, q: GaussianVars, p: GaussianVars) -> Var {
    let log_ps = g.ln(p.sigma);
    let log_qs = g.ln(q.sigma);
    let log_ratio = g.sub(log_ps, log_qs);
    let qs2 = g.square(q.sigma);
    let dm = g.sub(q.mu, p.mu);
    let dm2 = g.square(dm);
    let num = g.add(qs2, dm2);
    let ps2 = g.square(p.sigma);
    let den = g.scale(ps2, T::of(2.0));
    let frac = g.div(num, den);
    let terms = g.add(log_ratio, frac);
    let terms = g.add_scalar(terms, T::of(-0.5));
    g.sum_rows(terms)
}

/// Standard-normal noise source for the reparameterization.
pub trait NoiseSource<T> {
    fn draw(&mut self, rows: usize, cols: usize) -> Array2<T>;
}

/// Noise fixed at zero: samples collapse to the mean.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroNoise;

impl<T: Scalar> NoiseSource<T> for ZeroNoise {
    fn draw(&mut self, rows: usize, cols: usize) -> Array2<T> {
        Array2::zeros((rows, cols))
    }
}

/// Gaussian noise from any random generator.
pub struct GaussianNoise<R>(pub R);

impl<T: Scalar, R: Rng> NoiseSource<T> for GaussianNoise<R> {
    fn draw(&mut self, rows: usize, cols: usize) -> Array2<T> {
        Array2::from_shape_simple_fn((rows, cols), || {
            T::of(rand_distr::Distribution::sample(
                &rand_distr::StandardNormal,
                &mut self.0,
            ))
        })
    }
}
