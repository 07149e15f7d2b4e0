//! Dense layers and gated recurrent units on top of [`Graph`].

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Uniform(f64),
    Xavier,
}

fn init_matrix<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
    rng: &mut R,
) -> ParamId {
    match init {
        Init::Uniform(bound) => store.uniform(name, rows, cols, bound, rng),
        Init::Xavier => store.xavier(name, rows, cols, rng),
    }
}

fn init_bias<T: Scalar, R: Rng>(
    store: &mut ParamStore<T>,
    name: String,
    cols: usize,
    init: Init,
    rng: &mut R,
) -> ParamId {
    match init {
        Init::Uniform(bound) => store.uniform(name, 1, cols, bound, rng),
        Init::Xavier => store.zeros(name, 1, cols),
    }
}

/// `y = x·W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        Linear {
            w: init_matrix(store, format!("{name}.w"), input, output, init, rng),
            b: init_bias(store, format!("{name}.b"), output, init, rng),
            input,
            output,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Two affine layers with tanh after each.
#[derive(Debug, Clone)]
pub struct TanhMlp {
    pub first: Linear,
    pub second: Linear,
}

impl TanhMlp {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        TanhMlp {
            first: Linear::new(
                store,
                &format!("{name}.l1"),
                input,
                hidden,
                Init::Xavier,
                rng,
            ),
            second: Linear::new(
                store,
                &format!("{name}.l2"),
                hidden,
                output,
                Init::Xavier,
                rng,
            ),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let h = self.first.forward(g, store, x);
        let h = g.tanh(h);
        let y = self.second.forward(g, store, h);
        g.tanh(y)
    }
}

/// Gated recurrent unit with gate order (reset, update, candidate).
#[derive(Debug, Clone)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        Gru {
            w_ih: init_matrix(store, format!("{name}.w_ih"), input, 3 * hidden, init, rng),
            w_hh: init_matrix(store, format!("{name}.w_hh"), hidden, 3 * hidden, init, rng),
            b_ih: init_bias(store, format!("{name}.b_ih"), 3 * hidden, init, rng),
            b_hh: init_bias(store, format!("{name}.b_hh"), 3 * hidden, init, rng),
            input,
            hidden,
        }
    }

    /// Input-side gate pre-activations `x·W_ih + b_ih` for any number of rows.
    pub fn project_input<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(store, self.w_ih);
        let b = g.param(store, self.b_ih);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    /// One step from precomputed input gates `gi` (`batch × 3h`) and state `h`.
    pub fn cell<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, gi: Var, h: Var) -> Var {
        let n = self.hidden;
        let w = g.param(store, self.w_hh);
        let b = g.param(store, self.b_hh);
        let gh = g.matmul(h, w);
        let gh = g.add_row(gh, b);

        let gi_rz = g.slice_cols(gi, 0, 2 * n);
        let gh_rz = g.slice_cols(gh, 0, 2 * n);
        let rz = g.add(gi_rz, gh_rz);
        let rz = g.sigmoid(rz);
        let r = g.slice_cols(rz, 0, n);
        let z = g.slice_cols(rz, n, n);

        let gi_n = g.slice_cols(gi, 2 * n, n);
        let gh_n = g.slice_cols(gh, 2 * n, n);
        let rn = g.mul(r, gh_n);
        let cand = g.add(gi_n, rn);
        let cand = g.tanh(cand);

        // h' = (1 - z)·cand + z·h = cand + z·(h - cand)
        let diff = g.sub(h, cand);
        let zd = g.mul(z, diff);
        g.add(cand, zd)
    }

    /// Run over `steps` time-major blocks of `batch` rows.
    ///
    /// Rows whose mask is 0 at a step keep their previous state, so trailing
    /// padding never reaches a reverse pass. Returns states indexed by time.
    pub fn run<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        inputs: Var,
        steps: usize,
        batch: usize,
        masks: &[Option<Var>],
        reverse: bool,
    ) -> Vec<Var> {
        assert_eq!(g.shape(inputs).0, steps * batch, "gru: input rows");
        assert_eq!(masks.len(), steps, "gru: one mask per step");
        let gates = self.project_input(g, store, inputs);
        let mut h = g.constant(ndarray::Array2::zeros((batch, self.hidden)));
        let mut out = vec![h; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let gi = g.slice_rows(gates, t * batch, batch);
            let next = self.cell(g, store, gi, h);
            h = match masks[t] {
                Some(m) => {
                    let delta = g.sub(next, h);
                    let delta = g.mul_col(delta, m);
                    g.add(h, delta)
                }
                None => next,
            };
            out[t] = h;
        }
        out
    }
}

/// Forward and backward GRUs whose states are concatenated per step.
#[derive(Debug, Clone)]
pub struct BiGru {
    pub fwd: Gru,
    pub bwd: Gru,
}

impl BiGru {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        BiGru {
            fwd: Gru::new(store, &format!("{name}.fwd"), input, hidden, init, rng),
            bwd: Gru::new(store, &format!("{name}.bwd"), input, hidden, init, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.fwd.hidden + self.bwd.hidden
    }

    /// Per-step `batch × 2h` states, indexed by time.
    pub fn run<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        inputs: Var,
        steps: usize,
        batch: usize,
        masks: &[Option<Var>],
    ) -> Vec<Var> {
        let f = self.fwd.run(g, store, inputs, steps, batch, masks, false);
        let b = self.bwd.run(g, store, inputs, steps, batch, masks, true);
        f.into_iter()
            .zip(b)
            .map(|(f, b)| g.concat_cols(&[f, b]))
            .collect()
    }
}
