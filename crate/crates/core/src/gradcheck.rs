//! Central finite-difference checks for analytic gradients (double precision).

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error; keeps all-but-zero gradients from
/// turning round-off into large ratios.
pub const REL_FLOOR: f64 = 1e-6;

/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(REL_FLOOR)
}

pub fn random_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-scale..scale))
}

fn scalar_output(g: &Graph<f64>, v: Var) -> f64 {
    let val = g.value(v);
    assert_eq!(val.dim(), (1, 1), "gradient checks need a scalar objective");
    val[[0, 0]]
}

/// Relative error per input for a function of free matrix inputs.
pub fn check_inputs(
    inputs: &[Array2<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> Vec<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);

    let eval = |xs: &[Array2<f64>]| {
        let mut g = Graph::inference();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = build(&mut g, &vars);
        scalar_output(&g, out)
    };

    let mut errors = Vec::new();
    for (k, x) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(vars[k]) {
            Some(a) => a.iter().copied().collect(),
            None => vec![0.0; x.len()],
        };
        let mut numeric = Vec::with_capacity(x.len());
        let mut xs = inputs.to_vec();
        for i in 0..x.len() {
            let orig = x.as_slice().unwrap()[i];
            xs[k].as_slice_mut().unwrap()[i] = orig + FD_STEP;
            let up = eval(&xs);
            xs[k].as_slice_mut().unwrap()[i] = orig - FD_STEP;
            let down = eval(&xs);
            xs[k].as_slice_mut().unwrap()[i] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    errors
}

pub fn assert_grads_match(inputs: &[Array2<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let errors = check_inputs(inputs, build);
    for (i, e) in errors.iter().enumerate() {
        assert!(*e < 1e-4, "input {i}: relative gradient error {e:.3e}");
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Compare parameter gradients of a scalar objective against central
/// differences, probing at most `max_coords` coordinates per tensor.
pub fn check_params<R: Rng>(
    store: &ParamStore<f64>,
    build: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
    max_coords: usize,
    rng: &mut R,
) -> Vec<ParamCheck> {
    let mut g = Graph::new();
    let out = build(&mut g, store);
    let grads = g.backward(out);
    let mut analytic_by_id: std::collections::HashMap<ParamId, Array2<f64>> = g
        .param_grads(&grads)
        .into_iter()
        .map(|(id, a)| (id, a.clone()))
        .collect();

    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::inference();
        let out = build(&mut g, s);
        scalar_output(&g, out)
    };

    let mut work = store.clone();
    let mut report = Vec::new();
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let full = analytic_by_id
            .remove(&id)
            .map(|a| a.as_standard_layout().into_owned())
            .unwrap_or_else(|| Array2::zeros(p.value.dim()));
        let n = p.value.len();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            sample(rng, n, max_coords).into_vec()
        };
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = p.value.as_slice().unwrap()[c];
            work.value_mut(id).as_slice_mut().unwrap()[c] = orig + FD_STEP;
            let up = eval(&work);
            work.value_mut(id).as_slice_mut().unwrap()[c] = orig - FD_STEP;
            let down = eval(&work);
            work.value_mut(id).as_slice_mut().unwrap()[c] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
            analytic.push(full.as_slice().unwrap()[c]);
        }
        report.push(ParamCheck {
            name: p.name.clone(),
            rel_error: relative_error(&analytic, &numeric),
            analytic_norm: analytic.iter().map(|a| a * a).sum::<f64>().sqrt(),
        });
    }
    report
}

/// Worst relative error of a parameter check.
pub fn worst(report: &[ParamCheck]) -> (String, f64) {
    report
        .iter()
        .map(|c| (c.name.clone(), c.rel_error))
        .fold(
            (String::new(), 0.0),
            |acc, x| if x.1 > acc.1 { x } else { acc },
        )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0], &[1.1]) - 0.1 / 1.1).abs() < 1e-12);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn square_gradient_matches() {
        let x = Array2::from_elem((1, 1), 0.7);
        let errs = check_inputs(&[x], |g, v| {
            let y = g.square(v[0]);
            g.sum_all(y)
        });
        assert!(errs[0] < 1e-6);
    }
}
