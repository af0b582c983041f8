//! Central finite-difference check of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::nn::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub pass: bool,
    /// Number of coordinates compared.
    pub checked: usize,
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

pub fn analytic_gradient<F>(forward: F, params: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            let mut p = p.clone();
            p.set_requires_grad(true);
            tape.leaf(p)
        })
        .collect();
    let loss = forward(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get_or_zeros(v, p.numel()))
        .collect())
}

fn eval<F>(forward: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = forward(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

pub fn numeric_gradient<F>(forward: F, params: &[Tensor], step: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = vec![0.0; params[pi].numel()];
        for (ci, slot) in g.iter_mut().enumerate() {
            let orig = params[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + step;
            let up = eval(&forward, &work)?;
            work[pi].data_mut()[ci] = orig - step;
            let down = eval(&forward, &work)?;
            work[pi].data_mut()[ci] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

pub fn compare_gradients(analytic: &[Vec<f64>], numeric: &[Vec<f64>], tol: f64) -> GradCheckReport {
    let mut max_rel_error: f64 = 0.0;
    let mut checked = 0;
    for (a, n) in analytic.iter().zip(numeric) {
        for (&av, &nv) in a.iter().zip(n) {
            max_rel_error = max_rel_error.max(relative_error(av, nv));
            checked += 1;
        }
    }
    GradCheckReport {
        max_rel_error,
        pass: max_rel_error <= tol,
        checked,
    }
}

/// Checks every coordinate of `params` against central differences.
pub fn grad_check<F>(forward: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic = analytic_gradient(&forward, params)?;
    let numeric = numeric_gradient(&forward, params, step)?;
    Ok(compare_gradients(&analytic, &numeric, tol))
}

/// Adds `U[-amplitude, amplitude]` noise to every parameter, moving
/// zero-initialized biases off ReLU kinks before a finite-difference check.
pub fn perturb_params(store: &mut ParamStore, amplitude: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-amplitude..=amplitude);
        }
    }
}

/// Gradient check over a named parameter store. At most `per_param`
/// coordinates of each parameter are sampled (seeded) when given.
pub fn grad_check_params<F>(
    store: &ParamStore,
    forward: F,
    step: f64,
    tol: f64,
    per_param: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = forward(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let mut analytic_by_name = std::collections::HashMap::new();
    for (name, v) in grads.params() {
        analytic_by_name.insert(name.clone(), grads.get_or_zeros(*v, tape.value(*v).numel()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        if !store.get(&name)?.requires_grad() {
            continue;
        }
        let n = store.get(&name)?.numel();
        let coords: Vec<usize> = match per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let full = analytic_by_name
            .get(&name)
            .cloned()
            .unwrap_or_else(|| vec![0.0; n]);
        let mut a = Vec::with_capacity(coords.len());
        let mut num = Vec::with_capacity(coords.len());
        for ci in coords {
            let orig = store.get(&name)?.data()[ci];
            work.get_mut(&name)?.data_mut()[ci] = orig + step;
            let up = {
                let mut t = Tape::new();
                let l = forward(&mut t, &work)?;
                t.value(l).item()
            };
            work.get_mut(&name)?.data_mut()[ci] = orig - step;
            let down = {
                let mut t = Tape::new();
                let l = forward(&mut t, &work)?;
                t.value(l).item()
            };
            work.get_mut(&name)?.data_mut()[ci] = orig;
            a.push(full[ci]);
            num.push((up - down) / (2.0 * step));
        }
        analytic.push(a);
        numeric.push(num);
    }
    Ok(compare_gradients(&analytic, &numeric, tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), false).unwrap()
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_tensor(&mut rng, &[3, 4]);
        let b = random_tensor(&mut rng, &[4, 2]);
        let report = grad_check(
            |t, v| {
                let c = t.matmul(v[0], v[1])?;
                t.sum(c)
            },
            &[a, b],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
        assert_eq!(report.checked, 20);
    }

    #[test]
    fn linear_sse_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = random_tensor(&mut rng, &[3, 4]);
        let b = random_tensor(&mut rng, &[3]);
        let x = random_tensor(&mut rng, &[2, 4]);
        let y = random_tensor(&mut rng, &[2, 3]);
        let report = grad_check(
            |t, v| {
                let h = t.matmul_nt(v[2], v[0])?;
                let h = t.add(h, v[1])?;
                let target = t.constant(y.clone());
                t.sse(h, target)
            },
            &[w, b, x],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(&mut rng, &[4]);
        let f = |t: &mut Tape, v: &[Var]| {
            let s = t.tanh(v[0])?;
            t.sum(s)
        };
        let mut analytic = analytic_gradient(f, std::slice::from_ref(&x)).unwrap();
        let numeric = numeric_gradient(f, std::slice::from_ref(&x), 1e-5).unwrap();
        assert!(compare_gradients(&analytic, &numeric, 1e-4).pass);
        analytic[0][0] += 0.1;
        assert!(!compare_gradients(&analytic, &numeric, 1e-4).pass);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 0.5) - 0.5 / 1.5).abs() < 1e-15);
    }
}
