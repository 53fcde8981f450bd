//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, NodeId};
use super::params::ParamStore;
use crate::error::Result;
use crate::rng::Rng;

/// Compare analytic gradients against central differences
/// (f(θ+ε) − f(θ−ε)) / 2ε on up to `samples_per_param` coordinates of every
/// trainable parameter, returning the maximum relative error
/// |a − n| / max(|a|, |n|, 1e-8).
///
/// `build` must deterministically construct the forward graph and return the
/// scalar loss node; a non-deterministic closure makes the result
/// meaningless (this is not detected).
pub fn grad_check<F>(
    store: &mut ParamStore,
    mut build: F,
    eps: f64,
    samples_per_param: usize,
    rng: &mut Rng,
) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    g.backward(loss, store)?;

    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut worst: f64 = 0.0;
    for name in &names {
        let Some(grad) = store.grad(name)?.map(<[f64]>::to_vec) else {
            continue;
        };
        let n = grad.len();
        let coords: Vec<usize> = if n <= samples_per_param {
            (0..n).collect()
        } else {
            (0..samples_per_param).map(|_| rng.below(n)).collect()
        };
        for &i in &coords {
            let orig = store.value(name)?.data()[i];

            store.value_mut(name)?.data_mut()[i] = orig + eps;
            let mut gp = Graph::new();
            let lp = build(&mut gp, store)?;
            let fp = gp.value(lp).item();

            store.value_mut(name)?.data_mut()[i] = orig - eps;
            let mut gm = Graph::new();
            let lm = build(&mut gm, store)?;
            let fm = gm.value(lm).item();

            store.value_mut(name)?.data_mut()[i] = orig;

            let numeric = (fp - fm) / (2.0 * eps);
            let analytic = grad[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_map_gradient_is_exact() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(11);
        store
            .register("w", Tensor::from_fn(&[3, 4], |_| rng.normal(1.0)))
            .unwrap();
        store
            .register("b", Tensor::from_fn(&[3], |_| rng.normal(1.0)))
            .unwrap();
        let x = Tensor::from_fn(&[2, 4], |_| rng.normal(1.0));
        let err = grad_check(
            &mut store,
            |g, store| {
                let xn = g.constant(x.clone());
                let w = g.param(store, "w")?;
                let b = g.param(store, "b")?;
                let y = g.linear(xn, w, b)?;
                Ok(g.sum(y))
            },
            1e-3,
            16,
            &mut Rng::new(5),
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn sum_of_w_times_x_gradient_is_x() {
        let mut store = ParamStore::new();
        store
            .register("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap())
            .unwrap();
        let x = Tensor::new(vec![3], vec![3.0, 4.0, 5.0]).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let xn = g.constant(x.clone());
        let prod = g.mul(w, xn).unwrap();
        let loss = g.sum(prod);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().unwrap(), x.data());
    }

    #[test]
    fn sum_of_w_squared_gradient_is_2w() {
        let mut store = ParamStore::new();
        store
            .register("w", Tensor::new(vec![2], vec![1.5, -2.0]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().unwrap(), &[3.0, -4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::zeros(&[2])).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, "w").unwrap();
        assert!(g.backward(w, &mut store).is_err());
    }
}
