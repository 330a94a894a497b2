//! Fully connected layer: y = x W^T + b.

use ndarray::{Array2, ArrayD};
use rand::Rng;

use crate::error::Result;
use crate::linalg;
use crate::nn::{kaiming_normal, GradientTape, ParamGroup, ParamId, ParameterStore};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId, // (out_features, in_features)
    pub bias: ParamId,   // (out_features)
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Debug)]
pub struct LinearCache {
    input: Array2<f64>,
}

impl Linear {
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        in_features: usize,
        out_features: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{prefix}.weight"),
            kaiming_normal(&[out_features, in_features], in_features, rng),
            group,
            true,
        )?;
        let bias = store.add(
            format!("{prefix}.bias"),
            ArrayD::zeros(vec![out_features]),
            group,
            true,
        )?;
        Ok(Linear { weight, bias, in_features, out_features })
    }

    fn weight_view<'s>(&self, store: &'s ParameterStore) -> ndarray::ArrayView2<'s, f64> {
        store
            .get(self.weight)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("linear weight rank")
    }

    pub fn forward(&self, store: &ParameterStore, x: &Array2<f64>) -> (Array2<f64>, LinearCache) {
        assert_eq!(x.ncols(), self.in_features, "linear input width");
        let w = self.weight_view(store);
        let mut y = linalg::matmul_nt(&x.view(), &w);
        let bias = store.get(self.bias);
        for mut row in y.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += bias[[j]];
            }
        }
        (y, LinearCache { input: x.clone() })
    }

    pub fn backward(
        &self,
        store: &ParameterStore,
        tape: &mut GradientTape,
        cache: &LinearCache,
        grad_out: &Array2<f64>,
    ) -> Array2<f64> {
        // dW = g^T x ; db = column sums of g ; dx = g W
        let grad_w = linalg::matmul_tn(&grad_out.view(), &cache.input.view());
        tape.accumulate(self.weight, grad_w.into_dyn());
        tape.accumulate(self.bias, grad_out.sum_axis(ndarray::Axis(0)).into_dyn());
        linalg::matmul(&grad_out.view(), &self.weight_view(store))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn forward_matches_dense_oracle() {
        let mut store = ParameterStore::new();
        let mut rng = crate::rng::stream(61, "linear", 0);
        let fc = Linear::init(&mut store, "fc", 4, 3, ParamGroup::Head, &mut rng).unwrap();
        store.get_mut(fc.bias).assign(&ndarray::arr1(&[0.1, -0.2, 0.3]).into_dyn());
        let x = Array2::from_shape_fn((2, 4), |_| crate::rng::sample_standard_normal(&mut rng));
        let (y, _) = fc.forward(&store, &x);
        let w = store.get(fc.weight);
        let b = store.get(fc.bias);
        for i in 0..2 {
            for j in 0..3 {
                let mut acc = b[[j]];
                for k in 0..4 {
                    acc += x[[i, k]] * w[ndarray::IxDyn(&[j, k])];
                }
                assert_abs_diff_eq!(y[[i, j]], acc, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn parameter_count_is_in_times_out_plus_out() {
        let mut store = ParameterStore::new();
        let mut rng = crate::rng::stream(62, "linear-count", 0);
        Linear::init(&mut store, "fc", 4, 3, ParamGroup::Head, &mut rng).unwrap();
        assert_eq!(store.n_trainable(), 4 * 3 + 3);
    }

    #[test]
    fn backward_matches_finite_difference_probe() {
        let mut store = ParameterStore::new();
        let mut rng = crate::rng::stream(63, "linear-fd", 0);
        let fc = Linear::init(&mut store, "fc", 5, 2, ParamGroup::Head, &mut rng).unwrap();
        let x = Array2::from_shape_fn((3, 5), |_| crate::rng::sample_standard_normal(&mut rng));
        let (y, cache) = fc.forward(&store, &x);
        // loss = sum(y^2)/2, upstream grad = y
        let mut tape = GradientTape::new(&store);
        let grad_x = fc.backward(&store, &mut tape, &cache, &y);

        let h = 1e-6;
        let loss = |s: &ParameterStore, x: &Array2<f64>| {
            let (y, _) = fc.forward(s, x);
            y.iter().map(|v| v * v).sum::<f64>() / 2.0
        };
        let mut sp = store.clone();
        sp.get_mut(fc.weight)[ndarray::IxDyn(&[1, 3])] += h;
        let mut sm = store.clone();
        sm.get_mut(fc.weight)[ndarray::IxDyn(&[1, 3])] -= h;
        let fd = (loss(&sp, &x) - loss(&sm, &x)) / (2.0 * h);
        assert_abs_diff_eq!(tape.get(fc.weight).unwrap()[ndarray::IxDyn(&[1, 3])], fd,
            epsilon = 1e-6);

        let mut xp = x.clone();
        xp[[2, 0]] += h;
        let mut xm = x.clone();
        xm[[2, 0]] -= h;
        let fd_x = (loss(&store, &xp) - loss(&store, &xm)) / (2.0 * h);
        assert_abs_diff_eq!(grad_x[[2, 0]], fd_x, epsilon = 1e-6);
    }
}
