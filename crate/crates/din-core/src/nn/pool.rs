//! Global max pooling over spatial positions.

use ndarray::{Array2, Array4};

/// Per-(sample, channel) maximum over all spatial positions. Ties resolve
/// to the first position in row-major scan order, which keeps backward
/// deterministic.
pub fn global_max_pool(x: &Array4<f64>) -> (Array2<f64>, MaxPoolCache) {
    let (n, c, h, w) = x.dim();
    debug_assert!(h >= 1 && w >= 1);
    let mut out = Array2::<f64>::zeros((n, c));
    let mut argmax = vec![(0usize, 0usize); n * c];
    for ni in 0..n {
        for ci in 0..c {
            let mut best = f64::NEG_INFINITY;
            let mut best_pos = (0, 0);
            for y in 0..h {
                for xx in 0..w {
                    let v = x[[ni, ci, y, xx]];
                    if v > best {
                        best = v;
                        best_pos = (y, xx);
                    }
                }
            }
            out[[ni, ci]] = best;
            argmax[ni * c + ci] = best_pos;
        }
    }
    (out, MaxPoolCache { argmax, in_dim: (n, c, h, w) })
}

#[derive(Debug)]
pub struct MaxPoolCache {
    argmax: Vec<(usize, usize)>,
    in_dim: (usize, usize, usize, usize),
}

/// Routes each upstream gradient entry to the position that won the max.
pub fn global_max_pool_backward(cache: &MaxPoolCache, grad_out: &Array2<f64>) -> Array4<f64> {
    let (n, c, h, w) = cache.in_dim;
    debug_assert_eq!(grad_out.dim(), (n, c));
    let mut grad_x = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let (y, x) = cache.argmax[ni * c + ci];
            grad_x[[ni, ci, y, x]] = grad_out[[ni, ci]];
        }
    }
    grad_x
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn constant_map_pools_to_constant() {
        let x = Array4::from_elem((2, 3, 4, 5), 1.25);
        let (y, _) = global_max_pool(&x);
        assert_eq!(y.dim(), (2, 3));
        assert!(y.iter().all(|&v| v == 1.25));
    }

    #[test]
    fn matches_loop_oracle_and_is_permutation_invariant() {
        let mut rng = crate::rng::stream(71, "pool", 0);
        let x = Array4::from_shape_fn((2, 3, 2, 2), |_| {
            crate::rng::sample_standard_normal(&mut rng)
        });
        let (y, _) = global_max_pool(&x);
        for ni in 0..2 {
            for ci in 0..3 {
                let mut best = f64::NEG_INFINITY;
                for yy in 0..2 {
                    for xx in 0..2 {
                        best = best.max(x[[ni, ci, yy, xx]]);
                    }
                }
                assert_eq!(y[[ni, ci]], best);
            }
        }
        // spatial permutation: reverse both spatial axes
        let flipped = x.slice(ndarray::s![.., .., ..;-1, ..;-1]).to_owned();
        let (y2, _) = global_max_pool(&flipped);
        assert_eq!(y, y2);
    }

    #[test]
    fn backward_routes_gradient_to_argmax() {
        let mut x = Array4::<f64>::zeros((1, 2, 3, 3));
        x[[0, 0, 1, 2]] = 5.0;
        x[[0, 1, 0, 0]] = -1.0;
        x[[0, 1, 2, 2]] = 3.0;
        let (_, cache) = global_max_pool(&x);
        let g = ndarray::arr2(&[[2.0, 7.0]]);
        let gx = global_max_pool_backward(&cache, &g);
        assert_eq!(gx[[0, 0, 1, 2]], 2.0);
        assert_eq!(gx[[0, 1, 2, 2]], 7.0);
        assert_eq!(gx.sum(), 9.0);
    }

    #[test]
    fn ties_route_to_first_position() {
        let x = Array4::from_elem((1, 1, 2, 2), 4.0);
        let (_, cache) = global_max_pool(&x);
        let g = ndarray::arr2(&[[1.0]]);
        let gx = global_max_pool_backward(&cache, &g);
        assert_eq!(gx[[0, 0, 0, 0]], 1.0);
        assert_eq!(gx.sum(), 1.0);
    }
}
