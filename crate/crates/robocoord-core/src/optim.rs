//! Bounded Nelder-Mead simplex minimizer.
//!
//! Derivative-free and dependency-free; adequate for the three-dimensional
//! log-hyperparameter searches this crate runs. Candidate points are clamped
//! into the box before evaluation, so the objective never sees out-of-bound
//! arguments.

/// Result of one simplex run: best point and its objective value.
pub(crate) struct SimplexResult<const N: usize> {
    pub x: [f64; N],
    pub value: f64,
}

fn clamp_into<const N: usize>(x: &mut [f64; N], lower: &[f64; N], upper: &[f64; N]) {
    for i in 0..N {
        x[i] = x[i].clamp(lower[i], upper[i]);
    }
}

/// Minimizes `f` from `x0` with an orthogonal initial simplex of the given
/// step, clamped to `[lower, upper]`.
pub(crate) fn nelder_mead<const N: usize, F: FnMut(&[f64; N]) -> f64>(
    mut f: F,
    x0: [f64; N],
    step: f64,
    lower: &[f64; N],
    upper: &[f64; N],
    max_iters: usize,
) -> SimplexResult<N> {
    const ALPHA: f64 = 1.0; // reflection
    const GAMMA: f64 = 2.0; // expansion
    const RHO: f64 = 0.5; // contraction
    const SIGMA: f64 = 0.5; // shrink

    let mut eval = |x: &mut [f64; N]| -> f64 {
        clamp_into(x, lower, upper);
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    // Vertices plus objective values, kept sorted ascending by value.
    let mut simplex: [([f64; N], f64); 4] = [([0.0; N], 0.0); 4];
    debug_assert!(N + 1 <= 4, "simplex storage sized for up to 3 dimensions");
    let m = N + 1;
    {
        let mut x = x0;
        let v = eval(&mut x);
        simplex[0] = (x, v);
    }
    for i in 0..N {
        let mut x = x0;
        x[i] += step;
        let v = eval(&mut x);
        simplex[i + 1] = (x, v);
    }
    simplex[..m].sort_by(|a, b| a.1.total_cmp(&b.1));

    for _ in 0..max_iters {
        let spread = simplex[m - 1].1 - simplex[0].1;
        let mut x_spread = 0.0_f64;
        for i in 0..N {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for vertex in &simplex[..m] {
                lo = lo.min(vertex.0[i]);
                hi = hi.max(vertex.0[i]);
            }
            x_spread = x_spread.max(hi - lo);
        }
        if spread.abs() < 1e-12 && x_spread < 1e-10 {
            break;
        }

        // Centroid of all but the worst vertex.
        let mut centroid = [0.0; N];
        for vertex in &simplex[..m - 1] {
            for i in 0..N {
                centroid[i] += vertex.0[i] / (m - 1) as f64;
            }
        }
        let worst = simplex[m - 1];

        let mut reflected = [0.0; N];
        for i in 0..N {
            reflected[i] = centroid[i] + ALPHA * (centroid[i] - worst.0[i]);
        }
        let f_reflected = eval(&mut reflected);

        if f_reflected < simplex[0].1 {
            let mut expanded = [0.0; N];
            for i in 0..N {
                expanded[i] = centroid[i] + GAMMA * (reflected[i] - centroid[i]);
            }
            let f_expanded = eval(&mut expanded);
            simplex[m - 1] = if f_expanded < f_reflected {
                (expanded, f_expanded)
            } else {
                (reflected, f_reflected)
            };
        } else if f_reflected < simplex[m - 2].1 {
            simplex[m - 1] = (reflected, f_reflected);
        } else {
            let (base, f_base) = if f_reflected < worst.1 {
                (reflected, f_reflected)
            } else {
                (worst.0, worst.1)
            };
            let mut contracted = [0.0; N];
            for i in 0..N {
                contracted[i] = centroid[i] + RHO * (base[i] - centroid[i]);
            }
            let f_contracted = eval(&mut contracted);
            if f_contracted < f_base {
                simplex[m - 1] = (contracted, f_contracted);
            } else {
                // Shrink toward the best vertex.
                let best = simplex[0].0;
                for vertex in simplex[1..m].iter_mut() {
                    for i in 0..N {
                        vertex.0[i] = best[i] + SIGMA * (vertex.0[i] - best[i]);
                    }
                    vertex.1 = eval(&mut vertex.0);
                }
            }
        }
        simplex[..m].sort_by(|a, b| a.1.total_cmp(&b.1));
    }

    SimplexResult {
        x: simplex[0].0,
        value: simplex[0].1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_shifted_quadratic() {
        let target = [1.5, -0.25, 3.0];
        let f = |x: &[f64; 3]| {
            (x[0] - target[0]).powi(2)
                + 2.0 * (x[1] - target[1]).powi(2)
                + 0.5 * (x[2] - target[2]).powi(2)
        };
        let result = nelder_mead(
            f,
            [0.0, 0.0, 0.0],
            0.5,
            &[-10.0, -10.0, -10.0],
            &[10.0, 10.0, 10.0],
            500,
        );
        for i in 0..3 {
            assert!((result.x[i] - target[i]).abs() < 1e-4, "dim {i}");
        }
    }

    #[test]
    fn respects_bounds() {
        // Unconstrained minimum at (-5, -5) sits outside the box.
        let f = |x: &[f64; 2]| (x[0] + 5.0).powi(2) + (x[1] + 5.0).powi(2);
        let result = nelder_mead(f, [0.5, 0.5], 0.3, &[-1.0, -1.0], &[1.0, 1.0], 500);
        assert!((result.x[0] + 1.0).abs() < 1e-6);
        assert!((result.x[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn rosenbrock_two_dim() {
        let f = |x: &[f64; 2]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let result = nelder_mead(f, [-1.2, 1.0], 0.5, &[-5.0, -5.0], &[5.0, 5.0], 2000);
        assert!(result.value < 1e-8, "value = {}", result.value);
    }
}
