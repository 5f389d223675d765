//! Central finite-difference gradient checks in `f64`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NumericsError, Tape, Tensor, Var};

/// Settings for [`finite_diff_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub step: f64,
    /// Lower bound on the denominator of the relative error, so coordinates
    /// whose gradient is essentially zero are compared absolutely.
    pub floor: f64,
    /// Coordinates checked per parameter; `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            floor: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// `(parameter, coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Adds uniform noise in `±scale` to every coordinate. Freshly initialized
/// weights are small enough that normalization layers have large third
/// derivatives, which swamps central differences; spreading the weights
/// keeps the truncation error of the check well below its tolerance.
pub fn spread(params: &mut [Tensor<f64>], scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params {
        for v in t.data_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

pub fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares the tape gradient of `f` with central differences over the
/// coordinates of every tensor in `params`.
pub fn finite_diff_check<Func, E>(f: Func, params: &[Tensor<f64>], cfg: GradCheck) -> Result<GradReport, E>
where
    Func: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>, E>,
    E: From<NumericsError>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64, E> {
        let tape = Tape::new();
        let vars: Vec<_> = ps.iter().map(|p| tape.param(p.clone())).collect();
        Ok(f(&tape, &vars)?.value().item()?)
    };

    let tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.to_vec();
    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for pi in 0..params.len() {
        let n = params[pi].len();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = params[pi].data()[c];
            work[pi].data_mut()[c] = orig + cfg.step;
            let up = eval(&work)?;
            work[pi].data_mut()[c] = orig - cfg.step;
            let down = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[pi].data()[c];
            let err = rel_error(a, numeric, cfg.floor);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, c);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    const TOL: f64 = 1e-6;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn check<Func>(f: Func, params: &[Tensor<f64>]) -> GradReport
    where
        Func: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>, NumericsError>,
    {
        finite_diff_check::<_, NumericsError>(f, params, GradCheck::default()).unwrap()
    }

    /// Random weights for a scalar projection so every output coordinate
    /// contributes a distinct gradient.
    fn project<'t>(x: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>, NumericsError> {
        let w = x.tape().constant(random(&x.shape(), seed));
        x.mul(w)?.sum()
    }

    #[test]
    fn matmul_5x7_7x3() {
        let r = check(|_, p| project(p[0].matmul(p[1])?, 9), &[random(&[5, 7], 1), random(&[7, 3], 2)]);
        assert!(r.max_rel_error < TOL, "{r:?}");
        assert_eq!(r.checked, 35 + 21);
    }

    #[test]
    fn linear_and_silu() {
        let r = check(
            |_, p| project(p[0].linear(p[1])?.silu()?, 3),
            &[random(&[4, 6], 4), random(&[5, 6], 5)],
        );
        assert!(r.max_rel_error < TOL, "{r:?}");
    }

    #[test]
    fn swiglu_on_8_dim_input() {
        let hidden = 24;
        let r = check(
            |_, p| {
                let gate = p[0].linear(p[1])?.silu()?;
                let up = p[0].linear(p[2])?;
                project(gate.mul(up)?.linear(p[3])?, 7)
            },
            &[
                random(&[1, 8], 10),
                random(&[hidden, 8], 11),
                random(&[hidden, 8], 12),
                random(&[8, hidden], 13),
            ],
        );
        assert!(r.max_rel_error < TOL, "{r:?}");
    }

    #[test]
    fn rmsnorm_gradient() {
        let r = check(
            |_, p| project(p[0].rmsnorm(p[1], 1e-6)?, 21),
            &[random(&[3, 6], 20), random(&[6], 22)],
        );
        assert!(r.max_rel_error < TOL, "{r:?}");
    }

    #[test]
    fn rope_gradient() {
        let r = check(|_, p| project(p[0].rope(&[0, 3, 11], 2)?, 31), &[random(&[3, 8], 30)]);
        assert!(r.max_rel_error < TOL, "{r:?}");
    }

    #[test]
    fn attention_gradient() {
        let ranges = [(0, 1), (0, 2), (2, 3), (2, 4), (0, 4)];
        let r = check(
            |_, p| project(p[0].attention(p[1], p[2], 2, &ranges)?, 41),
            &[random(&[5, 8], 42), random(&[4, 8], 43), random(&[4, 8], 44)],
        );
        assert!(r.max_rel_error < TOL, "{r:?}");
    }

    #[test]
    fn gather_concat_softmax() {
        let r = check(
            |t, p| {
                let a = p[0].gather_rows(&[2, 0, 2])?;
                let b = p[1].scale(0.5)?;
                let c = t.concat_rows(&[a, b])?;
                project(c.softmax_rows()?, 51)
            },
            &[random(&[3, 4], 52), random(&[2, 4], 53)],
        );
        assert!(r.max_rel_error < TOL, "{r:?}");
    }

    #[test]
    fn cross_entropy_gradient() {
        let r = check(|_, p| p[0].add(p[1])?.cross_entropy(&[1, 0, 4]), &[random(&[3, 5], 60), random(&[3, 5], 61)]);
        assert!(r.max_rel_error < TOL, "{r:?}");
    }

    #[test]
    fn subsampling_limits_coordinates() {
        let cfg = GradCheck {
            max_coords: Some(5),
            ..GradCheck::default()
        };
        let r = finite_diff_check::<_, NumericsError>(|_, p| p[0].sum(), &[random(&[10, 10], 70)], cfg).unwrap();
        assert_eq!(r.checked, 5);
        assert!(r.max_rel_error < TOL);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn matmul_random_shapes(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
            let r = check(|_, p| project(p[0].matmul(p[1])?, seed + 2), &[random(&[m, k], seed), random(&[k, n], seed + 1)]);
            prop_assert!(r.max_rel_error < TOL);
        }

        #[test]
        fn softmax_rows_sum_to_one(rows in 1usize..4, cols in 1usize..9, seed in 0u64..1000) {
            let tape = Tape::new();
            let x = tape.constant(random(&[rows, cols], seed).cast::<f64>());
            let x = x.scale(20.0).unwrap();
            let s = x.softmax_rows().unwrap().value();
            for r in 0..rows {
                let row = s.row(r);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn attention_random_masks(q in 1usize..5, kv in 1usize..5, seed in 0u64..1000) {
            let ranges: Vec<(usize, usize)> = (0..q).map(|i| {
                let hi = 1 + (i + seed as usize) % kv;
                (((seed as usize) + i) % hi, hi)
            }).collect();
            let r = check(
                |_, p| project(p[0].attention(p[1], p[2], 2, &ranges)?, seed + 3),
                &[random(&[q, 4], seed), random(&[kv, 4], seed + 1), random(&[kv, 4], seed + 2)],
            );
            prop_assert!(r.max_rel_error < TOL);
        }
    }
}
