//! Central finite-difference verification of tape gradients.

use alloc::vec;
use alloc::vec::Vec;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;

use crate::error::Result;
use crate::rng::{self, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over all inputs.
    pub rel_err: f64,
    pub max_abs_err: f64,
}

/// Compares the tape gradient of a scalar-valued `f` against central
/// differences with step `h`, perturbing every element of every input.
///
/// `f` receives a fresh tape with `inputs` registered as parameters (in
/// order) and must return a scalar.
pub fn check<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|&v| tape.grad(v).expect("param grad").data().to_vec())
        .collect();

    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for i in 0..work.len() {
        for j in 0..work[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    Ok(compare(&analytic, &numeric))
}

/// Norm-wise relative error between two gradient vectors.
pub fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheck {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let denom = norm(analytic).max(norm(numeric));
    let rel_err = if denom < 1e-12 { norm(&diff) } else { norm(&diff) / denom };
    let max_abs_err = diff.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    GradCheck {
        rel_err,
        max_abs_err,
    }
}

/// Reduces a tensor-valued output to a scalar by a fixed weighted sum, so
/// every output element contributes a distinct gradient.
pub fn weighted_sum(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let w = Tensor::from_fn(&shape, |i| 0.5 + ((i * 7919) % 13) as f64 / 13.0);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

/// Worst result of one operation over several random instances.
#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub worst_rel_err: f64,
    pub tolerance: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_err <= self.tolerance
    }
}

type OpCase = fn(&mut Stream) -> Result<GradCheck>;

fn rand_t(rng: &mut Stream, shape: &[usize]) -> Tensor<f64> {
    rng::normal(rng, shape, 0.0, 1.0)
}

const H: f64 = 1e-6;

fn unary(rng: &mut Stream, f: fn(&mut Tape<f64>, Var) -> Result<Var>) -> Result<GradCheck> {
    let x = rand_t(rng, &[3, 4]);
    check(&[x], H, |t, v| {
        let y = f(t, v[0])?;
        weighted_sum(t, y)
    })
}

fn binary(rng: &mut Stream, f: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Result<GradCheck> {
    let a = rand_t(rng, &[3, 4]);
    let b = rand_t(rng, &[3, 4]);
    check(&[a, b], H, |t, v| {
        let y = f(t, v[0], v[1])?;
        weighted_sum(t, y)
    })
}

fn spd(rng: &mut Stream, m: usize) -> Tensor<f64> {
    let b = rand_t(rng, &[m + 2, m]);
    let g = b.transpose().matmul(&b).expect("square");
    let mut g = g;
    for i in 0..m {
        let v = g.at2(i, i);
        g.set2(i, i, v + 1.0);
    }
    g
}

fn cases() -> Vec<(&'static str, f64, OpCase)> {
    vec![
        ("affine", 1e-4, |r| {
            let ins = [rand_t(r, &[3, 4]), rand_t(r, &[4, 2]), rand_t(r, &[2])];
            check(&ins, H, |t, v| {
                let y = t.affine(v[0], v[1], v[2])?;
                weighted_sum(t, y)
            })
        }),
        ("matmul", 1e-4, |r| {
            let ins = [rand_t(r, &[3, 4]), rand_t(r, &[4, 2])];
            check(&ins, H, |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y)
            })
        }),
        ("matmul_transposed", 1e-4, |r| {
            let ins = [rand_t(r, &[4, 3]), rand_t(r, &[2, 4])];
            check(&ins, H, |t, v| {
                let a = t.matmul_t(v[0], v[1], true, true)?;
                let b = t.matmul_t(v[0], v[0], true, false)?;
                let c = t.matmul_t(v[1], v[1], false, true)?;
                let s1 = weighted_sum(t, a)?;
                let s2 = weighted_sum(t, b)?;
                let s3 = weighted_sum(t, c)?;
                let s = t.add(s1, s2)?;
                t.add(s, s3)
            })
        }),
        ("add", 1e-4, |r| binary(r, |t, a, b| t.add(a, b))),
        ("sub", 1e-4, |r| binary(r, |t, a, b| t.sub(a, b))),
        ("mul", 1e-4, |r| binary(r, |t, a, b| t.mul(a, b))),
        ("add_scalar", 1e-4, |r| unary(r, |t, a| Ok(t.add_scalar(a, 0.7)))),
        ("scale", 1e-4, |r| unary(r, |t, a| Ok(t.scale(a, -1.3)))),
        ("relu", 1e-4, |r| unary(r, |t, a| Ok(t.relu(a)))),
        ("sigmoid", 1e-4, |r| unary(r, |t, a| Ok(t.sigmoid(a)))),
        ("square", 1e-4, |r| unary(r, |t, a| Ok(t.square(a)))),
        ("log", 1e-4, |r| {
            let x = rng::uniform(r, &[3, 4], 0.5, 2.0);
            check(&[x], H, |t, v| {
                let y = t.log(v[0])?;
                weighted_sum(t, y)
            })
        }),
        ("sum", 1e-4, |r| unary(r, |t, a| {
            let s = t.sum(a);
            Ok(t.square(s))
        })),
        ("mean", 1e-4, |r| unary(r, |t, a| {
            let s = t.mean(a);
            Ok(t.square(s))
        })),
        ("reshape", 1e-4, |r| unary(r, |t, a| t.reshape(a, &[2, 6]))),
        ("conv2d_3x3", 1e-4, |r| {
            let ins = [rand_t(r, &[2, 2, 5, 4]), rand_t(r, &[3, 2, 3, 3]), rand_t(r, &[3])];
            check(&ins, H, |t, v| {
                let y = t.conv2d(v[0], v[1], v[2])?;
                weighted_sum(t, y)
            })
        }),
        ("conv2d_1x1", 1e-4, |r| {
            let ins = [rand_t(r, &[2, 3, 3, 3]), rand_t(r, &[2, 3, 1, 1]), rand_t(r, &[2])];
            check(&ins, H, |t, v| {
                let y = t.conv2d(v[0], v[1], v[2])?;
                weighted_sum(t, y)
            })
        }),
        ("deconv2x2", 1e-4, |r| {
            let ins = [rand_t(r, &[2, 2, 2, 3]), rand_t(r, &[2, 3, 2, 2]), rand_t(r, &[3])];
            check(&ins, H, |t, v| {
                let y = t.deconv2x2(v[0], v[1], v[2])?;
                weighted_sum(t, y)
            })
        }),
        ("max_pool2", 1e-4, |r| {
            let x = rand_t(r, &[2, 2, 4, 4]);
            check(&[x], H, |t, v| {
                let y = t.max_pool2(v[0])?;
                weighted_sum(t, y)
            })
        }),
        ("avg_pool", 1e-4, |r| {
            let x = rand_t(r, &[2, 2, 6, 6]);
            check(&[x], H, |t, v| {
                let y = t.avg_pool(v[0], 3)?;
                weighted_sum(t, y)
            })
        }),
        ("batchnorm_train", 1e-3, |r| {
            let ins = [rand_t(r, &[5, 3]), rand_t(r, &[3]), rand_t(r, &[3])];
            check(&ins, H, |t, v| {
                let (y, _) = t.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(t, y)
            })
        }),
        ("batchnorm_train_spatial", 1e-3, |r| {
            let ins = [rand_t(r, &[3, 2, 2, 2]), rand_t(r, &[2]), rand_t(r, &[2])];
            check(&ins, H, |t, v| {
                let (y, _) = t.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(t, y)
            })
        }),
        ("batchnorm_eval", 1e-3, |r| {
            let ins = [rand_t(r, &[4, 3]), rand_t(r, &[3]), rand_t(r, &[3])];
            check(&ins, H, |t, v| {
                let y = t.batchnorm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], 1e-5)?;
                weighted_sum(t, y)
            })
        }),
        ("softmax_cross_entropy", 1e-4, |r| {
            let x = rand_t(r, &[4, 5]);
            check(&[x], H, |t, v| t.softmax_cross_entropy(v[0], &[0, 3, 4, 1]))
        }),
        ("cross_entropy_per_sample", 1e-4, |r| {
            let x = rand_t(r, &[4, 5]);
            check(&[x], H, |t, v| {
                let y = t.cross_entropy_per_sample(v[0], &[2, 2, 0, 4])?;
                let y2 = t.square(y);
                Ok(t.sum(y2))
            })
        }),
        ("mse", 1e-4, |r| {
            let ins = [rand_t(r, &[3, 4]), rand_t(r, &[3, 4])];
            check(&ins, H, |t, v| t.mse(v[0], v[1]))
        }),
        ("chol_inverse", 1e-4, |r| {
            let a = spd(r, 4);
            check(&[a], H, |t, v| {
                let y = t.chol_inverse(v[0])?;
                weighted_sum(t, y)
            })
        }),
        ("select_columns", 1e-4, |r| unary(r, |t, a| t.select_columns(a, &[3, 0, 2]))),
        ("append_ones_column", 1e-4, |r| unary(r, |t, a| t.append_ones_column(a))),
        ("center_columns", 1e-4, |r| unary(r, |t, a| t.center_columns(a))),
        ("add_diagonal", 1e-4, |r| {
            let x = rand_t(r, &[3, 3]);
            check(&[x], H, |t, v| {
                let y = t.add_diagonal(v[0], 0.4)?;
                weighted_sum(t, y)
            })
        }),
        ("flatten", 1e-4, |r| {
            let x = rand_t(r, &[2, 2, 2, 2]);
            check(&[x], H, |t, v| {
                let y = t.flatten(v[0])?;
                weighted_sum(t, y)
            })
        }),
        ("composite_mse_affine", 1e-4, |r| {
            let ins = [rand_t(r, &[5, 4]), rand_t(r, &[4, 3]), rand_t(r, &[5, 3])];
            check(&ins, H, |t, v| {
                let y = t.matmul(v[0], v[1])?;
                t.mse(y, v[2])
            })
        }),
        ("correlation_loss", 1e-4, |r| {
            let ins = [rand_t(r, &[24, 4]), rand_t(r, &[24, 3])];
            check(&ins, H, |t, v| {
                crate::corr::correlation_loss(t, v[0], v[1], crate::corr::DEFAULT_EPS).map(|p| p.0)
            })
        }),
    ]
}

/// Checks every differentiable operation on `instances` random inputs each.
pub fn op_suite(instances: usize, seed: u64) -> Result<Vec<OpReport>> {
    let mut out = Vec::new();
    for (k, (op, tol, case)) in cases().into_iter().enumerate() {
        let mut r = rng::seeded(rng::derive(seed, k as u64));
        let mut worst = 0.0f64;
        for _ in 0..instances {
            worst = worst.max(case(&mut r)?.rel_err);
        }
        out.push(OpReport {
            op,
            instances,
            worst_rel_err: worst,
            tolerance: tol,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        for rep in op_suite(3, 11).unwrap() {
            assert!(rep.passed(), "{rep:?}");
        }
    }

    #[test]
    fn compare_detects_mismatch() {
        assert!(compare(&[1.0, 0.0], &[1.0, 0.0]).rel_err == 0.0);
        assert!(compare(&[1.0, 0.0], &[0.0, 1.0]).rel_err > 1.0);
    }
}
