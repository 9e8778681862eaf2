//! Central finite-difference verification of tape gradients.
//!
//! Used by the unit tests and by the `verify` command: each registered
//! primitive is exercised on random inputs and its analytic gradient is
//! compared against a two-sided difference quotient.

use crate::diff::{value_and_grad, Graph, ParamSet, Var};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Relative error between analytic and finite-difference gradients.
/// The denominator floor makes the comparison absolute for tiny gradients,
/// where the difference quotient itself carries no more precision.
fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-2)
}

/// Compares the analytic gradient of `build` against central finite
/// differences over every parameter entry. Returns the maximum relative
/// error. `step` is the half-width of the difference stencil.
pub fn finite_diff_max_err<S: Scalar>(
    params: &ParamSet<S>,
    step: f64,
    build: impl Fn(&mut Graph<S>, &[Var]) -> Var,
) -> f64 {
    let (_, analytic) = value_and_grad(params, &build).expect("loss must be finite for a gradient check");
    let mut worst = 0.0f64;
    let mut work = clone_params(params);
    for (pi, entry) in params.entries().iter().enumerate() {
        for ei in 0..entry.values.len() {
            let orig = entry.values.data[ei];
            work.values_mut(crate::diff::ParamId(pi)).data[ei] = orig + S::from_f64(step);
            let plus = eval_loss(&work, &build);
            work.values_mut(crate::diff::ParamId(pi)).data[ei] = orig - S::from_f64(step);
            let minus = eval_loss(&work, &build);
            work.values_mut(crate::diff::ParamId(pi)).data[ei] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let an = analytic[pi].data[ei].to_f64();
            let e = rel_err(an, fd);
            if e > worst {
                worst = e;
            }
        }
    }
    worst
}

fn clone_params<S: Scalar>(params: &ParamSet<S>) -> ParamSet<S> {
    let mut out = ParamSet::new();
    for p in params.entries() {
        out.add(p.name.clone(), p.values.clone());
    }
    out
}

fn eval_loss<S: Scalar>(params: &ParamSet<S>, build: &impl Fn(&mut Graph<S>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let loss = build(&mut g, &vars);
    g.value(loss).item().to_f64()
}

/// One randomized gradient check for a named primitive.
pub struct PrimitiveCheck<S> {
    pub name: &'static str,
    #[allow(clippy::type_complexity)]
    run: Box<dyn Fn(&mut Rng) -> f64 + Send + Sync>,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> PrimitiveCheck<S> {
    /// Maximum relative error for one random input draw.
    pub fn run_once(&self, rng: &mut Rng) -> f64 {
        (self.run)(rng)
    }
}

fn random_tensor<S: Scalar>(rng: &mut Rng, shape: &[usize]) -> Tensor<S> {
    let mut t = Tensor::zeros(shape);
    rng.fill_normal(&mut t.data);
    t
}

/// Random values bounded away from a kink or clamp boundary so the
/// difference stencil stays on one side.
fn random_tensor_away_from<S: Scalar>(rng: &mut Rng, shape: &[usize], points: &[f64]) -> Tensor<S> {
    let mut t = random_tensor::<S>(rng, shape);
    for v in t.data.iter_mut() {
        let mut x = v.to_f64();
        for &p in points {
            if (x - p).abs() < 1e-2 {
                x = p + if x >= p { 1e-2 } else { -1e-2 } + (x - p);
            }
        }
        *v = S::from_f64(x);
    }
    t
}

fn weighted_scalar_loss<S: Scalar>(g: &mut Graph<S>, out: Var, rng: &mut Rng) -> Var {
    let shape = g.shape(out).to_vec();
    let w = g.constant(random_tensor::<S>(rng, &shape));
    let prod = g.mul(out, w);
    g.sum(prod)
}

macro_rules! check {
    ($name:literal, $rng:ident, $params:ident, $build:expr) => {
        PrimitiveCheck {
            name: $name,
            run: Box::new(move |$rng: &mut Rng| {
                let mut $params = ParamSet::<S>::new();
                let build = $build;
                finite_diff_max_err(&$params, 1e-5, build)
            }),
            _marker: std::marker::PhantomData,
        }
    };
}

/// Every differentiable registered primitive with a randomized input
/// builder. `detach` is excluded by design: its backward is identically
/// zero, which is asserted separately.
#[allow(clippy::too_many_lines)]
pub fn primitive_checks<S: Scalar>() -> Vec<PrimitiveCheck<S>> {
    vec![
        check!("tanh", rng, p, {
            p.add("x", random_tensor::<S>(rng, &[3, 4]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.tanh(v[0]);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("sigmoid", rng, p, {
            p.add("x", random_tensor::<S>(rng, &[3, 4]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.sigmoid(v[0]);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("softplus", rng, p, {
            p.add("x", random_tensor::<S>(rng, &[3, 4]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.softplus(v[0]);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("leaky_relu", rng, p, {
            p.add("x", random_tensor_away_from::<S>(rng, &[3, 4], &[0.0]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.leaky_relu(v[0], 0.1);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("exp", rng, p, {
            p.add("x", random_tensor::<S>(rng, &[3, 4]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.exp(v[0]);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("neg", rng, p, {
            p.add("x", random_tensor::<S>(rng, &[3, 4]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.neg(v[0]);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("scale", rng, p, {
            p.add("x", random_tensor::<S>(rng, &[3, 4]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.scale(v[0], 1.7);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("add_scalar", rng, p, {
            p.add("x", random_tensor::<S>(rng, &[3, 4]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.add_scalar(v[0], -0.4);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("clamp", rng, p, {
            p.add("x", random_tensor_away_from::<S>(rng, &[3, 4], &[-1.0, 1.0]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.clamp(v[0], -1.0, 1.0);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("add", rng, p, {
            p.add("a", random_tensor::<S>(rng, &[3, 4]));
            p.add("b", random_tensor::<S>(rng, &[3, 4]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.add(v[0], v[1]);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("sub", rng, p, {
            p.add("a", random_tensor::<S>(rng, &[3, 4]));
            p.add("b", random_tensor::<S>(rng, &[3, 4]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.sub(v[0], v[1]);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("mul", rng, p, {
            p.add("a", random_tensor::<S>(rng, &[3, 4]));
            p.add("b", random_tensor::<S>(rng, &[3, 4]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.mul(v[0], v[1]);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("add_row", rng, p, {
            p.add("x", random_tensor::<S>(rng, &[3, 4]));
            p.add("b", random_tensor::<S>(rng, &[4]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.add_row(v[0], v[1]);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("mul_row", rng, p, {
            p.add("x", random_tensor::<S>(rng, &[3, 4]));
            p.add("b", random_tensor::<S>(rng, &[4]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.mul_row(v[0], v[1]);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("col_scale", rng, p, {
            p.add("x", random_tensor::<S>(rng, &[3, 4]));
            p.add("c", random_tensor::<S>(rng, &[3]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.col_scale(v[0], v[1]);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("tile", rng, p, {
            p.add("x", random_tensor::<S>(rng, &[2, 3]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.tile(v[0], 4);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("affine", rng, p, {
            p.add("x", random_tensor::<S>(rng, &[3, 4]));
            p.add("w", random_tensor::<S>(rng, &[4, 2]));
            p.add("b", random_tensor::<S>(rng, &[2]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.affine(v[0], v[1], v[2]);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("matmul", rng, p, {
            p.add("a", random_tensor::<S>(rng, &[3, 4]));
            p.add("b", random_tensor::<S>(rng, &[4, 2]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.matmul(v[0], v[1]);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("bmm", rng, p, {
            p.add("a", random_tensor::<S>(rng, &[2, 3, 4]));
            p.add("b", random_tensor::<S>(rng, &[2, 4, 2]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.bmm(v[0], v[1]);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("bmm_t", rng, p, {
            p.add("a", random_tensor::<S>(rng, &[2, 3, 4]));
            p.add("b", random_tensor::<S>(rng, &[2, 5, 4]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.bmm_t(v[0], v[1]);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("sum", rng, p, {
            p.add("x", random_tensor::<S>(rng, &[3, 4]));
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.sum(v[0]);
                g.scale(y, 0.7)
            }
        }),
        check!("row_sums", rng, p, {
            p.add("x", random_tensor::<S>(rng, &[3, 4]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.row_sums(v[0]);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("log_sum_exp_rows", rng, p, {
            p.add("x", random_tensor::<S>(rng, &[3, 4]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.log_sum_exp_rows(v[0]);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("log_softmax_rows", rng, p, {
            p.add("x", random_tensor::<S>(rng, &[3, 4]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.log_softmax_rows(v[0]);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("gaussian_log_density", rng, p, {
            p.add("x", random_tensor::<S>(rng, &[3, 4]));
            p.add("mean", random_tensor::<S>(rng, &[3, 4]));
            p.add("logstd", {
                let mut t = random_tensor::<S>(rng, &[3, 4]);
                for v in t.data.iter_mut() {
                    *v = *v * S::from_f64(0.3);
                }
                t
            });
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.gaussian_log_density(v[0], v[1], v[2]);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("trace_expm", rng, p, {
            let mut t = random_tensor::<S>(rng, &[4, 4]);
            for v in t.data.iter_mut() {
                *v = S::from_f64(v.to_f64().abs().min(1.0) * 0.5);
            }
            p.add("a", t);
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.trace_expm(v[0]);
                g.scale(y, 0.9)
            }
        }),
        check!("log_abs_det", rng, p, {
            // Diagonally dominant input keeps the matrix well conditioned.
            let mut t = random_tensor::<S>(rng, &[3, 3]);
            for i in 0..3 {
                t.data[i * 3 + i] += S::from_f64(3.0);
            }
            p.add("w", t);
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.log_abs_det(v[0]);
                g.scale(y, 1.1)
            }
        }),
        check!("concat_cols", rng, p, {
            p.add("a", random_tensor::<S>(rng, &[3, 2]));
            p.add("b", random_tensor::<S>(rng, &[3, 3]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.concat_cols(&[v[0], v[1]]);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("col_slice", rng, p, {
            p.add("x", random_tensor::<S>(rng, &[3, 5]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.col_slice(v[0], 1, 4);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("plane_slice", rng, p, {
            p.add("x", random_tensor::<S>(rng, &[2, 3, 4]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.plane_slice(v[0], 1);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("gather_rows", rng, p, {
            p.add("x", random_tensor::<S>(rng, &[5, 3]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.gather_rows(v[0], &[0, 2, 2, 4]);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
        check!("reshape", rng, p, {
            p.add("x", random_tensor::<S>(rng, &[3, 4]));
            let r = rng.clone();
            move |g: &mut Graph<S>, v: &[Var]| {
                let y = g.reshape(v[0], &[2, 6]);
                weighted_scalar_loss(g, y, &mut r.stream("w"))
            }
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes_on_100_random_inputs() {
        let checks = primitive_checks::<f64>();
        let rng = Rng::new(2024, 0);
        for c in &checks {
            let mut worst = 0.0f64;
            for i in 0..100 {
                let mut r = rng.stream(c.name).substream(i);
                let e = c.run_once(&mut r);
                if e > worst {
                    worst = e;
                }
            }
            assert!(worst < 1e-4, "primitive {} max rel err {worst}", c.name);
        }
    }

    #[test]
    fn two_layer_mlp_gradient_matches_finite_differences() {
        let mut rng = Rng::new(7, 0);
        let mut p = ParamSet::<f64>::new();
        p.add("w1", random_tensor(&mut rng, &[5, 8]));
        p.add("b1", random_tensor(&mut rng, &[8]));
        p.add("w2", random_tensor(&mut rng, &[8, 2]));
        p.add("b2", random_tensor(&mut rng, &[2]));
        let x = random_tensor::<f64>(&mut rng, &[6, 5]);
        let t = random_tensor::<f64>(&mut rng, &[6, 2]);
        let err = finite_diff_max_err(&p, 1e-5, move |g, v| {
            let xv = g.constant(x.clone());
            let tv = g.constant(t.clone());
            let h = g.affine(xv, v[0], v[1]);
            let h = g.tanh(h);
            let y = g.affine(h, v[2], v[3]);
            let d = g.sub(y, tv);
            let sq = g.mul(d, d);
            g.mean(sq)
        });
        assert!(err < 1e-4, "mlp grad err {err}");
    }

    #[test]
    fn check_catches_a_wrong_gradient() {
        // A loss whose tape gradient is deliberately inconsistent with its
        // value: value uses x^2 but the gradient path sees stop(x)*x, whose
        // derivative is x rather than 2x. The checker must flag it.
        let mut p = ParamSet::<f64>::new();
        p.add("x", Tensor::scalar(1.5));
        let err = finite_diff_max_err(&p, 1e-5, |g, v| {
            let d = g.detach(v[0]);
            g.mul(d, v[0])
        });
        assert!(err > 1e-2, "sign/magnitude error must be detected, got {err}");
    }
}
