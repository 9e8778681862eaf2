//! Invertible transforms with exact log-determinants.
//!
//! The same layer set serves two roles: a fixed random entangler that maps
//! the causal factors (plus nuisance dimensions) to observations, and a
//! trainable encoder that maps observations back to latents. Layers hold
//! their parameters in a [`ParamSet`] via ids, so a stack can either be
//! frozen (its own private set) or share the set of a trainable model.

use crate::diff::{Graph, ParamId, ParamSet, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Masked 2-layer conditioner with strictly autoregressive connectivity:
/// output block j depends only on inputs with index < j.
#[derive(Debug, Clone)]
pub struct MadeNet {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub dim: usize,
    pub hidden: usize,
    /// Output blocks per dimension: 1 for shift-only, 2 for shift+scale.
    pub out_blocks: usize,
}

impl MadeNet {
    fn mask1<S: Scalar>(dim: usize, hidden: usize) -> Tensor<S> {
        // degrees: input i has degree i+1, hidden h cycles 1..=dim-1
        let mut m = Tensor::zeros(&[dim, hidden]);
        if dim >= 2 {
            for h in 0..hidden {
                let dh = h % (dim - 1) + 1;
                for i in 0..dim {
                    if dh >= i + 1 {
                        m.data[i * hidden + h] = S::one();
                    }
                }
            }
        }
        m
    }

    fn mask2<S: Scalar>(dim: usize, hidden: usize, out_blocks: usize) -> Tensor<S> {
        let out = dim * out_blocks;
        let mut m = Tensor::zeros(&[hidden, out]);
        if dim >= 2 {
            for h in 0..hidden {
                let dh = h % (dim - 1) + 1;
                for j in 0..dim {
                    if j + 1 > dh {
                        for b in 0..out_blocks {
                            m.data[h * out + (b * dim + j)] = S::one();
                        }
                    }
                }
            }
        }
        m
    }

    fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        prefix: &str,
        dim: usize,
        hidden: usize,
        out_blocks: usize,
        rng: &mut Rng,
        zero_last: bool,
    ) -> Self {
        let bound1 = 1.0 / (dim.max(1) as f64).sqrt();
        let mut w1 = Tensor::zeros(&[dim, hidden]);
        for v in w1.data.iter_mut() {
            *v = S::from_f64(rng.uniform_symmetric(bound1));
        }
        let b1 = Tensor::zeros(&[hidden]);
        let out = dim * out_blocks;
        let mut w2 = Tensor::zeros(&[hidden, out]);
        if !zero_last {
            let bound2 = 1.0 / (hidden as f64).sqrt();
            for v in w2.data.iter_mut() {
                *v = S::from_f64(rng.uniform_symmetric(bound2));
            }
        }
        let b2 = Tensor::zeros(&[out]);
        MadeNet {
            w1: params.add(format!("{prefix}.w1"), w1),
            b1: params.add(format!("{prefix}.b1"), b1),
            w2: params.add(format!("{prefix}.w2"), w2),
            b2: params.add(format!("{prefix}.b2"), b2),
            dim,
            hidden,
            out_blocks,
        }
    }

    /// Plain forward: rows of x -> (n, dim*out_blocks).
    fn eval<S: Scalar>(&self, params: &ParamSet<S>, x: &Tensor<S>) -> Tensor<S> {
        let n = x.rows();
        let m1 = Self::mask1::<S>(self.dim, self.hidden);
        let m2 = Self::mask2::<S>(self.dim, self.hidden, self.out_blocks);
        let w1: Vec<S> = params
            .values(self.w1)
            .data
            .iter()
            .zip(m1.data.iter())
            .map(|(&w, &m)| w * m)
            .collect();
        let w2: Vec<S> = params
            .values(self.w2)
            .data
            .iter()
            .zip(m2.data.iter())
            .map(|(&w, &m)| w * m)
            .collect();
        let mut h = tensor::matmul(n, self.dim, self.hidden, &x.data, &w1);
        let b1 = &params.values(self.b1).data;
        for r in 0..n {
            for c in 0..self.hidden {
                let v = h[r * self.hidden + c] + b1[c];
                // swish
                h[r * self.hidden + c] = v * crate::flows::sigmoid_s(v);
            }
        }
        let out = self.dim * self.out_blocks;
        let mut y = tensor::matmul(n, self.hidden, out, &h, &w2);
        let b2 = &params.values(self.b2).data;
        for r in 0..n {
            for c in 0..out {
                y[r * out + c] += b2[c];
            }
        }
        Tensor::new(y, vec![n, out])
    }

    /// Tape forward with the same masked connectivity.
    fn eval_tape<S: Scalar>(&self, g: &mut Graph<S>, vars: &[Var], x: Var) -> Var {
        let m1 = g.constant(Self::mask1::<S>(self.dim, self.hidden));
        let m2 = g.constant(Self::mask2::<S>(self.dim, self.hidden, self.out_blocks));
        let w1 = g.mul(vars[self.w1.0], m1);
        let h = g.affine(x, w1, vars[self.b1.0]);
        let h = g.swish(h);
        let w2 = g.mul(vars[self.w2.0], m2);
        g.affine(h, w2, vars[self.b2.0])
    }
}

#[inline]
pub(crate) fn sigmoid_s<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

/// One invertible layer.
#[derive(Debug, Clone)]
pub enum FlowLayer {
    /// y = x * exp(log_scale) + shift, per dimension.
    ActNorm { log_scale: ParamId, shift: ParamId },
    /// y = x @ w. When `fixed_orthogonal`, w stays an orthogonal matrix and
    /// the log-determinant is exactly zero; otherwise w is free to train and
    /// the log-determinant is log|det w|.
    Mixing { w: ParamId, fixed_orthogonal: bool },
    /// Autoregressive affine coupling. Shift-only couplings are volume
    /// preserving; scaled couplings bound the scale through exp(tanh(.)).
    Coupling { net: MadeNet, scaled: bool },
}

/// Ordered invertible layers over a fixed dimension.
#[derive(Debug, Clone)]
pub struct FlowStack<S> {
    pub dim: usize,
    pub layers: Vec<FlowLayer>,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> FlowStack<S> {
    pub fn new(dim: usize, layers: Vec<FlowLayer>) -> Self {
        FlowStack { dim, layers, _marker: std::marker::PhantomData }
    }

    pub fn identity(dim: usize) -> Self {
        FlowStack::new(dim, Vec::new())
    }

    /// Ids of every parameter in the stack, in layer order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            match l {
                FlowLayer::ActNorm { log_scale, shift } => {
                    ids.push(*log_scale);
                    ids.push(*shift);
                }
                FlowLayer::Mixing { w, .. } => ids.push(*w),
                FlowLayer::Coupling { net, .. } => {
                    ids.extend([net.w1, net.b1, net.w2, net.b2]);
                }
            }
        }
        ids
    }

    /// Batched forward pass: rows of x -> (z, per-row log-determinant).
    pub fn forward(&self, params: &ParamSet<S>, x: &Tensor<S>) -> Result<(Tensor<S>, Vec<S>)> {
        assert_eq!(x.cols(), self.dim, "flow dim mismatch");
        let n = x.rows();
        let mut z = x.clone();
        let mut logdet = vec![S::zero(); n];
        for layer in &self.layers {
            match layer {
                FlowLayer::ActNorm { log_scale, shift } => {
                    let ls = &params.values(*log_scale).data;
                    let sh = &params.values(*shift).data;
                    let ld: S = ls.iter().copied().sum();
                    for r in 0..n {
                        for c in 0..self.dim {
                            let v = z.data[r * self.dim + c];
                            z.data[r * self.dim + c] = v * ls[c].exp() + sh[c];
                        }
                        logdet[r] += ld;
                    }
                }
                FlowLayer::Mixing { w, fixed_orthogonal } => {
                    let wv = &params.values(*w).data;
                    let out = tensor::matmul(n, self.dim, self.dim, &z.data, wv);
                    z.data = out;
                    if !fixed_orthogonal {
                        let (ld, _) = tensor::log_abs_det(self.dim, wv).ok_or_else(|| {
                            Error::NumericFailure {
                                op: "log_abs_det",
                                node: 0,
                                detail: "singular mixing matrix".into(),
                            }
                        })?;
                        for l in logdet.iter_mut() {
                            *l += ld;
                        }
                    }
                }
                FlowLayer::Coupling { net, scaled } => {
                    let cond = net.eval(params, &z);
                    for r in 0..n {
                        for c in 0..self.dim {
                            let shift = cond.data[r * cond.cols() + c];
                            if *scaled {
                                let t = cond.data[r * cond.cols() + self.dim + c].tanh();
                                let v = z.data[r * self.dim + c];
                                z.data[r * self.dim + c] = v * t.exp() + shift;
                                logdet[r] += t;
                            } else {
                                z.data[r * self.dim + c] += shift;
                            }
                        }
                    }
                }
            }
        }
        if !z.all_finite() {
            return Err(Error::NumericFailure {
                op: "flow_forward",
                node: 0,
                detail: "non-finite flow output".into(),
            });
        }
        Ok((z, logdet))
    }

    /// Inverse of [`FlowStack::forward`]. Couplings are inverted dimension
    /// by dimension in autoregressive order.
    pub fn inverse(&self, params: &ParamSet<S>, z: &Tensor<S>) -> Result<Tensor<S>> {
        assert_eq!(z.cols(), self.dim, "flow dim mismatch");
        let n = z.rows();
        let mut x = z.clone();
        for layer in self.layers.iter().rev() {
            match layer {
                FlowLayer::ActNorm { log_scale, shift } => {
                    let ls = &params.values(*log_scale).data;
                    let sh = &params.values(*shift).data;
                    for r in 0..n {
                        for c in 0..self.dim {
                            let v = x.data[r * self.dim + c];
                            x.data[r * self.dim + c] = (v - sh[c]) * (-ls[c]).exp();
                        }
                    }
                }
                FlowLayer::Mixing { w, .. } => {
                    let wv = &params.values(*w).data;
                    let inv = tensor::inverse(self.dim, wv).ok_or_else(|| Error::NumericFailure {
                        op: "inverse",
                        node: 0,
                        detail: "singular mixing matrix".into(),
                    })?;
                    let out = tensor::matmul(n, self.dim, self.dim, &x.data, &inv);
                    x.data = out;
                }
                FlowLayer::Coupling { net, scaled } => {
                    // x_j depends only on x_{<j}, so fill dimensions in order.
                    let mut partial = Tensor::zeros(&[n, self.dim]);
                    for j in 0..self.dim {
                        let cond = net.eval(params, &partial);
                        for r in 0..n {
                            let shift = cond.data[r * cond.cols() + j];
                            let y = x.data[r * self.dim + j];
                            let v = if *scaled {
                                let t = cond.data[r * cond.cols() + self.dim + j].tanh();
                                (y - shift) * (-t).exp()
                            } else {
                                y - shift
                            };
                            partial.data[r * self.dim + j] = v;
                        }
                    }
                    x = partial;
                }
            }
        }
        Ok(x)
    }

    /// Tape forward: returns the transformed batch and the per-row
    /// log-determinant as graph nodes. `vars` are the bound parameters of
    /// the owning set, aligned by id.
    pub fn forward_tape(&self, g: &mut Graph<S>, vars: &[Var], x: Var) -> (Var, Var) {
        let n = g.value(x).rows();
        let mut z = x;
        let zero = g.constant(Tensor::zeros(&[n]));
        let mut logdet = zero;
        for layer in &self.layers {
            match layer {
                FlowLayer::ActNorm { log_scale, shift } => {
                    let ls = vars[log_scale.0];
                    let scale = g.exp(ls);
                    let zs = g.mul_row(z, scale);
                    z = g.add_row(zs, vars[shift.0]);
                    let lsum = g.sum(ls);
                    let tiled = g.tile(lsum, n);
                    let tiled = g.reshape(tiled, &[n]);
                    logdet = g.add(logdet, tiled);
                }
                FlowLayer::Mixing { w, fixed_orthogonal } => {
                    z = g.matmul(z, vars[w.0]);
                    if !fixed_orthogonal {
                        let ld = g.log_abs_det(vars[w.0]);
                        let tiled = g.tile(ld, n);
                        let tiled = g.reshape(tiled, &[n]);
                        logdet = g.add(logdet, tiled);
                    }
                }
                FlowLayer::Coupling { net, scaled } => {
                    let cond = net.eval_tape(g, vars, z);
                    let shift = g.col_slice(cond, 0, self.dim);
                    if *scaled {
                        let sraw = g.col_slice(cond, self.dim, 2 * self.dim);
                        let t = g.tanh(sraw);
                        let s = g.exp(t);
                        let zs = g.mul(z, s);
                        z = g.add(zs, shift);
                        let rs = g.row_sums(t);
                        logdet = g.add(logdet, rs);
                    } else {
                        z = g.add(z, shift);
                    }
                }
            }
        }
        (z, logdet)
    }
}

/// A frozen flow together with its private parameter set.
#[derive(Debug, Clone)]
pub struct FrozenFlow<S> {
    pub stack: FlowStack<S>,
    pub params: ParamSet<S>,
}

impl<S: Scalar> FrozenFlow<S> {
    pub fn identity(dim: usize) -> Self {
        FrozenFlow { stack: FlowStack::identity(dim), params: ParamSet::new() }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Vec<S>)> {
        self.stack.forward(&self.params, x)
    }

    pub fn inverse(&self, z: &Tensor<S>) -> Result<Tensor<S>> {
        self.stack.inverse(&self.params, z)
    }
}

/// Builds the fixed 6-layer entangler and calibrates it on the given sample
/// batch: activation normalizations are initialized in sequence so each
/// produces roughly zero-mean/unit-std outputs, coupling conditioners are
/// rescaled to an average output standard deviation of 0.2, and the mixing
/// matrix is a random orthogonal matrix. The result is volume preserving up
/// to the activation normalizations.
pub fn make_entangler<S: Scalar>(dim: usize, rng: &mut Rng, calib: &Tensor<S>) -> Result<FrozenFlow<S>> {
    assert_eq!(calib.cols(), dim, "calibration batch dim mismatch");
    let mut params = ParamSet::new();
    let hidden = 32;
    let rng_net = rng.stream("entangler_nets");

    let mut layers = Vec::new();
    for (li, kind) in ["an", "cpl", "an", "mix", "cpl", "an"].iter().enumerate() {
        match *kind {
            "an" => {
                let log_scale = params.add(format!("ent.{li}.log_scale"), Tensor::zeros(&[dim]));
                let shift = params.add(format!("ent.{li}.shift"), Tensor::zeros(&[dim]));
                layers.push(FlowLayer::ActNorm { log_scale, shift });
            }
            "cpl" => {
                let net = MadeNet::new(
                    &mut params,
                    &format!("ent.{li}.cond"),
                    dim,
                    hidden,
                    1,
                    &mut rng_net.substream(li as u64),
                    false,
                );
                layers.push(FlowLayer::Coupling { net, scaled: false });
            }
            "mix" => {
                let mut m = Tensor::zeros(&[dim, dim]);
                let mut r = rng.stream("entangler_mix");
                r.fill_normal(&mut m.data);
                let q = tensor::orthogonalize(dim, &m.data);
                let w = params.add(format!("ent.{li}.w"), Tensor::new(q, vec![dim, dim]));
                layers.push(FlowLayer::Mixing { w, fixed_orthogonal: true });
            }
            _ => unreachable!(),
        }
    }
    let stack = FlowStack::new(dim, layers);

    // Sequential data-dependent initialization.
    let mut batch = calib.clone();
    let n = batch.rows();
    for layer in &stack.layers {
        match layer {
            FlowLayer::ActNorm { log_scale, shift } => {
                for c in 0..dim {
                    let mean: S = (0..n).map(|r| batch.data[r * dim + c]).sum::<S>() / S::from_usize(n);
                    let var: S = (0..n)
                        .map(|r| {
                            let d = batch.data[r * dim + c] - mean;
                            d * d
                        })
                        .sum::<S>()
                        / S::from_usize(n);
                    let std = var.sqrt().max(S::from_f64(1e-6));
                    params.values_mut(*log_scale).data[c] = -std.ln();
                    params.values_mut(*shift).data[c] = -mean / std;
                }
            }
            FlowLayer::Coupling { net, .. } => {
                // Rescale the final conditioner layer so the mean per-output
                // standard deviation on the calibration batch is 0.2.
                let cond = net.eval(&params, &batch);
                let mut mean_std = S::zero();
                for c in 0..dim {
                    let mean: S = (0..n).map(|r| cond.data[r * dim + c]).sum::<S>() / S::from_usize(n);
                    let var: S = (0..n)
                        .map(|r| {
                            let d = cond.data[r * dim + c] - mean;
                            d * d
                        })
                        .sum::<S>()
                        / S::from_usize(n);
                    mean_std += var.sqrt();
                }
                mean_std = mean_std / S::from_usize(dim);
                if mean_std > S::from_f64(1e-12) {
                    let factor = S::from_f64(0.2) / mean_std;
                    for v in params.values_mut(net.w2).data.iter_mut() {
                        *v *= factor;
                    }
                    for v in params.values_mut(net.b2).data.iter_mut() {
                        *v *= factor;
                    }
                }
            }
            FlowLayer::Mixing { .. } => {}
        }
        let frozen = FrozenFlow { stack: FlowStack::new(dim, vec![layer.clone()]), params: clone_set(&params) };
        let (next, _) = frozen.forward(&batch)?;
        batch = next;
    }

    Ok(FrozenFlow { stack, params })
}

fn clone_set<S: Scalar>(params: &ParamSet<S>) -> ParamSet<S> {
    let mut out = ParamSet::new();
    for p in params.entries() {
        out.add(p.name.clone(), p.values.clone());
    }
    out
}

/// Registers a trainable encoder flow in `params`: `blocks` repetitions of
/// ActNorm -> Mixing -> scaled coupling, initialized to the identity map
/// (unit scales, zero shifts, identity mixing, zeroed final conditioner
/// layers) so training starts from a near-identity transform.
pub fn make_encoder<S: Scalar>(
    params: &mut ParamSet<S>,
    dim: usize,
    blocks: usize,
    hidden: usize,
    rng: &mut Rng,
) -> FlowStack<S> {
    let mut layers = Vec::new();
    for b in 0..blocks {
        let log_scale = params.add(format!("enc.{b}.log_scale"), Tensor::zeros(&[dim]));
        let shift = params.add(format!("enc.{b}.shift"), Tensor::zeros(&[dim]));
        layers.push(FlowLayer::ActNorm { log_scale, shift });

        let mut eye = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            eye.data[i * dim + i] = S::one();
        }
        let w = params.add(format!("enc.{b}.mix"), eye);
        layers.push(FlowLayer::Mixing { w, fixed_orthogonal: false });

        let net = MadeNet::new(params, &format!("enc.{b}.cond"), dim, hidden, 2, &mut rng.substream(b as u64), true);
        layers.push(FlowLayer::Coupling { net, scaled: true });
    }
    FlowStack::new(dim, layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::value_and_grad;
    use crate::gradcheck::finite_diff_max_err;

    fn random_batch(rng: &mut Rng, n: usize, d: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[n, d]);
        rng.fill_normal(&mut t.data);
        t
    }

    fn random_stack(rng: &mut Rng, dim: usize) -> (FlowStack<f64>, ParamSet<f64>) {
        let mut params = ParamSet::new();
        let mut layers = Vec::new();
        // one of each layer type with random parameters
        let mut ls = Tensor::zeros(&[dim]);
        let mut sh = Tensor::zeros(&[dim]);
        for v in ls.data.iter_mut() {
            *v = rng.normal() * 0.3;
        }
        for v in sh.data.iter_mut() {
            *v = rng.normal();
        }
        layers.push(FlowLayer::ActNorm {
            log_scale: params.add("ls", ls),
            shift: params.add("sh", sh),
        });
        let mut m = Tensor::zeros(&[dim, dim]);
        rng.fill_normal(&mut m.data);
        for i in 0..dim {
            m.data[i * dim + i] += 2.0; // keep well conditioned
        }
        layers.push(FlowLayer::Mixing { w: params.add("w", m), fixed_orthogonal: false });
        let net = MadeNet::new(&mut params, "cond", dim, 16, 2, rng, false);
        layers.push(FlowLayer::Coupling { net, scaled: true });
        (FlowStack::new(dim, layers), params)
    }

    #[test]
    fn empty_stack_is_identity() {
        let f = FrozenFlow::<f64>::identity(3);
        let x = Tensor::new(vec![1.0, -2.0, 0.5], vec![1, 3]);
        let (z, ld) = f.forward(&x).unwrap();
        assert_eq!(z.data, x.data);
        assert_eq!(ld[0], 0.0);
    }

    #[test]
    fn orthogonal_mixing_has_zero_logdet() {
        let mut rng = Rng::new(5, 0);
        let dim = 4;
        let mut params = ParamSet::new();
        let mut m = Tensor::zeros(&[dim, dim]);
        rng.fill_normal(&mut m.data);
        let q = tensor::orthogonalize(dim, &m.data);
        let w = params.add("w", Tensor::new(q, vec![dim, dim]));
        let stack = FlowStack::new(dim, vec![FlowLayer::Mixing { w, fixed_orthogonal: true }]);
        let x = random_batch(&mut rng, 10, dim);
        let (_, ld) = stack.forward(&params, &x).unwrap();
        assert!(ld.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn actnorm_inverse_closed_form() {
        let mut params = ParamSet::new();
        let ls = params.add("ls", Tensor::new(vec![0.7f64, -0.2], vec![2]));
        let sh = params.add("sh", Tensor::new(vec![1.5f64, -3.0], vec![2]));
        let stack = FlowStack::new(2, vec![FlowLayer::ActNorm { log_scale: ls, shift: sh }]);
        let z = Tensor::new(vec![2.0f64, 0.5], vec![1, 2]);
        let x = stack.inverse(&params, &z).unwrap();
        // inverse(z) = (z - b) / s with s = exp(log_scale)
        assert!((x.data[0] - (2.0 - 1.5) / 0.7f64.exp()).abs() < 1e-14);
        assert!((x.data[1] - (0.5 + 3.0) / (-0.2f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn random_stack_round_trips() {
        let mut rng = Rng::new(21, 0);
        let (stack, params) = random_stack(&mut rng, 5);
        let x = random_batch(&mut rng, 200, 5);
        let (z, _) = stack.forward(&params, &x).unwrap();
        let back = stack.inverse(&params, &z).unwrap();
        let max_err = x
            .data
            .iter()
            .zip(back.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-6, "round trip err {max_err}");
    }

    /// Central-difference Jacobian of the stack at a point, assembled
    /// column by column; the reference for the analytic log-determinant.
    fn numeric_logdet(stack: &FlowStack<f64>, params: &ParamSet<f64>, x: &[f64]) -> f64 {
        let d = x.len();
        let h = 1e-6;
        let mut jac = vec![0.0; d * d];
        for j in 0..d {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += h;
            xm[j] -= h;
            let (zp, _) = stack.forward(params, &Tensor::new(xp, vec![1, d])).unwrap();
            let (zm, _) = stack.forward(params, &Tensor::new(xm, vec![1, d])).unwrap();
            for i in 0..d {
                jac[i * d + j] = (zp.data[i] - zm.data[i]) / (2.0 * h);
            }
        }
        let (ld, _) = tensor::log_abs_det(d, &jac).unwrap();
        ld
    }

    #[test]
    fn analytic_logdet_matches_numeric_jacobian() {
        let mut rng = Rng::new(33, 0);
        for dim in [2usize, 5, 8] {
            let (stack, params) = random_stack(&mut rng.substream(dim as u64), dim);
            let x = random_batch(&mut rng, 1, dim);
            let (_, ld) = stack.forward(&params, &x).unwrap();
            let ld_num = numeric_logdet(&stack, &params, x.row(0));
            assert!(
                (ld[0] - ld_num).abs() < 1e-4,
                "dim {dim}: analytic {} vs numeric {}",
                ld[0],
                ld_num
            );
        }
    }

    #[test]
    fn coupling_inverse_jacobian_sparsity() {
        // Perturbing z_j only moves x coordinates >= j through a coupling.
        let mut rng = Rng::new(8, 0);
        let dim = 5;
        let mut params = ParamSet::new();
        let net = MadeNet::new(&mut params, "c", dim, 16, 2, &mut rng, false);
        let stack = FlowStack::new(dim, vec![FlowLayer::Coupling { net, scaled: true }]);
        let z = random_batch(&mut rng, 1, dim);
        let x0 = stack.inverse(&params, &z).unwrap();
        for j in 0..dim {
            let mut zp = z.clone();
            zp.data[j] += 0.1;
            let x1 = stack.inverse(&params, &zp).unwrap();
            for i in 0..j {
                assert_eq!(x0.data[i], x1.data[i], "x_{i} must not react to z_{j}");
            }
            assert!((x0.data[j] - x1.data[j]).abs() > 1e-12);
        }
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let mut rng = Rng::new(55, 0);
        let (stack, params) = random_stack(&mut rng, 4);
        let x = random_batch(&mut rng, 7, 4);
        let (z_plain, ld_plain) = stack.forward(&params, &x).unwrap();
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let xv = g.constant(x);
        let (zv, ldv) = stack.forward_tape(&mut g, &vars, xv);
        for (a, b) in g.value(zv).data.iter().zip(z_plain.data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g.value(ldv).data.iter().zip(ld_plain.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encoder_initializes_near_identity_and_logdet_grads_check_out() {
        let mut rng = Rng::new(77, 0);
        let mut params = ParamSet::new();
        let enc = make_encoder(&mut params, 6, 4, 32, &mut rng);
        let x = random_batch(&mut rng, 20, 6);
        let (z, ld) = enc.forward(&params, &x).unwrap();
        let rel: f64 = x
            .data
            .iter()
            .zip(z.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(rel < 1e-9, "fresh encoder should be the identity, err {rel}");
        assert!(ld.iter().all(|&v| v.abs() < 1e-12));

        // Gradient of mean(logdet) + mean(z^2) w.r.t. all encoder params.
        // Perturb parameters away from the exact identity first so the
        // check probes a generic point.
        let mut r2 = rng.stream("perturb");
        for p in params.entries_mut() {
            for v in p.values.data.iter_mut() {
                *v += 0.05 * r2.normal();
            }
        }
        let x_small = random_batch(&mut rng, 3, 6);
        let enc2 = enc.clone();
        let err = finite_diff_max_err(&params, 1e-5, move |g, vars| {
            let xv = g.constant(x_small.clone());
            let (zv, ldv) = enc2.forward_tape(g, vars, xv);
            let z2 = g.mul(zv, zv);
            let a = g.mean(z2);
            let b = g.mean(ldv);
            g.add(a, b)
        });
        assert!(err < 1e-4, "encoder grad err {err}");
    }

    #[test]
    fn encoder_round_trip_after_random_perturbation() {
        let mut rng = Rng::new(99, 0);
        let mut params = ParamSet::new();
        let enc = make_encoder(&mut params, 8, 4, 32, &mut rng);
        let mut r2 = rng.stream("perturb");
        for p in params.entries_mut() {
            for v in p.values.data.iter_mut() {
                *v += 0.1 * r2.normal();
            }
        }
        let x = random_batch(&mut rng, 1000, 8);
        let (z, _) = enc.forward(&params, &x).unwrap();
        let back = enc.inverse(&params, &z).unwrap();
        let max_err = x
            .data
            .iter()
            .zip(back.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-6, "round trip err {max_err}");
    }

    #[test]
    fn value_and_grad_through_flow_is_pure() {
        let mut rng = Rng::new(3, 0);
        let mut params = ParamSet::new();
        let enc = make_encoder(&mut params, 3, 2, 16, &mut rng);
        let x = random_batch(&mut rng, 4, 3);
        let before = params.flatten();
        let enc2 = enc.clone();
        let x2 = x.clone();
        let _ = value_and_grad(&params, move |g, vars| {
            let xv = g.constant(x2.clone());
            let (zv, _) = enc2.forward_tape(g, vars, xv);
            let sq = g.mul(zv, zv);
            g.mean(sq)
        })
        .unwrap();
        assert_eq!(params.flatten(), before);
    }
}
