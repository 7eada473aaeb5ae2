//! Dense feed-forward network with a linear scalar output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    #[inline]
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output `a`.
    #[inline]
    fn derivative(&self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(crate::Error::Parse(format!("unknown activation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activations: Vec<Activation>,
    pub learning_rate: f64,
}

impl MlpSpec {
    /// Same activation on every hidden layer.
    pub fn uniform(input_dim: usize, hidden: Vec<usize>, activation: Activation, learning_rate: f64) -> Self {
        let activations = vec![activation; hidden.len()];
        Self { input_dim, hidden, activations, learning_rate }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.iter().any(|w| *w == 0) {
            return invalid("layer widths must be at least 1");
        }
        if self.activations.len() != self.hidden.len() {
            return invalid(format!(
                "{} activations given for {} hidden layers",
                self.activations.len(),
                self.hidden.len()
            ));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return invalid(format!("learning rate must be non-negative, got {}", self.learning_rate));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(1);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Trainable parameters of `spec`: sum of `(fan_in + 1) * fan_out`.
pub fn count_params(spec: &MlpSpec) -> usize {
    spec.layer_shapes().iter().map(|(i, o)| (i + 1) * o).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Offset of the `fan_in x fan_out` weight block, stored input-major.
    pub w: usize,
    pub b: usize,
}

/// Network whose parameters live in one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: Vec<f64>,
    pub(crate) layout: Vec<LayerLayout>,
}

fn layout_for(spec: &MlpSpec) -> Vec<LayerLayout> {
    let mut off = 0;
    spec.layer_shapes()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let l = LayerLayout { fan_in, fan_out, w: off, b: off + fan_in * fan_out };
            off += (fan_in + 1) * fan_out;
            l
        })
        .collect()
}

impl Mlp {
    /// Glorot-uniform weights and zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layout = layout_for(spec);
        let mut params = vec![0.0; count_params(spec)];
        for l in &layout {
            let limit = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
            for w in &mut params[l.w..l.b] {
                *w = rng.gen_range(-limit..=limit);
            }
        }
        Ok(Self { spec: spec.clone(), params, layout })
    }

    pub fn from_params(spec: &MlpSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != count_params(spec) {
            return invalid(format!("expected {} parameters, got {}", count_params(spec), params.len()));
        }
        Ok(Self { spec: spec.clone(), layout: layout_for(spec), params })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_layers(&self) -> usize {
        self.layout.len()
    }

    /// Input-major weights of layer `l` (`w[i * fan_out + o]`) and its biases.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let ly = self.layout[l];
        (&self.params[ly.w..ly.b], &self.params[ly.b..ly.b + ly.fan_out])
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let ly = self.layout[l];
        let (w, rest) = self.params[ly.w..ly.b + ly.fan_out].split_at_mut(ly.b - ly.w);
        (w, rest)
    }

    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.layout[l].fan_in, self.layout[l].fan_out)
    }

    /// Predictions for `x` (row-major, `input_dim` columns).
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.spec.input_dim;
        if x.len() % d != 0 {
            return invalid(format!("input length {} is not a multiple of {d}", x.len()));
        }
        let n = x.len() / d;
        let mut ws = Workspace::default();
        let mut out = Vec::with_capacity(n);
        for chunk in x.chunks(256 * d) {
            let rows = chunk.len() / d;
            self.forward_batch(chunk, rows, &mut ws);
            out.extend_from_slice(&ws.acts[self.n_layers()][..rows]);
        }
        Ok(out)
    }

    pub(crate) fn forward_batch(&self, x: &[f64], rows: usize, ws: &mut Workspace) {
        let nl = self.n_layers();
        ws.acts.resize_with(nl + 1, Vec::new);
        ws.acts[0].clear();
        ws.acts[0].extend_from_slice(&x[..rows * self.spec.input_dim]);
        for (l, ly) in self.layout.iter().enumerate() {
            let (head, tail) = ws.acts.split_at_mut(l + 1);
            let a_in = &head[l];
            let z = &mut tail[0];
            z.resize(rows * ly.fan_out, 0.0);
            let w = &self.params[ly.w..ly.b];
            let b = &self.params[ly.b..ly.b + ly.fan_out];
            for r in 0..rows {
                z[r * ly.fan_out..(r + 1) * ly.fan_out].copy_from_slice(b);
            }
            gemm(rows, ly.fan_in, ly.fan_out, a_in, (ly.fan_in, 1), w, (ly.fan_out, 1), 1.0, z);
            if l + 1 < nl {
                let act = self.spec.activations[l];
                z.iter_mut().for_each(|v| *v = act.apply(*v));
            }
        }
    }

    /// Mean squared error and mean absolute error on a batch; the MSE gradient
    /// overwrites `grad`, which must have `n_params` entries.
    pub(crate) fn batch_gradient(&self, x: &[f64], y: &[f64], ws: &mut Workspace, grad: &mut [f64]) -> (f64, f64) {
        let rows = y.len();
        self.forward_batch(x, rows, ws);
        let nl = self.n_layers();
        let pred = &ws.acts[nl];
        let mut sse = 0.0;
        let mut sae = 0.0;
        ws.delta.clear();
        for (p, t) in pred.iter().zip(y) {
            let r = p - t;
            sse += r * r;
            sae += r.abs();
            ws.delta.push(2.0 * r / rows as f64);
        }
        for l in (0..nl).rev() {
            let ly = self.layout[l];
            let a_in = &ws.acts[l];
            let (gw, gb) = grad[ly.w..ly.b + ly.fan_out].split_at_mut(ly.b - ly.w);
            gb.iter_mut().for_each(|g| *g = 0.0);
            for d in ws.delta.chunks_exact(ly.fan_out) {
                for (g, dv) in gb.iter_mut().zip(d) {
                    *g += dv;
                }
            }
            gemm(ly.fan_in, rows, ly.fan_out, a_in, (1, ly.fan_in), &ws.delta, (ly.fan_out, 1), 0.0, gw);
            if l == 0 {
                break;
            }
            let w = &self.params[ly.w..ly.b];
            let act = self.spec.activations[l - 1];
            ws.delta_prev.resize(rows * ly.fan_in, 0.0);
            gemm(rows, ly.fan_out, ly.fan_in, &ws.delta, (ly.fan_out, 1), w, (1, ly.fan_out), 0.0, &mut ws.delta_prev);
            for (d, a) in ws.delta_prev.iter_mut().zip(a_in) {
                *d *= act.derivative(*a);
            }
            std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
        }
        (sse / rows as f64, sae / rows as f64)
    }
}

/// `c = a * b + beta * c` for a row-major `m x n` output; `a` is `m x k` and
/// `b` is `k x n`, each given with its (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides address only elements inside the slices checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Scratch buffers reused across batches.
#[derive(Debug, Default)]
pub(crate) struct Workspace {
    pub acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

/// Mean squared error and its gradient for a whole data set.
pub fn loss_and_grads(model: &Mlp, x: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    if y.is_empty() {
        return invalid("empty batch");
    }
    if x.len() != y.len() * model.spec.input_dim {
        return invalid(format!("{} inputs do not match {} targets of width {}", x.len(), y.len(), model.spec.input_dim));
    }
    let mut ws = Workspace::default();
    let mut grad = vec![0.0; model.n_params()];
    let (mse, _) = model.batch_gradient(x, y, &mut ws, &mut grad);
    Ok((mse, grad))
}

pub fn metric_mse(pred: &[f64], y: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != y.len() {
        return invalid("metric needs two non-empty vectors of equal length");
    }
    Ok(pred.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64)
}

pub fn metric_mae(pred: &[f64], y: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != y.len() {
        return invalid("metric needs two non-empty vectors of equal length");
    }
    Ok(pred.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::stats;

    #[test]
    fn parameter_counts() {
        let t = MlpSpec::uniform(18, vec![100, 90], Activation::Tanh, 1e-3);
        assert_eq!(count_params(&t), 11_081);
        let eta = MlpSpec::uniform(18, vec![150, 90, 150, 90, 150, 90], Activation::Tanh, 1e-3);
        assert_eq!(count_params(&eta), 71_011);
        assert_eq!(count_params(&MlpSpec::uniform(1, vec![], Activation::Tanh, 1e-3)), 2);
    }

    #[test]
    fn glorot_variance_and_seeding() {
        let spec = MlpSpec::uniform(1000, vec![1000], Activation::Tanh, 1e-3);
        let a = Mlp::init(&spec, &mut stream(1, "init", 0)).unwrap();
        let b = Mlp::init(&spec, &mut stream(1, "init", 0)).unwrap();
        let c = Mlp::init(&spec, &mut stream(2, "init", 0)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let (w, bias) = a.layer(0);
        assert!(bias.iter().all(|v| *v == 0.0));
        let var = stats::variance(w);
        let expected = 2.0 / 2000.0;
        assert!((var / expected - 1.0).abs() < 0.2, "variance {var}");
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let spec = MlpSpec::uniform(3, vec![4], Activation::Tanh, 1e-3);
        let m = Mlp::from_params(&spec, vec![0.0; count_params(&spec)]).unwrap();
        assert_eq!(m.forward(&[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!(m.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn hand_computed_two_two_one_network() {
        let spec = MlpSpec::uniform(2, vec![2], Activation::Tanh, 1e-3);
        // w[i][o] input-major, then biases; output layer 2x1 plus bias.
        let params = vec![0.5, -1.0, 0.25, 2.0, 0.1, -0.2, 1.5, -0.5, 0.3];
        let m = Mlp::from_params(&spec, params).unwrap();
        let x = [1.0, 2.0];
        let h0 = (0.5 * 1.0 + 0.25 * 2.0 + 0.1f64).tanh();
        let h1 = (-1.0 * 1.0 + 2.0 * 2.0 - 0.2f64).tanh();
        let y = 1.5 * h0 - 0.5 * h1 + 0.3;
        assert!((m.forward(&x).unwrap()[0] - y).abs() < 1e-15);
    }

    #[test]
    fn tanh_hidden_outputs_are_bounded() {
        let spec = MlpSpec::uniform(2, vec![8], Activation::Tanh, 1e-3);
        let m = Mlp::init(&spec, &mut stream(3, "init", 0)).unwrap();
        let mut ws = Workspace::default();
        m.forward_batch(&[100.0, -100.0], 1, &mut ws);
        assert!(ws.acts[1].iter().all(|a| a.abs() <= 1.0));
    }

    fn finite_difference_check(spec: &MlpSpec, seed: u64) -> f64 {
        let mut rng = stream(seed, "gradcheck", 0);
        let mut model = Mlp::init(spec, &mut rng).unwrap();
        // Non-zero biases keep relu pre-activations away from the kink at 0.
        for l in 0..model.n_layers() {
            model.layer_mut(l).1.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        }
        let n = 7;
        let x: Vec<f64> = (0..n * spec.input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, g) = loss_and_grads(&model, &x, &y).unwrap();
        let h = 1e-6;
        let mut worst = 0.0f64;
        for k in 0..model.n_params() {
            let mut p = model.clone();
            p.params[k] += h;
            let lp = metric_mse(&p.forward(&x).unwrap(), &y).unwrap();
            p.params[k] -= 2.0 * h;
            let lm = metric_mse(&p.forward(&x).unwrap(), &y).unwrap();
            let num = (lp - lm) / (2.0 * h);
            let err = (num - g[k]).abs() / num.abs().max(g[k].abs()).max(1e-4);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let spec = MlpSpec::uniform(18, vec![10, 10], Activation::Tanh, 1e-3);
        assert!(finite_difference_check(&spec, 1) < 1e-5);
        for depth in 1..=7 {
            for act in [Activation::Tanh, Activation::Relu] {
                let spec = MlpSpec::uniform(4, vec![6; depth], act, 1e-3);
                let e = finite_difference_check(&spec, depth as u64);
                assert!(e < 1e-5, "{act:?} depth {depth}: {e}");
            }
        }
    }

    #[test]
    fn perfect_fit_has_zero_gradient() {
        let spec = MlpSpec::uniform(2, vec![3], Activation::Tanh, 1e-3);
        let m = Mlp::init(&spec, &mut stream(5, "init", 0)).unwrap();
        let x = [0.1, 0.2, -0.3, 0.4];
        let y = m.forward(&x).unwrap();
        let (mse, g) = loss_and_grads(&m, &x, &y).unwrap();
        assert_eq!(mse, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dead_relu_unit_gets_no_gradient() {
        let spec = MlpSpec::uniform(2, vec![2], Activation::Relu, 1e-3);
        let mut m = Mlp::init(&spec, &mut stream(6, "init", 0)).unwrap();
        {
            let (w, b) = m.layer_mut(0);
            w[0] = -1.0;
            w[2] = -1.0;
            b[0] = -10.0;
        }
        let x = [0.5, 0.5, -0.2, 0.9];
        let (_, g) = loss_and_grads(&m, &x, &[1.0, -1.0]).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[2], 0.0);
        assert_eq!(g[4], 0.0);
    }

    #[test]
    fn metrics() {
        assert_eq!(metric_mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(metric_mae(&[1.0, -3.0], &[0.0, 0.0]).unwrap(), 2.0);
        let (p, y) = ([0.3, -1.2, 2.0], [0.0, 0.1, 0.5]);
        assert!(metric_mae(&p, &y).unwrap() <= metric_mse(&p, &y).unwrap().sqrt());
        assert!(metric_mae(&[], &[]).is_err());
    }
}
