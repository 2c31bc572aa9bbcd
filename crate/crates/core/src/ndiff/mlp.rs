use super::{Activation, Mat, Tape, Var};
use crate::{Error, Result};
use ndarray::{concatenate, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Architecture of a dense feed-forward network.
///
/// `layer_widths[0]` is the data input width; when `time_features > 0` the
/// first layer additionally receives `2 * time_features` sinusoidal features
/// of the diffusion time. The final layer is always linear.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub time_features: usize,
}

impl NetSpec {
    pub fn new(
        layer_widths: Vec<usize>,
        activation: Activation,
        time_features: usize,
    ) -> Result<Self> {
        let spec = Self {
            layer_widths,
            activation,
            time_features,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Dense net `input -> hidden... -> output`.
    pub fn dense(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        time_features: usize,
    ) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(output);
        Self::new(widths, activation, time_features)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::Config(format!(
                "a network needs at least one layer, got widths {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::Config(format!(
                "layer widths must be positive, got {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    /// Shapes of `[W0, b0, W1, b1, ...]`; weights are `fan_in × fan_out`.
    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(2 * self.n_layers());
        for l in 0..self.n_layers() {
            let mut fan_in = self.layer_widths[l];
            if l == 0 {
                fan_in += 2 * self.time_features;
            }
            let fan_out = self.layer_widths[l + 1];
            shapes.push((fan_in, fan_out));
            shapes.push((1, fan_out));
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(r, c)| r * c).sum()
    }
}

/// Sinusoidal time features `[sin(2^k π t), cos(2^k π t)]` for `k < n_freq`.
pub fn time_embedding(t: &[f64], n_freq: usize) -> Mat {
    Array2::from_shape_fn((t.len(), 2 * n_freq), |(i, j)| {
        let arg = (1u64 << (j / 2)) as f64 * PI * t[i];
        if j % 2 == 0 {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

/// A dense network together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: NetSpec,
    params: Vec<Mat>,
}

impl Mlp {
    /// He-normal weights, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: NetSpec, rng: &mut R) -> Self {
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|(r, c)| {
                if r == 1 {
                    Array2::zeros((r, c))
                } else {
                    let normal = Normal::new(0.0, (2.0 / r as f64).sqrt()).unwrap();
                    Array2::from_shape_simple_fn((r, c), || normal.sample(rng))
                }
            })
            .collect();
        Self { spec, params }
    }

    pub fn zeros(spec: NetSpec) -> Self {
        let params = spec
            .param_shapes()
            .into_iter()
            .map(Array2::zeros)
            .collect();
        Self { spec, params }
    }

    pub fn from_params(spec: NetSpec, params: Vec<Mat>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::shape(
                "parameter list",
                format!("{} tensors", shapes.len()),
                format!("{} tensors", params.len()),
            ));
        }
        for (i, (shape, p)) in shapes.iter().zip(&params).enumerate() {
            if p.dim() != *shape {
                return Err(Error::shape(
                    "parameter tensor",
                    format!("#{i} {shape:?}"),
                    format!("{:?}", p.dim()),
                ));
            }
        }
        Ok(Self { spec, params })
    }

    /// Zeroes the final layer so the network starts out as the zero map.
    pub fn with_zero_output(mut self) -> Self {
        let n = self.params.len();
        self.params[n - 2].fill(0.0);
        self.params[n - 1].fill(0.0);
        self
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Mat] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Mat] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<Mat> {
        self.params
    }

    fn check_input(&self, (rows, cols): (usize, usize), t: Option<&[f64]>) -> Result<()> {
        if cols != self.spec.input_width() {
            return Err(Error::shape(
                "network input width",
                self.spec.input_width(),
                cols,
            ));
        }
        if self.spec.time_features > 0 {
            match t {
                None => {
                    return Err(Error::shape(
                        "network time input",
                        format!("{} time features", self.spec.time_features),
                        "no time",
                    ))
                }
                Some(t) if t.len() != rows => {
                    return Err(Error::shape("network time input", rows, t.len()))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Plain evaluation on a batch (one sample per row).
    pub fn forward(&self, x: &Mat, t: Option<&[f64]>) -> Result<Mat> {
        self.check_input(x.dim(), t)?;
        let mut h = match (self.spec.time_features, t) {
            (0, _) | (_, None) => x.clone(),
            (k, Some(t)) => concatenate(Axis(1), &[x.view(), time_embedding(t, k).view()])
                .expect("rows checked"),
        };
        let n_layers = self.spec.n_layers();
        for l in 0..n_layers {
            h = h.dot(&self.params[2 * l]) + &self.params[2 * l + 1];
            if l + 1 < n_layers {
                let act = self.spec.activation;
                h.mapv_inplace(|v| act.eval(0, v));
            }
        }
        Ok(h)
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn leaves<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Registers every parameter as a constant (frozen network).
    pub fn constants<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    /// Evaluation on a tape with caller-supplied parameter variables.
    pub fn forward_tape<'t>(
        &self,
        params: &[Var<'t>],
        x: Var<'t>,
        t: Option<&[f64]>,
    ) -> Result<Var<'t>> {
        self.check_input(x.shape(), t)?;
        assert_eq!(params.len(), self.params.len(), "parameter count");
        let tape = x.tape();
        let mut h = match (self.spec.time_features, t) {
            (0, _) | (_, None) => x,
            (k, Some(t)) => x.concat_cols(tape.constant(time_embedding(t, k))),
        };
        let n_layers = self.spec.n_layers();
        for l in 0..n_layers {
            h = h.matmul(params[2 * l]).add_row(params[2 * l + 1]);
            if l + 1 < n_layers {
                h = h.activation(self.spec.activation, 0);
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{seeded, standard_normal};
    use ndarray::array;

    #[test]
    fn identity_net_returns_input() {
        let spec = NetSpec::dense(3, &[], 3, Activation::Gelu, 0).unwrap();
        let net = Mlp::from_params(spec, vec![Array2::eye(3), Array2::zeros((1, 3))]).unwrap();
        let x = array![[1.0, -2.0, 3.5], [0.0, 0.25, -1.0]];
        assert_eq!(net.forward(&x, None).unwrap(), x);
    }

    #[test]
    fn zero_net_returns_zero() {
        let spec = NetSpec::dense(2, &[8, 8], 3, Activation::Gelu, 4).unwrap();
        let net = Mlp::zeros(spec);
        let y = net.forward(&array![[1.0, 2.0]], Some(&[0.3])).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn width_mismatch_names_both_widths() {
        let spec = NetSpec::dense(2, &[4], 2, Activation::Tanh, 0).unwrap();
        let net = Mlp::init(spec, &mut seeded(0));
        let err = net.forward(&array![[1.0, 2.0, 3.0]], None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 2") && msg.contains("got 3"), "{msg}");
    }

    #[test]
    fn missing_time_is_an_error() {
        let spec = NetSpec::dense(2, &[4], 2, Activation::Tanh, 3).unwrap();
        let net = Mlp::init(spec, &mut seeded(0));
        assert!(net.forward(&array![[1.0, 2.0]], None).is_err());
    }

    #[test]
    fn forward_is_continuous_in_time() {
        let mut rng = seeded(11);
        let spec = NetSpec::dense(2, &[32, 32], 2, Activation::Gelu, 6).unwrap();
        let net = Mlp::init(spec, &mut rng);
        let x = standard_normal(&mut rng, 16, 2);
        for &t in &[0.0, 0.13, 0.5, 0.999] {
            let a = net.forward(&x, Some(&[t; 16])).unwrap();
            let b = net.forward(&x, Some(&[t + 1e-6; 16])).unwrap();
            let gap = (&a - &b).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
            assert!(gap < 1e-3, "jump {gap} at t={t}");
        }
    }

    #[test]
    fn tape_and_plain_forward_agree_bitwise() {
        let mut rng = seeded(5);
        let spec = NetSpec::dense(3, &[16, 16], 2, Activation::Gelu, 4).unwrap();
        let net = Mlp::init(spec, &mut rng);
        let x = standard_normal(&mut rng, 7, 3);
        let t: Vec<f64> = (0..7).map(|i| i as f64 / 7.0).collect();
        let plain = net.forward(&x, Some(&t)).unwrap();
        let tape = Tape::new();
        let p = net.constants(&tape);
        let y = net
            .forward_tape(&p, tape.constant(x.clone()), Some(&t))
            .unwrap();
        assert_eq!(*y.value(), plain);
    }

    #[test]
    fn time_embedding_layout() {
        let e = time_embedding(&[0.25], 2);
        let expect = [
            (PI * 0.25).sin(),
            (PI * 0.25).cos(),
            (2.0 * PI * 0.25).sin(),
            (2.0 * PI * 0.25).cos(),
        ];
        for (a, b) in e.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn param_count_includes_time_features() {
        let spec = NetSpec::dense(2, &[10], 3, Activation::Gelu, 4).unwrap();
        assert_eq!(spec.param_count(), (2 + 8) * 10 + 10 + 10 * 3 + 3);
    }
}
