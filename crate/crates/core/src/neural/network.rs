use std::fmt::Debug;
use std::ops::{Deref, Range};
use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::params::{ParamVector, TensorSpec};
use crate::{Error, Label, Result, Rng};

/// Scalar type the network can be evaluated in. Training runs in `f32`;
/// gradient checks evaluate the same code path in `f64`.
pub trait Real:
    Float + LinalgScalar + ScalarOperand + FromPrimitive + Debug + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// x·sigmoid(x)
    Silu,
    Tanh,
}

impl Activation {
    fn apply<F: Real>(self, z: F) -> F {
        match self {
            Activation::Silu => z / (F::one() + (-z).exp()),
            Activation::Tanh => z.tanh(),
        }
    }

    fn derivative<F: Real>(self, z: F) -> F {
        match self {
            Activation::Silu => {
                let sig = F::one() / (F::one() + (-z).exp());
                sig * (F::one() + z * (F::one() - sig))
            }
            Activation::Tanh => {
                let t = z.tanh();
                F::one() - t * t
            }
        }
    }
}

/// Shape of a [`Denoiser`]; also the JSON descriptor stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Width of the time, label and guidance embeddings.
    pub embed_dim: usize,
    pub max_period: f64,
    /// Normalized time is multiplied by this before the sinusoidal embedding.
    pub time_scale: f64,
    pub num_classes: usize,
    pub w_conditioning: bool,
}

impl Architecture {
    /// Four hidden SiLU layers of width 128 over 2D data with 64-dim embeddings.
    pub fn standard(num_classes: usize, w_conditioning: bool) -> Self {
        Self {
            data_dim: crate::DATA_DIM,
            hidden: vec![128; 4],
            activation: Activation::Silu,
            embed_dim: 64,
            max_period: 10_000.0,
            time_scale: 1000.0,
            num_classes,
            w_conditioning,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.embed_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("architecture has a zero-width layer".into()));
        }
        if !self.embed_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument("embed_dim must be even".into()));
        }
        Ok(())
    }

    /// Row of the label table holding the null label.
    pub fn null_row(&self) -> usize {
        self.num_classes
    }

    fn dense_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.data_dim + self.embed_dim;
        for &h in &self.hidden {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.data_dim));
        dims
    }

    pub fn layout(&self) -> Vec<TensorSpec> {
        let rows = self.num_classes + 1;
        let mut layout = vec![
            TensorSpec::new("label_embed", &[rows, self.embed_dim]),
            TensorSpec::new("label_embed_frozen", &[rows, self.embed_dim]),
            TensorSpec::new("w_proj", &[self.embed_dim]),
        ];
        for (i, (fan_in, fan_out)) in self.dense_dims().into_iter().enumerate() {
            layout.push(TensorSpec::new(format!("dense{i}.weight"), &[fan_out, fan_in]));
            layout.push(TensorSpec::new(format!("dense{i}.bias"), &[fan_out]));
        }
        layout
    }

    /// Names of tensors that never receive gradient.
    pub fn is_trainable(name: &str) -> bool {
        name != "label_embed_frozen"
    }
}

struct Dense {
    weight: Range<usize>,
    bias: Range<usize>,
    fan_in: usize,
    fan_out: usize,
}

struct Offsets {
    label: Range<usize>,
    frozen: Range<usize>,
    w_proj: Range<usize>,
    dense: Vec<Dense>,
}

impl Offsets {
    fn new(arch: &Architecture) -> Self {
        let rows = arch.num_classes + 1;
        let e = arch.embed_dim;
        let label = 0..rows * e;
        let frozen = label.end..label.end + rows * e;
        let w_proj = frozen.end..frozen.end + e;
        let mut cursor = w_proj.end;
        let mut dense = Vec::new();
        for (fan_in, fan_out) in arch.dense_dims() {
            let weight = cursor..cursor + fan_in * fan_out;
            let bias = weight.end..weight.end + fan_out;
            cursor = bias.end;
            dense.push(Dense {
                weight,
                bias,
                fan_in,
                fan_out,
            });
        }
        Self {
            label,
            frozen,
            w_proj,
            dense,
        }
    }
}

/// A batch of network inputs. All slices have one entry per row of `x`.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserInput<'a> {
    pub x: ArrayView2<'a, f64>,
    pub t_norm: &'a [f64],
    pub labels: &'a [Label],
    pub w: &'a [f64],
}

impl<'a> DenoiserInput<'a> {
    pub fn batch_size(&self) -> usize {
        self.x.nrows()
    }
}

/// Cached activations of one forward pass.
struct Pass<F> {
    /// Input to each dense layer.
    inputs: Vec<Array2<F>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<F>>,
    out: Array2<F>,
}

/// Noise predictor ε(x_t | c, w, t).
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    arch: Architecture,
    params: ParamVector,
}

fn cast<F: Real>(v: f64) -> F {
    F::from_f64(v).expect("f64 converts to any Real")
}

impl Denoiser {
    /// Randomly initialized network: dense layers uniform in ±1/sqrt(fan_in),
    /// label rows standard normal, guidance projection zero.
    pub fn new(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamVector::zeros(arch.layout());
        let off = Offsets::new(&arch);
        {
            let v = params.values_mut();
            for x in &mut v[off.label.clone()] {
                *x = StandardNormal.sample(rng);
            }
            let (head, tail) = v.split_at_mut(off.frozen.start);
            tail[..off.frozen.len()].copy_from_slice(&head[off.label.clone()]);
            for d in &off.dense {
                let bound = 1.0 / (d.fan_in as f32).sqrt();
                for x in &mut v[d.weight.clone()] {
                    *x = rng.random_range(-bound..bound);
                }
                for x in &mut v[d.bias.clone()] {
                    *x = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(Self { arch, params })
    }

    /// Network with every parameter equal to zero.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let params = ParamVector::zeros(arch.layout());
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: Architecture, params: ParamVector) -> Result<Self> {
        arch.validate()?;
        if params.layout() != arch.layout().as_slice() {
            return Err(Error::Shape("parameter layout does not match architecture".into()));
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("parameters".into()));
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Copy the live label table into the frozen table used for guidance modulation.
    pub fn refresh_frozen_labels(&mut self) {
        let off = Offsets::new(&self.arch);
        let v = self.params.values_mut();
        let (head, tail) = v.split_at_mut(off.frozen.start);
        tail[..off.frozen.len()].copy_from_slice(&head[off.label]);
    }

    /// Copy of this network prepared for fine-tuning on `num_classes` new
    /// classes: fresh class rows, the null row carried over, frozen table
    /// re-synced and the guidance projection zeroed.
    pub fn adapted(&self, num_classes: usize, w_conditioning: bool, rng: &mut Rng) -> Result<Self> {
        let arch = Architecture {
            num_classes,
            w_conditioning,
            ..self.arch.clone()
        };
        let mut out = Self::zeros(arch)?;
        let e = self.arch.embed_dim;
        let src_off = Offsets::new(&self.arch);
        let dst_off = Offsets::new(&out.arch);
        let src = self.params.values();
        let dst = out.params.values_mut();
        for x in &mut dst[dst_off.label.start..dst_off.label.start + num_classes * e] {
            *x = StandardNormal.sample(rng);
        }
        let src_null = src_off.label.start + self.arch.null_row() * e;
        let dst_null = dst_off.label.start + num_classes * e;
        dst[dst_null..dst_null + e].copy_from_slice(&src[src_null..src_null + e]);
        for (s, d) in src_off.dense.iter().zip(&dst_off.dense) {
            dst[d.weight.clone()].copy_from_slice(&src[s.weight.clone()]);
            dst[d.bias.clone()].copy_from_slice(&src[s.bias.clone()]);
        }
        out.refresh_frozen_labels();
        Ok(out)
    }

    fn validate_input(&self, input: &DenoiserInput<'_>) -> Result<()> {
        let n = input.batch_size();
        if input.x.ncols() != self.arch.data_dim {
            return Err(Error::Shape(format!(
                "input has {} columns, model expects {}",
                input.x.ncols(),
                self.arch.data_dim
            )));
        }
        if input.t_norm.len() != n || input.labels.len() != n || input.w.len() != n {
            return Err(Error::Shape(format!(
                "batch of {n} points with {} times, {} labels, {} guidance strengths",
                input.t_norm.len(),
                input.labels.len(),
                input.w.len()
            )));
        }
        if input.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("x_t".into()));
        }
        if let Some(t) = input.t_norm.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvalidArgument(format!("t_norm {t} outside [0, 1]")));
        }
        for l in input.labels.iter().flatten() {
            if *l >= self.arch.num_classes {
                return Err(Error::UnknownLabel {
                    label: *l,
                    num_classes: self.arch.num_classes,
                });
            }
        }
        if input.w.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("guidance strength".into()));
        }
        if self.arch.w_conditioning {
            if let Some(w) = input.w.iter().find(|w| **w < 1.0) {
                return Err(Error::InvalidArgument(format!("guidance strength {w} < 1")));
            }
        }
        Ok(())
    }

    /// Batched ε-prediction.
    pub fn forward(&self, input: &DenoiserInput<'_>) -> Result<Array2<f64>> {
        self.validate_input(input)?;
        let pass = self.run::<f32>(self.params.values(), input);
        Ok(pass.out.mapv(f64::from))
    }

    /// Single-point ε-prediction.
    pub fn forward_point(&self, x: &[f64], t_norm: f64, c: Label, w: f64) -> Result<Vec<f64>> {
        let xs = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|e| Error::Shape(e.to_string()))?;
        let out = self.forward(&DenoiserInput {
            x: xs,
            t_norm: &[t_norm],
            labels: &[c],
            w: &[w],
        })?;
        Ok(out.row(0).to_vec())
    }

    /// Forward pass evaluated in scalar type `F` (parameters cast from `f32`).
    pub fn forward_in<F: Real>(&self, input: &DenoiserInput<'_>) -> Result<Array2<F>> {
        self.validate_input(input)?;
        let params: Vec<F> = self.params.values().iter().map(|v| cast(*v as f64)).collect();
        Ok(self.run::<F>(&params, input).out)
    }

    /// Mean squared L2 error against `target` and its gradient.
    pub fn loss_and_grad(
        &self,
        input: &DenoiserInput<'_>,
        target: ArrayView2<'_, f64>,
    ) -> Result<(f64, ParamVector)> {
        self.validate_input(input)?;
        self.check_target(input, target)?;
        let (loss, grad) = self.loss_grad_impl::<f32>(self.params.values(), input, target);
        let grad = ParamVector::from_values(self.params.layout().to_vec(), grad)
            .map_err(|_| Error::NonFinite("gradient".into()))?;
        Ok((loss, grad))
    }

    /// Loss and gradient evaluated in scalar type `F` at `params` (same layout
    /// as this model). Used for gradient checking in `f64`.
    pub fn loss_and_grad_in<F: Real>(
        &self,
        params: &[F],
        input: &DenoiserInput<'_>,
        target: ArrayView2<'_, f64>,
    ) -> Result<(f64, Vec<F>)> {
        if params.len() != self.params.len() {
            return Err(Error::Shape("parameter slice length".into()));
        }
        self.validate_input(input)?;
        self.check_target(input, target)?;
        Ok(self.loss_grad_impl::<F>(params, input, target))
    }

    fn check_target(&self, input: &DenoiserInput<'_>, target: ArrayView2<'_, f64>) -> Result<()> {
        if input.batch_size() == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if target.dim() != (input.batch_size(), self.arch.data_dim) {
            return Err(Error::Shape(format!(
                "target {:?} vs batch ({}, {})",
                target.dim(),
                input.batch_size(),
                self.arch.data_dim
            )));
        }
        Ok(())
    }

    fn loss_grad_impl<F: Real>(
        &self,
        params: &[F],
        input: &DenoiserInput<'_>,
        target: ArrayView2<'_, f64>,
    ) -> (f64, Vec<F>) {
        let pass = self.run::<F>(params, input);
        let n = input.batch_size() as f64;
        let mut loss = 0.0f64;
        let mut d_out = Array2::<F>::zeros(pass.out.raw_dim());
        let scale: F = cast(2.0 / n);
        for ((d, o), t) in d_out.iter_mut().zip(pass.out.iter()).zip(target.iter()) {
            let diff = o.to_f64().unwrap_or(f64::NAN) - t;
            loss += diff * diff;
            *d = cast::<F>(diff) * scale;
        }
        let grad = self.backward(params, input, &pass, d_out);
        (loss / n, grad)
    }

    fn embed<F: Real>(&self, params: &[F], off: &Offsets, input: &DenoiserInput<'_>) -> Array2<F> {
        let e = self.arch.embed_dim;
        let half = e / 2;
        let n = input.batch_size();
        let label = &params[off.label.clone()];
        let frozen = &params[off.frozen.clone()];
        let w_proj = &params[off.w_proj.clone()];
        let freqs: Vec<f64> = (0..half)
            .map(|i| (-(self.arch.max_period.ln()) * i as f64 / half as f64).exp())
            .collect();
        let mut cond = Array2::<F>::zeros((n, e));
        for (b, mut row) in cond.axis_iter_mut(Axis(0)).enumerate() {
            let t = input.t_norm[b] * self.arch.time_scale;
            let r = input.labels[b].unwrap_or(self.arch.null_row());
            let lab = &label[r * e..(r + 1) * e];
            for i in 0..half {
                let arg = t * freqs[i];
                row[i] = cast::<F>(arg.sin()) + lab[i];
                row[half + i] = cast::<F>(arg.cos()) + lab[half + i];
            }
            if self.arch.w_conditioning {
                let dw: F = cast(input.w[b] - 1.0);
                let fz = &frozen[r * e..(r + 1) * e];
                for i in 0..e {
                    row[i] = row[i] + dw * w_proj[i] * fz[i];
                }
            }
        }
        cond
    }

    fn run<F: Real>(&self, params: &[F], input: &DenoiserInput<'_>) -> Pass<F> {
        let off = Offsets::new(&self.arch);
        let n = input.batch_size();
        let d = self.arch.data_dim;
        let cond = self.embed(params, &off, input);
        let mut h = Array2::<F>::zeros((n, d + self.arch.embed_dim));
        h.slice_mut(s![.., ..d]).assign(&input.x.mapv(cast::<F>));
        h.slice_mut(s![.., d..]).assign(&cond);

        let last = off.dense.len() - 1;
        let mut inputs = Vec::with_capacity(off.dense.len());
        let mut pre = Vec::with_capacity(last);
        for (i, layer) in off.dense.iter().enumerate() {
            let w = ArrayView2::from_shape((layer.fan_out, layer.fan_in), &params[layer.weight.clone()])
                .expect("layout");
            let b = ArrayView1::from(&params[layer.bias.clone()]);
            let z = h.dot(&w.t()) + b;
            inputs.push(h);
            if i == last {
                return Pass {
                    inputs,
                    pre,
                    out: z,
                };
            }
            let act = self.arch.activation;
            h = z.mapv(|v| act.apply(v));
            pre.push(z);
        }
        unreachable!("network has at least one dense layer")
    }

    fn backward<F: Real>(
        &self,
        params: &[F],
        input: &DenoiserInput<'_>,
        pass: &Pass<F>,
        d_out: Array2<F>,
    ) -> Vec<F> {
        let off = Offsets::new(&self.arch);
        let mut grad = vec![F::zero(); params.len()];
        let mut g = d_out;
        for (i, layer) in off.dense.iter().enumerate().rev() {
            let dw = g.t().dot(&pass.inputs[i]);
            grad[layer.weight.clone()]
                .iter_mut()
                .zip(dw.iter())
                .for_each(|(a, b)| *a = *b);
            // column sums accumulated in f64
            for (j, gb) in grad[layer.bias.clone()].iter_mut().enumerate() {
                let sum: f64 = g.column(j).iter().map(|v| v.to_f64().unwrap_or(0.0)).sum();
                *gb = cast(sum);
            }
            let w = ArrayView2::from_shape((layer.fan_out, layer.fan_in), &params[layer.weight.clone()])
                .expect("layout");
            let dh = g.dot(&w);
            if i == 0 {
                g = dh;
                break;
            }
            let act = self.arch.activation;
            let mut dz = dh;
            dz.zip_mut_with(&pass.pre[i - 1], |d, z| *d = *d * act.derivative(*z));
            g = dz;
        }

        // g now holds d(loss)/d(input of dense0); the embedding part follows x.
        let e = self.arch.embed_dim;
        let d = self.arch.data_dim;
        let frozen = &params[off.frozen.clone()];
        let mut d_wproj = Array1::<F>::zeros(e);
        for (b, row) in g.axis_iter(Axis(0)).enumerate() {
            let r = input.labels[b].unwrap_or(self.arch.null_row());
            let dcond = row.slice(s![d..]);
            let start = off.label.start + r * e;
            for (k, v) in dcond.iter().enumerate() {
                grad[start + k] = grad[start + k] + *v;
            }
            if self.arch.w_conditioning {
                let dw: F = cast(input.w[b] - 1.0);
                let fz = &frozen[r * e..(r + 1) * e];
                for k in 0..e {
                    d_wproj[k] = d_wproj[k] + dw * fz[k] * dcond[k];
                }
            }
        }
        grad[off.w_proj.clone()]
            .iter_mut()
            .zip(d_wproj.iter())
            .for_each(|(a, b)| *a = *b);
        grad
    }
}

/// Immutable shared snapshot of a [`Denoiser`]. Training the original never
/// affects a snapshot; forward passes on it are safe from many threads.
#[derive(Debug, Clone)]
pub struct FrozenDenoiser(Arc<Denoiser>);

impl FrozenDenoiser {
    pub fn snapshot(model: &Denoiser) -> Self {
        Self(Arc::new(model.clone()))
    }

    /// Mutable copy, e.g. to start fine-tuning from a frozen source.
    pub fn thaw(&self) -> Denoiser {
        (*self.0).clone()
    }
}

impl Deref for FrozenDenoiser {
    type Target = Denoiser;

    fn deref(&self) -> &Denoiser {
        &self.0
    }
}

impl PartialEq for FrozenDenoiser {
    fn eq(&self, other: &Self) -> bool {
        *self.0 == *other.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;
    use ndarray::array;

    fn tiny(num_classes: usize, w_conditioning: bool) -> Architecture {
        Architecture {
            data_dim: 2,
            hidden: vec![8, 8],
            activation: Activation::Silu,
            embed_dim: 4,
            max_period: 10_000.0,
            time_scale: 1000.0,
            num_classes,
            w_conditioning,
        }
    }

    #[test]
    fn label_table_has_null_row() {
        let arch = tiny(3, false);
        let layout = arch.layout();
        assert_eq!(layout[0].shape, vec![4, 4]);
        assert_eq!(arch.null_row(), 3);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let m = Denoiser::zeros(tiny(2, true)).unwrap();
        let x = array![[0.3, -0.7], [5.0, 2.0]];
        let out = m
            .forward(&DenoiserInput {
                x: x.view(),
                t_norm: &[0.1, 0.9],
                labels: &[Some(1), None],
                w: &[1.0, 3.0],
            })
            .unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn output_ignores_w_without_conditioning() {
        let m = Denoiser::new(tiny(2, false), &mut rng_from_seed(1)).unwrap();
        let a = m.forward_point(&[0.3, -0.7], 0.5, Some(0), 1.0).unwrap();
        let b = m.forward_point(&[0.3, -0.7], 0.5, Some(0), 5.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = Denoiser::new(tiny(2, true), &mut rng_from_seed(1)).unwrap();
        assert!(matches!(
            m.forward_point(&[f64::NAN, 0.0], 0.5, None, 1.0),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            m.forward_point(&[0.0, 0.0], 0.5, Some(2), 1.0),
            Err(Error::UnknownLabel { label: 2, .. })
        ));
        assert!(m.forward_point(&[0.0, 0.0], 1.5, None, 1.0).is_err());
        assert!(m.forward_point(&[0.0, 0.0], 0.5, None, 0.5).is_err());
        assert!(m.forward_point(&[0.0, 0.0, 0.0], 0.5, None, 1.0).is_err());
    }

    #[test]
    fn loss_rejects_shape_mismatch() {
        let m = Denoiser::new(tiny(2, false), &mut rng_from_seed(1)).unwrap();
        let x = array![[0.3, -0.7]];
        let input = DenoiserInput {
            x: x.view(),
            t_norm: &[0.5],
            labels: &[None],
            w: &[1.0],
        };
        let bad = array![[0.0, 0.0], [1.0, 1.0]];
        assert!(matches!(m.loss_and_grad(&input, bad.view()), Err(Error::Shape(_))));
    }

    #[test]
    fn target_equal_to_output_gives_zero_loss_and_gradient() {
        let m = Denoiser::new(tiny(2, true), &mut rng_from_seed(3)).unwrap();
        let x = array![[0.3, -0.7], [1.0, 0.2]];
        let input = DenoiserInput {
            x: x.view(),
            t_norm: &[0.2, 0.6],
            labels: &[Some(0), None],
            w: &[1.5, 1.0],
        };
        let target = m.forward(&input).unwrap();
        let (loss, grad) = m.loss_and_grad(&input, target.view()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.values().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn frozen_table_gets_no_gradient() {
        let mut m = Denoiser::new(tiny(2, true), &mut rng_from_seed(4)).unwrap();
        m.params_mut().tensor_mut("w_proj").unwrap().fill(0.5);
        let x = array![[0.3, -0.7]];
        let input = DenoiserInput {
            x: x.view(),
            t_norm: &[0.2],
            labels: &[Some(1)],
            w: &[2.0],
        };
        let (_, grad) = m.loss_and_grad(&input, array![[1.0, 1.0]].view()).unwrap();
        assert!(grad.tensor("label_embed_frozen").unwrap().iter().all(|g| *g == 0.0));
        assert!(grad.tensor("w_proj").unwrap().iter().any(|g| *g != 0.0));
    }

    #[test]
    fn adapted_keeps_trunk_and_null_row() {
        let src = Denoiser::new(tiny(5, false), &mut rng_from_seed(5)).unwrap();
        let dst = src.adapted(2, true, &mut rng_from_seed(6)).unwrap();
        assert_eq!(dst.arch().num_classes, 2);
        assert!(dst.arch().w_conditioning);
        assert_eq!(
            src.params().tensor("dense1.weight"),
            dst.params().tensor("dense1.weight")
        );
        let e = 4;
        let s_label = src.params().tensor("label_embed").unwrap();
        let d_label = dst.params().tensor("label_embed").unwrap();
        assert_eq!(&s_label[5 * e..6 * e], &d_label[2 * e..3 * e]);
        assert_eq!(
            dst.params().tensor("label_embed"),
            dst.params().tensor("label_embed_frozen")
        );
        assert!(dst.params().tensor("w_proj").unwrap().iter().all(|v| *v == 0.0));
        // w = 1 with a zero projection is the plain conditional pass
        let a = dst.forward_point(&[0.1, 0.2], 0.3, Some(1), 1.0).unwrap();
        let b = dst.forward_point(&[0.1, 0.2], 0.3, Some(1), 4.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn snapshot_equals_original() {
        let m = Denoiser::new(tiny(2, false), &mut rng_from_seed(7)).unwrap();
        let snap = FrozenDenoiser::snapshot(&m);
        let again = FrozenDenoiser::snapshot(&snap);
        assert_eq!(snap, again);
        assert_eq!(
            snap.forward_point(&[0.1, 0.2], 0.3, Some(1), 1.0).unwrap(),
            m.forward_point(&[0.1, 0.2], 0.3, Some(1), 1.0).unwrap()
        );
    }
}
