//! Fusion meta-model: `Psi(w, x) = Head([EncW(w); EncX(x)])`.
//!
//! Each of the three networks is a plain input projection, a stack of
//! residual blocks `z + relu(W z + b)`, and a linear output layer. Gradients
//! are computed by hand-written reverse accumulation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::{all_finite, Scalar};

/// A set of real-valued parameter tensors that can be updated elementwise.
pub trait ParamSet<T: Scalar>: Clone {
    /// Tensors in a fixed canonical order.
    fn tensors(&self) -> Vec<&[T]>;
    fn tensors_mut(&mut self) -> Vec<&mut [T]>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(T::zero());
        }
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn same_shape(&self, other: &Self) -> bool {
        let (a, b) = (self.tensors(), other.tensors());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| all_finite(t))
    }
}

/// One training pair: model input `(w, x)` and regression target.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a, T> {
    pub w: &'a [T],
    pub x: &'a [T],
    pub target: &'a [T],
}

/// A differentiable model of `(w, x) -> R^m` trained by squared error.
pub trait MetaModel<T: Scalar>: ParamSet<T> + Send + Sync {
    fn intervention_dim(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn output_dim(&self) -> usize;

    fn forward(&self, w: &[T], x: &[T]) -> Result<Vec<T>>;

    /// Mean over the batch (and over output dimensions) of the squared error,
    /// together with its exact gradient.
    fn loss_and_grad(&self, batch: &[Example<'_, T>]) -> Result<(T, Self)>;

    /// Adds `coeff * penalty` to `grad` and returns the penalty value.
    fn l1_penalty(&self, _coeff: T, _grad: &mut Self) -> T {
        T::zero()
    }
}

pub fn sgd_step<T: Scalar, P: ParamSet<T>>(params: &P, grad: &P, lr: T) -> Result<P> {
    if !params.same_shape(grad) {
        return Err(Error::Shape("gradient shape differs from parameters".into()));
    }
    let mut out = params.clone();
    for (t, g) in out.tensors_mut().into_iter().zip(grad.tensors()) {
        for (v, &gv) in t.iter_mut().zip(g) {
            *v -= lr * gv;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub n_residual_blocks: usize,
    pub output_dim: usize,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config(format!("all MLP dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Linear<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    fn init(in_dim: usize, out_dim: usize, rng: &mut rng::Rng) -> Self {
        use rand::Rng as _;
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> {
            (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect()
        };
        let weight = draw(in_dim * out_dim);
        let bias = draw(out_dim);
        Self { in_dim, out_dim, weight, bias }
    }

    fn apply(&self, input: &[T], out: &mut Vec<T>) {
        out.clear();
        out.extend(self.weight.chunks_exact(self.in_dim).zip(&self.bias).map(|(row, &b)| {
            row.iter().zip(input).fold(b, |acc, (&wv, &xv)| acc + wv * xv)
        }));
    }

    /// Accumulates parameter gradients for `dout` at `input`; returns `dinput`.
    fn backward(&self, input: &[T], dout: &[T], grad: &mut Linear<T>) -> Vec<T> {
        let mut dinput = vec![T::zero(); self.in_dim];
        for (o, &g) in dout.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            grad.bias[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * input[i];
                dinput[i] += g * row[i];
            }
        }
        dinput
    }

    /// `W^T dout`, without touching any gradient.
    fn backward_input(&self, dout: &[T]) -> Vec<T> {
        let mut dinput = vec![T::zero(); self.in_dim];
        for (o, &g) in dout.iter().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                dinput[i] += g * row[i];
            }
        }
        dinput
    }
}

/// Input projection, residual blocks, output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Mlp<T> {
    pub spec: MlpSpec,
    pub input: Linear<T>,
    pub blocks: Vec<Linear<T>>,
    pub output: Linear<T>,
}

/// Activations kept from the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpTrace<T> {
    input: Vec<T>,
    /// `z_0 .. z_n`: input to each block, then input to the output layer.
    hidden: Vec<Vec<T>>,
    /// Pre-activations of each block.
    pre: Vec<Vec<T>>,
    pub output: Vec<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn zeros(spec: MlpSpec) -> Self {
        Self {
            spec,
            input: Linear::zeros(spec.input_dim, spec.hidden_dim),
            blocks: (0..spec.n_residual_blocks)
                .map(|_| Linear::zeros(spec.hidden_dim, spec.hidden_dim))
                .collect(),
            output: Linear::zeros(spec.hidden_dim, spec.output_dim),
        }
    }

    pub fn init(spec: MlpSpec, rng: &mut rng::Rng) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            input: Linear::init(spec.input_dim, spec.hidden_dim, rng),
            blocks: (0..spec.n_residual_blocks)
                .map(|_| Linear::init(spec.hidden_dim, spec.hidden_dim, rng))
                .collect(),
            output: Linear::init(spec.hidden_dim, spec.output_dim, rng),
        })
    }

    fn layers(&self) -> impl Iterator<Item = &Linear<T>> {
        std::iter::once(&self.input)
            .chain(&self.blocks)
            .chain(std::iter::once(&self.output))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Linear<T>> {
        std::iter::once(&mut self.input)
            .chain(&mut self.blocks)
            .chain(std::iter::once(&mut self.output))
    }

    pub fn forward(&self, input: &[T]) -> Result<Vec<T>> {
        Ok(self.trace(input)?.output)
    }

    pub fn trace(&self, input: &[T]) -> Result<MlpTrace<T>> {
        if input.len() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "MLP expects input of dim {}, got {}",
                self.spec.input_dim,
                input.len()
            )));
        }
        let mut z = Vec::with_capacity(self.spec.hidden_dim);
        self.input.apply(input, &mut z);
        let mut hidden = Vec::with_capacity(self.blocks.len() + 1);
        let mut pre = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mut p = Vec::with_capacity(self.spec.hidden_dim);
            block.apply(&z, &mut p);
            let next: Vec<T> = z
                .iter()
                .zip(&p)
                .map(|(&zv, &pv)| zv + pv.max(T::zero()))
                .collect();
            hidden.push(std::mem::replace(&mut z, next));
            pre.push(p);
        }
        let mut output = Vec::with_capacity(self.spec.output_dim);
        self.output.apply(&z, &mut output);
        hidden.push(z);
        Ok(MlpTrace {
            input: input.to_vec(),
            hidden,
            pre,
            output,
        })
    }

    /// Accumulates into `grad` and returns the gradient w.r.t. the input.
    pub fn backward(&self, trace: &MlpTrace<T>, dout: &[T], grad: &mut Mlp<T>) -> Vec<T> {
        let n = self.blocks.len();
        let mut dz = self.output.backward(&trace.hidden[n], dout, &mut grad.output);
        for k in (0..n).rev() {
            let dpre: Vec<T> = dz
                .iter()
                .zip(&trace.pre[k])
                .map(|(&g, &p)| if p > T::zero() { g } else { T::zero() })
                .collect();
            let dskip = self.blocks[k].backward(&trace.hidden[k], &dpre, &mut grad.blocks[k]);
            for (a, b) in dz.iter_mut().zip(dskip) {
                *a += b;
            }
        }
        self.input.backward(&trace.input, &dz, &mut grad.input)
    }

    /// Gradient w.r.t. the input only.
    pub fn backward_input(&self, trace: &MlpTrace<T>, dout: &[T]) -> Vec<T> {
        let n = self.blocks.len();
        let mut dz = self.output.backward_input(dout);
        for k in (0..n).rev() {
            let dpre: Vec<T> = dz
                .iter()
                .zip(&trace.pre[k])
                .map(|(&g, &p)| if p > T::zero() { g } else { T::zero() })
                .collect();
            let dskip = self.blocks[k].backward_input(&dpre);
            for (a, b) in dz.iter_mut().zip(dskip) {
                *a += b;
            }
        }
        self.input.backward_input(&dz)
    }

    fn activation_pattern(trace: &MlpTrace<T>, out: &mut Vec<bool>) {
        for p in &trace.pre {
            out.extend(p.iter().map(|&v| v > T::zero()));
        }
    }

    pub fn tensor_shapes(&self, prefix: &str) -> Vec<TensorShape> {
        let mut out = Vec::new();
        for (i, layer) in self.layers().enumerate() {
            let name = match i {
                0 => format!("{prefix}.input"),
                i if i <= self.blocks.len() => format!("{prefix}.block{}", i - 1),
                _ => format!("{prefix}.output"),
            };
            out.push(TensorShape {
                name: format!("{name}.weight"),
                rows: layer.out_dim,
                cols: layer.in_dim,
            });
            out.push(TensorShape {
                name: format!("{name}.bias"),
                rows: layer.out_dim,
                cols: 1,
            });
        }
        out
    }
}

impl<T: Scalar> ParamSet<T> for Mlp<T> {
    fn tensors(&self) -> Vec<&[T]> {
        self.layers()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

/// Architecture of the fusion model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub enc_w: MlpSpec,
    pub enc_x: MlpSpec,
    pub head: MlpSpec,
}

impl FusionSpec {
    /// Both encoders and the head share `hidden_dim` and `n_residual_blocks`;
    /// encoders emit `embed_dim`-dimensional codes.
    pub fn uniform(
        intervention_dim: usize,
        feature_dim: usize,
        hidden_dim: usize,
        n_residual_blocks: usize,
        embed_dim: usize,
        output_dim: usize,
    ) -> Self {
        let enc = |input_dim| MlpSpec {
            input_dim,
            hidden_dim,
            n_residual_blocks,
            output_dim: embed_dim,
        };
        Self {
            enc_w: enc(intervention_dim),
            enc_x: enc(feature_dim),
            head: MlpSpec {
                input_dim: 2 * embed_dim,
                hidden_dim,
                n_residual_blocks,
                output_dim,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.enc_w.validate()?;
        self.enc_x.validate()?;
        self.head.validate()?;
        if self.head.input_dim != self.enc_w.output_dim + self.enc_x.output_dim {
            return Err(Error::Config(format!(
                "head input dim {} must equal encoder outputs {} + {}",
                self.head.input_dim, self.enc_w.output_dim, self.enc_x.output_dim
            )));
        }
        Ok(())
    }
}

/// Parameters of the fusion model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FusionModel<T> {
    pub enc_w: Mlp<T>,
    pub enc_x: Mlp<T>,
    pub head: Mlp<T>,
}

struct FusionTrace<T> {
    w: MlpTrace<T>,
    x: MlpTrace<T>,
    head: MlpTrace<T>,
}

impl<T: Scalar> FusionModel<T> {
    pub fn zeros(spec: FusionSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            enc_w: Mlp::zeros(spec.enc_w),
            enc_x: Mlp::zeros(spec.enc_x),
            head: Mlp::zeros(spec.head),
        })
    }

    pub fn init(spec: FusionSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::stream(seed, 0);
        Ok(Self {
            enc_w: Mlp::init(spec.enc_w, &mut rng)?,
            enc_x: Mlp::init(spec.enc_x, &mut rng)?,
            head: Mlp::init(spec.head, &mut rng)?,
        })
    }

    pub fn spec(&self) -> FusionSpec {
        FusionSpec {
            enc_w: self.enc_w.spec,
            enc_x: self.enc_x.spec,
            head: self.head.spec,
        }
    }

    fn trace(&self, w: &[T], x: &[T]) -> Result<FusionTrace<T>> {
        let tw = self.enc_w.trace(w)?;
        let tx = self.enc_x.trace(x)?;
        let mut joint = Vec::with_capacity(tw.output.len() + tx.output.len());
        joint.extend_from_slice(&tw.output);
        joint.extend_from_slice(&tx.output);
        let th = self.head.trace(&joint)?;
        Ok(FusionTrace { w: tw, x: tx, head: th })
    }

    /// Jacobian of the output w.r.t. `w`, one row per output dimension.
    pub fn jacobian_w(&self, w: &[T], x: &[T]) -> Result<Vec<Vec<T>>> {
        let tr = self.trace(w, x)?;
        let m = self.output_dim();
        let ew = self.enc_w.spec.output_dim;
        (0..m)
            .map(|o| {
                let mut seed = vec![T::zero(); m];
                seed[o] = T::one();
                let djoint = self.head.backward_input(&tr.head, &seed);
                Ok(self.enc_w.backward_input(&tr.w, &djoint[..ew]))
            })
            .collect()
    }

    /// Sign pattern of every residual pre-activation at `(w, x)`.
    pub fn activation_pattern(&self, w: &[T], x: &[T]) -> Result<Vec<bool>> {
        let tr = self.trace(w, x)?;
        let mut out = Vec::new();
        Mlp::activation_pattern(&tr.w, &mut out);
        Mlp::activation_pattern(&tr.x, &mut out);
        Mlp::activation_pattern(&tr.head, &mut out);
        Ok(out)
    }

    pub fn tensor_shapes(&self) -> Vec<TensorShape> {
        let mut out = self.enc_w.tensor_shapes("enc_w");
        out.extend(self.enc_x.tensor_shapes("enc_x"));
        out.extend(self.head.tensor_shapes("head"));
        out
    }
}

impl<T: Scalar> ParamSet<T> for FusionModel<T> {
    fn tensors(&self) -> Vec<&[T]> {
        let mut out = self.enc_w.tensors();
        out.extend(self.enc_x.tensors());
        out.extend(self.head.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = self.enc_w.tensors_mut();
        out.extend(self.enc_x.tensors_mut());
        out.extend(self.head.tensors_mut());
        out
    }
}

pub(crate) fn check_batch<T: Scalar>(
    batch: &[Example<'_, T>],
    e: usize,
    d: usize,
    m: usize,
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    for ex in batch {
        if ex.w.len() != e || ex.x.len() != d || ex.target.len() != m {
            return Err(Error::Shape(format!(
                "example dims (w={}, x={}, target={}) do not match model ({e}, {d}, {m})",
                ex.w.len(),
                ex.x.len(),
                ex.target.len()
            )));
        }
        if !(all_finite(ex.w) && all_finite(ex.x) && all_finite(ex.target)) {
            return Err(Error::Numeric("non-finite value in batch".into()));
        }
    }
    Ok(())
}

impl<T: Scalar> MetaModel<T> for FusionModel<T> {
    fn intervention_dim(&self) -> usize {
        self.enc_w.spec.input_dim
    }

    fn feature_dim(&self) -> usize {
        self.enc_x.spec.input_dim
    }

    fn output_dim(&self) -> usize {
        self.head.spec.output_dim
    }

    fn forward(&self, w: &[T], x: &[T]) -> Result<Vec<T>> {
        Ok(self.trace(w, x)?.head.output)
    }

    fn loss_and_grad(&self, batch: &[Example<'_, T>]) -> Result<(T, Self)> {
        let m = self.output_dim();
        check_batch(batch, self.intervention_dim(), self.feature_dim(), m)?;
        let scale = T::lit(1.0 / (batch.len() * m) as f64);
        let two = T::lit(2.0);
        let ew = self.enc_w.spec.output_dim;
        let mut grad = self.zeros_like();
        let mut loss = T::zero();
        for ex in batch {
            let tr = self.trace(ex.w, ex.x)?;
            let dout: Vec<T> = tr
                .head
                .output
                .iter()
                .zip(ex.target)
                .map(|(&p, &t)| {
                    let r = p - t;
                    loss += r * r;
                    two * r * scale
                })
                .collect();
            let djoint = self.head.backward(&tr.head, &dout, &mut grad.head);
            self.enc_w.backward(&tr.w, &djoint[..ew], &mut grad.enc_w);
            self.enc_x.backward(&tr.x, &djoint[ew..], &mut grad.enc_x);
        }
        let loss = loss * scale;
        if !loss.is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }
        Ok((loss, grad))
    }

    /// L1 on the input projections of both encoders.
    fn l1_penalty(&self, coeff: T, grad: &mut Self) -> T {
        if coeff == T::zero() {
            return T::zero();
        }
        let mut total = T::zero();
        for (p, g) in [
            (&self.enc_w.input.weight, &mut grad.enc_w.input.weight),
            (&self.enc_x.input.weight, &mut grad.enc_x.input.weight),
        ] {
            for (&v, gv) in p.iter().zip(g.iter_mut()) {
                total += v.abs();
                if v != T::zero() {
                    *gv += coeff * v.signum();
                }
            }
        }
        coeff * total
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned parameter file with a shape manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Checkpoint<T> {
    pub version: u32,
    pub spec: FusionSpec,
    pub manifest: Vec<TensorShape>,
    pub params: FusionModel<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(params: FusionModel<T>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            spec: params.spec(),
            manifest: params.tensor_shapes(),
            params,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        self.spec.validate()?;
        if self.params.spec() != self.spec || self.params.tensor_shapes() != self.manifest {
            return Err(Error::Incompatible("checkpoint manifest does not match parameters".into()));
        }
        for (shape, t) in self.manifest.iter().zip(self.params.tensors()) {
            if shape.rows * shape.cols != t.len() {
                return Err(Error::Incompatible(format!("tensor {} has wrong length", shape.name)));
            }
        }
        if !self.params.is_finite() {
            return Err(Error::Numeric("checkpoint holds non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text)?;
        ck.validate()?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec() -> FusionSpec {
        FusionSpec::uniform(3, 4, 6, 2, 5, 2)
    }

    /// Layer-by-layer evaluation written independently of `Mlp::trace`.
    fn reference_mlp(mlp: &Mlp<f64>, input: &[f64]) -> Vec<f64> {
        let lin = |l: &Linear<f64>, v: &[f64]| -> Vec<f64> {
            (0..l.out_dim)
                .map(|o| l.bias[o] + (0..l.in_dim).map(|i| l.weight[o * l.in_dim + i] * v[i]).sum::<f64>())
                .collect()
        };
        let mut z = lin(&mlp.input, input);
        for b in &mlp.blocks {
            let p = lin(b, &z);
            z = z.iter().zip(&p).map(|(a, q)| a + q.max(0.0)).collect();
        }
        lin(&mlp.output, &z)
    }

    #[test]
    fn zero_params_give_zero_output() {
        let m = FusionModel::<f64>::zeros(spec()).unwrap();
        assert_eq!(m.forward(&[1.0, -2.0, 3.0], &[0.5; 4]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn forward_matches_reference() {
        let m = FusionModel::<f64>::init(spec(), 3).unwrap();
        let w = [0.3, -0.1, 0.7];
        let x = [1.0, 2.0, -0.5, 0.0];
        let mut joint = reference_mlp(&m.enc_w, &w);
        joint.extend(reference_mlp(&m.enc_x, &x));
        let expected = reference_mlp(&m.head, &joint);
        let got = m.forward(&w, &x).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m = FusionModel::<f64>::init(spec(), 3).unwrap();
        assert!(matches!(m.forward(&[1.0], &[0.0; 4]), Err(Error::Shape(_))));
        let bad = FusionSpec { head: MlpSpec { input_dim: 3, ..spec().head }, ..spec() };
        assert!(FusionModel::<f64>::init(bad, 0).is_err());
    }

    #[test]
    fn zero_block_weights_make_linear_model() {
        let mut m = FusionModel::<f64>::init(spec(), 5).unwrap();
        for mlp in [&mut m.enc_w, &mut m.enc_x, &mut m.head] {
            for b in &mut mlp.blocks {
                b.weight.fill(0.0);
                b.bias.fill(0.0);
            }
        }
        let w = [0.2, 0.4, -0.3];
        let x = [1.0, -1.0, 0.5, 2.0];
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let base = m.forward(&w, &[0.0; 4]).unwrap();
        let one = m.forward(&w, &x).unwrap();
        let two = m.forward(&w, &x2).unwrap();
        for o in 0..2 {
            let c1 = one[o] - base[o];
            let c2 = two[o] - base[o];
            assert!((c2 - 2.0 * c1).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_block_with_zero_weights_is_identity() {
        let spec = MlpSpec { input_dim: 3, hidden_dim: 3, n_residual_blocks: 1, output_dim: 3 };
        let mut mlp = Mlp::<f64>::zeros(spec);
        for i in 0..3 {
            mlp.input.weight[i * 3 + i] = 1.0;
            mlp.output.weight[i * 3 + i] = 1.0;
        }
        let input = [0.5, -2.0, 3.0];
        assert_eq!(mlp.forward(&input).unwrap(), input.to_vec());
    }

    #[test]
    fn perfect_prediction_has_zero_loss_and_gradient() {
        let m = FusionModel::<f64>::init(spec(), 1).unwrap();
        let (w, x) = ([0.1, 0.2, 0.3], [1.0, 0.0, -1.0, 0.5]);
        let target = m.forward(&w, &x).unwrap();
        let (loss, g) = m.loss_and_grad(&[Example { w: &w, x: &x, target: &target }]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn nan_input_is_numeric_error() {
        let m = FusionModel::<f64>::init(spec(), 1).unwrap();
        let x = [f64::NAN, 0.0, 0.0, 0.0];
        let err = m.loss_and_grad(&[Example { w: &[0.0; 3], x: &x, target: &[0.0, 0.0] }]);
        assert!(matches!(err, Err(Error::Numeric(_))));
        assert!(matches!(m.loss_and_grad(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let m = FusionModel::<f64>::init(spec(), 9).unwrap();
        let ws = [[0.3, -0.2, 0.5], [-0.7, 0.1, 0.2]];
        let xs = [[0.4, 1.2, -0.3, 0.8], [-1.0, 0.2, 0.6, -0.4]];
        let ts = [[0.5, -1.0], [1.5, 0.2]];
        let batch: Vec<_> = (0..2)
            .map(|i| Example { w: &ws[i][..], x: &xs[i][..], target: &ts[i][..] })
            .collect();
        let (_, g) = m.loss_and_grad(&batch).unwrap();
        let h = 1e-5;
        let mut num = Vec::new();
        let mut ana = Vec::new();
        let n_tensors = m.tensors().len();
        for ti in 0..n_tensors {
            for k in 0..m.tensors()[ti].len() {
                let mut p = m.clone();
                p.tensors_mut()[ti][k] += h;
                let mut q = m.clone();
                q.tensors_mut()[ti][k] -= h;
                let lp = p.loss_and_grad(&batch).unwrap().0;
                let lq = q.loss_and_grad(&batch).unwrap().0;
                num.push((lp - lq) / (2.0 * h));
                ana.push(g.tensors()[ti][k]);
            }
        }
        let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = ana.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff / scale < 1e-6, "relative error {}", diff / scale);
    }

    #[test]
    fn jacobian_w_matches_finite_differences() {
        let m = FusionModel::<f64>::init(spec(), 4).unwrap();
        let w = [0.3, -0.2, 0.5];
        let x = [0.4, 1.2, -0.3, 0.8];
        let jac = m.jacobian_w(&w, &x).unwrap();
        let h = 1e-6;
        for a in 0..3 {
            let mut wp = w;
            wp[a] += h;
            let mut wm = w;
            wm[a] -= h;
            let fp = m.forward(&wp, &x).unwrap();
            let fm = m.forward(&wm, &x).unwrap();
            for o in 0..2 {
                assert!(((fp[o] - fm[o]) / (2.0 * h) - jac[o][a]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn l1_penalty_adds_sign_gradient() {
        let m = FusionModel::<f64>::init(spec(), 2).unwrap();
        let mut g = m.zeros_like();
        let pen = m.l1_penalty(0.1, &mut g);
        let expected: f64 = m.enc_w.input.weight.iter().chain(&m.enc_x.input.weight).map(|v| v.abs()).sum();
        assert!((pen - 0.1 * expected).abs() < 1e-12);
        assert_eq!(g.enc_w.input.weight[0], 0.1 * m.enc_w.input.weight[0].signum());
        assert!(g.head.output.weight.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut p = FusionModel::<f64>::zeros(spec()).unwrap();
        let mut g = p.zeros_like();
        assert_eq!(sgd_step(&p, &g, 0.5).unwrap(), p);
        g.head.output.bias[0] = -2.0;
        let q = sgd_step(&p, &g, 0.5).unwrap();
        assert_eq!(q.head.output.bias[0], 1.0);
        p.head.output.bias[0] = 0.25;
        let two = sgd_step(&sgd_step(&p, &g, 0.25).unwrap(), &g, 0.25).unwrap();
        let once = sgd_step(&p, &g, 0.5).unwrap();
        assert_eq!(two, once);
    }

    #[test]
    fn init_is_bounded_by_fan_in() {
        let m = FusionModel::<f64>::init(spec(), 8).unwrap();
        let bound = 1.0 / 3f64.sqrt();
        assert!(m.enc_w.input.weight.iter().all(|v| v.abs() <= bound));
        assert_ne!(m, FusionModel::init(spec(), 9).unwrap());
        assert_eq!(m, FusionModel::init(spec(), 8).unwrap());
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let m = FusionModel::<f64>::init(spec(), 12).unwrap();
        let ck = Checkpoint::new(m);
        let text = ck.to_json().unwrap();
        let back = Checkpoint::<f64>::from_json(&text).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.params.tensors().iter().zip(ck.params.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let mut bad = ck.clone();
        bad.manifest.pop();
        assert!(Checkpoint::<f64>::from_json(&bad.to_json().unwrap()).is_err());
    }

    #[test]
    fn f32_model_runs() {
        let m = FusionModel::<f32>::init(spec(), 1).unwrap();
        assert_eq!(m.forward(&[0.0; 3], &[0.0; 4]).unwrap().len(), 2);
    }

    proptest! {
        #[test]
        fn loss_and_grad_is_deterministic(seed in any::<u64>(), t in -3.0f64..3.0) {
            let m = FusionModel::<f64>::init(spec(), seed).unwrap();
            let target = [t, -t];
            let batch = [Example { w: &[0.1, 0.2, 0.3][..], x: &[1.0, 0.5, -0.5, 0.2][..], target: &target[..] }];
            let (l1, g1) = m.loss_and_grad(&batch).unwrap();
            let (l2, g2) = m.loss_and_grad(&batch).unwrap();
            prop_assert_eq!(l1.to_bits(), l2.to_bits());
            prop_assert_eq!(g1, g2);
        }
    }
}
