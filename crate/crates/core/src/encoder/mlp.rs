//! Reference MLP encoder with a class head and a 4-way rotation head.
//!
//! The body is a chain of dense layers with ReLU between them; the last body
//! layer is linear and produces the embedding. Both heads read the embedding.
//! Everything is generic over the float type so the same code runs in f32 for
//! training and in f64 for gradient checks.

use std::fmt::Debug;

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::encoder::rotation::RotationLabel;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub trait Scalar: Float + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("float cast")
    }

    fn to_f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).expect("float cast")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense layer computing `y = W x + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    pub weights: Matrix<F>,
    pub bias: Vec<F>,
}

impl<F: Scalar> Dense<F> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weights: Matrix::zeros(output, input),
            bias: vec![F::zero(); output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    fn random<R: Rng + ?Sized>(input: usize, output: usize, scale: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, scale).expect("positive scale");
        let data = (0..input * output)
            .map(|_| F::from_f64(normal.sample(rng)))
            .collect();
        Dense {
            weights: Matrix::from_vec(output, input, data).expect("shape"),
            bias: vec![F::zero(); output],
        }
    }

    fn param_count(&self) -> usize {
        self.weights.as_slice().len() + self.bias.len()
    }

    /// `x W^T + b` for a batch `x` of shape `n x in`.
    fn forward(&self, x: &Matrix<F>) -> Matrix<F> {
        let mut out = Matrix::zeros(x.rows(), self.output_dim());
        for (i, row) in x.iter_rows().enumerate() {
            let dst = out.row_mut(i);
            for (o, (w, &b)) in self.weights.iter_rows().zip(&self.bias).enumerate() {
                dst[o] = dot(row, w) + b;
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    fn backward(&self, x: &Matrix<F>, dy: &Matrix<F>, grad: &mut Dense<F>, need_dx: bool) -> Option<Matrix<F>> {
        for (xi, dyi) in x.iter_rows().zip(dy.iter_rows()) {
            for (o, &g) in dyi.iter().enumerate() {
                if g == F::zero() {
                    continue;
                }
                grad.bias[o] = grad.bias[o] + g;
                axpy(grad.weights.row_mut(o), g, xi);
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = Matrix::zeros(x.rows(), self.input_dim());
        for (i, dyi) in dy.iter_rows().enumerate() {
            let dst = dx.row_mut(i);
            for (o, &g) in dyi.iter().enumerate() {
                if g != F::zero() {
                    axpy(dst, g, self.weights.row(o));
                }
            }
        }
        Some(dx)
    }

    fn cast<G: Scalar>(&self) -> Dense<G> {
        Dense {
            weights: self.weights.map(|v| G::from_f64(v.to_f64())),
            bias: self.bias.iter().map(|&v| G::from_f64(v.to_f64())).collect(),
        }
    }

    fn same_shape(&self, other: &Dense<F>) -> bool {
        self.weights.shape() == other.weights.shape() && self.bias.len() == other.bias.len()
    }

    fn values(&self) -> impl Iterator<Item = &F> {
        self.weights.as_slice().iter().chain(&self.bias)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut F> {
        self.weights.as_mut_slice().iter_mut().chain(self.bias.iter_mut())
    }
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

fn axpy<F: Scalar>(dst: &mut [F], a: F, x: &[F]) {
    for (d, &v) in dst.iter_mut().zip(x) {
        *d = *d + a * v;
    }
}

/// Layer sizes of an encoder: `input -> hidden... -> embedding`, plus the
/// number of classes seen by the class head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub num_classes: usize,
}

pub const ROTATION_CLASSES: usize = 4;

/// Encoder weights: MLP body plus class and rotation heads.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F = f32> {
    pub body: Vec<Dense<F>>,
    pub class_head: Dense<F>,
    pub rotation_head: Dense<F>,
}

impl<F: Scalar> EncoderParams<F> {
    /// He-normal body initialization, small-normal heads, zero biases.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        if arch.input_dim == 0 || arch.embedding_dim == 0 || arch.num_classes == 0 {
            return Err(Error::Argument(format!("degenerate architecture {arch:?}")));
        }
        if arch.hidden.contains(&0) {
            return Err(Error::Argument("hidden layer of width 0".into()));
        }
        let mut dims = vec![arch.input_dim];
        dims.extend(&arch.hidden);
        dims.push(arch.embedding_dim);
        let body = dims
            .windows(2)
            .map(|w| Dense::random(w[0], w[1], (2.0 / w[0] as f64).sqrt(), rng))
            .collect();
        let head_scale = (1.0 / arch.embedding_dim as f64).sqrt();
        Ok(EncoderParams {
            body,
            class_head: Dense::random(arch.embedding_dim, arch.num_classes, head_scale, rng),
            rotation_head: Dense::random(arch.embedding_dim, ROTATION_CLASSES, head_scale, rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |d: &Dense<F>| Dense::zeros(d.input_dim(), d.output_dim());
        EncoderParams {
            body: self.body.iter().map(z).collect(),
            class_head: z(&self.class_head),
            rotation_head: z(&self.rotation_head),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.body[0].input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.body.last().expect("non-empty body").output_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.class_head.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(Dense::param_count).sum()
    }

    /// Body layers followed by the class head and the rotation head.
    pub fn layers(&self) -> impl Iterator<Item = &Dense<F>> {
        self.body
            .iter()
            .chain(std::iter::once(&self.class_head))
            .chain(std::iter::once(&self.rotation_head))
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense<F>> {
        self.body
            .iter_mut()
            .chain(std::iter::once(&mut self.class_head))
            .chain(std::iter::once(&mut self.rotation_head))
    }

    /// Flat view over every parameter in layer order.
    pub fn values(&self) -> impl Iterator<Item = &F> {
        self.layers().flat_map(Dense::values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut F> {
        self.layers_mut().flat_map(Dense::values_mut)
    }

    pub fn all_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.body.len() == other.body.len()
            && self.layers().zip(other.layers()).all(|(a, b)| a.same_shape(b))
    }

    /// Validates the layer chain.
    pub fn check_shapes(&self) -> Result<()> {
        if self.body.is_empty() {
            return Err(Error::Shape("encoder has no body layers".into()));
        }
        for (i, w) in self.body.windows(2).enumerate() {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    w[0].output_dim(),
                    i + 1,
                    w[1].input_dim()
                )));
            }
        }
        let d = self.embedding_dim();
        for (name, head) in [("class", &self.class_head), ("rotation", &self.rotation_head)] {
            if head.input_dim() != d {
                return Err(Error::Shape(format!(
                    "{name} head expects {} inputs, embedding has {d}",
                    head.input_dim()
                )));
            }
        }
        if self.rotation_head.output_dim() != ROTATION_CLASSES {
            return Err(Error::Shape("rotation head must have 4 outputs".into()));
        }
        for l in self.layers() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::Shape("bias length differs from layer output".into()));
            }
        }
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> EncoderParams<G> {
        EncoderParams {
            body: self.body.iter().map(Dense::cast).collect(),
            class_head: self.class_head.cast(),
            rotation_head: self.rotation_head.cast(),
        }
    }

    /// Embeds a batch of flat inputs (`n x input_dim`).
    pub fn embed(&self, inputs: &Matrix<F>) -> Result<Matrix<F>> {
        Ok(self.forward_body(inputs)?.pop().expect("embedding activation"))
    }

    /// Activations of every body layer; index 0 is the input itself.
    fn forward_body(&self, inputs: &Matrix<F>) -> Result<Vec<Matrix<F>>> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "encoder expects {} inputs per row, got {}",
                self.input_dim(),
                inputs.cols()
            )));
        }
        let last = self.body.len() - 1;
        let mut acts = Vec::with_capacity(self.body.len() + 1);
        acts.push(inputs.clone());
        for (i, layer) in self.body.iter().enumerate() {
            let mut z = layer.forward(acts.last().expect("previous activation"));
            if i != last {
                z.as_mut_slice().iter_mut().for_each(|v| *v = v.max(F::zero()));
            }
            acts.push(z);
        }
        Ok(acts)
    }

    /// In-place `params -= lr * grads`.
    pub fn apply_sgd(&mut self, grads: &Self, lr: F) -> Result<()> {
        if !self.same_shape(grads) {
            return Err(Error::Shape("gradient shape differs from parameters".into()));
        }
        for (p, &g) in self.values_mut().zip(grads.values()) {
            *p = *p - lr * g;
        }
        Ok(())
    }
}

/// Returns `params - lr * grads`.
pub fn sgd_step<F: Scalar>(params: &EncoderParams<F>, grads: &EncoderParams<F>, lr: F) -> Result<EncoderParams<F>> {
    let mut next = params.clone();
    next.apply_sgd(grads, lr)?;
    Ok(next)
}

#[derive(Debug, Clone)]
pub struct LossOutput<F> {
    /// `cls + alpha * rot`
    pub total: F,
    pub cls: F,
    pub rot: F,
    pub grads: EncoderParams<F>,
}

/// Row-wise softmax with max subtraction. Returns probabilities and the
/// mean cross-entropy against `targets`, and overwrites `logits` with
/// `scale * (p - onehot) / n`, the gradient of `scale * mean CE`.
fn softmax_xent_grad<F: Scalar>(logits: &mut Matrix<F>, targets: &[usize], scale: F) -> F {
    let n = F::from_f64(logits.rows() as f64);
    let mut loss = F::zero();
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row_mut(i);
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let shifted_target = row[t] - max;
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        // -log p_t = log(sum) - (z_t - max)
        loss = loss + sum.ln() - shifted_target;
        for (j, v) in row.iter_mut().enumerate() {
            let p = *v / sum;
            let y = if j == t { F::one() } else { F::zero() };
            *v = scale * (p - y) / n;
        }
    }
    loss / n
}

/// Mean cross-entropy losses and their gradient by backpropagation.
///
/// `class_targets` index the class head; `rot_labels` is `None` for inputs
/// that cannot be rotated, in which case the rotation term is zero.
pub fn forward_loss<F: Scalar>(
    params: &EncoderParams<F>,
    inputs: &Matrix<F>,
    class_targets: &[usize],
    rot_labels: Option<&[RotationLabel]>,
    alpha: F,
) -> Result<LossOutput<F>> {
    let n = inputs.rows();
    if n == 0 || class_targets.len() != n {
        return Err(Error::Shape(format!(
            "{n} inputs with {} class targets",
            class_targets.len()
        )));
    }
    if let Some(&bad) = class_targets.iter().find(|&&t| t >= params.num_classes()) {
        return Err(Error::Shape(format!(
            "class target {bad} outside head of size {}",
            params.num_classes()
        )));
    }
    if alpha < F::zero() {
        return Err(Error::Argument("alpha must be non-negative".into()));
    }
    let rot_targets: Option<Vec<usize>> = match rot_labels {
        Some(r) if r.len() != n => {
            return Err(Error::Shape(format!("{n} inputs with {} rotation labels", r.len())));
        }
        Some(r) => Some(r.iter().map(|l| l.index()).collect()),
        None => None,
    };

    let acts = params.forward_body(inputs)?;
    let emb = acts.last().expect("embedding");

    let mut dcls = params.class_head.forward(emb);
    if !dcls.all_finite() {
        return Err(Error::Numerical("non-finite class logits".into()));
    }
    let cls = softmax_xent_grad(&mut dcls, class_targets, F::one());

    let mut grads = params.zeros_like();
    let mut demb = params
        .class_head
        .backward(emb, &dcls, &mut grads.class_head, true)
        .expect("dx requested");

    let mut rot = F::zero();
    if let Some(targets) = &rot_targets {
        let mut drot = params.rotation_head.forward(emb);
        if !drot.all_finite() {
            return Err(Error::Numerical("non-finite rotation logits".into()));
        }
        rot = softmax_xent_grad(&mut drot, targets, alpha);
        let d = params
            .rotation_head
            .backward(emb, &drot, &mut grads.rotation_head, true)
            .expect("dx requested");
        for (a, &b) in demb.as_mut_slice().iter_mut().zip(d.as_slice()) {
            *a = *a + b;
        }
    }

    let total = cls + alpha * rot;
    if !total.is_finite() {
        return Err(Error::Numerical("non-finite loss".into()));
    }

    let last = params.body.len() - 1;
    let mut upstream = demb;
    for i in (0..params.body.len()).rev() {
        if i != last {
            // ReLU gate: the activation stored for layer i is post-ReLU
            for (g, &a) in upstream.as_mut_slice().iter_mut().zip(acts[i + 1].as_slice()) {
                if a <= F::zero() {
                    *g = F::zero();
                }
            }
        }
        let next = params.body[i].backward(&acts[i], &upstream, &mut grads.body[i], i > 0);
        if let Some(dx) = next {
            upstream = dx;
        }
    }

    Ok(LossOutput {
        total,
        cls,
        rot,
        grads,
    })
}
