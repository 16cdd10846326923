//! Trainable stand-in for the partially unfrozen dual encoder.
//!
//! The frozen backbone is represented by the input embeddings themselves.
//! Each modality gets an affine adapter (initialised to the identity), the
//! adapted embeddings are averaged, passed through inverted dropout and a
//! single-logit linear head. A second, normalized fused vector feeds the
//! supervised contrastive loss.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{put_f64s, read_file, write_file, ByteReader};
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, normalize_backward, normalize_rows, Matrix, DEGENERATE_NORM};

pub const DEFAULT_DROPOUT: f64 = 0.1;

const CHECKPOINT_MAGIC: &[u8; 4] = b"CMXM";
const CHECKPOINT_VERSION: u16 = 1;

/// `x ↦ W x + b` applied to each row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    /// `out × in`, row-major.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn identity(dim: usize) -> Self {
        Affine {
            weight: Matrix::identity(dim),
            bias: vec![0.0; dim],
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Affine {
            weight: Matrix::zeros(dim, dim),
            bias: vec![0.0; dim],
        }
    }

    pub fn apply_row(&self, x: &[f64]) -> Vec<f64> {
        (0..self.weight.rows())
            .map(|k| dot(self.weight.row(k), x) + self.bias[k])
            .collect()
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.weight.rows());
        for i in 0..x.rows() {
            out.row_mut(i).copy_from_slice(&self.apply_row(x.row(i)));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub image_adapter: Affine,
    pub text_adapter: Affine,
    pub head_weight: Vec<f64>,
    pub head_bias: f64,
}

/// Gradients share the parameter layout.
pub type ModelGrads = ModelParams;

impl ModelParams {
    pub fn dim(&self) -> usize {
        self.head_weight.len()
    }

    pub fn zeros(dim: usize) -> Self {
        ModelParams {
            image_adapter: Affine::zeros(dim),
            text_adapter: Affine::zeros(dim),
            head_weight: vec![0.0; dim],
            head_bias: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.image_adapter.weight.is_finite()
            && self.text_adapter.weight.is_finite()
            && self
                .image_adapter
                .bias
                .iter()
                .chain(&self.text_adapter.bias)
                .chain(&self.head_weight)
                .all(|v| v.is_finite())
            && self.head_bias.is_finite()
    }

    /// Adapter tensors in checkpoint order.
    pub(crate) fn adapter_tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.image_adapter.weight.as_mut_slice(),
            &mut self.image_adapter.bias,
            self.text_adapter.weight.as_mut_slice(),
            &mut self.text_adapter.bias,
        ]
    }

    pub(crate) fn adapter_tensors(&self) -> [&[f64]; 4] {
        [
            self.image_adapter.weight.as_slice(),
            &self.image_adapter.bias,
            self.text_adapter.weight.as_slice(),
            &self.text_adapter.bias,
        ]
    }

    pub(crate) fn head_tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.head_weight, std::slice::from_mut(&mut self.head_bias)]
    }

    pub(crate) fn head_tensors(&self) -> [&[f64]; 2] {
        [&self.head_weight, std::slice::from_ref(&self.head_bias)]
    }

    /// All values in checkpoint order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in self.adapter_tensors().into_iter().chain(self.head_tensors()) {
            out.extend_from_slice(t);
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) for a given dimension.
    pub fn unflatten(dim: usize, values: &[f64]) -> Result<Self> {
        let mut p = ModelParams::zeros(dim);
        let expected = p.flatten().len();
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "{} values for a dimension-{dim} model, expected {expected}",
                values.len()
            )));
        }
        let mut offset = 0;
        for t in p.adapter_tensors_mut() {
            t.copy_from_slice(&values[offset..offset + t.len()]);
            offset += t.len();
        }
        for t in p.head_tensors_mut() {
            t.copy_from_slice(&values[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(p)
    }
}

/// Identity adapters and a small seeded uniform head.
pub fn init_params(dim: usize, seed: u64) -> Result<ModelParams> {
    if dim == 0 {
        return Err(Error::Parameter("model dimension must be at least 1".into()));
    }
    let bound = 1.0 / (dim as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head_weight = (0..dim).map(|_| rng.gen_range(-bound..=bound)).collect();
    Ok(ModelParams {
        image_adapter: Affine::identity(dim),
        text_adapter: Affine::identity(dim),
        head_weight,
        head_bias: 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct ForwardActivations {
    pub image_input: Matrix,
    pub text_input: Matrix,
    /// Adapted image embeddings `V`.
    pub image: Matrix,
    /// Adapted text embeddings `T_emb`.
    pub text: Matrix,
    /// Dropout-masked fused features `H`.
    pub hidden: Matrix,
    pub logits: Vec<f64>,
    pub image_unit: Matrix,
    pub text_unit: Matrix,
    pub image_norms: Vec<f64>,
    pub text_norms: Vec<f64>,
    /// Row-normalized `(V_norm + T_norm) / 2`.
    pub fused_unit: Matrix,
    pub fused_norms: Vec<f64>,
    /// 1.0 for kept entries, 0.0 for dropped.
    pub dropout_mask: Matrix,
    pub keep_scale: f64,
}

/// Upstream gradients of the objective with respect to the forward outputs.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub logits: Vec<f64>,
    /// With respect to the adapted image embeddings `V`.
    pub image: Matrix,
    /// With respect to the adapted text embeddings `T_emb`.
    pub text: Matrix,
    /// With respect to the normalized fused vectors `F`.
    pub fused: Matrix,
}

impl LossGrads {
    pub fn zeros(n: usize, dim: usize) -> Self {
        LossGrads {
            logits: vec![0.0; n],
            image: Matrix::zeros(n, dim),
            text: Matrix::zeros(n, dim),
            fused: Matrix::zeros(n, dim),
        }
    }
}

fn check_inputs(params: &ModelParams, image: &Matrix, text: &Matrix) -> Result<()> {
    let d = params.dim();
    if image.shape() != text.shape() || image.cols() != d {
        return Err(Error::Shape(format!(
            "model dimension {d}, image {:?}, text {:?}",
            image.shape(),
            text.shape()
        )));
    }
    Ok(())
}

pub fn dropout_mask(rows: usize, cols: usize, p: f64, seed: u64) -> Matrix {
    let mut mask = Matrix::zeros(rows, cols);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in mask.as_mut_slice() {
        *v = if rng.gen::<f64>() < p { 0.0 } else { 1.0 };
    }
    mask
}

pub fn forward(
    params: &ModelParams,
    image_input: &Matrix,
    text_input: &Matrix,
    dropout_p: f64,
    mode: Mode,
    seed: u64,
) -> Result<ForwardActivations> {
    if !(0.0..1.0).contains(&dropout_p) {
        return Err(Error::Parameter(format!(
            "dropout probability must be in [0, 1), got {dropout_p}"
        )));
    }
    check_inputs(params, image_input, text_input)?;
    let (n, d) = image_input.shape();
    let image = params.image_adapter.apply(image_input);
    let text = params.text_adapter.apply(text_input);

    let (dropout_mask, keep_scale) = match mode {
        Mode::Eval => {
            let mut ones = Matrix::zeros(n, d);
            ones.as_mut_slice().iter_mut().for_each(|v| *v = 1.0);
            (ones, 1.0)
        }
        Mode::Train => (dropout_mask(n, d, dropout_p, seed), 1.0 / (1.0 - dropout_p)),
    };

    let mut hidden = Matrix::zeros(n, d);
    for ((h, (v, t)), m) in hidden
        .as_mut_slice()
        .iter_mut()
        .zip(image.as_slice().iter().zip(text.as_slice()))
        .zip(dropout_mask.as_slice())
    {
        *h = (v + t) / 2.0 * (m * keep_scale);
    }
    let logits = hidden
        .row_iter()
        .map(|h| dot(&params.head_weight, h) + params.head_bias)
        .collect();

    let (image_unit, image_norms) = normalize_rows(&image)?;
    let (text_unit, text_norms) = normalize_rows(&text)?;
    let mut fused_unit = Matrix::zeros(n, d);
    let mut fused_norms = Vec::with_capacity(n);
    for i in 0..n {
        let avg: Vec<f64> = image_unit
            .row(i)
            .iter()
            .zip(text_unit.row(i))
            .map(|(a, b)| (a + b) / 2.0)
            .collect();
        let nf = norm(&avg);
        if !(nf >= DEGENERATE_NORM) {
            return Err(Error::DegenerateVector {
                norm: nf,
                context: Some(format!("fused row {i}")),
            });
        }
        for (o, a) in fused_unit.row_mut(i).iter_mut().zip(&avg) {
            *o = a / nf;
        }
        fused_norms.push(nf);
    }

    Ok(ForwardActivations {
        image_input: image_input.clone(),
        text_input: text_input.clone(),
        image,
        text,
        hidden,
        logits,
        image_unit,
        text_unit,
        image_norms,
        text_norms,
        fused_unit,
        fused_norms,
        dropout_mask,
        keep_scale,
    })
}

pub fn backward(params: &ModelParams, acts: &ForwardActivations, grads: &LossGrads) -> Result<ModelGrads> {
    let (n, d) = acts.image.shape();
    if params.dim() != d
        || grads.logits.len() != n
        || grads.image.shape() != (n, d)
        || grads.text.shape() != (n, d)
        || grads.fused.shape() != (n, d)
    {
        return Err(Error::Shape(format!(
            "backward: activations {n}x{d}, model dimension {}, gradients {}/{:?}/{:?}/{:?}",
            params.dim(),
            grads.logits.len(),
            grads.image.shape(),
            grads.text.shape(),
            grads.fused.shape()
        )));
    }
    let mut out = ModelParams::zeros(d);
    let mut d_image = grads.image.clone();
    let mut d_text = grads.text.clone();

    for i in 0..n {
        let g = grads.logits[i];
        out.head_bias += g;
        let h = acts.hidden.row(i);
        for (w, hv) in out.head_weight.iter_mut().zip(h) {
            *w += g * hv;
        }
        // H = mask · scale · (V + T) / 2
        let mask = acts.dropout_mask.row(i);
        let dv = d_image.row_mut(i);
        for k in 0..d {
            dv[k] += g * params.head_weight[k] * mask[k] * acts.keep_scale / 2.0;
        }
        let dt = d_text.row_mut(i);
        for k in 0..d {
            dt[k] += g * params.head_weight[k] * mask[k] * acts.keep_scale / 2.0;
        }

        // F = normalize((V_unit + T_unit) / 2)
        let d_avg = normalize_backward(acts.fused_unit.row(i), acts.fused_norms[i], grads.fused.row(i));
        let half: Vec<f64> = d_avg.iter().map(|x| x / 2.0).collect();
        let dv_from_f = normalize_backward(acts.image_unit.row(i), acts.image_norms[i], &half);
        let dt_from_f = normalize_backward(acts.text_unit.row(i), acts.text_norms[i], &half);
        for (a, b) in d_image.row_mut(i).iter_mut().zip(&dv_from_f) {
            *a += b;
        }
        for (a, b) in d_text.row_mut(i).iter_mut().zip(&dt_from_f) {
            *a += b;
        }
    }

    accumulate_affine(&mut out.image_adapter, &d_image, &acts.image_input);
    accumulate_affine(&mut out.text_adapter, &d_text, &acts.text_input);
    Ok(out)
}

fn accumulate_affine(grad: &mut Affine, d_out: &Matrix, input: &Matrix) {
    for i in 0..d_out.rows() {
        let g = d_out.row(i);
        let x = input.row(i);
        for (k, gk) in g.iter().enumerate() {
            grad.bias[k] += gk;
            for (w, xj) in grad.weight.row_mut(k).iter_mut().zip(x) {
                *w += gk * xj;
            }
        }
    }
}

pub fn save_params(params: &ModelParams, path: &Path) -> Result<()> {
    write_file(path, &encode_params(params)?)
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    decode_params(&read_file(path)?)
}

pub fn encode_params(params: &ModelParams) -> Result<Vec<u8>> {
    let dim = u32::try_from(params.dim()).map_err(|_| Error::Format("model dimension exceeds u32".into()))?;
    let values = params.flatten();
    let mut out = Vec::with_capacity(10 + 8 * values.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    put_f64s(&mut out, &values);
    Ok(out)
}

pub fn decode_params(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = ByteReader::new(bytes, "CMXM");
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let dim = r.u32()? as usize;
    if dim == 0 {
        return Err(Error::Format("CMXM: dimension 0".into()));
    }
    let count = dim
        .checked_mul(dim)
        .and_then(|dd| dd.checked_mul(2))
        .and_then(|x| x.checked_add(3 * dim + 1))
        .ok_or_else(|| Error::Format("CMXM: dimension overflows".into()))?;
    let values = r.f64s(count)?;
    r.finish()?;
    ModelParams::unflatten(dim, &values)
}
