//! The five per-record features: text, image, their normalized
//! concatenation, and the two cross-attended views.

use serde::{Deserialize, Serialize};

use crate::datastore::FeatureRecord;
use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, softmax, Matrix};

/// Which modality supplies the queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Image queries attend over text keys/values (`f_mt`).
    ImageToText,
    /// Text queries attend over image keys/values (`f_tm`).
    TextToImage,
}

/// Query, key and value projections for one attention direction, each `d x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub direction: Direction,
}

impl CrossAttentionParams {
    pub fn identity(d: usize, direction: Direction) -> Self {
        Self {
            w_q: Matrix::identity(d),
            w_k: Matrix::identity(d),
            w_v: Matrix::identity(d),
            direction,
        }
    }

    pub fn zeros(d: usize, direction: Direction) -> Self {
        Self {
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            direction,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    fn check(&self) -> Result<()> {
        let d = self.dim();
        for (name, m) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)] {
            if m.shape() != (d, d) {
                return Err(Error::Dimension(format!(
                    "{name} is {}x{}, expected {d}x{d}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        Ok(())
    }
}

/// Intermediate values of one attention pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Row-stochastic attention weights, `L_q x L_kv`.
    pub weights: Matrix,
    /// Unpooled output, `L_q x d`.
    pub output: Matrix,
}

/// `softmax(Q Kᵀ / √d) V` with `Q = query_seq·w_q`, `K = kv_seq·w_k`,
/// `V = kv_seq·w_v`. Returns the unpooled `L_q x d` output.
pub fn cross_attend(
    query_seq: &Matrix,
    key_value_seq: &Matrix,
    params: &CrossAttentionParams,
) -> Result<Matrix> {
    Ok(cross_attend_traced(query_seq, key_value_seq, params)?.output)
}

pub fn cross_attend_traced(
    query_seq: &Matrix,
    key_value_seq: &Matrix,
    params: &CrossAttentionParams,
) -> Result<AttentionTrace> {
    params.check()?;
    let d = params.dim();
    for (name, m) in [("query", query_seq), ("key/value", key_value_seq)] {
        if m.rows() == 0 {
            return Err(Error::Dimension(format!("{name} sequence is empty")));
        }
        if m.cols() != d {
            return Err(Error::Dimension(format!(
                "{name} sequence width {} does not match attention dimension {d}",
                m.cols()
            )));
        }
    }
    let q = query_seq.matmul(&params.w_q)?;
    let k = key_value_seq.matmul(&params.w_k)?;
    let v = key_value_seq.matmul(&params.w_v)?;
    let mut scores = q.matmul_transposed(&k)?;
    scores.scale(1.0 / (d as f64).sqrt());
    let mut weights = Matrix::zeros(scores.rows(), scores.cols());
    for r in 0..scores.rows() {
        let p = softmax(scores.row(r))?;
        weights.row_mut(r).copy_from_slice(p.as_slice());
    }
    let output = weights.matmul(&v)?;
    Ok(AttentionTrace {
        q,
        k,
        v,
        weights,
        output,
    })
}

/// Gradients of the three projections.
#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

/// Backpropagates `d_pooled`, the gradient with respect to the
/// mean-pooled attention output, into the projections.
pub fn cross_attend_backward(
    query_seq: &Matrix,
    key_value_seq: &Matrix,
    trace: &AttentionTrace,
    d_pooled: &[f64],
) -> Result<AttentionGrads> {
    let (lq, d) = trace.output.shape();
    if d_pooled.len() != d {
        return Err(Error::Dimension(format!(
            "pooled gradient has width {}, expected {d}",
            d_pooled.len()
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    // Every output row receives d_pooled / L_q.
    let mut d_out = Matrix::zeros(lq, d);
    for r in 0..lq {
        for (o, &g) in d_out.row_mut(r).iter_mut().zip(d_pooled) {
            *o = g / lq as f64;
        }
    }
    let d_weights = d_out.matmul_transposed(&trace.v)?;
    let d_v = trace.weights.transposed_matmul(&d_out)?;
    let mut d_scores = Matrix::zeros(d_weights.rows(), d_weights.cols());
    for r in 0..d_weights.rows() {
        let a = trace.weights.row(r);
        let g = d_weights.row(r);
        let inner: f64 = a.iter().zip(g).map(|(x, y)| x * y).sum();
        for ((o, &ai), &gi) in d_scores.row_mut(r).iter_mut().zip(a).zip(g) {
            *o = ai * (gi - inner) * scale;
        }
    }
    let d_q = d_scores.matmul(&trace.k)?;
    let d_k = d_scores.transposed_matmul(&trace.q)?;
    Ok(AttentionGrads {
        w_q: query_seq.transposed_matmul(&d_q)?,
        w_k: key_value_seq.transposed_matmul(&d_k)?,
        w_v: key_value_seq.transposed_matmul(&d_v)?,
    })
}

/// `[f_t ⊕ f_m]`, normalized once as a whole.
pub fn concat_normalized(f_t: &[f64], f_m: &[f64]) -> Result<Vec<f64>> {
    if f_t.len() != f_m.len() {
        return Err(Error::Dimension(format!(
            "cannot concatenate widths {} and {}",
            f_t.len(),
            f_m.len()
        )));
    }
    let mut joined = Vec::with_capacity(f_t.len() * 2);
    joined.extend_from_slice(f_t);
    joined.extend_from_slice(f_m);
    l2_normalize(&joined)
}

/// All five features of one record.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub f_t: Vec<f64>,
    pub f_m: Vec<f64>,
    pub f_c: Vec<f64>,
    pub f_mt: Vec<f64>,
    pub f_tm: Vec<f64>,
}

pub fn text_feature(record: &FeatureRecord) -> Vec<f64> {
    record.text_tokens.mean_rows()
}

pub fn image_feature(record: &FeatureRecord) -> Vec<f64> {
    record.image_tokens.mean_rows()
}

/// Query and key/value sequences of `record` for the given direction.
pub fn attention_inputs(record: &FeatureRecord, direction: Direction) -> (&Matrix, &Matrix) {
    match direction {
        Direction::ImageToText => (&record.image_tokens, &record.text_tokens),
        Direction::TextToImage => (&record.text_tokens, &record.image_tokens),
    }
}

pub fn build_bundle(
    record: &FeatureRecord,
    params_mt: &CrossAttentionParams,
    params_tm: &CrossAttentionParams,
) -> Result<FeatureBundle> {
    let f_t = text_feature(record);
    let f_m = image_feature(record);
    let f_c = concat_normalized(&f_t, &f_m)?;
    let (q, kv) = attention_inputs(record, Direction::ImageToText);
    let f_mt = cross_attend(q, kv, params_mt)?.mean_rows();
    let (q, kv) = attention_inputs(record, Direction::TextToImage);
    let f_tm = cross_attend(q, kv, params_tm)?.mean_rows();
    Ok(FeatureBundle {
        f_t,
        f_m,
        f_c,
        f_mt,
        f_tm,
    })
}
