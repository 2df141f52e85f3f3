//! The full cross-modal augmentation model and its exact gradients.
//!
//! Per record the model computes up to five features, feeds each through
//! its own probe, and combines the probe outputs with a meta-linear head.
//! The training loss is the meta head's cross-entropy, optionally plus an
//! equally weighted cross-entropy per branch, and gradients flow end to end
//! into the cross-attention projections.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::datastore::FeatureRecord;
use crate::error::{Error, Result};
use crate::fusion::{
    attention_inputs, concat_normalized, cross_attend_backward, cross_attend_traced,
    image_feature, text_feature, AttentionTrace, CrossAttentionParams, Direction,
};
use crate::heads::{
    branch_forward_traced, cross_entropy, cross_entropy_logit_grad, softmax_backward, BranchHead,
    BranchOutput, DenseLayer, MetaHead,
};
use crate::numerics::{softmax, ProbVector};

/// The five feature pathways, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Text,
    Image,
    Concat,
    ImageToText,
    TextToImage,
}

impl Branch {
    pub const ALL: [Branch; 5] = [
        Branch::Text,
        Branch::Image,
        Branch::Concat,
        Branch::ImageToText,
        Branch::TextToImage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Text => "t",
            Branch::Image => "m",
            Branch::Concat => "c",
            Branch::ImageToText => "mt",
            Branch::TextToImage => "tm",
        }
    }

    pub fn width(self, d: usize) -> usize {
        match self {
            Branch::Concat => 2 * d,
            _ => d,
        }
    }

    fn direction(self) -> Option<Direction> {
        match self {
            Branch::ImageToText => Some(Direction::ImageToText),
            Branch::TextToImage => Some(Direction::TextToImage),
            _ => None,
        }
    }
}

/// Model configuration with ablated components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Variant {
    #[default]
    Full,
    /// No cross-attention branches.
    NoCross,
    /// No meta head: a single probe over the normalized concatenation.
    NoMeta,
    /// Text only: a single probe over the text feature.
    NoImage,
    /// Image only: a single probe over the image feature.
    NoText,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoCross,
        Variant::NoMeta,
        Variant::NoImage,
        Variant::NoText,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCross => "-cross",
            Variant::NoMeta => "-meta",
            Variant::NoImage => "-img",
            Variant::NoText => "-txt",
        }
    }

    pub fn branches(self) -> &'static [Branch] {
        match self {
            Variant::Full => &Branch::ALL,
            Variant::NoCross => &[Branch::Text, Branch::Image, Branch::Concat],
            Variant::NoMeta => &[Branch::Concat],
            Variant::NoImage => &[Branch::Text],
            Variant::NoText => &[Branch::Image],
        }
    }

    /// Only multi-branch variants have a meta head; single-branch variants
    /// predict with their one probe.
    pub fn uses_meta(self) -> bool {
        matches!(self, Variant::Full | Variant::NoCross)
    }

    /// Number of active branches.
    pub fn z(self) -> usize {
        self.branches().len()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" | "cma" => Ok(Variant::Full),
            "-cross" | "no-cross" => Ok(Variant::NoCross),
            "-meta" | "no-meta" => Ok(Variant::NoMeta),
            "-img" | "no-img" => Ok(Variant::NoImage),
            "-txt" | "no-txt" => Ok(Variant::NoText),
            other => Err(Error::UnknownVariant(other.to_string())),
        }
    }
}

impl Serialize for Variant {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.tag())
    }
}

impl<'de> Deserialize<'de> for Variant {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// What the meta head consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaInput {
    /// The concatenated branch probabilities.
    #[default]
    Probabilities,
    /// The concatenated raw branch features. Branch probes then only learn
    /// through the auxiliary branch losses.
    Features,
}

/// Architecture options beyond the variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hidden width of each branch probe; `None` for a plain linear probe.
    pub hidden_units: Option<usize>,
    pub meta_input: MetaInput,
    /// Adds an equally weighted cross-entropy term per branch.
    pub aux_branch_loss: bool,
}

/// All trainable parameters. Gradients use the same type and layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CmaModel {
    dim: usize,
    variant: Variant,
    config: ModelConfig,
    pub attn_mt: Option<CrossAttentionParams>,
    pub attn_tm: Option<CrossAttentionParams>,
    /// Active branches in canonical order.
    pub branches: Vec<(Branch, BranchHead)>,
    pub meta: Option<MetaHead>,
}

/// Named view of one parameter tensor.
#[derive(Debug)]
pub struct ParamBlock<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

#[derive(Debug)]
pub struct ParamBlockMut<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a mut [f64],
}

impl CmaModel {
    /// A model of the right shape with every parameter zero.
    pub fn zeros(dim: usize, variant: Variant, config: ModelConfig) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension("model dimension must be positive".into()));
        }
        if config.hidden_units == Some(0) {
            return Err(Error::Config("hidden_units must be positive when set".into()));
        }
        let needs = |b: Branch| variant.branches().contains(&b);
        let branches = variant
            .branches()
            .iter()
            .map(|&b| {
                let w = b.width(dim);
                let head = match config.hidden_units {
                    Some(h) => BranchHead::with_hidden(w, h),
                    None => BranchHead::linear(w),
                };
                (b, head)
            })
            .collect();
        let meta = variant.uses_meta().then(|| match config.meta_input {
            MetaInput::Probabilities => MetaHead::over_probabilities(variant.z()),
            MetaInput::Features => MetaHead::over_features(
                variant.z(),
                variant.branches().iter().map(|b| b.width(dim)).sum(),
            ),
        });
        Ok(Self {
            dim,
            variant,
            config,
            attn_mt: needs(Branch::ImageToText)
                .then(|| CrossAttentionParams::zeros(dim, Direction::ImageToText)),
            attn_tm: needs(Branch::TextToImage)
                .then(|| CrossAttentionParams::zeros(dim, Direction::TextToImage)),
            branches,
            meta,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn config(&self) -> ModelConfig {
        self.config
    }

    pub fn z(&self) -> usize {
        self.branches.len()
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for b in out.blocks_mut() {
            b.data.fill(0.0);
        }
        out
    }

    pub fn head(&self, branch: Branch) -> Option<&BranchHead> {
        self.branches
            .iter()
            .find(|(b, _)| *b == branch)
            .map(|(_, h)| h)
    }

    fn attention(&self, direction: Direction) -> Option<&CrossAttentionParams> {
        match direction {
            Direction::ImageToText => self.attn_mt.as_ref(),
            Direction::TextToImage => self.attn_tm.as_ref(),
        }
    }

    /// Parameter tensors in a fixed order.
    pub fn blocks(&self) -> Vec<ParamBlock<'_>> {
        fn layer<'a>(prefix: String, l: &'a DenseLayer, out: &mut Vec<ParamBlock<'a>>) {
            out.push(ParamBlock {
                name: format!("{prefix}.weights"),
                rows: l.weights.rows(),
                cols: l.weights.cols(),
                data: l.weights.data(),
            });
            out.push(ParamBlock {
                name: format!("{prefix}.bias"),
                rows: 1,
                cols: l.bias.len(),
                data: &l.bias,
            });
        }
        let mut out = Vec::new();
        for (prefix, attn) in [("attn_mt", &self.attn_mt), ("attn_tm", &self.attn_tm)] {
            if let Some(a) = attn {
                for (n, m) in [("w_q", &a.w_q), ("w_k", &a.w_k), ("w_v", &a.w_v)] {
                    out.push(ParamBlock {
                        name: format!("{prefix}.{n}"),
                        rows: m.rows(),
                        cols: m.cols(),
                        data: m.data(),
                    });
                }
            }
        }
        for (b, head) in &self.branches {
            if let Some(h) = &head.hidden {
                layer(format!("branch.{}.hidden", b.name()), h, &mut out);
            }
            layer(format!("branch.{}", b.name()), &head.output, &mut out);
        }
        if let Some(m) = &self.meta {
            layer("meta".to_string(), &m.layer, &mut out);
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<ParamBlockMut<'_>> {
        fn layer<'a>(prefix: String, l: &'a mut DenseLayer, out: &mut Vec<ParamBlockMut<'a>>) {
            let (rows, cols) = l.weights.shape();
            out.push(ParamBlockMut {
                name: format!("{prefix}.weights"),
                rows,
                cols,
                data: l.weights.data_mut(),
            });
            out.push(ParamBlockMut {
                name: format!("{prefix}.bias"),
                rows: 1,
                cols: l.bias.len(),
                data: &mut l.bias,
            });
        }
        let mut out = Vec::new();
        for (prefix, attn) in [("attn_mt", &mut self.attn_mt), ("attn_tm", &mut self.attn_tm)] {
            if let Some(a) = attn {
                for (n, m) in [("w_q", &mut a.w_q), ("w_k", &mut a.w_k), ("w_v", &mut a.w_v)] {
                    let (rows, cols) = m.shape();
                    out.push(ParamBlockMut {
                        name: format!("{prefix}.{n}"),
                        rows,
                        cols,
                        data: m.data_mut(),
                    });
                }
            }
        }
        for (b, head) in &mut self.branches {
            if let Some(h) = &mut head.hidden {
                layer(format!("branch.{}.hidden", b.name()), h, &mut out);
            }
            layer(format!("branch.{}", b.name()), &mut head.output, &mut out);
        }
        if let Some(m) = &mut self.meta {
            layer("meta".to_string(), &mut m.layer, &mut out);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.data.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks()
            .iter()
            .flat_map(|b| b.data.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        let total = self.param_count();
        if values.len() != total {
            return Err(Error::Dimension(format!(
                "expected {total} parameters, got {}",
                values.len()
            )));
        }
        let mut offset = 0;
        for b in self.blocks_mut() {
            let n = b.data.len();
            b.data.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// `self += alpha * other`; both must share a layout.
    pub fn add_scaled(&mut self, other: &CmaModel, alpha: f64) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += alpha * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.data.iter().all(|v| v.is_finite()))
    }
}

/// Output of [`cma_forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub y_hat: ProbVector,
    /// One entry per active branch, in canonical order.
    pub branch_probs: Vec<ProbVector>,
}

impl Prediction {
    /// Predicted label; ties go to class 0.
    pub fn label(&self) -> u8 {
        self.y_hat.argmax() as u8
    }
}

struct BranchTrace {
    feature: Vec<f64>,
    output: BranchOutput,
    attention: Option<AttentionTrace>,
}

struct ForwardTrace {
    branches: Vec<BranchTrace>,
    meta_input: Option<Vec<f64>>,
    y_hat: ProbVector,
}

fn check_width(record: &FeatureRecord, model: &CmaModel, branch: Branch) -> Result<()> {
    let d = model.dim();
    let uses_text = !matches!(branch, Branch::Image);
    let uses_image = !matches!(branch, Branch::Text);
    for (used, which, m) in [
        (uses_text, "text", &record.text_tokens),
        (uses_image, "image", &record.image_tokens),
    ] {
        if used && m.cols() != d {
            return Err(Error::Dimension(format!(
                "record `{}` {which} width {} does not match model dimension {d}",
                record.id,
                m.cols()
            )));
        }
        if used && m.rows() == 0 {
            return Err(Error::Dimension(format!(
                "record `{}` has an empty {which} sequence",
                record.id
            )));
        }
    }
    Ok(())
}

fn forward_traced(record: &FeatureRecord, model: &CmaModel) -> Result<ForwardTrace> {
    let mut branches = Vec::with_capacity(model.z());
    for (branch, head) in &model.branches {
        check_width(record, model, *branch)?;
        let (feature, attention) = match branch {
            Branch::Text => (text_feature(record), None),
            Branch::Image => (image_feature(record), None),
            Branch::Concat => (
                concat_normalized(&text_feature(record), &image_feature(record))?,
                None,
            ),
            Branch::ImageToText | Branch::TextToImage => {
                let dir = branch.direction().unwrap();
                let params = model.attention(dir).ok_or_else(|| {
                    Error::Dimension(format!("model has no {dir:?} attention parameters"))
                })?;
                let (q, kv) = attention_inputs(record, dir);
                let trace = cross_attend_traced(q, kv, params)?;
                (trace.output.mean_rows(), Some(trace))
            }
        };
        let output = branch_forward_traced(&feature, head)?;
        branches.push(BranchTrace {
            feature,
            output,
            attention,
        });
    }

    let (meta_input, y_hat) = match &model.meta {
        Some(meta) => {
            let input: Vec<f64> = match model.config.meta_input {
                MetaInput::Probabilities => branches
                    .iter()
                    .flat_map(|b| b.output.probs.as_slice().iter().copied())
                    .collect(),
                MetaInput::Features => branches
                    .iter()
                    .flat_map(|b| b.feature.iter().copied())
                    .collect(),
            };
            let y_hat = softmax(&meta.layer.forward(&input)?)?;
            (Some(input), y_hat)
        }
        None => (None, branches[0].output.probs.clone()),
    };
    Ok(ForwardTrace {
        branches,
        meta_input,
        y_hat,
    })
}

pub fn cma_forward(record: &FeatureRecord, model: &CmaModel) -> Result<Prediction> {
    let trace = forward_traced(record, model)?;
    Ok(Prediction {
        y_hat: trace.y_hat,
        branch_probs: trace.branches.into_iter().map(|b| b.output.probs).collect(),
    })
}

fn loss_from_trace(label: u8, model: &CmaModel, trace: &ForwardTrace) -> Result<f64> {
    let mut loss = cross_entropy(label, &trace.y_hat)?;
    if model.config.aux_branch_loss && model.meta.is_some() {
        for b in &trace.branches {
            loss += cross_entropy(label, &b.output.probs)?;
        }
    }
    Ok(loss)
}

/// Training loss for one record.
pub fn cma_loss(record: &FeatureRecord, label: u8, model: &CmaModel) -> Result<f64> {
    let trace = forward_traced(record, model)?;
    loss_from_trace(label, model, &trace)
}

/// Loss and exact gradients for one record.
pub fn cma_backward(record: &FeatureRecord, label: u8, model: &CmaModel) -> Result<(f64, CmaModel)> {
    let mut grads = model.zeros_like();
    let loss = accumulate_backward(record, label, model, &mut grads, 1.0)?;
    Ok((loss, grads))
}

/// Adds `scale` times the gradient of the record's loss into `grads`.
pub(crate) fn accumulate_backward(
    record: &FeatureRecord,
    label: u8,
    model: &CmaModel,
    grads: &mut CmaModel,
    scale: f64,
) -> Result<f64> {
    if label > 1 {
        return Err(Error::InvalidInput(format!("label {label} is not binary")));
    }
    let trace = forward_traced(record, model)?;
    let loss = loss_from_trace(label, model, &trace)?;

    let d_out: Vec<f64> = cross_entropy_logit_grad(label, &trace.y_hat)
        .iter()
        .map(|g| g * scale)
        .collect();
    let z = trace.branches.len();
    // Gradient w.r.t. each branch's logits and (features mode) its feature.
    let mut d_logits: Vec<Vec<f64>> = vec![vec![0.0; 2]; z];
    let mut d_features: Vec<Option<Vec<f64>>> = vec![None; z];

    match (&model.meta, &mut grads.meta) {
        (Some(meta), Some(gmeta)) => {
            let input = trace.meta_input.as_ref().expect("meta input traced");
            let d_input = meta.layer.backward(input, &d_out, &mut gmeta.layer);
            match model.config.meta_input {
                MetaInput::Probabilities => {
                    for (i, b) in trace.branches.iter().enumerate() {
                        d_logits[i] = softmax_backward(&b.output.probs, &d_input[2 * i..2 * i + 2]);
                    }
                }
                MetaInput::Features => {
                    let mut offset = 0;
                    for (i, b) in trace.branches.iter().enumerate() {
                        let w = b.feature.len();
                        d_features[i] = Some(d_input[offset..offset + w].to_vec());
                        offset += w;
                    }
                }
            }
            if model.config.aux_branch_loss {
                for (i, b) in trace.branches.iter().enumerate() {
                    let g = cross_entropy_logit_grad(label, &b.output.probs);
                    d_logits[i][0] += scale * g[0];
                    d_logits[i][1] += scale * g[1];
                }
            }
        }
        _ => d_logits[0] = d_out,
    }

    for (i, ((branch, head), b)) in model.branches.iter().zip(&trace.branches).enumerate() {
        let ghead = &mut grads.branches[i].1;
        let input_to_output = b.output.hidden.as_deref().unwrap_or(&b.feature);
        let d_after = head.output.backward(input_to_output, &d_logits[i], &mut ghead.output);
        let mut d_feature = match (&head.hidden, &b.output.hidden, &mut ghead.hidden) {
            (Some(layer), Some(h), Some(glayer)) => {
                let d_pre: Vec<f64> = d_after
                    .iter()
                    .zip(h)
                    .map(|(g, a)| g * (1.0 - a * a))
                    .collect();
                layer.backward(&b.feature, &d_pre, glayer)
            }
            _ => d_after,
        };
        if let Some(extra) = &d_features[i] {
            for (a, e) in d_feature.iter_mut().zip(extra) {
                *a += e;
            }
        }
        if let (Some(dir), Some(att)) = (branch.direction(), &b.attention) {
            let (q, kv) = attention_inputs(record, dir);
            let ag = cross_attend_backward(q, kv, att, &d_feature)?;
            let target = match dir {
                Direction::ImageToText => grads.attn_mt.as_mut(),
                Direction::TextToImage => grads.attn_tm.as_mut(),
            }
            .expect("attention gradients present");
            for (dst, src) in [
                (&mut target.w_q, &ag.w_q),
                (&mut target.w_k, &ag.w_k),
                (&mut target.w_v, &ag.w_v),
            ] {
                for (x, y) in dst.data_mut().iter_mut().zip(src.data()) {
                    *x += y;
                }
            }
        }
    }
    Ok(loss)
}

/// Mean loss and mean gradient over a batch.
pub fn batch_loss_and_grad(
    records: &[&FeatureRecord],
    model: &CmaModel,
) -> Result<(f64, CmaModel)> {
    if records.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut grads = model.zeros_like();
    let scale = 1.0 / records.len() as f64;
    let mut total = 0.0;
    for r in records {
        total += accumulate_backward(r, r.label, model, &mut grads, scale)?;
    }
    Ok((total * scale, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gradient_check, Matrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_record(rng: &mut ChaCha8Rng, d: usize, id: &str) -> FeatureRecord {
        let mut m = |rows: usize| {
            Matrix::from_vec(rows, d, (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap()
        };
        let lt = 1 + (id.len() % 3);
        let t = m(lt);
        let i = m(2);
        FeatureRecord::new(id, 1, t, i)
    }

    fn randomize(model: &mut CmaModel, rng: &mut ChaCha8Rng, scale: f64) {
        for b in model.blocks_mut() {
            b.data.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let model = CmaModel::zeros(3, Variant::Full, ModelConfig::default()).unwrap();
        let r = FeatureRecord::pooled("a", 0, &[1.0, 2.0, 3.0], &[0.0, 1.0, 0.0]).unwrap();
        let p = cma_forward(&r, &model).unwrap();
        assert_eq!(p.y_hat.as_slice(), &[0.5, 0.5]);
        assert_eq!(p.branch_probs.len(), 5);
        assert_eq!(p.label(), 0);
    }

    #[test]
    fn variant_branch_counts() {
        let r = FeatureRecord::pooled("a", 0, &[1.0, 2.0], &[0.0, 1.0]).unwrap();
        for (v, n) in [
            (Variant::NoCross, 3),
            (Variant::NoMeta, 1),
            (Variant::NoImage, 1),
            (Variant::NoText, 1),
        ] {
            let model = CmaModel::zeros(2, v, ModelConfig::default()).unwrap();
            assert_eq!(cma_forward(&r, &model).unwrap().branch_probs.len(), n, "{v}");
            assert_eq!(model.z(), n);
        }
    }

    #[test]
    fn variant_parsing() {
        for v in Variant::ALL {
            assert_eq!(v.tag().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("-foo".parse::<Variant>(), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn full_param_count_d512() {
        let model = CmaModel::zeros(512, Variant::Full, ModelConfig::default()).unwrap();
        let expected = 3 * 512 * 512 * 2 + (4 * 512 * 2 + 1024 * 2) + 5 * 2 + (10 * 2 + 2);
        assert_eq!(model.param_count(), expected);
    }

    #[test]
    fn no_image_ignores_image_side() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = CmaModel::zeros(4, Variant::NoImage, ModelConfig::default()).unwrap();
        randomize(&mut model, &mut rng, 0.5);
        assert!(model.attn_mt.is_none() && model.attn_tm.is_none());
        assert!(model.head(Branch::Image).is_none());
        let a = random_record(&mut rng, 4, "x");
        let mut b = a.clone();
        b.image_tokens = Matrix::zeros(7, 4);
        assert_eq!(cma_forward(&a, &model).unwrap(), cma_forward(&b, &model).unwrap());
        let (_, ga) = cma_backward(&a, 1, &model).unwrap();
        let (_, gb) = cma_backward(&b, 1, &model).unwrap();
        assert_eq!(ga, gb);
    }

    fn check_grads(variant: Variant, config: ModelConfig, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let mut model = CmaModel::zeros(d, variant, config).unwrap();
        randomize(&mut model, &mut rng, 0.8);
        let record = random_record(&mut rng, d, "abc");
        let label = (seed % 2) as u8;
        let (_, grads) = cma_backward(&record, label, &model).unwrap();
        let params = model.to_flat();
        let mut probe = model.clone();
        gradient_check(
            |p| {
                probe.set_flat(p)?;
                cma_loss(&record, label, &probe)
            },
            &params,
            &grads.to_flat(),
            3e-4,
        )
        .unwrap()
    }

    #[test]
    fn gradients_match_finite_differences_for_every_configuration() {
        let configs = [
            ModelConfig::default(),
            ModelConfig { aux_branch_loss: true, ..Default::default() },
            ModelConfig { hidden_units: Some(3), ..Default::default() },
            ModelConfig { meta_input: MetaInput::Features, aux_branch_loss: true, ..Default::default() },
        ];
        for (ci, config) in configs.into_iter().enumerate() {
            for v in Variant::ALL {
                for seed in 0..4 {
                    let err = check_grads(v, config, seed + 10 * ci as u64);
                    assert!(err <= 1e-4, "{v} {config:?} seed {seed}: {err}");
                }
            }
        }
    }

    #[test]
    fn permuting_branches_with_meta_blocks_preserves_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut model = CmaModel::zeros(3, Variant::Full, ModelConfig::default()).unwrap();
        randomize(&mut model, &mut rng, 1.0);
        let record = random_record(&mut rng, 3, "perm");
        let base = cma_loss(&record, 1, &model).unwrap();

        // Forward with branch order reversed and meta rows permuted to match.
        let order = [4usize, 2, 0, 3, 1];
        let trace = forward_traced(&record, &model).unwrap();
        let meta = model.meta.as_ref().unwrap();
        let mut w = Matrix::zeros(10, 2);
        let mut input = Vec::new();
        for (slot, &src) in order.iter().enumerate() {
            input.extend_from_slice(trace.branches[src].output.probs.as_slice());
            for r in 0..2 {
                w.row_mut(2 * slot + r).copy_from_slice(meta.layer.weights.row(2 * src + r));
            }
        }
        let logits = crate::numerics::affine_vec(&input, &w, &meta.layer.bias).unwrap();
        let permuted = cross_entropy(1, &softmax(&logits).unwrap()).unwrap();
        assert!((permuted - base).abs() < 1e-12);
    }
}
