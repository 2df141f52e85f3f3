//! Synthetic feature stores with known structure.
//!
//! Every generator draws from Gaussians around class-dependent means:
//!
//! ```text
//! text  = offset_t + s * (separation / 2) * u_t + noise * N(0, I)
//! image = offset_m + s * (separation / 2) * u_m + noise * N(0, I)
//! ```
//!
//! where `s = -1` for label 0 and `s = +1` for label 1, `u_t` and `u_m` are
//! random unit directions and `offset_*` are random shared offsets of norm
//! `offset_norm`. The geometry (directions and offsets) comes from
//! `geometry_seed` and the samples from `sample_seed`, so two stores can
//! share a distribution while holding different samples.
//!
//! [`SignalLayout`] decides which modality carries the `s` term.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::datastore::{derive_rng, FeatureRecord, FeatureStore};
use crate::error::Result;
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalLayout {
    /// Both modalities carry the class signal (plain blobs).
    Both,
    /// Each record carries the signal in exactly one modality, chosen by a
    /// fair coin; the other modality is offset plus noise only.
    Complementary,
    TextOnly,
    ImageOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub source_name: String,
    pub dim: usize,
    pub per_class: usize,
    pub separation: f64,
    pub noise: f64,
    pub offset_norm: f64,
    /// Token rows per modality; 1 gives pooled features.
    pub tokens: usize,
    pub layout: SignalLayout,
    /// Swap which class sits on which side of each direction.
    pub flip_labels: bool,
    pub geometry_seed: u64,
    pub sample_seed: u64,
}

impl SynthSpec {
    /// Gaussian blobs with signal in both modalities. Offsets and noise
    /// have norm about 10, in line with raw (unnormalized) dual-encoder
    /// embeddings; class means sit 30 apart.
    pub fn blobs(source_name: &str, dim: usize, per_class: usize) -> Self {
        Self {
            source_name: source_name.to_string(),
            dim,
            per_class,
            separation: 30.0,
            noise: 10.0 / (dim as f64).sqrt(),
            offset_norm: 10.0,
            tokens: 1,
            layout: SignalLayout::Both,
            flip_labels: false,
            geometry_seed: 1,
            sample_seed: 1,
        }
    }

    /// Class signal split between the text and image subspaces.
    pub fn complementary(source_name: &str, dim: usize, per_class: usize) -> Self {
        Self {
            layout: SignalLayout::Complementary,
            ..Self::blobs(source_name, dim, per_class)
        }
    }
}

fn unit_direction(rng: &mut ChaCha20Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Values are rounded to f32 so a store survives a CMAF round trip bitwise.
pub fn generate(spec: &SynthSpec) -> Result<FeatureStore> {
    let mut geo = derive_rng("cma/synth/geometry", spec.geometry_seed, &[]);
    let u_t = unit_direction(&mut geo, spec.dim);
    let u_m = unit_direction(&mut geo, spec.dim);
    let off_t: Vec<f64> = unit_direction(&mut geo, spec.dim)
        .into_iter()
        .map(|x| x * spec.offset_norm)
        .collect();
    let off_m: Vec<f64> = unit_direction(&mut geo, spec.dim)
        .into_iter()
        .map(|x| x * spec.offset_norm)
        .collect();

    let mut rng = derive_rng(
        "cma/synth/samples",
        spec.sample_seed,
        spec.source_name.as_bytes(),
    );
    let half = spec.separation / 2.0;
    let mut records = Vec::with_capacity(2 * spec.per_class);
    for label in 0..2u8 {
        for i in 0..spec.per_class {
            let mut sign = if label == 1 { 1.0 } else { -1.0 };
            if spec.flip_labels {
                sign = -sign;
            }
            let (text_signal, image_signal) = match spec.layout {
                SignalLayout::Both => (true, true),
                SignalLayout::TextOnly => (true, false),
                SignalLayout::ImageOnly => (false, true),
                SignalLayout::Complementary => {
                    let text = rng.random_bool(0.5);
                    (text, !text)
                }
            };
            let mut sample = |offset: &[f64], dir: &[f64], signal: bool| -> Matrix {
                let mut data = Vec::with_capacity(spec.tokens * spec.dim);
                for _ in 0..spec.tokens {
                    for k in 0..spec.dim {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        let mean = offset[k] + if signal { sign * half * dir[k] } else { 0.0 };
                        data.push(f64::from((mean + spec.noise * z) as f32));
                    }
                }
                Matrix::from_vec(spec.tokens, spec.dim, data).expect("shape by construction")
            };
            let text = sample(&off_t, &u_t, text_signal);
            let image = sample(&off_m, &u_m, image_signal);
            records.push(FeatureRecord::new(
                format!("{}-{label}-{i:05}", spec.source_name),
                label,
                text,
                image,
            ));
        }
    }
    FeatureStore::new(spec.dim, spec.source_name.clone(), records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dot;

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec::blobs("b", 8, 5);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }

    #[test]
    fn class_means_separate_along_direction() {
        let mut spec = SynthSpec::blobs("b", 16, 400);
        spec.offset_norm = 0.0;
        let store = generate(&spec).unwrap();
        let mut geo = derive_rng("cma/synth/geometry", spec.geometry_seed, &[]);
        let u_t = unit_direction(&mut geo, spec.dim);
        let mut proj = [0.0; 2];
        for r in store.records() {
            proj[r.label as usize] += dot(r.text_tokens.row(0), &u_t) / 400.0;
        }
        assert!((proj[1] - 15.0).abs() < 0.2 && (proj[0] + 15.0).abs() < 0.2, "{proj:?}");
    }

    #[test]
    fn complementary_records_carry_one_signal() {
        let mut spec = SynthSpec::complementary("c", 32, 200);
        spec.noise = 0.0;
        spec.offset_norm = 0.0;
        let store = generate(&spec).unwrap();
        let mut text_carriers = 0;
        for r in store.records() {
            let t = r.text_tokens.row(0).iter().any(|&v| v != 0.0);
            let m = r.image_tokens.row(0).iter().any(|&v| v != 0.0);
            assert!(t ^ m);
            text_carriers += usize::from(t);
        }
        assert!((150..250).contains(&text_carriers), "{text_carriers}");
    }
}
