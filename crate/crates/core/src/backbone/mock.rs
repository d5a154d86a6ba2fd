//! A cheap deterministic stand-in for a pretrained encoder.
//!
//! Visual path: 8×8 box-downsampled grayscale pixels → seeded random
//! projection → tanh. Text path: seeded embedding table, mean over every
//! occupied row, seeded projection, tanh. Both paths are linearly
//! informative about coarse image brightness and caption vocabulary.

use image::RgbImage;
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand_distr::{Distribution, StandardNormal};
use regex::Regex;
use sha2::{Digest, Sha256};

use super::{Backbone, BackboneMeta, FeatureVector, Modality, TokenEmbeddingSequence};
use crate::error::{Error, Result};
use crate::nn::seeded_rng;

pub const MOCK_VOCAB_SIZE: usize = 4096;
const GRID: usize = 8;

#[derive(Debug, Clone)]
pub struct MockBackbone {
    meta: BackboneMeta,
    /// `d × 64`.
    pixel_proj: Array2<f64>,
    /// `vocab × w`.
    token_table: Array2<f64>,
    /// `d × w`.
    text_proj: Array2<f64>,
    words: Regex,
}

fn normal_matrix(rows: usize, cols: usize, scale: f64, seed: u64, label: &str) -> Array2<f64> {
    let mut rng = seeded_rng(seed, label);
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl MockBackbone {
    pub fn new(seed: u64, d: usize, w: usize, context_len: usize) -> Result<Self> {
        let meta = BackboneMeta {
            d,
            w,
            context_len,
            name: format!("mock-{seed}"),
        };
        meta.validate()?;
        let pixels = GRID * GRID;
        Ok(Self {
            pixel_proj: normal_matrix(d, pixels, 2.0 / (pixels as f64).sqrt(), seed, "mock-pixels"),
            token_table: normal_matrix(MOCK_VOCAB_SIZE, w, 0.5, seed, "mock-tokens"),
            text_proj: normal_matrix(d, w, 2.0 / (w as f64).sqrt(), seed, "mock-text"),
            words: Regex::new(r"[\p{L}\p{N}]+|[^\s\p{L}\p{N}]").expect("valid pattern"),
            meta,
        })
    }

    fn downsample(image: &RgbImage) -> Result<Array1<f64>> {
        let (w, h) = image.dimensions();
        if w == 0 || h == 0 {
            return Err(Error::ImageDecode {
                path: "<memory>".into(),
                message: "empty image".into(),
            });
        }
        let (w, h) = (w as usize, h as usize);
        let span = |cell: usize, size: usize| {
            let start = cell * size / GRID;
            let end = ((cell + 1) * size / GRID).max(start + 1).min(size);
            (start.min(size - 1), end)
        };
        let mut out = Array1::zeros(GRID * GRID);
        for cy in 0..GRID {
            let (y0, y1) = span(cy, h);
            for cx in 0..GRID {
                let (x0, x1) = span(cx, w);
                let mut acc = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = image.get_pixel(x as u32, y as u32).0;
                        acc += 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]);
                    }
                }
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                out[cy * GRID + cx] = acc / count / 255.0 - 0.5;
            }
        }
        Ok(out)
    }

    fn readout(&self, mean: &Array1<f64>) -> FeatureVector {
        FeatureVector {
            values: self.text_proj.dot(mean).mapv(f64::tanh),
            modality: Modality::Textual,
        }
    }

    fn check_id(&self, id: u32) -> Result<()> {
        if id as usize >= MOCK_VOCAB_SIZE {
            return Err(Error::Vocabulary {
                id,
                size: MOCK_VOCAB_SIZE,
            });
        }
        Ok(())
    }
}

impl Backbone for MockBackbone {
    fn meta(&self) -> &BackboneMeta {
        &self.meta
    }

    fn vocab_size(&self) -> usize {
        MOCK_VOCAB_SIZE
    }

    fn sot(&self) -> u32 {
        (MOCK_VOCAB_SIZE - 2) as u32
    }

    fn eot(&self) -> u32 {
        (MOCK_VOCAB_SIZE - 1) as u32
    }

    fn encode_words(&self, text: &str) -> Vec<u32> {
        let lower = text.to_lowercase();
        self.words
            .find_iter(&lower)
            .map(|m| (fnv1a(m.as_str().as_bytes()) % (MOCK_VOCAB_SIZE as u64 - 2)) as u32)
            .collect()
    }

    fn encode_image(&self, image: &RgbImage) -> Result<FeatureVector> {
        let pixels = Self::downsample(image)?;
        Ok(FeatureVector {
            values: self.pixel_proj.dot(&pixels).mapv(f64::tanh),
            modality: Modality::Visual,
        })
    }

    fn embed_tokens(&self, ids: &[u32]) -> Result<TokenEmbeddingSequence> {
        if ids.is_empty() || ids.len() > self.meta.context_len {
            return Err(Error::shape(format!(
                "{} token ids outside 1..={}",
                ids.len(),
                self.meta.context_len
            )));
        }
        for &id in ids {
            self.check_id(id)?;
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let embeddings = self.token_table.select(Axis(0), &idx);
        let eot_index = ids
            .iter()
            .position(|&i| i == self.eot())
            .unwrap_or(ids.len() - 1);
        Ok(TokenEmbeddingSequence {
            embeddings,
            eot_index,
            pseudo_slot: None,
        })
    }

    fn encode_token_embeddings(&self, seq: &TokenEmbeddingSequence) -> Result<FeatureVector> {
        seq.check(&self.meta)?;
        let mut acc = Array1::zeros(self.meta.w);
        for row in seq.embeddings.rows() {
            acc += &row;
        }
        acc /= seq.len() as f64;
        Ok(self.readout(&acc))
    }

    fn encode_text(&self, text: &str) -> Result<FeatureVector> {
        let tokens = self.tokenize(text);
        let mut acc = Array1::zeros(self.meta.w);
        for &id in &tokens.ids {
            self.check_id(id)?;
            acc += &self.token_table.row(id as usize);
        }
        acc /= tokens.ids.len() as f64;
        Ok(self.readout(&acc))
    }

    fn text_vjp(
        &self,
        seq: &TokenEmbeddingSequence,
        grad_out: ArrayView1<'_, f64>,
    ) -> Result<Array2<f64>> {
        seq.check(&self.meta)?;
        if grad_out.len() != self.meta.d {
            return Err(Error::shape(format!(
                "gradient has length {}, expected {}",
                grad_out.len(),
                self.meta.d
            )));
        }
        let out = self.encode_token_embeddings(seq)?.values;
        let g_pre = &grad_out * &out.mapv(|t| 1.0 - t * t);
        let g_mean = self.text_proj.t().dot(&g_pre) / seq.len() as f64;
        let mut grad = Array2::zeros(seq.embeddings.dim());
        for mut row in grad.rows_mut() {
            row.assign(&g_mean);
        }
        Ok(grad)
    }

    fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for m in [&self.pixel_proj, &self.token_table, &self.text_proj] {
            for v in m.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::render_synthetic_image;

    fn mock() -> MockBackbone {
        MockBackbone::new(0, 32, 32, 77).unwrap()
    }

    #[test]
    fn default_dims() {
        let m = mock();
        assert_eq!(m.meta().d, 32);
        assert_eq!(m.meta().w, 32);
        assert_eq!(m.meta().context_len, 77);
    }

    #[test]
    fn empty_text_is_sot_eot() {
        let m = mock();
        assert_eq!(m.tokenize("").ids, vec![m.sot(), m.eot()]);
    }

    #[test]
    fn prompt_prefix_has_three_content_tokens() {
        let m = mock();
        assert_eq!(m.tokenize("a photo of").ids.len(), 5);
    }

    #[test]
    fn long_text_is_truncated_with_eot_kept() {
        let m = mock();
        let text = vec!["word"; 500].join(" ");
        let t = m.tokenize(&text);
        assert!(t.truncated);
        assert_eq!(t.ids.len(), 77);
        assert_eq!(*t.ids.last().unwrap(), m.eot());
    }

    #[test]
    fn vocabulary_bound_is_checked() {
        let m = mock();
        assert!(matches!(
            m.embed_tokens(&[m.sot(), MOCK_VOCAB_SIZE as u32]),
            Err(Error::Vocabulary { .. })
        ));
    }

    #[test]
    fn image_features_separate_cues() {
        let m = mock();
        let a = m.encode_image(&render_synthetic_image(0, 1)).unwrap().values;
        let b = m.encode_image(&render_synthetic_image(1, 1)).unwrap().values;
        let cos = a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt());
        assert!(cos < 0.99, "cos = {cos}");
        assert_eq!(a, m.encode_image(&render_synthetic_image(0, 1)).unwrap().values);
    }

    #[test]
    fn tiny_images_are_accepted() {
        let m = mock();
        let img = RgbImage::from_pixel(3, 5, image::Rgb([10, 20, 30]));
        assert_eq!(m.encode_image(&img).unwrap().len(), 32);
    }

    #[test]
    fn every_row_influences_the_output() {
        let m = mock();
        let seq = m.embed_tokens(&m.tokenize("one two three").ids).unwrap();
        let base = m.encode_token_embeddings(&seq).unwrap().values;
        for r in 0..seq.len() {
            let mut s = seq.clone();
            s.embeddings[[r, 0]] += 0.1;
            let out = m.encode_token_embeddings(&s).unwrap().values;
            assert!((&out - &base).mapv(|x| x * x).sum() > 0.0);
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let m = mock();
        let seq = m.embed_tokens(&m.tokenize("look at this").ids).unwrap();
        let g = Array1::from_shape_fn(32, |i| ((i as f64) * 0.37).sin());
        let grad = m.text_vjp(&seq, g.view()).unwrap();
        let eps = 1e-6;
        for r in 0..seq.len() {
            for c in [0, 5, 31] {
                let mut p = seq.clone();
                p.embeddings[[r, c]] += eps;
                let mut n = seq.clone();
                n.embeddings[[r, c]] -= eps;
                let fp = g.dot(&m.encode_token_embeddings(&p).unwrap().values);
                let fm = g.dot(&m.encode_token_embeddings(&n).unwrap().values);
                let fd = (fp - fm) / (2.0 * eps);
                assert!((fd - grad[[r, c]]).abs() < 1e-7, "row {r} col {c}");
            }
        }
    }
}
