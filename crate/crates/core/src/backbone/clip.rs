//! CLIP ViT encoder pair loaded from a weight archive.
//!
//! Tensor names follow the original CLIP state dict (`visual.*`,
//! `transformer.resblocks.*`, `token_embedding.weight`, ...). The text tower
//! also implements a reverse pass with respect to its input token
//! embeddings; no weight gradients are ever formed because every weight
//! here is frozen.

use std::fmt::Debug;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::RgbImage;
use ndarray::{s, Array1, Array2, ArrayView1, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use sha2::{Digest, Sha256};

use super::{Backbone, BackboneMeta, BpeTokenizer, FeatureVector, Modality, TokenEmbeddingSequence};
use crate::archive::WeightArchive;
use crate::error::{Error, Result};

/// Scalar type the towers can run in.
pub trait Real:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + Debug
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

fn c<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("representable constant")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    QuickGelu,
    Gelu,
}

impl Activation {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "quick_gelu" => Some(Activation::QuickGelu),
            "gelu" => Some(Activation::Gelu),
            _ => None,
        }
    }

    fn apply<F: Real>(self, x: F) -> F {
        match self {
            Activation::QuickGelu => x / (F::one() + (-c::<F>(1.702) * x).exp()),
            Activation::Gelu => {
                let x64 = x.to_f64().unwrap_or(0.0);
                c(crate::nn::gelu(x64))
            }
        }
    }

    fn grad<F: Real>(self, x: F) -> F {
        match self {
            Activation::QuickGelu => {
                let a = c::<F>(1.702);
                let s = F::one() / (F::one() + (-a * x).exp());
                s + a * x * s * (F::one() - s)
            }
            Activation::Gelu => c(crate::nn::gelu_grad(x.to_f64().unwrap_or(0.0))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm<F> {
    pub weight: Array1<F>,
    pub bias: Array1<F>,
}

struct LnCache<F> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

impl<F: Real> LayerNorm<F> {
    fn normalize(&self, x: &Array2<F>) -> (Array2<F>, LnCache<F>) {
        let eps = c::<F>(1e-5);
        let n = F::from_usize(x.ncols()).expect("width");
        let mut xhat = x.clone();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.iter().fold(F::zero(), |a, &v| a + v) / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().fold(F::zero(), |a, &v| a + v * v) / n;
            *r = F::one() / (var + eps).sqrt();
            let rs = *r;
            row.mapv_inplace(|v| v * rs);
        }
        let y = &xhat * &self.weight + &self.bias;
        (y, LnCache { xhat, rstd })
    }

    fn forward(&self, x: &Array2<F>) -> Array2<F> {
        self.normalize(x).0
    }

    fn backward(&self, cache: &LnCache<F>, gy: &Array2<F>) -> Array2<F> {
        let n = F::from_usize(gy.ncols()).expect("width");
        let gxhat = gy * &self.weight;
        let mut gx = Array2::zeros(gy.dim());
        for i in 0..gy.nrows() {
            let g = gxhat.row(i);
            let xh = cache.xhat.row(i);
            let mean_g = g.sum() / n;
            let mean_gx = g.iter().zip(xh.iter()).fold(F::zero(), |a, (&p, &q)| a + p * q) / n;
            let rs = cache.rstd[i];
            for j in 0..gy.ncols() {
                gx[[i, j]] = rs * (g[j] - mean_g - xh[j] * mean_gx);
            }
        }
        gx
    }
}

/// Pre-LN residual attention block.
#[derive(Debug, Clone)]
pub struct Block<F> {
    pub ln_1: LayerNorm<F>,
    /// `3W × W`, rows ordered q, k, v.
    pub in_proj_weight: Array2<F>,
    pub in_proj_bias: Array1<F>,
    pub out_proj_weight: Array2<F>,
    pub out_proj_bias: Array1<F>,
    pub ln_2: LayerNorm<F>,
    pub fc_weight: Array2<F>,
    pub fc_bias: Array1<F>,
    pub proj_weight: Array2<F>,
    pub proj_bias: Array1<F>,
}

struct BlockCache<F> {
    ln1: LnCache<F>,
    qkv: Array2<F>,
    probs: Vec<Array2<F>>,
    ln2: LnCache<F>,
    pre_act: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct Transformer<F> {
    pub blocks: Vec<Block<F>>,
    pub heads: usize,
    pub activation: Activation,
    pub causal: bool,
}

fn linear<F: Real>(x: &Array2<F>, w: &Array2<F>, b: &Array1<F>) -> Array2<F> {
    x.dot(&w.t()) + b
}

impl<F: Real> Transformer<F> {
    fn block_forward(
        &self,
        b: &Block<F>,
        x: &Array2<F>,
        keep: bool,
    ) -> (Array2<F>, Option<BlockCache<F>>) {
        let (len, width) = x.dim();
        let dh = width / self.heads;
        let scale = F::one() / F::from_usize(dh).expect("head dim").sqrt();
        let (h1, ln1) = b.ln_1.normalize(x);
        let qkv = linear(&h1, &b.in_proj_weight, &b.in_proj_bias);
        let mut attn = Array2::zeros((len, width));
        let mut probs = Vec::with_capacity(if keep { self.heads } else { 0 });
        for h in 0..self.heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., width + h * dh..width + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * width + h * dh..2 * width + (h + 1) * dh]);
            let mut p = q.dot(&k.t()) * scale;
            for i in 0..len {
                let visible = if self.causal { i + 1 } else { len };
                let mut row = p.row_mut(i);
                let max = row
                    .slice(s![..visible])
                    .iter()
                    .fold(F::neg_infinity(), |m, &v| m.max(v));
                let mut sum = F::zero();
                for j in 0..len {
                    if j < visible {
                        row[j] = (row[j] - max).exp();
                        sum += row[j];
                    } else {
                        row[j] = F::zero();
                    }
                }
                row.mapv_inplace(|v| v / sum);
            }
            attn.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&v));
            if keep {
                probs.push(p);
            }
        }
        let mid = x + &linear(&attn, &b.out_proj_weight, &b.out_proj_bias);
        let (h2, ln2) = b.ln_2.normalize(&mid);
        let pre_act = linear(&h2, &b.fc_weight, &b.fc_bias);
        let act = pre_act.mapv(|u| self.activation.apply(u));
        let out = &mid + &linear(&act, &b.proj_weight, &b.proj_bias);
        let cache = keep.then(|| BlockCache {
            ln1,
            qkv,
            probs,
            ln2,
            pre_act,
        });
        (out, cache)
    }

    fn block_backward(&self, b: &Block<F>, cache: &BlockCache<F>, gy: &Array2<F>) -> Array2<F> {
        let (len, width) = gy.dim();
        let dh = width / self.heads;
        let scale = F::one() / F::from_usize(dh).expect("head dim").sqrt();
        let g_act = gy.dot(&b.proj_weight);
        let mut g_pre = g_act;
        g_pre.zip_mut_with(&cache.pre_act, |g, &u| *g *= self.activation.grad(u));
        let g_h2 = g_pre.dot(&b.fc_weight);
        let g_mid = gy + &b.ln_2.backward(&cache.ln2, &g_h2);
        let g_attn = g_mid.dot(&b.out_proj_weight);
        let mut g_qkv = Array2::zeros((len, 3 * width));
        for h in 0..self.heads {
            let q = cache.qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = cache.qkv.slice(s![.., width + h * dh..width + (h + 1) * dh]);
            let v = cache.qkv.slice(s![.., 2 * width + h * dh..2 * width + (h + 1) * dh]);
            let p = &cache.probs[h];
            let g_o = g_attn.slice(s![.., h * dh..(h + 1) * dh]);
            let g_p = g_o.dot(&v.t());
            let g_v = p.t().dot(&g_o);
            let mut g_s = Array2::zeros((len, len));
            for i in 0..len {
                let dot = g_p
                    .row(i)
                    .iter()
                    .zip(p.row(i).iter())
                    .fold(F::zero(), |a, (&x, &y)| a + x * y);
                for j in 0..len {
                    g_s[[i, j]] = p[[i, j]] * (g_p[[i, j]] - dot) * scale;
                }
            }
            g_qkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&g_s.dot(&k));
            g_qkv
                .slice_mut(s![.., width + h * dh..width + (h + 1) * dh])
                .assign(&g_s.t().dot(&q));
            g_qkv
                .slice_mut(s![.., 2 * width + h * dh..2 * width + (h + 1) * dh])
                .assign(&g_v);
        }
        let g_h1 = g_qkv.dot(&b.in_proj_weight);
        &g_mid + &b.ln_1.backward(&cache.ln1, &g_h1)
    }

    pub fn forward(&self, x: Array2<F>) -> Array2<F> {
        self.blocks
            .iter()
            .fold(x, |acc, b| self.block_forward(b, &acc, false).0)
    }

    fn forward_cached(&self, x: Array2<F>) -> (Array2<F>, Vec<BlockCache<F>>) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut acc = x;
        for b in &self.blocks {
            let (out, cache) = self.block_forward(b, &acc, true);
            caches.push(cache.expect("kept"));
            acc = out;
        }
        (acc, caches)
    }
}

#[derive(Debug, Clone)]
pub struct TextTower<F> {
    /// `vocab × w`.
    pub token_embedding: Array2<F>,
    /// `context_len × w`.
    pub positional_embedding: Array2<F>,
    pub transformer: Transformer<F>,
    pub ln_final: LayerNorm<F>,
    /// `w × d`.
    pub projection: Array2<F>,
}

impl<F: Real> TextTower<F> {
    fn inputs(&self, emb: &Array2<F>) -> Array2<F> {
        emb + &self.positional_embedding.slice(s![..emb.nrows(), ..])
    }

    pub fn encode(&self, emb: &Array2<F>, eot: usize) -> Array1<F> {
        let x = self.transformer.forward(self.inputs(emb));
        let row = x.slice(s![eot..eot + 1, ..]).to_owned();
        let normed = self.ln_final.forward(&row);
        normed.row(0).dot(&self.projection)
    }

    /// Gradient with respect to `emb` of `grad · encode(emb, eot)`.
    pub fn vjp(&self, emb: &Array2<F>, eot: usize, grad: ArrayView1<'_, F>) -> Array2<F> {
        let (x, caches) = self.transformer.forward_cached(self.inputs(emb));
        let row = x.slice(s![eot..eot + 1, ..]).to_owned();
        let (_, ln_cache) = self.ln_final.normalize(&row);
        let g_normed = self.projection.dot(&grad).insert_axis(Axis(0));
        let g_row = self.ln_final.backward(&ln_cache, &g_normed);
        let mut g = Array2::zeros(x.dim());
        g.row_mut(eot).assign(&g_row.row(0));
        for (b, cache) in self.transformer.blocks.iter().zip(&caches).rev() {
            g = self.transformer.block_backward(b, cache, &g);
        }
        g
    }
}

#[derive(Debug, Clone)]
pub struct VisionTower<F> {
    /// `W × 3·P·P`, columns ordered (channel, row, col).
    pub patch_weight: Array2<F>,
    pub class_embedding: Array1<F>,
    pub positional_embedding: Array2<F>,
    pub ln_pre: LayerNorm<F>,
    pub transformer: Transformer<F>,
    pub ln_post: LayerNorm<F>,
    /// `W × d`.
    pub projection: Array2<F>,
    pub patch_size: usize,
    pub resolution: usize,
}

impl<F: Real> VisionTower<F> {
    /// `patches` is `grid² × 3·P·P`.
    pub fn encode(&self, patches: &Array2<F>) -> Array1<F> {
        let width = self.class_embedding.len();
        let tokens = patches.dot(&self.patch_weight.t());
        let mut x = Array2::zeros((tokens.nrows() + 1, width));
        x.row_mut(0).assign(&self.class_embedding);
        x.slice_mut(s![1.., ..]).assign(&tokens);
        x += &self.positional_embedding;
        let x = self.transformer.forward(self.ln_pre.forward(&x));
        let cls = self.ln_post.forward(&x.slice(s![0..1, ..]).to_owned());
        cls.row(0).dot(&self.projection)
    }
}

const CLIP_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const CLIP_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

/// Resizes the short side to `resolution`, center-crops, normalizes and cuts
/// the result into flattened patches.
pub fn preprocess<F: Real>(
    image: &RgbImage,
    resolution: usize,
    patch: usize,
    mean: [f64; 3],
    std: [f64; 3],
) -> Result<Array2<F>> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::ImageDecode {
            path: "<memory>".into(),
            message: "empty image".into(),
        });
    }
    let r = resolution as u32;
    let img = if (w, h) == (r, r) {
        image.clone()
    } else {
        let (nw, nh) = if w <= h {
            (r, ((r as u64 * h as u64) / w as u64) as u32)
        } else {
            (((r as u64 * w as u64) / h as u64) as u32, r)
        };
        let resized = image::imageops::resize(image, nw.max(r), nh.max(r), FilterType::CatmullRom);
        let left = ((f64::from(resized.width() - r)) / 2.0).round() as u32;
        let top = ((f64::from(resized.height() - r)) / 2.0).round() as u32;
        image::imageops::crop_imm(&resized, left, top, r, r).to_image()
    };
    let grid = resolution / patch;
    let mut out = Array2::zeros((grid * grid, 3 * patch * patch));
    for gy in 0..grid {
        for gx in 0..grid {
            let row = gy * grid + gx;
            for ky in 0..patch {
                for kx in 0..patch {
                    let px = img.get_pixel((gx * patch + kx) as u32, (gy * patch + ky) as u32).0;
                    for ch in 0..3 {
                        let v = (f64::from(px[ch]) / 255.0 - mean[ch]) / std[ch];
                        out[[row, ch * patch * patch + ky * patch + kx]] = c(v);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Pretrained CLIP backbone running in `f32`.
pub struct ClipBackbone {
    meta: BackboneMeta,
    pub text: TextTower<f32>,
    pub vision: VisionTower<f32>,
    tokenizer: BpeTokenizer,
    mean: [f64; 3],
    std: [f64; 3],
}

const MERGES_FILES: [&str; 4] = [
    "bpe_simple_vocab_16e6.txt.gz",
    "merges.txt.gz",
    "merges.txt",
    "bpe_simple_vocab_16e6.txt",
];

struct Loader<'a> {
    archive: &'a WeightArchive,
    expected: Vec<(String, Vec<usize>)>,
}

impl Loader<'_> {
    fn fail(&self, detail: String) -> Error {
        Error::WeightLoad {
            path: self.archive.dir.clone(),
            detail,
        }
    }

    fn dim(&self, name: &str, axis: usize) -> Result<usize> {
        self.archive
            .shape_of(name)
            .and_then(|s| s.get(axis).copied())
            .ok_or_else(|| self.fail(format!("manifest diff:\n- {name} (missing)")))
    }

    fn expect(&mut self, name: &str, shape: &[usize]) {
        self.expected.push((name.to_string(), shape.to_vec()));
    }

    fn vec1(&mut self, name: &str, len: usize) -> Array1<f32> {
        self.expect(name, &[len]);
        let data = self.archive.f32(name).unwrap_or_default();
        Array1::from_vec(data)
    }

    fn mat(&mut self, name: &str, shape: &[usize], rows: usize, cols: usize) -> Array2<f32> {
        self.expect(name, shape);
        let data = self.archive.f32(name).unwrap_or_default();
        Array2::from_shape_vec((rows, cols), data).unwrap_or_else(|_| Array2::zeros((rows, cols)))
    }

    fn layer_norm(&mut self, prefix: &str, width: usize) -> LayerNorm<f32> {
        LayerNorm {
            weight: self.vec1(&format!("{prefix}.weight"), width),
            bias: self.vec1(&format!("{prefix}.bias"), width),
        }
    }

    fn count_blocks(&self, prefix: &str) -> usize {
        (0..)
            .take_while(|i| {
                self.archive
                    .tensors
                    .contains_key(&format!("{prefix}.resblocks.{i}.ln_1.weight"))
            })
            .count()
    }

    fn transformer(
        &mut self,
        prefix: &str,
        width: usize,
        heads: usize,
        activation: Activation,
        causal: bool,
    ) -> Result<Transformer<f32>> {
        let layers = self.count_blocks(prefix);
        if layers == 0 {
            return Err(self.fail(format!("manifest diff:\n- {prefix}.resblocks.0.* (missing)")));
        }
        let hidden = self.dim(&format!("{prefix}.resblocks.0.mlp.c_fc.weight"), 0)?;
        let mut blocks = Vec::with_capacity(layers);
        for i in 0..layers {
            let p = format!("{prefix}.resblocks.{i}");
            blocks.push(Block {
                ln_1: self.layer_norm(&format!("{p}.ln_1"), width),
                in_proj_weight: self.mat(
                    &format!("{p}.attn.in_proj_weight"),
                    &[3 * width, width],
                    3 * width,
                    width,
                ),
                in_proj_bias: self.vec1(&format!("{p}.attn.in_proj_bias"), 3 * width),
                out_proj_weight: self.mat(
                    &format!("{p}.attn.out_proj.weight"),
                    &[width, width],
                    width,
                    width,
                ),
                out_proj_bias: self.vec1(&format!("{p}.attn.out_proj.bias"), width),
                ln_2: self.layer_norm(&format!("{p}.ln_2"), width),
                fc_weight: self.mat(&format!("{p}.mlp.c_fc.weight"), &[hidden, width], hidden, width),
                fc_bias: self.vec1(&format!("{p}.mlp.c_fc.bias"), hidden),
                proj_weight: self.mat(
                    &format!("{p}.mlp.c_proj.weight"),
                    &[width, hidden],
                    width,
                    hidden,
                ),
                proj_bias: self.vec1(&format!("{p}.mlp.c_proj.bias"), width),
            });
        }
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(self.fail(format!("{heads} heads do not divide width {width}")));
        }
        Ok(Transformer {
            blocks,
            heads,
            activation,
            causal,
        })
    }
}

fn meta_triplet(archive: &WeightArchive, key: &str, default: [f64; 3]) -> [f64; 3] {
    archive
        .manifest
        .meta
        .get(key)
        .and_then(|v| v.as_array())
        .and_then(|a| {
            let vals: Vec<f64> = a.iter().filter_map(|x| x.as_f64()).collect();
            <[f64; 3]>::try_from(vals).ok()
        })
        .unwrap_or(default)
}

impl ClipBackbone {
    pub fn load(dir: &Path) -> Result<Self> {
        let archive = WeightArchive::load(dir, "clip")?;
        let mut l = Loader {
            archive: &archive,
            expected: Vec::new(),
        };
        let vocab = l.dim("token_embedding.weight", 0)?;
        let w = l.dim("token_embedding.weight", 1)?;
        let context_len = l.dim("positional_embedding", 0)?;
        let d = l.dim("text_projection", 1)?;
        let vwidth = l.dim("visual.conv1.weight", 0)?;
        let patch = l.dim("visual.conv1.weight", 2)?;
        let npos = l.dim("visual.positional_embedding", 0)?;
        let grid = ((npos.saturating_sub(1)) as f64).sqrt().round() as usize;
        if grid * grid + 1 != npos {
            return Err(l.fail(format!("visual.positional_embedding has {npos} rows, not grid²+1")));
        }
        let activation = match archive.meta_str("activation") {
            None => Activation::QuickGelu,
            Some(s) => Activation::parse(s)
                .ok_or_else(|| l.fail(format!("unknown activation {s:?}")))?,
        };
        let text_heads = archive.meta_usize("text_heads").unwrap_or(w / 64);
        let vision_heads = archive.meta_usize("vision_heads").unwrap_or(vwidth / 64);

        let text = TextTower {
            token_embedding: l.mat("token_embedding.weight", &[vocab, w], vocab, w),
            positional_embedding: l.mat("positional_embedding", &[context_len, w], context_len, w),
            transformer: l.transformer("transformer", w, text_heads, activation, true)?,
            ln_final: l.layer_norm("ln_final", w),
            projection: l.mat("text_projection", &[w, d], w, d),
        };
        let vision = VisionTower {
            patch_weight: l.mat(
                "visual.conv1.weight",
                &[vwidth, 3, patch, patch],
                vwidth,
                3 * patch * patch,
            ),
            class_embedding: l.vec1("visual.class_embedding", vwidth),
            positional_embedding: l.mat("visual.positional_embedding", &[npos, vwidth], npos, vwidth),
            ln_pre: l.layer_norm("visual.ln_pre", vwidth),
            transformer: l.transformer("visual.transformer", vwidth, vision_heads, activation, false)?,
            ln_post: l.layer_norm("visual.ln_post", vwidth),
            projection: l.mat("visual.proj", &[vwidth, d], vwidth, d),
            patch_size: patch,
            resolution: grid * patch,
        };
        archive.check_expected(&l.expected)?;

        let merges = MERGES_FILES
            .iter()
            .map(|f| dir.join(f))
            .find(|p| p.is_file())
            .ok_or_else(|| Error::WeightLoad {
                path: dir.to_path_buf(),
                detail: format!("no BPE merges file (looked for {})", MERGES_FILES.join(", ")),
            })?;
        let tokenizer = BpeTokenizer::from_file(&merges)?;
        if tokenizer.vocab_size() != vocab {
            return Err(Error::WeightLoad {
                path: dir.to_path_buf(),
                detail: format!(
                    "tokenizer vocabulary has {} entries, token embedding has {vocab}",
                    tokenizer.vocab_size()
                ),
            });
        }
        let meta = BackboneMeta {
            d,
            w,
            context_len,
            name: archive
                .meta_str("name")
                .map(str::to_string)
                .unwrap_or_else(|| format!("clip-{}", dir.display())),
        };
        meta.validate()?;
        Ok(Self {
            meta,
            text,
            vision,
            tokenizer,
            mean: meta_triplet(&archive, "image_mean", CLIP_MEAN),
            std: meta_triplet(&archive, "image_std", CLIP_STD),
        })
    }

    pub fn tokenizer(&self) -> &BpeTokenizer {
        &self.tokenizer
    }

    fn embeddings_f32(&self, seq: &TokenEmbeddingSequence) -> Array2<f32> {
        seq.embeddings.mapv(|v| v as f32)
    }

    fn for_each_weight(&self, f: &mut dyn FnMut(&[f32])) {
        fn blocks(t: &Transformer<f32>, f: &mut dyn FnMut(&[f32])) {
            for b in &t.blocks {
                for a in [
                    &b.ln_1.weight,
                    &b.ln_1.bias,
                    &b.in_proj_bias,
                    &b.out_proj_bias,
                    &b.ln_2.weight,
                    &b.ln_2.bias,
                    &b.fc_bias,
                    &b.proj_bias,
                ] {
                    f(a.as_slice().expect("contiguous"));
                }
                for m in [
                    &b.in_proj_weight,
                    &b.out_proj_weight,
                    &b.fc_weight,
                    &b.proj_weight,
                ] {
                    f(m.as_slice().expect("contiguous"));
                }
            }
        }
        let t = &self.text;
        for m in [&t.token_embedding, &t.positional_embedding, &t.projection] {
            f(m.as_slice().expect("contiguous"));
        }
        f(t.ln_final.weight.as_slice().expect("contiguous"));
        f(t.ln_final.bias.as_slice().expect("contiguous"));
        blocks(&t.transformer, f);
        let v = &self.vision;
        for m in [&v.patch_weight, &v.positional_embedding, &v.projection] {
            f(m.as_slice().expect("contiguous"));
        }
        for a in [
            &v.class_embedding,
            &v.ln_pre.weight,
            &v.ln_pre.bias,
            &v.ln_post.weight,
            &v.ln_post.bias,
        ] {
            f(a.as_slice().expect("contiguous"));
        }
        blocks(&v.transformer, f);
    }
}

impl Backbone for ClipBackbone {
    fn meta(&self) -> &BackboneMeta {
        &self.meta
    }

    fn vocab_size(&self) -> usize {
        self.text.token_embedding.nrows()
    }

    fn sot(&self) -> u32 {
        self.tokenizer.sot()
    }

    fn eot(&self) -> u32 {
        self.tokenizer.eot()
    }

    fn encode_words(&self, text: &str) -> Vec<u32> {
        self.tokenizer.encode(text)
    }

    fn encode_image(&self, image: &RgbImage) -> Result<FeatureVector> {
        let patches = preprocess::<f32>(
            image,
            self.vision.resolution,
            self.vision.patch_size,
            self.mean,
            self.std,
        )?;
        let out = self.vision.encode(&patches);
        Ok(FeatureVector {
            values: out.mapv(f64::from),
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
        let vocab = self.vocab_size();
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(Error::Vocabulary {
                id: bad,
                size: vocab,
            });
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let embeddings = self.text.token_embedding.select(Axis(0), &idx).mapv(f64::from);
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
        let out = self.text.encode(&self.embeddings_f32(seq), seq.eot_index);
        Ok(FeatureVector {
            values: out.mapv(f64::from),
            modality: Modality::Textual,
        })
    }

    fn encode_text(&self, text: &str) -> Result<FeatureVector> {
        let seq = self.embed_tokens(&self.tokenize(text).ids)?;
        self.encode_token_embeddings(&seq)
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
        let g = grad_out.mapv(|v| v as f32);
        let out = self
            .text
            .vjp(&self.embeddings_f32(seq), seq.eot_index, g.view());
        Ok(out.mapv(f64::from))
    }

    fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        self.for_each_weight(&mut |data| {
            for v in data {
                hasher.update(v.to_le_bytes());
            }
        });
        hex::encode(hasher.finalize())
    }
}

/// Locates the archive directory for a pretrained backbone, falling back to
/// `$MEMEFUSION_CACHE/<path>` for relative paths that do not exist.
pub fn resolve_archive_dir(path: &Path) -> PathBuf {
    if path.exists() || path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("MEMEFUSION_CACHE") {
        Some(cache) => {
            let candidate = Path::new(&cache).join(path);
            if candidate.exists() {
                candidate
            } else {
                path.to_path_buf()
            }
        }
        None => path.to_path_buf(),
    }
}
