//! Converters from safetensors checkpoints to weight archives.
//!
//! `clip-hf` takes a Hugging Face `CLIPModel` state dict and renames it to
//! the archive layout (`transformer.resblocks.{i}.attn.in_proj_weight`,
//! `visual.conv1.weight`, ...), fusing the separate q/k/v projections and
//! transposing the two output projections. `phi` takes a SEARLE-style
//! inversion network (`layers.{k}.weight` with activations interleaved)
//! and renumbers its linear layers consecutively.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use safetensors::{Dtype, SafeTensors};
use serde_json::{json, Value};

use crate::archive::{NamedTensor, TensorData, WeightArchive, WeightManifest};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvertKind {
    ClipHf,
    Phi,
}

impl std::str::FromStr for ConvertKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clip-hf" => Ok(Self::ClipHf),
            "phi" => Ok(Self::Phi),
            other => Err(Error::arg(format!("unknown weight kind {other:?} (expected clip-hf or phi)"))),
        }
    }
}

struct Source {
    path: PathBuf,
    tensors: NamedTensors,
}

impl Source {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::WeightLoad {
            path: self.path.clone(),
            detail: detail.into(),
        }
    }

    fn take(&mut self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        self.tensors
            .remove(name)
            .ok_or_else(|| self.fail(format!("manifest diff:\n- {name} (missing)")))
    }
}

/// Tensor name → (shape, row-major values).
pub type NamedTensors = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

/// Reads every floating-point tensor of a safetensors file as `f32`.
pub fn read_safetensors(path: &Path) -> Result<NamedTensors> {
    let fail = |detail: String| Error::WeightLoad {
        path: path.to_path_buf(),
        detail,
    };
    let bytes = fs::read(path).map_err(|e| fail(e.to_string()))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| fail(format!("not a valid safetensors file: {e}")))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        let data = view.data();
        let values: Vec<f32> = match view.dtype() {
            Dtype::F32 => data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect(),
            Dtype::F64 => data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32)
                .collect(),
            Dtype::F16 => data
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            Dtype::BF16 => data
                .chunks_exact(2)
                .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            // integer buffers such as position ids carry no weights
            _ => continue,
        };
        out.insert(name, (view.shape().to_vec(), values));
    }
    Ok(out)
}

fn transpose(shape: &[usize], data: &[f32]) -> (Vec<usize>, Vec<f32>) {
    let (r, c) = (shape[0], shape[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    (vec![c, r], out)
}

fn named(name: impl Into<String>, (shape, data): (Vec<usize>, Vec<f32>)) -> NamedTensor {
    NamedTensor {
        name: name.into(),
        shape,
        data: TensorData::F32(data),
    }
}

fn hf_config(input: &Path) -> Option<Value> {
    let cfg = input.parent()?.join("config.json");
    serde_json::from_str(&fs::read_to_string(cfg).ok()?).ok()
}

fn convert_layers(src: &mut Source, hf_prefix: &str, out_prefix: &str, out: &mut Vec<NamedTensor>) -> Result<usize> {
    let mut i = 0;
    while src.tensors.contains_key(&format!("{hf_prefix}.{i}.layer_norm1.weight")) {
        let h = format!("{hf_prefix}.{i}");
        let o = format!("{out_prefix}.resblocks.{i}");
        let mut qkv_w = Vec::new();
        let mut qkv_b = Vec::new();
        let mut width = 0;
        for part in ["q_proj", "k_proj", "v_proj"] {
            let (shape, w) = src.take(&format!("{h}.self_attn.{part}.weight"))?;
            width = shape[1];
            qkv_w.extend(w);
            qkv_b.extend(src.take(&format!("{h}.self_attn.{part}.bias"))?.1);
        }
        out.push(named(format!("{o}.attn.in_proj_weight"), (vec![3 * width, width], qkv_w)));
        out.push(named(format!("{o}.attn.in_proj_bias"), (vec![3 * width], qkv_b)));
        for (hf, ours) in [
            ("self_attn.out_proj", "attn.out_proj"),
            ("layer_norm1", "ln_1"),
            ("layer_norm2", "ln_2"),
            ("mlp.fc1", "mlp.c_fc"),
            ("mlp.fc2", "mlp.c_proj"),
        ] {
            for p in ["weight", "bias"] {
                out.push(named(format!("{o}.{ours}.{p}"), src.take(&format!("{h}.{hf}.{p}"))?));
            }
        }
        i += 1;
    }
    if i == 0 {
        return Err(src.fail(format!("manifest diff:\n- {hf_prefix}.0.* (missing)")));
    }
    Ok(i)
}

/// Converts a Hugging Face CLIP state dict. A `merges.txt` (or the
/// open_clip `bpe_simple_vocab_16e6.txt.gz`) next to the input, or given
/// explicitly, is copied alongside the archive.
pub fn convert_clip_hf(input: &Path, out_dir: &Path, merges: Option<&Path>) -> Result<WeightManifest> {
    let mut src = Source {
        path: input.to_path_buf(),
        tensors: read_safetensors(input)?,
    };
    let mut out = Vec::new();
    let tok = src.take("text_model.embeddings.token_embedding.weight")?;
    let text_width = tok.0[1];
    out.push(named("token_embedding.weight", tok));
    out.push(named("positional_embedding", src.take("text_model.embeddings.position_embedding.weight")?));
    convert_layers(&mut src, "text_model.encoder.layers", "transformer", &mut out)?;
    for p in ["weight", "bias"] {
        out.push(named(format!("ln_final.{p}"), src.take(&format!("text_model.final_layer_norm.{p}"))?));
    }
    let (shape, data) = src.take("text_projection.weight")?;
    out.push(named("text_projection", transpose(&shape, &data)));

    let (cls_shape, cls) = src.take("vision_model.embeddings.class_embedding")?;
    let vision_width = cls_shape[0];
    out.push(named("visual.class_embedding", (cls_shape, cls)));
    out.push(named("visual.conv1.weight", src.take("vision_model.embeddings.patch_embedding.weight")?));
    out.push(named("visual.positional_embedding", src.take("vision_model.embeddings.position_embedding.weight")?));
    for p in ["weight", "bias"] {
        // the upstream name really is spelled "pre_layrnorm"
        out.push(named(format!("visual.ln_pre.{p}"), src.take(&format!("vision_model.pre_layrnorm.{p}"))?));
    }
    convert_layers(&mut src, "vision_model.encoder.layers", "visual.transformer", &mut out)?;
    for p in ["weight", "bias"] {
        out.push(named(format!("visual.ln_post.{p}"), src.take(&format!("vision_model.post_layernorm.{p}"))?));
    }
    let (shape, data) = src.take("visual_projection.weight")?;
    out.push(named("visual.proj", transpose(&shape, &data)));
    src.tensors.remove("logit_scale");
    if let Some(extra) = src.tensors.keys().next() {
        return Err(src.fail(format!("manifest diff:\n+ {extra} (unexpected)")));
    }

    let cfg = hf_config(input);
    let get = |section: &str, key: &str| cfg.as_ref().and_then(|c| c.get(section)).and_then(|s| s.get(key)).cloned();
    let text_heads = get("text_config", "num_attention_heads").and_then(|v| v.as_u64()).unwrap_or((text_width / 64).max(1) as u64);
    let vision_heads = get("vision_config", "num_attention_heads")
        .and_then(|v| v.as_u64())
        .unwrap_or((vision_width / 64).max(1) as u64);
    let activation = get("text_config", "hidden_act").and_then(|v| v.as_str().map(str::to_string)).unwrap_or_else(|| "quick_gelu".into());
    let name = input
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "clip".into());
    let meta = json!({
        "name": name,
        "text_heads": text_heads,
        "vision_heads": vision_heads,
        "activation": activation,
    });
    let manifest = WeightArchive::write(out_dir, "clip", meta, &out)?;

    let candidates: Vec<PathBuf> = match merges {
        Some(m) => vec![m.to_path_buf()],
        None => ["bpe_simple_vocab_16e6.txt.gz", "merges.txt"]
            .iter()
            .filter_map(|f| input.parent().map(|p| p.join(f)))
            .collect(),
    };
    if let Some(m) = candidates.iter().find(|p| p.is_file()) {
        let file_name = m.file_name().expect("file has a name");
        fs::copy(m, out_dir.join(file_name))?;
    } else if merges.is_some() {
        return Err(Error::arg(format!("merges file {} not found", candidates[0].display())));
    }
    Ok(manifest)
}

/// Converts an inversion network whose linear layers are named
/// `[prefix.]layers.{k}.weight` / `.bias` (gaps from activation and
/// dropout modules are allowed).
pub fn convert_phi(input: &Path, out_dir: &Path) -> Result<WeightManifest> {
    let mut src = Source {
        path: input.to_path_buf(),
        tensors: read_safetensors(input)?,
    };
    let mut indices: Vec<(usize, String)> = src
        .tensors
        .keys()
        .filter_map(|k| {
            let stem = k.strip_suffix(".weight")?;
            let (prefix, idx) = stem.rsplit_once('.')?;
            prefix.ends_with("layers").then(|| idx.parse().ok().map(|i| (i, stem.to_string())))?
        })
        .collect();
    indices.sort();
    if indices.is_empty() {
        return Err(src.fail("manifest diff:\n- layers.0.weight (missing)"));
    }
    let mut out = Vec::new();
    for (k, (_, stem)) in indices.iter().enumerate() {
        out.push(named(format!("layers.{k}.weight"), src.take(&format!("{stem}.weight"))?));
        out.push(named(format!("layers.{k}.bias"), src.take(&format!("{stem}.bias"))?));
    }
    if let Some(extra) = src.tensors.keys().next() {
        return Err(src.fail(format!("manifest diff:\n+ {extra} (unexpected)")));
    }
    WeightArchive::write(out_dir, "phi", json!({"activation": "gelu"}), &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inversion::PhiNetwork;
    use safetensors::tensor::TensorView;

    fn write_st(path: &Path, tensors: &[(&str, Vec<usize>, Vec<f32>)]) {
        let bytes: Vec<Vec<u8>> = tensors.iter().map(|(_, _, d)| d.iter().flat_map(|v| v.to_le_bytes()).collect()).collect();
        let views: Vec<(String, TensorView<'_>)> = tensors
            .iter()
            .zip(&bytes)
            .map(|((n, s, _), b)| (n.to_string(), TensorView::new(Dtype::F32, s.clone(), b).unwrap()))
            .collect();
        safetensors::serialize_to_file(views, None, path).unwrap();
    }

    #[test]
    fn phi_layers_are_renumbered() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("phi.safetensors");
        write_st(
            &src,
            &[
                ("layers.0.weight", vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]),
                ("layers.0.bias", vec![3], vec![0.0; 3]),
                ("layers.3.weight", vec![2, 3], vec![1.0; 6]),
                ("layers.3.bias", vec![2], vec![0.5, -0.5]),
            ],
        );
        let out = dir.path().join("phi");
        convert_phi(&src, &out).unwrap();
        let phi = PhiNetwork::load(&out).unwrap();
        assert_eq!(phi.layers.len(), 2);
        assert_eq!(phi.input_dim(), 2);
        assert_eq!(phi.output_dim(), 2);
    }

    #[test]
    fn truncated_source_is_a_weight_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("phi.safetensors");
        write_st(&src, &[("layers.0.weight", vec![2, 2], vec![1.0; 4]), ("layers.0.bias", vec![2], vec![0.0; 2])]);
        let bytes = fs::read(&src).unwrap();
        fs::write(&src, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(convert_phi(&src, &dir.path().join("o")), Err(Error::WeightLoad { .. })));
    }

    #[test]
    fn transpose_swaps_axes() {
        let (s, d) = transpose(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(s, vec![3, 2]);
        assert_eq!(d, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
