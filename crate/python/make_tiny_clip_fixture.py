"""Builds the tiny CLIP fixture used by the Rust parity tests.

Writes a randomly initialised Hugging Face CLIPModel (1000-token vocabulary,
28x28 images), a matching truncated BPE merges file, a few test images and
reference token ids / features into the output directory.

Usage: python make_tiny_clip_fixture.py <full bpe .gz> <out dir>
"""

import gzip
import json
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from transformers import CLIPConfig, CLIPModel

N_MERGES = 486
MEAN = np.array([0.48145466, 0.4578275, 0.40821073])
STD = np.array([0.26862954, 0.26130258, 0.27577711])
TEXTS = [
    "a photo of",
    "ishtar is looking for love",
    "Don't you LOVE it?! 123 émoji 🙂",
    "",
    "the quick brown fox jumps over the lazy dog",
]


def _features(out):
    # newer transformers return a pooled output object instead of a tensor
    if hasattr(out, "pooler_output"):
        out = out.pooler_output
    return out[0].tolist()


def main(bpe_path: str, out: str) -> None:
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = gzip.open(bpe_path).read().decode("utf-8").split("\n")
    merges_path = out_dir / "bpe_simple_vocab_16e6.txt.gz"
    with gzip.GzipFile(merges_path, "wb", mtime=0) as f:
        f.write("\n".join(lines[: N_MERGES + 1]).encode("utf-8"))

    sys.path.insert(0, str(Path(bpe_path).parent.parent))
    from open_clip.tokenizer import SimpleTokenizer

    tok = SimpleTokenizer(str(merges_path))
    vocab = len(tok.encoder)
    sot, eot = tok.encoder["<start_of_text>"], tok.encoder["<end_of_text>"]

    torch.manual_seed(0)
    config = CLIPConfig(
        text_config=dict(
            vocab_size=vocab,
            hidden_size=32,
            intermediate_size=64,
            num_hidden_layers=2,
            num_attention_heads=2,
            max_position_embeddings=77,
            hidden_act="quick_gelu",
            bos_token_id=sot,
            eos_token_id=eot,
        ),
        vision_config=dict(
            hidden_size=48,
            intermediate_size=96,
            num_hidden_layers=2,
            num_attention_heads=3,
            image_size=28,
            patch_size=14,
            hidden_act="quick_gelu",
        ),
        projection_dim=16,
    )
    model = CLIPModel(config).eval()
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn_like(p) * 0.02)
    model.save_pretrained(out_dir, safe_serialization=True)

    texts = []
    with torch.no_grad():
        for text in TEXTS:
            ids = [sot] + tok.encode(text) + [eot]
            feats = model.get_text_features(input_ids=torch.tensor([ids]))
            texts.append({"text": text, "ids": ids, "features": _features(feats)})

    rng = np.random.default_rng(0)
    images = []
    for k in range(3):
        pixels = rng.integers(0, 256, size=(28, 28, 3), dtype=np.uint8)
        name = f"image{k}.png"
        Image.fromarray(pixels).save(out_dir / name)
        x = (pixels.astype(np.float64) / 255.0 - MEAN) / STD
        x = torch.tensor(x.transpose(2, 0, 1)[None], dtype=torch.float32)
        with torch.no_grad():
            feats = model.get_image_features(pixel_values=x)
        images.append({"file": name, "features": _features(feats)})

    ref = {"vocab_size": vocab, "sot": sot, "eot": eot, "texts": texts, "images": images}
    (out_dir / "reference.json").write_text(json.dumps(ref, indent=1, ensure_ascii=False))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
