"""Convert public checkpoints into memefusion weight archives.

CLIP (Hugging Face CLIPModel, e.g. openai/clip-vit-large-patch14):

    python3 python/convert_weights.py clip openai/clip-vit-large-patch14 \
        ~/.cache/memefusion/clip-vit-large-patch14 --merges bpe_simple_vocab_16e6.txt.gz

Inversion network (a torch state dict, e.g. the ViT-L/14 SEARLE release):

    python3 python/convert_weights.py phi phi_vitl14.pt ~/.cache/memefusion/searle-phi-vitl14

Both write `manifest.json` + `tensors.bin`. Runs pass the archive directory as
`backbone.archive` / `phi.archive`, or just its name when it sits under
$MEMEFUSION_CACHE. Needs torch, safetensors and the memefusion bindings; the
clip mode also needs transformers.
"""

import argparse
import shutil
import tempfile
from pathlib import Path

import memefusion


def export_clip(source: str, work: Path) -> Path:
    from transformers import CLIPModel

    model = CLIPModel.from_pretrained(source)
    model.save_pretrained(work, safe_serialization=True)
    # the converter bundles merges found next to the weights
    local = Path(source)
    if (local / "bpe_simple_vocab_16e6.txt.gz").is_file():
        shutil.copy(local / "bpe_simple_vocab_16e6.txt.gz", work)
    else:
        try:
            from transformers import CLIPTokenizer

            CLIPTokenizer.from_pretrained(source).save_pretrained(work)
        except OSError:
            pass
    return work / "model.safetensors"


def export_phi(source: str, work: Path) -> Path:
    import torch
    from safetensors.torch import save_file

    state = torch.load(source, map_location="cpu", weights_only=True)
    # releases nest the state dict under a single key
    while isinstance(state, dict) and len(state) == 1 and isinstance(next(iter(state.values())), dict):
        state = next(iter(state.values()))
    tensors = {
        k.removeprefix("module."): v.float().contiguous()
        for k, v in state.items()
        if torch.is_tensor(v) and k.endswith((".weight", ".bias"))
    }
    if not tensors:
        raise SystemExit(f"no linear weights found in {source}")
    out = work / "phi.safetensors"
    save_file(tensors, str(out))
    return out


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("kind", choices=["clip", "phi"])
    parser.add_argument("source", help="Hugging Face model id / directory, or a .pt state dict")
    parser.add_argument("out", type=Path)
    parser.add_argument("--merges", type=Path, help="BPE merges to bundle with a clip archive")
    args = parser.parse_args()

    with tempfile.TemporaryDirectory() as tmp:
        work = Path(tmp)
        if args.kind == "clip":
            weights = export_clip(args.source, work)
            digest = memefusion.convert_weights("clip-hf", weights, args.out, args.merges)
        else:
            weights = export_phi(args.source, work)
            digest = memefusion.convert_weights("phi", weights, args.out)
    print(f"out={args.out}")
    print(f"blob_sha256={digest}")


if __name__ == "__main__":
    main()
