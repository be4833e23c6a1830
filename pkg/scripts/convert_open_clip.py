"""Convert an open_clip ViT checkpoint into a zsal weight archive.

    python scripts/convert_open_clip.py --checkpoint vit_b_16_plus_240.pt --out vitb16plus.zsal

``--checkpoint`` may be a torch state dict (needs ``torch``; not a package
dependency) or an ``.npz`` holding the same names. The architecture is read
off the tensor shapes; pass ``--heads`` values if they differ from width/64.
"""

from __future__ import annotations

import argparse
import re
import sys

import numpy as np

from zsal.weights_io import ModelConfig, WeightStore, save_archive

BLOCK_RENAMES = {
    "ln_1.weight": "ln_1.weight",
    "ln_1.bias": "ln_1.bias",
    "attn.in_proj_weight": "attn.qkv_weight",
    "attn.in_proj_bias": "attn.qkv_bias",
    "attn.out_proj.weight": "attn.out_weight",
    "attn.out_proj.bias": "attn.out_bias",
    "ln_2.weight": "ln_2.weight",
    "ln_2.bias": "ln_2.bias",
    "mlp.c_fc.weight": "mlp.fc_weight",
    "mlp.c_fc.bias": "mlp.fc_bias",
    "mlp.c_proj.weight": "mlp.proj_weight",
    "mlp.c_proj.bias": "mlp.proj_bias",
}
DIRECT = {
    "visual.conv1.weight": "visual.conv1.weight",
    "visual.class_embedding": "visual.class_embedding",
    "visual.positional_embedding": "visual.positional_embedding",
    "visual.ln_pre.weight": "visual.ln_pre.weight",
    "visual.ln_pre.bias": "visual.ln_pre.bias",
    "visual.ln_post.weight": "visual.ln_post.weight",
    "visual.ln_post.bias": "visual.ln_post.bias",
    "visual.proj": "visual.proj",
    "token_embedding.weight": "text.token_embedding",
    "positional_embedding": "text.positional_embedding",
    "ln_final.weight": "text.ln_final.weight",
    "ln_final.bias": "text.ln_final.bias",
    "text_projection": "text.projection",
}
BLOCK = re.compile(r"^(visual\.)?transformer\.resblocks\.(\d+)\.(.+)$")


def rename(state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out = {}
    for name, arr in state.items():
        if name in DIRECT:
            out[DIRECT[name]] = arr
            continue
        m = BLOCK.match(name)
        if m and m.group(3) in BLOCK_RENAMES:
            tower = "visual" if m.group(1) else "text"
            out[f"{tower}.layer{m.group(2)}.{BLOCK_RENAMES[m.group(3)]}"] = arr
    return {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in out.items()}


def infer_config(entries: dict[str, np.ndarray], vision_heads=None, text_heads=None) -> ModelConfig:
    conv = entries["visual.conv1.weight"]
    width, patch = conv.shape[0], conv.shape[-1]
    grid = int(round((entries["visual.positional_embedding"].shape[0] - 1) ** 0.5))
    text_width = entries["text.token_embedding"].shape[1]
    count = lambda tower: len({k.split(".")[1] for k in entries if k.startswith(f"{tower}.layer")})  # noqa: E731
    return ModelConfig(
        image_size=grid * patch,
        patch_size=patch,
        vision_width=width,
        vision_layers=count("visual"),
        vision_heads=vision_heads or width // 64,
        embed_dim=entries["visual.proj"].shape[1],
        text_width=text_width,
        text_layers=count("text"),
        text_heads=text_heads or text_width // 64,
        context_length=entries["text.positional_embedding"].shape[0],
        vocab_size=entries["text.token_embedding"].shape[0],
        mlp_ratio=entries["visual.layer0.mlp.fc_weight"].shape[0] / width,
    )


def _load(path: str) -> dict[str, np.ndarray]:
    if path.endswith(".npz"):
        with np.load(path) as data:
            return {k: data[k] for k in data.files}
    import torch  # optional, only for .pt checkpoints

    state = torch.load(path, map_location="cpu")
    state = state.get("state_dict", state)
    return {k.removeprefix("module."): v.float().numpy() for k, v in state.items()}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--vision-heads", type=int, default=None)
    ap.add_argument("--text-heads", type=int, default=None)
    args = ap.parse_args(argv)
    entries = rename(_load(args.checkpoint))
    config = infer_config(entries, args.vision_heads, args.text_heads)
    store = WeightStore(entries, {"config": config.to_json(), "kind": "model", "source": args.checkpoint})
    store.validate_for(config)
    save_archive(store, args.out)
    print(f"wrote {args.out}: {len(entries)} tensors, {config.image_size}px, width {config.vision_width}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
