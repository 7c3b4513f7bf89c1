#!/usr/bin/env python3
"""Export CLIP visual features and attention maps as bundle files.

Walks an image directory (optionally with MVTec-style mask files), runs the
frozen vision tower, and writes one bundle per image with per-layer patch
features and head-averaged post-softmax attention. Can also export a table
of fixed prompt embeddings for the precomputed inference mode.

    python export.py --images <dir> --masks <dir> --out <dir> \
        --layers 6,12,18,24 --size 518 --model openai/clip-vit-large-patch14-336

    python export.py --text-out table.eatx \
        --prompts "a photo of a normal object" "a photo of a damaged object"

`--toy-backbone` swaps in a small randomly initialized ViT with the same
output contracts; it exists so the export path can be exercised without
pretrained weights.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from bundle_writer import write_bundle_file, write_text_table_file
from clip_features import (
    ClipVisionBackbone,
    ToyVisionBackbone,
    extract_layers,
    preprocess_image,
)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
MASK_SUFFIXES = ("_mask.png", "_mask.jpg", ".png")


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--images", type=Path, help="directory of input images")
    parser.add_argument("--masks", type=Path, help="directory of ground-truth masks (optional)")
    parser.add_argument("--out", type=Path, help="output directory for bundles")
    parser.add_argument("--layers", default="6,12,18,24", help="comma-separated 1-based layer ids")
    parser.add_argument("--size", type=int, default=518, help="square input resolution")
    parser.add_argument("--model", default="openai/clip-vit-large-patch14-336", help="CLIP weights (hub id or local path)")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--toy-backbone", action="store_true", help="small random ViT instead of CLIP (testing)")
    parser.add_argument("--toy-seed", type=int, default=0)
    parser.add_argument("--text-out", type=Path, help="write a prompt-embedding table here")
    parser.add_argument("--prompts", nargs="*", default=[], help="prompts for --text-out")
    parser.add_argument("--text-dim", type=int, default=768, help="embedding width in toy text mode")
    return parser.parse_args(argv)


def find_mask(mask_dir: Path, stem: str):
    for suffix in MASK_SUFFIXES:
        candidate = mask_dir / f"{stem}{suffix}"
        if candidate.exists():
            return candidate
    return None


def load_mask(path, image_size):
    mask_img = Image.open(path).convert("L").resize((image_size[1], image_size[0]), Image.NEAREST)
    return (np.asarray(mask_img) > 127).astype(np.uint8)


def build_backbone(args):
    if args.toy_backbone:
        return ToyVisionBackbone(seed=args.toy_seed)
    return ClipVisionBackbone(args.model, device=args.device)


def export_bundles(args) -> int:
    layers = [int(x) for x in str(args.layers).split(",") if x.strip()]
    backbone = build_backbone(args)
    images = sorted(p for p in args.images.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not images:
        print(f"no images found under {args.images}", file=sys.stderr)
        return 2
    args.out.mkdir(parents=True, exist_ok=True)
    written = 0
    for image_path in images:
        pixels = preprocess_image(Image.open(image_path), args.size)
        features, attention, grid = extract_layers(backbone, pixels, layers)
        image_size = (args.size, args.size)
        mask = None
        label = None
        if args.masks is not None:
            mask_path = find_mask(args.masks, image_path.stem)
            if mask_path is not None:
                mask = load_mask(mask_path, image_size)
                label = int(mask.any())
            else:
                mask = np.zeros(image_size, dtype=np.uint8)
                label = 0
        write_bundle_file(
            args.out / f"{image_path.stem}.eadb",
            image_id=image_path.stem,
            grid=grid,
            image_size=image_size,
            layers=layers,
            features=features,
            attention=attention,
            label=label,
            mask=mask,
        )
        written += 1
    print(f"exported {written} bundles to {args.out}")
    return 0


def toy_text_embedding(prompt: str, dim: int) -> np.ndarray:
    digest = hashlib.sha256(prompt.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    vec = rng.normal(size=dim)
    return vec / np.linalg.norm(vec)


def export_text_embeddings(args) -> int:
    if not args.prompts:
        print("--text-out needs at least one --prompts entry", file=sys.stderr)
        return 1
    table = {}
    if args.toy_backbone:
        for prompt in args.prompts:
            table[prompt] = toy_text_embedding(prompt, args.text_dim)
    else:
        import torch
        from transformers import CLIPModel, CLIPProcessor

        model = CLIPModel.from_pretrained(args.model).to(args.device).eval()
        processor = CLIPProcessor.from_pretrained(args.model)
        with torch.no_grad():
            inputs = processor(text=list(dict.fromkeys(args.prompts)), return_tensors="pt", padding=True)
            embeds = model.get_text_features(**{k: v.to(args.device) for k, v in inputs.items()})
            embeds = embeds / embeds.norm(dim=-1, keepdim=True)
        for prompt, vec in zip(dict.fromkeys(args.prompts), embeds.cpu().numpy()):
            table[prompt] = vec.astype(np.float64)
    # duplicate prompts collapse onto one entry by construction of the dict
    for prompt in args.prompts:
        if prompt not in table:
            table[prompt] = toy_text_embedding(prompt, args.text_dim)
    write_text_table_file(args.text_out, table)
    print(f"wrote {len(table)} embeddings to {args.text_out}")
    return 0


def main(argv=None) -> int:
    args = parse_args(argv)
    if args.text_out is not None:
        return export_text_embeddings(args)
    if args.images is None or args.out is None:
        print("either --text-out or both --images and --out are required", file=sys.stderr)
        return 1
    return export_bundles(args)


if __name__ == "__main__":
    sys.exit(main())
