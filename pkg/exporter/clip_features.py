"""Backbones for feature/attention export.

Two implementations share one interface: `forward(pixel_batch)` returns
per-layer patch features and head-averaged post-softmax attention maps
(with the global token at row/column 0).

- `ClipVisionBackbone` wraps a pretrained CLIP vision tower from
  `transformers` (weights must be available locally or via the hub).
- `ToyVisionBackbone` is a small randomly initialized ViT used by the test
  suite: same tensor contracts, no downloaded weights.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


class ToyVisionBackbone(nn.Module):
    """Minimal ViT with per-head softmax attention, deterministic per seed."""

    def __init__(self, depth=4, width=32, heads=4, patch=14, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.patch = patch
        self.width = width
        self.depth = depth
        self.embed = nn.Conv2d(3, width, kernel_size=patch, stride=patch)
        self.cls = nn.Parameter(torch.randn(1, 1, width) * 0.02)
        self.blocks = nn.ModuleList()
        self.norms = nn.ModuleList()
        self.mlps = nn.ModuleList()
        for _ in range(depth):
            self.blocks.append(nn.MultiheadAttention(width, heads, batch_first=True))
            self.norms.append(nn.LayerNorm(width))
            self.mlps.append(
                nn.Sequential(nn.Linear(width, 2 * width), nn.GELU(), nn.Linear(2 * width, width))
            )
        self.eval()

    @property
    def n_layers(self):
        return self.depth

    @torch.no_grad()
    def forward(self, pixels: torch.Tensor):
        tokens = self.embed(pixels)  # (B, width, h_p, w_p)
        b, _, h_p, w_p = tokens.shape
        tokens = tokens.flatten(2).transpose(1, 2)
        tokens = torch.cat([self.cls.expand(b, -1, -1), tokens], dim=1)
        pos = self._position_embedding(tokens.shape[1], pixels.device)
        tokens = tokens + pos
        hidden_states = []
        attentions = []
        for attn, norm, mlp in zip(self.blocks, self.norms, self.mlps):
            normed = norm(tokens)
            # average_attn_weights gives head-averaged post-softmax maps
            out, weights = attn(normed, normed, normed, average_attn_weights=True)
            tokens = tokens + out + mlp(tokens)
            hidden_states.append(tokens.clone())
            attentions.append(weights.clone())
        return {"hidden": hidden_states, "attention": attentions, "grid": (h_p, w_p)}

    def _position_embedding(self, n_tokens, device):
        # fixed sinusoidal table so any input size works deterministically
        position = torch.arange(n_tokens, device=device).unsqueeze(1).float()
        div = torch.exp(
            torch.arange(0, self.width, 2, device=device).float()
            * (-math.log(10000.0) / self.width)
        )
        table = torch.zeros(n_tokens, self.width, device=device)
        table[:, 0::2] = torch.sin(position * div)
        table[:, 1::2] = torch.cos(position * div)
        return 0.02 * table.unsqueeze(0)


class ClipVisionBackbone(nn.Module):
    """Frozen CLIP vision tower exposing intermediate layers.

    `model_id` may be a hub id (e.g. "openai/clip-vit-large-patch14-336")
    or a local directory with the weights.
    """

    def __init__(self, model_id: str, device: str = "cpu"):
        super().__init__()
        from transformers import CLIPVisionModel

        self.model = CLIPVisionModel.from_pretrained(model_id).to(device).eval()
        self.patch = self.model.config.patch_size
        self.depth = self.model.config.num_hidden_layers

    @property
    def n_layers(self):
        return self.depth

    @torch.no_grad()
    def forward(self, pixels: torch.Tensor):
        outputs = self.model(
            pixel_values=pixels,
            output_hidden_states=True,
            output_attentions=True,
            interpolate_pos_encoding=True,
        )
        side = pixels.shape[-1] // self.patch
        # hidden_states[0] is the embedding layer; block k is index k
        hidden = [outputs.hidden_states[k] for k in range(1, self.depth + 1)]
        attention = [a.mean(dim=1) for a in outputs.attentions]  # head average
        return {"hidden": hidden, "attention": attention, "grid": (side, side)}


def preprocess_image(img, size: int) -> torch.Tensor:
    """Resize to size x size and normalize with the CLIP statistics."""
    img = img.convert("RGB").resize((size, size))
    arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(CLIP_MEAN, dtype=np.float32)) / np.asarray(CLIP_STD, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1)).unsqueeze(0)


def extract_layers(backbone, pixels: torch.Tensor, layers: list[int]):
    """Per-layer (features, head-averaged attention) as float32 numpy.

    Layer ids are 1-based block indices; attention rows are re-normalized
    exactly so serialized rows sum to 1 at float32.
    """
    out = backbone(pixels)
    depth = backbone.n_layers
    features = {}
    attention = {}
    for layer in layers:
        if not 1 <= layer <= depth:
            raise ValueError(f"layer {layer} outside the {depth}-layer encoder")
        hidden = out["hidden"][layer - 1][0]         # (N+1, d)
        attn = out["attention"][layer - 1][0]        # (N+1, N+1)
        features[layer] = hidden[1:].cpu().numpy().astype(np.float32)
        a = attn.cpu().numpy().astype(np.float64)
        a /= a.sum(axis=1, keepdims=True)
        attention[layer] = a.astype(np.float32)
    return features, attention, out["grid"]
