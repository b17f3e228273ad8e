"""Small trainable visual and text encoders.

The visual encoder is a standard ViT: patch embed, prepended CLS token,
learned positional embeddings, pre-norm transformer blocks. It exposes the
CLS embedding as the global feature and the patch tokens reshaped to a
(rows, cols) grid whose column index follows the AP axis of the input image.

The text encoder shares the block implementation and runs over a closed
whitespace/lowercase vocabulary built from the report template table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import TextConfig, VisionConfig
from .reports import template_vocabulary

PAD, CLS, UNK = "<pad>", "<cls>", "<unk>"


@dataclass
class PatchTokens:
    cls: torch.Tensor   # (d,)
    grid: torch.Tensor  # (Gr, Gc, d), column = AP position


class Tokenizer:
    """Closed-vocabulary whitespace tokenizer; unknown words map to UNK."""

    def __init__(self, words=None):
        words = template_vocabulary() if words is None else list(words)
        self.vocab = [PAD, CLS, UNK] + sorted(set(words))
        self.index = {w: i for i, w in enumerate(self.vocab)}

    def __len__(self):
        return len(self.vocab)

    def encode(self, text: str, max_len: int):
        words = text.lower().split()
        ids = [self.index[CLS]] + [self.index.get(w, self.index[UNK]) for w in words]
        ids = ids[:max_len]
        mask = [1] * len(ids) + [0] * (max_len - len(ids))
        ids = ids + [self.index[PAD]] * (max_len - len(ids))
        return ids, mask

    def encode_batch(self, texts, max_len: int, device=None, dtype=torch.long):
        ids, masks = zip(*(self.encode(t, max_len) for t in texts))
        return (torch.tensor(ids, dtype=dtype, device=device),
                torch.tensor(masks, dtype=torch.bool, device=device))

    def count_unknown(self, text: str) -> int:
        return sum(1 for w in text.lower().split() if w not in self.index)


class Block(nn.Module):
    """Pre-norm transformer block: x + attn(LN(x)), x + mlp(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)

    def forward(self, x, key_mask=None):
        b, n, d = x.shape
        y = self.norm1(x)
        q, k, v = self.qkv(y).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        attn_mask = None
        if key_mask is not None:
            attn_mask = key_mask[:, None, None, :]  # True = attend
        a = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        x = x + self.proj(a.transpose(1, 2).reshape(b, n, d))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


def _init_params(module):
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Conv2d):
        nn.init.trunc_normal_(module.weight, std=0.02)
        nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.trunc_normal_(module.weight, std=0.02)


class VisionTransformer(nn.Module):
    def __init__(self, cfg: VisionConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        gr, gc = cfg.grid_shape
        self.grid_shape = (gr, gc)
        self.patch_embed = nn.Conv2d(1, cfg.dim, cfg.patch_size, cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, gr * gc + 1, cfg.dim))
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads, cfg.mlp_ratio)
                                    for _ in range(cfg.depth))
        self.apply(_init_params)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, images: torch.Tensor):
        """images (B, H, W) -> (cls (B, d), grid (B, Gr, Gc, d))."""
        if images.dim() != 3 or images.shape[1:] != tuple(self.cfg.image_size):
            raise ValueError(f"expected (B, {self.cfg.image_size[0]}, {self.cfg.image_size[1]}) "
                             f"images, got {tuple(images.shape)}")
        b = images.shape[0]
        tokens = self.patch_embed(images[:, None]).flatten(2).transpose(1, 2)
        tokens = torch.cat([self.cls_token.expand(b, -1, -1), tokens], dim=1)
        tokens = tokens + self.pos_embed
        for block in self.blocks:
            tokens = block(tokens)
        gr, gc = self.grid_shape
        return tokens[:, 0], tokens[:, 1:].reshape(b, gr, gc, -1)


def encode_image(image: np.ndarray, model: VisionTransformer) -> PatchTokens:
    """Single-image convenience wrapper; deterministic in inference mode."""
    dtype = model.pos_embed.dtype
    with torch.no_grad():
        cls, grid = model(torch.as_tensor(image, dtype=dtype)[None])
    return PatchTokens(cls=cls[0], grid=grid[0])


class TextTransformer(nn.Module):
    def __init__(self, cfg: TextConfig, tokenizer: Tokenizer = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.tokenizer = tokenizer if tokenizer is not None else Tokenizer()
        self.tok_embed = nn.Embedding(len(self.tokenizer), cfg.dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.max_len, cfg.dim))
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads, cfg.mlp_ratio)
                                    for _ in range(cfg.depth))
        self.apply(_init_params)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, token_ids: torch.Tensor, key_mask: torch.Tensor):
        """token_ids (B, L) with a leading CLS -> embeddings (B, d)."""
        x = self.tok_embed(token_ids) + self.pos_embed[:, : token_ids.shape[1]]
        for block in self.blocks:
            x = block(x, key_mask=key_mask)
        return x[:, 0]

    def encode_texts(self, texts) -> torch.Tensor:
        for t in texts:
            if not t.strip():
                raise ValueError("cannot encode empty text")
        device = self.pos_embed.device
        ids, mask = self.tokenizer.encode_batch(texts, self.cfg.max_len, device=device)
        return self(ids, mask)


def encode_text(text: str, model: TextTransformer) -> torch.Tensor:
    with torch.no_grad():
        return model.encode_texts([text])[0]
