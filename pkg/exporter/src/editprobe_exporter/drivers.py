"""Backbone drivers: each knows how to run one model family over a
(source image, edited image, instruction) triplet and hand back the pooled
hidden-state pair for every transformer layer.

A driver reports its layer count and hidden size (written into the dump
header) and resolves, per model family, which token position closes each
image's visual block. The bundled "tiny" driver is a seeded random-weight
torch model with the same interface, small enough for tests and demos; the
"hf-causal" driver loads a real pretrained checkpoint through transformers.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from editprobe_exporter.preprocess import prepare

DEFAULT_PROMPT = "source image, edited image; instruction: {instruction}"


class TinyVlm(nn.Module):
    """Self-contained stand-in for a vision-language backbone.

    Patch-conv image encoder, byte-level text embedding, and a stack of
    bidirectional transformer layers whose per-layer outputs are recorded.
    Weights are random but fully seeded, so exports are reproducible.
    """

    def __init__(self, layers=3, hidden=32, image_size=64, patch=16, max_text=32, seed=1234):
        super().__init__()
        torch.manual_seed(seed)
        self.layers = layers
        self.hidden = hidden
        self.image_size = image_size
        self.max_text = max_text
        self.patch_embed = nn.Conv2d(3, hidden, kernel_size=patch, stride=patch)
        self.txt_embed = nn.Embedding(256, hidden)
        n_patches = (image_size // patch) ** 2
        self.vis_pos = nn.Parameter(torch.randn(n_patches, hidden) * 0.02)
        self.txt_pos = nn.Parameter(torch.randn(max_text, hidden) * 0.02)
        self.segment = nn.Parameter(torch.randn(3, hidden) * 0.02)
        self.blocks = nn.ModuleList(
            nn.TransformerEncoderLayer(
                hidden, nhead=4, dim_feedforward=2 * hidden, batch_first=True, norm_first=True
            )
            for _ in range(layers)
        )
        self.n_patches = n_patches

    def encode_image(self, pixels: torch.Tensor) -> torch.Tensor:
        tokens = self.patch_embed(pixels[None]).flatten(2).transpose(1, 2)[0]
        return tokens + self.vis_pos

    def forward(self, source: torch.Tensor, edited: torch.Tensor, text_ids: torch.Tensor):
        """Returns (hidden_states per layer, source final index, edited final index)."""
        v_s = self.encode_image(source) + self.segment[0]
        v_e = self.encode_image(edited) + self.segment[1]
        t = self.txt_embed(text_ids) + self.txt_pos[: text_ids.shape[0]] + self.segment[2]
        x = torch.cat([v_s, v_e, t])[None]
        states = []
        for block in self.blocks:
            x = block(x)
            states.append(x[0])
        src_idx = self.n_patches - 1
        edit_idx = 2 * self.n_patches - 1
        return states, src_idx, edit_idx


class TinyVlmDriver:
    """Test/demo driver over the bundled random-weight backbone."""

    name = "tiny"

    def __init__(self, model_name: str = "tiny-vlm", seed: int = 1234, prompt: str = DEFAULT_PROMPT):
        self.model_name = model_name
        self.prompt = prompt
        self.model = TinyVlm(seed=seed).eval()
        torch.set_num_threads(1)

    @property
    def layer_count(self) -> int:
        return self.model.layers

    @property
    def hidden_size(self) -> int:
        return self.model.hidden

    @property
    def image_size(self) -> int:
        return self.model.image_size

    def hidden_pairs(self, source_img, edited_img, instruction: str) -> np.ndarray:
        """(L, 2, d) pooled pair: final source-visual and edited-visual token
        activations of every layer."""
        text = self.prompt.format(instruction=instruction)
        ids = torch.tensor(list(text.encode("utf-8"))[: self.model.max_text], dtype=torch.long)
        src = torch.from_numpy(prepare(source_img, self.image_size))
        edt = torch.from_numpy(prepare(edited_img, self.image_size))
        with torch.no_grad():
            states, src_idx, edit_idx = self.model(src, edt, ids)
        pairs = [
            torch.stack([layer[src_idx], layer[edit_idx]]).numpy() for layer in states
        ]
        return np.stack(pairs).astype(np.float32)


class HfImageTextDriver:
    """Driver for pretrained image-text-to-text checkpoints via transformers.

    The two images are placed before the instruction with the model's chat
    template. Index-resolution rule: token positions whose input id equals the
    processor's image-token id form two contiguous spans (source first); the
    last position of each span is that image's final visual token. Requires
    local model weights; transformers is imported lazily.
    """

    name = "hf-causal"

    def __init__(self, model_name: str, prompt: str = DEFAULT_PROMPT, device: str = "cpu"):
        try:
            from transformers import AutoModelForImageTextToText, AutoProcessor
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise RuntimeError(
                "the hf-causal driver needs the 'transformers' extra: pip install editprobe-exporter[hf]"
            ) from exc
        self.model_name = model_name
        self.prompt = prompt
        self.device = device
        self.processor = AutoProcessor.from_pretrained(model_name)
        self.model = (
            AutoModelForImageTextToText.from_pretrained(
                model_name, torch_dtype=torch.float32, output_hidden_states=True
            )
            .to(device)
            .eval()
        )
        config = self.model.config
        text_config = getattr(config, "text_config", config)
        self._layer_count = int(text_config.num_hidden_layers)
        self._hidden_size = int(text_config.hidden_size)

    @property
    def layer_count(self) -> int:
        return self._layer_count

    @property
    def hidden_size(self) -> int:
        return self._hidden_size

    @property
    def image_size(self) -> int:
        return 448

    def _image_token_id(self) -> int:
        for attr in ("image_token_id", "image_token_index"):
            value = getattr(self.model.config, attr, None)
            if value is not None:
                return int(value)
        token = getattr(self.processor, "image_token", None)
        if token is not None:
            return int(self.processor.tokenizer.convert_tokens_to_ids(token))
        raise RuntimeError(f"cannot resolve the image token id for {self.model_name}")

    def hidden_pairs(self, source_img, edited_img, instruction: str) -> np.ndarray:
        text = self.prompt.format(instruction=instruction)
        messages = [
            {
                "role": "user",
                "content": [
                    {"type": "image"},
                    {"type": "image"},
                    {"type": "text", "text": text},
                ],
            }
        ]
        chat = self.processor.apply_chat_template(messages, add_generation_prompt=False)
        inputs = self.processor(
            text=chat, images=[source_img, edited_img], return_tensors="pt"
        ).to(self.device)
        with torch.no_grad():
            out = self.model(**inputs, output_hidden_states=True)
        hidden = out.hidden_states[1:]  # drop the embedding layer
        ids = inputs["input_ids"][0]
        positions = (ids == self._image_token_id()).nonzero(as_tuple=True)[0]
        if positions.numel() < 2:
            raise RuntimeError("prompt does not contain two image token spans")
        gaps = (positions[1:] - positions[:-1] > 1).nonzero(as_tuple=True)[0]
        if gaps.numel() == 0:
            # single contiguous block: split in half (equal-size image encodings)
            half = positions.numel() // 2
            src_idx, edit_idx = int(positions[half - 1]), int(positions[-1])
        else:
            src_idx = int(positions[gaps[0]])
            edit_idx = int(positions[-1])
        pairs = [
            torch.stack([layer[0, src_idx], layer[0, edit_idx]]).float().cpu().numpy()
            for layer in hidden
        ]
        return np.stack(pairs).astype(np.float32)


DRIVERS = {"tiny": TinyVlmDriver, "hf-causal": HfImageTextDriver}


def get_driver(kind: str, model_name: str, **options):
    if kind not in DRIVERS:
        raise ValueError(f"unknown driver {kind!r}; available: {sorted(DRIVERS)}")
    if kind == "tiny":
        return TinyVlmDriver(model_name=model_name or "tiny-vlm", **options)
    return DRIVERS[kind](model_name=model_name, **options)
