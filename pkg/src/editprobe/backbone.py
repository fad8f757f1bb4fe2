"""Toy multimodal transformer: a shared patch encoder for source and edited
images, a linear projector into the language width, byte-level text tokens,
and a stack of bidirectional pre-norm blocks that exposes every layer's
activations.

Attention is bidirectional on purpose: the model reads representations for
probing rather than generating text, and the final visual tokens should see
the instruction. Hidden states are the post-block residual stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from editprobe import numerics as nm
from editprobe.errors import ConfigError, ContractError, DataError

SEGMENT_SOURCE, SEGMENT_EDITED, SEGMENT_TEXT = 0, 1, 2  # segment ids


@dataclass(frozen=True)
class BackboneConfig:
    image_side: int = 32
    patch: int = 8
    d_v: int = 64
    d: int = 128
    heads: int = 4
    encoder_depth: int = 2
    lm_depth: int = 8
    vocab: int = 256
    max_text_len: int = 128
    seed: int = 42
    init_std: float = 0.02

    def __post_init__(self):
        if self.image_side % self.patch != 0:
            raise ConfigError(f"image side {self.image_side} not divisible by patch {self.patch}")
        if self.d % self.heads != 0 or self.d_v % self.heads != 0:
            raise ConfigError("model widths must be divisible by the head count")
        if self.lm_depth < 2:
            raise ConfigError("need at least 2 transformer layers")

    @property
    def n_patches(self) -> int:
        return (self.image_side // self.patch) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * 3

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class EditSample:
    source: np.ndarray  # (H, W, 3) in [0, 1]
    edited: np.ndarray
    instruction: str

    def validate(self, config: BackboneConfig) -> None:
        s, e = np.asarray(self.source), np.asarray(self.edited)
        if s.shape != e.shape:
            raise DataError(f"source {s.shape} and edited {e.shape} images differ in shape")
        expected = (config.image_side, config.image_side, 3)
        if s.shape != expected:
            raise DataError(f"image shape {s.shape} does not match config {expected}")
        if s.min() < 0 or s.max() > 1 or e.min() < 0 or e.max() > 1:
            raise DataError("pixel values must lie in [0, 1]")
        if not self.instruction:
            raise DataError("an editing instruction is required")


@dataclass
class TokenSequence:
    embeddings: nm.Tensor  # (N_v + N_t, d)
    segments: np.ndarray  # segment id per position
    source_index: int  # final source-visual position
    edit_index: int  # final edited-visual position
    truncated: bool


@dataclass
class HiddenStates:
    layers: list[np.ndarray]  # L arrays of shape (N, d)
    z0: np.ndarray
    segments: np.ndarray
    source_index: int
    edit_index: int
    truncated: bool
    graph_rows: tuple[nm.Tensor, nm.Tensor] | None = None  # (h_s, h_e) rows kept on tape

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def h_s(self, layer: int) -> np.ndarray:
        return self.layers[layer - 1][self.source_index]

    def h_e(self, layer: int) -> np.ndarray:
        return self.layers[layer - 1][self.edit_index]

    def pooled_pairs(self) -> np.ndarray:
        """(L, 2, d) final-position pairs for the dump format."""
        return np.stack([
            np.stack([self.h_s(l + 1), self.h_e(l + 1)]) for l in range(self.n_layers)
        ])


class Backbone:
    """Parameter container plus forward passes over the tape engine.

    dtype float64 exists for finite-difference verification only; production
    runs are float32.
    """

    def __init__(self, config: BackboneConfig, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.store = nm.ParamStore()
        self._init_params()

    # -- parameters ---------------------------------------------------------

    def _init_params(self) -> None:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        std = cfg.init_std
        dt = self.dtype

        def w(name, *shape):
            self.store.add(name, rng.normal(0.0, std, size=shape), trainable=True, dtype=dt)

        def zeros(name, *shape):
            self.store.add(name, np.zeros(shape), trainable=True, dtype=dt)

        def ones(name, *shape):
            self.store.add(name, np.ones(shape), trainable=True, dtype=dt)

        w("enc.patch.w", cfg.patch_dim, cfg.d_v)
        zeros("enc.patch.b", cfg.d_v)
        w("enc.pos", cfg.n_patches, cfg.d_v)
        for i in range(cfg.encoder_depth):
            p = f"enc.b{i}"
            ones(f"{p}.ln1.g", cfg.d_v)
            zeros(f"{p}.ln1.b", cfg.d_v)
            for proj in ("wq", "wk", "wv", "wo"):
                w(f"{p}.attn.{proj}", cfg.d_v, cfg.d_v)
            zeros(f"{p}.attn.bo", cfg.d_v)
            ones(f"{p}.ln2.g", cfg.d_v)
            zeros(f"{p}.ln2.b", cfg.d_v)
            w(f"{p}.mlp.w1", cfg.d_v, 4 * cfg.d_v)
            zeros(f"{p}.mlp.b1", 4 * cfg.d_v)
            w(f"{p}.mlp.w2", 4 * cfg.d_v, cfg.d_v)
            zeros(f"{p}.mlp.b2", cfg.d_v)
        w("proj.w", cfg.d_v, cfg.d)
        zeros("proj.b", cfg.d)
        w("txt.embed", cfg.vocab, cfg.d)
        w("txt.pos", cfg.max_text_len, cfg.d)
        w("seg.embed", 3, cfg.d)
        for i in range(cfg.lm_depth):
            p = f"lm.b{i}"
            ones(f"{p}.ln1.g", cfg.d)
            zeros(f"{p}.ln1.b", cfg.d)
            for proj in ("wq", "wk", "wv", "wo"):
                w(f"{p}.attn.{proj}", cfg.d, cfg.d)
            zeros(f"{p}.attn.bo", cfg.d)
            ones(f"{p}.ln2.g", cfg.d)
            zeros(f"{p}.ln2.b", cfg.d)
            w(f"{p}.mlp.w1", cfg.d, 4 * cfg.d)
            zeros(f"{p}.mlp.b1", 4 * cfg.d)
            w(f"{p}.mlp.w2", 4 * cfg.d, cfg.d)
            zeros(f"{p}.mlp.b2", cfg.d)

    def freeze_all(self) -> None:
        for name in self.store.names():
            self.store.set_trainable(name, False)

    # -- building blocks ----------------------------------------------------

    def _projection(self, x, name, adapters, training, rng):
        out = nm.matmul(x, self.store[name])
        if adapters is not None:
            out = adapters.maybe_add_branch(out, x, name, training, rng)
        return out

    def _attention(self, x, prefix, width, adapters, training, rng):
        cfg = self.config
        heads = cfg.heads
        head_dim = width // heads
        n = x.data.shape[0]
        q = self._projection(x, f"{prefix}.wq", adapters, training, rng)
        k = self._projection(x, f"{prefix}.wk", adapters, training, rng)
        v = self._projection(x, f"{prefix}.wv", adapters, training, rng)

        def split(t):
            return nm.transpose(nm.reshape(t, (n, heads, head_dim)), (1, 0, 2))

        qh, kh, vh = split(q), split(k), split(v)
        scores = nm.mul(nm.matmul(qh, nm.transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(head_dim))
        attn = nm.softmax(scores, axis=-1)
        ctx = nm.matmul(attn, vh)  # (heads, n, head_dim)
        merged = nm.reshape(nm.transpose(ctx, (1, 0, 2)), (n, width))
        out = self._projection(merged, f"{prefix}.wo", adapters, training, rng)
        return nm.add(out, self.store[f"{prefix}.bo"])

    def _block(self, x, prefix, width, adapters, training, rng):
        normed = nm.layer_norm(x, self.store[f"{prefix}.ln1.g"], self.store[f"{prefix}.ln1.b"])
        x = nm.add(x, self._attention(normed, f"{prefix}.attn", width, adapters, training, rng))
        normed = nm.layer_norm(x, self.store[f"{prefix}.ln2.g"], self.store[f"{prefix}.ln2.b"])
        h = nm.relu(nm.add(nm.matmul(normed, self.store[f"{prefix}.mlp.w1"]), self.store[f"{prefix}.mlp.b1"]))
        h = nm.add(nm.matmul(h, self.store[f"{prefix}.mlp.w2"]), self.store[f"{prefix}.mlp.b2"])
        return nm.add(x, h)

    # -- image path ---------------------------------------------------------

    def patchify(self, image: np.ndarray) -> np.ndarray:
        cfg = self.config
        g = cfg.patch
        side = cfg.image_side
        grid = side // g
        arr = np.asarray(image, dtype=np.float32).reshape(grid, g, grid, g, 3)
        return arr.transpose(0, 2, 1, 3, 4).reshape(grid * grid, cfg.patch_dim)

    def embed_patches(self, image: np.ndarray) -> nm.Tensor:
        """Linear patch embedding plus learned positions (pre-encoder)."""
        tokens = nm.Tensor(self.patchify(image))
        embedded = nm.add(nm.matmul(tokens, self.store["enc.patch.w"]), self.store["enc.patch.b"])
        return nm.add(embedded, self.store["enc.pos"])

    def encode_image(self, image: np.ndarray, adapters=None, training=False, rng=None) -> nm.Tensor:
        x = self.embed_patches(image)
        for i in range(self.config.encoder_depth):
            x = self._block(x, f"enc.b{i}", self.config.d_v, adapters, training, rng)
        return x

    def encode_images(self, sample: EditSample, adapters=None, training=False, rng=None):
        sample.validate(self.config)
        v_s = self.encode_image(sample.source, adapters, training, rng)
        v_e = self.encode_image(sample.edited, adapters, training, rng)
        return v_s, v_e

    def project(self, v_s: nm.Tensor, v_e: nm.Tensor) -> nm.Tensor:
        """Token-wise linear map into the language width; source block first."""
        both = nm.concat_rows([v_s, v_e])
        return nm.add(nm.matmul(both, self.store["proj.w"]), self.store["proj.b"])

    # -- text path ----------------------------------------------------------

    def tokenize(self, text: str) -> tuple[nm.Tensor, bool]:
        """Byte-level tokens embedded with positions; truncation is recorded."""
        if not text:
            raise DataError("an editing instruction is required")
        raw = text.encode("utf-8")
        truncated = len(raw) > self.config.max_text_len
        raw = raw[: self.config.max_text_len]
        ids = np.frombuffer(raw, dtype=np.uint8).astype(np.intp)
        embedded = nm.take_rows(self.store["txt.embed"], ids)
        positions = nm.take_rows(self.store["txt.pos"], np.arange(ids.size))
        return nm.add(embedded, positions), truncated

    # -- full forward -------------------------------------------------------

    def assemble(self, sample: EditSample, adapters=None, training=False, rng=None) -> TokenSequence:
        v_s, v_e = self.encode_images(sample, adapters, training, rng)
        t_v = self.project(v_s, v_e)
        t_p, truncated = self.tokenize(sample.instruction)
        n_s = v_s.data.shape[0]
        n_e = v_e.data.shape[0]
        n_t = t_p.data.shape[0]
        segments = np.concatenate(
            [
                np.full(n_s, SEGMENT_SOURCE),
                np.full(n_e, SEGMENT_EDITED),
                np.full(n_t, SEGMENT_TEXT),
            ]
        )
        z0 = nm.concat_rows([t_v, t_p])
        z0 = nm.add(z0, nm.take_rows(self.store["seg.embed"], segments))
        return TokenSequence(
            embeddings=z0,
            segments=segments,
            source_index=n_s - 1,
            edit_index=n_s + n_e - 1,
            truncated=truncated,
        )

    def forward_all_layers(
        self,
        sample: EditSample,
        adapters=None,
        training=False,
        rng=None,
        grad_layer: int | None = None,
        up_to_layer: int | None = None,
    ) -> HiddenStates:
        """Run the block stack, recording every layer's activations.

        `grad_layer` keeps that layer's final-visual rows on the tape (for
        adapter training); `up_to_layer` stops early when deeper activations
        are not needed.
        """
        seq = self.assemble(sample, adapters, training, rng)
        depth = self.config.lm_depth
        last = depth if up_to_layer is None else up_to_layer
        if not 1 <= last <= depth:
            raise ContractError(f"layer bound {last} outside 1..{depth}")
        x = seq.embeddings
        layers: list[np.ndarray] = []
        graph_rows = None
        for i in range(last):
            x = self._block(x, f"lm.b{i}", self.config.d, adapters, training, rng)
            if not np.isfinite(x.data).all():
                raise ContractError(f"non-finite activation at layer {i + 1}")
            layers.append(x.detach())
            if grad_layer is not None and i + 1 == grad_layer:
                h_s = nm.take_rows(x, [seq.source_index])
                h_e = nm.take_rows(x, [seq.edit_index])
                graph_rows = (h_s, h_e)
        return HiddenStates(
            layers=layers,
            z0=seq.embeddings.detach(),
            segments=seq.segments,
            source_index=seq.source_index,
            edit_index=seq.edit_index,
            truncated=seq.truncated,
            graph_rows=graph_rows,
        )


def dump_pairs_for_samples(
    backbone: Backbone, samples: list[EditSample]
) -> np.ndarray:
    """(n, L, 2, d) pooled pairs from frozen forwards, dump-ready."""
    pairs = [backbone.forward_all_layers(s).pooled_pairs() for s in samples]
    return np.stack(pairs).astype(np.float32)
