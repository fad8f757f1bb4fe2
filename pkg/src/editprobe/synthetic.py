"""Synthetic benchmark generator: seeded cohorts of subjective ratings with a
planted erratic rater, per-layer feature pairs with a quality signal whose
envelope peaks at a chosen layer, and distortion-graded image pairs.

Everything is a deterministic function of the config seed. Ratings follow
m = clamp(round(gain * q + bias + noise), 1, 5) per subject; the erratic
rater answers anti-correlated with extra jitter so screening can catch it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from editprobe.common import DIMENSIONS, rng_for
from editprobe.errors import ConfigError
from editprobe.mos import RatingRecord

ERRATIC_MIN_SUBJECTS = 15


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int = 512
    n_subjects: int = 20
    n_layers: int = 8
    dim: int = 128
    planted_layer: int = 4  # 1-indexed
    signal: float = 4.0
    feature_noise: float = 1.0
    envelope_width: float = 1.0
    rating_noise: float = 0.25
    bias_range: tuple[float, float] = (-0.25, 0.25)
    gain_range: tuple[float, float] = (0.92, 1.08)
    latent_jitter: float = 0.25
    nonlinear: bool = False
    nonlinear_monotone_ratio: float = 0.35
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.planted_layer <= self.n_layers:
            raise ConfigError(
                f"planted layer {self.planted_layer} outside 1..{self.n_layers}"
            )
        if self.n_samples < 1 or self.n_subjects < 2:
            raise ConfigError("need at least 1 sample and 2 subjects")

    def zero_noise(self) -> "SynthConfig":
        """Noiseless variant: exact ratings and noise-free features.

        Also keeps the cohort below the erratic-rater threshold: with zero
        rating noise a lone outlier inflates its own group sigma enough that
        the sqrt(20) criterion can never fire, so a planted erratic rater
        would survive and contaminate the clean cohort.
        """
        return SynthConfig(
            **{
                **self.__dict__,
                "n_subjects": min(self.n_subjects, ERRATIC_MIN_SUBJECTS - 1),
                "rating_noise": 0.0,
                "feature_noise": 0.0,
                "bias_range": (0.0, 0.0),
                "gain_range": (1.0, 1.0),
                "latent_jitter": 0.0,
            }
        )


@dataclass
class Cohort:
    config: SynthConfig
    sample_ids: list[str]
    latents: np.ndarray  # (n, 3) per-dimension latent quality in [1, 5]
    planted_mos: dict[str, dict]  # manifest-style MOS from the latents
    records: list[RatingRecord]
    erratic_subject: str | None
    common_ratings: np.ndarray | None = None  # (n, 3) shared ratings at zero noise
    features: np.ndarray | None = None  # (n, L, 2, d) float32


def _sample_ids(n: int) -> list[str]:
    return [f"s{i:04d}" for i in range(n)]


def draw_latents(config: SynthConfig) -> tuple[list[str], np.ndarray]:
    rng = rng_for(config.seed, "latents")
    shared = rng.uniform(1.2, 4.8, size=config.n_samples)
    jitter = rng.normal(0.0, 1.0, size=(config.n_samples, 3))
    latents = np.clip(shared[:, None] + config.latent_jitter * jitter, 1.0, 5.0)
    return _sample_ids(config.n_samples), latents


def planted_mos_table(sample_ids: list[str], latents: np.ndarray) -> dict[str, dict]:
    """Ground-truth MOS on the 0-100 scale, affine in the latent quality."""
    table = {}
    for i, sid in enumerate(sample_ids):
        q, e, p = (25.0 * (latents[i] - 1.0)).tolist()
        table[sid] = {
            "mos_q": q,
            "mos_e": e,
            "mos_p": p,
            "mos_o": (q + e + p) / 3.0,
        }
    return table


def gen_ratings(config: SynthConfig) -> Cohort:
    sample_ids, latents = draw_latents(config)
    rng = rng_for(config.seed, "ratings")

    subjects = [f"subj{i:02d}" for i in range(config.n_subjects)]
    gains = rng.uniform(*config.gain_range, size=config.n_subjects)
    biases = rng.uniform(*config.bias_range, size=config.n_subjects)
    erratic = None
    if config.n_subjects >= ERRATIC_MIN_SUBJECTS:
        erratic = subjects[int(rng.integers(config.n_subjects))]

    raw = (
        gains[:, None, None] * latents[None, :, :]
        + biases[:, None, None]
        + rng.normal(0.0, config.rating_noise or 0.0, size=(config.n_subjects, config.n_samples, 3))
    )
    if erratic is not None:
        ei = subjects.index(erratic)
        raw[ei] = 6.0 - latents + rng.uniform(-1.5, 1.5, size=latents.shape)
    scores = np.clip(np.round(raw), 1, 5).astype(int)

    records = [
        RatingRecord(subjects[si], sample_ids[sj], DIMENSIONS[di], int(scores[si, sj, di]))
        for si in range(config.n_subjects)
        for sj in range(config.n_samples)
        for di in range(3)
    ]
    common = None
    if config.rating_noise == 0.0:
        good = next(i for i, s in enumerate(subjects) if s != erratic)
        common = scores[good].astype(np.float64)
    return Cohort(
        config=config,
        sample_ids=sample_ids,
        latents=latents,
        planted_mos=planted_mos_table(sample_ids, latents),
        records=records,
        erratic_subject=erratic,
        common_ratings=common,
    )


def _quality_components(latents: np.ndarray, config: SynthConfig) -> list[np.ndarray]:
    """Per-dimension feature-space encodings of the latent quality.

    Linear mode: one scaled component per dimension. Nonlinear mode: a strong
    folded (non-monotone) component plus a weaker monotone one, so a linear
    readout is handicapped but a small MLP is not.
    """
    g = (latents - 3.0) / 2.0  # [-1, 1]
    components = []
    for di in range(3):
        if config.nonlinear:
            components.append(np.abs(g[:, di]))
            components.append(config.nonlinear_monotone_ratio * g[:, di])
        else:
            components.append(g[:, di])
    return components


def gen_features(cohort: Cohort) -> np.ndarray:
    """(n, L, 2, d) float32 feature pairs with the planted layer envelope."""
    config = cohort.config
    rng = rng_for(config.seed, "features")
    components = _quality_components(cohort.latents, config)

    directions = rng.normal(size=(config.n_layers, len(components), config.dim))
    directions /= np.linalg.norm(directions, axis=2, keepdims=True)

    n, L, d = config.n_samples, config.n_layers, config.dim
    features = config.feature_noise * rng.normal(size=(n, L, 2, d))
    for l in range(L):
        u = float(np.exp(-((l + 1 - config.planted_layer) ** 2) / (2.0 * config.envelope_width**2)))
        signal_block = np.zeros((n, d))
        for ci, comp in enumerate(components):
            signal_block += comp[:, None] * directions[l, ci]
        features[:, l, 0, :] += config.signal * u * signal_block
        features[:, l, 1, :] += config.signal * u * signal_block
    cohort.features = features.astype(np.float32)
    return cohort.features


def gen_cohort(config: SynthConfig) -> Cohort:
    cohort = gen_ratings(config)
    gen_features(cohort)
    return cohort


# ---------------------------------------------------------------------------
# image pairs (for baselines, the toy backbone, and export tests)
# ---------------------------------------------------------------------------

_INSTRUCTION_VERBS = ("brighten", "soften", "recolor", "sharpen", "warm up", "stylize")
_INSTRUCTION_NOUNS = ("the sky", "the foreground", "the left half", "the subject", "the shadows")


@dataclass(frozen=True)
class ImageSynthConfig:
    n_samples: int = 48
    side: int = 32
    max_distortion: float = 0.45
    seed: int = 0


def _smooth_field(rng: np.random.Generator, side: int) -> np.ndarray:
    """Low-frequency random image in [0,1]: coarse noise, bilinear upsampling."""
    coarse = rng.random((4, 4, 3))
    idx = np.linspace(0, 3, side)
    i0 = np.floor(idx).astype(int)
    i1 = np.minimum(i0 + 1, 3)
    t = (idx - i0)[:, None]
    rows = coarse[i0] * (1 - t)[..., None] + coarse[i1] * t[..., None]
    tc = (idx - i0)[None, :, None]
    img = rows[:, i0] * (1 - tc[..., None]) + rows[:, i1] * tc[..., None]
    # compress toward mid-gray: keeps content variance below the distortion
    # signal and leaves headroom before clipping
    return np.clip(0.5 + 0.5 * (img.reshape(side, side, 3) - 0.5), 0.0, 1.0)


def gen_image_pairs(
    config: ImageSynthConfig, mos_overall: np.ndarray | None = None
) -> tuple[list[str], np.ndarray, np.ndarray, list[str], np.ndarray]:
    """Seeded (ids, sources, editeds, instructions, mos) with distortion
    monotone in (100 - MOS): low-MOS edits are heavily corrupted."""
    rng = rng_for(config.seed, "images")
    ids = _sample_ids(config.n_samples)
    if mos_overall is None:
        mos_overall = rng.uniform(5.0, 95.0, size=config.n_samples)
    sources = np.stack([_smooth_field(rng, config.side) for _ in range(config.n_samples)])
    amplitude = config.max_distortion * (100.0 - mos_overall) / 100.0
    # part zero-mean noise, part brightening: distortion magnitude stays
    # monotone in (100 - MOS) while a mean shift keeps it visible to
    # mean-pooled probes
    noise = rng.normal(size=sources.shape)
    shift = amplitude[:, None, None, None]
    editeds = np.clip(sources + shift * (0.6 * noise + 0.5), 0.0, 1.0)
    instructions = [
        f"{_INSTRUCTION_VERBS[int(rng.integers(len(_INSTRUCTION_VERBS)))]} "
        f"{_INSTRUCTION_NOUNS[int(rng.integers(len(_INSTRUCTION_NOUNS)))]} (sample {sid})"
        for sid in ids
    ]
    return ids, sources.astype(np.float32), editeds.astype(np.float32), instructions, mos_overall
