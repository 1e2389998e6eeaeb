"""Synthetic layered features standing in for an SSL front-end.

Generative process
------------------
Bonafide utterance, layer ``l``::

    B_l = s @ M_l + noise,   noise ~ N(0, noise_std^2)

``s`` is a (T, latent_dim) Gaussian random walk drawn per utterance and the
mixing maps ``M_l`` are drawn once per dataset.  A spoof from generator ``g``
starts from a bonafide-style stack; on the layers inside
``artifact_layer_band`` the per-channel spread around the temporal mean is
scaled by ``1 + stats_shift_scale * u_g`` and ``artifact_amplitude * a_g`` is
added to every frame.  ``a_g`` is a unit vector and ``u_g ~ U(-1, 1)``, both
fixed per generator.  Artifact directions are rejection-resampled until all
pairs satisfy ``|cos| < max_artifact_cosine``.

Seen generators populate train, dev and eval_seen; unseen generators appear
only in eval_unseen.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .features import (
    BONAFIDE_GENERATOR,
    Corpus,
    FeatureStack,
    ManifestEntry,
    write_feature_stack,
    write_manifest,
)
from .seeding import derive_seed, stream


@dataclass
class SynthConfig:
    L: int = 8
    T_raw: int = 300
    D: int = 128
    n_train_per_class: int = 400
    n_eval_per_class: int = 100
    seen_generators: int = 2
    unseen_generators: int = 2
    artifact_amplitude: float = 0.5
    artifact_layer_band: tuple[int, int] = (4, 8)
    stats_shift_scale: float = 0.3
    latent_dim: int = 32
    latent_scale: float = 0.3  # content energy per channel relative to the artifact shift
    walk_step: float = 0.1
    noise_std: float = 0.1
    max_artifact_cosine: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.artifact_layer_band = tuple(int(b) for b in self.artifact_layer_band)
        counts = dict(
            L=self.L, T_raw=self.T_raw, D=self.D, latent_dim=self.latent_dim,
            n_train_per_class=self.n_train_per_class, n_eval_per_class=self.n_eval_per_class,
            seen_generators=self.seen_generators, unseen_generators=self.unseen_generators,
        )
        for name, v in counts.items():
            if int(v) < 1:
                raise ValueError(f"{name} must be >= 1, got {v}")
        if self.artifact_amplitude < 0:
            raise ValueError("artifact_amplitude must be non-negative")
        lo, hi = self.artifact_layer_band
        if not 0 <= lo < hi <= self.L:
            raise ValueError(f"artifact_layer_band {self.artifact_layer_band} outside [0, {self.L})")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["artifact_layer_band"] = list(self.artifact_layer_band)
        return d


@dataclass
class GeneratorModel:
    name: str
    direction: np.ndarray
    stats_shift: float
    seen: bool


@dataclass
class SyntheticWorld:
    """Dataset-level draws shared by every utterance."""

    mixing: np.ndarray  # (L, latent_dim, D)
    generators: list[GeneratorModel] = field(default_factory=list)

    def generator(self, name: str) -> GeneratorModel:
        return next(g for g in self.generators if g.name == name)


def _artifact_directions(n: int, D: int, max_cos: float, rng: np.random.Generator) -> np.ndarray:
    out: list[np.ndarray] = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 10000 * n:
            raise RuntimeError(f"could not draw {n} artifact directions with |cos| < {max_cos} in D={D}")
        v = rng.standard_normal(D)
        v /= np.linalg.norm(v)
        if all(abs(float(v @ u)) < max_cos for u in out):
            out.append(v)
    return np.stack(out)


def build_world(cfg: SynthConfig) -> SyntheticWorld:
    rng = stream(cfg.seed, "synth/world")
    mixing = rng.standard_normal((cfg.L, cfg.latent_dim, cfg.D)) * (cfg.latent_scale / np.sqrt(cfg.latent_dim))
    n_gen = cfg.seen_generators + cfg.unseen_generators
    dirs = _artifact_directions(n_gen, cfg.D, cfg.max_artifact_cosine, rng)
    shifts = rng.uniform(-1.0, 1.0, size=n_gen)
    gens = [
        GeneratorModel(f"G{i + 1:02d}", dirs[i], float(shifts[i]), seen=i < cfg.seen_generators)
        for i in range(n_gen)
    ]
    return SyntheticWorld(mixing=mixing, generators=gens)


def render_utterance(
    cfg: SynthConfig, world: SyntheticWorld, generator: GeneratorModel | None, rng: np.random.Generator
) -> FeatureStack:
    """Draw one (L, T_raw, D) stack; ``generator=None`` gives bonafide."""
    steps = rng.standard_normal((cfg.T_raw, cfg.latent_dim)) * cfg.walk_step
    steps[0] = rng.standard_normal(cfg.latent_dim)
    latent = np.cumsum(steps, axis=0)
    x = (latent @ world.mixing).astype(np.float32)
    x += rng.standard_normal(x.shape, dtype=np.float32) * np.float32(cfg.noise_std)
    if generator is not None:
        lo, hi = cfg.artifact_layer_band
        band = x[lo:hi]
        centre = band.mean(axis=1, keepdims=True)
        band = centre + (band - centre) * (1.0 + cfg.stats_shift_scale * generator.stats_shift)
        x[lo:hi] = band + cfg.artifact_amplitude * generator.direction
    return FeatureStack(x.astype(np.float32, copy=False))


def _plan(cfg: SynthConfig, world: SyntheticWorld) -> list[tuple[str, str, str]]:
    """(utt_id, split, generator name or '-') in generation order."""
    seen = [g.name for g in world.generators if g.seen]
    unseen = [g.name for g in world.generators if not g.seen]
    plan = []
    sizes = [
        ("train", cfg.n_train_per_class, seen),
        ("dev", cfg.n_eval_per_class, seen),
        ("eval_seen", cfg.n_eval_per_class, seen),
        ("eval_unseen", cfg.n_eval_per_class, unseen),
    ]
    for split, n, gens in sizes:
        for i in range(n):
            plan.append((f"{split}_bona_{i:05d}", split, BONAFIDE_GENERATOR))
        for i in range(n):
            plan.append((f"{split}_spoof_{i:05d}", split, gens[i % len(gens)]))
    return plan


def iter_synthetic(cfg: SynthConfig, world: SyntheticWorld | None = None) -> Iterator[tuple[ManifestEntry, FeatureStack]]:
    world = world or build_world(cfg)
    for index, (utt_id, split, gen) in enumerate(_plan(cfg, world)):
        rng = np.random.default_rng([derive_seed(cfg.seed, "synth/utt"), index])
        generator = None if gen == BONAFIDE_GENERATOR else world.generator(gen)
        stack = render_utterance(cfg, world, generator, rng)
        label = "bonafide" if generator is None else "spoof"
        entry = ManifestEntry(utt_id, f"feats/{utt_id}.esdf", label, gen, split)
        yield entry, stack


def synthesize_dataset(cfg: SynthConfig, outdir: str | Path | None = None) -> Corpus:
    """Generate the full synthetic corpus.

    With ``outdir`` the stacks are written as ESDF files plus
    ``manifest.jsonl`` and the returned corpus reads them back lazily;
    otherwise everything is kept in memory.
    """
    world = build_world(cfg)
    entries: list[ManifestEntry] = []
    if outdir is None:
        stacks = {}
        for entry, stack in iter_synthetic(cfg, world):
            entries.append(entry)
            stacks[entry.utt_id] = stack
        corpus = Corpus(entries, stacks)
    else:
        outdir = Path(outdir)
        (outdir / "feats").mkdir(parents=True, exist_ok=True)
        for entry, stack in iter_synthetic(cfg, world):
            write_feature_stack(stack, outdir / entry.path)
            entries.append(entry)
        write_manifest(entries, outdir / "manifest.jsonl")
        corpus = Corpus(entries, root=outdir)
    corpus.world = world
    return corpus
