"""Detection scores, equal error rate and score-level fusion."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Sequence, TextIO

import numpy as np

from .features import Corpus, ManifestEntry, center_crop
from .mhfa import MhfaConfig, MhfaParams, detection_scores, mhfa_forward


class ScoreError(ValueError):
    pass


class AlignmentError(ScoreError):
    pass


class IntegrityError(ScoreError):
    pass


@dataclass(frozen=True)
class ScoreRecord:
    utt_id: str
    label: str
    generator_id: str
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ScoreError(f"{self.utt_id}: non-finite score {self.score}")


def score_dataset(
    params: MhfaParams,
    cfg: MhfaConfig,
    corpus: Corpus,
    entries: Sequence[ManifestEntry],
    crop_frames: int,
    batch_size: int = 64,
) -> list[ScoreRecord]:
    """Eval-mode scores for ``entries``, centre-cropped to ``crop_frames``."""
    records: list[ScoreRecord] = []
    for start in range(0, len(entries), batch_size):
        chunk = entries[start:start + batch_size]
        stacks = []
        for e in chunk:
            s = corpus.stack(e)
            if s.L != cfg.L or s.D != cfg.D:
                raise ScoreError(
                    f"{e.utt_id}: features are L={s.L}, D={s.D} but model expects L={cfg.L}, D={cfg.D}"
                )
            stacks.append(center_crop(s, crop_frames).values)
        out = mhfa_forward(np.stack(stacks), params, cfg, mode="eval")
        for e, sc in zip(chunk, detection_scores(out.logits)):
            records.append(ScoreRecord(e.utt_id, e.label, e.generator_id, float(sc)))
    return records


# ---------------------------------------------------------------------------
# EER
# ---------------------------------------------------------------------------


def _split_scores(records: Sequence[ScoreRecord]) -> tuple[np.ndarray, np.ndarray]:
    bona = np.array([r.score for r in records if r.label == "bonafide"], dtype=np.float64)
    spoof = np.array([r.score for r in records if r.label == "spoof"], dtype=np.float64)
    if bona.size == 0 or spoof.size == 0:
        raise ScoreError("EER needs at least one bonafide and one spoof score")
    return bona, spoof


def compute_eer(records: Sequence[ScoreRecord]) -> tuple[float, float]:
    """Equal error rate by exhaustive threshold sweep.

    Candidate thresholds are every distinct score plus +inf.  At threshold
    t, FAR is the share of spoofs scoring >= t and FRR the share of bonafides
    scoring < t.  The threshold minimising |FAR - FRR| wins (smallest t on
    ties) and the EER is the mean of FAR and FRR there.
    """
    bona, spoof = _split_scores(records)
    return eer_from_arrays(bona, spoof)


def eer_from_arrays(bona: np.ndarray, spoof: np.ndarray) -> tuple[float, float]:
    bona = np.sort(np.asarray(bona, dtype=np.float64))
    spoof = np.sort(np.asarray(spoof, dtype=np.float64))
    thresholds = np.append(np.unique(np.concatenate([bona, spoof])), np.inf)
    far = (spoof.size - np.searchsorted(spoof, thresholds, side="left")) / spoof.size
    frr = np.searchsorted(bona, thresholds, side="left") / bona.size
    gap = np.abs(far - frr)
    i = int(np.argmin(gap))  # first minimum is the smallest threshold
    return float((far[i] + frr[i]) / 2), float(thresholds[i])


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------


@dataclass
class FusionSpec:
    systems: list[str]
    weights: list[float] = field(default_factory=list)
    normalize: str = "none"

    def __post_init__(self):
        if not self.weights:
            self.weights = [1.0] * len(self.systems)
        if len(self.weights) != len(self.systems):
            raise ScoreError(f"{len(self.weights)} weights for {len(self.systems)} systems")
        if not any(w != 0 for w in self.weights):
            raise ScoreError("fusion needs at least one nonzero weight")
        if self.normalize not in ("none", "zscore"):
            raise ScoreError(f"unknown normalisation {self.normalize!r}")


def fuse_scores(spec: FusionSpec, score_sets: Sequence[Sequence[ScoreRecord]]) -> list[ScoreRecord]:
    """Weighted mean of per-system scores, optionally z-normalised first.

    Output order follows the first system.
    """
    if len(score_sets) != len(spec.weights):
        raise ScoreError(f"{len(score_sets)} score sets for {len(spec.weights)} weights")
    ref = score_sets[0]
    ref_ids = [r.utt_id for r in ref]
    ref_map = {r.utt_id: r for r in ref}
    columns = []
    for k, system in enumerate(score_sets):
        by_id = {r.utt_id: r for r in system}
        missing = sorted(set(ref_ids) - set(by_id))
        extra = sorted(set(by_id) - set(ref_ids))
        if missing or extra:
            raise AlignmentError(
                f"system {k} does not align with system 0: missing {missing[:10]}, extra {extra[:10]}"
            )
        for utt in ref_ids:
            if by_id[utt].label != ref_map[utt].label:
                raise IntegrityError(f"label disagreement for {utt} between system 0 and system {k}")
        col = np.array([by_id[u].score for u in ref_ids], dtype=np.float64)
        if spec.normalize == "zscore":
            sd = col.std()
            col = (col - col.mean()) / (sd if sd > 0 else 1.0)
        columns.append(col)
    w = np.asarray(spec.weights, dtype=np.float64)
    fused = (w @ np.stack(columns)) / w.sum()
    return [ScoreRecord(r.utt_id, r.label, r.generator_id, float(s)) for r, s in zip(ref, fused)]


# ---------------------------------------------------------------------------
# score files
# ---------------------------------------------------------------------------


def write_scores(records: Sequence[ScoreRecord], dest: TextIO | str | os.PathLike) -> None:
    if not hasattr(dest, "write"):
        with open(dest, "w", encoding="utf-8") as fh:
            write_scores(records, fh)
        return
    for r in records:
        dest.write(f"{r.utt_id} {r.label} {r.generator_id} {r.score:.9g}\n")


def read_scores(src: TextIO | str | os.PathLike) -> list[ScoreRecord]:
    if not hasattr(src, "read"):
        with open(src, encoding="utf-8") as fh:
            return read_scores(fh)
    out = []
    for lineno, line in enumerate(src, start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 4 or parts[1] not in ("bonafide", "spoof"):
            raise ScoreError(f"score line {lineno}: expected 'utt_id label generator score'")
        try:
            score = float(parts[3])
        except ValueError as exc:
            raise ScoreError(f"score line {lineno}: bad score {parts[3]!r}") from exc
        out.append(ScoreRecord(parts[0], parts[1], parts[2], score))
    return out
