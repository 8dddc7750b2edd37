"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np

from .manifest import N_CLASSES, RankSection
from .preprocess import N_MFCC

MODALITY_KEYS = ("video", "audio", "prior")


def check_labels(y) -> np.ndarray:
    """Rank labels (ints 0..3, RankSection members or 'A'..'D') as an int64 array."""
    y = np.asarray(y, dtype=object).ravel()
    out = np.empty(len(y), dtype=np.int64)
    for i, v in enumerate(y):
        out[i] = int(RankSection.parse(v)) if isinstance(v, (str, RankSection)) else int(v)
    if len(out) and (out.min() < 0 or out.max() >= N_CLASSES):
        raise ValueError(f"labels must be class indices in [0, {N_CLASSES})")
    return out


def check_video_batch(video, channels: int | None = None) -> np.ndarray:
    video = np.asarray(video)
    if video.ndim == 4:
        video = video[..., None]
    if video.ndim != 5:
        raise ValueError(f"video batch must be [N, T, H, W, C], got shape {video.shape}")
    if video.dtype != np.uint8:
        raise ValueError(f"video batch must be uint8, got {video.dtype}")
    if channels is not None and video.shape[-1] != channels:
        raise ValueError(f"expected {channels} channel(s), got {video.shape[-1]}")
    return video


def check_mfcc_batch(audio) -> np.ndarray:
    audio = np.asarray(audio, dtype=np.float32)
    if audio.ndim != 3 or audio.shape[-1] != N_MFCC:
        raise ValueError(f"audio batch must be [N, frames, {N_MFCC}], got shape {audio.shape}")
    if not np.isfinite(audio).all():
        raise ValueError("audio features contain NaN or Inf")
    return audio


def check_multimodal(X, required=(), prior_dim: int | None = None) -> dict:
    """Validate a dict of modality arrays sharing the leading sample axis.

    A bare array is taken as the video batch.
    """
    if not isinstance(X, dict):
        X = {"video": X}
    unknown = set(X) - set(MODALITY_KEYS)
    if unknown:
        raise ValueError(f"unknown modality keys {sorted(unknown)}; expected a subset of {MODALITY_KEYS}")
    out = {}
    if X.get("video") is not None:
        out["video"] = check_video_batch(X["video"])
    if X.get("audio") is not None:
        out["audio"] = check_mfcc_batch(X["audio"])
    if X.get("prior") is not None:
        prior = np.asarray(X["prior"], dtype=np.float32)
        if prior.ndim != 2 or (prior_dim is not None and prior.shape[1] != prior_dim):
            raise ValueError(f"prior must be [N, {prior_dim}], got shape {prior.shape}")
        out["prior"] = prior
    missing = [k for k in required if k not in out]
    if missing:
        raise ValueError(f"missing modalities {missing}")
    lengths = {k: len(v) for k, v in out.items()}
    if len(set(lengths.values())) > 1:
        raise ValueError(f"modalities disagree on sample count: {lengths}")
    if not out or not next(iter(lengths.values())):
        raise ValueError("no samples")
    return out
