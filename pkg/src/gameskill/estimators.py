"""scikit-learn compatible wrappers: preprocessing transformers and the skill classifier."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .losses import KlLossConfig, RankingLossConfig, generate_pairs
from .manifest import N_CLASSES
from .model import ModelConfig, ScoreHead, SkillNet
from .preprocess import (
    AudioTrack,
    VideoClip,
    apply_center_mask,
    compute_mfcc,
    downsample_frames,
    extract_view,
    get_view,
    resize_frames,
)
from .trainer import (
    Batchifier,
    TrainConfig,
    TrainLog,
    branch_scores,
    predict_logits,
    pretrain_ranking,
    pretrain_unimodal,
    train_joint,
)
from .validation import check_labels, check_multimodal, check_video_batch


class _VideoTransformer(TransformerMixin, BaseEstimator):
    """Stateless per-clip video operation applied to a batch or to X["video"]."""

    def fit(self, X, y=None):
        return self

    def _clip(self, clip: VideoClip) -> VideoClip:
        raise NotImplementedError

    def transform(self, X):
        if isinstance(X, dict):
            out = dict(X)
            out["video"] = self.transform(X["video"])
            return out
        video = check_video_batch(X)
        fps = getattr(self, "fps", None) or 1.0
        return np.stack([self._clip(VideoClip(v, fps)).frames for v in video])


class CenterMasker(_VideoTransformer):
    def __init__(self, area_fraction=0.8):
        self.area_fraction = area_fraction

    def _clip(self, clip):
        return apply_center_mask(clip, self.area_fraction)


class ViewCropper(_VideoTransformer):
    def __init__(self, view="health"):
        self.view = view

    def _clip(self, clip):
        return extract_view(clip, get_view(self.view) if isinstance(self.view, str) else self.view)


class FrameResizer(_VideoTransformer):
    def __init__(self, width=320, height=240):
        self.width = width
        self.height = height

    def _clip(self, clip):
        return resize_frames(clip, self.width, self.height)


class FrameDownsampler(_VideoTransformer):
    def __init__(self, fps=10.0, target_fps=1.0):
        self.fps = fps
        self.target_fps = target_fps

    def _clip(self, clip):
        return downsample_frames(clip, self.target_fps)


class MfccExtractor(TransformerMixin, BaseEstimator):
    """Raw waveforms [N, samples] -> MFCC batch [N, frames, n_coeffs]."""

    def __init__(self, sample_rate=16000, n_coeffs=20, frame_len_s=0.025, hop_s=0.010):
        self.sample_rate = sample_rate
        self.n_coeffs = n_coeffs
        self.frame_len_s = frame_len_s
        self.hop_s = hop_s

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        waves = np.asarray(X)
        if waves.ndim == 1:
            waves = waves[None]
        return np.stack(
            [
                compute_mfcc(AudioTrack(w, self.sample_rate), self.n_coeffs, self.frame_len_s, self.hop_s).coeffs
                for w in waves
            ]
        )


class SkillClassifier(ClassifierMixin, BaseEstimator):
    """Multi-stream rank-section classifier.

    ``X`` is a dict with any of ``video`` (uint8 [N, T, H, W, C]), ``audio``
    (MFCC [N, frames, 20]) and ``prior`` ([N, prior_dim]); ``streams`` picks
    which inputs the network reads. ``transform`` returns the fused embedding
    taken before the final affine layer.

    Parameters
    ----------
    streams : tuple of str
        ``"audio"``, ``"video"`` and/or ``"view:<name>"``, in concatenation order.
    prior_mode : {None, "before_fc", "before_gru"}
        Where a chat prior joins the fusion head.
    kl_scale : float
        Weight of the KL(video || audio) alignment term; 0 disables it.
    ranking_epochs : int
        Epochs of pairwise-ranking pretraining per branch before joint training.
    """

    def __init__(
        self,
        streams=("audio", "video"),
        prior_mode=None,
        model_config=None,
        learning_rate=3e-4,
        batch_size=8,
        epochs=30,
        pretrain_epochs=0,
        patience=10,
        kl_scale=0.0,
        kl_temperature=1.0,
        ranking_epochs=0,
        margin=0.2,
        pair_subsample=0.1,
        class_weighting="none",
        seed=0,
    ):
        self.streams = streams
        self.prior_mode = prior_mode
        self.model_config = model_config
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.pretrain_epochs = pretrain_epochs
        self.patience = patience
        self.kl_scale = kl_scale
        self.kl_temperature = kl_temperature
        self.ranking_epochs = ranking_epochs
        self.margin = margin
        self.pair_subsample = pair_subsample
        self.class_weighting = class_weighting
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            pretrain_epochs=self.pretrain_epochs,
            ranking_epochs=self.ranking_epochs,
            patience=self.patience,
            kl=KlLossConfig(self.kl_scale, self.kl_temperature) if self.kl_scale > 0 else None,
            ranking=RankingLossConfig(self.margin, self.pair_subsample, self.seed),
            class_weighting=self.class_weighting,
            seed=self.seed,
        )

    def _required(self) -> list[str]:
        req = ["audio" if s == "audio" else "video" for s in self.streams]
        if self.prior_mode:
            req.append("prior")
        return sorted(set(req))

    def _build(self, X: dict) -> SkillNet:
        config = self.model_config or ModelConfig()
        if X.get("video") is not None:
            config = replace(config, video_channels=X["video"].shape[-1])
        if self.prior_mode:
            config = replace(config, prior_dim=X["prior"].shape[1])
        torch.manual_seed(self.seed)
        return SkillNet(config, tuple(self.streams), self.prior_mode)

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_multimodal(X, self._required())
        y = check_labels(y)
        if len(y) != len(next(iter(X.values()))):
            raise ValueError("X and y disagree on sample count")
        if X_val is not None:
            X_val = check_multimodal(X_val, self._required())
            y_val = check_labels(y_val)
        config = self._train_config()
        self.classes_ = np.arange(N_CLASSES)
        self.batchify_ = Batchifier.fit(X)
        self.net_ = self._build(X)
        self.log_ = TrainLog()
        branches = list(self.streams)

        if self.ranking_epochs > 0:
            ids = [str(i) for i in range(len(y))]
            pairs = generate_pairs(zip(ids, y), config.ranking)
            self.score_heads_ = {}
            for b in branches:
                self.score_heads_[b] = pretrain_ranking(self.net_, b, pairs, X, ids, config, self.batchify_,
                                                        log=self.log_)
        if self.pretrain_epochs > 0 and len(branches) > 1:
            for b in branches:
                pretrain_unimodal(self.net_, b, X, y, config, self.batchify_, X_val, y_val, log=self.log_)

        result = train_joint(self.net_, X, y, config, self.batchify_, X_val, y_val, log=self.log_)
        self.best_epoch_ = result.best_epoch
        self.best_val_f1_ = result.best_val_f1
        self.last_state_ = result.last_state
        self.history_ = list(self.log_.epochs)
        return self

    def _logits_and_embedding(self, X):
        check_is_fitted(self, "net_")
        X = check_multimodal(X, self._required())
        self.net_.eval()
        logits = predict_logits(lambda b: self.net_(b)[0], X, self.batchify_)
        emb = predict_logits(lambda b: self.net_(b)[1], X, self.batchify_)
        return logits, emb

    def predict_proba(self, X) -> np.ndarray:
        logits, _ = self._logits_and_embedding(X)
        return torch.softmax(logits.double(), dim=-1).numpy()

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def transform(self, X) -> np.ndarray:
        """Fused embeddings (pre-softmax, before the final affine layer)."""
        return self._logits_and_embedding(X)[1].numpy()

    def scores(self, X, branch: str = "video", head: ScoreHead | None = None) -> np.ndarray:
        """Scalar ranking scores from a branch's score head (after ranking pretraining)."""
        check_is_fitted(self, "net_")
        head = head or self.score_heads_[branch]
        X = check_multimodal(X)
        return branch_scores(self.net_, branch, head, X, self.batchify_)
