"""Raw modality payloads to model-ready arrays.

Frame-rate and resolution reduction, HUD view cropping, center masking,
audio resampling and MFCC extraction. Every operation is pure.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy.fft import dct

logger = logging.getLogger(__name__)

N_MFCC = 20
MFCC_SAMPLE_RATE = 16000


@dataclass(frozen=True, eq=False)
class VideoClip:
    frames: np.ndarray  # [T, H, W, C] uint8
    fps: float

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim == 3:
            frames = frames[..., None]
        if frames.ndim != 4 or frames.shape[-1] not in (1, 3):
            raise ValueError(f"frames must be [T, H, W, C] with C in (1, 3), got {frames.shape}")
        if frames.dtype != np.uint8:
            raise ValueError(f"frames must be uint8, got {frames.dtype}")
        if frames.shape[1] <= 0 or frames.shape[2] <= 0:
            raise ValueError("frame height and width must be positive")
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        object.__setattr__(self, "frames", frames)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.frames.shape

    @property
    def duration_s(self) -> float:
        return self.frames.shape[0] / self.fps


@dataclass(frozen=True, eq=False)
class AudioTrack:
    samples: np.ndarray  # float, nominally in [-1, 1]
    sample_rate: float

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if not np.issubdtype(samples.dtype, np.floating):
            samples = samples.astype(np.float32)
        if samples.ndim != 1:
            raise ValueError("audio samples must be 1-D")
        if not self.sample_rate > 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True, eq=False)
class MfccSequence:
    coeffs: np.ndarray  # [frames, 20]
    frame_hop_s: float

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs)
        if coeffs.ndim != 2 or coeffs.shape[1] != N_MFCC:
            raise ValueError(f"MFCC array must be [frames, {N_MFCC}], got {coeffs.shape}")
        object.__setattr__(self, "coeffs", coeffs)


@dataclass(frozen=True)
class ViewSpec:
    """Named HUD sub-rectangle in fractional frame coordinates (x0, y0, x1, y1)."""

    name: str
    rect: tuple[float, float, float, float]

    def __post_init__(self):
        x0, y0, x1, y1 = (float(v) for v in self.rect)
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise ValueError(f"view {self.name!r}: degenerate or out-of-range rect {self.rect}")
        object.__setattr__(self, "rect", (x0, y0, x1, y1))

    def pixel_bounds(self, height: int, width: int) -> tuple[int, int, int, int]:
        """(row0, row1, col0, col1) at the given resolution."""
        x0, y0, x1, y1 = self.rect
        return (
            math.floor(y0 * height),
            math.floor(y1 * height),
            math.floor(x0 * width),
            math.floor(x1 * width),
        )


DEFAULT_VIEWS: tuple[ViewSpec, ...] = (
    ViewSpec("minimap", (0.00, 0.00, 0.18, 0.24)),
    ViewSpec("top", (0.30, 0.00, 0.70, 0.10)),
    ViewSpec("center", (0.35, 0.30, 0.65, 0.70)),
    ViewSpec("health", (0.00, 0.85, 0.22, 1.00)),
    ViewSpec("guns", (0.75, 0.80, 1.00, 1.00)),
)
VIEWS_BY_NAME = {v.name: v for v in DEFAULT_VIEWS}


def get_view(name: str) -> ViewSpec:
    try:
        return VIEWS_BY_NAME[name]
    except KeyError:
        raise ValueError(f"unknown view {name!r}; known: {sorted(VIEWS_BY_NAME)}") from None


def check_unique_views(views) -> tuple[ViewSpec, ...]:
    views = tuple(views)
    names = [v.name for v in views]
    if len(set(names)) != len(names):
        raise ValueError(f"view names must be unique: {names}")
    return views


# -- video ------------------------------------------------------------------


def downsample_frames(clip: VideoClip, target_fps: float) -> VideoClip:
    """Keep source frame floor(k * fps / target_fps) for each output frame k."""
    if target_fps <= 0:
        raise ValueError("target_fps must be positive")
    if target_fps > clip.fps * (1 + 1e-12):
        raise ValueError(f"cannot upsample from {clip.fps} to {target_fps} FPS")
    ratio = clip.fps / target_fps
    n_src = clip.frames.shape[0]
    n_out = math.floor(n_src / ratio + 1e-9)
    idx = np.floor(np.arange(n_out) * ratio + 1e-9).astype(np.int64)
    return VideoClip(clip.frames[idx], float(target_fps))


def resize_frames(clip: VideoClip, out_w: int, out_h: int) -> VideoClip:
    """Bilinear resize of every frame to out_h x out_w."""
    if out_w <= 0 or out_h <= 0:
        raise ValueError("output size must be positive")
    t, h, w, c = clip.frames.shape
    if (h, w) == (out_h, out_w):
        return VideoClip(clip.frames.copy(), clip.fps)
    out = np.empty((t, out_h, out_w, c), dtype=np.uint8)
    for k in range(t):
        resized = cv2.resize(clip.frames[k], (out_w, out_h), interpolation=cv2.INTER_LINEAR)
        out[k] = resized.reshape(out_h, out_w, c)
    return VideoClip(out, clip.fps)


def extract_view(clip: VideoClip, view: ViewSpec) -> VideoClip:
    _, h, w, _ = clip.frames.shape
    r0, r1, c0, c1 = view.pixel_bounds(h, w)
    if r1 <= r0 or c1 <= c0:
        raise ValueError(f"view {view.name!r} has zero area at {w}x{h}")
    return VideoClip(clip.frames[:, r0:r1, c0:c1, :].copy(), clip.fps)


def center_rect(height: int, width: int, area_fraction: float) -> tuple[int, int, int, int]:
    """(row0, row1, col0, col1) of the centered rectangle kept by the center mask."""
    if not 0.0 < area_fraction <= 1.0:
        raise ValueError("area_fraction must be in (0, 1]")
    scale = math.sqrt(area_fraction)
    kh = min(height, math.floor(height * scale + 1e-9))
    kw = min(width, math.floor(width * scale + 1e-9))
    r0 = (height - kh) // 2
    c0 = (width - kw) // 2
    return r0, r0 + kh, c0, c0 + kw


def apply_center_mask(clip: VideoClip, area_fraction: float = 0.8) -> VideoClip:
    """Zero everything outside a centered rectangle covering ``area_fraction`` of the frame."""
    _, h, w, _ = clip.frames.shape
    r0, r1, c0, c1 = center_rect(h, w, area_fraction)
    out = np.zeros_like(clip.frames)
    out[:, r0:r1, c0:c1, :] = clip.frames[:, r0:r1, c0:c1, :]
    return VideoClip(out, clip.fps)


# -- audio ------------------------------------------------------------------


def resample_audio(track: AudioTrack, target_rate: float) -> AudioTrack:
    """Linear-interpolation resampling."""
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == track.sample_rate:
        return AudioTrack(track.samples.copy(), track.sample_rate)
    n_in = len(track.samples)
    n_out = int(round(n_in * target_rate / track.sample_rate))
    positions = np.arange(n_out, dtype=np.float64) * (track.sample_rate / target_rate)
    out = np.interp(positions, np.arange(n_in, dtype=np.float64), track.samples.astype(np.float64))
    return AudioTrack(out.astype(track.samples.dtype), float(target_rate))


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_filters: int, n_fft: int, sample_rate: float, low_hz: float = 0.0, high_hz: float | None = None) -> np.ndarray:
    """Triangular filters on the mel scale, shape [n_filters, n_fft // 2 + 1]."""
    high_hz = sample_rate / 2 if high_hz is None else high_hz
    mel_points = np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), n_filters + 2)
    bins = np.floor((n_fft + 1) * mel_to_hz(mel_points) / sample_rate).astype(int)
    fb = np.zeros((n_filters, n_fft // 2 + 1))
    for j in range(n_filters):
        left, center, right = bins[j], bins[j + 1], bins[j + 2]
        for i in range(left, center):
            fb[j, i] = (i - left) / max(center - left, 1)
        for i in range(center, right):
            fb[j, i] = (right - i) / max(right - center, 1)
    return fb


def compute_mfcc(
    track: AudioTrack,
    n_coeffs: int = N_MFCC,
    frame_len_s: float = 0.025,
    hop_s: float = 0.010,
    n_filters: int = 26,
    log_floor: float = 1e-10,
) -> MfccSequence:
    """Hamming-windowed power spectrum -> mel filter bank -> log -> DCT-II (orthonormal)."""
    if not frame_len_s >= hop_s > 0:
        raise ValueError("need frame_len_s >= hop_s > 0")
    if track.sample_rate != MFCC_SAMPLE_RATE:
        logger.warning("MFCC expects %d Hz audio, got %s Hz", MFCC_SAMPLE_RATE, track.sample_rate)
    sr = track.sample_rate
    frame_len = int(round(frame_len_s * sr))
    hop = int(round(hop_s * sr))
    signal = np.asarray(track.samples, dtype=np.float64)
    if len(signal) < frame_len:
        raise ValueError(f"track of {len(signal)} samples is shorter than one {frame_len}-sample frame")
    n_frames = 1 + (len(signal) - frame_len) // hop
    n_fft = 1 << max(0, (frame_len - 1).bit_length())

    frames = np.lib.stride_tricks.sliding_window_view(signal, frame_len)[::hop][:n_frames]
    frames = frames * np.hamming(frame_len)
    power = np.abs(np.fft.rfft(frames, n_fft)) ** 2 / n_fft
    energies = power @ mel_filterbank(n_filters, n_fft, sr).T
    log_energies = np.log(np.maximum(energies, log_floor))
    coeffs = dct(log_energies, type=2, axis=1, norm="ortho")[:, :n_coeffs]
    return MfccSequence(coeffs.astype(np.float32), hop / sr)


# -- binary array storage -----------------------------------------------------


def save_array(path, array: np.ndarray, **meta) -> Path:
    """Write ``array`` as a flat binary file plus a sidecar JSON descriptor."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = np.ascontiguousarray(array)
    path.write_bytes(array.tobytes())
    descriptor = {"shape": list(array.shape), "dtype": array.dtype.str, **meta}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(descriptor, sort_keys=True))
    return path


def load_array(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    descriptor = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    array = np.frombuffer(path.read_bytes(), dtype=np.dtype(descriptor["dtype"]))
    return array.reshape(descriptor["shape"]).copy(), descriptor


def save_video(path, clip: VideoClip) -> Path:
    return save_array(path, clip.frames, fps=clip.fps)


def load_video(path) -> VideoClip:
    frames, desc = load_array(path)
    return VideoClip(frames, float(desc["fps"]))


def save_audio(path, track: AudioTrack) -> Path:
    return save_array(path, track.samples.astype(np.float32), sample_rate=track.sample_rate)


def load_audio(path) -> AudioTrack:
    samples, desc = load_array(path)
    return AudioTrack(samples, float(desc["sample_rate"]))


def cache_key(sample_id: str, chain: list) -> str:
    """Content hash of (sample id, operation chain with parameters)."""
    payload = json.dumps({"sample_id": sample_id, "chain": chain}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:24]


# -- per-sample pipeline ------------------------------------------------------


@dataclass(frozen=True)
class PreprocessConfig:
    target_fps: float | None = None  # None keeps native rate
    frame_size: tuple[int, int] | None = None  # (width, height); None keeps native size
    grayscale: bool = False
    audio_rate: float = MFCC_SAMPLE_RATE
    n_mfcc: int = N_MFCC
    mfcc_frame_s: float = 0.025
    mfcc_hop_s: float = 0.010

    def video_chain(self) -> list:
        chain = []
        if self.target_fps is not None:
            chain.append(["downsample_frames", self.target_fps])
        if self.frame_size is not None:
            chain.append(["resize_frames", list(self.frame_size)])
        if self.grayscale:
            chain.append(["grayscale"])
        return chain

    def audio_chain(self) -> list:
        return [
            ["resample_audio", self.audio_rate],
            ["compute_mfcc", self.n_mfcc, self.mfcc_frame_s, self.mfcc_hop_s],
        ]


def to_grayscale(clip: VideoClip) -> VideoClip:
    if clip.frames.shape[-1] == 1:
        return clip
    weights = np.array([0.299, 0.587, 0.114])
    gray = np.clip(np.rint(clip.frames.astype(np.float64) @ weights), 0, 255).astype(np.uint8)
    return VideoClip(gray[..., None], clip.fps)


def preprocess_video(clip: VideoClip, config: PreprocessConfig) -> VideoClip:
    if config.target_fps is not None and config.target_fps < clip.fps:
        clip = downsample_frames(clip, config.target_fps)
    if config.frame_size is not None:
        clip = resize_frames(clip, *config.frame_size)
    if config.grayscale:
        clip = to_grayscale(clip)
    return clip


def preprocess_audio(track: AudioTrack, config: PreprocessConfig) -> MfccSequence:
    track = resample_audio(track, config.audio_rate)
    return compute_mfcc(track, config.n_mfcc, config.mfcc_frame_s, config.mfcc_hop_s)


@dataclass
class PreprocessCache:
    """Directory of preprocessed arrays keyed by ``cache_key``."""

    root: Path
    config: PreprocessConfig = field(default_factory=PreprocessConfig)

    def __post_init__(self):
        self.root = Path(self.root)

    def _path(self, sample_id: str, modality: str, chain: list) -> Path:
        return self.root / modality / f"{cache_key(sample_id, [modality, *chain])}.bin"

    def video(self, record) -> np.ndarray:
        path = self._path(record.sample_id, "video", self.config.video_chain())
        if path.exists():
            return load_array(path)[0]
        clip = preprocess_video(load_video(record.video_path), self.config)
        save_array(path, clip.frames, fps=clip.fps, sample_id=record.sample_id)
        return clip.frames

    def mfcc(self, record) -> np.ndarray:
        path = self._path(record.sample_id, "audio", self.config.audio_chain())
        if path.exists():
            return load_array(path)[0]
        seq = preprocess_audio(load_audio(record.audio_path), self.config)
        save_array(path, seq.coeffs, hop_s=seq.frame_hop_s, sample_id=record.sample_id)
        return seq.coeffs
