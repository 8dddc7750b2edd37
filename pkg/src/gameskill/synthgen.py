"""Synthetic streaming corpus with planted rank signals and user-identity watermarks.

Rank signals live inside the health and guns HUD rectangles (restricted to the
part kept by a 0.8 center mask); the identity watermark lives only in the edge
band that the 0.8 center mask removes. Audio carries rank-dependent tone-burst
rates, chat carries rank-dependent token frequencies.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .manifest import ChatLog, GameType, Manifest, RankSection, SampleRecord, write_manifest
from .preprocess import AudioTrack, VideoClip, center_rect, get_view, save_audio, save_video
from .splitter import largest_remainder

MASK_AREA = 0.8
HEALTH_DECAY = (0.2, 0.4, 0.6, 0.8)  # per rank, A..D: fraction of health lost by the last frame
BLINK_FREQ = (0.40, 0.30, 0.20, 0.10)  # cycles per frame
BURSTS_PER_10S = (12.0, 9.0, 6.0, 3.0)
BURST_S = 0.1
BURST_SLOT_S = 0.25
BASE_PITCH_HZ = 440.0

NEUTRAL_TOKENS = tuple(f"w{i:02d}" for i in range(40))
SKILL_TOKEN = "clutch"
SKILL_TOKEN_P = (0.20, 0.12, 0.06, 0.02)
RANK_TOKENS = tuple(tuple(f"{r.name.lower()}tag{k}" for k in range(4)) for r in RankSection)
RANK_TOKEN_P = 0.3


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 60
    videos_per_user: tuple[int, int] = (3, 8)
    rank_fractions: tuple[float, float, float, float] = (0.56, 0.19, 0.13, 0.12)
    frame_size: tuple[int, int] = (32, 32)  # (H, W)
    n_frames: int = 16
    channels: int = 1
    audio_seconds: float = 10.0
    sample_rate: int = 16000
    watermark_strength: float = 1.0
    rank_signal_strength: float = 0.3
    audio_identity_strength: float = 0.0
    chat_signal_strength: float | None = None  # None: same as rank_signal_strength
    chat_imbalance: bool = True
    chat_messages: tuple[int, int] = (5, 1000)
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fr = tuple(float(f) for f in self.rank_fractions)
        if len(fr) != 4 or abs(sum(fr) - 1.0) > 1e-9 or min(fr) < 0:
            raise ValueError("rank_fractions must be 4 non-negative numbers summing to 1")
        for name in ("watermark_strength", "rank_signal_strength", "audio_identity_strength"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.chat_signal_strength is not None and not 0.0 <= self.chat_signal_strength <= 1.0:
            raise ValueError("chat_signal_strength must be in [0, 1]")
        lo, hi = self.videos_per_user
        if lo < 0 or hi < lo:
            raise ValueError("videos_per_user must be a (min, max) range")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        object.__setattr__(self, "rank_fractions", fr)
        object.__setattr__(self, "videos_per_user", (int(lo), int(hi)))
        object.__setattr__(self, "frame_size", tuple(int(v) for v in self.frame_size))
        object.__setattr__(self, "chat_messages", tuple(int(v) for v in self.chat_messages))

    @property
    def chat_strength(self) -> float:
        return self.rank_signal_strength if self.chat_signal_strength is None else self.chat_signal_strength

    @property
    def fps(self) -> float:
        return self.n_frames / self.audio_seconds

    def to_dict(self) -> dict:
        return asdict(self)


def _stable_int(*parts) -> int:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _rng(*parts) -> np.random.Generator:
    return np.random.default_rng(_stable_int(*parts))


def assign_ranks(config: SynthConfig) -> dict[str, RankSection]:
    """Quota-based user->rank assignment; every class gets at least one user."""
    if config.n_users < 4:
        raise ValueError("need at least 4 users (one per class)")
    counts = largest_remainder(config.n_users, config.rank_fractions)
    for k in range(4):
        while counts[k] == 0:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[k] += 1
    labels = np.repeat(np.arange(4), counts)
    labels = labels[np.random.default_rng([config.seed, 1]).permutation(config.n_users)]
    return {user_id(i): RankSection(int(r)) for i, r in enumerate(labels)}


def user_id(i: int) -> str:
    return f"u{i:03d}"


def _signal_region(view_name: str, h: int, w: int) -> tuple[int, int, int, int]:
    """View rectangle intersected with the part kept by the 0.8 center mask."""
    r0, r1, c0, c1 = get_view(view_name).pixel_bounds(h, w)
    k0, k1, q0, q1 = center_rect(h, w, MASK_AREA)
    rr0, rr1, cc0, cc1 = max(r0, k0), min(r1, k1), max(c0, q0), min(c1, q1)
    if rr1 <= rr0 or cc1 <= cc0:
        raise ValueError(f"{view_name} view does not survive the center mask at {w}x{h}")
    return rr0, rr1, cc0, cc1


def edge_band_mask(h: int, w: int) -> np.ndarray:
    """Boolean [H, W] mask of pixels zeroed by the 0.8 center mask."""
    r0, r1, c0, c1 = center_rect(h, w, MASK_AREA)
    band = np.ones((h, w), dtype=bool)
    band[r0:r1, c0:c1] = False
    return band


def watermark_pattern(uid: str, config: SynthConfig) -> np.ndarray:
    """Per-user texture [T, H, W] in {-1, 0, +1}: nonzero only in the edge band."""
    h, w = config.frame_size
    rng = _rng("watermark", uid)
    texture = rng.choice([-1.0, 1.0], size=(h, w))
    signs = rng.choice([-1.0, 1.0], size=config.n_frames)
    return signs[:, None, None] * (texture * edge_band_mask(h, w))[None]


def render_video(uid: str, rank, config: SynthConfig, video_index: int = 0) -> VideoClip:
    rank = RankSection.parse(rank)
    h, w = config.frame_size
    if h < 16 or w < 16:
        raise ValueError("frames must be at least 16x16 to hold the HUD views")
    t_n = config.n_frames
    rng = _rng("video", config.seed, uid, video_index)
    s = config.rank_signal_strength
    canvas = 0.5 + config.noise_std * rng.standard_normal((t_n, h, w))
    t = np.arange(t_n) / max(t_n - 1, 1)

    # health bar: loses a rank-dependent fraction of its value over the clip
    decay = s * HEALTH_DECAY[rank] + (1 - s) * rng.uniform(HEALTH_DECAY[0], HEALTH_DECAY[-1])
    level = 1.0 - decay * t
    r0, r1, c0, c1 = _signal_region("health", h, w)
    canvas[:, r0:r1, c0:c1] += (0.4 * s * (level - 0.5))[:, None, None]

    # weapon slot: blinks at a rank-dependent frequency
    freq = s * BLINK_FREQ[rank] + (1 - s) * rng.uniform(BLINK_FREQ[-1], BLINK_FREQ[0])
    phase = rng.uniform(0, 2 * np.pi)
    blink = np.where(np.sin(2 * np.pi * freq * np.arange(t_n) + phase) >= 0, 0.5, -0.5)
    r0, r1, c0, c1 = _signal_region("guns", h, w)
    canvas[:, r0:r1, c0:c1] += (0.4 * s * blink)[:, None, None]

    canvas += 0.4 * config.watermark_strength * watermark_pattern(uid, config)
    frames = np.clip(np.rint(canvas * 255), 0, 255).astype(np.uint8)
    frames = np.repeat(frames[..., None], config.channels, axis=-1)
    return VideoClip(frames, config.fps)


def user_pitch(uid: str, config: SynthConfig) -> float:
    u = _stable_int("pitch", uid) / 2**64
    return BASE_PITCH_HZ * (1.0 + 0.5 * config.audio_identity_strength * u)


def burst_onsets(uid: str, rank, config: SynthConfig, video_index: int = 0) -> np.ndarray:
    """Onset times (s) of the tone bursts in one clip."""
    rank = RankSection.parse(rank)
    rng = _rng("bursts", config.seed, uid, video_index)
    s = config.rank_signal_strength
    rate = s * BURSTS_PER_10S[rank] + (1 - s) * rng.uniform(BURSTS_PER_10S[-1], BURSTS_PER_10S[0])
    n_slots = int(config.audio_seconds / BURST_SLOT_S)
    n = min(n_slots, int(round(rate * config.audio_seconds / 10.0)))
    return np.sort(rng.choice(n_slots, size=n, replace=False)) * BURST_SLOT_S


def render_audio(uid: str, rank, config: SynthConfig, video_index: int = 0) -> AudioTrack:
    sr = config.sample_rate
    n = int(round(config.audio_seconds * sr))
    rng = _rng("audio", config.seed, uid, video_index)
    samples = config.noise_std * rng.standard_normal(n)
    amp = 0.5 * config.rank_signal_strength
    if amp > 0:
        burst_len = int(round(BURST_S * sr))
        tt = np.arange(burst_len) / sr
        tone = amp * np.hanning(burst_len) * np.sin(2 * np.pi * user_pitch(uid, config) * tt)
        for onset in burst_onsets(uid, rank, config, video_index):
            i = int(round(onset * sr))
            samples[i : i + burst_len] += tone[: n - i]
    return AudioTrack(np.clip(samples, -1.0, 1.0).astype(np.float32), float(sr))


def chat_message_counts(config: SynthConfig) -> dict[str, int]:
    lo, hi = config.chat_messages
    rng = np.random.default_rng([config.seed, 2])
    if config.chat_imbalance and config.n_users > 1:
        logs = np.linspace(math.log10(lo), math.log10(hi), config.n_users)[rng.permutation(config.n_users)]
        counts = np.rint(10**logs).astype(int)
    else:
        counts = np.full(config.n_users, int(round(math.sqrt(lo * hi))))
    return {user_id(i): int(c) for i, c in enumerate(counts)}


def render_chat(uid: str, rank, config: SynthConfig, n_messages: int | None = None) -> ChatLog:
    rank = RankSection.parse(rank)
    if n_messages is None:
        n_messages = chat_message_counts(config).get(uid, config.chat_messages[0])
    rng = _rng("chat", config.seed, uid)
    s = config.chat_strength
    p_skill = s * SKILL_TOKEN_P[rank]
    p_rank = s * RANK_TOKEN_P
    messages = []
    for _ in range(n_messages):
        length = int(rng.integers(3, 11))
        u = rng.random(length)
        toks = []
        for ui in u:
            if ui < p_skill:
                toks.append(SKILL_TOKEN)
            elif ui < p_skill + p_rank:
                toks.append(RANK_TOKENS[rank][int(rng.integers(4))])
            else:
                toks.append(NEUTRAL_TOKENS[int(rng.integers(len(NEUTRAL_TOKENS)))])
        messages.append(" ".join(toks))
    return ChatLog(uid, tuple(messages))


@dataclass
class Corpus:
    manifest: Manifest
    root: Path
    config: SynthConfig = field(default_factory=SynthConfig)

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.jsonl"


def generate_corpus(config: SynthConfig, out_dir) -> Corpus:
    """Render every user's videos, audio and chat under ``out_dir`` and write the manifest."""
    lo, hi = config.videos_per_user
    if hi == 0:
        raise ValueError("infeasible config: zero videos per user")
    root = Path(out_dir)
    ranks = assign_ranks(config)
    counts_rng = np.random.default_rng([config.seed, 3])
    n_videos = {uid: int(counts_rng.integers(max(lo, 1), hi + 1)) for uid in ranks}
    msg_counts = chat_message_counts(config)

    records, chats = [], {}
    for uid, rank in ranks.items():
        for k in range(n_videos[uid]):
            sid = f"{uid}_v{k:02d}"
            video_path = save_video(root / "video" / f"{sid}.bin", render_video(uid, rank, config, k))
            audio_path = save_audio(root / "audio" / f"{sid}.bin", render_audio(uid, rank, config, k))
            records.append(
                SampleRecord(
                    sample_id=sid,
                    user_id=uid,
                    game_type=GameType.CSGO,
                    rank=rank,
                    video_path=video_path,
                    audio_path=audio_path,
                    duration_s=config.audio_seconds,
                    native_fps=config.fps,
                )
            )
        chats[uid] = render_chat(uid, rank, config, msg_counts[uid])

    manifest = Manifest(tuple(records), chats)
    write_manifest(manifest, root / "manifest.jsonl")
    (root / "synth_config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True))
    return Corpus(manifest, root, config)
