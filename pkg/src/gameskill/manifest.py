"""Cleaned-dataset data model: sample records, chat logs, game-type filtering.

Manifest files are UTF-8 JSON-lines, one record per line::

    {"sample_id": "u001_v00", "user_id": "u001", "game_type": "CSGO", "rank": "A",
     "video_path": "video/u001_v00.bin", "audio_path": "audio/u001_v00.bin",
     "duration_s": 10.0, "native_fps": 1.6}

Chat files are JSON-lines with ``user_id`` and ``messages``.
"""

from __future__ import annotations

import enum
import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

MANIFEST_FIELDS = (
    "sample_id",
    "user_id",
    "game_type",
    "rank",
    "video_path",
    "audio_path",
    "duration_s",
    "native_fps",
)


class ManifestError(ValueError):
    """Raised for malformed manifest or chat files."""


class RankSection(enum.IntEnum):
    """Skill tier, A best. The integer value is the class index."""

    A = 0
    B = 1
    C = 2
    D = 3

    @classmethod
    def parse(cls, value) -> "RankSection":
        if isinstance(value, RankSection):
            return value
        if isinstance(value, str):
            try:
                return cls[value.strip().upper()]
            except KeyError:
                raise ValueError(f"unknown rank section {value!r}") from None
        return cls(int(value))


N_CLASSES = len(RankSection)


class GameType(str, enum.Enum):
    CSGO = "CSGO"
    NON_GAME = "NON_GAME"
    FPS_OTHER = "FPS_OTHER"
    OTHER_GAME = "OTHER_GAME"


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    user_id: str
    game_type: GameType
    rank: RankSection
    video_path: Path
    audio_path: Path
    duration_s: float
    native_fps: float

    def __post_init__(self):
        if not self.sample_id:
            raise ManifestError("sample_id must be non-empty")
        if not self.duration_s > 0:
            raise ManifestError(f"{self.sample_id}: duration_s must be > 0")
        if not self.native_fps > 0:
            raise ManifestError(f"{self.sample_id}: native_fps must be > 0")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "SampleRecord":
        missing = [k for k in MANIFEST_FIELDS if k not in d]
        if missing:
            raise ManifestError(f"missing fields {missing}")
        extra = sorted(set(d) - set(MANIFEST_FIELDS))
        if extra:
            raise ManifestError(f"unexpected fields {extra}")
        video_path, audio_path = Path(d["video_path"]), Path(d["audio_path"])
        if base_dir is not None:
            video_path = base_dir / video_path
            audio_path = base_dir / audio_path
        return cls(
            sample_id=str(d["sample_id"]),
            user_id=str(d["user_id"]),
            game_type=GameType(d["game_type"]),
            rank=RankSection.parse(d["rank"]),
            video_path=video_path,
            audio_path=audio_path,
            duration_s=float(d["duration_s"]),
            native_fps=float(d["native_fps"]),
        )

    def to_dict(self, base_dir: Path | None = None) -> dict:
        d = asdict(self)
        d["game_type"] = self.game_type.value
        d["rank"] = self.rank.name
        for key in ("video_path", "audio_path"):
            p = Path(d[key])
            if base_dir is not None:
                try:
                    p = p.relative_to(base_dir)
                except ValueError:
                    pass
            d[key] = p.as_posix()
        return d


@dataclass(frozen=True)
class ChatLog:
    user_id: str
    messages: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))


@dataclass(frozen=True)
class Manifest:
    records: tuple[SampleRecord, ...] = ()
    chats: dict[str, ChatLog] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        seen = set()
        for rec in self.records:
            if rec.sample_id in seen:
                raise ManifestError(f"duplicate sample_id {rec.sample_id!r}")
            seen.add(rec.sample_id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def user_ids(self) -> set[str]:
        return {r.user_id for r in self.records}

    @property
    def orphan_chat_users(self) -> set[str]:
        """Users with chats but no videos; retained, not dropped."""
        return set(self.chats) - self.user_ids

    def by_id(self) -> dict[str, SampleRecord]:
        return {r.sample_id: r for r in self.records}


def _read_jsonl(path: Path):
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc


def load_chats(path) -> dict[str, ChatLog]:
    path = Path(path)
    chats: dict[str, ChatLog] = {}
    for lineno, obj in _read_jsonl(path):
        if not isinstance(obj, dict) or "user_id" not in obj or "messages" not in obj:
            raise ManifestError(f"{path}:{lineno}: chat line needs user_id and messages")
        uid = str(obj["user_id"])
        if uid in chats:
            raise ManifestError(f"{path}:{lineno}: duplicate chat user_id {uid!r}")
        chats[uid] = ChatLog(uid, tuple(str(m) for m in obj["messages"]))
    return chats


def load_manifest(path, chats_path=None) -> Manifest:
    """Load a JSON-lines manifest; paths inside are resolved against its directory.

    When ``chats_path`` is None, a sibling ``chats.jsonl`` is picked up if present.
    """
    path = Path(path)
    base_dir = path.parent
    records = []
    seen: dict[str, int] = {}
    for lineno, obj in _read_jsonl(path):
        if not isinstance(obj, dict):
            raise ManifestError(f"{path}:{lineno}: expected a JSON object")
        try:
            rec = SampleRecord.from_dict(obj, base_dir)
        except (ManifestError, ValueError) as exc:
            raise ManifestError(f"{path}:{lineno}: {exc}") from exc
        if rec.sample_id in seen:
            raise ManifestError(
                f"{path}:{lineno}: duplicate sample_id {rec.sample_id!r} "
                f"(first seen on line {seen[rec.sample_id]})"
            )
        seen[rec.sample_id] = lineno
        records.append(rec)

    if chats_path is None and (base_dir / "chats.jsonl").exists():
        chats_path = base_dir / "chats.jsonl"
    chats = load_chats(chats_path) if chats_path is not None else {}
    manifest = Manifest(tuple(records), chats)
    orphans = manifest.orphan_chat_users
    if orphans:
        logger.warning("%d chat log(s) without videos retained: %s", len(orphans), sorted(orphans)[:5])
    return manifest


def write_manifest(manifest: Manifest, path, chats_path=None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for rec in manifest.records:
            f.write(json.dumps(rec.to_dict(path.parent), sort_keys=True) + "\n")
    if manifest.chats:
        chats_path = Path(chats_path) if chats_path else path.parent / "chats.jsonl"
        with open(chats_path, "w", encoding="utf-8") as f:
            for uid in sorted(manifest.chats):
                log = manifest.chats[uid]
                f.write(json.dumps({"user_id": uid, "messages": list(log.messages)}) + "\n")


def filter_game(manifest: Manifest, game: GameType | str) -> Manifest:
    game = GameType(game)
    records = tuple(r for r in manifest.records if r.game_type is game)
    users = {r.user_id for r in records}
    chats = {u: c for u, c in manifest.chats.items() if u in users}
    return Manifest(records, chats)


@dataclass(frozen=True)
class RankStats:
    counts: dict[RankSection, int]
    fractions: dict[RankSection, float]
    total: int

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "counts": {r.name: n for r, n in self.counts.items()},
            "fractions": {r.name: f for r, f in self.fractions.items()},
        }


def rank_stats(manifest: Manifest) -> RankStats:
    counter = Counter(r.rank for r in manifest.records)
    total = len(manifest.records)
    counts = {r: counter.get(r, 0) for r in RankSection}
    fractions = {r: (n / total if total else 0.0) for r, n in counts.items()}
    return RankStats(counts, fractions, total)
