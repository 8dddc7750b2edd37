import json
import warnings

import numpy as np
import pytest

from gameskill.manifest import GameType, Manifest, RankSection, SampleRecord

REFERENCE_COUNTS = {"A": 906, "B": 315, "C": 208, "D": 191}


def make_record(sid, uid="u0", rank="A", game=GameType.CSGO):
    return SampleRecord(
        sample_id=sid,
        user_id=uid,
        game_type=GameType(game),
        rank=RankSection.parse(rank),
        video_path=f"video/{sid}.bin",
        audio_path=f"audio/{sid}.bin",
        duration_s=300.0,
        native_fps=10.0,
    )


def record_line(sid, uid="u0", rank="A", game="CSGO"):
    return json.dumps(
        {
            "sample_id": sid,
            "user_id": uid,
            "game_type": game,
            "rank": rank,
            "video_path": f"video/{sid}.bin",
            "audio_path": f"audio/{sid}.bin",
            "duration_s": 300.0,
            "native_fps": 10.0,
        }
    )


def reference_manifest(n_users_per_class=(150, 52, 35, 31), seed=0) -> Manifest:
    """1620 CS:GO videos with the reference class counts (906/315/208/191); videos spread over users of one rank each."""
    rng = np.random.default_rng(seed)
    records = []
    uid = 0
    for (rank, total), n_users in zip(REFERENCE_COUNTS.items(), n_users_per_class):
        # random positive composition of `total` into `n_users` parts
        cuts = np.sort(rng.choice(np.arange(1, total), size=n_users - 1, replace=False))
        sizes = np.diff(np.concatenate([[0], cuts, [total]]))
        for size in sizes:
            for k in range(int(size)):
                records.append(make_record(f"u{uid:03d}_v{k:03d}", f"u{uid:03d}", rank))
            uid += 1
    return Manifest(tuple(records))


@pytest.fixture
def quiet_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


TINY_OVERRIDES = [
    "synth.n_users=12",
    "synth.videos_per_user=(2, 3)",
    "synth.audio_seconds=2.0",
    "synth.n_frames=8",
    "synth.chat_messages=(5, 40)",
    "model.hidden_dim=8",
    "model.conv_channels=4",
    "model.frame_features=8",
    "model.audio_channels=8",
    "model.seq_len=6",
    "train.epochs=2",
    "train.ranking_epochs=1",
    "chat.epochs=1",
    "chat.min_freq=1",
]


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """A 12-user corpus rendered once and shared, with its experiment config."""
    from gameskill.experiments import ExperimentConfig
    from gameskill.synthgen import generate_corpus

    config = ExperimentConfig().with_overrides(TINY_OVERRIDES)
    root = tmp_path_factory.mktemp("tiny")
    corpus = generate_corpus(config.synth, root / "corpus")
    return corpus, config
