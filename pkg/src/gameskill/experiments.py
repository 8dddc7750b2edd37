"""Experiment matrix: named variants, layered configuration, content-addressed run directories."""

from __future__ import annotations

import ast
import configparser
import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .estimators import CenterMasker, SkillClassifier
from .evaluator import MetricsReport, evaluate, export_embeddings, majority_baseline, save_confusion_csv
from .manifest import N_CLASSES, Manifest
from .model import ModelConfig
from .preprocess import PreprocessCache, PreprocessConfig
from .splitter import SplitAssignment, SplitMode, Subset, make_split, verify_split
from .synthgen import SynthConfig
from .trainer import Batchifier, ChatTrainConfig, predict_chat, train_chat_prior, user_priors

logger = logging.getLogger(__name__)

VIEW_NAMES = ("minimap", "top", "center", "health", "guns")


@dataclass(frozen=True)
class Variant:
    name: str
    label: str
    streams: tuple[str, ...] = ("audio", "video")
    mask: bool = False
    kl: bool = False
    ranking: bool = False
    prior_mode: str | None = None


VARIANTS: dict[str, Variant] = {
    v.name: v
    for v in (
        Variant("LR", "LR"),
        Variant("LRV", "LRV", streams=("video",)),
        Variant("LRA", "LRA", streams=("audio",)),
        Variant("LR_KL", "LR+KL", kl=True),
        Variant("LR_rank", "LR+ranking loss", ranking=True),
        Variant("LR_mask", "LR+mask", mask=True),
        Variant("LR_text_fc", "LR+text before FC", prior_mode="before_fc"),
        Variant("LR_text_gru", "LR+text before GRU", prior_mode="before_gru"),
        *(Variant(f"view:{n}", f"{n.capitalize()} View", streams=(f"view:{n}",)) for n in VIEW_NAMES),
        Variant("multiview", "Multiview", streams=tuple(f"view:{n}" for n in VIEW_NAMES)),
    )
}


def get_variant(name: str) -> Variant:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; choose from {list(VARIANTS)}") from None


# -- configuration ---------------------------------------------------------------


@dataclass(frozen=True)
class SplitSettings:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    mask_area: float = 0.8


@dataclass(frozen=True)
class TrainSettings:
    learning_rate: float = 1e-3
    kl_learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 30
    pretrain_epochs: int = 0
    patience: int = 10
    kl_scale: float = 1.0
    kl_temperature: float = 1.0
    ranking_epochs: int = 5
    margin: float = 0.2
    pair_subsample: float = 0.1
    class_weighting: str = "none"
    seed: int = 0


SECTIONS = {
    "synth": SynthConfig,
    "preprocess": PreprocessConfig,
    "split": SplitSettings,
    "model": ModelConfig,
    "train": TrainSettings,
    "chat": ChatTrainConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    split: SplitSettings = field(default_factory=SplitSettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    chat: ChatTrainConfig = field(default_factory=ChatTrainConfig)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        unknown = set(obj) - set(SECTIONS)
        if unknown:
            raise ValueError(f"unknown config section(s) {sorted(unknown)}")
        parts = {}
        for name, klass in SECTIONS.items():
            values = dict(obj.get(name, {}))
            known = {f.name for f in dataclasses.fields(klass)}
            bad = set(values) - known
            if bad:
                raise ValueError(f"unknown key(s) {sorted(bad)} in section [{name}]")
            parts[name] = klass(**{k: _freeze(v) for k, v in values.items()})
        return cls(**parts)

    def with_overrides(self, overrides) -> "ExperimentConfig":
        """Apply ``section.key=value`` strings."""
        obj = self.to_dict()
        for item in overrides or ():
            key, sep, raw = item.partition("=")
            section, dot, name = key.strip().partition(".")
            if not sep or not dot:
                raise ValueError(f"override {item!r} must look like section.key=value")
            if section not in obj or name not in obj[section]:
                raise ValueError(f"override {item!r} names no existing config key")
            obj[section][name] = parse_value(raw.strip())
        return ExperimentConfig.from_dict(obj)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.with_overrides([f"{s}.seed={seed}" for s in ("synth", "split", "train", "chat")])

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def save(self, path) -> None:
        parser = configparser.ConfigParser()
        for section, values in self.to_dict().items():
            parser[section] = {k: repr(_freeze(v)) for k, v in values.items()}
        with open(path, "w") as f:
            parser.write(f)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file {path} not found")
        parser = configparser.ConfigParser()
        parser.read(path)
        obj = {s: {k: parse_value(v) for k, v in parser[s].items()} for s in parser.sections()}
        return cls.from_dict(obj)


def parse_value(raw: str):
    """Python literal if it parses as one, else the raw string."""
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def _freeze(value):
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


# -- data assembly ------------------------------------------------------------------


@dataclass
class Dataset:
    ids: list[str]
    user_ids: list[str]
    labels: np.ndarray
    video: np.ndarray | None
    audio: np.ndarray | None

    def position(self) -> dict[str, int]:
        return {sid: i for i, sid in enumerate(self.ids)}


def load_dataset(manifest: Manifest, config: ExperimentConfig, cache_dir, need_video=True, need_audio=True) -> Dataset:
    cache = PreprocessCache(Path(cache_dir), config.preprocess)
    records = manifest.records
    video = np.stack([cache.video(r) for r in records]) if need_video else None
    audio = np.stack([cache.mfcc(r) for r in records]) if need_audio else None
    return Dataset(
        ids=[r.sample_id for r in records],
        user_ids=[r.user_id for r in records],
        labels=np.array([int(r.rank) for r in records], dtype=np.int64),
        video=video,
        audio=audio,
    )


def _subset_rows(split, dataset: Dataset, subset: Subset) -> np.ndarray:
    pos = dataset.position()
    return np.array([pos[sid] for sid in split.ids(subset)], dtype=np.int64)


def _chat_messages(manifest: Manifest, users, ranks: dict, cap: int):
    messages, labels = [], []
    for uid in sorted(users):
        log = manifest.chats.get(uid)
        if log is None:
            continue
        msgs = list(log.messages)[:cap]
        messages.extend(msgs)
        labels.extend([int(ranks[uid])] * len(msgs))
    return messages, np.array(labels, dtype=np.int64)


def chat_prior_features(manifest: Manifest, split, dataset: Dataset, config: ExperimentConfig):
    """Train the chat prior on TRAIN users' messages; return (per-sample priors, chat-only metrics)."""
    ranks = {r.user_id: r.rank for r in manifest.records}
    by_subset = {}
    for subset in Subset:
        rows = _subset_rows(split, dataset, subset)
        by_subset[subset] = {dataset.user_ids[i] for i in rows}
    cap = config.chat.max_messages_per_user
    train_msgs, train_y = _chat_messages(manifest, by_subset[Subset.TRAIN], ranks, cap)
    # in a video-based split a user can appear in several subsets; keep held-out chat to unseen users
    val_users = by_subset[Subset.VAL] - by_subset[Subset.TRAIN]
    test_users = by_subset[Subset.TEST] - by_subset[Subset.TRAIN]
    val_msgs, val_y = _chat_messages(manifest, val_users, ranks, cap)
    net, vocab, _ = train_chat_prior(train_msgs, train_y, config.model, config.chat, val_msgs, val_y)
    priors = user_priors(net, vocab, manifest.chats, dataset.user_ids, max_messages=cap)
    chat_only = None
    test_msgs, test_y = _chat_messages(manifest, test_users, ranks, cap)
    if len(test_msgs):
        report = evaluate(test_y, predict_chat(net, vocab, test_msgs, config.chat.max_len))
        chat_only = {
            "test": report.to_json(),
            "majority_baseline": majority_baseline(train_y, test_y).to_json(),
            "n_test_messages": len(test_msgs),
        }
    return priors, chat_only


# -- running -----------------------------------------------------------------------


@dataclass
class RunResult:
    run_dir: Path
    report: MetricsReport | None
    metrics: dict


def run_id(variant: Variant, split_mode: SplitMode, config: ExperimentConfig, manifest: Manifest) -> str:
    payload = {
        "variant": variant.name,
        "split_mode": split_mode.value,
        "config": config.to_dict(),
        "manifest": sorted(r.sample_id for r in manifest.records),
    }
    slug = variant.name.replace(":", "-")
    return f"{slug}_{split_mode.value.lower()}_{config_hash(payload)[:12]}"


@dataclass
class RunInputs:
    X: dict
    rows: dict
    labels: np.ndarray
    dataset: Dataset
    chat_only: dict | None

    def take(self, idx) -> dict:
        return {k: v[idx] for k, v in self.X.items()}


def assemble_inputs(variant: Variant, split, manifest: Manifest, config: ExperimentConfig, cache_dir=None,
                    dataset: Dataset | None = None) -> RunInputs:
    """Model inputs for every sample plus per-subset row indices."""
    uses_video = any(s != "audio" for s in variant.streams)
    uses_audio = "audio" in variant.streams
    if dataset is None:
        if cache_dir is None:
            cache_dir = Path(manifest.records[0].video_path).parent.parent / "cache"
        dataset = load_dataset(manifest, config, cache_dir, uses_video, uses_audio)
    X = {}
    if uses_video:
        X["video"] = CenterMasker(config.split.mask_area).transform(dataset.video) if variant.mask else dataset.video
    if uses_audio:
        X["audio"] = dataset.audio
    chat_only = None
    if variant.prior_mode:
        X["prior"], chat_only = chat_prior_features(manifest, split, dataset, config)
    rows = {s: _subset_rows(split, dataset, s) for s in Subset}
    return RunInputs(X, rows, dataset.labels, dataset, chat_only)


def build_classifier(variant: Variant, config: ExperimentConfig) -> SkillClassifier:
    t = config.train
    return SkillClassifier(
        streams=variant.streams,
        prior_mode=variant.prior_mode,
        model_config=config.model,
        learning_rate=t.kl_learning_rate if variant.kl else t.learning_rate,
        batch_size=t.batch_size,
        epochs=t.epochs,
        pretrain_epochs=t.pretrain_epochs,
        patience=t.patience,
        kl_scale=t.kl_scale if variant.kl else 0.0,
        kl_temperature=t.kl_temperature,
        ranking_epochs=t.ranking_epochs if variant.ranking else 0,
        margin=t.margin,
        pair_subsample=t.pair_subsample,
        class_weighting=t.class_weighting,
        seed=t.seed,
    )


def run_experiment(
    variant: Variant | str,
    split_mode: SplitMode | str,
    manifest: Manifest,
    config: ExperimentConfig,
    runs_root,
    cache_dir=None,
    dataset: Dataset | None = None,
    force: bool = False,
) -> RunResult:
    """Split, train, evaluate on TEST and write a run directory; an existing finished run is reused."""
    variant = get_variant(variant) if isinstance(variant, str) else variant
    split_mode = SplitMode(split_mode)
    run_dir = Path(runs_root) / run_id(variant, split_mode, config, manifest)
    metrics_path = run_dir / "metrics.json"
    if metrics_path.exists() and not force:
        logger.info("reusing finished run %s", run_dir)
        return RunResult(run_dir, None, json.loads(metrics_path.read_text()))
    run_dir.mkdir(parents=True, exist_ok=True)
    config.save(run_dir / "config.ini")
    (run_dir / "config.json").write_text(
        json.dumps({"variant": variant.name, "split_mode": split_mode.value, **config.to_dict()}, indent=1,
                   sort_keys=True, default=str)
    )

    split = make_split(manifest, split_mode, config.split.ratios, config.split.seed)
    split.save(run_dir / "split.json")
    split_report = verify_split(split, manifest)

    inputs = assemble_inputs(variant, split, manifest, config, cache_dir, dataset)
    X_all, rows, y, dataset = inputs.X, inputs.rows, inputs.labels, inputs.dataset
    take = inputs.take
    clf = build_classifier(variant, config)
    clf.fit(take(rows[Subset.TRAIN]), y[rows[Subset.TRAIN]], take(rows[Subset.VAL]), y[rows[Subset.VAL]])

    test = rows[Subset.TEST]
    report = evaluate(y[test], clf.predict(take(test)))
    clf.log_.write(run_dir)
    save_checkpoint(clf.net_.state_dict(), run_dir / "checkpoints" / "best.bin", config.to_dict())
    save_checkpoint(clf.last_state_, run_dir / "checkpoints" / "last.bin", config.to_dict())
    save_confusion_csv(report.confusion, run_dir / "confusion.csv")
    export_embeddings(
        clf,
        take(test),
        run_dir / "embeddings.csv",
        labels=y[test],
        user_ids=[dataset.user_ids[i] for i in test],
        sample_ids=[dataset.ids[i] for i in test],
    )
    metrics = {
        "variant": variant.name,
        "label": variant.label,
        "split_mode": split_mode.value,
        "config_hash": config.hash(),
        "test": report.to_json(),
        "majority_baseline": majority_baseline(y[rows[Subset.TRAIN]], y[test]).to_json(),
        "best_epoch": clf.best_epoch_,
        "best_val_f1": clf.best_val_f1_,
        "sizes": {s.value: int(len(r)) for s, r in rows.items()},
        "split_check": split_report.as_dict(),
    }
    if inputs.chat_only is not None:
        metrics["chat_only"] = inputs.chat_only
    metrics_path.write_text(json.dumps(metrics, indent=1, sort_keys=True, default=str))
    return RunResult(run_dir, report, metrics)


def load_run(run_dir) -> tuple[Variant, SplitMode, ExperimentConfig]:
    run_dir = Path(run_dir)
    meta = json.loads((run_dir / "config.json").read_text())
    return get_variant(meta["variant"]), SplitMode(meta["split_mode"]), ExperimentConfig.load(run_dir / "config.ini")


def evaluate_run(run_dir, manifest: Manifest, cache_dir=None, subset: Subset | str = Subset.TEST,
                 checkpoint: str = "best") -> MetricsReport:
    """Rebuild a finished run's network from its checkpoint and score one subset."""
    run_dir = Path(run_dir)
    variant, _, config = load_run(run_dir)
    split = SplitAssignment.load(run_dir / "split.json")
    inputs = assemble_inputs(variant, split, manifest, config, cache_dir)
    train = inputs.take(inputs.rows[Subset.TRAIN])
    clf = build_classifier(variant, config)
    clf.classes_ = np.arange(N_CLASSES)
    clf.batchify_ = Batchifier.fit(train)
    clf.net_ = clf._build(train)
    load_checkpoint(clf.net_, run_dir / "checkpoints" / f"{checkpoint}.bin")
    rows = inputs.rows[Subset(subset)]
    return evaluate(inputs.labels[rows], clf.predict(inputs.take(rows)))


# -- reporting ---------------------------------------------------------------------


REPORT_FIELDS = ("Model", "Precision", "Recall", "F1", "split_mode", "variant", "run_dir")


def row_label(label: str, split_mode: str) -> str:
    return f"{label} (video based)" if split_mode == SplitMode.VIDEO_BASED.value else label


def collect_report(run_dirs, out_csv) -> list[dict]:
    """Merge run directories into one table: majority baselines first, then one row per run."""
    rows, baselines = [], {}
    for d in run_dirs:
        d = Path(d)
        metrics_path = d / "metrics.json"
        if not metrics_path.exists():
            raise FileNotFoundError(f"{d} has no metrics.json")
        m = json.loads(metrics_path.read_text())
        baselines.setdefault(m["split_mode"], m["majority_baseline"])
        rows.append(_row(row_label(m["label"], m["split_mode"]), m["test"], m["split_mode"], m["variant"], str(d)))
    table = [
        _row(row_label("Majority Class", mode), b, mode, "majority", "")
        for mode, b in sorted(baselines.items(), key=lambda kv: kv[0] != SplitMode.USER_BASED.value)
    ] + rows
    with open(out_csv, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(REPORT_FIELDS))
        writer.writeheader()
        writer.writerows(table)
    return table


def _row(label, metrics, split_mode, variant, run_dir) -> dict:
    return {
        "Model": label,
        "Precision": f"{metrics['weighted_precision']:.3f}",
        "Recall": f"{metrics['weighted_recall']:.3f}",
        "F1": f"{metrics['weighted_f1']:.3f}",
        "split_mode": split_mode,
        "variant": variant,
        "run_dir": run_dir,
    }
