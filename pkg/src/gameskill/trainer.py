"""Training loops: unimodal pretraining, ranking pretraining, joint fine-tuning, chat prior."""

from __future__ import annotations

import copy
import csv
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .evaluator import evaluate
from .losses import (
    KlLossConfig,
    PairBatch,
    RankingLossConfig,
    cross_entropy,
    inverse_frequency_weights,
    kl_alignment_loss,
    pairwise_ranking_loss,
)
from .manifest import N_CLASSES
from .model import ChatPriorNet, ModelConfig, PoolHead, ScoreHead, SkillNet, Vocabulary

logger = logging.getLogger(__name__)

CLASS_WEIGHTING = ("none", "weighted_ce", "upsample")
STEP_LOG_FIELDS = ("step", "epoch", "phase", "loss_ce", "loss_kl", "loss_rank", "learning_rate")
EPOCH_LOG_FIELDS = ("epoch", "phase", "train_loss", "val_weighted_precision", "val_weighted_recall", "val_weighted_f1")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 8
    epochs: int = 30
    pretrain_epochs: int = 0
    ranking_epochs: int = 0
    patience: int = 10
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    kl: KlLossConfig | None = None
    ranking: RankingLossConfig | None = None
    class_weighting: str = "none"
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.class_weighting not in CLASS_WEIGHTING:
            raise ValueError(
                f"class_weighting must be one of {CLASS_WEIGHTING}; weighted CE and upsampling are alternatives"
            )


# -- batches --------------------------------------------------------------------


@dataclass
class Batchifier:
    """Turns raw arrays into model-ready tensors.

    Video: uint8 [N, T, H, W, C] -> float [N, C, T, H, W] centered on 0.
    Audio: MFCC [N, F, 20] standardized per coefficient with training statistics.
    """

    mfcc_mean: np.ndarray | None = None
    mfcc_scale: np.ndarray | None = None

    @classmethod
    def fit(cls, X: dict) -> "Batchifier":
        if X.get("audio") is None:
            return cls()
        audio = np.asarray(X["audio"], dtype=np.float64)
        mean = audio.mean(axis=(0, 1))
        scale = audio.std(axis=(0, 1))
        scale[scale < 1e-8] = 1.0
        return cls(mean.astype(np.float32), scale.astype(np.float32))

    def __call__(self, X: dict, idx=None) -> dict:
        idx = slice(None) if idx is None else np.asarray(idx)
        out = {}
        if X.get("video") is not None:
            v = torch.from_numpy(np.ascontiguousarray(X["video"][idx])).float()
            out["video"] = v.permute(0, 4, 1, 2, 3) / 255.0 - 0.5
        if X.get("audio") is not None:
            a = np.asarray(X["audio"][idx], dtype=np.float32)
            if self.mfcc_mean is not None:
                a = (a - self.mfcc_mean) / self.mfcc_scale
            out["audio"] = torch.from_numpy(np.ascontiguousarray(a))
        if X.get("prior") is not None:
            out["prior"] = torch.as_tensor(np.asarray(X["prior"][idx]), dtype=torch.float32)
        return out


def n_samples(X: dict) -> int:
    for value in X.values():
        if value is not None:
            return len(value)
    raise ValueError("empty input")


def iterate_minibatches(indices: np.ndarray, batch_size: int, rng: np.random.Generator):
    order = np.asarray(indices)[rng.permutation(len(indices))]
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def upsample_minority(ids, ranks, seed: int = 0) -> list:
    """Resample every class with replacement up to the majority-class count; shuffled under ``seed``.

    The majority class keeps each of its items exactly once.
    """
    ids = list(ids)
    labels = np.asarray([int(r) for r in ranks])
    if len(ids) != len(labels):
        raise ValueError("ids and ranks differ in length")
    if not ids:
        return []
    rng = np.random.default_rng(seed)
    classes = sorted(set(labels.tolist()))
    if len(classes) == 1:
        return ids
    target = max(int((labels == c).sum()) for c in classes)
    out = []
    for c in classes:
        members = [i for i, lab in zip(ids, labels) if lab == c]
        if len(members) == target:
            out.extend(members)
        else:
            extra = rng.choice(len(members), size=target - len(members), replace=True)
            out.extend(members + [members[k] for k in extra])
    return [out[k] for k in rng.permutation(len(out))]


# -- logging ---------------------------------------------------------------------


@dataclass
class TrainLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def step(self, **row):
        row.setdefault("step", len(self.steps))
        self.steps.append(row)

    def write(self, run_dir) -> None:
        run_dir = Path(run_dir)
        _write_csv(run_dir / "log.csv", STEP_LOG_FIELDS, self.steps)
        _write_csv(run_dir / "metrics_epoch.csv", EPOCH_LOG_FIELDS, self.epochs)


def _write_csv(path: Path, fields, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(fields), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _check_finite(loss: torch.Tensor, step: int, **components) -> None:
    if not torch.isfinite(loss):
        parts = ", ".join(f"{k}={(v.item() if torch.is_tensor(v) else float(v)):.6g}" for k, v in components.items())
        raise TrainingError(f"non-finite loss at step {step}: {parts}")


def _adam(params, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=config.learning_rate, betas=config.betas, eps=config.eps)


def _class_weights(labels: np.ndarray, config: TrainConfig):
    if config.class_weighting != "weighted_ce":
        return None
    counts = np.bincount(labels, minlength=N_CLASSES)
    counts = np.maximum(counts, 1)
    return torch.as_tensor(inverse_frequency_weights(counts), dtype=torch.float32)


def _train_indices(labels: np.ndarray, config: TrainConfig) -> np.ndarray:
    idx = np.arange(len(labels))
    if config.class_weighting == "upsample":
        idx = np.asarray(upsample_minority(idx, labels[idx], config.seed))
    return idx


@torch.no_grad()
def predict_logits(fn, X: dict, batchify: Batchifier, batch_size: int = 64) -> torch.Tensor:
    outs = []
    n = n_samples(X)
    for start in range(0, n, batch_size):
        outs.append(fn(batchify(X, np.arange(start, min(n, start + batch_size)))))
    return torch.cat(outs)


def _val_report(fn, X_val, y_val, batchify):
    logits = predict_logits(fn, X_val, batchify)
    return evaluate(y_val, logits.argmax(dim=-1).numpy())


# -- joint training ----------------------------------------------------------------


@dataclass
class FitResult:
    best_epoch: int
    best_val_f1: float
    log: TrainLog
    last_state: dict | None = None


def _train_classifier(
    module: nn.Module,
    params,
    forward,
    X: dict,
    y: np.ndarray,
    config: TrainConfig,
    batchify: Batchifier,
    epochs: int,
    phase: str,
    log: TrainLog,
    X_val: dict | None = None,
    y_val: np.ndarray | None = None,
    extra_loss=None,
) -> FitResult:
    """Generic CE training loop with best-VAL-F1 checkpoint selection.

    ``forward(batch) -> (logits, aux)``; ``extra_loss(aux) -> (loss, kl_value)``.
    The best state is loaded back into ``module`` before returning.
    """
    rng = np.random.default_rng([config.seed, _phase_id(phase)])
    params = [p for p in params if p.requires_grad]
    opt = _adam(params, config)
    weights = _class_weights(y, config)
    train_idx = _train_indices(y, config)
    y_t = torch.as_tensor(y, dtype=torch.long)
    has_val = X_val is not None and y_val is not None and len(y_val) > 0
    best_f1, best_epoch, best_state, since_best = -1.0, -1, copy.deepcopy(module.state_dict()), 0

    for epoch in range(epochs):
        module.train()
        total, count = 0.0, 0
        for idx in iterate_minibatches(train_idx, config.batch_size, rng):
            batch = batchify(X, idx)
            logits, aux = forward(batch)
            probs = F.softmax(logits, dim=-1)
            loss_ce = cross_entropy(probs, y_t[idx], weights=weights)
            loss_kl = torch.zeros(())
            if extra_loss is not None:
                loss_kl = extra_loss(aux)
            loss = loss_ce + loss_kl
            _check_finite(loss, len(log.steps), loss_ce=loss_ce, loss_kl=loss_kl)
            opt.zero_grad()
            loss.backward()
            opt.step()
            log.step(epoch=epoch, phase=phase, loss_ce=loss_ce.item(), loss_kl=loss_kl.item(), loss_rank=0.0,
                     learning_rate=config.learning_rate)
            total += loss.item() * len(idx)
            count += len(idx)

        module.eval()
        if has_val:
            report = _val_report(lambda b: forward(b)[0], X_val, y_val, batchify)
        else:
            report = _val_report(lambda b: forward(b)[0], X, y, batchify)
        row = {
            "epoch": epoch,
            "phase": phase,
            "train_loss": total / max(count, 1),
            "val_weighted_precision": report.weighted_precision,
            "val_weighted_recall": report.weighted_recall,
            "val_weighted_f1": report.weighted_f1,
        }
        log.epochs.append(row)
        if report.weighted_f1 > best_f1:
            best_f1, best_epoch, since_best = report.weighted_f1, epoch, 0
            best_state = copy.deepcopy(module.state_dict())
        else:
            since_best += 1
            if config.patience and since_best >= config.patience:
                break

    last_state = copy.deepcopy(module.state_dict())
    module.load_state_dict(best_state)
    module.eval()
    return FitResult(best_epoch, best_f1, log, last_state)


def _phase_id(phase: str) -> int:
    return zlib.crc32(phase.encode())


def train_joint(
    net: SkillNet,
    X: dict,
    y,
    config: TrainConfig,
    batchify: Batchifier,
    X_val: dict | None = None,
    y_val=None,
    log: TrainLog | None = None,
    trainable=None,
) -> FitResult:
    """Cross-entropy on the fused output, plus scale * KL(video || audio) when ``config.kl`` is set.

    The KL term reaches only the audio branch. ``trainable`` restricts the
    optimized parameters (defaults to all of ``net``).
    """
    log = log if log is not None else TrainLog()
    y = np.asarray(y, dtype=np.int64)
    extra = None
    if config.kl is not None and config.kl.scale > 0:
        if not {"audio", "video"} <= set(net.streams):
            raise ValueError("KL alignment needs both audio and video streams")
        kl_cfg = config.kl

        def extra(outputs):
            return kl_alignment_loss(outputs["video"], outputs["audio"], kl_cfg)

    def forward(batch):
        logits, _, outputs = net(batch)
        return logits, outputs

    params = list(net.parameters()) if trainable is None else list(trainable)
    return _train_classifier(net, params, forward, X, y, config, batchify, config.epochs, "joint", log,
                             X_val, None if y_val is None else np.asarray(y_val, dtype=np.int64), extra)


def kl_only_step(net: SkillNet, X: dict, config: TrainConfig, batchify: Batchifier) -> None:
    """One Adam step on the KL alignment loss alone (gradient-routing audit)."""
    kl_cfg = config.kl or KlLossConfig()
    opt = _adam(net.parameters(), config)
    batch = batchify(X, np.arange(min(config.batch_size, n_samples(X))))
    outputs = net.branch_outputs(batch)
    loss = kl_alignment_loss(outputs["video"], outputs["audio"], kl_cfg)
    opt.zero_grad()
    loss.backward()
    opt.step()


def pretrain_unimodal(
    net: SkillNet,
    branch: str,
    X: dict,
    y,
    config: TrainConfig,
    batchify: Batchifier,
    X_val: dict | None = None,
    y_val=None,
    log: TrainLog | None = None,
    epochs: int | None = None,
) -> FitResult:
    """Train one branch with a temporary pooled classification head; updates the branch in place."""
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise TrainingError("empty TRAIN subset")
    log = log if log is not None else TrainLog()
    module = net.branch(branch)
    head = PoolHead(net.config.hidden_dim, net.config.n_classes)
    wrapper = nn.ModuleDict({"branch": module, "head": head})
    key = "audio" if branch == "audio" else "video"

    def forward(batch):
        return head(module(batch[key])), None

    epochs = config.pretrain_epochs if epochs is None else epochs
    return _train_classifier(wrapper, wrapper.parameters(), forward, X, y, config, batchify, epochs,
                             f"pretrain_{branch}", log, X_val,
                             None if y_val is None else np.asarray(y_val, dtype=np.int64))


def pretrain_ranking(
    net: SkillNet,
    branch: str,
    pairs: PairBatch,
    X: dict,
    ids,
    config: TrainConfig,
    batchify: Batchifier,
    score_head: ScoreHead | None = None,
    log: TrainLog | None = None,
    epochs: int | None = None,
) -> ScoreHead:
    """Train one branch plus a scalar score head on the pairwise ranking loss.

    ``ids`` maps row positions of ``X`` to the sample ids used in ``pairs``.
    """
    if not len(pairs):
        raise TrainingError("empty pair batch")
    log = log if log is not None else TrainLog()
    ranking = config.ranking or RankingLossConfig()
    module = net.branch(branch)
    head = score_head if score_head is not None else ScoreHead(net.config.hidden_dim)
    key = "audio" if branch == "audio" else "video"
    pos = {sid: i for i, sid in enumerate(ids)}
    first = np.array([pos[a] for a, _, _ in pairs.pairs])
    second = np.array([pos[b] for _, b, _ in pairs.pairs])
    labels = torch.tensor([y for _, _, y in pairs.pairs], dtype=torch.float32)
    opt = _adam(list(module.parameters()) + list(head.parameters()), config)
    rng = np.random.default_rng([config.seed, _phase_id(f"rank_{branch}")])
    epochs = config.ranking_epochs if epochs is None else epochs
    pair_batch = max(1, config.batch_size)

    for epoch in range(epochs):
        module.train()
        for sel in iterate_minibatches(np.arange(len(labels)), pair_batch, rng):
            rows = np.unique(np.concatenate([first[sel], second[sel]]))
            where = {r: k for k, r in enumerate(rows)}
            scores = head(module(batchify(X, rows)[key]))
            s1 = scores[[where[r] for r in first[sel]]]
            s2 = scores[[where[r] for r in second[sel]]]
            loss = pairwise_ranking_loss(s1, s2, labels[sel], ranking.margin).mean()
            _check_finite(loss, len(log.steps), loss_rank=loss)
            opt.zero_grad()
            loss.backward()
            opt.step()
            log.step(epoch=epoch, phase=f"rank_{branch}", loss_ce=0.0, loss_kl=0.0, loss_rank=loss.item(),
                     learning_rate=config.learning_rate)
    module.eval()
    return head


@torch.no_grad()
def branch_scores(net: SkillNet, branch: str, head: ScoreHead, X: dict, batchify: Batchifier) -> np.ndarray:
    key = "audio" if branch == "audio" else "video"
    module = net.branch(branch)
    module.eval()
    return predict_logits(lambda b: head(module(b[key])), X, batchify).numpy()


# -- chat prior ----------------------------------------------------------------------


@dataclass(frozen=True)
class ChatTrainConfig:
    learning_rate: float = 3e-3
    batch_size: int = 64
    epochs: int = 5
    min_freq: int = 2
    max_len: int = 32
    max_messages_per_user: int = 200
    seed: int = 0


def train_chat_prior(messages, labels, model_config: ModelConfig, config: ChatTrainConfig,
                     val_messages=None, val_labels=None, log: TrainLog | None = None):
    """Message-level rank classifier whose pooled state is the chat prior.

    Returns (net, vocab, FitResult).
    """
    messages = list(messages)
    labels = np.asarray(labels, dtype=np.int64)
    if not messages:
        raise TrainingError("no chat messages to train on")
    torch.manual_seed(config.seed)
    vocab = Vocabulary.build(messages, config.min_freq)
    net = ChatPriorNet(len(vocab), model_config)
    ids, lengths = vocab.batch(messages, config.max_len)
    X = {"ids": ids, "lengths": lengths}
    tcfg = TrainConfig(learning_rate=config.learning_rate, batch_size=config.batch_size, epochs=config.epochs,
                       patience=0, seed=config.seed)

    def batchify(data, idx=None):
        idx = slice(None) if idx is None else torch.as_tensor(np.asarray(idx))
        return {"ids": data["ids"][idx], "lengths": data["lengths"][idx]}

    def forward(batch):
        return net(batch["ids"], batch["lengths"])[1], None

    X_val = None
    if val_messages is not None and len(val_messages):
        v_ids, v_len = vocab.batch(list(val_messages), config.max_len)
        X_val = {"ids": v_ids, "lengths": v_len}
    fit = _train_classifier(net, net.parameters(), forward, X, labels, tcfg, batchify, config.epochs,
                            "chat", log if log is not None else TrainLog(), X_val,
                            None if val_labels is None else np.asarray(val_labels, dtype=np.int64))
    return net, vocab, fit


@torch.no_grad()
def predict_chat(net: ChatPriorNet, vocab: Vocabulary, messages, max_len: int = 32, batch_size: int = 256) -> np.ndarray:
    net.eval()
    preds = []
    messages = list(messages)
    for i in range(0, len(messages), batch_size):
        ids, lengths = vocab.batch(messages[i : i + batch_size], max_len)
        preds.append(net(ids, lengths)[1].argmax(dim=-1))
    return torch.cat(preds).numpy() if preds else np.zeros(0, dtype=np.int64)


@torch.no_grad()
def user_priors(net: ChatPriorNet, vocab: Vocabulary, chats: dict, user_ids, max_messages: int = 200) -> np.ndarray:
    """Prior vector per entry of ``user_ids``; users without chat get the null prior."""
    net.eval()
    cache: dict[str, np.ndarray] = {}
    rows = []
    for uid in user_ids:
        if uid not in cache:
            log = chats.get(uid)
            msgs = log.messages if log is not None else ()
            cache[uid] = net.user_prior(vocab, msgs, max_messages=max_messages).numpy().copy()
        rows.append(cache[uid])
    return np.stack(rows).astype(np.float32)
