"""Lipreading-style audio/video network family.

Video stream: 3D conv front-end -> per-frame residual 2D blocks -> temporal
pooling to ``seq_len`` -> bidirectional GRU. Audio stream: residual 1D blocks
over the MFCC sequence -> temporal pooling -> bidirectional GRU. Streams are
concatenated per step ([audio; video] or one block per view) and fused by a
second bidirectional GRU whose final state feeds the classifier.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .manifest import N_CLASSES
from .preprocess import N_MFCC, ViewSpec, get_view


@dataclass(frozen=True)
class ModelConfig:
    video_channels: int = 1
    n_mfcc: int = N_MFCC
    hidden_dim: int = 32
    seq_len: int = 30
    n_classes: int = N_CLASSES
    recurrent_layers: int = 1
    conv_channels: int = 8
    res_blocks: int = 1
    spatial_grid: int = 4
    frame_features: int = 32
    audio_channels: int = 32
    prior_dim: int = 16
    chat_embed_dim: int = 32
    chat_hidden: int = 32
    chat_layers: int = 2

    def __post_init__(self):
        if self.seq_len < 1 or self.hidden_dim < 1:
            raise ValueError("seq_len and hidden_dim must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """Sizes closer to the original lipreading network, for 320x240 RGB input."""
        base = dict(
            video_channels=3,
            hidden_dim=256,
            seq_len=30,
            recurrent_layers=2,
            conv_channels=64,
            res_blocks=4,
            spatial_grid=1,
            frame_features=256,
            audio_channels=256,
            prior_dim=64,
            chat_embed_dim=128,
            chat_hidden=128,
        )
        base.update(overrides)
        return cls(**base)


def zero_biases(module: nn.Module) -> nn.Module:
    with torch.no_grad():
        for name, p in module.named_parameters():
            if "bias" in name:
                p.zero_()
    return module


class ResBlock2d(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return F.relu(x + self.conv2(F.relu(self.conv1(x))))


class ResBlock1d(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        # replicate padding keeps a constant sequence constant at the borders
        self.conv1 = nn.Conv1d(channels, channels, 3, padding=1, padding_mode="replicate")
        self.conv2 = nn.Conv1d(channels, channels, 3, padding=1, padding_mode="replicate")

    def forward(self, x):
        return F.relu(x + self.conv2(F.relu(self.conv1(x))))


class BiGRU(nn.Module):
    """Bidirectional GRU projected back to ``out_dim`` per step."""

    def __init__(self, in_dim: int, hidden: int, layers: int, out_dim: int):
        super().__init__()
        self.gru = nn.GRU(in_dim, hidden, layers, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * hidden, out_dim)

    def forward(self, x):
        out, _ = self.gru(x)
        return self.proj(out)


def temporal_pool(x: torch.Tensor, seq_len: int) -> torch.Tensor:
    """[B, T, D] -> [B, seq_len, D] by adaptive average pooling over time."""
    return F.adaptive_avg_pool1d(x.transpose(1, 2), seq_len).transpose(1, 2)


class VideoBranch(nn.Module):
    """Input [B, C, T, H, W] in roughly [-0.5, 0.5]; output [B, seq_len, hidden_dim]."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        ch = config.conv_channels
        self.seq_len = config.seq_len
        self.frontend = nn.Conv3d(config.video_channels, ch, (3, 5, 5), stride=(1, 2, 2), padding=(1, 2, 2))
        self.resnet = nn.Sequential(*[ResBlock2d(ch) for _ in range(config.res_blocks)])
        self.grid = config.spatial_grid
        self.frame_proj = nn.Linear(ch * config.spatial_grid**2, config.frame_features)
        self.rnn = BiGRU(config.frame_features, config.hidden_dim, config.recurrent_layers, config.hidden_dim)

    def frame_features(self, x: torch.Tensor) -> torch.Tensor:
        """Per-frame features [B, T, frame_features] before temporal pooling."""
        if x.ndim != 5:
            raise ValueError(f"video input must be [B, C, T, H, W], got {tuple(x.shape)}")
        if x.shape[1] != self.frontend.in_channels:
            raise ValueError(f"expected {self.frontend.in_channels} channel(s), got {x.shape[1]}")
        z = F.relu(self.frontend(x))
        b, c, t, h, w = z.shape
        z = z.transpose(1, 2).reshape(b * t, c, h, w)
        z = self.resnet(z)
        z = F.adaptive_avg_pool2d(z, self.grid).reshape(b, t, -1)
        return F.relu(self.frame_proj(z))

    def forward(self, x):
        return self.rnn(temporal_pool(self.frame_features(x), self.seq_len))


class AudioBranch(nn.Module):
    """Input [B, frames, n_mfcc]; output [B, seq_len, hidden_dim]."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        ch = config.audio_channels
        self.seq_len = config.seq_len
        self.n_mfcc = config.n_mfcc
        self.frontend = nn.Conv1d(config.n_mfcc, ch, 3, padding=1, padding_mode="replicate")
        self.resnet = nn.Sequential(*[ResBlock1d(ch) for _ in range(config.res_blocks)])
        self.rnn = BiGRU(ch, config.hidden_dim, config.recurrent_layers, config.hidden_dim)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Pooled convolutional features [B, seq_len, channels] fed to the GRU."""
        if x.ndim != 3 or x.shape[-1] != self.n_mfcc:
            raise ValueError(f"audio input must be [B, frames, {self.n_mfcc}], got {tuple(x.shape)}")
        z = self.resnet(F.relu(self.frontend(x.transpose(1, 2))))
        return temporal_pool(z.transpose(1, 2), self.seq_len)

    def forward(self, x):
        return self.rnn(self.features(x))


class ViewBranch(nn.Module):
    """Video branch restricted to one HUD rectangle of the full frame."""

    def __init__(self, config: ModelConfig, view: ViewSpec):
        super().__init__()
        self.view = view
        self.branch = VideoBranch(config)

    def crop(self, x: torch.Tensor) -> torch.Tensor:
        r0, r1, c0, c1 = self.view.pixel_bounds(x.shape[-2], x.shape[-1])
        if r1 <= r0 or c1 <= c0:
            raise ValueError(f"view {self.view.name!r} has zero area at {x.shape[-1]}x{x.shape[-2]}")
        return x[..., r0:r1, c0:c1]

    def forward(self, x):
        return self.branch(self.crop(x))


class FusionHead(nn.Module):
    """[B, S, in_dim] -> bidirectional GRU -> final states -> logits.

    ``prior_mode`` is None, "before_fc" (prior joins the final state) or
    "before_gru" (prior repeated at every step of the fusion input).
    """

    def __init__(self, in_dim: int, config: ModelConfig, prior_mode: str | None = None):
        super().__init__()
        if prior_mode not in (None, "before_fc", "before_gru"):
            raise ValueError(f"unknown prior_mode {prior_mode!r}")
        self.prior_mode = prior_mode
        self.prior_dim = config.prior_dim if prior_mode else 0
        gru_in = in_dim + (self.prior_dim if prior_mode == "before_gru" else 0)
        self.gru = nn.GRU(gru_in, config.hidden_dim, config.recurrent_layers, batch_first=True, bidirectional=True)
        self.embed_dim = 2 * config.hidden_dim
        fc_in = self.embed_dim + (self.prior_dim if prior_mode == "before_fc" else 0)
        self.fc = nn.Linear(fc_in, config.n_classes)

    def embed(self, steps: torch.Tensor, prior: torch.Tensor | None = None) -> torch.Tensor:
        if self.prior_mode == "before_gru":
            steps = repeat_prior(steps, prior)
        _, h_n = self.gru(steps)
        return torch.cat([h_n[-2], h_n[-1]], dim=-1)

    def classify(self, embedding: torch.Tensor, prior: torch.Tensor | None = None) -> torch.Tensor:
        if self.prior_mode == "before_fc":
            embedding = torch.cat([embedding, prior], dim=-1)
        return self.fc(embedding)

    def forward(self, steps, prior=None):
        if self.prior_mode and prior is None:
            raise ValueError("this head needs a chat prior")
        embedding = self.embed(steps, prior)
        return self.classify(embedding, prior), embedding


def repeat_prior(steps: torch.Tensor, prior: torch.Tensor) -> torch.Tensor:
    """Append the same prior vector to every step: [B, S, D] -> [B, S, D + P]."""
    return torch.cat([steps, prior.unsqueeze(1).expand(-1, steps.shape[1], -1)], dim=-1)


def integrate_prior_before_fc(fc: nn.Linear, fused_embedding: torch.Tensor, prior: torch.Tensor) -> torch.Tensor:
    """Class distribution from an affine layer over [fused embedding; prior]."""
    return F.softmax(fc(torch.cat([fused_embedding, prior], dim=-1)), dim=-1)


def integrate_prior_before_gru(head: FusionHead, v: torch.Tensor, a: torch.Tensor, prior: torch.Tensor) -> torch.Tensor:
    """Class distribution from the fusion GRU over [a_t; v_t; prior] at every step."""
    logits, _ = head(torch.cat([a, v], dim=-1), prior)
    return F.softmax(logits, dim=-1)


STREAM_KINDS = ("audio", "video")


def stream_names_for(variant_streams) -> tuple[str, ...]:
    names = tuple(variant_streams)
    for n in names:
        if n not in STREAM_KINDS and not n.startswith("view:"):
            raise ValueError(f"unknown stream {n!r}")
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate streams in {names}")
    return names


class SkillNet(nn.Module):
    """Multi-stream classifier.

    ``streams`` lists inputs in concatenation order, e.g. ("audio", "video") for
    the audio-visual model, ("video",) for the video-only model, or
    ("view:minimap", ...) for view streams cropped from the full frame.
    """

    def __init__(self, config: ModelConfig, streams=("audio", "video"), prior_mode: str | None = None):
        super().__init__()
        self.config = config
        self.streams = stream_names_for(streams)
        branches = {}
        for name in self.streams:
            if name == "audio":
                branches[name] = AudioBranch(config)
            elif name == "video":
                branches[name] = VideoBranch(config)
            else:
                branches[name] = ViewBranch(config, get_view(name.split(":", 1)[1]))
        self.branches = nn.ModuleDict({_key(n): b for n, b in branches.items()})
        self.head = FusionHead(len(self.streams) * config.hidden_dim, config, prior_mode)

    def branch(self, name: str) -> nn.Module:
        return self.branches[_key(name)]

    def branch_outputs(self, batch: dict) -> dict[str, torch.Tensor]:
        out = {}
        for name in self.streams:
            x = batch["audio"] if name == "audio" else batch["video"]
            out[name] = self.branch(name)(x)
        return out

    def forward(self, batch: dict):
        """Returns (logits, fused embedding, per-stream branch outputs)."""
        outputs = self.branch_outputs(batch)
        steps = torch.cat([outputs[n] for n in self.streams], dim=-1)
        logits, embedding = self.head(steps, batch.get("prior"))
        return logits, embedding, outputs

    def predict_proba(self, batch: dict) -> torch.Tensor:
        return F.softmax(self(batch)[0], dim=-1)


def _key(name: str) -> str:
    return name.replace(":", "__")


class PoolHead(nn.Module):
    """Mean over steps followed by an affine map; the temporary pretraining head."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.fc = nn.Linear(in_dim, out_dim)

    def forward(self, seq):
        return self.fc(seq.mean(dim=1))


class ScoreHead(nn.Module):
    """Scalar skill score from a branch output sequence (mean-pooled)."""

    def __init__(self, hidden_dim: int):
        super().__init__()
        self.fc = nn.Linear(hidden_dim, 1)

    def forward(self, seq):
        return self.fc(seq.mean(dim=1)).squeeze(-1)


# -- chat prior ---------------------------------------------------------------

PAD, UNK = "<pad>", "<unk>"


@dataclass
class Vocabulary:
    """Whitespace, lowercase tokenizer with a min-frequency vocabulary."""

    tokens: list[str] = field(default_factory=lambda: [PAD, UNK])

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @staticmethod
    def tokenize(message: str) -> list[str]:
        return message.lower().split()

    @classmethod
    def build(cls, messages, min_freq: int = 2) -> "Vocabulary":
        counts: dict[str, int] = {}
        for m in messages:
            for tok in cls.tokenize(m):
                counts[tok] = counts.get(tok, 0) + 1
        kept = sorted(t for t, n in counts.items() if n >= min_freq)
        return cls([PAD, UNK, *kept])

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, message: str, max_len: int = 32) -> list[int]:
        ids = [self.index.get(t, 1) for t in self.tokenize(message)][:max_len]
        return ids or [1]

    def batch(self, messages, max_len: int = 32) -> tuple[torch.Tensor, torch.Tensor]:
        encoded = [self.encode(m, max_len) for m in messages]
        lengths = torch.tensor([len(e) for e in encoded])
        ids = torch.zeros(len(encoded), int(lengths.max()) if encoded else 1, dtype=torch.long)
        for i, e in enumerate(encoded):
            ids[i, : len(e)] = torch.tensor(e)
        return ids, lengths


class ChatPriorNet(nn.Module):
    """Token embeddings -> multilayer bidirectional LSTM -> mean-pooled prior -> rank logits."""

    def __init__(self, vocab_size: int, config: ModelConfig):
        super().__init__()
        self.embedding = nn.Embedding(vocab_size, config.chat_embed_dim, padding_idx=0)
        self.lstm = nn.LSTM(
            config.chat_embed_dim, config.chat_hidden, config.chat_layers, batch_first=True, bidirectional=True
        )
        self.to_prior = nn.Linear(2 * config.chat_hidden, config.prior_dim)
        self.null_prior = nn.Parameter(torch.zeros(config.prior_dim))
        self.classifier = nn.Linear(config.prior_dim, config.n_classes)
        self.prior_dim = config.prior_dim

    def message_priors(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """One prior vector per message: [B, L] token ids -> [B, prior_dim]."""
        packed = pack_padded_sequence(self.embedding(ids), lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.lstm(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=ids.shape[1])
        mask = (torch.arange(ids.shape[1])[None, :] < lengths[:, None]).unsqueeze(-1).to(out.dtype)
        pooled = (out * mask).sum(dim=1) / lengths[:, None].to(out.dtype)
        return torch.tanh(self.to_prior(pooled))

    def forward(self, ids, lengths):
        """Per-message (prior, logits)."""
        prior = self.message_priors(ids, lengths)
        return prior, self.classifier(prior)

    def user_prior(self, vocab: Vocabulary, messages, max_messages: int = 256, batch_size: int = 256) -> torch.Tensor:
        """Aggregate prior for one user's chat log: mean over message priors."""
        messages = list(messages)[:max_messages]
        if not messages:
            return self.null_prior
        priors = []
        for i in range(0, len(messages), batch_size):
            ids, lengths = vocab.batch(messages[i : i + batch_size])
            priors.append(self.message_priors(ids, lengths))
        return torch.cat(priors).mean(dim=0)

    def predict_user(self, vocab: Vocabulary, messages, **kwargs):
        """(prior vector, class distribution) for one user's chat log."""
        prior = self.user_prior(vocab, messages, **kwargs)
        return prior, F.softmax(self.classifier(prior), dim=-1)

