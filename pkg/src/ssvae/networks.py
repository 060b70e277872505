"""3D convolutional encoder, classifier and decoder.

Layout (shapes under the full-scale defaults, input 4x73x94x64)::

    x --B1_e (k7 s4)--> h1 (16 x 19x24x16) --+--> classifier: B2_c, B3_c, B4_c (2 FC) --> logits
                                             |
                                             +--> B2_e --[e]--> B3_e --[e]--> head --> (mu, logvar)

    [z, e] --B1_d--> [., e] --B2_d--> [., e] --B3_d--> [., e] --B4_d--> [., e] --B5_d--> sigmoid

``[., e]`` is concatenation of the label embedding, broadcast over space.
Residual blocks sum a two-convolution branch with a pool (or nearest
neighbour upsampling) + 1x1x1 linear branch that carries no nonlinearity.
"""

from __future__ import annotations

import contextlib
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

from ssvae.distributions import ClassPosterior, GaussianPosterior


def _ceil_div(n: int, k: int) -> int:
    return -(-n // k)


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int] = (73, 94, 64)
    latent_size: int = 32
    class_count: int = 3
    channel_count: int = 4
    embedding_size: int = 16
    encoder_widths: tuple[int, int, int] = (16, 32, 64)
    classifier_widths: tuple[int, int] = (32, 64)
    classifier_hidden: int = 128
    decoder_widths: tuple[int, int, int] = (64, 32, 16)
    dropout: float = 0.2

    def __post_init__(self):
        for name in ("input_shape", "encoder_widths", "classifier_widths", "decoder_widths"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if len(self.input_shape) != 3 or min(self.input_shape) <= 0:
            raise ValueError(f"input_shape must be three positive ints, got {self.input_shape}")
        if len(self.encoder_widths) != 3 or len(self.decoder_widths) != 3 or len(self.classifier_widths) != 2:
            raise ValueError("encoder/decoder take 3 widths, classifier takes 2")
        sizes = {
            "latent_size": self.latent_size,
            "class_count": self.class_count,
            "channel_count": self.channel_count,
            "embedding_size": self.embedding_size,
            "classifier_hidden": self.classifier_hidden,
        }
        for i, w in enumerate(self.encoder_widths + self.classifier_widths + self.decoder_widths):
            sizes[f"width[{i}]"] = w
        for name, v in sizes.items():
            if int(v) <= 0:
                raise ValueError(f"{name} must be positive, got {v}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def feature_shapes(self) -> list[tuple[int, int, int]]:
        """Spatial shapes: input, after B1_e, after B2_e, after B3_e."""
        s0 = self.input_shape
        s1 = tuple(_ceil_div(n, 4) for n in s0)
        s2 = tuple(_ceil_div(n, 2) for n in s1)
        s3 = tuple(_ceil_div(n, 2) for n in s2)
        return [s0, s1, s2, s3]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**dict(d))

    def scaled(self, factor: float) -> "ModelConfig":
        """Same config with every channel width multiplied by ``factor``."""
        s = lambda ws: tuple(max(1, int(round(w * factor))) for w in ws)  # noqa: E731
        return ModelConfig(
            **{
                **asdict(self),
                "encoder_widths": s(self.encoder_widths),
                "classifier_widths": s(self.classifier_widths),
                "decoder_widths": s(self.decoder_widths),
                "classifier_hidden": s((self.classifier_hidden,))[0],
            }
        )


def broadcast_cat(h: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
    """Concatenate embedding ``e`` (B, E) onto feature map ``h`` (B, C, ...) along channels."""
    e = e.reshape(e.shape + (1,) * (h.dim() - 2)).expand(-1, -1, *h.shape[2:])
    return torch.cat([h, e], dim=1)


@contextlib.contextmanager
def _native_conv():
    # the oneDNN kernel for large-kernel strided transposed convs is ~2x slower on CPU
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        with torch.backends.mkldnn.flags(enabled=False):
            yield


class Act(nn.Sequential):
    """SELU followed by dropout, placed after every layer unless noted."""

    def __init__(self, p: float):
        super().__init__(nn.SELU(), nn.Dropout(p))


class DownBlock(nn.Module):
    def __init__(self, cin: int, cout: int, p: float):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, stride=2, padding=1)
        self.act1 = Act(p)
        self.conv2 = nn.Conv3d(cout, cout, 3, stride=1, padding=1)
        self.act2 = Act(p)
        self.linear = nn.Conv3d(cin, cout, 1)

    def forward(self, x):
        main = self.act2(self.conv2(self.act1(self.conv1(x))))
        skip = self.linear(F.adaptive_avg_pool3d(x, main.shape[2:]))
        return main + skip


class UpBlock(nn.Module):
    """Upsampling counterpart of DownBlock; the mid-block conv gets no label embedding."""

    def __init__(self, cin: int, cout: int, p: float):
        super().__init__()
        self.conv1 = nn.ConvTranspose3d(cin, cout, 3, stride=2, padding=1)
        self.act1 = Act(p)
        self.conv2 = nn.Conv3d(cout, cout, 3, stride=1, padding=1)
        self.act2 = Act(p)
        self.linear = nn.Conv3d(cin, cout, 1)

    def forward(self, x, size):
        main = self.act2(self.conv2(self.act1(self.conv1(x, output_size=size))))
        skip = self.linear(F.interpolate(x, size=tuple(size), mode="nearest"))
        return main + skip


class LabelEmbedding(nn.Module):
    """Fully connected map from a (possibly relaxed) one-hot label to R^E, no bias.

    A hard label picks a row of the weight table; a relaxed label gives the
    convex combination of rows it weights.
    """

    def __init__(self, class_count: int, size: int):
        super().__init__()
        self.class_count = class_count
        self.weight = nn.Parameter(torch.randn(class_count, size) / math.sqrt(class_count))

    def forward(self, y: torch.Tensor) -> torch.Tensor:
        if y.dtype in (torch.int64, torch.int32, torch.int16, torch.uint8):
            if y.numel() and (int(y.min()) < 0 or int(y.max()) >= self.class_count):
                raise IndexError(f"class index out of range 0..{self.class_count - 1}")
            return self.weight[y.long()]
        if y.shape[-1] != self.class_count:
            raise ValueError(f"relaxed label has {y.shape[-1]} components, expected {self.class_count}")
        return y @ self.weight


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c1, c2, c3 = cfg.encoder_widths
        e = cfg.embedding_size
        self.b1 = nn.Conv3d(cfg.channel_count, c1, 7, stride=4, padding=3)
        self.b1_act = Act(cfg.dropout)
        self.b2 = DownBlock(c1, c2, cfg.dropout)
        self.b3 = DownBlock(c2 + e, c3, cfg.dropout)
        # final convolution spans the whole bottleneck, emitting mu and logvar
        self.head = nn.Conv3d(c3 + e, 2 * cfg.latent_size, cfg.feature_shapes[3])

    def stem(self, x: torch.Tensor) -> torch.Tensor:
        return self.b1_act(self.b1(x))

    def from_features(self, h1: torch.Tensor, e: torch.Tensor) -> GaussianPosterior:
        h = broadcast_cat(self.b2(h1), e)
        h = broadcast_cat(self.b3(h), e)
        out = self.head(h).flatten(1)
        mu, logvar = out.chunk(2, dim=1)
        return GaussianPosterior(mu, logvar)


class Classifier(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        k2, k3 = cfg.classifier_widths
        self.b2 = DownBlock(cfg.encoder_widths[0], k2, cfg.dropout)
        self.b3 = DownBlock(k2, k3, cfg.dropout)
        self.fc1 = nn.Linear(k3 * math.prod(cfg.feature_shapes[3]), cfg.classifier_hidden)
        self.fc1_act = Act(cfg.dropout)
        self.fc2 = nn.Linear(cfg.classifier_hidden, cfg.class_count)

    def forward(self, h1: torch.Tensor) -> torch.Tensor:
        h = self.b3(self.b2(h1)).flatten(1)
        return self.fc2(self.fc1_act(self.fc1(h)))


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d1, d2, d3 = cfg.decoder_widths
        e = cfg.embedding_size
        self.shapes = cfg.feature_shapes
        self.b1 = nn.ConvTranspose3d(cfg.latent_size + e, d1, self.shapes[3])
        self.b1_act = Act(cfg.dropout)
        self.b2 = nn.Conv3d(d1 + e, d1, 3, padding=1)
        self.b2_act = Act(cfg.dropout)
        self.b3 = UpBlock(d1 + e, d2, cfg.dropout)
        self.b4 = UpBlock(d2 + e, d3, cfg.dropout)
        self.b5 = nn.ConvTranspose3d(d3 + e, cfg.channel_count, 7, stride=4, padding=3)

    def logits(self, z: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        h = torch.cat([z, e], dim=1).reshape(z.shape[0], -1, 1, 1, 1)
        h = self.b1_act(self.b1(h))
        h = self.b2_act(self.b2(broadcast_cat(h, e)))
        h = self.b3(broadcast_cat(h, e), self.shapes[2])
        h = self.b4(broadcast_cat(h, e), self.shapes[1])
        with _native_conv():
            return self.b5(broadcast_cat(h, e), output_size=self.shapes[0])

    def forward(self, z, e):
        return torch.sigmoid(self.logits(z, e))


class SemiSupervisedVAE(nn.Module):
    """Encoder q(z|x,y), classifier q(y|x), decoder p(x|y,z) and the shared label embedding.

    ``theta`` (generative) is the decoder; ``phi`` (variational) is everything else.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embedding = LabelEmbedding(cfg.class_count, cfg.embedding_size)
        self.encoder = Encoder(cfg)
        self.classifier = Classifier(cfg)
        self.decoder = Decoder(cfg)

    def theta(self) -> list[nn.Parameter]:
        return list(self.decoder.parameters())

    def phi(self) -> list[nn.Parameter]:
        return [*self.embedding.parameters(), *self.encoder.parameters(), *self.classifier.parameters()]

    def _check_input(self, x: torch.Tensor) -> None:
        expected = (self.cfg.channel_count, *self.cfg.input_shape)
        if x.dim() != 5 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"expected input of shape (B, {', '.join(map(str, expected))}), got {tuple(x.shape)}")

    def embed_label(self, y: torch.Tensor) -> torch.Tensor:
        return self.embedding(y)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        return self.encoder.stem(x)

    def encode(self, x: torch.Tensor, y_embed: torch.Tensor) -> tuple[GaussianPosterior, torch.Tensor]:
        h1 = self.features(x)
        return self.encoder.from_features(h1, y_embed), h1

    def classify(self, h1: torch.Tensor) -> ClassPosterior:
        expected = (self.cfg.encoder_widths[0], *self.cfg.feature_shapes[1])
        if tuple(h1.shape[1:]) != expected:
            raise ValueError(f"classifier expects features of shape {expected}, got {tuple(h1.shape[1:])}")
        return ClassPosterior(self.classifier(h1))

    def decode(self, z: torch.Tensor, y_embed: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.cfg.latent_size:
            raise ValueError(f"latent vector has length {z.shape[-1]}, expected {self.cfg.latent_size}")
        return self.decoder(z, y_embed)

    def decode_logits(self, z: torch.Tensor, y_embed: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.cfg.latent_size:
            raise ValueError(f"latent vector has length {z.shape[-1]}, expected {self.cfg.latent_size}")
        return self.decoder.logits(z, y_embed)


def count_parameters(cfg: ModelConfig | nn.Module) -> int:
    model = cfg if isinstance(cfg, nn.Module) else SemiSupervisedVAE(cfg)
    return sum(p.numel() for p in model.parameters())


def parameter_checksum(model: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def sample_by_class(model: SemiSupervisedVAE, samples: int, seed: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Decode ``samples`` prior draws of z under every class.

    The same z is reused across classes, so differences within a column come
    from y alone. Returns probabilities (classes, samples, C, d1, d2, d3) and
    the per-voxel argmax label maps (classes, samples, d1, d2, d3).
    """
    if samples < 1:
        raise ValueError("need at least one sample")
    dtype = next(model.parameters()).dtype
    g = torch.Generator().manual_seed(int(seed))
    z = torch.randn(samples, model.cfg.latent_size, generator=g, dtype=dtype)
    was_training = model.training
    model.eval()
    probs = []
    try:
        with torch.no_grad():
            for c in range(model.cfg.class_count):
                y = torch.full((samples,), c, dtype=torch.long)
                probs.append(model.decode(z, model.embed_label(y)))
    finally:
        model.train(was_training)
    probs = torch.stack(probs)
    return probs, probs.argmax(dim=2).to(torch.uint8)
