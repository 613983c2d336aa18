"""TAFM-Net assembly: separable-conv encoder, attention bottleneck, focal-modulated
skips and the upsampling decoder with residual or dense connections."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .attention import AttentionConfig, SelfAwareAttention
from .exceptions import FormatError, InvalidConfig, InvalidThreshold, ShapeMismatch
from .focalmod import FocalModConfig, FocalModulation
from .layers import BatchNorm2d, Conv2d, Layer, Pointwise, SeparableConv2d
from .tensorcore import Tensor


@dataclass
class ModelConfig:
    input_size: int = 64
    stage_widths: Sequence[int] = field(default_factory=lambda: (16, 32, 64, 128, 256))
    connection_mode: str = "residual"
    dropout_rate: float = 0.5
    heads: int = 4
    pos_channels: int | None = None
    focal_levels: int = 2
    focal_kernel_sizes: Sequence[int] = field(default_factory=lambda: (3, 5))
    use_attention: bool = True
    use_focal: bool = True
    seed: int = 0

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        self.focal_kernel_sizes = tuple(int(k) for k in self.focal_kernel_sizes)
        n = len(self.stage_widths)
        if n < 1:
            raise InvalidConfig("need at least one encoder stage")
        if self.input_size % (2**n):
            raise InvalidConfig(f"input_size {self.input_size} not divisible by 2^{n}")
        if any(b < a for a, b in zip(self.stage_widths, self.stage_widths[1:])):
            raise InvalidConfig("stage_widths must be nondecreasing")
        if self.connection_mode not in ("residual", "dense"):
            raise InvalidConfig(f"unknown connection_mode {self.connection_mode!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidConfig("dropout_rate must lie in [0, 1)")

    @property
    def depth(self) -> int:
        return len(self.stage_widths)

    @property
    def bottleneck_size(self) -> int:
        return self.input_size // 2**self.depth

    def attention_config(self) -> AttentionConfig:
        s = self.bottleneck_size
        return AttentionConfig(s, s, self.stage_widths[-1], self.heads, self.pos_channels,
                               enabled=self.use_attention)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        d["focal_kernel_sizes"] = list(self.focal_kernel_sizes)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()


class EncoderStage(Layer):
    """Two separable conv + BN + ReLU layers, then a stride-2 conv."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv1 = SeparableConv2d(c_in, c_out, 3, rng)
        self.bn1 = BatchNorm2d(c_out)
        self.conv2 = SeparableConv2d(c_out, c_out, 3, rng)
        self.bn2 = BatchNorm2d(c_out)
        self.down = Conv2d(c_out, c_out, 3, rng, stride=2)

    def __call__(self, x: Tensor, mode: str) -> tuple[Tensor, Tensor]:
        h = tc.relu(self.bn1(self.conv1(x), mode))
        skip = tc.relu(self.bn2(self.conv2(h), mode))
        return self.down(skip), skip


def _upsample_n(x: Tensor, times: int) -> Tensor:
    for _ in range(times):
        x = tc.bilinear_upsample2x(x)
    return x


class DecoderBlock(Layer):
    """``concat(BN(ReLU(DWSC(Dropout(concat(B(F_k), FM(S_k)))))), [dense...], Reshape(F_k))``."""

    def __init__(self, c_in: int, c_skip: int, c_out: int, rng: np.random.Generator,
                 dropout_rate: float, focal: FocalModConfig | None,
                 prior_channels: Sequence[int] = ()):
        self.focal = FocalModulation(focal, rng) if focal is not None else None
        self.conv = SeparableConv2d(c_in + c_skip, c_out, 3, rng)
        self.bn = BatchNorm2d(c_out)
        self.reshape = Pointwise(c_in, c_out, rng)
        self.reshape_bn = BatchNorm2d(c_out)
        self.dense = [Pointwise(c, c_out, rng) for c in prior_channels]
        self.dense_bn = [BatchNorm2d(c_out) for _ in prior_channels]
        self.dropout_rate = dropout_rate
        self.c_out = c_out

    @property
    def out_channels(self) -> int:
        return self.c_out * (2 + len(self.dense))

    def __call__(self, f_k: Tensor, s_k: Tensor, mode: str, rng: np.random.Generator | None,
                 prior_outputs: Sequence[Tensor] = ()) -> Tensor:
        up = tc.bilinear_upsample2x(f_k)
        if up.shape[-3:-1] != s_k.shape[-3:-1]:
            raise ShapeMismatch(f"upsampled {up.shape} does not match skip {s_k.shape}")
        if len(prior_outputs) != len(self.dense):
            raise ShapeMismatch(f"block expects {len(self.dense)} prior outputs, "
                                f"got {len(prior_outputs)}")
        skip = self.focal(s_k) if self.focal is not None else s_k
        z = tc.concat_channels([up, skip])
        z = tc.dropout(z, self.dropout_rate, mode, rng)
        z = self.bn(tc.relu(self.conv(z)), mode)
        target = up.shape[-3]
        parts = [z]
        for proj, bn, prev in zip(self.dense, self.dense_bn, prior_outputs):
            times = int(round(np.log2(target / prev.shape[-3])))
            parts.append(bn(_upsample_n(proj(prev), times), mode))
        # projecting before upsampling: both maps are linear, so they commute.
        # The shortcut is normalised too; unnormalised it compounds block to block.
        parts.append(self.reshape_bn(tc.bilinear_upsample2x(self.reshape(f_k)), mode))
        return tc.concat_channels(parts)


class TAFMNet(Layer):
    def __init__(self, cfg: ModelConfig | None = None):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        widths = cfg.stage_widths
        self.encoder = []
        c_prev = 3
        for w in widths:
            self.encoder.append(EncoderStage(c_prev, w, rng))
            c_prev = w
        self.attention = SelfAwareAttention(cfg.attention_config(), rng)
        self.decoder = []
        out_channels: list[int] = []
        c_in = widths[-1]
        for j, d in enumerate(reversed(widths)):
            priors = out_channels[:-1] if cfg.connection_mode == "dense" else []
            focal = FocalModConfig(d, cfg.focal_levels, cfg.focal_kernel_sizes) if cfg.use_focal else None
            block = DecoderBlock(c_in, d, d, rng, cfg.dropout_rate, focal, priors)
            self.decoder.append(block)
            out_channels.append(block.out_channels)
            c_in = block.out_channels
        self.head = Pointwise(c_in, 1, rng)
        self._dropout_rng = np.random.default_rng([cfg.seed, 1])

    def encoder_forward(self, image: Tensor, mode: str = "infer") -> tuple[Tensor, list[Tensor]]:
        s = self.cfg.input_size
        if tuple(image.shape[-3:]) != (s, s, 3):
            raise ShapeMismatch(f"model expects {s}x{s}x3 input, got {image.shape}")
        skips = []
        x = image
        for stage in self.encoder:
            x, skip = stage(x, mode)
            skips.append(skip)
        return x, skips

    def apply_bottleneck_attention(self, bottleneck: Tensor) -> Tensor:
        return self.attention(bottleneck)

    def decode(self, f: Tensor, skips: Sequence[Tensor], mode: str,
               rng: np.random.Generator | None) -> Tensor:
        outputs: list[Tensor] = []
        for block, skip in zip(self.decoder, reversed(skips)):
            f = block(f, skip, mode, rng, outputs[:len(block.dense)])
            outputs.append(f)
        return f

    def __call__(self, image, mode: str = "infer", rng: np.random.Generator | None = None) -> Tensor:
        """Probability map ``s x s x 1`` (or ``n x s x s x 1`` for a batch)."""
        image = tc.as_tensor(image)
        if mode == "train" and rng is None:
            rng = self._dropout_rng
        bottleneck, skips = self.encoder_forward(image, mode)
        f = self.apply_bottleneck_attention(bottleneck)
        f = self.decode(f, skips, mode, rng)
        return tc.sigmoid(self.head(f))

    def predict_proba(self, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Infer-mode probabilities as a plain array, without recording a tape."""
        images = np.asarray(images)
        single = images.ndim == 3
        if single:
            images = images[None]
        out = []
        with tc.no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self(images[i:i + batch_size], "infer").data[..., 0])
        probs = np.concatenate(out, axis=0)
        return probs[0] if single else probs

    # -------------------------------------------------------------- state

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        for name, bn in self.named_states():
            state[f"{name}.running_mean"] = bn.running_mean
            state[f"{name}.running_var"] = bn.running_var
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        states = dict(self.named_states())
        expected = set(params) | {f"{n}.{k}" for n in states for k in ("running_mean", "running_var")}
        if set(state) != expected:
            missing = sorted(expected - set(state))[:3]
            extra = sorted(set(state) - expected)[:3]
            raise FormatError(f"state mismatch; missing {missing}, unexpected {extra}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeMismatch(f"{name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)
        for name, bn in states.items():
            bn.running_mean = np.asarray(state[f"{name}.running_mean"], dtype=bn.running_mean.dtype).copy()
            bn.running_var = np.asarray(state[f"{name}.running_var"], dtype=bn.running_var.dtype).copy()


def model_forward(model: TAFMNet, image, mode: str = "infer",
                  rng: np.random.Generator | None = None) -> Tensor:
    return model(image, mode, rng)


def binarize(probs, threshold: float) -> np.ndarray:
    """Pixels at or above ``threshold`` become 1."""
    if not 0.0 < threshold < 1.0:
        raise InvalidThreshold(f"threshold must lie in (0, 1), got {threshold}")
    arr = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return (arr >= threshold).astype(np.uint8)


# ---------------------------------------------------------------- checkpoint

MAGIC = b"TAFMCKPT"
VERSION = 1


def save_checkpoint(model: TAFMNet, path) -> None:
    """Write weights and running moments in the versioned binary layout (see README)."""
    cfg_json = model.cfg.to_json().encode()
    chunks = [MAGIC, struct.pack("<I", VERSION), model.cfg.digest(),
              struct.pack("<I", len(cfg_json)), cfg_json]
    state = model.state_dict()
    chunks.append(struct.pack("<I", len(state)))
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError("truncated checkpoint")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(len(MAGIC)) != MAGIC:
        raise FormatError("not a TAFM checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    digest = take(32)
    (cfg_len,) = struct.unpack("<I", take(4))
    cfg_json = take(cfg_len)
    if hashlib.sha256(cfg_json).digest() != digest:
        raise FormatError("config digest mismatch")
    cfg = ModelConfig(**json.loads(cfg_json))
    (count,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(shape)) if rank else 1
        state[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).copy()
    if pos != len(buf):
        raise FormatError("trailing bytes in checkpoint")
    return cfg, state


def load_checkpoint(path) -> TAFMNet:
    cfg, state = read_checkpoint(path)
    model = TAFMNet(cfg)
    model.load_state_dict(state)
    return model
