"""ME-TST and ME-TST+ networks plus the binary checkpoint format."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as tn
from .ssm import MambaBlock
from .tensor import DimensionError, Tensor

CHECKPOINT_MAGIC = b"METS"
CHECKPOINT_VERSION = 1

VARIANTS = ("metst", "metst_plus")


@dataclass
class ModelConfig:
    c_in: int = 36
    c_main: int = 128
    n_emotions: int = 3
    variant: str = "metst_plus"
    blocks: int = 3
    layers_per_block: int = 4
    slow_stride: int = 2
    d_state: int = 16
    expand: int = 2
    conv_width: int = 4
    stem_kernel: int = 3
    lateral: bool = True
    norm: bool = True
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        self.variant = self.variant.replace("-", "_")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.c_in % 2:
            raise ValueError("c_in must be even (x and y flow per ROI)")
        if self.c_main % 2:
            raise ValueError("c_main must be even")
        if self.blocks < 1 or self.layers_per_block < 1:
            raise ValueError("need at least one block and one layer per block")
        if self.slow_stride != 2:
            raise ValueError("only a slow-path stride of 2 is supported")

    @property
    def n_classes(self) -> int:
        return self.n_emotions + 1

    @property
    def neutral(self) -> int:
        return self.n_emotions

    @property
    def n_rois(self) -> int:
        return self.c_in // 2

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class AnalysisOutput:
    """Per-frame spotting score ``(T,)`` and class probabilities ``(T, emo+1)``."""

    spot: np.ndarray
    recog: np.ndarray

    def __post_init__(self):
        if self.spot.shape[0] != self.recog.shape[0]:
            raise DimensionError("spot and recog lengths differ")


class Stem(tn.Module):
    """Two conv-BN-ReLU stages lifting ``c_in`` flow channels to ``c_main``."""

    def __init__(self, c_in, c_out, rng, k=3, dtype=np.float64):
        super().__init__()
        self.c_in = c_in
        self.conv1 = tn.Conv1d(c_in, c_out, k, rng, dtype=dtype)
        self.bn1 = tn.BatchNorm1d(c_out, dtype=dtype)
        self.conv2 = tn.Conv1d(c_out, c_out, k, rng, dtype=dtype)
        self.bn2 = tn.BatchNorm1d(c_out, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[0] != self.c_in:
            raise DimensionError(f"stem expects {self.c_in} channels, got {x.shape[0]}")
        x = tn.relu(self.bn1(self.conv1(x)))
        return tn.relu(self.bn2(self.conv2(x)))


def _block_kwargs(cfg: ModelConfig, dtype):
    n_layers = cfg.blocks * cfg.layers_per_block
    return dict(n_layers=cfg.layers_per_block, d_state=cfg.d_state, expand=cfg.expand,
                conv_width=cfg.conv_width, out_scale=1.0 / math.sqrt(n_layers),
                prenorm=cfg.norm, dtype=dtype)


class SsmBranch(tn.Module):
    """Mamba blocks, each followed by a cross-channel linear projection."""

    def __init__(self, cfg: ModelConfig, rng, dtype):
        super().__init__()
        c = cfg.c_main
        self.blocks = [MambaBlock(c, rng, **_block_kwargs(cfg, dtype)) for _ in range(cfg.blocks)]
        self.projs = [tn.Linear(c, c, rng, dtype=dtype) for _ in range(cfg.blocks)]

    def forward(self, x: Tensor) -> Tensor:
        for block, proj in zip(self.blocks, self.projs):
            x = proj(block(x))
        return x


def head_forward(features: Tensor, spot_head: tn.Linear, recog_head: tn.Linear,
                 spot_norm: Tensor | None = None, recog_norm: Tensor | None = None):
    """Spotting ``sigmoid(linear)`` as ``(T,)`` and recognition ``softmax`` as ``(T, K)``.

    With ``*_norm`` gains given, each head reads RMS-normalised features.
    """
    spot_in = tn.rms_norm(features, spot_norm) if spot_norm is not None else features
    spot = tn.sigmoid(spot_head(spot_in))[0]
    if recog_norm is not None:
        features = tn.rms_norm(features, recog_norm)
    recog = tn.transpose(tn.softmax(recog_head(features), axis=0))
    return spot, recog


def lateral_fuse(slow: Tensor, fast: Tensor, conv: tn.Conv1d) -> Tensor:
    """``slow + conv(fast)`` where ``conv`` halves the length of the fast path."""
    if fast.shape[1] != 2 * slow.shape[1]:
        raise DimensionError(f"fast length {fast.shape[1]} is not twice slow length {slow.shape[1]}")
    return tn.add(slow, conv(fast))


class _Network(tn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self._dtype = np.dtype(cfg.dtype)

    def _as_input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=self._dtype))

    def analyze(self, x) -> AnalysisOutput:
        """Eval-mode forward on a ``(c_in, T)`` array; returns numpy outputs."""
        was = self.training
        self.eval()
        try:
            spot, recog = self.forward(x)
        finally:
            self.train(was)
        return AnalysisOutput(spot.data.astype(np.float64), recog.data.astype(np.float64))

    def _head_norms(self, width: int):
        on = self.config.norm
        self.spot_norm = self.param(np.ones(width), self._dtype) if on else None
        self.recog_norm = self.param(np.ones(width), self._dtype) if on else None

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


class METST(_Network):
    """Shared stem feeding separate spotting and recognition SSM branches."""

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        rng = np.random.default_rng(cfg.seed)
        dt = self._dtype
        self.stem = Stem(cfg.c_in, cfg.c_main, rng, cfg.stem_kernel, dtype=dt)
        self.spot_branch = SsmBranch(cfg, rng, dt)
        self.recog_branch = SsmBranch(cfg, rng, dt)
        self.spot_head = tn.Linear(cfg.c_main, 1, rng, dtype=dt)
        self.recog_head = tn.Linear(cfg.c_main, cfg.n_classes, rng, dtype=dt)
        self._head_norms(cfg.c_main)

    def features(self, x):
        s = self.stem(self._as_input(x))
        return self.spot_branch(s), self.recog_branch(s)

    def forward(self, x):
        fs, fr = self.features(x)
        spot, _ = head_forward(fs, self.spot_head, self.recog_head, self.spot_norm, self.recog_norm)
        _, recog = head_forward(fr, self.spot_head, self.recog_head, self.spot_norm, self.recog_norm)
        return spot, recog


class METSTPlus(_Network):
    """SlowFast trunk: full-rate ``C`` path, half-rate ``2C`` path, lateral fusion."""

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        rng = np.random.default_rng(cfg.seed)
        dt = self._dtype
        c = cfg.c_main
        kw = _block_kwargs(cfg, dt)
        self.stem = Stem(cfg.c_in, c, rng, cfg.stem_kernel, dtype=dt)
        self.slow_in = tn.Conv1d(c, 2 * c, 3, rng, stride=2, padding=1, dtype=dt)
        self.fast_blocks = [MambaBlock(c, rng, **kw) for _ in range(cfg.blocks)]
        self.slow_blocks = [MambaBlock(2 * c, rng, **kw) for _ in range(cfg.blocks)]
        self.laterals = [tn.Conv1d(c, 2 * c, 3, rng, stride=2, padding=1, dtype=dt)
                         for _ in range(cfg.blocks)]
        self.spot_head = tn.Linear(3 * c, 1, rng, dtype=dt)
        self.recog_head = tn.Linear(3 * c, cfg.n_classes, rng, dtype=dt)
        self._head_norms(3 * c)

    def pathways(self, x):
        """Return ``(fast, slow)`` features for an even-length input."""
        s = self.stem(x)
        fast, slow = s, self.slow_in(s)
        for fb, sb, lat in zip(self.fast_blocks, self.slow_blocks, self.laterals):
            fast = fb(fast)
            slow = sb(slow)
            if self.config.lateral:
                slow = lateral_fuse(slow, fast, lat)
        return fast, slow

    def features(self, x) -> Tensor:
        x = self._as_input(x)
        T = x.shape[1]
        x = tn.pad_edge(x, T % 2)
        fast, slow = self.pathways(x)
        feats = tn.concat([fast, tn.upsample_nearest(slow, 2)], axis=0)
        return feats[:, :T] if T % 2 else feats

    def forward(self, x):
        return head_forward(self.features(x), self.spot_head, self.recog_head,
                            self.spot_norm, self.recog_norm)


def build_model(cfg: ModelConfig) -> _Network:
    return METST(cfg) if cfg.variant == "metst" else METSTPlus(cfg)


# checkpoints ------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def save_checkpoint(model: _Network, path) -> None:
    """Write magic, version, JSON config, then named float32 records."""
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode()
    state = model.state_dict()
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg,
             struct.pack("<I", len(state))]
    for name, arr in state.items():
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> _Network:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r} at offset 0")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated at offset {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, clen = take("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    cfg = ModelConfig.from_dict(json.loads(buf[pos:pos + clen]))
    pos += clen
    (count,) = take("<I")
    state = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        n = int(np.prod(shape))
        if pos + 4 * n > len(buf):
            raise CheckpointError(f"{path}: truncated record {name!r} at offset {pos}")
        state[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
    model = build_model(cfg)
    model.load_state_dict(state)
    return model
