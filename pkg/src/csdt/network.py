"""Multi-scale stripe segmentation network.

The encoder stacks, at every depth, a strided downsampling conv, a bank of
dual-path dilated blocks whose outputs are summed, and a sigmoid-gated
attention block. The decoder upsamples bilinearly and fuses each level with
the matching encoder skip before a 1x1 head and a sigmoid.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "NetworkConfig",
    "ConvBN",
    "MDPCBlock",
    "MDPCStage",
    "FMWABlock",
    "MSSANet",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]


class CheckpointError(RuntimeError):
    pass


@dataclass
class NetworkConfig:
    base_channels: int = 16
    depths: int = 4
    dilation_rates: list[int] = field(default_factory=lambda: [1, 2, 4])
    input_channels: int = 1
    use_fmwa: bool = True

    def __post_init__(self):
        self.dilation_rates = [int(d) for d in self.dilation_rates]
        if self.input_channels != 1:
            raise ValueError("only single-channel input is supported")
        if self.depths < 1:
            raise ValueError("depths must be >= 1")
        if any(d < 1 for d in self.dilation_rates):
            raise ValueError(f"dilation rates must be positive, got {self.dilation_rates}")
        if len(set(self.dilation_rates)) != len(self.dilation_rates):
            raise ValueError(f"dilation rates must be distinct, got {self.dilation_rates}")
        for i in range(self.depths):
            c = self.channels(i)
            if c % 4:
                raise ValueError(f"channels at depth {i} ({c}) not divisible by 4")

    def channels(self, depth: int) -> int:
        return self.base_channels * 2**depth

    @property
    def min_divisor(self) -> int:
        return 2 ** (self.depths - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


class ConvBN(nn.Module):
    """3x3 conv, batch norm, ReLU."""

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class MDPCBlock(nn.Module):
    """Dual-path block: a plain depthwise branch and a dilated depthwise branch.

    ``x`` (C channels) -> 3x3 conv to C/2 -> split into two C/4 halves ->
    depthwise 3x3 / depthwise 3x3 at ``dilation`` -> concat -> 3x3 conv to C
    -> PReLU(BN(. + x)).
    """

    def __init__(self, channels: int, dilation: int):
        super().__init__()
        if channels % 4:
            raise ValueError(f"MDPC needs channels divisible by 4, got {channels}")
        half, quarter = channels // 2, channels // 4
        self.channels = channels
        self.dilation = dilation
        self.reduce = nn.Conv2d(channels, half, 3, padding=1, bias=False)
        self.left = nn.Conv2d(quarter, quarter, 3, padding=1, groups=quarter, bias=False)
        self.right = nn.Conv2d(
            quarter, quarter, 3, padding=dilation, dilation=dilation, groups=quarter, bias=False
        )
        self.expand = nn.Conv2d(half, channels, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(channels)
        self.act = nn.PReLU(channels, init=0.25)

    def branches(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        a, b = torch.chunk(self.reduce(x), 2, dim=1)
        return self.left(a), self.right(b)

    def forward(self, x):
        left, right = self.branches(x)
        fused = self.expand(torch.cat([left, right], dim=1))
        return self.act(self.bn(fused + x))


class MDPCStage(nn.Module):
    """Sum of MDPC block outputs, one block per dilation rate."""

    def __init__(self, channels: int, dilation_rates):
        super().__init__()
        if not dilation_rates:
            raise ValueError("MDPCStage needs at least one dilation rate")
        self.blocks = nn.ModuleList(MDPCBlock(channels, d) for d in dilation_rates)

    def forward(self, x):
        out = self.blocks[0](x)
        for block in self.blocks[1:]:
            out = out + block(x)
        return out


class FMWABlock(nn.Module):
    """Residual attention: ``sigmoid(conv_deep(f)) * f + f``."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv_deep = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 1),
        )

    def attention(self, f):
        return torch.sigmoid(self.conv_deep(f))

    def forward(self, f):
        return self.attention(f) * f + f


class EncoderStage(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int, cfg: NetworkConfig):
        super().__init__()
        self.down = ConvBN(cin, cout, stride=stride)
        # an empty dilation list is the "no MDPC" ablation
        self.mdpc = MDPCStage(cout, cfg.dilation_rates) if cfg.dilation_rates else ConvBN(cout, cout)
        self.fmwa = FMWABlock(cout) if cfg.use_fmwa else nn.Identity()

    def forward(self, x):
        return self.fmwa(self.mdpc(self.down(x)))


class DecoderStage(nn.Module):
    def __init__(self, cdeep: int, cskip: int):
        super().__init__()
        self.up = ConvBN(cdeep, cskip)
        self.merge = ConvBN(2 * cskip, cskip)
        self.refine = ConvBN(cskip, cskip)

    def forward(self, deep, skip):
        up = F.interpolate(deep, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        combined = torch.cat([self.up(up), skip], dim=1)
        return self.refine(self.merge(combined))


class MSSANet(nn.Module):
    def __init__(self, cfg: NetworkConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or NetworkConfig()
        stages = []
        cin = cfg.input_channels
        for i in range(cfg.depths):
            cout = cfg.channels(i)
            stages.append(EncoderStage(cin, cout, 1 if i == 0 else 2, cfg))
            cin = cout
        self.encoder = nn.ModuleList(stages)
        self.bottom = ConvBN(cfg.channels(cfg.depths - 1), cfg.channels(cfg.depths - 1))
        self.decoder = nn.ModuleList(
            DecoderStage(cfg.channels(i + 1), cfg.channels(i)) for i in reversed(range(cfg.depths - 1))
        )
        self.head = nn.Conv2d(cfg.channels(0), 1, 1)
        # NHWC is markedly faster for these narrow convs on CPU
        self.to(memory_format=torch.channels_last)

    def check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.cfg.input_channels:
            raise ValueError(f"expected (B, {self.cfg.input_channels}, H, W), got {tuple(x.shape)}")
        k = self.cfg.min_divisor
        if x.shape[2] % k or x.shape[3] % k:
            raise ValueError(f"spatial dims {tuple(x.shape[2:])} not divisible by {k}")

    def logits(self, x):
        self.check_input(x)
        x = x.contiguous(memory_format=torch.channels_last)
        skips = []
        for stage in self.encoder:
            x = stage(x)
            skips.append(x)
        m = self.bottom(skips[-1])
        for stage, skip in zip(self.decoder, reversed(skips[:-1])):
            m = stage(m, skip)
        return self.head(m)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def save_checkpoint(path, model: MSSANet, meta: dict | None = None) -> Path:
    """Write weights and buffers as an ``.npz`` with a JSON header entry."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"network": model.cfg.to_dict(), "meta": meta or {}}
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if "__header__" in arrays:
        raise CheckpointError("parameter name collides with header key")
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[MSSANet, dict]:
    """Rebuild a network from a checkpoint; returns ``(model, meta)``."""
    try:
        with np.load(Path(path)) as data:
            header = json.loads(data["__header__"].tobytes().decode())
            state = {k: torch.from_numpy(data[k].copy()) for k in data.files if k != "__header__"}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    model = MSSANet(NetworkConfig.from_dict(header["network"]))
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint {path} does not match its config: {exc}") from exc
    return model, header["meta"]
