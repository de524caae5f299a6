"""Peer students, the peer-teacher classifier and checkpoint files.

Feature widths of the built-in architectures (input 3x32x32):

    =============  ===========  =====
    arch           feature_dim  heavy
    =============  ===========  =====
    tiny-cnn       64
    resnet-8       64
    resnet-32      64
    resnet-110     64           yes
    wrn-16-8       512          yes
    =============  ===========  =====

Conv weights are He-normal (fan_out, ReLU gain), batch-norm starts at
scale 1 / shift 0, and every linear layer has a zero bias with PyTorch's
default uniform weight init.
"""

from __future__ import annotations

import contextlib
import logging
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, FormatError, ValidationError

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cutnmix.checkpoint"
CHECKPOINT_VERSION = 1

FEATURE_DIMS = {
    "tiny-cnn": 64,
    "resnet-8": 64,
    "resnet-32": 64,
    "resnet-110": 64,
    "wrn-16-8": 512,
}
HEAVY_ARCHS = frozenset({"resnet-110", "wrn-16-8"})


def _conv_bn(cin: int, cout: int, stride: int) -> list[nn.Module]:
    return [nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]


class TinyCNN(nn.Module):
    """Three strided conv-bn-relu stages and global average pooling."""

    def __init__(self, in_channels: int = 3, widths: Sequence[int] = (16, 32, 64)):
        super().__init__()
        layers: list[nn.Module] = []
        cin = in_channels
        for w in widths:
            layers += _conv_bn(cin, w, 2)
            cin = w
        self.body = nn.Sequential(*layers)
        self.out_dim = cin

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x).mean(dim=(2, 3))


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut: nn.Module = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return torch.relu(out + self.shortcut(x))


class CifarResNet(nn.Module):
    """ResNet-(6n+2) for 32x32 inputs: widths 16/32/64, ``n`` blocks per stage."""

    def __init__(self, depth: int, in_channels: int = 3):
        super().__init__()
        if (depth - 2) % 6:
            raise ConfigurationError(f"CIFAR ResNet depth must be 6n+2, got {depth}")
        n = (depth - 2) // 6
        self.stem = nn.Sequential(*_conv_bn(in_channels, 16, 1))
        blocks: list[nn.Module] = []
        cin = 16
        for i, w in enumerate((16, 32, 64)):
            for b in range(n):
                blocks.append(BasicBlock(cin, w, 2 if (i > 0 and b == 0) else 1))
                cin = w
        self.blocks = nn.Sequential(*blocks)
        self.out_dim = cin

    def forward(self, x):
        return self.blocks(self.stem(x)).mean(dim=(2, 3))


class WideBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, stride=1, padding=1, bias=False)
        self.shortcut = None if (stride == 1 and cin == cout) else nn.Conv2d(cin, cout, 1, stride=stride, bias=False)

    def forward(self, x):
        o = torch.relu(self.bn1(x))
        skip = x if self.shortcut is None else self.shortcut(o)
        o = self.conv1(o)
        o = self.conv2(torch.relu(self.bn2(o)))
        return o + skip


class WideResNet(nn.Module):
    def __init__(self, depth: int, widen: int, in_channels: int = 3):
        super().__init__()
        if (depth - 4) % 6:
            raise ConfigurationError(f"WideResNet depth must be 6n+4, got {depth}")
        n = (depth - 4) // 6
        widths = [16 * widen, 32 * widen, 64 * widen]
        self.stem = nn.Conv2d(in_channels, 16, 3, padding=1, bias=False)
        blocks: list[nn.Module] = []
        cin = 16
        for i, w in enumerate(widths):
            for b in range(n):
                blocks.append(WideBlock(cin, w, 2 if (i > 0 and b == 0) else 1))
                cin = w
        self.blocks = nn.Sequential(*blocks)
        self.bn = nn.BatchNorm2d(cin)
        self.out_dim = cin

    def forward(self, x):
        return torch.relu(self.bn(self.blocks(self.stem(x)))).mean(dim=(2, 3))


class PeerStudent(nn.Module):
    """A backbone producing penultimate features plus a linear classifier."""

    def __init__(self, backbone: nn.Module, feature_dim: int, num_classes: int, arch: str = "custom", in_channels: int = 3):
        super().__init__()
        self.backbone = backbone
        self.classifier = nn.Linear(feature_dim, num_classes)
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.arch = arch
        self.in_channels = in_channels

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        f = self.backbone(x)
        return f, self.classifier(f)


class PeerTeacher(nn.Module):
    """Linear classifier over the concatenated penultimate features of all peers."""

    def __init__(self, feature_dims: Sequence[int], num_classes: int):
        super().__init__()
        self.feature_dims = tuple(int(d) for d in feature_dims)
        self.num_classes = num_classes
        self.fc = nn.Linear(sum(self.feature_dims), num_classes)
        nn.init.zeros_(self.fc.bias)

    def forward(self, features: Sequence[torch.Tensor]) -> torch.Tensor:
        return self.fc(torch.cat(list(features), dim=1))


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.zeros_(m.bias)


def _make_backbone(arch: str, in_channels: int) -> nn.Module:
    if arch == "tiny-cnn":
        return TinyCNN(in_channels)
    if arch.startswith("resnet-"):
        return CifarResNet(int(arch.split("-")[1]), in_channels)
    if arch.startswith("wrn-"):
        _, depth, widen = arch.split("-")
        return WideResNet(int(depth), int(widen), in_channels)
    raise ConfigurationError(f"unknown architecture {arch!r}; choose from {sorted(FEATURE_DIMS)}")


@contextlib.contextmanager
def _seeded(seed: int | None):
    if seed is None:
        yield
        return
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def build_student(arch: str, num_classes: int, seed: int | None = None, in_channels: int = 3) -> PeerStudent:
    """Build and initialize a peer network.

    With ``seed`` set, initialization draws from a private torch RNG so the
    global generator is left untouched and two builds are identical.
    """
    if arch not in FEATURE_DIMS:
        raise ConfigurationError(f"unknown architecture {arch!r}; choose from {sorted(FEATURE_DIMS)}")
    if arch in HEAVY_ARCHS:
        log.warning("%s is a full-scale architecture; expect slow CPU training", arch)
    with _seeded(seed):
        backbone = _make_backbone(arch, in_channels)
        student = PeerStudent(backbone, backbone.out_dim, num_classes, arch=arch, in_channels=in_channels)
        _init_weights(student)
    return student


def build_teacher(feature_dims: Sequence[int], num_classes: int, seed: int | None = None) -> PeerTeacher:
    with _seeded(seed):
        return PeerTeacher(feature_dims, num_classes)


def _to_tensor(pixels) -> torch.Tensor:
    if isinstance(pixels, torch.Tensor):
        return pixels
    return torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32))


def student_forward(student: PeerStudent, pixels) -> tuple[torch.Tensor, torch.Tensor]:
    """Features and logits from a single forward pass."""
    x = _to_tensor(pixels)
    if x.ndim != 4 or x.shape[1] != student.in_channels:
        raise ValidationError(f"expected [n, {student.in_channels}, H, W] pixels, got {tuple(x.shape)}")
    return student(x)


def teacher_forward(teacher: PeerTeacher, features: Sequence[torch.Tensor], detach: bool = True) -> torch.Tensor:
    """Peer-teacher logits. With ``detach`` the students receive no gradient from teacher losses."""
    width = sum(f.shape[-1] for f in features)
    if width != sum(teacher.feature_dims):
        raise ValidationError(f"concatenated feature width {width} != teacher input width {sum(teacher.feature_dims)}")
    if detach:
        features = [f.detach() for f in features]
    return teacher(features)


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over all parameter and buffer bytes, in state-dict order."""
    import hashlib

    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, payload: dict[str, Any]) -> None:
    """Write a checkpoint archive.

    The file is a ``torch.save`` zip archive holding one dict with at least
    ``format``, ``version``, ``archs`` (list of arch names), ``num_classes``,
    ``students`` (list of state dicts) and ``teacher`` (state dict or None).
    The trainer adds ``epoch``, ``step``, ``seed``, ``config``, optimizer
    states and ``torch_rng``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **payload}
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(blob, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:  # corrupt or foreign archive
        raise FormatError(f"{path}: not a readable checkpoint ({exc})") from exc
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: missing {CHECKPOINT_FORMAT!r} header")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    return blob


def students_from_checkpoint(blob: dict[str, Any]) -> tuple[list[PeerStudent], PeerTeacher | None]:
    K = int(blob["num_classes"])
    students = []
    for arch, state in zip(blob["archs"], blob["students"]):
        s = build_student(arch, K)
        s.load_state_dict(state)
        students.append(s)
    teacher = None
    if blob.get("teacher") is not None:
        teacher = PeerTeacher([s.feature_dim for s in students], K)
        teacher.load_state_dict(blob["teacher"])
    return students, teacher
