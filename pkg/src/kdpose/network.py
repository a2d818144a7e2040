"""Fully-convolutional pose network: stem, plain conv backbone, 1x1 regressor."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import DimensionError, Tensor
from .tenfile import read_tensor, write_tensor

NUM_KEYPOINTS = 9


class SpecError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    role: str = "student"
    stem_channels: tuple[int, int] = (16, 32)
    backbone_blocks: int = 4
    backbone_channels: int = 32
    K: int = NUM_KEYPOINTS
    C: int = 1

    def __post_init__(self):
        object.__setattr__(self, "stem_channels", tuple(int(c) for c in self.stem_channels))
        if self.role not in ("teacher", "student"):
            raise SpecError(f"unknown role {self.role!r}")
        if len(self.stem_channels) != 2 or min(self.stem_channels) < 1:
            raise SpecError("stem_channels must be two positive ints")
        if self.backbone_blocks < 1 or self.backbone_channels < 1:
            raise SpecError("backbone needs at least one block and one channel")
        if self.K < 2 or self.C < 1:
            raise SpecError("need K >= 2 keypoints and C >= 1 classes")

    @property
    def belief_channels(self) -> int:
        return self.K * self.C

    @property
    def field_channels(self) -> int:
        return (self.K - 1) * 2 * self.C

    @property
    def head_channels(self) -> int:
        return self.belief_channels + self.field_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stem_channels"] = list(self.stem_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**{**d, "stem_channels": tuple(d["stem_channels"])})


# the linear output layer starts small: at full He scale the untrained head's loss is ~60x the
# zero-prediction loss and the first updates collapse every activation towards zero
OUTPUT_GAIN = 0.01
TEACHER_SPEC = NetworkSpec(role="teacher", stem_channels=(16, 32), backbone_blocks=8, backbone_channels=64)
STUDENT_SPEC = NetworkSpec(role="student", stem_channels=(16, 32), backbone_blocks=4, backbone_channels=32)


@dataclass
class ConvLayer:
    name: str
    weight: Tensor
    bias: Tensor
    stride: int
    padding: int
    relu: bool

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def cin(self) -> int:
        return self.weight.shape[1]

    @property
    def cout(self) -> int:
        return self.weight.shape[0]


def _layer_plan(spec: NetworkSpec) -> list[tuple[str, int, int, int, int, bool]]:
    """(name, cin, cout, k, stride, relu) rows in forward order."""
    c1, c2 = spec.stem_channels
    bc = spec.backbone_channels
    rows = [("stem.0", 3, c1, 3, 2, True), ("stem.1", c1, c2, 3, 2, True)]
    cin = c2
    for b in range(spec.backbone_blocks):
        rows.append((f"backbone.{b}", cin, bc, 3, 1, True))
        cin = bc
    rows.append(("regressor.0", bc, bc, 1, 1, True))
    rows.append(("regressor.1", bc, bc, 1, 1, True))
    rows.append(("regressor.2", bc, spec.head_channels, 1, 1, False))
    return rows


@dataclass
class PoseNetwork:
    spec: NetworkSpec
    seed: int
    layers: list[ConvLayer]
    metadata: dict = field(default_factory=dict)

    @property
    def n_backbone_end(self) -> int:
        return 2 + self.spec.backbone_blocks

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for layer in self.layers:
            out.append((layer.name + ".weight", layer.weight))
            out.append((layer.name + ".bias", layer.bias))
        return out

    def astype(self, dtype) -> "PoseNetwork":
        layers = [ConvLayer(l.name, Tensor(l.weight.data.astype(dtype), requires_grad=True),
                            Tensor(l.bias.data.astype(dtype), requires_grad=True),
                            l.stride, l.padding, l.relu) for l in self.layers]
        return PoseNetwork(self.spec, self.seed, layers, dict(self.metadata))

    def copy(self) -> "PoseNetwork":
        return self.astype(self.layers[0].weight.dtype)

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = np.zeros_like(p.data) if flag else None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def forward(self, image) -> tuple[Tensor, Tensor, Tensor]:
        return forward(self, image)


def build(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> PoseNetwork:
    """He-uniform weights from ``seed`` (output layer scaled by ``OUTPUT_GAIN``); all biases start at zero."""
    rng = np.random.default_rng(seed)
    layers = []
    for name, cin, cout, k, stride, act in _layer_plan(spec):
        bound = np.sqrt(6.0 / (cin * k * k))
        w = rng.uniform(-bound, bound, size=(cout, cin, k, k))
        if not act:
            w = w * OUTPUT_GAIN
        w = w.astype(dtype)
        layers.append(ConvLayer(name, Tensor(w, requires_grad=True),
                                Tensor(np.zeros(cout, dtype=dtype), requires_grad=True),
                                stride, k // 2, act))
    return PoseNetwork(spec, seed, layers)


def forward(network: PoseNetwork, image) -> tuple[Tensor, Tensor, Tensor]:
    """Run the network on ``(3, H, W)`` or ``(N, 3, H, W)``.

    Returns ``(belief_maps, vector_fields, backbone_features)``, all at
    quarter resolution.
    """
    x = ag.as_tensor(image)
    if x.data.ndim not in (3, 4) or x.shape[-3] != 3:
        raise DimensionError(f"expected a 3-channel image, got shape {x.shape}")
    h, w = x.shape[-2:]
    if h % 4 or w % 4:
        raise DimensionError(f"input resolution {h}x{w} is not divisible by 4")
    features = None
    for i, layer in enumerate(network.layers):
        x = ag.conv2d(x, layer.weight, layer.bias, layer.stride, layer.padding)
        if layer.relu:
            x = ag.relu(x)
        if i == network.n_backbone_end - 1:
            features = x
    maps, fields = ag.split_channels(x, [network.spec.belief_channels, network.spec.field_channels])
    return maps, fields, features


def count_params(network: PoseNetwork) -> int:
    return sum(l.kernel ** 2 * l.cin * l.cout + l.cout for l in network.layers)


def count_flops(network: PoseNetwork, input_resolution: tuple[int, int] | int) -> int:
    """FLOPs of one forward pass, 2 per multiply-accumulate plus one per bias add."""
    if isinstance(input_resolution, int):
        input_resolution = (input_resolution, input_resolution)
    h, w = input_resolution
    if h % 4 or w % 4:
        raise DimensionError("resolution must be divisible by 4")
    total = 0
    for l in network.layers:
        h = (h + 2 * l.padding - l.kernel) // l.stride + 1
        w = (w + 2 * l.padding - l.kernel) // l.stride + 1
        total += 2 * h * w * l.kernel ** 2 * l.cin * l.cout + h * w * l.cout
    return total


FLOP_CONVENTION = "FLOPs = 2 per multiply-accumulate + 1 per bias add"


def save_checkpoint(network: PoseNetwork, directory, metadata: dict | None = None) -> Path:
    """Write ``manifest.json`` plus one TEN1 file per parameter."""
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    files = []
    for i, (name, p) in enumerate(network.named_parameters()):
        fname = f"params/{i:03d}_{name}.ten"
        write_tensor(directory / fname, p.data)
        files.append({"name": name, "file": fname, "shape": list(p.shape)})
    manifest = {
        "format": "kdpose-checkpoint-1",
        "spec": network.spec.to_dict(),
        "seed": network.seed,
        "dtype": str(network.layers[0].weight.dtype),
        "parameters": files,
        "metadata": metadata if metadata is not None else network.metadata,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory) -> PoseNetwork:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
        spec = NetworkSpec.from_dict(manifest["spec"])
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest in {directory}: {exc}") from exc
    dtype = np.dtype(manifest.get("dtype", "float32"))
    net = build(spec, manifest.get("seed", 0), dtype=dtype)
    named = dict(net.named_parameters())
    entries = manifest["parameters"]
    if sorted(e["name"] for e in entries) != sorted(named):
        raise CheckpointError("checkpoint parameters do not match its network spec")
    for entry in entries:
        arr = read_tensor(directory / entry["file"])
        target = named[entry["name"]]
        if arr.shape != target.shape:
            raise CheckpointError(f"{entry['name']}: shape {arr.shape} != {target.shape}")
        target.data[...] = arr
    net.metadata = manifest.get("metadata", {})
    return net
