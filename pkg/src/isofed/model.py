"""The classification network and its flat-parameter exchange format.

The architecture is two 5x5 conv layers with one 2x2 max-pool after the
first, two fully-connected feature layers, a two-layer MLP head and a final
classifier layer. Channel widths are configurable; the layer ordering (and
therefore the parameter layout) is fixed.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

CHECKPOINT_MAGIC = b"ISOP"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    in_channels: int = 1
    conv_channels: tuple[int, int] = (8, 16)
    fc_width: int = 128
    mlp_hidden: int = 128
    image_hw: int = 28

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")

    @property
    def flat_features(self) -> int:
        # conv(5x5, valid) -> pool(2x2) -> conv(5x5, valid)
        side = (self.image_hw - 4) // 2 - 4
        return self.conv_channels[1] * side * side


@dataclass
class ModelParams:
    """Ordered flat view of all trainable parameters of one network."""

    names: tuple[str, ...]
    shapes: tuple[tuple[int, ...], ...]
    flat: np.ndarray

    @property
    def total_len(self) -> int:
        return self.flat.size

    def copy(self) -> "ModelParams":
        return ModelParams(self.names, self.shapes, self.flat.copy())

    def replace_flat(self, flat: np.ndarray) -> "ModelParams":
        if flat.size != self.flat.size:
            raise ValueError(f"flat length {flat.size} != {self.flat.size}")
        return ModelParams(self.names, self.shapes, np.asarray(flat, dtype=np.float64))

    def same_architecture(self, other: "ModelParams") -> bool:
        return self.names == other.names and self.shapes == other.shapes


class CnnClassifier:
    """Forward-only container of parameter tensors; tape rebuilt per call."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        c1, c2 = cfg.conv_channels
        self.params: dict[str, ad.Tensor] = {}
        self._add("conv1.w", (c1, cfg.in_channels, 5, 5))
        self._add("conv1.b", (c1,))
        self._add("conv2.w", (c2, c1, 5, 5))
        self._add("conv2.b", (c2,))
        self._add("fc1.w", (cfg.flat_features, cfg.fc_width))
        self._add("fc1.b", (cfg.fc_width,))
        self._add("fc2.w", (cfg.fc_width, cfg.fc_width))
        self._add("fc2.b", (cfg.fc_width,))
        self._add("mlp1.w", (cfg.fc_width, cfg.mlp_hidden))
        self._add("mlp1.b", (cfg.mlp_hidden,))
        self._add("mlp2.w", (cfg.mlp_hidden, cfg.mlp_hidden))
        self._add("mlp2.b", (cfg.mlp_hidden,))
        self._add("head.w", (cfg.mlp_hidden, cfg.num_classes))
        self._add("head.b", (cfg.num_classes,))

    def _add(self, name, shape):
        self.params[name] = ad.Tensor(np.zeros(shape), requires_grad=True)

    def parameters(self) -> list[ad.Tensor]:
        return list(self.params.values())

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        p = self.params
        h = ad.relu(ad.conv2d(x, p["conv1.w"], p["conv1.b"]))
        h = ad.maxpool2x2(h)
        h = ad.relu(ad.conv2d(h, p["conv2.w"], p["conv2.b"]))
        h = ad.reshape(h, (x.shape[0], self.cfg.flat_features))
        h = ad.relu(ad.linear(h, p["fc1.w"], p["fc1.b"]))
        h = ad.relu(ad.linear(h, p["fc2.w"], p["fc2.b"]))
        h = ad.relu(ad.linear(h, p["mlp1.w"], p["mlp1.b"]))
        h = ad.relu(ad.linear(h, p["mlp2.w"], p["mlp2.b"]))
        return ad.linear(h, p["head.w"], p["head.b"])

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        return self.forward(x)


def init_model(seed: int, num_classes: int, in_channels: int = 1, cfg: ModelConfig | None = None) -> CnnClassifier:
    """Kaiming-uniform init from a counter-based RNG; bit-identical per seed."""
    if cfg is None:
        cfg = ModelConfig(num_classes=num_classes, in_channels=in_channels)
    model = CnnClassifier(cfg)
    rng = np.random.Generator(np.random.Philox(key=seed))
    for name, t in model.params.items():
        if name.endswith(".b"):
            continue  # biases stay zero
        shape = t.data.shape
        fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
        bound = np.sqrt(6.0 / fan_in)
        t.data = rng.uniform(-bound, bound, size=shape)
    return model


def extract_params(model: CnnClassifier) -> ModelParams:
    names = tuple(model.params.keys())
    shapes = tuple(tuple(t.data.shape) for t in model.params.values())
    flat = np.concatenate([t.data.reshape(-1) for t in model.params.values()])
    return ModelParams(names, shapes, flat)


def load_params(model: CnnClassifier, params: ModelParams):
    names = tuple(model.params.keys())
    if params.names != names:
        raise ValueError(f"parameter names mismatch: {params.names} vs {names}")
    offset = 0
    for name, shape in zip(params.names, params.shapes):
        t = model.params[name]
        if tuple(t.data.shape) != shape:
            raise ValueError(f"shape mismatch for {name}: {shape} vs {t.data.shape}")
        n = int(np.prod(shape))
        t.data = params.flat[offset : offset + n].reshape(shape).copy()
        offset += n
    if offset != params.flat.size:
        raise ValueError(f"flat length {params.flat.size} does not match architecture ({offset})")


def params_distance(a: ModelParams, b: ModelParams) -> float:
    """Euclidean norm over the concatenated flat parameter vectors."""
    if a.flat.size != b.flat.size:
        raise ValueError(f"parameter length mismatch: {a.flat.size} vs {b.flat.size}")
    return float(np.linalg.norm(a.flat - b.flat))


# -- ISOP checkpoint format ----------------------------------------------------
# magic "ISOP" | version u16 | entry count u32 | per entry:
#   name length u16, UTF-8 name, rank u32, dims u32 each, values f64 LE.


def save_checkpoint(params: ModelParams, path):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(params.names)))
        offset = 0
        for name, shape in zip(params.names, params.shapes):
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", len(shape)))
            fh.write(struct.pack(f"<{len(shape)}I", *shape))
            n = int(np.prod(shape))
            fh.write(params.flat[offset : offset + n].astype("<f8").tobytes())
            offset += n


class CheckpointError(Exception):
    pass


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}: {raw[:4]!r}")
    try:
        version, count = struct.unpack_from("<HI", view, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 10
        names, shapes, chunks = [], [], []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos : pos + name_len]).decode("utf-8")
            pos += name_len
            (rank,) = struct.unpack_from("<I", view, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            values = np.frombuffer(view, dtype="<f8", count=n, offset=pos).astype(np.float64)
            pos += 8 * n
            names.append(name)
            shapes.append(tuple(int(d) for d in dims))
            chunks.append(values)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint {path}: {exc}") from exc
    if pos != len(raw):
        raise CheckpointError(f"trailing bytes in checkpoint {path}")
    return ModelParams(tuple(names), tuple(shapes), np.concatenate(chunks))


def model_config_from_params(params: ModelParams, image_hw: int = 28) -> ModelConfig:
    """Recover the architecture hyperparameters from a parameter layout."""
    by_name = dict(zip(params.names, params.shapes))
    try:
        c1, in_ch = by_name["conv1.w"][0], by_name["conv1.w"][1]
        c2 = by_name["conv2.w"][0]
        fc_width = by_name["fc1.w"][1]
        mlp_hidden = by_name["mlp1.w"][1]
        num_classes = by_name["head.b"][0]
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks expected layer {exc}") from exc
    return ModelConfig(
        num_classes=num_classes,
        in_channels=in_ch,
        conv_channels=(c1, c2),
        fc_width=fc_width,
        mlp_hidden=mlp_hidden,
        image_hw=image_hw,
    )
