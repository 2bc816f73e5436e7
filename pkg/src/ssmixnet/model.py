"""Network assembly: conv stem, parallel spectral/spatial mixers, depthwise
attention gate, pooled linear classifier.

Pipeline on a batch of patches (B, M, M, P):

    add channel axis -> 3D-conv stem -> [spectral mixer || spatial mixer]
    -> concat channels -> merge bands into channels -> attention gate
    -> global average pool -> linear head -> logits

Each mixer is a stack of residual two-layer MLPs applied along one axis:
the spectral stack mixes the P band axis per spatial position, the
spatial stack mixes the M*M position axis per band/channel pair. Either
or both stacks (and the attention gate) can be disabled for ablations;
with both stacks off, the gate/pool run on the stem output directly.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .errors import DimensionError, FormatError, InputError
from .tensor import Tensor

CHECKPOINT_MAGIC = b"SSMX"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Complete hyperparameter record; defaults give the full-size network."""

    num_classes: int
    patch_size: int = 9          # M, odd spatial window
    num_components: int = 15     # P, spectral dims after PCA
    stem_filters: int = 16       # first conv width
    stem_channels: int = 32      # second conv width, feeds the mixers
    hidden_dim: int = 128        # mixer MLP hidden width
    num_blocks: int = 4          # residual MLP repeats per mixer
    use_spectral: bool = True
    use_spatial: bool = True
    use_attention: bool = True
    mixer_activation: str = "gelu"   # "gelu" | "relu"
    init_seed: int = 0

    def __post_init__(self):
        for name in ("num_classes", "patch_size", "num_components",
                     "stem_filters", "stem_channels", "hidden_dim", "num_blocks"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise InputError(f"{name} must be a positive integer, got {v!r}")
        if self.patch_size % 2 == 0:
            raise InputError(f"patch_size must be odd, got {self.patch_size}")
        if self.mixer_activation not in ("gelu", "relu"):
            raise InputError(f"mixer_activation must be 'gelu' or 'relu', got {self.mixer_activation!r}")

    @property
    def feature_channels(self) -> int:
        """Channel count after merging bands into channels.

        Both mixers concatenated double the stem channel count; with one
        or zero mixers the stem width passes through unchanged.
        """
        branch = 2 * self.stem_channels if (self.use_spectral and self.use_spatial) \
            else self.stem_channels
        return self.num_components * branch


class Model:
    """Materialized parameter set plus the forward graph over it."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def parameters(self):
        return self.params.values()

    def named_parameters(self):
        return self.params.items()

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- stages ------------------------------------------------------------

    def stem(self, x: Tensor) -> Tensor:
        """(B, M, M, P, 1) -> (B, M, M, P, stem_channels), sizes preserved."""
        p = self.params
        x = T.relu(T.conv3d(x, p["stem.conv1.kernel"], p["stem.conv1.bias"]))
        x = T.relu(T.conv3d(x, p["stem.conv2.kernel"], p["stem.conv2.bias"]))
        return x

    def _mixer_act(self, x: Tensor) -> Tensor:
        return T.gelu(x) if self.config.mixer_activation == "gelu" else T.relu(x)

    def _residual_blocks(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        for i in range(self.config.num_blocks):
            h = T.dense(x, p[f"{prefix}.{i}.w1"], p[f"{prefix}.{i}.b1"])
            h = self._mixer_act(h)
            h = T.dense(h, p[f"{prefix}.{i}.w2"], p[f"{prefix}.{i}.b2"])
            x = T.add(x, h)
        return x

    def spectral_mixer(self, x: Tensor) -> Tensor:
        """Mix along the band axis, independently per spatial position.

        (B, M, M, P, D) -> tokens (B, M*M, D, P) -> residual MLPs on the
        last axis -> back to (B, M, M, P, D).
        """
        cfg = self.config
        b, m = x.shape[0], cfg.patch_size
        x = T.permute(x, (0, 1, 2, 4, 3))                       # (B,M,M,D,P)
        x = T.reshape(x, (b, m * m, cfg.stem_channels, cfg.num_components))
        x = self._residual_blocks(x, "spectral")
        x = T.reshape(x, (b, m, m, cfg.stem_channels, cfg.num_components))
        return T.permute(x, (0, 1, 2, 4, 3))

    def spatial_mixer(self, x: Tensor) -> Tensor:
        """Mix along the spatial-position axis, per band/channel pair.

        (B, M, M, P, D) -> tokens (B, P, D, M*M) -> residual MLPs on the
        last axis -> back to (B, M, M, P, D).
        """
        cfg = self.config
        b, m = x.shape[0], cfg.patch_size
        x = T.permute(x, (0, 3, 4, 1, 2))                       # (B,P,D,M,M)
        x = T.reshape(x, (b, cfg.num_components, cfg.stem_channels, m * m))
        x = self._residual_blocks(x, "spatial")
        x = T.reshape(x, (b, cfg.num_components, cfg.stem_channels, m, m))
        return T.permute(x, (0, 3, 4, 1, 2))

    def attention(self, x: Tensor) -> Tensor:
        """Sigmoid depthwise-conv mask, applied multiplicatively."""
        if not self.config.use_attention:
            raise InputError("attention called on a model built without it")
        cc = self.config.feature_channels
        if x.shape[-1] != cc:
            raise DimensionError(f"attention: channels {x.shape[-1]} vs expected {cc}")
        p = self.params
        mask = T.sigmoid(T.depthwise_conv2d(x, p["attention.kernel"], p["attention.bias"]))
        return T.mul(x, mask)

    def forward(self, x) -> Tensor:
        """Batch of patches (B, M, M, P) -> logits (B, num_classes)."""
        cfg = self.config
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=next(iter(self.params.values())).dtype)
        m, pc = cfg.patch_size, cfg.num_components
        if x.ndim != 4 or x.shape[1:] != (m, m, pc):
            raise DimensionError(
                f"forward: expected (B, {m}, {m}, {pc}), got {x.shape}"
            )
        b = x.shape[0]
        x = T.reshape(x, (b, m, m, pc, 1))
        x = self.stem(x)
        branches = []
        if cfg.use_spectral:
            branches.append(self.spectral_mixer(x))
        if cfg.use_spatial:
            branches.append(self.spatial_mixer(x))
        if len(branches) == 2:
            x = T.concat(branches, axis=-1)
        elif len(branches) == 1:
            x = branches[0]
        x = T.reshape(x, (b, m, m, cfg.feature_channels))
        if cfg.use_attention:
            x = self.attention(x)
        x = T.global_avg_pool(x)
        return T.dense(x, self.params["head.weight"], self.params["head.bias"])

    def predict(self, x, batch_size: int = 256):
        """Class ids and softmax probabilities; ties go to the lower id."""
        ids, probs = [], []
        n = len(x)
        with T.no_grad():
            for lo in range(0, n, batch_size):
                logits = self.forward(x[lo:lo + batch_size]).data
                z = logits - logits.max(axis=1, keepdims=True)
                e = np.exp(z)
                p = e / e.sum(axis=1, keepdims=True)
                ids.append(p.argmax(axis=1))
                probs.append(p)
        return np.concatenate(ids), np.concatenate(probs)


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def build(config: ModelConfig, dtype=np.float32) -> Model:
    """Materialize all parameters, Glorot-uniform weights and zero biases.

    The draw order is fixed (stem, spectral blocks, spatial blocks,
    attention, head) so a given seed yields bitwise-identical parameters.
    ``dtype=np.float64`` builds the verification-mode model used by
    gradient checks.
    """
    cfg = config
    rng = np.random.default_rng(cfg.init_seed)
    f1, d = cfg.stem_filters, cfg.stem_channels
    pc, hd, m = cfg.num_components, cfg.hidden_dim, cfg.patch_size
    params: dict[str, Tensor] = {}

    params["stem.conv1.kernel"] = _glorot(rng, (3, 3, 3, 1, f1), 27 * 1, 27 * f1, dtype)
    params["stem.conv1.bias"] = _zeros((f1,), dtype)
    params["stem.conv2.kernel"] = _glorot(rng, (3, 3, 3, f1, d), 27 * f1, 27 * d, dtype)
    params["stem.conv2.bias"] = _zeros((d,), dtype)

    if cfg.use_spectral:
        for i in range(cfg.num_blocks):
            params[f"spectral.{i}.w1"] = _glorot(rng, (pc, hd), pc, hd, dtype)
            params[f"spectral.{i}.b1"] = _zeros((hd,), dtype)
            params[f"spectral.{i}.w2"] = _glorot(rng, (hd, pc), hd, pc, dtype)
            params[f"spectral.{i}.b2"] = _zeros((pc,), dtype)
    if cfg.use_spatial:
        for i in range(cfg.num_blocks):
            params[f"spatial.{i}.w1"] = _glorot(rng, (m * m, hd), m * m, hd, dtype)
            params[f"spatial.{i}.b1"] = _zeros((hd,), dtype)
            params[f"spatial.{i}.w2"] = _glorot(rng, (hd, m * m), hd, m * m, dtype)
            params[f"spatial.{i}.b2"] = _zeros((m * m,), dtype)

    cc = cfg.feature_channels
    if cfg.use_attention:
        params["attention.kernel"] = _glorot(rng, (3, 3, cc), 9, 9, dtype)
        params["attention.bias"] = _zeros((cc,), dtype)

    params["head.weight"] = _glorot(rng, (cc, cfg.num_classes), cc, cfg.num_classes, dtype)
    params["head.bias"] = _zeros((cfg.num_classes,), dtype)
    return Model(cfg, params)


# ---------------------------------------------------------------------------
# checkpoint i/o
#
# Layout (all integers little-endian):
#   magic "SSMX" | version u32 | config-JSON length u32 | config JSON utf-8
#   | param count u32 | per parameter:
#       name length u16 | name utf-8 | ndim u8 | dims u32 * ndim
#       | float32 data (row-major)


def save_checkpoint(model: Model, path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_json = json.dumps(asdict(model.config), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg_json)))
    buf.write(cfg_json)
    buf.write(struct.pack("<I", len(model.params)))
    for name, p in model.params.items():
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def _read_exact(f, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise FormatError(f"checkpoint truncated while reading {what} "
                          f"(wanted {n} bytes, got {len(b)})")
    return b


def load_checkpoint(path, expect_config: ModelConfig | None = None) -> Model:
    """Rebuild a Model from a checkpoint file.

    ``expect_config`` guards loading into a known setup: a mismatch with
    the stored config raises FormatError.
    """
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad magic, not a checkpoint file")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
        cfg_dict = json.loads(_read_exact(f, cfg_len, "config"))
        known = {fl.name for fl in fields(ModelConfig)}
        if set(cfg_dict) != known:
            raise FormatError(f"{path}: config fields {sorted(cfg_dict)} do not match")
        config = ModelConfig(**cfg_dict)
        if expect_config is not None and config != expect_config:
            raise FormatError(f"{path}: checkpoint config {config} does not match "
                              f"expected {expect_config}")
        (count,) = struct.unpack("<I", _read_exact(f, 4, "parameter count"))
        params: dict[str, Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode()
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, "ndim"))
            dims = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "dims"))
            n = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            raw = _read_exact(f, 4 * n, f"data of {name}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
            params[name] = Tensor(arr, requires_grad=True)
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after last parameter")

    model = Model(config, params)
    expected = {name: p.shape for name, p in build(config).params.items()}
    got = {name: p.shape for name, p in params.items()}
    if expected != got:
        raise FormatError(f"{path}: parameter set does not match config "
                          f"(missing {sorted(set(expected) - set(got))}, "
                          f"unexpected {sorted(set(got) - set(expected))})")
    return model
