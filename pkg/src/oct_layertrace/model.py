"""Three-stage CNN + BLSTM boundary tracer.

Stage 1 maps the (image, position cue) pair to one soft mask per region,
stage 2 turns those masks into a single edge map, and stage 3 scans the
columns of that edge map with two bidirectional LSTM layers to emit one row
coordinate per boundary and column.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from . import ops
from .exceptions import ConfigError, DimensionError
from .layers import BlstmLayer, ConvLayer, Module, TimeDistributedDense, load_arrays, save_arrays
from .tensor import Tensor, as_tensor, concat, transpose

CONFIG_VERSION = 1

# (rows, cols) of every convolution, per module.
LOI_KERNELS = {"HM1": (20, 30), "HM2": (20, 30), "VM1": (30, 20), "VM2": (30, 20), "SM1": (10, 10), "SM2": (5, 5)}
EDGE_KERNELS = {"HM1": (15, 20), "HM2": (15, 20), "VM1": (20, 15), "VM2": (20, 15), "SM1": (10, 10), "SM2": (5, 5)}
REFERENCE_SIZE = (300, 800)
LAYER_NAMES = ("HM1", "HM2", "VM1", "VM2", "SM1", "SM2")


@dataclass
class ModelConfig:
    n_boundaries: int = 8
    height: int = 300
    width: int = 800
    loi_kernels: Dict[str, Tuple[int, int]] = field(default_factory=lambda: dict(LOI_KERNELS))
    loi_channels: int = 32
    edge_kernels: Dict[str, Tuple[int, int]] = field(default_factory=lambda: dict(EDGE_KERNELS))
    edge_channels: int = 16
    shifts: Tuple[int, ...] = (-2, -1, 0, 1, 2)
    lstm_sizes: Tuple[int, int] = (64, 32)
    input_channels: int = 2
    dtype: str = "float32"
    seed: int = 0
    version: int = CONFIG_VERSION

    def __post_init__(self):
        self.loi_kernels = {k: tuple(int(v) for v in s) for k, s in self.loi_kernels.items()}
        self.edge_kernels = {k: tuple(int(v) for v in s) for k, s in self.edge_kernels.items()}
        self.shifts = tuple(int(k) for k in self.shifts)
        self.lstm_sizes = tuple(int(h) for h in self.lstm_sizes)
        self.validate()

    @property
    def n_regions(self) -> int:
        return self.n_boundaries + 1

    @property
    def stripe_length(self) -> int:
        return len(self.shifts) * self.height

    def validate(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported model config version {self.version}")
        if self.n_boundaries < 1:
            raise ConfigError("n_boundaries must be >= 1")
        if self.height < 2 or self.width < 1:
            raise ConfigError("image size must be at least 2x1")
        for table in (self.loi_kernels, self.edge_kernels):
            if set(table) != set(LAYER_NAMES):
                raise ConfigError(f"kernel table needs exactly {LAYER_NAMES}")
            for name, (kh, kw) in table.items():
                if not (1 <= kh <= self.height and 1 <= kw <= self.width):
                    raise ConfigError(f"kernel {name} {kh}x{kw} does not fit a {self.height}x{self.width} image")
        if not self.shifts or len(set(self.shifts)) != len(self.shifts):
            raise ConfigError("shifts must be a non-empty set of distinct offsets")
        if len(self.lstm_sizes) != 2 or min(self.lstm_sizes) < 1:
            raise ConfigError("lstm_sizes must hold two positive widths")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def filter_shapes(self) -> Dict[str, Tuple[int, int, int, int]]:
        """(rows, cols, in_channels, out_channels) of every convolution."""
        c1, c2, r = self.loi_channels, self.edge_channels, self.n_regions
        k1, k2 = self.loi_kernels, self.edge_kernels
        return {
            "loi.HM1": (*k1["HM1"], self.input_channels, c1),
            "loi.HM2": (*k1["HM2"], c1, c1),
            "loi.VM1": (*k1["VM1"], self.input_channels, c1),
            "loi.VM2": (*k1["VM2"], c1, c1),
            "loi.SM1": (*k1["SM1"], 2 * c1, c1),
            "loi.SM2": (*k1["SM2"], c1, r),
            "edge.HM1": (*k2["HM1"], r, c2),
            "edge.HM2": (*k2["HM2"], c2, c2),
            "edge.VM1": (*k2["VM1"], r, c2),
            "edge.VM2": (*k2["VM2"], c2, c2),
            "edge.SM1": (*k2["SM1"], 2 * c2, c2),
            "edge.SM2": (*k2["SM2"], c2, 1),
        }

    def parameter_count(self) -> int:
        """Analytic number of trainable scalars."""
        conv = sum(kh * kw * cin * cout + cout for kh, kw, cin, cout in self.filter_shapes().values())
        h1, h2 = self.lstm_sizes
        lstm = 2 * 4 * h1 * (self.stripe_length + h1 + 1) + 2 * 4 * h2 * (2 * h1 + h2 + 1)
        return conv + lstm + self.n_boundaries * 2 * h2 + self.n_boundaries

    @classmethod
    def reduced(cls, height: int, width: int, n_boundaries: int = 8, **overrides) -> "ModelConfig":
        """Config for a smaller image with kernels scaled by the size ratio."""
        fy, fx = height / REFERENCE_SIZE[0], width / REFERENCE_SIZE[1]

        def scale(table):
            return {k: (max(1, int(round(kh * fy))), max(1, int(round(kw * fx)))) for k, (kh, kw) in table.items()}

        return cls(
            n_boundaries=n_boundaries,
            height=height,
            width=width,
            loi_kernels=scale(LOI_KERNELS),
            edge_kernels=scale(EDGE_KERNELS),
            **overrides,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loi_kernels"] = {k: list(v) for k, v in self.loi_kernels.items()}
        d["edge_kernels"] = {k: list(v) for k, v in self.edge_kernels.items()}
        d["shifts"] = list(self.shifts)
        d["lstm_sizes"] = list(self.lstm_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        if "version" not in d:
            raise ConfigError("model config requires a 'version' field")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid model config: {exc}") from exc

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(d)


@dataclass
class StageOutputs:
    """Side outputs and final trace of one forward pass (NCHW layout)."""

    loi: Tensor
    edge: Tensor
    boundaries: Tensor
    boundaries_norm: Tensor


class LayerTraceNet(Module):
    def __init__(self, config: Optional[ModelConfig] = None):
        self.config = config = config or ModelConfig()
        rng = np.random.default_rng(config.seed)
        dt = np.dtype(config.dtype)
        c1, c2, r = config.loi_channels, config.edge_channels, config.n_regions
        k1, k2 = config.loi_kernels, config.edge_kernels
        cin = config.input_channels
        self.loi_hm1 = ConvLayer(cin, c1, k1["HM1"], "relu", rng, dt)
        self.loi_hm2 = ConvLayer(c1, c1, k1["HM2"], "relu", rng, dt)
        self.loi_vm1 = ConvLayer(cin, c1, k1["VM1"], "relu", rng, dt)
        self.loi_vm2 = ConvLayer(c1, c1, k1["VM2"], "relu", rng, dt)
        self.loi_sm1 = ConvLayer(2 * c1, c1, k1["SM1"], "relu", rng, dt)
        self.loi_sm2 = ConvLayer(c1, r, k1["SM2"], "sigmoid", rng, dt)
        self.edge_hm1 = ConvLayer(r, c2, k2["HM1"], "relu", rng, dt)
        self.edge_hm2 = ConvLayer(c2, c2, k2["HM2"], "relu", rng, dt)
        self.edge_vm1 = ConvLayer(r, c2, k2["VM1"], "relu", rng, dt)
        self.edge_vm2 = ConvLayer(c2, c2, k2["VM2"], "relu", rng, dt)
        self.edge_sm1 = ConvLayer(2 * c2, c2, k2["SM1"], "relu", rng, dt)
        self.edge_sm2 = ConvLayer(c2, 1, k2["SM2"], "sigmoid", rng, dt)
        h1, h2 = config.lstm_sizes
        self.blstm1 = BlstmLayer(config.stripe_length, h1, rng, dt)
        self.blstm2 = BlstmLayer(2 * h1, h2, rng, dt)
        self.td = TimeDistributedDense(2 * h2, config.n_boundaries, rng, dt)
        self._check_channels()

    def _check_channels(self):
        cfg = self.config
        shapes = cfg.filter_shapes()
        for key, (kh, kw, cin, cout) in shapes.items():
            stage, name = key.split(".")
            layer = getattr(self, f"{stage}_{name.lower()}")
            assert layer.kernel_shape == (cout, cin, kh, kw), (key, layer.kernel_shape)
        assert shapes["loi.SM1"][2] == shapes["loi.HM2"][3] + shapes["loi.VM2"][3]
        assert shapes["edge.SM1"][2] == shapes["edge.HM2"][3] + shapes["edge.VM2"][3]
        assert shapes["loi.SM2"][3] == cfg.n_regions and shapes["edge.SM2"][3] == 1
        assert self.td.weights.shape[0] == cfg.n_boundaries

    # -- layout helpers ---------------------------------------------------------
    def _to_hwnc(self, x, channels):
        x = as_tensor(x)
        if x.ndim not in (3, 4):
            raise DimensionError(f"expected (N,)C,H,W input, got shape {x.shape}")
        batched = x.ndim == 4
        c, h, w = x.shape[-3:]
        if c != channels:
            raise ConfigError(f"expected {channels} input channels, got {c}")
        if (h, w) != (self.config.height, self.config.width):
            raise ConfigError(f"input is {h}x{w}, model expects {self.config.height}x{self.config.width}")
        if x.dtype != np.dtype(self.config.dtype) and not x.requires_grad:
            x = Tensor(x.data.astype(self.config.dtype))
        if not batched:
            x = x.reshape((1,) + x.shape)
        return transpose(x, (2, 3, 0, 1)), batched

    @staticmethod
    def _from_hwnc(t, batched):
        out = transpose(t, (2, 3, 0, 1))
        return out if batched else out[0]

    # -- stages ------------------------------------------------------------------
    def _loi(self, x):
        hm = self.loi_hm2(self.loi_hm1(x))
        vm = self.loi_vm2(self.loi_vm1(x))
        return self.loi_sm2(self.loi_sm1(concat([hm, vm], axis=-1)))

    def _edge(self, loi):
        hm = self.edge_hm2(self.edge_hm1(loi))
        vm = self.edge_vm2(self.edge_vm1(loi))
        return self.edge_sm2(self.edge_sm1(concat([hm, vm], axis=-1)))

    def stage1_loi(self, x) -> Tensor:
        xh, batched = self._to_hwnc(x, self.config.input_channels)
        return self._from_hwnc(self._loi(xh), batched)

    def stage2_edge(self, loi) -> Tensor:
        lh, batched = self._to_hwnc(loi, self.config.n_regions)
        return self._from_hwnc(self._edge(lh), batched)

    def extract_stripes(self, edge) -> Tensor:
        return ops.extract_stripes(edge, self.config.shifts)

    def stage3_normalized(self, stripes) -> Tensor:
        """BLSTM x2 + time-distributed dense; returns (N, B, W) coordinates / H."""
        stripes = as_tensor(stripes)
        batched = stripes.ndim == 3
        seq = stripes if batched else stripes.reshape((1,) + stripes.shape)
        out = self.td(self.blstm2(self.blstm1(seq)))  # (N, W, B)
        out = transpose(out, (0, 2, 1))
        return out if batched else out[0]

    def stage3_trace(self, stripes) -> Tensor:
        return self.stage3_normalized(stripes) * float(self.config.height)

    def forward(self, x) -> StageOutputs:
        xh, batched = self._to_hwnc(x, self.config.input_channels)
        loi_h = self._loi(xh)
        edge_h = self._edge(loi_h)
        loi = transpose(loi_h, (2, 3, 0, 1))
        edge = transpose(edge_h, (2, 3, 0, 1))
        norm = self.stage3_normalized(self.extract_stripes(edge))
        if not batched:
            loi, edge, norm = loi[0], edge[0], norm[0]
        return StageOutputs(loi=loi, edge=edge, boundaries=norm * float(self.config.height), boundaries_norm=norm)


# -- checkpoints ---------------------------------------------------------------------

def save_model(model: LayerTraceNet, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "model.json").write_text(
        json.dumps({"version": CONFIG_VERSION, "config": model.config.to_dict()}, indent=2, sort_keys=True) + "\n"
    )
    save_arrays(directory / "params", model.state_dict())


def load_model(directory) -> LayerTraceNet:
    directory = Path(directory)
    meta = json.loads((directory / "model.json").read_text())
    if meta.get("version") != CONFIG_VERSION:
        raise ConfigError(f"{directory}: unsupported checkpoint version {meta.get('version')}")
    model = LayerTraceNet(ModelConfig.from_dict(meta["config"]))
    model.load_state_dict(load_arrays(directory / "params"))
    return model
