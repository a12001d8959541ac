"""Multi-stage training: ADADELTA, emphasis sampling over volumes, checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import ops
from .augment import AugmentSpec, Sample, apply_augmentations
from .exceptions import ConfigError, ContractError, DivergenceError
from .layers import load_arrays, load_manifest_extra, save_arrays
from .metrics import boundary_mae
from .model import LayerTraceNet, load_model, save_model
from .preprocess import make_position_cue, standardize
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

TRAIN_CONFIG_VERSION = 1
STAGES = ("stage1", "stage2", "stage3")
STAGE_PREFIXES = {"stage1": ("loi_",), "stage2": ("edge_",), "stage3": ("blstm", "td")}
METRICS_LOG = "metrics.jsonl"


@dataclass
class TrainConfig:
    epochs: int = 250
    loss_weights: tuple = (1.0, 1.0, 1.0)
    rho: float = 0.95
    eps: float = 1e-6
    lr: float = 1.0
    temperature: float = 1.0
    emphasis_floor: float = 0.25
    grad_clip: Optional[float] = 5.0
    checkpoint_every: int = 10
    seed: int = 0
    augment: Optional[dict] = field(default_factory=lambda: AugmentSpec().to_dict())
    divergence_factor: float = 10.0
    divergence_patience: int = 3
    version: int = TRAIN_CONFIG_VERSION

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if len(self.loss_weights) != 3:
            raise ConfigError("loss_weights needs one weight per stage (3)")
        if any(w < 0 for w in self.loss_weights) or not any(w > 0 for w in self.loss_weights):
            raise ConfigError("loss weights must be >= 0 with at least one positive")
        if self.epochs < 1 or self.checkpoint_every < 1:
            raise ConfigError("epochs and checkpoint_every must be >= 1")
        if not 0 < self.rho < 1 or self.eps <= 0 or self.lr <= 0:
            raise ConfigError("ADADELTA needs 0 < rho < 1, eps > 0, lr > 0")
        if self.temperature <= 0 or not 0 <= self.emphasis_floor <= 1:
            raise ConfigError("temperature must be > 0 and emphasis_floor in [0, 1]")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or null")
        if self.version != TRAIN_CONFIG_VERSION:
            raise ConfigError(f"unsupported training config version {self.version}")
        if self.augment is not None:
            self.augment = AugmentSpec.from_dict(self.augment).to_dict()

    def augment_spec(self, height=None, width=None) -> Optional[AugmentSpec]:
        if self.augment is None:
            return None
        spec = AugmentSpec.from_dict(self.augment)
        return spec.scaled_to(height, width) if height else spec

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training config fields: {sorted(unknown)}")
        if "version" not in d:
            raise ConfigError("training config needs an explicit 'version'")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


# -- optimizer --------------------------------------------------------------------------

def adadelta_step(param, grad, sq_grad, sq_delta, rho=0.95, eps=1e-6, lr=1.0):
    """One ADADELTA update in place; returns the applied delta."""
    sq_grad *= rho
    sq_grad += (1 - rho) * grad * grad
    delta = -(np.sqrt(sq_delta + eps) / np.sqrt(sq_grad + eps)) * grad
    sq_delta *= rho
    sq_delta += (1 - rho) * delta * delta
    param += lr * delta
    return delta


class Adadelta:
    """ADADELTA over named parameters; steps with non-finite gradients are skipped."""

    def __init__(self, named_params, rho=0.95, eps=1e-6, lr=1.0):
        self.params = dict(named_params)
        self.rho, self.eps, self.lr = rho, eps, lr
        self.sq_grad = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.sq_delta = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.steps = 0
        self.rejected = 0

    def step(self) -> bool:
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        if not all(np.isfinite(g).all() for g in grads.values()):
            self.rejected += 1
            log.warning("non-finite gradient; step %d rejected", self.steps)
            return False
        for n, g in grads.items():
            p = self.params[n]
            g = g.astype(p.data.dtype, copy=False)
            adadelta_step(p.data, g, self.sq_grad[n], self.sq_delta[n], self.rho, self.eps, self.lr)
        self.steps += 1
        return True

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> Dict[str, np.ndarray]:
        out = {f"sq_grad.{n}": a for n, a in self.sq_grad.items()}
        out.update({f"sq_delta.{n}": a for n, a in self.sq_delta.items()})
        return out

    def load_state_arrays(self, arrays, steps=0, rejected=0):
        for n in self.params:
            self.sq_grad[n] = np.array(arrays[f"sq_grad.{n}"], copy=True)
            self.sq_delta[n] = np.array(arrays[f"sq_delta.{n}"], copy=True)
        self.steps, self.rejected = int(steps), int(rejected)


def clip_gradients(params, max_norm) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the norm."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if max_norm is not None and np.isfinite(norm) and norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


# -- emphasis sampling -----------------------------------------------------------------

def floor_distribution(p, floor) -> np.ndarray:
    """Raise entries below ``floor`` to it and rescale the rest to keep the sum 1."""
    p = np.asarray(p, dtype=np.float64)
    n = p.size
    if floor * n > 1 + 1e-12:
        raise ValueError("floor too large for the number of entries")
    fixed = np.zeros(n, dtype=bool)
    out = p.copy()
    for _ in range(n):
        free = ~fixed
        mass = 1.0 - floor * fixed.sum()
        out[free] = p[free] / p[free].sum() * mass
        low = free & (out < floor)
        if not low.any():
            break
        fixed |= low
        out[fixed] = floor
    return out


class EmphasisState:
    """Per-volume last loss and the sampling distribution derived from it.

    p_v is proportional to exp(loss_v / temperature), then floored at
    ``floor / N`` so every volume keeps a nonzero chance.
    """

    def __init__(self, n_volumes: int, temperature: float = 1.0, floor: float = 0.25):
        if n_volumes < 1:
            raise ValueError("need at least one volume")
        self.losses = np.full(n_volumes, np.nan)
        self.temperature = float(temperature)
        self.floor = float(floor)

    @property
    def n_volumes(self):
        return self.losses.size

    @property
    def warmed_up(self) -> bool:
        return bool(np.isfinite(self.losses).all())

    def update(self, volume: int, loss: float):
        self.losses[volume] = float(loss)

    def raw_probabilities(self) -> np.ndarray:
        if not self.warmed_up:
            return np.full(self.n_volumes, 1.0 / self.n_volumes)
        z = self.losses / self.temperature
        e = np.exp(z - z.max())
        return e / e.sum()

    def probabilities(self) -> np.ndarray:
        return floor_distribution(self.raw_probabilities(), self.floor / self.n_volumes)

    def sample(self, rng) -> int:
        return int(rng.choice(self.n_volumes, p=self.probabilities()))


# -- data preparation --------------------------------------------------------------------

@dataclass
class PreparedSlice:
    sample: Sample  # standardized image, standardized-space GT
    record: object  # StandardizedInput


def prepare_volume(volume, height: int, width: int) -> List[PreparedSlice]:
    out = []
    for img, L in zip(volume.images, volume.boundaries):
        rec = standardize(img, height, width)
        Ls = rec.to_standard(L)
        # GT must lie inside the standardized frame to be encodable.
        outside = ~((Ls >= -0.5) & (Ls < height - 0.5)).all(axis=0)
        Ls[:, outside] = np.nan
        out.append(PreparedSlice(Sample.from_boundaries(rec.image, Ls, rec.pixel_valid), rec))
    return out


def batch_targets(samples: Sequence[Sample], dtype=np.float32):
    """Stack network inputs, targets and masks for a list of samples."""
    h, w = samples[0].image.shape
    cue = make_position_cue(h, w)
    x = np.stack([np.stack([s.image, cue]) for s in samples]).astype(dtype)
    regions = np.stack([s.regions() for s in samples]).astype(dtype)
    edge = np.stack([s.edge()[None] for s in samples]).astype(dtype)
    valid = np.stack([s.valid for s in samples])  # (N, W)
    pix = np.stack([s.pixel_mask for s in samples]) & valid[:, None, :]
    L = np.stack([np.where(s.valid[None], s.boundaries, 0.0) for s in samples]) / h
    return {
        "x": x,
        "regions": regions,
        "edge": edge,
        "pixel_mask": pix[:, None].astype(dtype),
        "coords": L.astype(dtype),
        "column_mask": np.broadcast_to(valid[:, None, :], L.shape).astype(dtype),
    }


def stage_losses(model: LayerTraceNet, batch, weights):
    out = model.forward(batch["x"])
    losses = {}
    if weights[0] > 0:
        m = np.broadcast_to(batch["pixel_mask"], batch["regions"].shape)
        losses["stage1"] = ops.bce_loss(out.loi, batch["regions"], m)
    if weights[1] > 0:
        losses["stage2"] = ops.bce_loss(out.edge, batch["edge"], batch["pixel_mask"])
    if weights[2] > 0:
        losses["stage3"] = ops.mse_loss(out.boundaries_norm, batch["coords"], batch["column_mask"])
    total = None
    for k, w in zip(STAGES, weights):
        if k in losses:
            term = losses[k] * w
            total = term if total is None else total + term
    return total, losses, out


def stage_grad_norms(model) -> Dict[str, float]:
    norms = {}
    for stage, prefixes in STAGE_PREFIXES.items():
        sq = 0.0
        for name, p in model.named_parameters():
            if name.startswith(prefixes) and p.grad is not None:
                sq += float(np.sum(np.square(p.grad, dtype=np.float64)))
        norms[stage] = float(np.sqrt(sq))
    return norms


def predict_standardized(model: LayerTraceNet, samples: Sequence[Sample]) -> np.ndarray:
    """Boundary rows (N, B, W) in standardized space, no gradient tracking."""
    h, w = samples[0].image.shape
    cue = make_position_cue(h, w)
    x = np.stack([np.stack([s.image, cue]) for s in samples]).astype(model.config.dtype)
    with no_grad():
        return model.forward(x).boundaries.data.astype(np.float64)


def evaluate_prepared(model, prepared: Sequence[Sequence[PreparedSlice]]) -> np.ndarray:
    """Per-scan, per-boundary MAE (S, B) over the given prepared volumes."""
    rows = []
    for vol in prepared:
        samples = [p.sample for p in vol]
        pred = predict_standardized(model, samples)
        gt = np.stack([s.boundaries for s in samples])
        rows.append(boundary_mae(pred, gt))
    return np.concatenate(rows)


# -- checkpoints --------------------------------------------------------------------------

def _rng_state(rng) -> dict:
    return rng.bit_generator.state


def save_checkpoint(directory, model, optimizer, emphasis, rng, epoch, config: TrainConfig):
    directory = Path(directory)
    tmp = directory.with_name(directory.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    save_model(model, tmp)
    extra = {
        "epoch": int(epoch),
        "steps": optimizer.steps,
        "rejected": optimizer.rejected,
        "emphasis_losses": [None if not np.isfinite(v) else float(v) for v in emphasis.losses],
        "rng": _rng_state(rng),
        "train_config": config.to_dict(),
    }
    save_arrays(tmp / "optimizer", optimizer.state_arrays(), extra)
    if directory.exists():
        shutil.rmtree(directory)
    tmp.rename(directory)
    (directory.parent / "latest").write_text(directory.name + "\n")


def latest_checkpoint(out_dir) -> Optional[Path]:
    marker = Path(out_dir) / "latest"
    if not marker.exists():
        return None
    path = Path(out_dir) / marker.read_text().strip()
    return path if path.exists() else None


# -- training loop ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: LayerTraceNet
    history: List[dict]
    checkpoints: List[Path]


def _read_log(path, max_epoch):
    if not path.exists():
        return []
    records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    return [r for r in records if r["epoch"] <= max_epoch]


def train(model: LayerTraceNet, volumes: Sequence, config: TrainConfig, out_dir=None,
          val_volumes: Sequence = (), resume: bool = False, callback=None) -> TrainResult:
    """Train ``model`` on ``volumes`` (each volume is one batch).

    An epoch has one step per training volume.  The first epoch visits every
    volume once in random order; later epochs sample by emphasis.  With
    ``out_dir`` set, checkpoints and the JSON-lines metrics log are written
    there and ``resume`` continues from the latest checkpoint.  A ``callback``
    receives each epoch record; returning True ends training after that epoch.
    """
    cfg_m = model.config
    if not volumes:
        raise ContractError("no training volumes")
    for v in list(volumes) + list(val_volumes):
        if v.boundaries.shape[1] != cfg_m.n_boundaries:
            raise ConfigError(
                f"volume {v.name} has {v.boundaries.shape[1]} boundaries, model expects {cfg_m.n_boundaries}"
            )
    h, w = cfg_m.height, cfg_m.width
    prepared = [prepare_volume(v, h, w) for v in volumes]
    val_prepared = [prepare_volume(v, h, w) for v in val_volumes]
    aug = config.augment_spec(h, w)

    rng = np.random.default_rng(config.seed)
    optimizer = Adadelta(model.named_parameters(), config.rho, config.eps, config.lr)
    emphasis = EmphasisState(len(prepared), config.temperature, config.emphasis_floor)
    history: List[dict] = []
    checkpoints: List[Path] = []
    start = 1
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / METRICS_LOG
        ckpt = latest_checkpoint(out) if resume else None
        if ckpt is not None:
            model.load_state_dict(load_model(ckpt).state_dict())
            extra = load_manifest_extra(ckpt / "optimizer")
            optimizer.load_state_arrays(load_arrays(ckpt / "optimizer"), extra["steps"], extra["rejected"])
            emphasis.losses = np.array([np.nan if v is None else v for v in extra["emphasis_losses"]])
            rng.bit_generator.state = extra["rng"]
            start = extra["epoch"] + 1
            history = _read_log(log_path, extra["epoch"])
            log.info("resumed from %s at epoch %d", ckpt, start)
        log_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in history))

    initial = history[0]["loss"] if history else None
    strikes = 0
    for r in history[1:]:
        strikes = strikes + 1 if r["loss"] > config.divergence_factor * initial else 0

    for epoch in range(start, config.epochs + 1):
        if epoch == 1 or not emphasis.warmed_up:
            order = [int(i) for i in rng.permutation(len(prepared))]
        else:
            order = [emphasis.sample(rng) for _ in range(len(prepared))]
        sums = {k: 0.0 for k in ("loss",) + STAGES}
        grad_norms = {k: 0.0 for k in STAGES}
        for vid in order:
            samples = [p.sample for p in prepared[vid]]
            if aug is not None:
                samples = [apply_augmentations(s, aug, rng) for s in samples]
            batch = batch_targets(samples, cfg_m.dtype)
            optimizer.zero_grad()
            total, losses, _ = stage_losses(model, batch, config.loss_weights)
            total.backward()
            for k, v in stage_grad_norms(model).items():
                grad_norms[k] += v / len(order)
            clip_gradients(model.parameters(), config.grad_clip)
            optimizer.step()
            value = float(total.data)
            emphasis.update(vid, value)
            sums["loss"] += value / len(order)
            for k, l in losses.items():
                sums[k] += float(l.data) / len(order)

        record = {"epoch": epoch, "loss": sums["loss"], "volumes": order,
                  "losses": {k: sums[k] for k in STAGES}, "grad_norms": grad_norms}
        is_ckpt = epoch % config.checkpoint_every == 0 or epoch == config.epochs
        if is_ckpt and val_prepared:
            per_scan = evaluate_prepared(model, val_prepared)
            record["eval_mae"] = [float(v) for v in np.nanmean(per_scan, axis=0)]
            record["eval_mae_overall"] = float(np.nanmean(per_scan))
        history.append(record)
        if out is not None:
            with open(out / METRICS_LOG, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            if is_ckpt:
                path = out / f"ckpt_{epoch:05d}"
                save_checkpoint(path, model, optimizer, emphasis, rng, epoch, config)
                checkpoints.append(path)
        stop = bool(callback(record)) if callback is not None else False

        if not np.isfinite(record["loss"]):
            raise DivergenceError("training loss became non-finite", history=history)
        if initial is None:
            initial = record["loss"]
        elif record["loss"] > config.divergence_factor * initial:
            strikes += 1
            if strikes >= config.divergence_patience:
                raise DivergenceError(
                    f"loss above {config.divergence_factor}x the first epoch for {strikes} epochs", history=history
                )
        else:
            strikes = 0
        if stop:
            break
    return TrainResult(model=model, history=history, checkpoints=checkpoints)
