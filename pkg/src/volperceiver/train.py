"""Training engine: config, Adam, the training loop, evaluation and the preprocessor comparison."""
from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import (ISPRS_CLASSES, SYNTH_CLASSES, MultimodalScene, SplitSpec, TileSample, load_mmrt_dir, split_by_ids,
                   synth_dataset, tile_scene, write_pgm, write_ppm)
from .metrics import MetricsReport, class_proportions, confusion_matrix
from .model import SegmentationModel
from .objectives import joint_loss_from_logits
from .perceiver import load_checkpoint, load_parameters, save_checkpoint
from .preprocess import PreprocessorKind
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

CONFIG_NAME = "config.txt"
CHECKPOINT_NAME = "model.ckpt"


class NonFiniteLossError(FloatingPointError):
    pass


# -- config -------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Flat training configuration; every field round-trips through ``key = value`` text."""

    # preprocessor
    preprocessor: str = "unet3d"
    filters: int = 32
    base_filters: int = 16
    stages: int = 2
    out_features: int = 64
    feature_width: int = 64       # preprocessor outputs are zero-padded to this width
    # perceiver
    num_latents: int = 256
    latent_dim: int = 128
    num_heads: int = 4
    num_blocks: int = 4
    mlp_ratio: int = 2
    pos_encoding: str = "fourier"
    num_bands: int = 16
    max_freq: float = 32.0
    decoder_queries: str = "position+features"
    # optimisation
    lr: float = 1e-3
    steps: int = 300
    batch_size: int = 2
    seed: int = 0
    val_every: int = 0
    # data
    tile_size: int = 64
    dataset: str = "synthetic"
    recipe: str = "vaihingen"
    split_file: str = ""
    classes: str = ""             # comma-separated class names; empty picks the dataset default
    data_seed: int = 0
    synth_size: int = 64
    synth_train: int = 8
    synth_val: int = 0
    synth_test: int = 0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", "float") and not isinstance(v, bool):
                v = (int if f.type == "int" else float)(v)
                setattr(self, f.name, v)
        positive = ("filters", "base_filters", "out_features", "feature_width", "num_latents", "latent_dim",
                    "num_heads", "num_blocks", "mlp_ratio", "num_bands", "max_freq", "lr", "steps",
                    "batch_size", "tile_size", "synth_size", "synth_train")
        bad = [k for k in positive if getattr(self, k) <= 0]
        if bad:
            raise ValueError(f"config values must be positive: {', '.join(bad)}")
        if self.seed < 0 or self.data_seed < 0 or self.val_every < 0:
            raise ValueError("seeds and val_every must be non-negative")
        self.preprocessor_kind()
        self.perceiver_config()

    def preprocessor_kind(self) -> PreprocessorKind:
        return PreprocessorKind(self.preprocessor, self.filters, self.base_filters, self.stages,
                                self.out_features)

    def perceiver_dict(self) -> dict:
        return dict(num_classes=self.num_classes, num_latents=self.num_latents, latent_dim=self.latent_dim,
                    num_heads=self.num_heads, num_blocks=self.num_blocks, mlp_ratio=self.mlp_ratio,
                    pos_encoding=self.pos_encoding, num_bands=self.num_bands, max_freq=self.max_freq,
                    decoder_queries=self.decoder_queries)

    def perceiver_config(self):
        from .perceiver import PerceiverConfig
        return PerceiverConfig(input_channels=1, **self.perceiver_dict())

    @property
    def class_names(self) -> tuple[str, ...]:
        if self.classes:
            return tuple(c.strip() for c in self.classes.split(",") if c.strip())
        return SYNTH_CLASSES if self.dataset == "synthetic" else ISPRS_CLASSES

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def to_text(self) -> str:
        """Canonical text: one ``key = value`` per line, keys sorted."""
        items = sorted(dataclasses.asdict(self).items())
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in items)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        values = {}
        known = {f.name: f for f in dataclasses.fields(cls)}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in known:
                raise ValueError(f"config line {lineno}: unknown or malformed entry {line!r}")
            values[key] = _parse_value(value, known[key].type)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def _format_value(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(text: str, type_name: str):
    if type_name == "int":
        return int(text)
    if type_name == "float":
        return float(text)
    return text


# -- optimiser ----------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """In-place bias-corrected Adam update of ``params``; ``None`` grads count as zero."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                  self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- data ---------------------------------------------------------------------------

@dataclass
class DataSplits:
    train: list[TileSample]
    val: list[TileSample]
    test: list[TileSample]
    class_names: tuple[str, ...]

    def get(self, name: str) -> list[TileSample]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def load_scenes(config: TrainConfig) -> tuple[list[MultimodalScene], SplitSpec]:
    if config.dataset == "synthetic":
        n = config.synth_train + config.synth_val + config.synth_test
        scenes = synth_dataset(config.data_seed, n, config.synth_size)
        ids = [s.scene_id for s in scenes]
        a, b = config.synth_train, config.synth_train + config.synth_val
        return scenes, SplitSpec(ids[:a], ids[a:b], ids[b:])
    scenes = load_mmrt_dir(config.dataset)
    if not scenes:
        raise FileNotFoundError(f"no .mmrt files in {config.dataset}")
    if not config.split_file:
        raise ValueError("an MMRT dataset needs split_file")
    return scenes, SplitSpec.parse(Path(config.split_file).read_text())


def load_splits(config: TrainConfig) -> DataSplits:
    scenes, spec = load_scenes(config)
    parts = split_by_ids(scenes, spec)
    tiles = [[t for s in part for t in tile_scene(s, config.tile_size, recipe=config.recipe)] for part in parts]
    return DataSplits(*tiles, class_names=config.class_names)


def stack_tiles(tiles: Sequence[TileSample]) -> tuple[np.ndarray, np.ndarray | None]:
    x = np.stack([t.features for t in tiles]).astype(np.float32)
    masks = [t.mask for t in tiles]
    y = None if any(m is None for m in masks) else np.stack(masks).astype(np.int64)
    return x, y


# -- training -----------------------------------------------------------------------

@dataclass
class RunRecord:
    config_hash: str
    losses: list[float]
    wall_time: float
    reports: dict[str, MetricsReport] = field(default_factory=dict)
    val_history: list[tuple[int, float]] = field(default_factory=list)
    run_dir: Path | None = None

    def losses_csv(self) -> str:
        return "step,loss\n" + "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(self.losses))


def build_model(config: TrainConfig) -> SegmentationModel:
    return SegmentationModel(config.preprocessor_kind(), config.perceiver_dict(), config.tile_size,
                             seed=config.seed, feature_width=config.feature_width)


def batch_schedule(num_tiles: int, steps: int, batch_size: int, seed: int) -> list[np.ndarray]:
    """Index batches drawn from consecutive seeded permutations (epochs)."""
    if num_tiles < batch_size:
        raise ValueError(f"{num_tiles} training tiles cannot fill a batch of {batch_size}")
    rng = np.random.default_rng([seed, 1])
    pool: list[int] = []
    out = []
    for _ in range(steps):
        if len(pool) < batch_size:
            pool.extend(rng.permutation(num_tiles).tolist())
        out.append(np.array(pool[:batch_size]))
        del pool[:batch_size]
    return out


def train(config: TrainConfig, run_dir=None, data: DataSplits | None = None, evaluate_splits=("train",),
          log_every: int = 10) -> tuple[RunRecord, SegmentationModel]:
    """Train from scratch; writes config, checkpoint and loss log into ``run_dir`` when given."""
    data = data or load_splits(config)
    if not data.train:
        raise ValueError("training split is empty")
    x, y = stack_tiles(data.train)
    if y is None:
        raise ValueError("training tiles have no masks")
    if y.max() >= config.num_classes:
        raise ValueError(f"mask labels exceed the {config.num_classes} configured classes")
    model = build_model(config)
    opt = Adam(model.parameters(), lr=config.lr)
    losses: list[float] = []
    val_history = []
    start = time.perf_counter()
    for step, idx in enumerate(batch_schedule(len(x), config.steps, config.batch_size, config.seed), 1):
        # the loss itself is checked below, so skip the per-op scan in the hot loop
        with T.finite_checks(False):
            logits = model(Tensor(x[idx]))
            loss = joint_loss_from_logits(logits, y[idx])
        value = float(loss.item())
        if not math.isfinite(value):
            raise NonFiniteLossError(f"step {step}: joint loss is {value}; "
                                     f"last finite loss {losses[-1] if losses else 'n/a'}")
        opt.zero_grad()
        backward(loss)
        opt.step()
        losses.append(value)
        if log_every and step % log_every == 0:
            log.info("step %d/%d loss %.4f", step, config.steps, value)
        if config.val_every and data.val and step % config.val_every == 0:
            val_history.append((step, evaluate_model(model, data.val, data.class_names).miou))
    record = RunRecord(config.hash, losses, time.perf_counter() - start, val_history=val_history)
    for split in evaluate_splits:
        tiles = data.get(split)
        if tiles:
            record.reports[split] = evaluate_model(model, tiles, data.class_names)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        config.save(run_dir / CONFIG_NAME)
        save_checkpoint(run_dir / CHECKPOINT_NAME, model)
        (run_dir / "losses.csv").write_text(record.losses_csv())
        for split, report in record.reports.items():
            (run_dir / f"metrics_{split}.csv").write_text(report.to_csv())
        record.run_dir = run_dir
    return record, model


# -- inference / evaluation ----------------------------------------------------------

def predict_logits(model: SegmentationModel, features: np.ndarray, batch_size: int = 4) -> np.ndarray:
    """``[B, C, T, T]`` -> ``[B, T, T, K]`` logits without building a graph."""
    features = np.asarray(features, dtype=np.float32)
    if features.ndim == 3:
        features = features[None]
    t = model.tile_size
    out = []
    with no_grad():
        for i in range(0, len(features), batch_size):
            chunk = features[i:i + batch_size]
            out.append(model(Tensor(chunk)).data.reshape(len(chunk), t, t, -1))
    return np.concatenate(out)


def predict_masks(model: SegmentationModel, features: np.ndarray) -> np.ndarray:
    return np.argmax(predict_logits(model, features), axis=-1).astype(np.uint8)


def evaluate_model(model: SegmentationModel, tiles: Sequence[TileSample], class_names: Sequence[str]
                   ) -> MetricsReport:
    """Confusion matrix accumulated over every tile, reported per class plus summary."""
    k = len(class_names)
    if model.config.num_classes != k:
        raise ValueError(f"model predicts {model.config.num_classes} classes, dataset has {k}")
    x, y = stack_tiles(tiles)
    if y is None:
        raise ValueError("evaluation tiles have no masks")
    pred = predict_masks(model, x)
    return MetricsReport(list(class_names), confusion_matrix(y, pred, k))


def load_run(run_dir) -> tuple[TrainConfig, SegmentationModel]:
    run_dir = Path(run_dir)
    config = TrainConfig.load(run_dir / CONFIG_NAME)
    model = build_model(config)
    load_parameters(model, load_checkpoint(run_dir / CHECKPOINT_NAME))
    return config, model


def evaluate(run_dir, split: str = "test", out_dir=None, previews: int = 4) -> MetricsReport:
    """Evaluate a saved run on one split; writes CSV and colour previews into ``out_dir``."""
    config, model = load_run(run_dir)
    data = load_splits(config)
    tiles = data.get(split)
    if not tiles:
        raise ValueError(f"split {split!r} is empty")
    report = evaluate_model(model, tiles, data.class_names)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"metrics_{split}.csv").write_text(report.to_csv())
        x, y = stack_tiles(tiles[:previews])
        for i, (tile, mask) in enumerate(zip(tiles[:previews], predict_masks(model, x))):
            sid, r, c = tile.origin
            stem = f"{split}_{sid}_{r}_{c}"
            write_ppm(out_dir / f"{stem}_pred.ppm", mask, data.class_names)
            write_ppm(out_dir / f"{stem}_true.ppm", y[i], data.class_names)
    return report


# -- comparison harness --------------------------------------------------------------

@dataclass
class ComparisonRow:
    kind: str
    seeds: list[int]
    small_f1: list[float]
    miou: list[float]
    final_loss: list[float]
    preprocessor_parameters: int
    perceiver_parameters: int

    @property
    def mean_small_f1(self) -> float:
        # NaN seeds (class never predicted) score 0 in the ranking mean
        return float(np.mean(np.nan_to_num(self.small_f1, nan=0.0)))

    @property
    def mean_miou(self) -> float:
        return float(np.mean(self.miou))

    @property
    def mean_final_loss(self) -> float:
        return float(np.mean(self.final_loss))


def _kind_config(base: TrainConfig, kind: str) -> TrainConfig:
    name, _, stages = kind.partition("-")
    changes = {"preprocessor": name}
    if stages:
        changes["stages"] = int(stages)
    return base.replace(**changes)


def compare_preprocessors(base: TrainConfig, kinds: Sequence[str], seeds: Sequence[int],
                          small_class: str = "car", split: str = "test") -> list[ComparisonRow]:
    """Train every kind for every seed with one perceiver config; rows ordered by mean small-class F1.

    A kind may carry a stage suffix, e.g. ``unet2d-3``.
    """
    if not kinds:
        raise ValueError("need at least one preprocessor kind")
    if not seeds:
        raise ValueError("need at least one seed")
    data = load_splits(base)
    if small_class not in data.class_names:
        raise ValueError(f"unknown class {small_class!r}")
    ci = data.class_names.index(small_class)
    rows = []
    perceiver_counts = set()
    for kind in kinds:
        cfg = _kind_config(base, kind)
        row = ComparisonRow(kind, list(seeds), [], [], [], 0, 0)
        for seed in seeds:
            record, model = train(cfg.replace(seed=seed), data=data, evaluate_splits=(split,), log_every=0)
            report = record.reports[split]
            row.small_f1.append(float(report.f1[ci]))
            row.miou.append(report.miou)
            row.final_loss.append(record.losses[-1])
            row.preprocessor_parameters = model.preprocessor_parameters()
            row.perceiver_parameters = model.perceiver_parameters()
            log.info("%s seed %d: %s F1 %s mIoU %.3f", kind, seed, small_class, report.f1[ci], report.miou)
        perceiver_counts.add(row.perceiver_parameters)
        rows.append(row)
    if len(perceiver_counts) != 1:
        raise AssertionError(f"perceiver parameter counts differ across kinds: {sorted(perceiver_counts)}")
    return sorted(rows, key=lambda r: r.mean_small_f1)


def comparison_csv(rows: Sequence[ComparisonRow], small_class: str = "car") -> str:
    lines = [f"kind,mean_{small_class}_f1,mean_miou,mean_final_loss,{small_class}_f1_per_seed,"
             "preprocessor_parameters,perceiver_parameters"]
    for r in rows:
        per_seed = ";".join("NaN" if math.isnan(v) else f"{v:.6f}" for v in r.small_f1)
        lines.append(f"{r.kind},{r.mean_small_f1:.6f},{r.mean_miou:.6f},{r.mean_final_loss:.6f},{per_seed},"
                     f"{r.preprocessor_parameters},{r.perceiver_parameters}")
    return "\n".join(lines) + "\n"


# -- prediction / statistics ---------------------------------------------------------

def predict_tile(run_dir, features: np.ndarray, out_stem) -> np.ndarray:
    """Argmax mask for one ``[C, T, T]`` tile written as ``<stem>.pgm`` and ``<stem>.ppm``."""
    config, model = load_run(run_dir)
    features = np.asarray(features, dtype=np.float32)
    if features.ndim != 3 or features.shape[0] != model.in_channels:
        raise ValueError(f"tile must be [{model.in_channels}, T, T], got {features.shape}")
    mask = predict_masks(model, features)[0]
    out_stem = Path(out_stem)
    out_stem.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(out_stem.with_suffix(".pgm"), mask)
    write_ppm(out_stem.with_suffix(".ppm"), mask, config.class_names)
    return mask


def class_stats(config: TrainConfig) -> dict[str, np.ndarray]:
    """Per-split class fractions over the split's scene masks."""
    scenes, spec = load_scenes(config)
    out = {}
    for name, part in zip(("train", "val", "test"), split_by_ids(scenes, spec)):
        masks = [s.mask for s in part if s.mask is not None]
        if not masks:
            if getattr(spec, name):
                raise ValueError(f"split {name!r} has no masks")
            continue
        out[name] = class_proportions(masks, config.num_classes)
    if not out:
        raise ValueError("no split has masks")
    return out


def class_stats_csv(stats: dict[str, np.ndarray], class_names: Sequence[str]) -> str:
    lines = ["split," + ",".join(class_names)]
    for split, fr in stats.items():
        lines.append(split + "," + ",".join(f"{v:.6f}" for v in fr))
    return "\n".join(lines) + "\n"
