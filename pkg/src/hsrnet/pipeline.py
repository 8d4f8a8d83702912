"""Training loop, checkpoints, evaluation and ablation sweeps."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import checkpoint, ops
from .autodiff.adam import AdamState, adam_step
from .autodiff.tensor import Tensor
from .data import Sample, augment, crop, dataset_hash
from .density import Adaptive, make_density, make_pyramid
from .model import MODEL_KEYS, HSRNet, ModelConfig
from .objectives import LOSS_NORMS, LossBreakdown, density_loss, game, mae_mse, scale_consistency_loss

log = logging.getLogger(__name__)

COMPONENT_ROWS = (
    ("backbone", dict(use_srm=False, use_cf=False, use_sf=False, use_sc=False)),
    ("+SRM", dict(use_srm=True, use_cf=False, use_sf=False, use_sc=False)),
    ("+SRM+CF", dict(use_srm=True, use_cf=True, use_sf=False, use_sc=False)),
    ("+SRM+SF", dict(use_srm=True, use_cf=False, use_sf=True, use_sc=False)),
    ("+SRM+CF+SF", dict(use_srm=True, use_cf=True, use_sf=True, use_sc=False)),
    ("+SRM+CF+SF+SC", dict(use_srm=True, use_cf=True, use_sf=True, use_sc=True)),
)
RATIOS = (8, 16, 32, 64, 128)
ABLATION_AXES = ("components", "ratio", "sfm_order")


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    epochs: int = 1
    batch_size: int = 1
    k: int = 3
    beta: float = 0.3
    augment: bool = False
    seed: int = 0
    loss_norm: str = "pixels"
    max_steps: int = 0  # 0 = run all epochs
    checkpoint_every: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_norm not in LOSS_NORMS:
            raise ValueError(f"loss_norm must be one of {LOSS_NORMS}")

    def with_model(self, **changes) -> "TrainConfig":
        return replace(self, model=replace(self.model, **changes))


# ---------------------------------------------------------------------------
# flat key = value config files
# ---------------------------------------------------------------------------

_TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name != "model")


def _parse_value(text: str, default):
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, tuple):
        return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    return type(default)(text)


def parse_config(text: str) -> TrainConfig:
    train_defaults = TrainConfig()
    model_defaults = ModelConfig()
    train_kw, model_kw = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or not key:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        if key == "seed":
            # one seed drives both the data order and the weight init
            train_kw[key] = model_kw[key] = _parse_value(value, 0)
        elif key in _TRAIN_KEYS:
            train_kw[key] = _parse_value(value, getattr(train_defaults, key))
        elif key in MODEL_KEYS:
            model_kw[key] = _parse_value(value, getattr(model_defaults, key))
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    return TrainConfig(**train_kw, model=ModelConfig(**model_kw))


def format_config(cfg: TrainConfig) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        return str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)

    lines = [f"{k} = {fmt(getattr(cfg, k))}" for k in _TRAIN_KEYS]
    lines += [f"{k} = {fmt(getattr(cfg.model, k))}" for k in MODEL_KEYS if k != "seed"]
    return "\n".join(lines) + "\n"


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def config_sidecar(ckpt_path) -> Path:
    p = Path(ckpt_path)
    return p.with_name(p.name + ".cfg")


def save_checkpoint(path, model: HSRNet, adam: AdamState | None, cfg: TrainConfig | None = None) -> None:
    checkpoint.save(path, model.state_dict(), adam)
    cfg = cfg if cfg is not None else TrainConfig(model=model.cfg)
    config_sidecar(path).write_text(format_config(cfg))


def load_checkpoint(path) -> tuple[HSRNet, AdamState | None, TrainConfig]:
    params, adam = checkpoint.load(path)
    side = config_sidecar(path)
    cfg = load_config(side) if side.exists() else TrainConfig()
    model = HSRNet(cfg.model)
    model.load_state_dict(params)
    if adam is not None:
        adam = replace(adam, lr=cfg.lr)
    return model, adam, cfg


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class Prepared:
    image: np.ndarray  # (3, H, W)
    gt: np.ndarray  # (H, W)
    pyramid: list[np.ndarray]
    mask: np.ndarray | None


@dataclass
class TrainResult:
    model: HSRNet
    adam: AdamState
    history: list[LossBreakdown]


def _trim16(s: Sample) -> Sample:
    h, w = (s.height // 16) * 16, (s.width // 16) * 16
    if h == 0 or w == 0:
        raise ValueError(f"sample {s.name!r} is smaller than 16x16")
    return s if (h, w) == (s.height, s.width) else crop(s, 0, 0, w, h, s.name)


def prepare(data: Sequence[Sample], cfg: TrainConfig) -> list[Prepared]:
    samples: list[Sample] = []
    for i, s in enumerate(data):
        if cfg.augment:
            samples.extend(augment(s, np.random.default_rng([cfg.seed, 7, i])))
        else:
            samples.append(_trim16(s))
    out = []
    for s in samples:
        gt = make_density(s.annotations, Adaptive(cfg.k, cfg.beta))
        if s.roi is not None:
            gt = gt * s.roi
        out.append(Prepared(s.image, gt, make_pyramid(gt).maps, s.roi))
    return out


def _batches(items: list[Prepared], order: np.ndarray, batch_size: int) -> list[list[int]]:
    buckets: dict[tuple, list[int]] = {}
    batches = []
    for idx in order:
        key = items[idx].image.shape
        b = buckets.setdefault(key, [])
        b.append(int(idx))
        if len(b) == batch_size:
            batches.append(b)
            buckets[key] = []
    batches.extend(b for b in buckets.values() if b)
    return batches


def _schedule(items: list[Prepared], cfg: TrainConfig) -> list[list[int]]:
    steps = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 11, epoch]).permutation(len(items))
        steps.extend(_batches(items, order, cfg.batch_size))
    if cfg.max_steps:
        steps = steps[:cfg.max_steps]
    return steps


def _masked(t: Tensor, mask: np.ndarray | None) -> Tensor:
    if mask is None:
        return t
    return ops.broadcast_mul(t, Tensor(mask, dtype=t.dtype))


def _first_non_finite(named: list[tuple[str, np.ndarray]]) -> str | None:
    for name, arr in named:
        if not np.isfinite(arr).all():
            return name
    return None


def train_step(model: HSRNet, batch: list[Prepared], cfg: TrainConfig) -> tuple[Tensor, LossBreakdown]:
    x = Tensor(np.stack([b.image for b in batch]))
    mask = None
    if any(b.mask is not None for b in batch):
        mask = np.stack([b.mask if b.mask is not None else np.ones(b.gt.shape, np.float32) for b in batch])[:, None]
    gt = np.stack([b.gt for b in batch])[:, None]
    if mask is not None:
        gt = gt * mask
    out = model(x)
    out.d0 = _masked(out.d0, mask)
    out.side = [_masked(d, mask) for d in out.side]
    if model.cfg.scale_consistency:
        pyr = [np.stack([b.pyramid[i] for b in batch])[:, None] for i in range(5)]
        if mask is not None:
            pyr = [p * mask for p in pyr]
        loss, br = scale_consistency_loss(out, gt, pyr, model.params, cfg.loss_norm)
    else:
        loss = density_loss(out.d0, gt, cfg.loss_norm)
        br = LossBreakdown(l0=loss.item(), total=loss.item())
    if not np.isfinite(br.total):
        named = [("d0", out.d0.data)] + [(f"D{i}", d.data) for i, d in enumerate(out.side, 1)]
        named += [(n, p.data) for n, p in model.params.items()]
        culprit = _first_non_finite(named) or "loss"
        raise NonFiniteLoss(f"non-finite loss; first non-finite tensor: {culprit}")
    return loss, br


def train(cfg: TrainConfig, data: Sequence[Sample], out_dir=None, resume=None,
          on_step: Callable[[int, LossBreakdown], None] | None = None) -> TrainResult:
    """Run the optimiser loop; deterministic for a fixed config and dataset.

    With ``resume`` (a checkpoint path) the run continues from the stored Adam
    step and produces the same trajectory as an uninterrupted run.
    """
    if not data:
        raise ValueError("training data is empty")
    items = prepare(data, cfg)
    schedule = _schedule(items, cfg)
    if resume is not None:
        model, adam, _ = load_checkpoint(resume)
        if adam is None:
            adam = AdamState()
        model = _rebuild(model, cfg.model)
        adam = replace(adam, lr=cfg.lr)
    else:
        model = HSRNet(cfg.model)
        adam = AdamState(lr=cfg.lr)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    history: list[LossBreakdown] = []
    for step in range(adam.t, len(schedule)):
        loss, br = train_step(model, [items[i] for i in schedule[step]], cfg)
        loss.backward()
        adam_step(model.parameters(), adam)
        history.append(br)
        if on_step is not None:
            on_step(step + 1, br)
        if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"ckpt_{step + 1:06d}.hsrc", model, adam, cfg)
    if out is not None:
        save_checkpoint(out / "model.hsrc", model, adam, cfg)
        write_history(out / "loss_history.csv", history, start_step=len(schedule) - len(history) + 1)
    return TrainResult(model, adam, history)


def _rebuild(model: HSRNet, cfg: ModelConfig) -> HSRNet:
    if model.cfg == cfg:
        return model
    fresh = HSRNet(cfg)
    fresh.load_state_dict(model.state_dict())
    return fresh


def write_history(path, history: list[LossBreakdown], start_step: int = 1) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "l0"] + [f"l{i}" for i in range(1, 6)] + [f"lambda{i}" for i in range(1, 6)] + ["total"])
        for i, br in enumerate(history):
            side = [repr(v) for v in br.l_side] or [""] * 5
            lam = [repr(v) for v in br.lambdas] or [""] * 5
            w.writerow([start_step + i, repr(br.l0)] + side + lam + [repr(br.total)])


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    mae: float
    mse: float
    game: list[float]
    rows: list[dict] = field(default_factory=list)
    bins: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {"n_images": len(self.rows), "mae": self.mae, "mse": self.mse}
        d.update({f"game{i}": g for i, g in enumerate(self.game)})
        for i, b in enumerate(self.bins):
            d.update({f"bin{i}_{k}": v for k, v in b.items()})
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def write(self, path) -> None:
        """Write the JSON summary to ``path`` and per-image rows to ``<path>.csv``."""
        p = Path(path)
        p.write_text(self.to_json() + "\n")
        with open(p.with_name(p.name + ".csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["image", "gt", "pred", "game0", "game1", "game2", "game3"])
            for r in self.rows:
                w.writerow([r["image"], repr(r["gt"]), repr(r["pred"])] + [repr(r[f"game{i}"]) for i in range(4)])


def pad16(s: Sample) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad the image to multiples of 16; the mask marks the evaluated region."""
    _, h, w = s.image.shape
    hp, wp = -(-h // 16) * 16, -(-w // 16) * 16
    img = np.zeros((3, hp, wp), dtype=np.float32)
    img[:, :h, :w] = s.image
    mask = np.zeros((hp, wp), dtype=np.float32)
    mask[:h, :w] = 1.0 if s.roi is None else s.roi
    return img, mask


def model_predictor(model: HSRNet) -> Callable[[Sample], np.ndarray]:
    def predict(s: Sample) -> np.ndarray:
        img, _ = pad16(s)
        d0 = model(Tensor(img[None])).d0.data[0, 0]
        return d0[:s.height, :s.width]

    return predict


def density_bins(gt_counts: np.ndarray, n_bins: int) -> list[np.ndarray]:
    """Split image indices into ``n_bins`` quantile groups by ground-truth count."""
    order = np.argsort(gt_counts, kind="stable")
    return [b for b in np.array_split(order, min(n_bins, len(order))) if len(b)]


def evaluate(predictor, data: Sequence[Sample], bins: int = 5, k: int = 3, beta: float = 0.3) -> EvalReport:
    """MAE/MSE on counts and GAME(0..3) on ROI-masked whole-image maps.

    ``predictor`` is an :class:`HSRNet` or a callable ``Sample -> (H, W) map``.
    """
    if not data:
        raise ValueError("evaluation data is empty")
    if isinstance(predictor, HSRNet):
        predictor = model_predictor(predictor)
    rows = []
    for s in data:
        pred = np.asarray(predictor(s), dtype=np.float64)
        gt = make_density(s.annotations, Adaptive(k, beta)).astype(np.float64)
        if s.roi is not None:
            pred, gt = pred * s.roi, gt * s.roi
        row = {"image": s.name, "gt": float(gt.sum()), "pred": float(pred.sum())}
        row.update({f"game{level}": game(pred, gt, level) for level in range(4)})
        rows.append(row)
    mae, mse = mae_mse([(r["gt"], r["pred"]) for r in rows])
    games = [float(np.mean([r[f"game{level}"] for r in rows])) for level in range(4)]
    bin_stats = []
    if bins:
        gts = np.array([r["gt"] for r in rows])
        for idx in density_bins(gts, bins):
            sub = [(rows[i]["gt"], rows[i]["pred"]) for i in idx]
            b_mae, b_mse = mae_mse(sub)
            bin_stats.append({"n": len(idx), "gt_min": float(gts[idx].min()), "gt_max": float(gts[idx].max()),
                              "mae": b_mae, "mse": b_mse})
    return EvalReport(mae, mse, games, rows, bin_stats)


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

def ablation_configs(base: TrainConfig, axis: str) -> list[tuple[str, TrainConfig]]:
    if axis == "components":
        return [(name, base.with_model(**toggles)) for name, toggles in COMPONENT_ROWS]
    if axis == "ratio":
        return [(f"r={r}", base.with_model(ratio_r=r)) for r in RATIOS]
    if axis == "sfm_order":
        from .model import SFM_ORDERS
        return [(o, base.with_model(sfm_order=o)) for o in SFM_ORDERS]
    raise ValueError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")


@dataclass
class AblationRow:
    name: str
    fingerprint: str
    data_hash: str
    final_l0: float
    final_total: float
    report: EvalReport

    def to_dict(self) -> dict:
        d = {"row": self.name, "fingerprint": self.fingerprint, "data_hash": self.data_hash,
             "final_l0": self.final_l0, "final_total": self.final_total}
        d.update(self.report.to_dict())
        return d


def ablate(base: TrainConfig, axis: str, data: Sequence[Sample], eval_data: Sequence[Sample] | None = None,
           bins: int = 5) -> list[AblationRow]:
    """Train every variant on the same data and seed and evaluate each one."""
    eval_data = list(eval_data) if eval_data is not None else list(data)
    h = dataset_hash(list(eval_data))
    rows = []
    for name, cfg in ablation_configs(base, axis):
        log.info("ablation %s: training %s", axis, name)
        res = train(cfg, data)
        rep = evaluate(res.model, eval_data, bins=bins, k=cfg.k, beta=cfg.beta)
        last = res.history[-1]
        rows.append(AblationRow(name, cfg.model.fingerprint(), h, last.l0, last.total, rep))
    return rows


def write_ablation(path, rows: list[AblationRow]) -> None:
    dicts = [r.to_dict() for r in rows]
    keys = list(dicts[0])
    for d in dicts[1:]:
        keys += [k for k in d if k not in keys]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for d in dicts:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in d.items()})


