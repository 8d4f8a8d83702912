"""HSRNet: VGG-style trunk, scale focus modules, scale recalibration and fusion."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Mapping

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Parameter, Tensor

SFM_ORDERS = ("channel_then_spatial", "spatial_then_channel", "parallel_average", "parallel_conv")
FULL_WIDTHS = (64, 128, 256, 512, 512)
SCORE_CHANNELS = (2, 3, 4, 5)  # E_2..E_5
SET_SIZES = (4, 4, 3, 2, 1)


@dataclass(frozen=True)
class ModelConfig:
    stage_widths: tuple[int, ...] = (8, 16, 32, 32, 32)
    convs_per_stage: tuple[int, ...] = (2, 2, 3, 3, 3)
    ratio_r: int = 64
    sfm_order: str = "channel_then_spatial"
    use_srm: bool = True
    use_cf: bool = True
    use_sf: bool = True
    use_sc: bool = True
    sfm_inline: bool = False
    seed: int = 0
    init_std: float = 0.01
    # "he" stands in for pretrained VGG weights on the first ten convs
    backbone_init: str = "he"

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        object.__setattr__(self, "convs_per_stage", tuple(int(c) for c in self.convs_per_stage))
        if len(self.stage_widths) != 5 or min(self.stage_widths) < 1:
            raise ValueError("stage_widths needs 5 positive ints")
        if len(self.convs_per_stage) != 5 or min(self.convs_per_stage) < 1:
            raise ValueError("convs_per_stage needs 5 positive ints")
        if self.ratio_r < 1:
            raise ValueError("ratio_r must be >= 1")
        if self.sfm_order not in SFM_ORDERS:
            raise ValueError(f"sfm_order must be one of {SFM_ORDERS}")
        if self.backbone_init not in ("he", "gaussian"):
            raise ValueError("backbone_init must be 'he' or 'gaussian'")

    def hidden_width(self, channels: int) -> int:
        return max(1, channels // self.ratio_r)

    @property
    def scale_consistency(self) -> bool:
        return self.use_srm and self.use_sc

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        """Hash of the architecture-defining fields (the seed is excluded)."""
        d = self.to_dict()
        d.pop("seed")
        text = ";".join(f"{k}={d[k]}" for k in sorted(d))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


MODEL_KEYS = tuple(f.name for f in fields(ModelConfig))


@dataclass
class ForwardOutput:
    d0: Tensor
    side: list[Tensor]
    features: dict[str, Tensor] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# parameter construction
# ---------------------------------------------------------------------------

def _sfm_stages(cfg: ModelConfig) -> tuple[int, ...]:
    return (1, 2, 3, 4) if (cfg.use_srm or cfg.sfm_inline) else (4,)


def init_parameters(cfg: ModelConfig, dtype=np.float32) -> dict[str, Parameter]:
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, Parameter] = {}

    def gauss(name, shape, std):
        params[name] = Parameter(name, rng.normal(0.0, std, size=shape), dtype=dtype)

    def zeros(name, shape):
        params[name] = Parameter(name, np.zeros(shape), dtype=dtype)

    c_in = 3
    for k, (width, n_conv) in enumerate(zip(cfg.stage_widths, cfg.convs_per_stage), 1):
        for j in range(1, n_conv + 1):
            std = np.sqrt(2.0 / (9 * c_in)) if cfg.backbone_init == "he" else cfg.init_std
            gauss(f"stage{k}.conv{j}.weight", (width, c_in, 3, 3), std)
            zeros(f"stage{k}.conv{j}.bias", (width,))
            c_in = width

    std = cfg.init_std
    for i in _sfm_stages(cfg):
        c = cfg.stage_widths[i]
        if cfg.use_cf:
            hid = cfg.hidden_width(c)
            gauss(f"sfm{i}.fc1.weight", (hid, c), std)
            zeros(f"sfm{i}.fc1.bias", (hid,))
            gauss(f"sfm{i}.fc2.weight", (c, hid), std)
            zeros(f"sfm{i}.fc2.bias", (c,))
        if cfg.use_sf:
            gauss(f"sfm{i}.conv7.weight", (1, 1, 7, 7), std)
            zeros(f"sfm{i}.conv7.bias", (1,))
        if cfg.sfm_order == "parallel_conv" and (cfg.use_cf or cfg.use_sf):
            gauss(f"sfm{i}.mix.weight", (c, 2 * c, 1, 1), std)
            zeros(f"sfm{i}.mix.bias", (c,))

    if cfg.use_srm:
        for i, ch in enumerate(SCORE_CHANNELS, 1):
            c = cfg.stage_widths[i]
            f = 2 ** i
            gauss(f"srm.e{i + 1}.conv1.weight", (ch, c, 1, 1), std)
            zeros(f"srm.e{i + 1}.conv1.bias", (ch,))
            gauss(f"srm.e{i + 1}.deconv.weight", (ch, ch, 2 * f, 2 * f), std)
        for j, size in enumerate(SET_SIZES, 1):
            gauss(f"srm.set{j}.reduce.weight", (1, size, 1, 1), std)
            zeros(f"srm.set{j}.reduce.bias", (1,))
        gauss("fuse.weight", (1, 5, 1, 1), std)
        zeros("fuse.bias", (1,))
        if cfg.use_sc:
            # softplus(log(e - 1)) == 1
            for i in range(1, 6):
                params[f"loss.lambda{i}"] = Parameter(
                    f"loss.lambda{i}", np.full((1, 1, 1, 1), np.log(np.e - 1.0)), dtype=dtype
                )
    else:
        gauss("fuse.weight", (1, cfg.stage_widths[4], 1, 1), std)
        zeros("fuse.bias", (1,))
    return params


# ---------------------------------------------------------------------------
# graph pieces
# ---------------------------------------------------------------------------

def backbone_forward(x: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig, inline=None) -> list[Tensor]:
    """Run Conv1..Conv5 and return the last-conv outputs of stages 2-5.

    ``inline`` is an optional callable ``(stage_index, feature) -> feature``
    applied on the trunk itself (the ``sfm_inline`` variant).
    """
    ops._check4(x, "backbone input")
    h, w = x.shape[2:]
    if h % 16 or w % 16 or h == 0 or w == 0:
        raise ValueError(f"input H and W must be positive multiples of 16, got {h}x{w}")
    feats = []
    out = x
    for k, n_conv in enumerate(cfg.convs_per_stage, 1):
        for j in range(1, n_conv + 1):
            out = ops.relu(ops.conv2d(out, params[f"stage{k}.conv{j}.weight"],
                                      params[f"stage{k}.conv{j}.bias"], 1, 1))
        if k >= 2:
            if inline is not None:
                out = inline(k - 1, out)
            feats.append(out)
        if k <= 4:
            out = ops.max_pool2(out)
    return feats


def channel_focus(f: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    z = ops.global_avg_pool(f)
    hidden = ops.relu(ops.linear(z, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"]))
    s = ops.sigmoid(ops.linear(hidden, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"]))
    return ops.broadcast_mul(f, s)


def spatial_focus(s_hat: Tensor, conv7: Tensor, bias: Tensor | None = None) -> Tensor:
    m = ops.channel_mean(s_hat)
    mask = ops.sigmoid(ops.conv2d(m, conv7, bias, 1, 3))
    return ops.broadcast_mul(s_hat, mask)


def sfm(f: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig, stage: int) -> Tensor:
    prefix = f"sfm{stage}"

    def cf(t):
        return channel_focus(t, params, prefix) if cfg.use_cf else t

    def sf(t):
        if not cfg.use_sf:
            return t
        return spatial_focus(t, params[f"{prefix}.conv7.weight"], params[f"{prefix}.conv7.bias"])

    if not (cfg.use_cf or cfg.use_sf):
        return f
    order = cfg.sfm_order
    if order == "channel_then_spatial":
        return sf(cf(f))
    if order == "spatial_then_channel":
        return cf(sf(f))
    a, b = cf(f), sf(f)
    if order == "parallel_average":
        return ops.scale(ops.add(a, b), 0.5)
    return ops.conv2d(ops.concat_channels([a, b]), params[f"{prefix}.mix.weight"],
                      params[f"{prefix}.mix.bias"])


def score_maps(f_hat: list[Tensor], params: Mapping[str, Tensor]) -> list[Tensor]:
    """E_{i+1} = deconv(conv1x1(F_hat_i)) at full input resolution."""
    out = []
    for i, f in enumerate(f_hat, 1):
        e = ops.conv2d(f, params[f"srm.e{i + 1}.conv1.weight"], params[f"srm.e{i + 1}.conv1.bias"])
        s = 2 ** i
        out.append(ops.transposed_conv2d(e, params[f"srm.e{i + 1}.deconv.weight"], stride=s, padding=s // 2))
    return out


def regroup_sets(e: list[Tensor]) -> list[Tensor]:
    """Slice/stack: set j collects channel j of every score map that has one."""
    if [t.shape[1] for t in e] != list(SCORE_CHANNELS):
        raise ValueError(f"score maps must have {SCORE_CHANNELS} channels, got {[t.shape[1] for t in e]}")
    sets = []
    for j in range(5):
        members = [t for t in e if t.shape[1] > j]
        sets.append(ops.channel_slice_concat(members, [j] * len(members)))
    return sets


def slice_stack_regroup(e: list[Tensor], params: Mapping[str, Tensor]) -> list[Tensor]:
    return [
        ops.conv2d(s, params[f"srm.set{j}.reduce.weight"], params[f"srm.set{j}.reduce.bias"])
        for j, s in enumerate(regroup_sets(e), 1)
    ]


def fuse_predictions(d: list[Tensor], params: Mapping[str, Tensor]) -> Tensor:
    if len(d) != 5 or any(t.shape[1] != 1 for t in d):
        raise ValueError("fusion expects five single-channel maps")
    if len({t.shape for t in d}) != 1:
        raise ValueError("fusion inputs differ in shape")
    return ops.conv2d(ops.concat_channels(d), params["fuse.weight"], params["fuse.bias"])


def forward(x: Tensor, params: Mapping[str, Tensor], cfg: ModelConfig, keep_features: bool = False) -> ForwardOutput:
    h, w = x.shape[2:]
    if cfg.sfm_inline:
        f_hat = backbone_forward(x, params, cfg, inline=lambda i, t: sfm(t, params, cfg, i))
        feats = f_hat
    else:
        feats = backbone_forward(x, params, cfg)
        if cfg.use_srm:
            f_hat = [sfm(f, params, cfg, i) for i, f in enumerate(feats, 1)]
        else:
            f_hat = feats[:3] + [sfm(feats[3], params, cfg, 4)]
    kept = {}
    if keep_features:
        kept.update({f"F{i}": t for i, t in enumerate(feats, 1)})
        kept.update({f"F_hat{i}": t for i, t in enumerate(f_hat, 1)})
    if not cfg.use_srm:
        d0 = ops.conv2d(f_hat[3], params["fuse.weight"], params["fuse.bias"])
        return ForwardOutput(ops.bilinear_upsample(d0, h, w), [], kept)
    e = score_maps(f_hat, params)
    side = slice_stack_regroup(e, params)
    if keep_features:
        kept.update({f"E{i}": t for i, t in enumerate(e, 2)})
    return ForwardOutput(fuse_predictions(side, params), side, kept)


class HSRNet:
    """Parameter container plus the forward graph."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), dtype=np.float32):
        self.cfg = cfg
        self.params = init_parameters(cfg, dtype)

    def __call__(self, x: Tensor, keep_features: bool = False) -> ForwardOutput:
        return forward(x, self.params, self.cfg, keep_features)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def lambdas(self) -> np.ndarray | None:
        if not self.cfg.scale_consistency:
            return None
        return np.array([ops.softplus(self.params[f"loss.lambda{i}"]).item() for i in range(1, 6)])

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        missing = set(self.params) - set(state)
        unexpected = set(state) - set(self.params)
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, arr in state.items():
            if name not in self.params:
                continue
            p = self.params[name]
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = np.array(arr, dtype=p.dtype)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
