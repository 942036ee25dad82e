"""Small convolutional backbone plus the single-predictor detection head.

The backbone is five stride-2 3x3 conv stages (224 -> 7).  Each head grid
taps the matching feature map (7 from the last stage, 14 from the one
before; 4/2/1 via extra stride-2 convs off the 7x7 map) and runs two
small prediction towers: a classification branch emitting one logit per
anchor of the cell and a regression branch emitting four offsets.  The
branches share no weights, so the focal and box gradients do not compete
inside one tower.  Tower convs are 1x1 (channel mixing only), keeping the
receptive field tight around each cell; the final predictors are 3x3.
Outputs are flattened in exactly the anchor-set order: grid, row, column,
then anchor-within-cell.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"ROIDET1"
CLS_BIAS_PRIOR = -2.0  # initial foreground probability ~ sigmoid(-2) = 0.12


@dataclass(frozen=True)
class DetectorConfig:
    canvas_side: int = 224
    channels: tuple[int, ...] = (8, 16, 32, 64, 64)
    head_grids: tuple[int, ...] = (7,)
    anchors_per_cell: int = 6
    tower_depth: int = 2
    tower_channels: int = 128

    def __post_init__(self):
        if len(self.channels) != 5:
            raise ValueError("backbone uses exactly five stride-2 stages")
        if self.canvas_side % 32 != 0:
            raise ValueError("canvas side must be divisible by 32")
        g5 = self.canvas_side // 32
        valid = {g5, self.canvas_side // 16}
        for g in self.head_grids:
            if g in valid:
                continue
            if g in (4, 2, 1) and g5 == 7:
                continue
            raise ValueError(f"head grid {g} not reachable from canvas {self.canvas_side}")
        if self.anchors_per_cell < 1:
            raise ValueError("anchors_per_cell must be >= 1")
        if self.tower_depth < 0 or self.tower_channels < 1:
            raise ValueError("bad head tower settings")

    @property
    def total_anchors(self) -> int:
        return sum(g * g for g in self.head_grids) * self.anchors_per_cell


@dataclass
class DetectorModel:
    config: DetectorConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    order: list[str] = field(default_factory=list)

    def _new_param(self, name: str, data: np.ndarray) -> Tensor:
        t = ad.parameter(data)
        self.params[name] = t
        self.order.append(name)
        return t

    def parameters(self) -> list[Tensor]:
        return [self.params[n] for n in self.order]

    def stage_names(self, stage: int) -> list[str]:
        return [f"backbone{stage}.w", f"backbone{stage}.b"]

    def group_names(self) -> dict[str, list[str]]:
        """Parameter names split into the discriminative-lr groups:
        early backbone, late backbone (incl. extra downsamplers), head."""
        early = [n for s in (0, 1, 2) for n in self.stage_names(s)]
        late = [n for s in (3, 4) for n in self.stage_names(s)]
        late += [n for n in self.order if n.startswith("down")]
        head = [n for n in self.order if n.startswith("head")]
        return {"early": early, "late": late, "head": head}

    def _tower(self, f: Tensor, grid: int, branch: str) -> Tensor:
        for m in range(self.config.tower_depth):
            f = ad.relu(ad.conv2d(f, self.params[f"head{grid}.{branch}.mid{m}.w"],
                                  self.params[f"head{grid}.{branch}.mid{m}.b"],
                                  stride=1, padding=0))
        return f

    def forward(self, batch) -> tuple[Tensor, Tensor]:
        """Map [B,1,S,S] pixels to per-anchor (logits [B,A], offsets [B,A,4])."""
        x = ad.as_tensor(batch)
        if x.data.ndim != 4 or x.data.shape[2] != self.config.canvas_side:
            raise ValueError(f"expected batch [B,1,{self.config.canvas_side},"
                             f"{self.config.canvas_side}], got {x.data.shape}")
        taps = {}
        for s in range(5):
            x = ad.relu(ad.conv2d(x, self.params[f"backbone{s}.w"],
                                  self.params[f"backbone{s}.b"], stride=2, padding=1))
            taps[x.data.shape[2]] = x
        # extra downsampling path 7 -> 4 -> 2 -> 1 when those grids are used
        need_small = [g for g in self.config.head_grids if g in (4, 2, 1)]
        if need_small:
            y = taps[7]
            for g in (4, 2, 1):
                y = ad.relu(ad.conv2d(y, self.params[f"down{g}.w"],
                                      self.params[f"down{g}.b"], stride=2, padding=1))
                taps[g] = y

        k = self.config.anchors_per_cell
        logit_parts, offset_parts = [], []
        for g in self.config.head_grids:
            f = taps[g]
            batch_n = f.data.shape[0]
            cls = ad.conv2d(self._tower(f, g, "cls"), self.params[f"head{g}.cls.w"],
                            self.params[f"head{g}.cls.b"], stride=1, padding=1)
            reg = ad.conv2d(self._tower(f, g, "reg"), self.params[f"head{g}.reg.w"],
                            self.params[f"head{g}.reg.b"], stride=1, padding=1)
            # to anchor order: (row, col, anchor) flattening
            cls = ad.reshape(ad.transpose(cls, (0, 2, 3, 1)), (batch_n, g * g * k))
            reg = ad.reshape(ad.transpose(reg, (0, 2, 3, 1)), (batch_n, g * g * k, 4))
            logit_parts.append(cls)
            offset_parts.append(reg)
        if len(logit_parts) == 1:
            return logit_parts[0], offset_parts[0]
        return ad.concat(logit_parts, axis=1), ad.concat(offset_parts, axis=1)


def _he_conv(rng: np.random.Generator, cout: int, cin: int, k: int = 3) -> np.ndarray:
    fan_in = cin * k * k
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))


def build_detector(cfg: DetectorConfig, rng: np.random.Generator) -> DetectorModel:
    """Initialize a detector: He-scaled kernels, zero biases, and the
    classification bias pinned at the low-foreground prior."""
    model = DetectorModel(config=cfg)
    cin = 1
    for s, cout in enumerate(cfg.channels):
        model._new_param(f"backbone{s}.w", _he_conv(rng, cout, cin))
        model._new_param(f"backbone{s}.b", np.zeros(cout))
        cin = cout
    if any(g in (4, 2, 1) for g in cfg.head_grids):
        for g in (4, 2, 1):
            model._new_param(f"down{g}.w", _he_conv(rng, cin, cin))
            model._new_param(f"down{g}.b", np.zeros(cin))
    k = cfg.anchors_per_cell
    tc = cfg.tower_channels
    for g in cfg.head_grids:
        for branch in ("cls", "reg"):
            c = cin
            for m in range(cfg.tower_depth):
                model._new_param(f"head{g}.{branch}.mid{m}.w", _he_conv(rng, tc, c, 1))
                model._new_param(f"head{g}.{branch}.mid{m}.b", np.zeros(tc))
                c = tc
        head_in = tc if cfg.tower_depth else cin
        model._new_param(f"head{g}.cls.w", _he_conv(rng, k, head_in))
        model._new_param(f"head{g}.cls.b", np.full(k, CLS_BIAS_PRIOR))
        model._new_param(f"head{g}.reg.w", _he_conv(rng, 4 * k, head_in))
        model._new_param(f"head{g}.reg.b", np.zeros(4 * k))
    return model


def save_checkpoint(model: DetectorModel, path, extra: dict | None = None) -> None:
    """Binary checkpoint: magic, JSON header, parameters as LE float64.

    The header carries the detector config, the parameter shapes in
    declaration order, and any extra metadata (e.g. the anchor scales the
    model was trained against).
    """
    header = {
        "config": {
            "canvas_side": model.config.canvas_side,
            "channels": list(model.config.channels),
            "head_grids": list(model.config.head_grids),
            "anchors_per_cell": model.config.anchors_per_cell,
            "tower_depth": model.config.tower_depth,
            "tower_channels": model.config.tower_channels,
        },
        "params": [{"name": n, "shape": list(model.params[n].data.shape)}
                   for n in model.order],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name in model.order:
            f.write(model.params[name].data.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[DetectorModel, dict]:
    """Load a checkpoint, validating magic and parameter shapes."""
    raw = Path(path).read_bytes()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a detector checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    cfg = DetectorConfig(
        canvas_side=header["config"]["canvas_side"],
        channels=tuple(header["config"]["channels"]),
        head_grids=tuple(header["config"]["head_grids"]),
        anchors_per_cell=header["config"]["anchors_per_cell"],
        tower_depth=header["config"].get("tower_depth", 2),
        tower_channels=header["config"].get("tower_channels", 128),
    )
    model = build_detector(cfg, np.random.default_rng(0))
    if [{"name": n, "shape": list(model.params[n].data.shape)} for n in model.order] \
            != header["params"]:
        raise ValueError(f"{path}: parameter table does not match config")
    for name in model.order:
        t = model.params[name]
        count = t.data.size
        vals = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        off += count * 8
        t.data = vals.reshape(t.data.shape).astype(np.float64)
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after parameters")
    return model, header["extra"]
