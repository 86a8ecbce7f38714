"""Two-stage backbone with per-scale spatial attention and score-level
aggregation.

Forward structure:

* backbone stage 1 maps the image to k1 [N, F1, H1, W1]; stage 2 maps k1 to
  k2 [N, F2, H2, W2]; the primary classifier is a linear layer on flattened
  k2;
* each attention module reads its stage's features and produces, per
  attribute: a spatially normalized mask (spatial softmax over positions),
  a sigmoid confidence map, and classifier logits from the
  confidence-weighted mask;
* the final logits are the arithmetic mean of the primary and attention
  logits that exist.

Attention trunk is two 1x1 conv-BN-ReLU blocks and a plain 1x1 conv down to
one channel per attribute. That last conv (and its bias) starts at zero so
an untrained model emits exactly uniform masks; everything else is Xavier.
The attention classifier is a stack of 1x1 conv-BN-ReLU blocks followed by a
full-extent collapse convolution straight to attribute logits.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from attnagg import layers as L
from attnagg.tensor import Rng, ShapeMismatch, Tensor, sigmoid


class UnknownGroup(ValueError):
    """Parameter groups are 'primary' and 'attention'."""


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1


@dataclass
class BackboneConfig:
    input_size: int = 32
    in_channels: int = 3
    stage1: tuple[ConvSpec, ...] = (ConvSpec(32, 3, 2, 1), ConvSpec(32, 3, 2, 1))
    stage2: tuple[ConvSpec, ...] = (ConvSpec(64, 3, 1, 1), ConvSpec(64, 3, 2, 1))

    def _trace(self, specs, size):
        for s in specs:
            size = L.conv_output_size(size, s.kernel, s.stride, s.padding)
        return size

    @property
    def stage1_channels(self) -> int:
        return self.stage1[-1].out_channels

    @property
    def stage2_channels(self) -> int:
        return self.stage2[-1].out_channels

    @property
    def stage1_out_spatial(self) -> int:
        return self._trace(self.stage1, self.input_size)

    @property
    def stage2_out_spatial(self) -> int:
        return self._trace(self.stage2, self.stage1_out_spatial)

    def validate(self):
        s1, s2 = self.stage1_out_spatial, self.stage2_out_spatial
        if not s1 > s2:
            raise ValueError(f"stage2 spatial {s2} must be smaller than stage1 {s1}")
        if s2 < 2:
            raise ValueError(f"stage outputs must be at least 2x2, got {s2}")
        return self


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    num_attributes: int = 6
    attention_channels: int = 64  # trunk hidden width
    classifier_channels: tuple[int, ...] = (64, 128, 128)
    use_attention: bool = True
    use_multiscale: bool = True
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9

    def validate(self):
        self.backbone.validate()
        if self.use_multiscale and not self.use_attention:
            raise ValueError("use_multiscale requires use_attention")
        return self

    def to_json_dict(self) -> dict:
        b = self.backbone
        return {
            "backbone": {
                "input_size": b.input_size,
                "in_channels": b.in_channels,
                "stage1": [[s.out_channels, s.kernel, s.stride, s.padding]
                           for s in b.stage1],
                "stage2": [[s.out_channels, s.kernel, s.stride, s.padding]
                           for s in b.stage2],
            },
            "num_attributes": self.num_attributes,
            "attention_channels": self.attention_channels,
            "classifier_channels": list(self.classifier_channels),
            "use_attention": self.use_attention,
            "use_multiscale": self.use_multiscale,
            "bn_eps": self.bn_eps,
            "bn_momentum": self.bn_momentum,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelConfig":
        b = d.get("backbone", {})
        backbone = BackboneConfig(
            input_size=int(b.get("input_size", 32)),
            in_channels=int(b.get("in_channels", 3)),
            stage1=tuple(ConvSpec(*map(int, s)) for s in b.get(
                "stage1", [[32, 3, 2, 1], [32, 3, 2, 1]])),
            stage2=tuple(ConvSpec(*map(int, s)) for s in b.get(
                "stage2", [[64, 3, 1, 1], [64, 3, 2, 1]])),
        )
        kw = {k: v for k, v in d.items() if k != "backbone"}
        if "classifier_channels" in kw:
            kw["classifier_channels"] = tuple(kw["classifier_channels"])
        return cls(backbone=backbone, **kw).validate()


class ConvBnRelu:
    """1 conv + batchnorm + relu, the stock block everywhere in this model."""

    def __init__(self, in_ch, out_ch, kernel, stride, padding, eps, momentum,
                 rng: Rng):
        self.conv = L.make_conv(in_ch, out_ch, kernel, stride, padding, rng=rng)
        self.bn = L.make_batchnorm(out_ch, eps=eps, momentum=momentum)

    def forward(self, x: Tensor) -> Tensor:
        return L.activation("relu", L.batchnorm(self.bn, L.conv2d(self.conv, x)))

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.conv.kernel": self.conv.kernel,
            f"{prefix}.conv.bias": self.conv.bias,
            f"{prefix}.bn.gamma": self.bn.gamma,
            f"{prefix}.bn.beta": self.bn.beta,
        }

    def buffers(self, prefix: str) -> dict[str, np.ndarray]:
        return {
            f"{prefix}.bn.running_mean": self.bn.running_mean,
            f"{prefix}.bn.running_var": self.bn.running_var,
        }


@dataclass
class AttentionOutput:
    mask: Tensor  # normalized, each plane sums to 1
    confidence: Tensor  # sigmoid map in (0, 1)
    weighted: Tensor  # mask * confidence, elementwise
    logits: Tensor  # attention classifier output [N, C]


@dataclass
class ModelOutput:
    y_p: Tensor  # primary logits [N, C]
    y_a1: Tensor | None
    y_a2: Tensor | None
    y_final: Tensor
    masks: list  # normalized masks per active scale
    confidences: list


class AttentionModule:
    """Per-scale attention: trunk to one channel per attribute, spatial
    softmax, confidence gating, and a classifier over the weighted masks."""

    def __init__(self, in_channels: int, num_attributes: int, hidden: int,
                 classifier_channels, spatial: int, eps: float, momentum: float,
                 rng: Rng):
        c = num_attributes
        self.trunk = [
            ConvBnRelu(in_channels, hidden, 1, 1, 0, eps, momentum, rng),
            ConvBnRelu(hidden, hidden, 1, 1, 0, eps, momentum, rng),
        ]
        # zero start: softmax of zeros is exactly uniform
        self.trunk_out = L.make_conv(hidden, c, 1)
        self.confidence = L.make_conv(in_channels, c, 1, rng=rng)
        chans = [c, *classifier_channels]
        self.classifier = [
            ConvBnRelu(chans[i], chans[i + 1], 1, 1, 0, eps, momentum, rng)
            for i in range(len(classifier_channels))
        ]
        self.collapse = L.make_conv(chans[-1], c, (spatial, spatial), rng=rng)
        self.spatial = spatial

    def attend(self, k: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        z = k
        for block in self.trunk:
            z = block.forward(z)
        z = L.conv2d(self.trunk_out, z)
        mask = L.spatial_softmax(z)
        conf = sigmoid(L.conv2d(self.confidence, k))
        return mask, conf, mask * conf

    def classify(self, weighted: Tensor) -> Tensor:
        h = weighted
        for block in self.classifier:
            h = block.forward(h)
        out = L.global_collapse_conv(h, self.collapse)
        n, c = out.shape[0], out.shape[1]
        return out.reshape((n, c))

    def forward(self, k: Tensor) -> AttentionOutput:
        mask, conf, weighted = self.attend(k)
        return AttentionOutput(mask, conf, weighted, self.classify(weighted))

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, b in enumerate(self.trunk):
            out.update(b.params(f"{prefix}.trunk{i}"))
        out[f"{prefix}.trunk_out.kernel"] = self.trunk_out.kernel
        out[f"{prefix}.trunk_out.bias"] = self.trunk_out.bias
        out[f"{prefix}.confidence.kernel"] = self.confidence.kernel
        out[f"{prefix}.confidence.bias"] = self.confidence.bias
        for i, b in enumerate(self.classifier):
            out.update(b.params(f"{prefix}.cls{i}"))
        out[f"{prefix}.collapse.kernel"] = self.collapse.kernel
        out[f"{prefix}.collapse.bias"] = self.collapse.bias
        return out

    def buffers(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, b in enumerate(self.trunk):
            out.update(b.buffers(f"{prefix}.trunk{i}"))
        for i, b in enumerate(self.classifier):
            out.update(b.buffers(f"{prefix}.cls{i}"))
        return out

    def bn_layers(self):
        return [b.bn for b in self.trunk] + [b.bn for b in self.classifier]


class AttentionAggregationModel:
    def __init__(self, config: ModelConfig, rng: Rng):
        config.validate()
        self.config = config
        bb = config.backbone
        eps, mom = config.bn_eps, config.bn_momentum
        c = config.num_attributes

        def build_stage(specs, in_ch):
            blocks = []
            for s in specs:
                blocks.append(ConvBnRelu(in_ch, s.out_channels, s.kernel,
                                         s.stride, s.padding, eps, mom, rng))
                in_ch = s.out_channels
            return blocks

        self.stage1 = build_stage(bb.stage1, bb.in_channels)
        self.stage2 = build_stage(bb.stage2, bb.stage1_channels)
        flat = bb.stage2_channels * bb.stage2_out_spatial ** 2
        self.primary = L.make_linear(flat, c, rng=rng)

        self.att1 = self.att2 = None
        if config.use_attention:
            self.att1 = AttentionModule(
                bb.stage1_channels, c, config.attention_channels,
                config.classifier_channels, bb.stage1_out_spatial, eps, mom, rng)
            if config.use_multiscale:
                self.att2 = AttentionModule(
                    bb.stage2_channels, c, config.attention_channels,
                    config.classifier_channels, bb.stage2_out_spatial, eps, mom,
                    rng)

    @property
    def has_attention(self) -> bool:
        return self.att1 is not None

    def _set_bn_mode(self, training: bool):
        mode = "train" if training else "eval"
        for bn in self._bn_layers():
            bn.mode = mode

    def _bn_layers(self):
        out = [b.bn for b in self.stage1 + self.stage2]
        for att in (self.att1, self.att2):
            if att is not None:
                out.extend(att.bn_layers())
        return out

    def forward_backbone(self, x: Tensor) -> tuple[Tensor, Tensor]:
        bb = self.config.backbone
        if x.ndim != 4 or x.shape[1] != bb.in_channels or \
                x.shape[2] != bb.input_size or x.shape[3] != bb.input_size:
            raise ShapeMismatch(
                f"expected [N, {bb.in_channels}, {bb.input_size}, "
                f"{bb.input_size}] input, got {x.shape}")
        k1 = x
        for block in self.stage1:
            k1 = block.forward(k1)
        k2 = k1
        for block in self.stage2:
            k2 = block.forward(k2)
        return k1, k2

    def forward(self, x: Tensor, training: bool = False) -> ModelOutput:
        self._set_bn_mode(training)
        k1, k2 = self.forward_backbone(x)
        n = x.shape[0]
        y_p = L.linear(self.primary, k2.reshape((n, k2.size // n)))

        heads = [y_p]
        y_a1 = y_a2 = None
        masks, confs = [], []
        if self.att1 is not None:
            a1 = self.att1.forward(k1)
            y_a1 = a1.logits
            heads.append(y_a1)
            masks.append(a1.mask)
            confs.append(a1.confidence)
        if self.att2 is not None:
            a2 = self.att2.forward(k2)
            y_a2 = a2.logits
            heads.append(y_a2)
            masks.append(a2.mask)
            confs.append(a2.confidence)

        y_final = heads[0]
        for h in heads[1:]:
            y_final = y_final + h
        y_final = y_final / float(len(heads))
        return ModelOutput(y_p=y_p, y_a1=y_a1, y_a2=y_a2, y_final=y_final,
                           masks=masks, confidences=confs)

    # parameter bookkeeping -------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, b in enumerate(self.stage1):
            out.update(b.params(f"primary.stage1.{i}"))
        for i, b in enumerate(self.stage2):
            out.update(b.params(f"primary.stage2.{i}"))
        out["primary.classifier.weight"] = self.primary.weight
        out["primary.classifier.bias"] = self.primary.bias
        if self.att1 is not None:
            out.update(self.att1.params("attention.scale1"))
        if self.att2 is not None:
            out.update(self.att2.params("attention.scale2"))
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, b in enumerate(self.stage1):
            out.update(b.buffers(f"primary.stage1.{i}"))
        for i, b in enumerate(self.stage2):
            out.update(b.buffers(f"primary.stage2.{i}"))
        if self.att1 is not None:
            out.update(self.att1.buffers("attention.scale1"))
        if self.att2 is not None:
            out.update(self.att2.buffers("attention.scale2"))
        return out

    def set_freeze(self, part: str, frozen: bool):
        if part not in ("primary", "attention"):
            raise UnknownGroup(f"unknown parameter group {part!r}")
        for name, p in self.named_parameters().items():
            if name.startswith(part + "."):
                p.requires_grad = not frozen

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.values for name, p in self.named_parameters().items()}
        out.update(self.named_buffers())
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        own = self.state_arrays()
        if set(own) != set(arrays):
            missing = set(own) ^ set(arrays)
            raise ShapeMismatch(f"state entries mismatch: {sorted(missing)[:4]}")
        for name, arr in arrays.items():
            if own[name].shape != arr.shape:
                raise ShapeMismatch(f"{name}: {own[name].shape} vs {arr.shape}")
            own[name][...] = arr


def build_model(config: ModelConfig, seed: int) -> AttentionAggregationModel:
    return AttentionAggregationModel(config, Rng(seed))


def save_model(dir_path, model: AttentionAggregationModel):
    L.save_param_files(dir_path, model.state_arrays(),
                       extra={"model_config": model.config.to_json_dict()})


def load_model(dir_path) -> AttentionAggregationModel:
    arrays, extra = L.load_param_files(dir_path)
    config = ModelConfig.from_json_dict(extra["model_config"])
    model = build_model(config, seed=0)
    model.load_state_arrays(arrays)
    return model


# ---------------------------------------------------------------------------
# mask export and localization


def mask_to_pgm(mask: np.ndarray) -> str:
    """ASCII PGM (P2), value = mask * H * W * 128 rounded and clamped to
    [0, 255]; a uniform mask renders as mid-gray 128."""
    h, w = mask.shape
    scaled = np.clip(np.rint(mask * h * w * 128.0), 0, 255).astype(int)
    rows = "\n".join(" ".join(str(v) for v in row) for row in scaled)
    return f"P2\n{w} {h}\n255\n{rows}\n"


def mask_mass_in_rect(mask: np.ndarray, rect, image_size: int) -> float:
    """Mask probability mass inside an image-space rectangle.

    Each mask cell covers a square block of pixels; cells contribute their
    value times the fraction of their block inside the rectangle, so a
    uniform mask yields exactly rect_area / image_area.
    """
    h, w = mask.shape
    x0, y0, x1, y1 = rect
    cell_h, cell_w = image_size / h, image_size / w
    mass = 0.0
    for i in range(h):
        for j in range(w):
            top, left = i * cell_h, j * cell_w
            overlap_y = max(0.0, min(top + cell_h, y1) - max(top, y0))
            overlap_x = max(0.0, min(left + cell_w, x1) - max(left, x0))
            mass += mask[i, j] * (overlap_y * overlap_x) / (cell_h * cell_w)
    return float(mass)


def export_masks(model: AttentionAggregationModel, dataset, sample_ids,
                 out_dir) -> None:
    """Write one PGM per (sample, scale, attribute), a long-form CSV of raw
    mask values, and per-(sample, scale, attribute) in-cue mass."""
    from attnagg.tensor import no_grad

    if not model.has_attention:
        raise ValueError("model has no attention modules to export")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = np.array([dataset.index_of(int(s)) for s in sample_ids])
    model._set_bn_mode(False)
    with no_grad():
        result = model.forward(Tensor(dataset.images[rows]), training=False)
    image_size = model.config.backbone.input_size
    area = float(image_size * image_size)

    with open(out / "masks.csv", "w", newline="") as fh_m, \
            open(out / "localization.csv", "w", newline="") as fh_l:
        wm = csv.writer(fh_m)
        wm.writerow(["sample_id", "scale", "attr", "row", "col", "value"])
        wl = csv.writer(fh_l)
        wl.writerow(["sample_id", "scale", "attr", "mass", "baseline"])
        for bi, sid in enumerate(sample_ids):
            for scale, mask_t in enumerate(result.masks, start=1):
                planes = mask_t.values[bi]
                for attr in range(planes.shape[0]):
                    mask = planes[attr]
                    name = f"mask_s{int(sid)}_l{scale}_a{attr}.pgm"
                    (out / name).write_text(mask_to_pgm(mask))
                    for r in range(mask.shape[0]):
                        for c in range(mask.shape[1]):
                            wm.writerow([int(sid), scale, attr, r, c,
                                         format(mask[r, c], ".17g")])
                    cue = model_cue_rect(dataset, attr)
                    mass = mask_mass_in_rect(mask, cue, image_size)
                    x0, y0, x1, y1 = cue
                    baseline = (x1 - x0) * (y1 - y0) / area
                    wl.writerow([int(sid), scale, attr, format(mass, ".17g"),
                                 format(baseline, ".17g")])


def model_cue_rect(dataset, attr: int):
    cue = dataset.spec.cues[attr]
    return (cue.x0, cue.y0, cue.x1, cue.y1)
