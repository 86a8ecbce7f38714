"""Synthetic imbalanced multi-label image datasets with planted spatial cues.

Each attribute owns a fixed rectangle and a texture; the texture is rendered
into the rectangle iff the attribute's label is 1, so "did the mask find the
cue" is a measurable question. Labels are Bernoulli draws per attribute at
configurable priors, giving controllable imbalance ratios.

Rendering rules (normative):

* the clean layer is a flat 0.5 background; each positive attribute paints
  its texture over its rectangle, in attribute order (later attributes
  overwrite earlier ones where user-supplied rectangles overlap; the default
  layout is disjoint);
* rectangles are half-open pixel boxes [x0, x1) x [y0, y1), x along width;
* textures: ``solid`` paints HI; ``stripes`` alternates HI/LO per row;
  ``checker`` alternates HI/LO in 2x2 blocks. HI/LO sit at 0.5 +- deviations
  scaled by ``cue_strength``;
* the stored image is clean + uniform noise in [-noise_std, +noise_std],
  clipped to [0, 1] (a no-op at default settings);
* sample i draws from its own substream derived from (seed, i), so
  generation order and worker count cannot change the data.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from attnagg.tensor import Rng, derive_seed, dump_tensor, load_tensor
from attnagg.metrics import NoPositives


class InvalidSpec(ValueError):
    """Dataset spec fails validation; the message names the field."""


class BadFractions(ValueError):
    """Split fractions must be positive and sum to 1."""


TEXTURES = ("solid", "stripes", "checker")
BACKGROUND = 0.5
_HI_DELTA = 0.35  # HI = 0.85 at cue_strength 1
_LO_DELTA = 0.05  # LO = 0.55 at cue_strength 1


@dataclass(frozen=True)
class Cue:
    x0: int
    y0: int
    x1: int
    y1: int
    texture: str


@dataclass
class DatasetSpec:
    num_samples: int
    image_size: tuple[int, int]  # (H, W)
    num_attributes: int
    priors: tuple[float, ...]
    cues: tuple[Cue, ...]
    noise_std: float = 0.1
    cue_strength: float = 1.0
    label_correlation: float = 0.0
    seed: int = 0

    def validate(self):
        h, w = self.image_size
        if self.num_samples < 1:
            raise InvalidSpec("num_samples must be >= 1")
        if h < 1 or w < 1:
            raise InvalidSpec("image_size must be positive")
        if self.num_attributes != len(self.priors):
            raise InvalidSpec("priors length must equal num_attributes")
        if self.num_attributes != len(self.cues):
            raise InvalidSpec("cues length must equal num_attributes")
        for c, p in enumerate(self.priors):
            if not 0.0 < p < 1.0:
                raise InvalidSpec(f"priors[{c}] must be in (0, 1), got {p}")
        for c, cue in enumerate(self.cues):
            if cue.texture not in TEXTURES:
                raise InvalidSpec(f"cues[{c}].texture unknown: {cue.texture!r}")
            if not (0 <= cue.x0 < cue.x1 <= w and 0 <= cue.y0 < cue.y1 <= h):
                raise InvalidSpec(f"cues[{c}] rectangle out of bounds")
        if self.noise_std < 0:
            raise InvalidSpec("noise_std must be >= 0")
        if not 0.0 <= self.label_correlation <= 1.0:
            raise InvalidSpec("label_correlation must be in [0, 1]")
        return self

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["priors"] = list(self.priors)
        d["cues"] = [list(asdict(c).values()) for c in self.cues]
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "DatasetSpec":
        known = {f for f in cls.__dataclass_fields__}
        for k in d:
            if k not in known:
                raise InvalidSpec(f"unknown spec field {k!r}")
        missing = {"num_samples", "image_size", "num_attributes", "priors",
                   "cues"} - set(d)
        if missing:
            raise InvalidSpec(f"missing spec field {sorted(missing)[0]!r}")
        kw = dict(d)
        kw["image_size"] = tuple(d["image_size"])
        kw["priors"] = tuple(float(p) for p in d["priors"])
        kw["cues"] = tuple(Cue(int(c[0]), int(c[1]), int(c[2]), int(c[3]), c[4])
                           for c in d["cues"])
        return cls(**kw).validate()


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] in [0, 1]
    labels: np.ndarray  # [C] of {0, 1}
    cue_boxes: list  # (attr, (x0, y0, x1, y1)) for positive attributes
    sample_id: int


@dataclass
class Dataset:
    spec: DatasetSpec
    images: np.ndarray  # [N, 3, H, W]
    labels: np.ndarray  # [N, C] float64 of {0, 1}
    sample_ids: np.ndarray  # [N]
    clean: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return self.images.shape[0]

    def sample(self, i: int) -> Sample:
        boxes = [(c, (cue.x0, cue.y0, cue.x1, cue.y1))
                 for c, cue in enumerate(self.spec.cues) if self.labels[i, c] == 1]
        return Sample(self.images[i], self.labels[i], boxes,
                      int(self.sample_ids[i]))

    def index_of(self, sample_id: int) -> int:
        pos = np.nonzero(self.sample_ids == sample_id)[0]
        if len(pos) == 0:
            raise KeyError(f"unknown sample id {sample_id}")
        return int(pos[0])


def texture_patch(cue: Cue, cue_strength: float = 1.0) -> np.ndarray:
    """The texture values a positive cue paints, as an [y1-y0, x1-x0] patch."""
    h, w = cue.y1 - cue.y0, cue.x1 - cue.x0
    hi = BACKGROUND + cue_strength * _HI_DELTA
    lo = BACKGROUND + cue_strength * _LO_DELTA
    if cue.texture == "solid":
        return np.full((h, w), hi)
    yy, xx = np.mgrid[0:h, 0:w]
    if cue.texture == "stripes":
        return np.where(yy % 2 == 0, hi, lo)
    if cue.texture == "checker":
        return np.where((yy // 2 + xx // 2) % 2 == 0, hi, lo)
    raise InvalidSpec(f"unknown texture {cue.texture!r}")


def render_clean(spec: DatasetSpec, labels_row) -> np.ndarray:
    """Noise-free layer for one sample: background plus positive textures."""
    h, w = spec.image_size
    img = np.full((3, h, w), BACKGROUND)
    for c, cue in enumerate(spec.cues):
        if labels_row[c]:
            img[:, cue.y0:cue.y1, cue.x0:cue.x1] = texture_patch(
                cue, spec.cue_strength)
    return img


def _draw_labels(spec: DatasetSpec, rng: Rng) -> np.ndarray:
    c = spec.num_attributes
    corr = spec.label_correlation
    if corr == 0.0:
        draws = rng.float_array(c)
    else:
        # shared latent induces positive co-occurrence, priors preserved
        latent = rng.next_float()
        use_latent = rng.float_array(c) < corr
        own = rng.float_array(c)
        draws = np.where(use_latent, latent, own)
    return (draws < np.asarray(spec.priors)).astype(np.float64)


def generate(spec: DatasetSpec, return_clean: bool = False) -> Dataset:
    """Deterministic dataset from a spec; a pure function of its fields."""
    spec.validate()
    n = spec.num_samples
    h, w = spec.image_size
    images = np.empty((n, 3, h, w))
    labels = np.empty((n, spec.num_attributes))
    clean_store = np.empty((n, 3, h, w)) if return_clean else None
    for i in range(n):
        rng = Rng(derive_seed(spec.seed, i))
        labels[i] = _draw_labels(spec, rng)
        clean = render_clean(spec, labels[i])
        noise = rng.uniform(-spec.noise_std, spec.noise_std, 3 * h * w)
        images[i] = np.clip(clean + noise.reshape(3, h, w), 0.0, 1.0)
        if return_clean:
            clean_store[i] = clean
    return Dataset(spec=spec, images=images, labels=labels,
                   sample_ids=np.arange(n), clean=clean_store)


def priors_from(labels) -> np.ndarray:
    """Empirical positive rate per attribute: positives_c / N."""
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] < 1:
        raise ValueError(f"labels must be [N, C] with N >= 1, got {y.shape}")
    return y.mean(axis=0)


def imbalance_ratio(labels) -> list[str]:
    """Per attribute ``1:k`` with k = round(negatives / positives)."""
    y = np.asarray(labels)
    out = []
    for c in range(y.shape[1]):
        pos = int(y[:, c].sum())
        if pos == 0:
            raise NoPositives(f"attribute {c} has no positive samples")
        out.append(f"1:{round((y.shape[0] - pos) / pos)}")
    return out


def split(ds: Dataset, fractions, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Disjoint, exhaustive train/val/test split; sizes floor(f*N) for train
    and val, remainder to test. Sample ids are preserved."""
    f = tuple(float(x) for x in fractions)
    if len(f) != 3 or any(x <= 0 for x in f) or abs(sum(f) - 1.0) > 1e-9:
        raise BadFractions(f"fractions must be 3 positives summing to 1, got {f}")
    n = len(ds)
    perm = Rng(derive_seed(seed, 0x5EED)).permutation(n)
    n_tr, n_val = int(f[0] * n), int(f[1] * n)
    parts = (perm[:n_tr], perm[n_tr:n_tr + n_val], perm[n_tr + n_val:])

    def take(idx):
        return Dataset(spec=ds.spec, images=ds.images[idx].copy(),
                       labels=ds.labels[idx].copy(),
                       sample_ids=ds.sample_ids[idx].copy(),
                       clean=None if ds.clean is None else ds.clean[idx].copy())

    return take(parts[0]), take(parts[1]), take(parts[2])


# ---------------------------------------------------------------------------
# on-disk format: spec.json + labels.csv + cues.csv + per-sample dump files


def save_dataset(ds: Dataset, dir_path) -> None:
    d = Path(dir_path)
    (d / "images").mkdir(parents=True, exist_ok=True)
    (d / "spec.json").write_text(json.dumps(ds.spec.to_json_dict(), indent=1))
    c = ds.spec.num_attributes
    with open(d / "labels.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["sample_id"] + [f"attr_{a}" for a in range(c)])
        for i, sid in enumerate(ds.sample_ids):
            wr.writerow([int(sid)] + [int(v) for v in ds.labels[i]])
    with open(d / "cues.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["sample_id", "attr", "x0", "y0", "x1", "y1"])
        for i, sid in enumerate(ds.sample_ids):
            for a, (x0, y0, x1, y1) in (
                    (a, (cue.x0, cue.y0, cue.x1, cue.y1))
                    for a, cue in enumerate(ds.spec.cues) if ds.labels[i, a] == 1):
                wr.writerow([int(sid), a, x0, y0, x1, y1])
    for i, sid in enumerate(ds.sample_ids):
        dump_tensor(d / "images" / f"sample_{int(sid):06d}.txt", ds.images[i])


def load_dataset(dir_path) -> Dataset:
    d = Path(dir_path)
    spec = DatasetSpec.from_json_dict(json.loads((d / "spec.json").read_text()))
    with open(d / "labels.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    ids = np.array([int(r[0]) for r in rows[1:]])
    labels = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    images = np.stack([load_tensor(d / "images" / f"sample_{int(s):06d}.txt")
                       for s in ids])
    return Dataset(spec=spec, images=images, labels=labels, sample_ids=ids)


def default_cues(image_size: tuple[int, int], num_attributes: int,
                 rect: int = 8) -> tuple[Cue, ...]:
    """Disjoint rectangles on a grid, textures cycling through the palette."""
    h, w = image_size
    cols = max(1, int(np.ceil(np.sqrt(num_attributes * w / h))))
    rows = int(np.ceil(num_attributes / cols))
    if cols * rect > w or rows * rect > h:
        raise InvalidSpec(f"cannot place {num_attributes} {rect}x{rect} cues "
                          f"on a {h}x{w} image")
    cues = []
    for a in range(num_attributes):
        r, c = divmod(a, cols)
        # spread cells evenly, cue centered in its cell
        cx = (c * w) // cols + ((w // cols) - rect) // 2
        cy = (r * h) // rows + ((h // rows) - rect) // 2
        cues.append(Cue(cx, cy, cx + rect, cy + rect, TEXTURES[a % len(TEXTURES)]))
    return tuple(cues)
