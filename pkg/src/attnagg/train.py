"""Training loop: attention-first freeze phase, end-to-end phase, SGD with
momentum or Adam, plateau-driven learning-rate decay, prediction-history
recording, per-epoch checkpoints with bit-exact resume, and the component
ablation matrix.

Schedule: while ``epoch < freeze_epochs`` the primary network is frozen and
only the attention branches train, under their own losses; afterwards the
full objective applies to everything. Prediction probabilities of the final
aggregated logits are collected over the training samples each epoch (from
the training-time forward passes) starting at ``burn_in_epochs``; they feed
the dispersion weights of the attention losses in later epochs.

The learning rate divides by ``lr_decay_factor`` whenever the monitored
validation metric fails to improve for ``plateau_patience`` consecutive
epochs, and training stops once a decay would cross ``lr_floor``.

Determinism contract: with BLAS threads pinned (the default) a (seed,
config) pair yields bit-identical parameters, records and history; resuming
from any checkpoint reproduces the uninterrupted run exactly.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from attnagg.data import Dataset, DatasetSpec, generate, priors_from, split
from attnagg.layers import load_param_files, save_param_files
from attnagg.losses import (
    ClassWeights,
    FocalConfig,
    LossBreakdown,
    PredictionHistory,
    class_weights,
    total_loss,
)
from attnagg.metrics import MetricsReport, compute_report
from attnagg.model import (
    AttentionAggregationModel,
    ModelConfig,
    build_model,
    load_model,
    save_model,
)
from attnagg.tensor import (
    Rng,
    ShapeMismatch,
    Tensor,
    backward,
    derive_seed,
    no_grad,
    reset_graph,
    sigmoid_values,
)

_TAG_ORDER = 0xB47C0
_TAG_AUG = 0xA06E1


class NonFiniteLoss(RuntimeError):
    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    optimizer: str = "sgd_momentum"  # or "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 5e-4
    batch_size: int = 16
    freeze_epochs: int = 2
    max_epochs: int = 30
    lr_decay_factor: float = 10.0
    lr_floor: float = 1e-5
    plateau_patience: int = 3
    burn_in_epochs: int = 2
    history_window: int = 5
    focal_gamma: float = 0.5
    monitor: str = "map"  # or "f1"
    use_weighted_focal: bool = True
    use_attention: bool = True
    use_attention_loss: bool = True
    use_multiscale: bool = True
    std_per_attribute: bool = False
    variance_bessel: bool = False
    augment_mirror: bool = False
    augment_crop: bool = False
    crop_min: int = 24
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def validate(self):
        if self.optimizer not in ("sgd_momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.monitor not in ("map", "f1"):
            raise ValueError(f"monitor must be 'map' or 'f1', got {self.monitor!r}")
        if not self.lr > self.lr_floor >= 0:
            raise ValueError("need lr > lr_floor >= 0")
        if self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must exceed 1")
        if self.use_attention_loss and not self.use_attention:
            raise ValueError("use_attention_loss requires use_attention")
        if self.use_multiscale and not self.use_attention:
            raise ValueError("use_multiscale requires use_attention")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        return self

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["split_fractions"] = list(self.split_fractions)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        for k in d:
            if k not in known:
                raise ValueError(f"unknown train config field {k!r}")
        kw = dict(d)
        if "adam_betas" in kw:
            kw["adam_betas"] = tuple(kw["adam_betas"])
        if "split_fractions" in kw:
            kw["split_fractions"] = tuple(kw["split_fractions"])
        return cls(**kw).validate()


# ---------------------------------------------------------------------------
# optimizers


class SgdMomentum:
    """v <- momentum * v + grad + weight_decay * param; param <- param - lr*v.
    Weight decay is folded into the gradient (coupled form)."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {n: np.zeros_like(p.values) for n, p in params.items()}

    def step(self):
        for name, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            if p.grad.shape != p.values.shape:
                raise ShapeMismatch(f"{name}: grad {p.grad.shape} vs "
                                    f"param {p.values.shape}")
            g = p.grad + self.weight_decay * p.values
            v = self.momentum * self.velocity[name] + g
            self.velocity[name] = v
            p.values -= self.lr * v

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> tuple[dict[str, np.ndarray], dict]:
        return ({f"velocity.{n}": v for n, v in self.velocity.items()},
                {"kind": "sgd_momentum"})

    def load_state_arrays(self, arrays: dict, meta: dict):
        for n in self.velocity:
            self.velocity[n][...] = arrays[f"velocity.{n}"]


class Adam:
    """Bias-corrected Adam; weight decay added to the gradient (coupled)."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(p.values) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.values) for n, p in params.items()}
        self.t = {n: 0 for n in params}

    def step(self):
        b1, b2 = self.betas
        for name, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            if p.grad.shape != p.values.shape:
                raise ShapeMismatch(f"{name}: grad {p.grad.shape} vs "
                                    f"param {p.values.shape}")
            g = p.grad + self.weight_decay * p.values
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** t)
            v_hat = self.v[name] / (1 - b2 ** t)
            p.values -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays = {f"m.{n}": v for n, v in self.m.items()}
        arrays.update({f"v.{n}": v for n, v in self.v.items()})
        return arrays, {"kind": "adam", "t": dict(self.t)}

    def load_state_arrays(self, arrays: dict, meta: dict):
        for n in self.m:
            self.m[n][...] = arrays[f"m.{n}"]
            self.v[n][...] = arrays[f"v.{n}"]
        self.t = {n: int(v) for n, v in meta["t"].items()}


def make_optimizer(cfg: TrainConfig, params: dict[str, Tensor]):
    if cfg.optimizer == "adam":
        return Adam(params, cfg.lr, cfg.adam_betas, cfg.adam_eps,
                    cfg.weight_decay)
    return SgdMomentum(params, cfg.lr, cfg.momentum, cfg.weight_decay)


class PlateauScheduler:
    """Divide lr by ``factor`` after ``patience`` consecutive epochs without
    improvement of the monitored metric (higher is better); request a stop
    when the next decay would cross ``floor``."""

    def __init__(self, lr: float, factor: float, patience: int, floor: float):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.floor = floor
        self.best: float | None = None
        self.bad = 0

    def update(self, metric: float) -> bool:
        """Feed the epoch's metric; returns True when training should stop."""
        if self.best is None or metric > self.best:
            self.best = metric
            self.bad = 0
            return False
        self.bad += 1
        if self.bad >= self.patience:
            self.bad = 0
            if self.lr / self.factor < self.floor:
                return True
            self.lr = self.lr / self.factor
        return False

    def state(self) -> dict:
        return {"lr": self.lr, "best": self.best, "bad": self.bad}

    def load_state(self, d: dict):
        self.lr = d["lr"]
        self.best = d["best"]
        self.bad = d["bad"]


@dataclass
class EpochRecord:
    epoch: int
    losses: dict[str, float]
    val: MetricsReport
    lr: float
    wall_time_s: float = 0.0

    def to_json_dict(self) -> dict:
        # wall time deliberately excluded: the jsonl stream is part of the
        # bit-exact determinism contract
        return {"epoch": self.epoch, "losses": self.losses,
                "val": self.val.to_json_dict(), "lr": self.lr}


def batch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return Rng(derive_seed(seed, _TAG_ORDER, epoch)).permutation(n)


def augment_batch(images: np.ndarray, rng: Rng, mirror: bool, crop: bool,
                  crop_min: int) -> np.ndarray:
    """Optional horizontal mirroring and random square crop (nearest-neighbor
    resized back). Off by default, deterministic per epoch stream."""
    out = images.copy()
    size = images.shape[-1]
    for i in range(out.shape[0]):
        if mirror and rng.next_float() < 0.5:
            out[i] = out[i, :, :, ::-1]
        if crop:
            s = crop_min + rng.below(size - crop_min + 1)
            if s < size:
                oy = rng.below(size - s + 1)
                ox = rng.below(size - s + 1)
                patch = out[i][:, oy:oy + s, ox:ox + s]
                idx = (np.arange(size) * s) // size
                out[i] = patch[:, idx][:, :, idx]
    return out


def evaluate_model(model: AttentionAggregationModel, ds: Dataset,
                   threshold: float = 0.5, batch_size: int = 128,
                   min_prior: float = 0.0) -> MetricsReport:
    probs = predict_probs(model, ds, batch_size)
    return compute_report(probs, ds.labels, threshold, min_prior=min_prior)


def predict_probs(model: AttentionAggregationModel, ds: Dataset,
                  batch_size: int = 128) -> np.ndarray:
    out = np.empty_like(ds.labels, dtype=np.float64)
    model._set_bn_mode(False)
    with no_grad():
        for lo in range(0, len(ds), batch_size):
            x = Tensor(ds.images[lo:lo + batch_size])
            res = model.forward(x, training=False)
            out[lo:lo + batch_size] = sigmoid_values(res.y_final.values)
    return out


# ---------------------------------------------------------------------------
# checkpointing


def write_checkpoint(ckpt_dir, model, optimizer, sched: PlateauScheduler,
                     history: PredictionHistory, epoch: int):
    d = Path(ckpt_dir)
    d.mkdir(parents=True, exist_ok=True)
    save_model(d / "params", model)
    arrays, meta = optimizer.state_arrays()
    save_param_files(d / "optimizer_state", arrays, extra=meta)
    (d / "optimizer.json").write_text(json.dumps(meta, sort_keys=True))
    history.save_csv(d / "history.csv")
    (d / "state.json").write_text(json.dumps(
        {"epoch": epoch, "scheduler": sched.state()}, sort_keys=True))


def load_checkpoint(ckpt_dir, model, optimizer, sched: PlateauScheduler,
                    cfg: TrainConfig) -> tuple[int, PredictionHistory]:
    d = Path(ckpt_dir)
    arrays, extra = load_param_files(d / "params")
    model.load_state_arrays({k: v for k, v in arrays.items()})
    opt_arrays, opt_meta = load_param_files(d / "optimizer_state")
    optimizer.load_state_arrays(opt_arrays, opt_meta)
    state = json.loads((d / "state.json").read_text())
    sched.load_state(state["scheduler"])
    history = PredictionHistory.load_csv(
        d / "history.csv", window=cfg.history_window,
        burn_in=cfg.burn_in_epochs, per_attribute=cfg.std_per_attribute,
        bessel=cfg.variance_bessel)
    return int(state["epoch"]), history


# ---------------------------------------------------------------------------
# fit


def fit(model: AttentionAggregationModel, train_ds: Dataset, val_ds: Dataset,
        cfg: TrainConfig, out_dir=None, resume_from=None,
        log=None) -> tuple[AttentionAggregationModel, list[EpochRecord]]:
    cfg.validate()
    n = len(train_ds)
    c = train_ds.labels.shape[1]
    ids = train_ds.sample_ids

    if cfg.use_weighted_focal:
        weights = class_weights(priors_from(train_ds.labels))
        focal = FocalConfig(cfg.focal_gamma)
    else:
        weights = class_weights(np.zeros(c))  # unit weights
        focal = FocalConfig(0.0)

    params = model.named_parameters()
    optimizer = make_optimizer(cfg, params)
    sched = PlateauScheduler(cfg.lr, cfg.lr_decay_factor, cfg.plateau_patience,
                             cfg.lr_floor)
    history = PredictionHistory(
        window=cfg.history_window, burn_in=cfg.burn_in_epochs,
        per_attribute=cfg.std_per_attribute, bessel=cfg.variance_bessel)
    start_epoch = 0
    if resume_from is not None:
        last_epoch, history = load_checkpoint(resume_from, model, optimizer,
                                              sched, cfg)
        start_epoch = last_epoch + 1

    effective_freeze = cfg.freeze_epochs if model.has_attention else 0
    records: list[EpochRecord] = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    for epoch in range(start_epoch, cfg.max_epochs):
        t0 = time.perf_counter()
        frozen = epoch < effective_freeze
        model.set_freeze("primary", frozen)
        optimizer.lr = sched.lr
        order = batch_order(cfg.seed, epoch, n)
        aug_rng = Rng(derive_seed(cfg.seed, _TAG_AUG, epoch))
        epoch_probs = np.zeros((n, c))
        sums = {"l_w": 0.0, "l_a1": 0.0, "l_a2": 0.0, "total": 0.0}

        for bi, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            x_np = train_ds.images[idx]
            if cfg.augment_mirror or cfg.augment_crop:
                x_np = augment_batch(x_np, aug_rng, cfg.augment_mirror,
                                     cfg.augment_crop, cfg.crop_min)
            y = train_ds.labels[idx]
            bids = ids[idx]
            reset_graph()
            out = model.forward(Tensor(x_np), training=True)
            lb = total_loss(
                out, y, weights, focal,
                history if cfg.use_attention_loss else None, epoch, bids,
                include_primary=not frozen)
            if not np.isfinite(lb.total.item()):
                raise NonFiniteLoss(epoch, bi)
            backward(lb.total)
            optimizer.step()
            optimizer.zero_grad()
            epoch_probs[idx] = sigmoid_values(out.y_final.values)
            for k, v in lb.items().items():
                sums[k] += v * len(idx)

        if epoch >= cfg.burn_in_epochs:
            history.record_epoch(epoch, epoch_probs, ids)

        val_report = evaluate_model(model, val_ds)
        losses = {k: v / n for k, v in sums.items()}
        rec = EpochRecord(epoch=epoch, losses=losses, val=val_report,
                          lr=sched.lr, wall_time_s=time.perf_counter() - t0)
        records.append(rec)
        if log is not None:
            log(rec)
        # scheduler advances before the checkpoint so a resumed run sees the
        # exact state an uninterrupted run would carry into the next epoch
        metric = val_report.map if cfg.monitor == "map" else val_report.ex_f1
        stop = sched.update(metric)
        if out_path is not None:
            with open(out_path / "epochs.jsonl", "a") as fh:
                fh.write(json.dumps(rec.to_json_dict(), sort_keys=True) + "\n")
            with open(out_path / "timings.jsonl", "a") as fh:
                fh.write(json.dumps({"epoch": epoch,
                                     "wall_time_s": rec.wall_time_s}) + "\n")
            write_checkpoint(out_path / "checkpoints" / f"epoch_{epoch:04d}",
                             model, optimizer, sched, history, epoch)
        if stop:
            break

    model.set_freeze("primary", False)
    return model, records


# ---------------------------------------------------------------------------
# ablation matrix

ABLATION_ROWS: tuple[tuple[str, dict], ...] = (
    ("baseline", dict(use_weighted_focal=False, use_attention=False,
                      use_attention_loss=False, use_multiscale=False)),
    ("weighted_focal", dict(use_weighted_focal=True, use_attention=False,
                            use_attention_loss=False, use_multiscale=False)),
    ("focal_attention", dict(use_weighted_focal=True, use_attention=True,
                             use_attention_loss=False, use_multiscale=False)),
    ("single_scale_losses", dict(use_weighted_focal=True, use_attention=True,
                                 use_attention_loss=True, use_multiscale=False)),
    ("full", dict(use_weighted_focal=True, use_attention=True,
                  use_attention_loss=True, use_multiscale=True)),
)

ABLATION_CSV_HEADER = "Lw,Attention,La,Multiscale,seed,map,f1"


def run_single(model_cfg: ModelConfig, train_cfg: TrainConfig,
               dataset: Dataset) -> dict:
    """Train one configuration on a pre-generated dataset; returns val/test
    reports and the trained model."""
    model_cfg = replace(model_cfg, use_attention=train_cfg.use_attention,
                        use_multiscale=train_cfg.use_multiscale)
    train, val, test = split(dataset, train_cfg.split_fractions, train_cfg.seed)
    model = build_model(model_cfg.validate(), seed=train_cfg.seed)
    model, records = fit(model, train, val, train_cfg)
    val_report = records[-1].val
    return {"model": model, "records": records, "val_report": val_report,
            "train": train, "val": val, "test": test}


def run_ablation(model_cfg: ModelConfig, train_cfg: TrainConfig,
                 dataset_spec: DatasetSpec, seeds, rows=None,
                 log=None) -> list[dict]:
    """Flag matrix x seeds. Each seed gets its own dataset draw, shared by
    every row so comparisons are paired."""
    rows = list(rows if rows is not None else ABLATION_ROWS)
    results = []
    for seed in seeds:
        ds = generate(replace(dataset_spec, seed=seed))
        for name, flags in rows:
            cfg = replace(train_cfg, seed=seed, **flags)
            res = run_single(model_cfg, cfg.validate(), ds)
            rep = res["val_report"]
            results.append({
                "row": name, "seed": seed,
                "Lw": int(flags["use_weighted_focal"]),
                "Attention": int(flags["use_attention"]),
                "La": int(flags["use_attention_loss"]),
                "Multiscale": int(flags["use_multiscale"]),
                "map": rep.map, "f1": rep.ex_f1, "report": rep,
                "result": res,
            })
            if log is not None:
                log(results[-1])
    return results


def ablation_csv_lines(results: list[dict]) -> list[str]:
    lines = [ABLATION_CSV_HEADER]
    for r in results:
        lines.append(f"{r['Lw']},{r['Attention']},{r['La']},{r['Multiscale']},"
                     f"{r['seed']},{r['map']:.6f},{r['f1']:.6f}")
    return lines
