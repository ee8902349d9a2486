"""Losses, optimizer, training loop, evaluation, latent interpolation, sweeps.

The combined objective is a per-region Chamfer term plus a small-weight
whole-shape Chamfer on the initial prediction; ablation switches degrade the
objective or the architecture for the comparison grids.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import DTensor
from .data import Sample
from .errors import ConfigError, DomainError, NumericalAbort
from .model import ForwardTrace, ModelConfig, PatternModel, save_checkpoint

logger = logging.getLogger(__name__)

METRICS_HEADER = "epoch,split,class,cd_eval,iou,loss_shape,loss_region,loss_total,wall_ms"
METRICS_NOTE = (
    "# cd_eval is per-point normalized: (mean over A of nn-dist + mean over B of nn-dist) / 2; "
    "training losses are raw symmetric nearest-neighbor sums"
)


@dataclass
class TrainConfig:
    alpha: float = 0.1
    lr: float = 1e-4
    batch_size: int = 4
    lr_decay: float = 0.95
    decay_every_epochs: int = 70
    epochs: int = 1
    seed: int = 0
    threads: int = 1
    checkpoint_every: int = 0  # 0 = final checkpoint only
    no_local: bool = False
    no_patterns: bool = False
    no_shift: bool = False
    no_l_region: bool = False
    no_l_shape: bool = False

    def __post_init__(self):
        others = (self.no_patterns, self.no_shift, self.no_l_region, self.no_l_shape)
        if self.no_local and any(others):
            raise ConfigError("no_local drops the region pipeline; other ablation flags conflict")
        if self.batch_size < 1 or self.epochs < 0 or self.threads < 1:
            raise ConfigError("batch_size/threads must be >= 1 and epochs >= 0")

    def model_flags(self) -> dict[str, bool]:
        return {"no_local": self.no_local, "no_patterns": self.no_patterns, "no_shift": self.no_shift}


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    class_label: str
    cd_eval: float
    iou: float
    loss_shape: float
    loss_region: float
    loss_total: float
    wall_ms: float

    def row(self) -> str:
        return ",".join(
            [
                str(self.epoch),
                self.split,
                self.class_label,
                f"{self.cd_eval:.17g}",
                f"{self.iou:.17g}",
                f"{self.loss_shape:.17g}",
                f"{self.loss_region:.17g}",
                f"{self.loss_total:.17g}",
                f"{self.wall_ms:.3f}",
            ]
        )


def write_metrics_csv(path, records: list[MetricsRecord]) -> None:
    with open(path, "w") as fh:
        fh.write(METRICS_NOTE + "\n")
        fh.write(METRICS_HEADER + "\n")
        for rec in records:
            fh.write(rec.row() + "\n")


# ---------------------------------------------------------------------------
# losses


def loss_shape(s_tensor, gt_cloud) -> DTensor:
    """Raw-sum Chamfer between the initial prediction and the full ground truth."""
    return geo.chamfer(s_tensor, gt_cloud)


def loss_region(trace: ForwardTrace, gt_cloud: np.ndarray, model_config: ModelConfig) -> DTensor:
    """Mean Chamfer over region pairs that are nonempty on both sides.

    Ground-truth regions come from splitting the ground truth against its own
    bounding box, which is the same box the forward pass used in training
    mode, so pairs align by voxel index.  Padded rows never participate.
    """
    # full capacity: ground-truth regions must never truncate
    gt_regions = geo.split_regions(gt_cloud, gt_cloud, model_config.regions, gt_cloud.shape[0])
    assert trace.kept_tensors is not None and trace.region_set is not None
    terms = []
    for kept, gt_region in zip(trace.kept_tensors, gt_regions.regions):
        if kept is None or gt_region.is_empty:
            continue
        terms.append(geo.chamfer(kept, gt_region.real_points))
    if not terms:
        raise DomainError("no region pair is nonempty on both sides")
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(terms))


def total_loss(
    trace: ForwardTrace, gt_cloud: np.ndarray, config: TrainConfig, model_config: ModelConfig
) -> tuple[DTensor, dict[str, float]]:
    """Combined objective with ablation switches; returns (loss, component values)."""
    l_shape = loss_shape(trace.s_tensor, gt_cloud)
    if config.no_local:
        return l_shape, {"loss_shape": l_shape.item(), "loss_region": 0.0, "loss_total": l_shape.item()}
    if config.no_l_region:
        l_reg = geo.chamfer(trace.f_tensor, gt_cloud)  # second whole-shape term on F
    else:
        try:
            l_reg = loss_region(trace, gt_cloud, model_config)
        except DomainError:
            # degenerate early state: the prediction occupies only voxels whose
            # ground-truth region is empty; fall back to a whole-shape term so
            # every module still receives a gradient
            logger.warning("no valid region pair; substituting whole-shape term for this sample")
            l_reg = geo.chamfer(trace.f_tensor, gt_cloud)
    if config.no_l_shape:
        total = l_reg
    else:
        total = ad.add(l_reg, ad.scale(l_shape, config.alpha))
    return total, {
        "loss_shape": l_shape.item(),
        "loss_region": l_reg.item(),
        "loss_total": total.item(),
    }


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params, grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place on the parameters."""
    state.t += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p in params:
        if not p.trainable:
            continue
        g = grads[p.name]
        if not np.isfinite(g).all():
            raise NumericalAbort(f"non-finite gradient for parameter {p.name!r}")
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        m, v = state.m[p.name], state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step-decayed learning rate: lr * decay^(epoch // interval)."""
    return config.lr * config.lr_decay ** (epoch // config.decay_every_epochs)


# ---------------------------------------------------------------------------
# training loop


def _batch_gradients(model: PatternModel, batch: list[Sample], config: TrainConfig):
    """Mean gradient over batch members, each on its own tape.

    Members are evaluated sequentially, or concurrently when config.threads
    is above one; the reduction always runs in member order, so both modes
    produce identical sums.
    """

    def member(sample: Sample):
        tape = ad.Tape()
        trace = model.forward(sample.image, reference=sample.gt_cloud, tape=tape)
        loss, parts = total_loss(trace, sample.gt_cloud, config, model.config)
        if not np.isfinite(loss.data).all():
            raise NumericalAbort(f"non-finite loss on sample ({sample.class_name}, {sample.seed})")
        grads = ad.backward(loss, into_params=False)
        return grads, parts, trace

    if config.threads > 1 and len(batch) > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(member, batch))
    else:
        results = [member(s) for s in batch]

    mean_grads: dict[str, np.ndarray] = {}
    for grads, _, _ in results:  # fixed member order
        for name, g in grads.items():
            if name in mean_grads:
                mean_grads[name] += g.data
            else:
                mean_grads[name] = g.data.copy()
    scale = 1.0 / len(batch)
    for name in mean_grads:
        mean_grads[name] *= scale
    return mean_grads, [r[1] for r in results], [r[2] for r in results]


def train(
    samples: list[Sample],
    model: PatternModel,
    config: TrainConfig,
    out_dir=None,
) -> tuple[list[MetricsRecord], AdamState]:
    """Epoch loop with seeded shuffling; returns per-epoch records.

    Writes ``checkpoint.pmod`` under out_dir at the end (and every
    ``checkpoint_every`` epochs); on a non-finite abort the current (last
    good) parameters are dumped next to it.
    """
    if not samples:
        raise DomainError("training requires a nonempty dataset")
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    records: list[MetricsRecord] = []

    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            order = rng.permutation(len(samples))
            part_sums = {"loss_shape": 0.0, "loss_region": 0.0, "loss_total": 0.0}
            cd_sum = iou_sum = 0.0
            n_seen = 0
            lr = lr_at(epoch, config)
            for start in range(0, len(order), config.batch_size):
                batch = [samples[i] for i in order[start : start + config.batch_size]]
                grads, parts, traces = _batch_gradients(model, batch, config)
                adam_step(model.parameters(), grads, state, lr)
                for sample, p, tr in zip(batch, parts, traces):
                    for k in part_sums:
                        part_sums[k] += p[k]
                    cd_sum += geo.chamfer_eval(tr.f_cloud, sample.gt_cloud)
                    iou_sum += _iou_32(tr.f_cloud, sample.gt_cloud)
                    n_seen += 1
            wall_ms = (time.perf_counter() - t0) * 1e3
            records.append(
                MetricsRecord(
                    epoch=epoch,
                    split="train",
                    class_label="all",
                    cd_eval=cd_sum / n_seen,
                    iou=iou_sum / n_seen,
                    loss_shape=part_sums["loss_shape"] / n_seen,
                    loss_region=part_sums["loss_region"] / n_seen,
                    loss_total=part_sums["loss_total"] / n_seen,
                    wall_ms=wall_ms,
                )
            )
            logger.info(
                "epoch %d: loss %.4f (shape %.4f, region %.4f) lr %.2e [%.0f ms]",
                epoch,
                records[-1].loss_total,
                records[-1].loss_shape,
                records[-1].loss_region,
                lr,
                wall_ms,
            )
            if out_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                save_checkpoint(_ckpt_path(out_dir), model, _train_flat(config))
    except NumericalAbort:
        if out_dir is not None:
            save_checkpoint(_ckpt_path(out_dir, "abort_last_good"), model, _train_flat(config))
        raise
    if out_dir is not None:
        save_checkpoint(_ckpt_path(out_dir), model, _train_flat(config))
    return records, state


def _ckpt_path(out_dir, stem: str = "checkpoint"):
    from pathlib import Path

    return Path(out_dir) / f"{stem}.pmod"


def _train_flat(config: TrainConfig) -> dict[str, str]:
    return {f"train.{f.name}": str(getattr(config, f.name)) for f in fields(config)}


def _iou_32(pred: np.ndarray, gt: np.ndarray, resolution: int = 32) -> float:
    bounds = geo.bounding_box(pred, 1e-9).union(geo.bounding_box(gt, 1e-9))
    return geo.iou(geo.voxelize(pred, resolution, bounds), geo.voxelize(gt, resolution, bounds))


# ---------------------------------------------------------------------------
# evaluation


def evaluate(
    model: PatternModel,
    samples: list[Sample],
    split_name: str,
    eval_points: int | None = None,
    epoch: int = 0,
) -> list[MetricsRecord]:
    """Inference-mode metrics: per-class means plus an overall mean row.

    The region split reads only the model's own prediction.  Prediction and
    ground truth are matched in cardinality (farthest-point downsampling)
    before the normalized Chamfer and the 32^3 IoU on their union box.
    """
    per_class: dict[str, list[tuple[float, float, float]]] = {}
    for sample in samples:
        t0 = time.perf_counter()
        trace = model.reconstruct(sample.image)
        pred, gt = _match_cardinality(trace.f_cloud, sample.gt_cloud, eval_points)
        cd = geo.chamfer_eval(pred, gt)
        iou_val = _iou_32(pred, gt)
        wall = (time.perf_counter() - t0) * 1e3
        per_class.setdefault(sample.class_name, []).append((cd, iou_val, wall))

    records = []
    all_cd, all_iou, all_wall = [], [], []
    for cls in sorted(per_class):
        vals = np.asarray(per_class[cls])
        records.append(
            MetricsRecord(epoch, split_name, cls, float(vals[:, 0].mean()), float(vals[:, 1].mean()),
                          0.0, 0.0, 0.0, float(vals[:, 2].sum()))
        )
        all_cd.append(vals[:, 0].mean())
        all_iou.append(vals[:, 1].mean())
        all_wall.append(vals[:, 2].sum())
    records.append(
        MetricsRecord(epoch, split_name, "mean", float(np.mean(all_cd)), float(np.mean(all_iou)),
                      0.0, 0.0, 0.0, float(np.sum(all_wall)))
    )
    return records


def _match_cardinality(pred: np.ndarray, gt: np.ndarray, eval_points: int | None):
    target = eval_points if eval_points is not None else min(pred.shape[0], gt.shape[0])
    target = min(target, pred.shape[0], gt.shape[0])
    pred = geo.downsample(pred, target, "fps") if pred.shape[0] > target else pred
    gt = geo.downsample(gt, target, "fps") if gt.shape[0] > target else gt
    return pred, gt


# ---------------------------------------------------------------------------
# latent interpolation


def interpolate_latent(
    model: PatternModel, image_a: np.ndarray, image_b: np.ndarray, steps: int
) -> list[tuple[float, np.ndarray]]:
    """Reconstructions from uniformly interpolated image codes.

    Endpoints bypass the blend entirely so they reproduce the plain
    reconstructions bit for bit.
    """
    if steps < 2:
        raise DomainError(f"interpolation needs at least 2 steps, got {steps}")
    pt = model._watch_all(None)
    code_a = model.encode_image(np.asarray(image_a, dtype=np.float64), pt).data
    code_b = model.encode_image(np.asarray(image_b, dtype=np.float64), pt).data
    out = []
    for lam in np.linspace(0.0, 1.0, steps):
        lam = float(lam)
        if lam == 0.0:
            code = code_a
        elif lam == 1.0:
            code = code_b
        else:
            code = (1.0 - lam) * code_a + lam * code_b
        trace = model.forward_from_code(code, reference=None)
        out.append((lam, trace.f_cloud))
    return out


# ---------------------------------------------------------------------------
# sweeps


SWEEP_PARAMETERS = ("alpha", "M", "N", "sampling_mode")


def sweep(
    parameter: str,
    values: list,
    model_config: ModelConfig,
    train_config: TrainConfig,
    dataset: dict[str, list[Sample]],
    model_seed: int = 0,
) -> list[dict]:
    """Train/evaluate one run per value; returns one result row per valid value."""
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigError(f"sweep parameter must be one of {SWEEP_PARAMETERS}, got {parameter!r}")
    rows = []
    for value in values:
        try:
            mc, tc = _apply_sweep_value(parameter, value, model_config, train_config)
        except (ConfigError, DomainError) as exc:
            logger.warning("skipping %s=%r: %s", parameter, value, exc)
            continue
        model = PatternModel(mc, seed=model_seed)
        train(dataset["train"], model, tc)
        cd_seen = evaluate(model, dataset["test_seen"], "seen")[-1].cd_eval
        cd_unseen = evaluate(model, dataset["test_unseen"], "unseen")[-1].cd_eval
        rows.append({"parameter": parameter, "value": value, "cd_seen": cd_seen, "cd_unseen": cd_unseen})
    return rows


def _apply_sweep_value(parameter, value, mc: ModelConfig, tc: TrainConfig):
    if parameter == "alpha":
        return mc, replace(tc, alpha=float(value))
    if parameter == "M":
        return replace(mc, regions=int(value)), tc
    if parameter == "N":
        return replace(mc, patterns=int(value)), tc
    # sampling_mode: validate the lattice is constructible at this point count
    mc2 = replace(mc, sampling_mode=str(value))
    geo.grid_lattice(mc2.pattern_points, mc2.pattern_extent, mc2.sampling_mode)
    return mc2, tc


def write_sweep_csv(path, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write("parameter,value,cd_seen,cd_unseen\n")
        for r in rows:
            fh.write(f"{r['parameter']},{r['value']},{r['cd_seen']:.17g},{r['cd_unseen']:.17g}\n")


# ---------------------------------------------------------------------------
# overfit harness


def overfit_harness(
    model: PatternModel,
    samples: list[Sample],
    config: TrainConfig,
    max_steps: int = 500,
    target_fraction: float = 0.25,
    check_every: int = 10,
) -> dict:
    """Drive optimizer steps until the full-dataset loss falls to the target
    fraction of its initial value (or the step budget runs out)."""
    initial = dataset_loss(model, samples, config)
    target = target_fraction * initial
    state = AdamState()
    rng = np.random.default_rng(config.seed)
    steps = 0
    current = initial
    t0 = time.perf_counter()
    while steps < max_steps:
        order = rng.permutation(len(samples))
        for start in range(0, len(order), config.batch_size):
            batch = [samples[i] for i in order[start : start + config.batch_size]]
            grads, _, _ = _batch_gradients(model, batch, config)
            adam_step(model.parameters(), grads, state, lr_at(0, config))
            steps += 1
            if steps % check_every == 0 or steps >= max_steps:
                current = dataset_loss(model, samples, config)
                if current <= target or steps >= max_steps:
                    break
        if current <= target:
            break
    return {
        "initial_loss": initial,
        "final_loss": current,
        "steps": steps,
        "seconds": time.perf_counter() - t0,
        "reached": current <= target,
    }


def dataset_loss(model: PatternModel, samples: list[Sample], config: TrainConfig) -> float:
    """Mean training objective over a dataset, without touching parameters."""
    vals = []
    for s in samples:
        trace = model.forward(s.image, reference=s.gt_cloud, tape=None)
        _, parts = total_loss(trace, s.gt_cloud, config, model.config)
        vals.append(parts["loss_total"])
    return float(np.mean(vals))
