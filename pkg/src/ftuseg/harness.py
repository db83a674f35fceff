"""Training, evaluation, and regime-comparison runs.

A run is fully determined by its :class:`~ftuseg.config.RunConfig`: dataset
generation, fold assignment, shuffling, augmentation, and weight init all
derive from the config seed, so two sequential runs with the same config
produce byte-identical metrics CSVs.  Wall-clock timings are real and
therefore live in a separate ``timing.csv`` rather than the metrics file.

Per-epoch metrics: mean training losses (total/main/aux), validation dice
averaged per image and per organ (threshold 0.5, no TTA), current lr, and
the mean L2 gradient norm over each encoder stage's parameters.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import (
    ColorStats,
    Domain,
    Organ,
    Sample,
    augment_arrays,
    color_normalize,
    generate_dataset,
    load_dataset,
    pooled_color_stats,
    resize_image,
    resize_mask,
    stratified_kfold,
    write_pgm,
)
from .inference import ThresholdTable, rle_encode, threshold_mask, tta_predict
from .losses import composite_loss, dice_score
from .model import SegModel, load_checkpoint, save_checkpoint
from .schedule import OptState, adam_step, aux_stage_for_epoch, plateau_step
from .tensor import Tensor, scale, sigmoid_array

METRICS_NAME = "metrics.csv"
TIMING_NAME = "timing.csv"
CHECKPOINT_NAME = "checkpoint.ckpt"
CONFIG_ECHO_NAME = "run_config.ini"


def _combine_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass
class MetricsRow:
    epoch: int
    regime: str
    aux_stage: int | None
    train_total_loss: float
    train_main_loss: float
    train_aux_loss: float | None
    val_dice_mean_per_image: float
    val_dice_mean_per_organ: float
    lr: float
    grad_norms: tuple[float, ...]
    wall_seconds: float


@dataclass
class MetricsLog:
    num_stages: int
    rows: list[MetricsRow] = field(default_factory=list)

    def columns(self) -> list[str]:
        return [
            "epoch", "regime", "aux_stage",
            "train_total_loss", "train_main_loss", "train_aux_loss",
            "val_dice_mean_per_image", "val_dice_mean_per_organ", "lr",
        ] + [f"grad_norm_stage{i}" for i in range(1, self.num_stages + 1)]

    def row_values(self, row: MetricsRow) -> list[str]:
        values = [
            str(row.epoch),
            row.regime,
            "" if row.aux_stage is None else str(row.aux_stage),
            repr(row.train_total_loss),
            repr(row.train_main_loss),
            "" if row.train_aux_loss is None else repr(row.train_aux_loss),
            repr(row.val_dice_mean_per_image),
            repr(row.val_dice_mean_per_organ),
            repr(row.lr),
        ]
        values.extend(repr(g) for g in row.grad_norms)
        return values

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns())
            for row in self.rows:
                writer.writerow(self.row_values(row))

    def write_timing(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "wall_seconds"])
            for row in self.rows:
                writer.writerow([row.epoch, repr(row.wall_seconds)])


class Trainer:
    """Owns one run's dataset, model, and optimizer; advances epoch by epoch."""

    def __init__(self, config: RunConfig):
        config.validate()
        self.config = config
        self.samples = generate_dataset(config.samples_per_organ, config.image_size, config.seed)
        folds = stratified_kfold(self.samples, config.k_folds, config.seed)
        val_ids = set(folds[config.fold])
        self.train_samples = [s for s in self.samples if s.sid not in val_ids]
        self.val_samples = [s for s in self.samples if s.sid in val_ids]
        self.color_target = pooled_color_stats([s.image for s in self.samples])
        self._norm_train = [color_normalize(s.image, self.color_target) for s in self.train_samples]
        self._norm_val = [color_normalize(s.image, self.color_target) for s in self.val_samples]
        self.model = SegModel(
            config.encoder_config(), decoder_width=config.decoder_width, seed=config.seed
        )
        self.params = self.model.parameters()
        self.opt = OptState.for_parameters(
            self.model.named_parameters(),
            lr=config.lr,
            factor=config.plateau_factor,
            patience=config.plateau_patience,
            min_delta=config.plateau_min_delta,
            min_lr=config.plateau_min_lr,
        )
        self.regime = config.regime_plan()
        self.log = MetricsLog(num_stages=self.model.config.num_stages)

    def aux_stage_at(self, epoch: int) -> int | None:
        return aux_stage_for_epoch(self.regime, epoch, self.config.total_epochs)

    def run_epoch(self, epoch: int) -> MetricsRow:
        cfg = self.config
        started = time.perf_counter()
        aux_stage = self.aux_stage_at(epoch)
        aux_stages = () if aux_stage is None else (aux_stage,)
        order = np.random.default_rng([cfg.seed, 0x5D, epoch]).permutation(len(self.train_samples))
        num_stages = self.model.config.num_stages
        stage_norm_sums = np.zeros(num_stages)
        steps = 0
        total_sum = main_sum = aux_sum = 0.0
        seen = 0
        for lo in range(0, len(order), cfg.batch_train):
            batch = order[lo : lo + cfg.batch_train]
            self.model.zero_grad()
            batch_totals = []
            for idx in batch:
                sample = self.train_samples[idx]
                aug_seed = _combine_seed(cfg.seed, 0xA6, epoch, int(idx))
                image, mask, _ = augment_arrays(self._norm_train[idx], sample.mask, aug_seed)
                main, aux = self.model.forward(Tensor(image), aux_stages)
                breakdown = composite_loss(
                    main, aux, Tensor(mask), aux_stage,
                    aux_weight=cfg.aux_weight, zero_main=cfg.zero_main_loss,
                )
                batch_totals.append(breakdown)
                total_sum += breakdown.total_value
                main_sum += breakdown.main_value
                if breakdown.aux_loss is not None:
                    aux_sum += breakdown.aux_value
                seen += 1
            batch_loss = batch_totals[0].total
            for extra in batch_totals[1:]:
                batch_loss = batch_loss + extra.total
            batch_loss = scale(batch_loss, 1.0 / len(batch_totals))
            loss_value = batch_loss.item()
            if not np.isfinite(loss_value):
                raise RuntimeError(
                    f"non-finite loss {loss_value} at epoch {epoch} step {steps}"
                )
            batch_loss.backward()
            for k in range(1, num_stages + 1):
                sq = 0.0
                for p in self.model.stage_parameters(k):
                    if p.grad is not None:
                        sq += float((p.grad * p.grad).sum())
                stage_norm_sums[k - 1] += np.sqrt(sq)
            adam_step(self.params, self.opt, grad_clip=cfg.grad_clip)
            steps += 1
        per_image, per_organ = self.validate()
        plateau_step(self.opt, per_image)
        row = MetricsRow(
            epoch=epoch,
            regime=self.regime.spec_string(),
            aux_stage=aux_stage,
            train_total_loss=total_sum / seen,
            train_main_loss=main_sum / seen,
            train_aux_loss=(aux_sum / seen) if aux_stage is not None else None,
            val_dice_mean_per_image=per_image,
            val_dice_mean_per_organ=per_organ,
            lr=self.opt.lr,
            grad_norms=tuple(stage_norm_sums / max(steps, 1)),
            wall_seconds=time.perf_counter() - started,
        )
        self.log.rows.append(row)
        return row

    def validate(self) -> tuple[float, float]:
        """Mean validation dice per image and per organ (0.5 cutoff, no TTA)."""
        scores: list[float] = []
        by_organ: dict[Organ, list[float]] = {}
        for sample, image in zip(self.val_samples, self._norm_val):
            logits, _ = self.model.forward(Tensor(image))
            pred = threshold_mask(sigmoid_array(logits.data), 0.5)
            score = dice_score(pred, sample.mask)
            scores.append(score)
            by_organ.setdefault(sample.organ, []).append(score)
        per_image = float(np.mean(scores))
        per_organ = float(np.mean([np.mean(v) for v in by_organ.values()]))
        return per_image, per_organ

    def per_organ_dice(self) -> dict[Organ, float]:
        by_organ: dict[Organ, list[float]] = {}
        for sample, image in zip(self.val_samples, self._norm_val):
            logits, _ = self.model.forward(Tensor(image))
            pred = threshold_mask(sigmoid_array(logits.data), 0.5)
            by_organ.setdefault(sample.organ, []).append(dice_score(pred, sample.mask))
        return {organ: float(np.mean(v)) for organ, v in by_organ.items()}

    def run(self, verbose: bool = False) -> MetricsLog:
        for epoch in range(self.config.total_epochs):
            row = self.run_epoch(epoch)
            if verbose:
                aux = "-" if row.aux_stage is None else str(row.aux_stage)
                print(
                    f"epoch {row.epoch:3d}  aux_stage {aux}  "
                    f"train {row.train_total_loss:.4f}  "
                    f"val_dice {row.val_dice_mean_per_image:.4f}  lr {row.lr:.2e}"
                )
        return self.log

    def checkpoint_payload(self) -> tuple[dict, dict]:
        arrays = dict(self.model.state_arrays())
        arrays["extra.color_mean"] = self.color_target.mean
        arrays["extra.color_std"] = self.color_target.std
        meta = self.model.config_meta()
        meta["image_size"] = str(self.config.image_size)
        meta["param_count"] = str(self.model.parameter_count())
        return arrays, meta


def train_run(config: RunConfig, out_dir, verbose: bool = True) -> MetricsLog:
    """Full training run; writes metrics, timing, checkpoint, and config echo."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(config)
    if verbose:
        print(
            f"training {config.regime} ({config.block_type}): "
            f"{len(trainer.train_samples)} train / {len(trainer.val_samples)} val tiles, "
            f"{trainer.model.parameter_count()} parameters"
        )
    log = trainer.run(verbose=verbose)
    log.write_csv(out_dir / METRICS_NAME)
    log.write_timing(out_dir / TIMING_NAME)
    arrays, meta = trainer.checkpoint_payload()
    save_checkpoint(out_dir / CHECKPOINT_NAME, arrays, meta)
    config.write_ini(out_dir / CONFIG_ECHO_NAME)
    return log


# -- evaluation ---------------------------------------------------------------


def load_model_bundle(checkpoint_path) -> tuple[SegModel, ColorStats, int]:
    """Model, color-normalization target, and input size from a checkpoint."""
    meta, arrays = load_checkpoint(checkpoint_path)
    model = SegModel.from_meta(meta)
    model.load_state({k: v for k, v in arrays.items() if not k.startswith("extra.")})
    stats = ColorStats(mean=arrays["extra.color_mean"], std=arrays["extra.color_std"])
    return model, stats, int(meta["image_size"])


def _prepare_for_inference(sample: Sample, size: int, stats: ColorStats):
    image, mask = sample.image, sample.mask
    if image.shape[-1] != size or image.shape[-2] != size:
        image = resize_image(image, size, size)
        mask = resize_mask(mask, size, size)
    return color_normalize(image, stats), mask


@dataclass
class EvalGroup:
    organ: Organ
    domain: Domain
    count: int
    mean_dice: float


def eval_samples(
    model, samples: list[Sample], thresholds: ThresholdTable,
    stats: ColorStats, size: int,
) -> tuple[list[EvalGroup], dict[str, float]]:
    """TTA inference + per-(organ, domain) thresholding + dice aggregation."""
    per_sample: dict[str, float] = {}
    grouped: dict[tuple[Organ, Domain], list[float]] = {}
    for sample in samples:
        image, mask = _prepare_for_inference(sample, size, stats)
        probs = tta_predict(model, image)
        cutoff = thresholds.lookup(sample.organ, sample.domain)
        pred = threshold_mask(probs, cutoff)
        score = dice_score(pred, mask)
        per_sample[sample.sid] = score
        grouped.setdefault((sample.organ, sample.domain), []).append(score)
    groups = [
        EvalGroup(organ=o, domain=d, count=len(v), mean_dice=float(np.mean(v)))
        for (o, d), v in sorted(grouped.items(), key=lambda kv: (kv[0][0].value, kv[0][1].value))
    ]
    return groups, per_sample


def eval_run(
    checkpoint_path, samples: list[Sample], thresholds: ThresholdTable | None = None,
    out_dir=None,
) -> tuple[list[EvalGroup], dict[str, float]]:
    thresholds = thresholds or ThresholdTable.default()
    model, stats, size = load_model_bundle(checkpoint_path)
    groups, per_sample = eval_samples(model, samples, thresholds, stats, size)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "eval_report.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["organ", "domain", "count", "mean_dice"])
            for g in groups:
                writer.writerow([g.organ.value, g.domain.value, g.count, repr(g.mean_dice)])
        with open(out_dir / "eval_per_sample.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sid", "dice"])
            for sid, score in per_sample.items():
                writer.writerow([sid, repr(score)])
    return groups, per_sample


def infer_run(
    checkpoint_path, samples: list[Sample], thresholds: ThresholdTable | None = None,
    out_dir=None, write_masks: bool = False,
) -> list[dict]:
    """Predict masks and emit row-major RLE rows (optionally PGM dumps)."""
    thresholds = thresholds or ThresholdTable.default()
    model, stats, size = load_model_bundle(checkpoint_path)
    rows: list[dict] = []
    mask_dir = None
    if out_dir is not None and write_masks:
        mask_dir = Path(out_dir) / "pred_masks"
        mask_dir.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        image, _ = _prepare_for_inference(sample, size, stats)
        probs = tta_predict(model, image)
        pred = threshold_mask(probs, thresholds.lookup(sample.organ, sample.domain))
        rows.append({
            "sid": sample.sid,
            "organ": sample.organ.value,
            "domain": sample.domain.value,
            "rle": rle_encode(pred),
        })
        if mask_dir is not None:
            write_pgm(mask_dir / f"{sample.sid}.pgm", pred)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "predictions.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["sid", "organ", "domain", "rle"])
            writer.writeheader()
            writer.writerows(rows)
    return rows


# -- regime comparison ----------------------------------------------------------

COMPARE_REGIMES = ("normal", "single:2", "switched:2:1:0.5")
EARLY_EPOCHS = 3


@dataclass
class CompareRow:
    regime: str
    block_type: str
    best_val_dice: float
    best_epoch: int
    early_grad_norms: tuple[float, ...]
    per_organ_dice: dict[Organ, float]


def _run_slug(block_type: str, regime: str) -> str:
    return f"{block_type}_{regime.replace(':', '-')}"


def compare_regimes(
    config: RunConfig, out_dir, regimes=COMPARE_REGIMES,
    block_types: tuple[str, ...] = ("attention",), verbose: bool = True,
) -> list[CompareRow]:
    """Train every (block_type, regime) pair on shared data; tabulate results.

    Each run writes its own artifacts under ``out_dir/run_<slug>``.  Partial
    results survive a failing run: the summary holds whatever finished, and
    the first error is re-raised afterwards.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary: list[CompareRow] = []
    curve_rows: list[list[str]] = []
    curve_header: list[str] | None = None
    failure: Exception | None = None
    for block_type in block_types:
        for regime in regimes:
            run_config = replace(config, regime=regime, block_type=block_type)
            run_dir = out_dir / f"run_{_run_slug(block_type, regime)}"
            try:
                run_config.validate()
                trainer = Trainer(run_config)
                if verbose:
                    print(f"[compare] {block_type} / {regime}")
                log = trainer.run(verbose=verbose)
                run_dir.mkdir(parents=True, exist_ok=True)
                log.write_csv(run_dir / METRICS_NAME)
                log.write_timing(run_dir / TIMING_NAME)
                arrays, meta = trainer.checkpoint_payload()
                save_checkpoint(run_dir / CHECKPOINT_NAME, arrays, meta)
                dice_curve = [r.val_dice_mean_per_image for r in log.rows]
                best_epoch = int(np.argmax(dice_curve))
                early = log.rows[:EARLY_EPOCHS]
                early_norms = tuple(
                    float(np.mean([r.grad_norms[k] for r in early]))
                    for k in range(log.num_stages)
                )
                summary.append(CompareRow(
                    regime=regime,
                    block_type=block_type,
                    best_val_dice=float(dice_curve[best_epoch]),
                    best_epoch=best_epoch,
                    early_grad_norms=early_norms,
                    per_organ_dice=trainer.per_organ_dice(),
                ))
                if curve_header is None:
                    curve_header = ["run", "block_type"] + log.columns()
                for row in log.rows:
                    curve_rows.append(
                        [f"{block_type}:{regime}", block_type] + log.row_values(row)
                    )
            except Exception as exc:  # keep earlier runs' results
                if failure is None:
                    failure = exc
                if verbose:
                    print(f"[compare] run {block_type}/{regime} failed: {exc}")
    organ_order = list(Organ)
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        num_stages = len(summary[0].early_grad_norms) if summary else len(config.stage_channels)
        writer.writerow(
            ["regime", "block_type", "best_val_dice", "best_epoch"]
            + [f"early_grad_stage{i}" for i in range(1, num_stages + 1)]
            + [f"dice_{organ.value}" for organ in organ_order]
        )
        for row in summary:
            writer.writerow(
                [row.regime, row.block_type, repr(row.best_val_dice), row.best_epoch]
                + [repr(g) for g in row.early_grad_norms]
                + [repr(row.per_organ_dice.get(organ, float("nan"))) for organ in organ_order]
            )
    if curve_header is not None:
        with open(out_dir / "curves.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(curve_header)
            writer.writerows(curve_rows)
    if failure is not None:
        raise failure
    return summary
