"""
Training, evaluation, ablation and gradient-check runs.

Every random draw of a run comes from a stream keyed by (seed, purpose, epoch), so a run is fully
determined by its RunConfig and a resumed run continues exactly where the interrupted one stopped.
"""

import itertools
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from multiprocessing import Pool
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tenacity import Retrying, stop_after_attempt, wait_fixed

from config import Config
from core import autodiff as ad
from core.autodiff import Tape, Tensor, backward, constant
from core.gradcheck import CheckResult, check_primitives, grad_check_params
from core.parameters import load_checkpoint, save_checkpoint
from models.avvp_model import (AVVPModel, ForwardCache, ModelConfig, PipelineMode, VideoBatch,
                               analytic_logit_grad, mmil_loss, temporal_attention_pool)
from services.dgm_optimizer import ADAM_MODULATION, DGMOptimizer, ImbalanceMode, OptimizerConfig
from services.metrics_eval import MetricsReport, binarize, full_report, gate_predictions, video_accuracy
from services.synthetic_data import MANIFEST_FILE, Dataset, load
from utils.errors import ConfigurationError, DGMError, NumericalError, UsageError
from utils.logger import logger
from utils.validation import validation_manager

SHUFFLE_STREAM = 10
NOISE_STREAM = 11

CHECKPOINT_FILE = "checkpoint.ckpt"
REPORT_FILE = "run_report.json"
METRICS_FILE = "metrics.json"
LOSSES_FILE = "losses.csv"
IMBALANCE_FILE = "imbalance.csv"
TIMING_FILE = "timing.json"
CONFIG_FILE = "run_config.json"

LOSS_COLUMNS = ["epoch", "loss_a", "loss_v", "loss_total"]
IMBALANCE_COLUMNS = ["epoch", "batch", "omega_v_minus_a", "mu_a", "mu_v", "score_sum_a", "score_sum_v",
                     "discrepancy_sum_a", "discrepancy_sum_v"]


@dataclass
class RunConfig:
    data_dir: str = Config.DATA_DIR
    out_dir: str = Config.OUTPUT_DIR
    run_id: str = "run"
    mode: PipelineMode = PipelineMode.MSDU
    dgm: Optional[ImbalanceMode] = ImbalanceMode.FUSION
    gamma: float = Config.GAMMA
    noise: bool = False
    seed: int = 0
    epochs: int = Config.EPOCHS
    batch_size: int = Config.BATCH_SIZE
    learning_rate: float = Config.LEARNING_RATE
    lr_decay: float = Config.LR_DECAY
    lr_decay_every: int = Config.LR_DECAY_EVERY
    optimizer: str = "sgd"
    adam_modulation: str = "gradient"
    modulate_shared: bool = False
    force_unit_omega: bool = False
    hidden_dim: int = Config.HIDDEN_DIM
    encoder_depth: int = Config.ENCODER_DEPTH
    fused_heads: Optional[str] = None
    aggregation: str = "attention"
    threshold: float = Config.THRESHOLD
    miou: float = Config.EVENT_IOU
    averaging: str = "micro"
    gate_by_video: bool = True

    def __post_init__(self):
        self.mode = PipelineMode(self.mode)
        if self.dgm in ("off", "none", ""):
            self.dgm = None
        if self.dgm is not None:
            self.dgm = ImbalanceMode(self.dgm)
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigurationError(f"epochs and batch size must be positive, got {self.epochs}, {self.batch_size}")
        for field_name, choices in (("averaging", ("micro", "macro")), ("optimizer", ("sgd", "adam")),
                                    ("adam_modulation", ADAM_MODULATION), ("aggregation", ("attention", "mean"))):
            ok, message = validation_manager.validate_choice(field_name, getattr(self, field_name), choices)
            if not ok:
                raise ConfigurationError(message)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["mode"] = self.mode.value
        data["dgm"] = self.dgm.value if self.dgm is not None else "off"
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown run settings: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: Optional[str], overrides: Optional[Dict[str, Any]] = None) -> "RunConfig":
        """A JSON document merged with explicit overrides; overrides win"""
        data: Dict[str, Any] = {}
        if path:
            with open(path, "r", encoding="utf-8") as fh:
                try:
                    data = json.load(fh)
                except json.JSONDecodeError as e:
                    raise ConfigurationError(f"config file {path} is not valid JSON: {e}")
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(data)

    def model_config(self, audio_dim: int, visual_dim: int, num_classes: int) -> ModelConfig:
        return ModelConfig(
            audio_dim=audio_dim,
            visual_dim=visual_dim,
            num_classes=num_classes,
            hidden_dim=self.hidden_dim,
            mode=self.mode,
            encoder_depth=self.encoder_depth,
            fused_heads=self.fused_heads,
            aggregation=self.aggregation,
        )

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            learning_rate=self.learning_rate,
            gamma=self.gamma,
            mode=self.dgm,
            noise=self.noise,
            lr_decay=self.lr_decay,
            lr_decay_every=self.lr_decay_every,
            epochs=self.epochs,
            optimizer=self.optimizer,
            adam_modulation=self.adam_modulation,
            modulate_shared=self.modulate_shared,
            force_unit_omega=self.force_unit_omega,
        )


@dataclass
class RunReport:
    run_id: str
    config: Dict[str, Any]
    model: Dict[str, Any]
    scale: Dict[str, int]
    loss_source: str
    losses: List[Dict[str, float]] = field(default_factory=list)
    imbalance: List[Dict[str, float]] = field(default_factory=list)
    balance_gap: float = 0.0
    val_metrics: Optional[Dict[str, float]] = None
    test_metrics: Optional[Dict[str, float]] = None
    val_video_accuracy: Optional[Dict[str, float]] = None
    test_video_accuracy: Optional[Dict[str, float]] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def check(self, epochs: int):
        if len(self.losses) != epochs:
            raise NumericalError(f"report holds {len(self.losses)} loss rows for {epochs} epochs")
        for row in self.losses:
            if not all(math.isfinite(v) for v in row.values()):
                raise NumericalError(f"non-finite loss in epoch {row['epoch']}")


def _write_json(path: str, payload: Dict[str, Any]):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def load_split(data_dir: str, name: str) -> Optional[Dataset]:
    """A named split below data_dir; a flat dataset directory serves as the train split"""
    path = os.path.join(data_dir, name)
    if os.path.isfile(os.path.join(path, MANIFEST_FILE)):
        return load(path)
    if name == "train" and os.path.isfile(os.path.join(data_dir, MANIFEST_FILE)):
        return load(data_dir)
    return None


def batch_losses(cache: ForwardCache, Y: np.ndarray) -> Tuple[Tensor, Tensor, Tensor]:
    """(total, audio, visual) training losses; the per-modality terms come from the MSDU branch"""
    video = mmil_loss(cache.P_video, Y)
    loss_a = mmil_loss(temporal_attention_pool(cache.P_ms_a, cache.A_ms_a), Y)
    loss_v = mmil_loss(temporal_attention_pool(cache.P_ms_v, cache.A_ms_v), Y)
    return ad.add(ad.add(video, loss_a), loss_v), loss_a, loss_v


def confounded_losses(cache: ForwardCache, Y: np.ndarray) -> Tuple[float, float]:
    """Per-modality losses read from the fused heads, outside any tape"""
    pooled_a = temporal_attention_pool(constant(cache.P_a.data), constant(cache.A_a.data))
    pooled_v = temporal_attention_pool(constant(cache.P_v.data), constant(cache.A_v.data))
    return mmil_loss(pooled_a, Y).item(), mmil_loss(pooled_v, Y).item()


class TrainingService:
    """Runs one configuration: training with optional modulation, then evaluation and reports"""

    def __init__(self, run: RunConfig):
        self.run = run
        self.train_set: Optional[Dataset] = None
        self.val_set: Optional[Dataset] = None
        self.test_set: Optional[Dataset] = None
        self.model: Optional[AVVPModel] = None
        self.optimizer: Optional[DGMOptimizer] = None

    def load_data(self):
        self.train_set = load_split(self.run.data_dir, "train")
        if self.train_set is None:
            raise ConfigurationError(f"no dataset found under {self.run.data_dir}")
        self.val_set = load_split(self.run.data_dir, "val")
        self.test_set = load_split(self.run.data_dir, "test")
        logger.info(f"Loaded {len(self.train_set)} training videos from {self.run.data_dir}")

    def build(self):
        cfg = self.train_set.config
        model_cfg = self.run.model_config(cfg.audio_dim, cfg.visual_dim, cfg.classes)
        self.model = AVVPModel(model_cfg, seed=self.run.seed)
        self.optimizer = DGMOptimizer(self.model.params, self.run.optimizer_config())

    @property
    def msdu(self) -> bool:
        return self.run.mode is PipelineMode.MSDU

    # --- training ---

    def _dump_diagnostics(self, epoch: int, batch_id: int, indices: np.ndarray, loss_value: float) -> str:
        os.makedirs(self.run.out_dir, exist_ok=True)
        path = os.path.join(self.run.out_dir, f"diagnostic_epoch{epoch}_batch{batch_id}.json")
        norms = {p.name: float(np.linalg.norm(p.tensor.data)) for p in self.model.params}
        _write_json(path, {
            "epoch": epoch,
            "batch": batch_id,
            "video_ids": self.train_set.video_ids[indices].tolist(),
            "loss": repr(loss_value),
            "parameter_norms": norms,
        })
        return path

    def _train_batch(self, epoch: int, batch_id: int, indices: np.ndarray, imbalance_rows: List[Dict[str, Any]]):
        batch = self.train_set.batch(indices)
        Y = batch.labels
        with Tape() as tape:
            cache = self.model.forward(batch)
            if self.msdu:
                loss, loss_a_t, loss_v_t = batch_losses(cache, Y)
            else:
                loss = mmil_loss(cache.P_video, Y)
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            path = self._dump_diagnostics(epoch, batch_id, indices, loss_value)
            raise NumericalError(f"non-finite loss in epoch {epoch}, diagnostics in {path}", batch_id)
        try:
            backward(loss, tape, self.model.params)
        except NumericalError as e:
            path = self._dump_diagnostics(epoch, batch_id, indices, loss_value)
            raise NumericalError(f"{e} in epoch {epoch}, diagnostics in {path}", batch_id)

        if self.msdu:
            loss_a, loss_v = loss_a_t.item(), loss_v_t.item()
        else:
            loss_a, loss_v = confounded_losses(cache, Y)

        report = self.optimizer.measure(cache, Y)
        if report is not None:
            imbalance_rows.append(report.to_row(epoch, batch_id))
            logger.log_imbalance(epoch, batch_id, report)
        self.optimizer.step(report)
        return loss_value, loss_a, loss_v

    def train_epoch(self, epoch: int, imbalance_rows: List[Dict[str, Any]]) -> Dict[str, float]:
        lr = self.optimizer.set_epoch(epoch)
        self.optimizer.rng = np.random.default_rng([self.run.seed, NOISE_STREAM, epoch])
        order = np.random.default_rng([self.run.seed, SHUFFLE_STREAM, epoch]).permutation(len(self.train_set))

        totals, audio, visual, sizes = [], [], [], []
        for batch_id, start in enumerate(range(0, len(order), self.run.batch_size)):
            indices = order[start:start + self.run.batch_size]
            total, loss_a, loss_v = self._train_batch(epoch, batch_id, indices, imbalance_rows)
            totals.append(total)
            audio.append(loss_a)
            visual.append(loss_v)
            sizes.append(len(indices))

        losses = {
            "loss_a": float(np.average(audio, weights=sizes)),
            "loss_v": float(np.average(visual, weights=sizes)),
            "loss_total": float(np.average(totals, weights=sizes)),
        }
        logger.log_epoch(self.run.run_id, epoch, losses, lr)
        return {"epoch": epoch, **losses}

    @staticmethod
    def summarize_imbalance(epoch: int, rows: List[Dict[str, Any]]) -> Dict[str, float]:
        """Per-epoch means of omega and mu plus the share of batches in which each side was damped"""
        rows = [r for r in rows if r["epoch"] == epoch]
        if not rows:
            return {"epoch": epoch, "batches": 0}
        frame = pd.DataFrame(rows)
        return {
            "epoch": epoch,
            "batches": int(len(frame)),
            "mean_omega_v_minus_a": float(frame["omega_v_minus_a"].mean()),
            "mean_mu_a": float(frame["mu_a"].mean()),
            "mean_mu_v": float(frame["mu_v"].mean()),
            "damped_a_fraction": float((frame["mu_a"] < 1.0).mean()),
            "damped_v_fraction": float((frame["mu_v"] < 1.0).mean()),
        }

    def _restore(self, checkpoint_path: str) -> Tuple[int, Dict[str, Any]]:
        checkpoint = load_checkpoint(checkpoint_path)
        model_meta = checkpoint.meta.get("model")
        if model_meta != self.model.config.to_dict():
            raise ConfigurationError("checkpoint was written by a differently configured model")
        self.model.params.load_state(checkpoint.params.state())
        self.optimizer.load_state(checkpoint.state)
        epoch = int(checkpoint.meta["epoch"])
        logger.info(f"Resuming {self.run.run_id} after epoch {epoch} from {checkpoint_path}")
        return epoch + 1, checkpoint.meta.get("history", {})

    def _save(self, epoch: int, history: Dict[str, Any]):
        meta = {
            "epoch": epoch,
            "run": self.run.to_dict(),
            "model": self.model.config.to_dict(),
            "history": history,
        }
        save_checkpoint(os.path.join(self.run.out_dir, CHECKPOINT_FILE), self.model.params, meta,
                        self.optimizer.state())

    def train(self, resume: Optional[str] = None) -> RunReport:
        started = time.perf_counter()
        if self.train_set is None:
            self.load_data()
        self.build()
        os.makedirs(self.run.out_dir, exist_ok=True)

        first_epoch = 0
        history: Dict[str, Any] = {"losses": [], "imbalance": [], "imbalance_rows": []}
        if resume:
            first_epoch, restored = self._restore(resume)
            history.update(restored)
        if first_epoch >= self.run.epochs:
            logger.warning(f"Checkpoint already covers {first_epoch} epochs; nothing to train")

        for epoch in range(first_epoch, self.run.epochs):
            rows: List[Dict[str, Any]] = []
            history["losses"].append(self.train_epoch(epoch, rows))
            history["imbalance_rows"].extend(rows)
            history["imbalance"].append(self.summarize_imbalance(epoch, rows))
            self._save(epoch, history)

        report = self._report(history)
        self._write_outputs(report, history, time.perf_counter() - started)
        return report

    # --- evaluation ---

    def predict(self, dataset: Dataset, model: Optional[AVVPModel] = None) -> Tuple[np.ndarray, ...]:
        """(P_a, P_v, P_video) of the fused branch over a whole split, without recording a tape"""
        model = model or self.model
        parts = []
        for start in range(0, len(dataset), self.run.batch_size):
            cache = model.forward(dataset.batch(np.arange(start, min(start + self.run.batch_size, len(dataset)))))
            parts.append((cache.P_a.data, cache.P_v.data, cache.P_video.data))
        return tuple(np.concatenate([p[i] for p in parts]) for i in range(3))

    def evaluate(self, dataset: Dataset, model: Optional[AVVPModel] = None) -> Tuple[MetricsReport, Dict[str, float]]:
        P_a, P_v, P_video = self.predict(dataset, model)
        pred_a = binarize(P_a, self.run.threshold)
        pred_v = binarize(P_v, self.run.threshold)
        if self.run.gate_by_video:
            pred_a = gate_predictions(pred_a, P_video, self.run.threshold)
            pred_v = gate_predictions(pred_v, P_video, self.run.threshold)
        metrics = full_report(pred_a, pred_v, dataset.audio_truth, dataset.visual_truth,
                              self.run.miou, self.run.averaging)
        return metrics, video_accuracy(P_video, dataset.labels, self.run.threshold)

    def _report(self, history: Dict[str, Any]) -> RunReport:
        last = history["losses"][-1] if history["losses"] else {"loss_a": 0.0, "loss_v": 0.0}
        report = RunReport(
            run_id=self.run.run_id,
            config=self.run.to_dict(),
            model=self.model.config.to_dict(),
            scale={
                "train_videos": len(self.train_set),
                "val_videos": len(self.val_set) if self.val_set is not None else 0,
                "test_videos": len(self.test_set) if self.test_set is not None else 0,
                "batch_size": self.run.batch_size,
            },
            loss_source="msdu" if self.msdu else "fused (confounded by cross-modal attention)",
            losses=history["losses"],
            imbalance=history["imbalance"],
            balance_gap=abs(last["loss_a"] - last["loss_v"]),
        )
        for name, dataset in (("val", self.val_set), ("test", self.test_set)):
            if dataset is None:
                continue
            metrics, accuracy = self.evaluate(dataset)
            setattr(report, f"{name}_metrics", metrics.to_dict())
            setattr(report, f"{name}_video_accuracy", accuracy)
        report.check(self.run.epochs)
        return report

    def _write_outputs(self, report: RunReport, history: Dict[str, Any], wall_clock: float):
        out = self.run.out_dir
        pd.DataFrame(history["losses"], columns=LOSS_COLUMNS).to_csv(os.path.join(out, LOSSES_FILE), index=False)
        pd.DataFrame(history["imbalance_rows"], columns=IMBALANCE_COLUMNS).to_csv(
            os.path.join(out, IMBALANCE_FILE), index=False)
        _write_json(os.path.join(out, REPORT_FILE), report.to_dict())
        _write_json(os.path.join(out, CONFIG_FILE), self.run.to_dict())
        metrics = {k: getattr(report, k) for k in ("val_metrics", "test_metrics") if getattr(report, k) is not None}
        _write_json(os.path.join(out, METRICS_FILE), metrics)
        _write_json(os.path.join(out, TIMING_FILE), {"wall_clock_seconds": wall_clock})
        logger.info(f"Run {self.run.run_id} finished; reports in {out}")


def evaluate_checkpoint(checkpoint_path: str, split_path: str,
                        overrides: Optional[Dict[str, Any]] = None) -> Tuple[MetricsReport, Dict[str, float]]:
    """Score a saved model on one dataset split"""
    checkpoint = load_checkpoint(checkpoint_path)
    if "model" not in checkpoint.meta:
        raise ConfigurationError(f"{checkpoint_path} carries no model description")
    model_cfg = ModelConfig.from_dict(checkpoint.meta["model"])
    dataset = load(split_path)
    cfg = dataset.config
    if (cfg.audio_dim, cfg.visual_dim, cfg.classes) != (model_cfg.audio_dim, model_cfg.visual_dim, model_cfg.num_classes):
        raise ConfigurationError(
            f"dataset dims (audio {cfg.audio_dim}, visual {cfg.visual_dim}, classes {cfg.classes}) do not match "
            f"the checkpoint (audio {model_cfg.audio_dim}, visual {model_cfg.visual_dim}, "
            f"classes {model_cfg.num_classes})"
        )
    settings = dict(checkpoint.meta.get("run", {}))
    settings.update(overrides or {})
    service = TrainingService(RunConfig.from_dict(settings))
    model = AVVPModel(model_cfg, params=checkpoint.params)
    return service.evaluate(dataset, model)


# === ablation grid ===

ARMS = {
    "baseline": (PipelineMode.TRADITIONAL, False),
    "msdu": (PipelineMode.MSDU, False),
    "dgm": (PipelineMode.TRADITIONAL, True),
    "dgm+msdu": (PipelineMode.MSDU, True),
}


@dataclass
class AblationGrid:
    arms: Sequence[str] = ("baseline", "dgm", "dgm+msdu")
    modes: Sequence[str] = ("fusion",)
    gammas: Sequence[float] = (Config.GAMMA,)
    seeds: Sequence[int] = (0, 1, 2)
    retries: int = Config.ABLATION_RETRIES
    workers: int = Config.ABLATION_WORKERS

    def __post_init__(self):
        unknown = [a for a in self.arms if a not in ARMS]
        if unknown:
            raise UsageError(f"unknown ablation arms {unknown}; choose from {sorted(ARMS)}")
        for mode in self.modes:
            ImbalanceMode(mode)
        if not self.seeds:
            raise UsageError("ablation needs at least one seed")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AblationGrid":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**known)

    def cells(self) -> List[Dict[str, Any]]:
        """Cross product; arms without modulation ignore imbalance mode and gamma"""
        cells = []
        for arm in self.arms:
            _, modulated = ARMS[arm]
            if modulated:
                combos = itertools.product(self.modes, self.gammas, self.seeds)
            else:
                combos = ((None, None, seed) for seed in self.seeds)
            for mode, gamma, seed in combos:
                cells.append({"arm": arm, "imbalance_mode": mode, "gamma": gamma, "seed": seed})
        return cells


def _cell_run_config(base: RunConfig, cell: Dict[str, Any], out_dir: str) -> RunConfig:
    pipeline, modulated = ARMS[cell["arm"]]
    tag = f"{cell['arm']}_{cell['imbalance_mode'] or 'off'}_g{cell['gamma'] if cell['gamma'] is not None else '-'}_s{cell['seed']}"
    settings = base.to_dict()
    settings.update({
        "run_id": tag,
        "out_dir": os.path.join(out_dir, "cells", tag),
        "mode": pipeline.value,
        "dgm": cell["imbalance_mode"] if modulated else "off",
        "gamma": cell["gamma"] if cell["gamma"] is not None else base.gamma,
        "seed": cell["seed"],
    })
    return RunConfig.from_dict(settings)


def run_cell(args: Tuple[Dict[str, Any], Dict[str, Any], str, int]) -> Dict[str, Any]:
    """Train and score one grid cell; failures become a row with status 'failed'"""
    base_dict, cell, out_dir, retries = args
    run = _cell_run_config(RunConfig.from_dict(base_dict), cell, out_dir)
    row: Dict[str, Any] = {**cell, "pipeline": run.mode.value, "status": "ok", "error": ""}
    try:
        for attempt in Retrying(stop=stop_after_attempt(retries + 1), wait=wait_fixed(0), reraise=True):
            with attempt:
                report = TrainingService(run).train()
    except Exception as e:
        message = str(e) if isinstance(e, DGMError) else f"{type(e).__name__}: {e}"
        logger.error(f"Ablation cell {run.run_id} failed: {message}", exc_info=not isinstance(e, DGMError))
        row.update({"status": "failed", "error": message})
        return row

    metrics = report.test_metrics or report.val_metrics or {}
    accuracy = report.test_video_accuracy or report.val_video_accuracy or {}
    row.update({
        "final_loss_a": report.losses[-1]["loss_a"],
        "final_loss_v": report.losses[-1]["loss_v"],
        "balance_gap": report.balance_gap,
        "video_exact_match": accuracy.get("exact_match", float("nan")),
    })
    row.update(metrics)
    return row


def summarize_ablation(table: pd.DataFrame) -> pd.DataFrame:
    """Mean and standard deviation over seeds for every (arm, imbalance mode, gamma)"""
    ok = table[table["status"] == "ok"].copy()
    keys = ["arm", "imbalance_mode", "gamma"]
    ok[["imbalance_mode", "gamma"]] = ok[["imbalance_mode", "gamma"]].astype(object).fillna("-").astype(str)
    numeric = [c for c in ok.columns if c not in keys + ["seed", "pipeline", "status", "error"]]
    if ok.empty:
        return pd.DataFrame(columns=keys)
    grouped = ok.groupby(keys, sort=False)[numeric].agg(["mean", "std"])
    grouped.columns = [f"{name}_{stat}" for name, stat in grouped.columns]
    grouped["seeds"] = ok.groupby(keys, sort=False)["seed"].count()
    return grouped.reset_index()


def run_ablation(grid: AblationGrid, base: RunConfig, out_dir: str) -> pd.DataFrame:
    """Run every cell (in worker processes when workers > 1) and write ablation.csv plus its summary"""
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(base.to_dict(), cell, out_dir, grid.retries) for cell in grid.cells()]
    logger.info(f"Ablation grid with {len(jobs)} cells, {grid.workers} worker(s)")
    if grid.workers > 1:
        with Pool(processes=grid.workers) as pool:
            rows = pool.map(run_cell, jobs)
    else:
        rows = [run_cell(job) for job in jobs]

    table = pd.DataFrame(rows)
    table.to_csv(os.path.join(out_dir, "ablation.csv"), index=False)
    summarize_ablation(table).to_csv(os.path.join(out_dir, "ablation_summary.csv"), index=False)
    failed = int((table["status"] != "ok").sum())
    if failed:
        logger.warning(f"{failed} of {len(table)} ablation cells failed")
    return table


# === gradient checks ===

def _toy_batch(rng: np.random.Generator, n: int = 2, t: int = 3, d_a: int = 3, d_v: int = 4,
               c: int = 2) -> VideoBatch:
    labels = np.zeros((n, c))
    labels[np.arange(n), rng.integers(c, size=n)] = 1.0
    return VideoBatch(audio=rng.normal(size=(n, t, d_a)), visual=rng.normal(size=(n, t, d_v)), labels=labels)


def pipeline_check(mode: PipelineMode, h: float = Config.GRADCHECK_STEP, tolerance: float = Config.GRADCHECK_TOLERANCE,
                   seed: int = 0, max_coords: int = 4, floor: float = 1e-5) -> CheckResult:
    """Finite-difference check of the full training loss w.r.t. every parameter of a toy model"""
    rng = np.random.default_rng(seed)
    batch = _toy_batch(rng)
    cfg = ModelConfig(audio_dim=batch.audio.shape[2], visual_dim=batch.visual.shape[2],
                      num_classes=batch.labels.shape[1], hidden_dim=4, mode=mode)
    model = AVVPModel(cfg, seed=seed)
    # nonzero biases so every bias path is exercised
    for p in model.params:
        if p.name.endswith(".bias"):
            p.tensor.data[...] = rng.uniform(-0.1, 0.1, size=p.tensor.shape)

    def loss_fn() -> Tensor:
        cache = model.forward(batch)
        if mode is PipelineMode.MSDU:
            return batch_losses(cache, batch.labels)[0]
        return mmil_loss(cache.P_video, batch.labels)

    errors = grad_check_params(loss_fn, model.params, h, max_coords=max_coords, rng=rng, floor=floor)
    worst = max(errors, key=errors.get)
    result = CheckResult(f"pipeline[{mode.value}]", errors[worst], tolerance)
    if not result.passed:
        logger.warning(f"Worst parameter in {result.name}: {worst}")
    return result


def logit_identity_check(seed: int = 0, tolerance: float = 1e-10) -> CheckResult:
    """Autodiff gradient of the summed BCE w.r.t. video logits against sigmoid(z) - Y"""
    rng = np.random.default_rng(seed)
    z = Tensor(rng.normal(scale=3.0, size=(4, 5)), requires_grad=True)
    Y = (rng.random(size=(4, 5)) < 0.4).astype(np.float64)
    with Tape() as tape:
        loss = mmil_loss(ad.sigmoid(z), Y, reduction="sum")
    backward(loss, tape)
    error = float(np.max(np.abs(z.grad - analytic_logit_grad(z.data, Y))))
    return CheckResult("logit_identity", error, tolerance)


def run_gradcheck(tolerance: float = Config.GRADCHECK_TOLERANCE, h: float = Config.GRADCHECK_STEP,
                  instances: int = 100, seed: int = 0) -> List[CheckResult]:
    """Every primitive, both pipelines end to end, and the logit-gradient identity"""
    results = check_primitives(instances=instances, h=h, tolerance=tolerance, seed=seed)
    for mode in PipelineMode:
        results.append(pipeline_check(mode, h=h, tolerance=tolerance, seed=seed))
    results.append(logit_identity_check(seed, tolerance=min(1e-10, tolerance)))
    for result in results:
        logger.log_check(result.name, result.max_error, result.passed)
    return results
