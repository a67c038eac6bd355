"""
Dynamic gradient modulation.

Each batch the relative optimization progress of the two modalities is measured from their
single-modality video scores (omega), turned into damping coefficients for the dominant side
(mu), and applied to the gradients of the parameters each modality owns before the update.
"""

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from config import Config
from core.autodiff import Tensor
from core.parameters import Ownership, ParameterStore
from models.avvp_model import ForwardCache, temporal_attention_pool
from utils.errors import ConfigurationError, LabelingError, UsageError
from utils.logger import logger

DENOMINATOR_GUARD = 1e-8
ADAM_MODULATION = ("gradient", "update")

# Invocation counts of the imbalance computations, inspected by the ablation instrumentation.
CALL_COUNTS: Counter = Counter()


class ImbalanceMode(str, Enum):
    SCORE = "score"
    DISCREPANCY = "discrepancy"
    FUSION = "fusion"


@dataclass
class ImbalanceReport:
    omega_v_minus_a: float
    omega_a_minus_v: float
    score_sum_a: float
    score_sum_v: float
    discrepancy_sum_a: float
    discrepancy_sum_v: float
    mu_a: float = 1.0
    mu_v: float = 1.0
    degenerate: bool = False

    def coefficient(self, group: Ownership) -> float:
        if group is Ownership.AUDIO:
            return self.mu_a
        if group is Ownership.VISUAL:
            return self.mu_v
        return 1.0

    def to_row(self, epoch: int, batch: int) -> Dict[str, Any]:
        return {
            "epoch": epoch,
            "batch": batch,
            "omega_v_minus_a": self.omega_v_minus_a,
            "mu_a": self.mu_a,
            "mu_v": self.mu_v,
            "score_sum_a": self.score_sum_a,
            "score_sum_v": self.score_sum_v,
            "discrepancy_sum_a": self.discrepancy_sum_a,
            "discrepancy_sum_v": self.discrepancy_sum_v,
        }


@dataclass
class OptimizerConfig:
    learning_rate: float = Config.LEARNING_RATE
    gamma: float = Config.GAMMA
    mode: Optional[ImbalanceMode] = ImbalanceMode.FUSION
    noise: bool = False
    lr_decay: float = Config.LR_DECAY
    lr_decay_every: int = Config.LR_DECAY_EVERY
    epochs: int = Config.EPOCHS
    optimizer: str = "sgd"
    modulate_shared: bool = False
    force_unit_omega: bool = False
    omega_clip: Tuple[float, float] = Config.OMEGA_CLIP
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    adam_modulation: str = "gradient"

    def __post_init__(self):
        if self.mode is not None:
            self.mode = ImbalanceMode(self.mode)
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.learning_rate}")
        if not self.gamma > 0:
            raise ConfigurationError(f"gamma must be positive, got {self.gamma}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.adam_modulation not in ADAM_MODULATION:
            raise ConfigurationError(f"adam_modulation must be one of {ADAM_MODULATION}, got {self.adam_modulation!r}")
        if self.lr_decay_every <= 0:
            raise ConfigurationError(f"lr decay interval must be positive, got {self.lr_decay_every}")
        self.omega_clip = tuple(self.omega_clip)
        self.betas = tuple(self.betas)

    @property
    def enabled(self) -> bool:
        return self.mode is not None

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["mode"] = self.mode.value if self.mode is not None else None
        return data


def _values(x: Union[Tensor, np.ndarray]) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def modality_video_scores(P: Optional[Union[Tensor, np.ndarray]], A: Optional[Union[Tensor, np.ndarray]]) -> np.ndarray:
    """Per-video per-class score of one modality: attention-weighted temporal pooling, N x C"""
    if P is None or A is None:
        raise ConfigurationError("single-modality branch outputs are missing")
    return temporal_attention_pool(Tensor(_values(P)), Tensor(_values(A))).data


def branch_outputs(cache: ForwardCache) -> Tuple[Tensor, Tensor, Tensor, Tensor]:
    """(P_a, A_a, P_v, A_v) used for imbalance: MSDU heads when present, fused heads otherwise"""
    if cache.has_msdu:
        return cache.P_ms_a, cache.A_ms_a, cache.P_ms_v, cache.A_ms_v
    return cache.P_a, cache.A_a, cache.P_v, cache.A_v


def discrepancy_term(s: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Mean score of the correct classes minus mean score of the wrong ones, per video"""
    s = np.asarray(s, dtype=np.float64)
    positive = np.asarray(Y).astype(bool)
    pos_count = positive.sum(axis=1)
    if np.any(pos_count == 0):
        rows = np.flatnonzero(pos_count == 0).tolist()
        raise LabelingError(f"videos {rows} have no positive label")
    neg_count = (~positive).sum(axis=1)
    pos_mean = np.where(positive, s, 0.0).sum(axis=1) / pos_count
    neg_mean = np.where(neg_count > 0, np.where(~positive, s, 0.0).sum(axis=1) / np.maximum(neg_count, 1), 0.0)
    return pos_mean - neg_mean


def compute_omega(s_a: np.ndarray, s_v: np.ndarray, Y: np.ndarray,
                  mode: Union[ImbalanceMode, str] = ImbalanceMode.FUSION,
                  omega_clip: Tuple[float, float] = Config.OMEGA_CLIP) -> ImbalanceReport:
    """Ratio of visual to audio optimization progress over one batch"""
    CALL_COUNTS["compute_omega"] += 1
    mode = ImbalanceMode(mode)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.shape[0] == 0:
        raise UsageError("cannot measure imbalance on an empty batch")

    score_a = float(np.sum(np.asarray(s_a) * Y))
    score_v = float(np.sum(np.asarray(s_v) * Y))
    disc_a = float(np.sum(discrepancy_term(s_a, Y)))
    disc_v = float(np.sum(discrepancy_term(s_v, Y)))

    if mode is ImbalanceMode.SCORE:
        numerator, denominator = score_v, score_a
    elif mode is ImbalanceMode.DISCREPANCY:
        numerator, denominator = disc_v, disc_a
    else:
        numerator, denominator = score_v + disc_v, score_a + disc_a

    degenerate = numerator < DENOMINATOR_GUARD or denominator < DENOMINATOR_GUARD
    if degenerate:
        logger.warning(f"Degenerate imbalance batch ({mode.value}: {numerator:.3e}/{denominator:.3e}), omega set to 1")
        omega = 1.0
    else:
        omega = float(np.clip(numerator / denominator, omega_clip[0], omega_clip[1]))

    return ImbalanceReport(
        omega_v_minus_a=omega,
        omega_a_minus_v=1.0 / omega,
        score_sum_a=score_a,
        score_sum_v=score_v,
        discrepancy_sum_a=disc_a,
        discrepancy_sum_v=disc_v,
        degenerate=degenerate,
    )


def _damping(x: float) -> float:
    """1 - tanh(x) without cancellation, floored at the smallest positive float"""
    value = 2.0 / (1.0 + math.exp(2.0 * x)) if x < 350.0 else 0.0
    return max(value, np.finfo(np.float64).tiny)


def compute_mu(omega_v_minus_a: float, gamma: float) -> Tuple[float, float]:
    """(mu_a, mu_v): the modality ahead in optimization is damped, the other keeps 1"""
    CALL_COUNTS["compute_mu"] += 1
    if not omega_v_minus_a > 0:
        raise UsageError(f"omega must be positive, got {omega_v_minus_a}")
    if not gamma > 0:
        raise UsageError(f"gamma must be positive, got {gamma}")
    omega_a_minus_v = 1.0 / omega_v_minus_a
    mu_v = _damping(gamma * omega_v_minus_a) if omega_v_minus_a > 1 else 1.0
    mu_a = _damping(gamma * omega_a_minus_v) if omega_a_minus_v > 1 else 1.0
    return mu_a, mu_v


def noise_sample(shape, mu: float, variance: float, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean Gaussian with variance (mu^2 + 1) * variance"""
    if variance < 0:
        raise UsageError(f"variance must be non-negative, got {variance}")
    if variance == 0:
        return np.zeros(shape)
    return rng.normal(0.0, math.sqrt((mu * mu + 1.0) * variance), size=shape)


class DGMOptimizer:
    """Gradient descent (or Adam) with per-modality gradient modulation"""

    def __init__(self, params: ParameterStore, config: OptimizerConfig, rng: Optional[np.random.Generator] = None):
        self.params = params
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.learning_rate = config.learning_rate
        self.step_count = 0
        self.moments: Dict[str, np.ndarray] = {}

    def set_epoch(self, epoch: int) -> float:
        """Step schedule: multiply by lr_decay every lr_decay_every epochs"""
        cfg = self.config
        self.learning_rate = cfg.learning_rate * cfg.lr_decay ** (epoch // cfg.lr_decay_every)
        return self.learning_rate

    def measure(self, cache: ForwardCache, Y: np.ndarray) -> Optional[ImbalanceReport]:
        """Imbalance report with coefficients for one batch, or None when modulation is off"""
        cfg = self.config
        if not cfg.enabled:
            return None
        P_a, A_a, P_v, A_v = branch_outputs(cache)
        report = compute_omega(modality_video_scores(P_a, A_a), modality_video_scores(P_v, A_v), Y,
                               cfg.mode, cfg.omega_clip)
        if cfg.force_unit_omega:
            report.omega_v_minus_a = 1.0
            report.omega_a_minus_v = 1.0
        report.mu_a, report.mu_v = compute_mu(report.omega_v_minus_a, cfg.gamma)
        return report

    def _is_modulated(self, group: Ownership) -> bool:
        return group is not Ownership.SHARED or self.config.modulate_shared

    def _adam_direction(self, name: str, g: np.ndarray) -> np.ndarray:
        beta1, beta2 = self.config.betas
        m = self.moments.get(f"{name}.m", np.zeros_like(g))
        v = self.moments.get(f"{name}.v", np.zeros_like(g))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        self.moments[f"{name}.m"] = m
        self.moments[f"{name}.v"] = v
        m_hat = m / (1.0 - beta1 ** self.step_count)
        v_hat = v / (1.0 - beta2 ** self.step_count)
        return m_hat / (np.sqrt(v_hat) + self.config.adam_eps)

    def step(self, report: Optional[ImbalanceReport] = None):
        """Descend along the modulated gradients, add the compensating noise, then zero the gradients"""
        cfg = self.config
        for p in self.params:
            if p.tensor.grad is None:
                raise UsageError(f"parameter {p.name!r} has no gradient; run backward first")
        self.step_count += 1
        lr = self.learning_rate

        for p in self.params:
            g = p.tensor.grad
            modulated = report is not None and self._is_modulated(p.group)
            mu = report.coefficient(p.group) if modulated and p.group is not Ownership.SHARED else 1.0
            if modulated and p.group is Ownership.SHARED:
                mu = min(report.mu_a, report.mu_v)
            if cfg.optimizer == "adam" and cfg.adam_modulation == "update":
                # mu scales the normalized step; noise follows the spread of that step
                base = self._adam_direction(p.name, g)
                direction = mu * base
            else:
                base = g
                effective = mu * g
                direction = self._adam_direction(p.name, effective) if cfg.optimizer == "adam" else effective
            p.tensor.data -= lr * direction
            if cfg.noise and modulated:
                p.tensor.data -= lr * noise_sample(g.shape, mu, float(np.var(base)), self.rng)

        self.params.zero_grads()

    def state(self) -> Dict[str, np.ndarray]:
        state = dict(self.moments)
        state["__step_count__"] = np.array([float(self.step_count)])
        return state

    def load_state(self, state: Dict[str, np.ndarray]):
        state = dict(state)
        count = state.pop("__step_count__", None)
        self.step_count = int(count[0]) if count is not None else 0
        self.moments = {k: v.copy() for k, v in state.items()}
