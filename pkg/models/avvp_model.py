"""
Audio-visual video parsing network in its two pipelines.

traditional: encoders -> hybrid self/cross attention -> decision heads -> attentive MMIL pooling
msdu:        as traditional, plus a second pair of decision heads that read the encoder outputs
             directly, before any cross-modal mixing, so their predictions stay single-modality.
"""

import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from config import Config
from core import autodiff as ad
from core.autodiff import Tensor, constant
from core.parameters import Ownership, ParameterStore, seeded_uniform
from utils.errors import ConfigurationError, DimensionError, LabelingError

PROB_EPS = 1e-7
MODALITIES = ("audio", "visual")


class PipelineMode(str, Enum):
    TRADITIONAL = "traditional"
    MSDU = "msdu"


@dataclass
class ModelConfig:
    audio_dim: int
    visual_dim: int
    num_classes: int
    hidden_dim: int = Config.HIDDEN_DIM
    mode: PipelineMode = PipelineMode.MSDU
    heads: int = 1
    encoder_depth: int = Config.ENCODER_DEPTH
    fused_heads: Optional[str] = None
    aggregation: str = "attention"
    logit_clamp: float = Config.LOGIT_CLAMP

    def __post_init__(self):
        self.mode = PipelineMode(self.mode)
        if self.fused_heads is None:
            self.fused_heads = "shared" if self.mode is PipelineMode.TRADITIONAL else "modality"
        for name in ("audio_dim", "visual_dim", "num_classes", "hidden_dim"):
            if int(getattr(self, name)) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.heads != 1:
            raise ConfigurationError(f"only single-head attention is supported, got {self.heads} heads")
        if self.encoder_depth < 2:
            raise ConfigurationError(f"encoder depth must be at least 2, got {self.encoder_depth}")
        if self.fused_heads not in ("shared", "modality"):
            raise ConfigurationError(f"fused_heads must be 'shared' or 'modality', got {self.fused_heads!r}")
        if self.aggregation not in ("attention", "mean"):
            raise ConfigurationError(f"aggregation must be 'attention' or 'mean', got {self.aggregation!r}")
        if self.logit_clamp <= 0:
            raise ConfigurationError(f"logit clamp must be positive, got {self.logit_clamp}")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["mode"] = self.mode.value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        return cls(**data)


@dataclass
class VideoBatch:
    """Features are N x T x D; labels N x C; optional snippet truth N x T x C"""

    audio: np.ndarray
    visual: np.ndarray
    labels: np.ndarray
    audio_truth: Optional[np.ndarray] = None
    visual_truth: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.audio.ndim != 3 or self.visual.ndim != 3:
            raise DimensionError("features must be N x T x D", self.audio.shape, self.visual.shape)
        if self.audio.shape[:2] != self.visual.shape[:2]:
            raise DimensionError("audio and visual streams disagree on N x T", self.audio.shape, self.visual.shape)
        if self.labels.ndim != 2 or self.labels.shape[0] != self.audio.shape[0]:
            raise DimensionError("labels must be N x C", self.labels.shape, self.audio.shape)
        if (self.audio_truth is None) != (self.visual_truth is None):
            raise LabelingError("snippet truth must be given for both modalities or neither")
        if self.audio_truth is not None:
            expected = self.audio.shape[:2] + (self.labels.shape[1],)
            for truth in (self.audio_truth, self.visual_truth):
                if truth.shape != expected:
                    raise DimensionError("snippet truth must be N x T x C", truth.shape, expected)
            aggregated = np.logical_or(self.audio_truth.any(axis=1), self.visual_truth.any(axis=1))
            if not np.array_equal(aggregated, self.labels.astype(bool)):
                raise LabelingError("video labels differ from the temporal OR of the snippet truth")

    @property
    def size(self) -> int:
        return int(self.audio.shape[0])

    @property
    def snippets(self) -> int:
        return int(self.audio.shape[1])


@dataclass
class ForwardCache:
    e_a: Tensor
    e_v: Tensor
    f_a: Tensor
    f_v: Tensor
    P_a: Tensor
    P_v: Tensor
    A_a: Tensor
    A_v: Tensor
    weights: Tensor
    P_video: Tensor
    P_ms_a: Optional[Tensor] = None
    P_ms_v: Optional[Tensor] = None
    A_ms_a: Optional[Tensor] = None
    A_ms_v: Optional[Tensor] = None

    @property
    def has_msdu(self) -> bool:
        return self.P_ms_a is not None


# === pure operations ===

def aggregate_video(P_a: Tensor, P_v: Tensor, A_a: Tensor, A_v: Tensor,
                    aggregation: str = "attention") -> Tuple[Tensor, Tensor]:
    """
    Video-level probabilities from snippet probabilities of both modalities.

    Attention scores are normalized jointly over modality x time (softmax over the 2T scores of
    each video). Returns (P_video N x C, weights N x 2T x 1).
    """
    if P_a.shape != P_v.shape or A_a.shape != A_v.shape or A_a.shape[:2] != P_a.shape[:2]:
        raise DimensionError("aggregate_video: inputs do not conform", P_a.shape, A_a.shape)
    probs = ad.concat([P_a, P_v], axis=1)
    if aggregation == "mean":
        weights = constant(np.full(A_a.shape[:1] + (2 * A_a.shape[1], 1), 1.0 / (2 * A_a.shape[1])))
    else:
        weights = ad.softmax(ad.concat([A_a, A_v], axis=1), axes=(1,))
    return ad.sum(ad.mul(weights, probs), axes=(1,)), weights


def temporal_attention_pool(P: Tensor, A: Tensor) -> Tensor:
    """Single-modality video scores: softmax over that modality's T attention scores, weighted sum of P"""
    if P.data.ndim != 3 or A.shape != P.shape[:2] + (1,):
        raise DimensionError("temporal_attention_pool: attention must be N x T x 1", A.shape, P.shape)
    return ad.sum(ad.mul(ad.softmax(A, axes=(1,)), P), axes=(1,))


def mmil_loss(P_video: Tensor, Y: Union[np.ndarray, Tensor], reduction: str = "mean") -> Tensor:
    """Binary cross-entropy of video-level probabilities against weak labels"""
    labels = Y.data if isinstance(Y, Tensor) else np.asarray(Y, dtype=np.float64)
    if P_video.shape != labels.shape:
        raise DimensionError("mmil_loss: predictions and labels differ", P_video.shape, labels.shape)
    p = ad.clip(P_video, PROB_EPS, 1.0 - PROB_EPS)
    y = constant(labels)
    log_likelihood = ad.add(ad.mul(y, ad.log(p)), ad.mul(constant(1.0 - labels), ad.log(ad.sub(constant(1.0), p))))
    if reduction == "sum":
        return ad.scale(ad.sum(log_likelihood), -1.0)
    return ad.scale(ad.mean(log_likelihood), -1.0)


def analytic_logit_grad(z: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """d(summed BCE)/d(logits) = sigmoid(z) - Y"""
    return ad.sigmoid_values(np.asarray(z, dtype=np.float64)) - np.asarray(Y, dtype=np.float64)


# === model ===

class AVVPModel:
    """Parameters and forward pass of one pipeline; parameters live in `self.params`"""

    def __init__(self, config: ModelConfig, seed: int = 0, params: Optional[ParameterStore] = None):
        self.config = config
        self.seed = seed
        self.params = params if params is not None else self._init_parameters()

    # --- construction ---

    def _add_linear(self, store: ParameterStore, prefix: str, d_in: int, d_out: int,
                    group: Ownership, bias: bool = True):
        bound = 1.0 / math.sqrt(d_in)
        store.add(f"{prefix}.weight", seeded_uniform(self.seed, f"{prefix}.weight", (d_in, d_out), bound), group)
        if bias:
            store.add(f"{prefix}.bias", np.zeros(d_out), group)

    def _add_head_pair(self, store: ParameterStore, prefix: str, group: Ownership):
        cfg = self.config
        self._add_linear(store, f"{prefix}.classifier", cfg.hidden_dim, cfg.num_classes, group)
        self._add_linear(store, f"{prefix}.attention", cfg.hidden_dim, 1, group)

    def _init_parameters(self) -> ParameterStore:
        cfg = self.config
        store = ParameterStore()
        dims = {"audio": cfg.audio_dim, "visual": cfg.visual_dim}
        for modality in MODALITIES:
            group = Ownership(modality)
            d_in = dims[modality]
            for layer in range(cfg.encoder_depth):
                self._add_linear(store, f"{modality}.encoder.{layer}", d_in, cfg.hidden_dim, group)
                d_in = cfg.hidden_dim
        for modality in MODALITIES:
            for kind in ("self", "cross"):
                for proj in ("query", "key", "value"):
                    self._add_linear(store, f"attention.{modality}.{kind}.{proj}", cfg.hidden_dim,
                                     cfg.hidden_dim, Ownership.SHARED, bias=False)
        if cfg.fused_heads == "shared":
            self._add_head_pair(store, "heads.fused", Ownership.SHARED)
        else:
            for modality in MODALITIES:
                self._add_head_pair(store, f"heads.fused.{modality}", Ownership.SHARED)
        if cfg.mode is PipelineMode.MSDU:
            for modality in MODALITIES:
                self._add_head_pair(store, f"heads.msdu.{modality}", Ownership(modality))
        return store

    def _linear(self, x: Tensor, prefix: str, bias: bool = True) -> Tensor:
        return ad.linear(x, self.params[f"{prefix}.weight"], self.params[f"{prefix}.bias"] if bias else None)

    # --- pipeline stages ---

    def _encode_one(self, x: Tensor, modality: str) -> Tensor:
        depth = self.config.encoder_depth
        for layer in range(depth):
            x = self._linear(x, f"{modality}.encoder.{layer}")
            if layer < depth - 1:
                x = ad.relu(x)
        return x

    def encode(self, batch: VideoBatch) -> Tuple[Tensor, Tensor]:
        cfg = self.config
        if batch.audio.shape[-1] != cfg.audio_dim:
            raise DimensionError("audio features do not match the model", batch.audio.shape, (cfg.audio_dim,))
        if batch.visual.shape[-1] != cfg.visual_dim:
            raise DimensionError("visual features do not match the model", batch.visual.shape, (cfg.visual_dim,))
        e_a = self._encode_one(Tensor(batch.audio), "audio")
        e_v = self._encode_one(Tensor(batch.visual), "visual")
        return e_a, e_v

    def _attend(self, query_src: Tensor, key_src: Tensor, prefix: str) -> Tensor:
        q = ad.matmul(query_src, self.params[f"{prefix}.query.weight"])
        k = ad.matmul(key_src, self.params[f"{prefix}.key.weight"])
        v = ad.matmul(key_src, self.params[f"{prefix}.value.weight"])
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(self.config.hidden_dim))
        return ad.matmul(ad.softmax(scores, axes=(2,)), v)

    def cross_attend(self, e_a: Tensor, e_v: Tensor) -> Tuple[Tensor, Tensor]:
        """Residual self-attention plus cross-attention to the other modality"""
        expected = (e_a.shape[0], e_a.shape[1], self.config.hidden_dim)
        if e_a.shape != expected or e_v.shape != expected:
            raise DimensionError("cross_attend: encoded features must be N x T x D with equal shapes",
                                 e_a.shape, e_v.shape)
        f_a = ad.add(ad.add(e_a, self._attend(e_a, e_a, "attention.audio.self")),
                     self._attend(e_a, e_v, "attention.audio.cross"))
        f_v = ad.add(ad.add(e_v, self._attend(e_v, e_v, "attention.visual.self")),
                     self._attend(e_v, e_a, "attention.visual.cross"))
        return f_a, f_v

    def _head(self, x: Tensor, prefix: str) -> Tuple[Tensor, Tensor]:
        clamp = self.config.logit_clamp
        probs = ad.sigmoid(ad.clip(self._linear(x, f"{prefix}.classifier"), -clamp, clamp))
        scores = self._linear(x, f"{prefix}.attention")
        return probs, scores

    def decision_heads(self, x_a: Tensor, x_v: Tensor, head_set: str = "fused") -> Tuple[Tensor, Tensor, Tensor, Tensor]:
        """(P_a, P_v, A_a, A_v); A are raw attention scores, normalized later by the pooling"""
        if head_set == "msdu":
            if self.config.mode is not PipelineMode.MSDU:
                raise ConfigurationError("msdu heads exist only in msdu mode")
            prefixes = ("heads.msdu.audio", "heads.msdu.visual")
        elif head_set == "fused":
            if self.config.fused_heads == "shared":
                prefixes = ("heads.fused", "heads.fused")
            else:
                prefixes = ("heads.fused.audio", "heads.fused.visual")
        else:
            raise ConfigurationError(f"unknown head set {head_set!r}")
        P_a, A_a = self._head(x_a, prefixes[0])
        P_v, A_v = self._head(x_v, prefixes[1])
        return P_a, P_v, A_a, A_v

    def forward(self, batch: VideoBatch) -> ForwardCache:
        e_a, e_v = self.encode(batch)
        msdu = {}
        if self.config.mode is PipelineMode.MSDU:
            P_ms_a, P_ms_v, A_ms_a, A_ms_v = self.decision_heads(e_a, e_v, "msdu")
            msdu = {"P_ms_a": P_ms_a, "P_ms_v": P_ms_v, "A_ms_a": A_ms_a, "A_ms_v": A_ms_v}
        f_a, f_v = self.cross_attend(e_a, e_v)
        P_a, P_v, A_a, A_v = self.decision_heads(f_a, f_v, "fused")
        P_video, weights = aggregate_video(P_a, P_v, A_a, A_v, self.config.aggregation)
        return ForwardCache(e_a=e_a, e_v=e_v, f_a=f_a, f_v=f_v, P_a=P_a, P_v=P_v, A_a=A_a, A_v=A_v,
                            weights=weights, P_video=P_video, **msdu)

    def trunk_names(self):
        """Encoder and attention parameters, identical across pipeline modes"""
        return [name for name in self.params.names() if not name.startswith("heads.")]
