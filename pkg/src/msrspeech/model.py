"""Bundles frontend, encoder, prediction head, and codebook into one model."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import nn
from .dsp import Waveform
from .encoder import EncoderConfig, encode, encoder_backward, init_encoder_params
from .frontend import MultiRateFrontend
from .objective import (
    Codebook,
    MaskSpec,
    ProjectionHead,
    align_lengths,
    apply_mask,
    masked_prediction_loss,
)
from .plan import CANONICAL_RATES, canonical_plan, derive_plan


@dataclass
class ModelConfig:
    """Desk-scale defaults; channel counts never affect temporal alignment."""

    rates: tuple[int, ...] = CANONICAL_RATES
    dim: int = 64  # shared feature/encoder width
    inner_channels: int = 32
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 256
    embed_dim: int = 16
    num_clusters: int = 16
    temperature: float = 0.1
    positions: str = "sinusoidal"
    conv_bias: bool = True

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            num_layers=self.num_layers,
            dim=self.dim,
            num_heads=self.num_heads,
            ffn_dim=self.ffn_dim,
            positions=self.positions,
        )

    def branch_channels(self, n_layers: int) -> list[int]:
        return [self.inner_channels] * (n_layers - 1) + [self.dim]

    def plan_for(self, rate_hz: int):
        base = canonical_plan(rate_hz) if rate_hz in CANONICAL_RATES else derive_plan(rate_hz)
        chans = self.branch_channels(len(base.layers))
        return canonical_plan(rate_hz, channels=chans) if rate_hz in CANONICAL_RATES \
            else derive_plan(rate_hz, channels=chans)

    def to_dict(self) -> dict:
        return {
            "rates": list(self.rates),
            "dim": self.dim,
            "inner_channels": self.inner_channels,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "ffn_dim": self.ffn_dim,
            "embed_dim": self.embed_dim,
            "num_clusters": self.num_clusters,
            "temperature": self.temperature,
            "positions": self.positions,
            "conv_bias": self.conv_bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["rates"] = tuple(d.get("rates", CANONICAL_RATES))
        return cls(**d)


class PretrainModel:
    """Trainable bundle: conv branches, encoder, mask embedding, head, codebook."""

    def __init__(self, cfg: ModelConfig, frontend: MultiRateFrontend, enc_params,
                 mask_embedding: np.ndarray, head: ProjectionHead, codebook: Codebook):
        self.cfg = cfg
        self.enc_cfg = cfg.encoder_config()
        self.frontend = frontend
        self.enc_params = enc_params
        self.mask_embedding = mask_embedding
        self.head = head
        self.codebook = codebook

    @classmethod
    def build(cls, cfg: ModelConfig, codebook: Codebook, seed=0, dtype=np.float32):
        ss = np.random.SeedSequence(seed).spawn(4)
        plans = [cfg.plan_for(r) for r in cfg.rates]
        fe = MultiRateFrontend.build(plans, seed=ss[0], bias=cfg.conv_bias, dtype=dtype)
        enc_params = init_encoder_params(cfg.encoder_config(), seed=ss[1], dtype=dtype)
        mask_rng = np.random.default_rng(ss[2])
        mask_embedding = mask_rng.uniform(0.0, 1.0, cfg.dim).astype(dtype)
        head_rng = np.random.default_rng(ss[3])
        proj = nn.xavier_uniform(head_rng, (cfg.embed_dim, cfg.dim), cfg.dim,
                                 cfg.embed_dim, dtype)
        head = ProjectionHead(proj=proj, temperature=cfg.temperature)
        # copy so in-place training never mutates the caller's codebook
        codebook = Codebook(
            centroids=np.array(codebook.centroids, dtype=np.float32),
            label_embeddings=np.array(codebook.label_embeddings, dtype=dtype),
        )
        if codebook.k != cfg.num_clusters:
            raise ValueError(
                f"codebook has {codebook.k} clusters, config expects {cfg.num_clusters}"
            )
        if codebook.label_embeddings.shape[1] != cfg.embed_dim:
            raise ValueError(
                f"codebook embeddings dim {codebook.label_embeddings.shape[1]} "
                f"!= config embed_dim {cfg.embed_dim}"
            )
        return cls(cfg, fe, enc_params, mask_embedding, head, codebook)

    def params(self) -> "OrderedDict[str, np.ndarray]":
        """Flat name -> array views over every trainable tensor."""
        out = OrderedDict()
        for k, v in self.frontend.params().items():
            out[f"frontend.{k}"] = v
        for k, v in self.enc_params.items():
            out[f"encoder.{k}"] = v
        out["mask_embed"] = self.mask_embedding
        out["head.proj"] = self.head.proj
        out["codebook.label_embed"] = self.codebook.label_embeddings
        return out

    def set_params(self, values: dict) -> None:
        mine = self.params()
        for name, array in values.items():
            mine[name][...] = array
        # dataclass fields hold the same arrays, so views stay consistent

    def param_count(self) -> int:
        return sum(p.size for p in self.params().values())

    def forward_hidden(self, w: Waveform, mask: MaskSpec | None = None,
                       branch_rate: int | None = None):
        """Frontend -> optional masking -> encoder; returns all hidden states."""
        feats = self.frontend.forward(w, branch_rate=branch_rate)
        x = feats.features
        if mask is not None:
            x = apply_mask(x, mask, self.mask_embedding)
        return encode(self.enc_cfg, self.enc_params, x)

    def aligned_frame_count(self, w: Waveform, labels: np.ndarray) -> int:
        """Frame count after trimming features and labels to a common length."""
        t_model = self.frontend.frame_count_for(w)
        align_lengths(labels, t_model)  # raises if the gap exceeds the slack
        return min(t_model, len(labels))

    def utterance_loss_and_grads(self, w: Waveform, labels: np.ndarray, mask: MaskSpec):
        """Full forward/backward for one utterance; grads keyed like params().

        The mask should be drawn over aligned_frame_count(w, labels); indices
        beyond the aligned length are ignored.
        """
        branch = self.frontend.branch_for(w.rate_hz)
        full, fe_cache = branch._forward_cache(w.samples)
        t_used = min(full.shape[0], len(labels))
        h = full[:t_used]
        labels = align_lengths(labels, t_used)
        keep = mask.indices < t_used
        if not np.all(keep):
            mask = MaskSpec(total=t_used, span=mask.span,
                            starts=mask.starts[mask.starts < t_used],
                            indices=mask.indices[keep])
        x = apply_mask(h, mask, self.mask_embedding)
        hidden = encode(self.enc_cfg, self.enc_params, x)
        contextual = hidden[-1]
        loss, obj_grads = masked_prediction_loss(
            contextual, mask, self.head, self.codebook, labels
        )
        upstream = [None] * self.enc_cfg.num_layers + [obj_grads["c"]]
        enc_grads, dx = encoder_backward(self.enc_cfg, self.enc_params, x, upstream)

        masked = mask.indices[mask.indices < t_used]
        dmask_embed = dx[masked].sum(axis=0)
        dh = dx.copy()
        dh[masked] = 0.0
        full_t = full.shape[0]
        if t_used < full_t:
            dh = np.vstack([dh, np.zeros((full_t - t_used, dh.shape[1]), dh.dtype)])
        fe_grads = branch.backward_from_cache(fe_cache, dh)

        grads = OrderedDict()
        for k, v in fe_grads.items():
            grads[f"frontend.{w.rate_hz}.{k}"] = v
        for k, v in enc_grads.items():
            grads[f"encoder.{k}"] = v
        grads["mask_embed"] = dmask_embed
        grads["head.proj"] = obj_grads["proj"]
        grads["codebook.label_embed"] = obj_grads["label_embed"]
        return loss, grads

    def copy(self) -> "PretrainModel":
        clone = PretrainModel.build(
            self.cfg,
            Codebook(
                centroids=self.codebook.centroids.copy(),
                label_embeddings=self.codebook.label_embeddings.copy(),
            ),
            seed=0,
            dtype=self.mask_embedding.dtype,
        )
        clone.set_params({k: v.copy() for k, v in self.params().items()})
        return clone
