"""Mixed-rate pre-training: homogeneous-rate micro-batches, gradient
accumulation across rates, Adam with linear warmup/decay, and checkpoints.

Every source of randomness is derived from (seed, step) or (seed, cycle), so
a run is bit-reproducible and a resumed run continues the exact same stream.
"""

from __future__ import annotations

import csv
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .dsp import ManifestEntry, Waveform, read_manifest, read_wav
from .encoder import EncoderConfig, encoder_param_count
from .errors import CheckpointError, EmptyRateError, TrainingError
from .model import ModelConfig, PretrainModel
from .nn import Adam, global_norm
from .objective import Codebook, make_mask, read_label_sidecar
from .plan import CANONICAL_RATES

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.98
ADAM_EPS = 1e-6
GRAD_CLIP_NORM = 10.0
WARMUP_FRACTION = 0.08

CHECKPOINT_MAGIC = b"MSRH"
CHECKPOINT_VERSION = 1

METRICS_FIELDS = ("step", "loss", "grad_norm", "lr", "rate_mix")


@dataclass
class TrainConfig:
    total_steps: int = 300
    micro_batch_seconds: float = 4.0
    accum_count: int = 4  # micro-batches averaged per optimizer step
    rate_weights: dict[int, float] = field(
        default_factory=lambda: {r: 0.25 for r in CANONICAL_RATES}
    )
    learning_rate: float = 5e-4
    warmup_steps: int | None = None  # default: WARMUP_FRACTION of total_steps
    seed: int = 7
    grad_clip: float = GRAD_CLIP_NORM

    def resolved_warmup(self) -> int:
        if self.warmup_steps is not None:
            return max(1, self.warmup_steps)
        return max(1, round(WARMUP_FRACTION * self.total_steps))

    def to_dict(self) -> dict:
        return {
            "total_steps": self.total_steps,
            "micro_batch_seconds": self.micro_batch_seconds,
            "accum_count": self.accum_count,
            "rate_weights": {str(k): v for k, v in self.rate_weights.items()},
            "learning_rate": self.learning_rate,
            "warmup_steps": self.warmup_steps,
            "seed": self.seed,
            "grad_clip": self.grad_clip,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "rate_weights" in d:
            d["rate_weights"] = {int(k): float(v) for k, v in d["rate_weights"].items()}
        return cls(**d)


@dataclass
class MicroBatch:
    rate_hz: int
    entries: list[ManifestEntry]
    cycle: int


def learning_rate_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to the peak, then linear decay to zero at total_steps."""
    warmup = cfg.resolved_warmup()
    if step < warmup:
        return cfg.learning_rate * (step + 1) / warmup
    rest = max(cfg.total_steps - warmup, 1)
    return cfg.learning_rate * max(cfg.total_steps - step, 0) / rest


def schedule_batches(
    entries: Sequence[ManifestEntry], cfg: TrainConfig, seed=None
) -> Iterator[MicroBatch]:
    """Endless stream of single-rate micro-batches.

    Within each accumulation cycle the rates of the cfg.accum_count
    micro-batches are drawn i.i.d. from cfg.rate_weights; utterances are
    drawn with replacement until the audio budget is filled. Deterministic
    given the seed.
    """
    seed = cfg.seed if seed is None else seed
    by_rate: dict[int, list[ManifestEntry]] = {r: [] for r in cfg.rate_weights}
    for e in entries:
        if e.rate_hz in by_rate:
            by_rate[e.rate_hz].append(e)
    for rate, items in by_rate.items():
        if not items:
            raise EmptyRateError(f"no corpus entries at {rate} Hz")
    rates = sorted(cfg.rate_weights)
    weights = np.array([cfg.rate_weights[r] for r in rates], dtype=np.float64)
    if (weights <= 0).any():
        raise ValueError("rate weights must be positive")
    weights = weights / weights.sum()

    cycle = 0
    while True:
        rng = np.random.default_rng([seed, 0, cycle])
        for _ in range(cfg.accum_count):
            rate = rates[rng.choice(len(rates), p=weights)]
            pool = by_rate[rate]
            picked: list[ManifestEntry] = []
            budget = cfg.micro_batch_seconds
            while True:
                e = pool[rng.integers(len(pool))]
                if picked and budget - e.duration_s < 0:
                    break
                picked.append(e)
                budget -= e.duration_s
                if budget <= 0:
                    break
            yield MicroBatch(rate_hz=rate, entries=picked, cycle=cycle)
        cycle += 1


class Trainer:
    """Owns the optimizer state and label store for one pre-training run."""

    def __init__(
        self,
        model: PretrainModel,
        cfg: TrainConfig,
        labels: dict[str, np.ndarray],
        corpus_dir,
        step: int = 0,
        adam: Adam | None = None,
    ):
        self.model = model
        self.cfg = cfg
        self.labels = labels
        self.corpus_dir = Path(corpus_dir)
        self.step = step
        self.adam = adam if adam is not None else Adam(
            model.params(), ADAM_BETA1, ADAM_BETA2, ADAM_EPS
        )

    def _load_waveform(self, entry: ManifestEntry) -> Waveform:
        return read_wav(self.corpus_dir / entry.path)

    def train_step(self, micro_batches: Sequence[MicroBatch]) -> dict:
        """Average gradients over the micro-batches and take one Adam update."""
        cfg = self.cfg
        params = self.model.params()
        accum = OrderedDict((k, np.zeros_like(v, dtype=np.float64)) for k, v in params.items())
        mask_rng = np.random.default_rng([cfg.seed, 1, self.step])
        losses = []
        rate_counts: dict[int, int] = {}
        for mb in micro_batches:
            rate_counts[mb.rate_hz] = rate_counts.get(mb.rate_hz, 0) + 1
            mb_loss = 0.0
            mb_grads = None
            for entry in mb.entries:
                w = self._load_waveform(entry)
                labels = self.labels[entry.utt_id]
                t_used = self.model.aligned_frame_count(w, labels)
                mask = make_mask(t_used, seed=mask_rng)
                loss, grads = self.model.utterance_loss_and_grads(w, labels, mask)
                if not np.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss at step {self.step}, rate {mb.rate_hz} Hz, "
                        f"utterance {entry.utt_id}"
                    )
                mb_loss += loss
                if mb_grads is None:
                    mb_grads = grads
                else:
                    for k in mb_grads:
                        mb_grads[k] = mb_grads[k] + grads[k]
            n = len(mb.entries)
            losses.append(mb_loss / n)
            # micro-batches touch one branch; other branches get zero gradient
            for k, g in mb_grads.items():
                accum[k] += g / n
        g_count = len(micro_batches)
        for k in accum:
            accum[k] /= g_count

        norm = global_norm(accum.values())
        if cfg.grad_clip > 0 and norm > cfg.grad_clip:
            scale = cfg.grad_clip / norm
            for k in accum:
                accum[k] *= scale
        lr = learning_rate_at(cfg, self.step)
        self.adam.step(accum, lr)
        self.step += 1
        mix = "|".join(f"{r}x{rate_counts[r]}" for r in sorted(rate_counts))
        return {
            "step": self.step,
            "loss": float(np.mean(losses)),
            "grad_norm": norm,
            "lr": lr,
            "rate_mix": mix,
        }

    def run(self, entries: Sequence[ManifestEntry], metrics_path=None,
            steps: int | None = None) -> list[dict]:
        """Run (remaining) steps of the schedule, appending metrics per step."""
        total = self.cfg.total_steps if steps is None else min(
            steps + self.step, self.cfg.total_steps
        )
        stream = schedule_batches(entries, self.cfg)
        # fast-forward the deterministic schedule to the current step
        skip = self.step * self.cfg.accum_count
        for _ in range(skip):
            next(stream)
        history = []
        writer = _MetricsWriter(metrics_path) if metrics_path else None
        while self.step < total:
            batch = [next(stream) for _ in range(self.cfg.accum_count)]
            record = self.train_step(batch)
            history.append(record)
            if writer:
                writer.write(record)
        if writer:
            writer.close()
        return history


class _MetricsWriter:
    def __init__(self, path):
        path = Path(path)
        fresh = not path.exists()
        self._fh = open(path, "a", newline="")
        self._csv = csv.DictWriter(self._fh, fieldnames=METRICS_FIELDS)
        if fresh:
            self._csv.writeheader()

    def write(self, record: dict) -> None:
        self._csv.writerow({k: record[k] for k in METRICS_FIELDS})
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


# --------------------------------------------------------------------------
# checkpoints: MSRH magic, u32 version, JSON manifest, float32 payload

def save_checkpoint(path, model: PretrainModel, adam: Adam, step: int,
                    train_cfg: TrainConfig | None = None) -> None:
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for k, v in model.params().items():
        tensors[f"param.{k}"] = v
    for k, v in adam.m.items():
        tensors[f"adam.m.{k}"] = v
    for k, v in adam.v.items():
        tensors[f"adam.v.{k}"] = v
    tensors["codebook.centroids"] = model.codebook.centroids

    entries = []
    offset = 0
    for name, arr in tensors.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    manifest = {
        "step": int(step),
        "adam_t": int(adam.t),
        "model_config": model.cfg.to_dict(),
        "train_config": train_cfg.to_dict() if train_cfg else None,
        "tensors": entries,
    }
    blob = json.dumps(manifest).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for arr in tensors.values():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Rebuild (model, adam, step, train_cfg) from a checkpoint file."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise CheckpointError(f"{path}: too small to be a checkpoint")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )
    (mlen,) = struct.unpack_from("<Q", raw, 8)
    header_end = 16 + mlen
    if len(raw) < header_end:
        raise CheckpointError(f"{path}: manifest truncated")
    try:
        manifest = json.loads(raw[16:header_end])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: manifest is not valid JSON: {e}") from e

    payload = raw[header_end:]
    tensors = {}
    for ent in manifest["tensors"]:
        size = int(np.prod(ent["shape"])) if ent["shape"] else 1
        start = ent["offset"]
        if start + size * 4 > len(payload):
            raise CheckpointError(f"{path}: payload truncated at {ent['name']}")
        arr = np.frombuffer(payload, dtype="<f4", count=size, offset=start)
        tensors[ent["name"]] = arr.reshape(ent["shape"]).copy()

    cfg = ModelConfig.from_dict(manifest["model_config"])
    centroids = tensors["codebook.centroids"]
    embeddings = tensors["param.codebook.label_embed"]
    model = PretrainModel.build(
        cfg, Codebook(centroids=centroids, label_embeddings=embeddings), seed=0
    )
    model.set_params(
        {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
    )
    adam = Adam(model.params(), ADAM_BETA1, ADAM_BETA2, ADAM_EPS)
    adam.t = int(manifest["adam_t"])
    for name in adam.m:
        adam.m[name][...] = tensors[f"adam.m.{name}"]
        adam.v[name][...] = tensors[f"adam.v.{name}"]
    train_cfg = (
        TrainConfig.from_dict(manifest["train_config"])
        if manifest.get("train_config")
        else None
    )
    return model, adam, int(manifest["step"]), train_cfg


# --------------------------------------------------------------------------
# parameter overhead accounting

BASE_LIKE = ModelConfig(
    rates=CANONICAL_RATES,
    dim=512,  # conv branches stay at 512 channels in the base-like layout
    inner_channels=512,
    num_layers=12,
    num_heads=12,
    ffn_dim=3072,
    embed_dim=256,
    num_clusters=100,
)
BASE_LIKE_ENCODER_DIM = 768


def overhead_report(cfg: ModelConfig | None = None, encoder_dim: int | None = None) -> dict:
    """Parameter counts per branch and the percent each extra branch adds.

    The baseline is the single-rate model (first configured rate); percent is
    relative to that baseline's total. Counting only, nothing is trained.
    Defaults to the base-like layout: 512-channel branches under a 12-layer,
    768-wide encoder.
    """
    from .frontend import ConvBranch

    if cfg is None:
        cfg = BASE_LIKE
    if encoder_dim is None and cfg is BASE_LIKE:
        encoder_dim = BASE_LIKE_ENCODER_DIM
    enc_dim = encoder_dim if encoder_dim is not None else cfg.dim
    enc_cfg = EncoderConfig(
        num_layers=cfg.num_layers,
        dim=enc_dim,
        num_heads=cfg.num_heads,
        ffn_dim=cfg.ffn_dim,
    )
    encoder_params = encoder_param_count(enc_cfg)
    head_params = cfg.embed_dim * enc_dim + cfg.num_clusters * cfg.embed_dim + enc_dim

    branch_params = {}
    for rate in cfg.rates:
        branch = ConvBranch(cfg.plan_for(rate), seed=0, bias=cfg.conv_bias)
        branch_params[rate] = branch.param_count()

    first = cfg.rates[0]
    baseline_total = encoder_params + head_params + branch_params[first]
    total = baseline_total + sum(branch_params[r] for r in cfg.rates[1:])
    rows = []
    for rate in cfg.rates:
        added = branch_params[rate]
        rows.append(
            {
                "rate_hz": rate,
                "branch_params": added,
                "percent_of_total": 100.0 * added / total,
            }
        )
    n_added = max(len(cfg.rates) - 1, 1)
    marginal = (total - baseline_total) / n_added
    return {
        "encoder_params": encoder_params,
        "head_params": head_params,
        "baseline_rate_hz": first,
        "baseline_total": baseline_total,
        "total": total,
        "marginal_params_per_added_rate": marginal,
        "marginal_percent_per_added_rate": 100.0 * marginal / total,
        "branches": rows,
    }
