"""Evaluation harness: resolution-mismatch accounting, frozen-backbone frame
classification probes with a softmax-weighted sum over hidden states, and
cross-rate representation similarity."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .dsp import ManifestEntry, UtteranceLabelTrack, Waveform, read_wav
from .errors import UnsupportedRateError
from .model import PretrainModel
from .nn import Adam, softmax
from .plan import DownsamplePlan, receptive_field

PROBE_EPOCHS = 20
PROBE_LR = 1e-2
EVAL_FRACTION = 0.2


@dataclass(frozen=True)
class MismatchReport:
    """What happens when rate_hz audio runs through a branch built for another rate."""

    rate_hz: int
    branch_rate_hz: int
    effective_frame_shift_ms: float
    frame_count_ratio: float


@dataclass
class LayerWeightProfile:
    """Softmax-normalized weight per hidden-state index 0..L."""

    weights: np.ndarray

    def to_dict(self) -> dict:
        return {"weights": [float(v) for v in self.weights]}


@dataclass
class ProbeResult:
    accuracy: float
    layer_weights: LayerWeightProfile
    num_train_frames: int
    num_eval_frames: int


def mismatch_report(branch_plan: DownsamplePlan, rate_hz: int) -> MismatchReport:
    """Effective frame shift and frame-count ratio, computed exactly."""
    shift_ms = Fraction(branch_plan.dr * 1000, rate_hz)
    matched_dr = Fraction(rate_hz, 50)  # samples per 20 ms at the audio's rate
    ratio = matched_dr / branch_plan.dr
    return MismatchReport(
        rate_hz=rate_hz,
        branch_rate_hz=branch_plan.rate_hz,
        effective_frame_shift_ms=float(shift_ms),
        frame_count_ratio=float(ratio),
    )


def frame_label_times(plan: DownsamplePlan, num_frames: int, rate_hz: int) -> np.ndarray:
    """Center time (s) of each output frame for audio at rate_hz through plan."""
    rf = receptive_field(plan).samples
    return (np.arange(num_frames) * plan.dr + rf / 2.0) / rate_hz


def _collect_features(
    model: PretrainModel,
    corpus_dir,
    entries: list[ManifestEntry],
    tracks: dict[str, UtteranceLabelTrack],
    rate_hz: int,
    branch_rate: int | None,
):
    """Frozen-backbone hidden states + projected frame labels per utterance."""
    branch = model.frontend.branch_for(branch_rate if branch_rate else rate_hz)
    corpus_dir = Path(corpus_dir)
    data = []
    for e in entries:
        if e.rate_hz != rate_hz:
            continue
        w = read_wav(corpus_dir / e.path)
        hidden = model.forward_hidden(w, branch_rate=branch_rate)
        stack = np.stack(hidden)  # [L+1, T, d]
        times = frame_label_times(branch.plan, stack.shape[1], rate_hz)
        labels = tracks[e.base_id].classes_at_times(times)
        data.append((stack, labels))
    return data


def _train_linear_probe(data, num_classes: int, epochs: int, seed):
    """Linear classifier over a softmax-weighted sum of hidden states."""
    n_states, _, d = data[0][0].shape
    layer_logits = np.zeros(n_states, dtype=np.float64)
    w = np.zeros((num_classes, d), dtype=np.float64)
    b = np.zeros(num_classes, dtype=np.float64)
    params = {"a": layer_logits, "w": w, "b": b}
    opt = Adam(params, beta1=0.9, beta2=0.999, eps=1e-8)
    rng = np.random.default_rng(seed)

    n_train = max(1, int(round(len(data) * (1.0 - EVAL_FRACTION))))
    train, evals = data[:n_train], data[n_train:]
    if not evals:
        evals = train

    for _ in range(epochs):
        order = rng.permutation(len(train))
        for i in order:
            stack, labels = train[i]
            lw = softmax(layer_logits)
            x = np.tensordot(lw, stack, axes=(0, 0))  # [T, d]
            logits = x @ w.T + b
            probs = softmax(logits, axis=1)
            t = len(labels)
            dlogits = probs
            dlogits[np.arange(t), labels] -= 1.0
            dlogits /= t
            dw = dlogits.T @ x
            db = dlogits.sum(axis=0)
            dx = dlogits @ w
            dcontrib = np.einsum("td,ltd->l", dx, stack)
            da = lw * (dcontrib - float(lw @ dcontrib))
            opt.step({"a": da, "w": dw, "b": db}, PROBE_LR)

    correct = 0
    total = 0
    lw = softmax(layer_logits)
    for stack, labels in evals:
        x = np.tensordot(lw, stack, axes=(0, 0))
        pred = (x @ w.T + b).argmax(axis=1)
        correct += int((pred == labels).sum())
        total += len(labels)
    return ProbeResult(
        accuracy=100.0 * correct / total,
        layer_weights=LayerWeightProfile(weights=lw),
        num_train_frames=sum(len(l) for _, l in train),
        num_eval_frames=total,
    )


def probe_train(
    model: PretrainModel,
    corpus_dir,
    entries: list[ManifestEntry],
    tracks: dict[str, UtteranceLabelTrack],
    rate_hz: int,
    epochs: int = PROBE_EPOCHS,
    seed=0,
    mismatch_branch: int | None = None,
) -> ProbeResult:
    """Train a frozen-backbone frame classifier at one rate.

    With mismatch_branch set, raw rate_hz audio is pushed through that
    branch with no resampling and labels are projected onto the distorted
    frame grid by nearest time.
    """
    if mismatch_branch is None and rate_hz not in model.frontend.rates:
        raise UnsupportedRateError(
            f"model has no branch for {rate_hz} Hz; pass mismatch_branch to force"
        )
    num_classes = next(iter(tracks.values())).num_classes
    data = _collect_features(model, corpus_dir, entries, tracks, rate_hz, mismatch_branch)
    if not data:
        raise ValueError(f"no corpus entries at {rate_hz} Hz")
    return _train_linear_probe(data, num_classes, epochs, seed)


def rate_invariance(
    model: PretrainModel,
    corpus_dir,
    entries: list[ManifestEntry],
    max_utterances: int | None = None,
) -> dict:
    """Mean cosine similarity of time-aligned top-layer frames across rates.

    Frame counts across a parallel family differ by at most one; the excess
    frame is trimmed before comparing.
    """
    corpus_dir = Path(corpus_dir)
    by_base: dict[str, list[ManifestEntry]] = {}
    for e in entries:
        if e.rate_hz in model.frontend.rates:
            by_base.setdefault(e.base_id, []).append(e)
    bases = sorted(by_base)
    if max_utterances is not None:
        bases = bases[:max_utterances]

    pair_sums: dict[tuple[int, int], list[float]] = {}
    for base in bases:
        tops = {}
        for e in sorted(by_base[base], key=lambda e: e.rate_hz):
            w = read_wav(corpus_dir / e.path)
            tops[e.rate_hz] = model.forward_hidden(w)[-1]
        rates = sorted(tops)
        for i, r1 in enumerate(rates):
            for r2 in rates[i + 1 :]:
                a, b = tops[r1], tops[r2]
                t = min(a.shape[0], b.shape[0])
                a, b = a[:t], b[:t]
                num = (a * b).sum(axis=1)
                den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
                sim = float((num / np.maximum(den, 1e-12)).mean())
                pair_sums.setdefault((r1, r2), []).append(sim)

    pair_means = {pair: float(np.mean(vals)) for pair, vals in pair_sums.items()}
    overall = float(np.mean(list(pair_means.values()))) if pair_means else float("nan")
    return {"pair_means": pair_means, "overall": overall, "num_utterances": len(bases)}


def layer_weight_report(result: ProbeResult) -> dict:
    return result.layer_weights.to_dict()
