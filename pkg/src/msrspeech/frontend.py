"""Rate-routed strided-conv feature extractors with exact analytic gradients.

Each branch runs its plan's valid (unpadded) strided convolutions with GELU
after every layer, then a per-frame layer norm that drops every rate's output
into a shared zero-mean / unit-variance feature space.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .dsp import Waveform
from .errors import DuplicateRateError, TooShortError, UnsupportedRateError
from .plan import DownsamplePlan, frame_count, receptive_field


@dataclass
class FrameFeatures:
    """Frame-level features [T, d] on the 20 ms grid."""

    features: np.ndarray
    rate_hz: int
    frame_shift_ms: float = 20.0

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _im2col(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    """[T_in, C] -> [T_out, kernel * C] patch matrix (one copy)."""
    win = np.lib.stride_tricks.sliding_window_view(x, kernel, axis=0)
    t_out = (x.shape[0] - kernel) // stride + 1
    return np.ascontiguousarray(win[::stride].transpose(0, 2, 1)).reshape(t_out, -1)


def conv1d_valid(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int) -> np.ndarray:
    """Valid strided conv. x: [T_in, C_in], w: [C_out, C_in, K] -> [T_out, C_out]."""
    c_out, c_in, kernel = w.shape
    cols = _im2col(x, kernel, stride)
    y = cols @ w.transpose(2, 1, 0).reshape(kernel * c_in, c_out)
    if b is not None:
        y += b
    return y


def conv1d_backward_from_cols(cols, w, stride, t_in, dy):
    """Gradients of conv1d_valid given the forward's patch matrix."""
    c_out, c_in, kernel = w.shape
    t_out = dy.shape[0]
    dw2 = cols.T @ dy  # [K*C_in, C_out]
    dw = dw2.reshape(kernel, c_in, c_out).transpose(2, 1, 0)
    db = dy.sum(axis=0)
    w2 = w.transpose(2, 1, 0).reshape(kernel * c_in, c_out)
    dcols = (dy @ w2.T).reshape(t_out, kernel, c_in)
    dx = np.zeros((t_in, c_in), dtype=dy.dtype)
    for j in range(kernel):
        dx[j : j + stride * t_out : stride] += dcols[:, j, :]
    return dx, dw, db


class ConvBranch:
    """One rate's conv stack plus its trailing per-frame layer norm."""

    def __init__(self, plan: DownsamplePlan, seed=0, bias: bool = True, dtype=np.float32):
        self.plan = plan
        self.bias = bias
        rng = np.random.default_rng(seed)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray | None] = []
        in_ch = 1
        for layer in plan.layers:
            fan_in = in_ch * layer.kernel
            # gain 3.0 holds activation variance near 1 through the GELU stack
            self.weights.append(
                nn.fan_in_uniform(
                    rng, (layer.channels, in_ch, layer.kernel), fan_in, gain=3.0, dtype=dtype
                )
            )
            self.biases.append(np.zeros(layer.channels, dtype=dtype) if bias else None)
            in_ch = layer.channels
        self.ln_gamma = np.ones(in_ch, dtype=dtype)
        self.ln_beta = np.zeros(in_ch, dtype=dtype)

    @property
    def out_dim(self) -> int:
        return self.plan.out_channels

    @property
    def receptive_field_samples(self) -> int:
        return receptive_field(self.plan).samples

    def params(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for i, w in enumerate(self.weights):
            out[f"conv{i}.w"] = w
            if self.biases[i] is not None:
                out[f"conv{i}.b"] = self.biases[i]
        out["ln.g"] = self.ln_gamma
        out["ln.b"] = self.ln_beta
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.params().values())

    def _check_length(self, n: int) -> None:
        rf = self.receptive_field_samples
        if n < rf:
            raise TooShortError(
                f"{n} samples is shorter than the branch receptive field ({rf})"
            )

    def forward(self, samples: np.ndarray) -> np.ndarray:
        self._check_length(len(samples))
        x = np.asarray(samples, dtype=self.weights[0].dtype).reshape(-1, 1)
        for w, b, layer in zip(self.weights, self.biases, self.plan.layers):
            x = nn.gelu(conv1d_valid(x, w, b, layer.stride))
        y, _ = nn.layer_norm(x, self.ln_gamma, self.ln_beta)
        return y

    def _forward_cache(self, samples: np.ndarray):
        self._check_length(len(samples))
        x = np.asarray(samples, dtype=self.weights[0].dtype).reshape(-1, 1)
        cols_list = []
        t_ins = []
        preacts = []
        for w, b, layer in zip(self.weights, self.biases, self.plan.layers):
            t_ins.append(x.shape[0])
            c_out, c_in, kernel = w.shape
            cols = _im2col(x, kernel, layer.stride)
            z = cols @ w.transpose(2, 1, 0).reshape(kernel * c_in, c_out)
            if b is not None:
                z += b
            cols_list.append(cols)
            preacts.append(z)
            x = nn.gelu(z)
        y, ln_cache = nn.layer_norm(x, self.ln_gamma, self.ln_beta)
        return y, (cols_list, t_ins, preacts, ln_cache)

    def backward_from_cache(self, cache, upstream: np.ndarray, need_input_grad=False):
        """Exact branch gradients given a _forward_cache result and dLoss/dOutput."""
        cols_list, t_ins, preacts, ln_cache = cache
        grads = OrderedDict()
        dx, dg, db_ln = nn.layer_norm_backward(
            np.asarray(upstream, dtype=preacts[-1].dtype), ln_cache
        )
        grads["ln.g"] = dg
        grads["ln.b"] = db_ln
        for i in reversed(range(len(self.weights))):
            dz = dx * nn.gelu_grad(preacts[i])
            dx, dw, db = conv1d_backward_from_cols(
                cols_list[i], self.weights[i], self.plan.layers[i].stride, t_ins[i], dz
            )
            grads[f"conv{i}.w"] = dw
            if self.biases[i] is not None:
                grads[f"conv{i}.b"] = db
        if need_input_grad:
            return grads, dx[:, 0]
        return grads

    def backward(self, samples: np.ndarray, upstream: np.ndarray, need_input_grad=False):
        """Exact gradients for all branch parameters given dLoss/dOutput."""
        y, cache = self._forward_cache(samples)
        if upstream.shape != y.shape:
            raise ValueError(
                f"upstream gradient shape {upstream.shape} != output shape {y.shape}"
            )
        return self.backward_from_cache(cache, upstream, need_input_grad=need_input_grad)


class MultiRateFrontend:
    """Routes each waveform to the conv branch built for its sampling rate."""

    def __init__(self):
        self.branches: "OrderedDict[int, ConvBranch]" = OrderedDict()

    @classmethod
    def build(cls, plans, seed=0, bias=True, dtype=np.float32) -> "MultiRateFrontend":
        fe = cls()
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        for plan, s in zip(plans, ss.spawn(len(plans))):
            fe.add_branch(plan, seed=s, bias=bias, dtype=dtype)
        return fe

    @property
    def rates(self) -> tuple[int, ...]:
        return tuple(self.branches)

    @property
    def out_dim(self) -> int:
        return next(iter(self.branches.values())).out_dim

    def add_branch(self, plan: DownsamplePlan, seed=0, bias=True, dtype=np.float32):
        if plan.rate_hz in self.branches:
            raise DuplicateRateError(f"branch for {plan.rate_hz} Hz already present")
        if self.branches and plan.out_channels != self.out_dim:
            raise ValueError(
                f"branch output dim {plan.out_channels} != shared dim {self.out_dim}"
            )
        self.branches[plan.rate_hz] = ConvBranch(plan, seed=seed, bias=bias, dtype=dtype)
        return self

    def branch_for(self, rate_hz: int) -> ConvBranch:
        if rate_hz not in self.branches:
            raise UnsupportedRateError(
                f"no branch for {rate_hz} Hz (have {sorted(self.branches)})"
            )
        return self.branches[rate_hz]

    def forward(self, w: Waveform, branch_rate: int | None = None) -> FrameFeatures:
        """Extract frame features; branch_rate overrides routing (mismatch probes)."""
        branch = self.branch_for(branch_rate if branch_rate is not None else w.rate_hz)
        return FrameFeatures(features=branch.forward(w.samples), rate_hz=w.rate_hz)

    def backward(self, w: Waveform, upstream: np.ndarray, branch_rate: int | None = None):
        rate = branch_rate if branch_rate is not None else w.rate_hz
        branch = self.branch_for(rate)
        grads = branch.backward(w.samples, upstream)
        return OrderedDict((f"{rate}.{k}", v) for k, v in grads.items())

    def params(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for rate, branch in self.branches.items():
            for k, v in branch.params().items():
                out[f"{rate}.{k}"] = v
        return out

    def param_count(self, rate_hz: int | None = None) -> int:
        if rate_hz is not None:
            return self.branch_for(rate_hz).param_count()
        return sum(b.param_count() for b in self.branches.values())

    def frame_count_for(self, w: Waveform, branch_rate: int | None = None) -> int:
        branch = self.branch_for(branch_rate if branch_rate is not None else w.rate_hz)
        return frame_count(branch.plan, len(w.samples))
