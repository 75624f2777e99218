"""Reverse-mode differentiable layers with explicit precision placement.

Layer math follows one discipline: tensors that cross layer boundaries
(activations, activation gradients, weight gradients) are stored in the
policy's compute dtype (F16 in mixed precision, F32 in baseline), while
the arithmetic inside a layer runs in f32.  Dot products accumulate per
the policy's AccumMode; batch statistics, softmax normalizers and other
reductions accumulate in f32 and exist only as f32 side-band values on
the tape.

A model is an ordered list of layers whose last element is a loss layer
(SoftmaxCrossEntropy or MeanSquaredError).  Parameters are held in a
dict keyed "<layer_index>.<name>" so an optimizer can own the master
copies and re-bind fresh low-precision shadows before every step.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import AccumMode, DType, Tensor


@dataclass(frozen=True)
class PrecisionPolicy:
    compute_dtype: DType = DType.F32
    accum: AccumMode = AccumMode.ACC32


F32_POLICY = PrecisionPolicy(DType.F32, AccumMode.ACC32)
MP_POLICY = PrecisionPolicy(DType.F16, AccumMode.ACC32)


@dataclass
class TapeEntry:
    """Per-layer saved forward values: low-precision tensors plus the
    f32 side-band quantities (batch statistics, softmax probabilities)."""

    tensors: dict[str, Tensor] = field(default_factory=dict)
    f32: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class ActivationTape:
    entries: list[TapeEntry]
    inputs: Tensor
    targets: object
    policy: PrecisionPolicy
    batch_size: int
    loss: float


@dataclass
class Gradients:
    """Weight gradients keyed like params; activation gradients per layer
    (gradient w.r.t. each layer's input, loss layer included)."""

    weights: dict[str, Tensor]
    activations: list[Optional[Tensor]]


def _store(values: np.ndarray, policy: PrecisionPolicy) -> Tensor:
    return T.store(values, policy.compute_dtype)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is stable for large |x| and stays in f32
    return np.float32(0.5) * (np.tanh(np.float32(0.5) * x) + np.float32(1.0))


class Layer:
    """Base layer; subclasses define forward/backward and an f64
    reference forward used by the finite-difference oracle."""

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def init_values(self, seed: int, index: int) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: Tensor, params: dict[str, Tensor],
                policy: PrecisionPolicy, rec: TapeEntry, train: bool,
                state: dict[str, np.ndarray], prefix: str) -> Tensor:
        raise NotImplementedError

    def backward(self, dy: Tensor, params: dict[str, Tensor],
                 policy: PrecisionPolicy, rec: TapeEntry
                 ) -> tuple[Tensor, dict[str, Tensor]]:
        raise NotImplementedError

    def forward_ref(self, x: np.ndarray, params: dict[str, np.ndarray],
                    state: dict[str, np.ndarray], prefix: str) -> np.ndarray:
        raise NotImplementedError

    def spec_string(self) -> str:
        raise NotImplementedError

    def __repr__(self):
        return self.spec_string()


class Linear(Layer):
    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        if in_features < 1 or out_features < 1:
            raise ValueError("Linear dimensions must be positive")
        self.in_features = in_features
        self.out_features = out_features
        self.bias = bias

    def spec_string(self):
        return f"Linear({self.in_features},{self.out_features},bias={str(self.bias).lower()})"

    def param_shapes(self):
        shapes = {"weight": (self.in_features, self.out_features)}
        if self.bias:
            shapes["bias"] = (self.out_features,)
        return shapes

    def init_values(self, seed, index):
        std = 1.0 / np.sqrt(self.in_features)
        vals = {"weight": T.random_normal(
            (self.in_features, self.out_features), DType.F32, 0.0, std,
            seed=seed, stream=(index << 8) | 0).data.copy()}
        if self.bias:
            vals["bias"] = np.zeros(self.out_features, dtype=np.float32)
        return vals

    def forward(self, x, params, policy, rec, train, state, prefix):
        if len(x.shape) != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"Linear expected [batch,{self.in_features}], got {x.shape}")
        rec.tensors["x"] = x
        acc = T.matmul(x, params["weight"], policy.accum, DType.F32).data
        if self.bias:
            acc = acc + params["bias"].widen()[None, :]
        return _store(acc, policy)  # bias joins in f32, one store

    def backward(self, dy, params, policy, rec, want_dx=True):
        x = rec.tensors["x"]
        grads = {}
        grads["weight"] = T.matmul(T.transpose(x), dy, policy.accum,
                                   policy.compute_dtype)
        if self.bias:
            grads["bias"] = T.store(T.seq_sum(dy.widen(), axis=0),
                                    policy.compute_dtype)
        dx = None
        if want_dx:
            dx = T.matmul(dy, T.transpose(params["weight"]), policy.accum,
                          policy.compute_dtype)
        return dx, grads

    def forward_ref(self, x, params, state, prefix):
        y = x @ params["weight"]
        if self.bias:
            y = y + params["bias"][None, :]
        return y


class Conv2d(Layer):
    """2-d convolution via im2col + the ordered matmul.

    The contraction order over (channel, kh, kw) is the row-major layout
    of the patch matrix, fixed for reproducibility.
    """

    def __init__(self, in_channels: int, out_channels: int, kh: int, kw: int,
                 stride: int = 1, pad: int = 0):
        if min(in_channels, out_channels, kh, kw, stride) < 1 or pad < 0:
            raise ValueError("bad Conv2d geometry")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kh = kh
        self.kw = kw
        self.stride = stride
        self.pad = pad

    def spec_string(self):
        return (f"Conv2d({self.in_channels},{self.out_channels},{self.kh},"
                f"{self.kw},stride={self.stride},pad={self.pad})")

    def param_shapes(self):
        return {"weight": (self.out_channels, self.in_channels, self.kh, self.kw),
                "bias": (self.out_channels,)}

    def init_values(self, seed, index):
        fan_in = self.in_channels * self.kh * self.kw
        w = T.random_normal(self.param_shapes()["weight"], DType.F32, 0.0,
                            1.0 / np.sqrt(fan_in), seed=seed,
                            stream=(index << 8) | 0).data.copy()
        return {"weight": w,
                "bias": np.zeros(self.out_channels, dtype=np.float32)}

    def _geometry(self, shape):
        b, c, h, w = shape
        if c != self.in_channels:
            raise ValueError(f"Conv2d expected {self.in_channels} channels, got {c}")
        oh = (h + 2 * self.pad - self.kh) // self.stride + 1
        ow = (w + 2 * self.pad - self.kw) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ValueError("kernel does not fit input")
        return b, c, h, w, oh, ow

    def _im2col_bits(self, data: np.ndarray, oh: int, ow: int) -> np.ndarray:
        b, c, h, w = data.shape
        p, s = self.pad, self.stride
        padded = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=data.dtype)
        padded[:, :, p:p + h, p:p + w] = data
        cols = np.empty((b, oh, ow, c, self.kh, self.kw), dtype=data.dtype)
        for i in range(self.kh):
            for j in range(self.kw):
                patch = padded[:, :, i:i + oh * s:s, j:j + ow * s:s]
                cols[:, :, :, :, i, j] = np.transpose(patch, (0, 2, 3, 1))
        return cols.reshape(b * oh * ow, c * self.kh * self.kw)

    def forward(self, x, params, policy, rec, train, state, prefix):
        b, c, h, w, oh, ow = self._geometry(x.shape)
        cols = self._im2col_bits(x.data, oh, ow)
        if x.dtype is DType.F16:
            cols_t = T.wrap_f16_bits(cols)
        else:
            cols_t = T.Tensor(cols.shape, DType.F32, cols.copy())
        wmat = T.reshape(params["weight"],
                         (self.out_channels, c * self.kh * self.kw))
        acc = T.matmul(cols_t, T.transpose(wmat), policy.accum, DType.F32).data
        acc = acc + params["bias"].widen()[None, :]
        y = _store(acc, policy)
        rec.tensors["x"] = x
        rec.tensors["cols"] = cols_t
        rec.f32["geometry"] = np.array([b, oh, ow])
        out = y.data.reshape(b, oh, ow, self.out_channels)
        out = np.ascontiguousarray(np.transpose(out, (0, 3, 1, 2)))
        return T.Tensor(out.shape, policy.compute_dtype, out)

    def backward(self, dy, params, policy, rec, want_dx=True):
        x = rec.tensors["x"]
        cols_t = rec.tensors["cols"]
        b, c, h, w, oh, ow = self._geometry(x.shape)
        p, s = self.pad, self.stride

        dy2d = np.ascontiguousarray(
            np.transpose(dy.data, (0, 2, 3, 1))).reshape(b * oh * ow,
                                                         self.out_channels)
        dy_t = T.Tensor(dy2d.shape, dy.dtype, dy2d.copy())

        dw2d = T.matmul(T.transpose(cols_t), dy_t, policy.accum,
                        policy.compute_dtype)
        dw = T.reshape(T.transpose(dw2d),
                       (self.out_channels, c, self.kh, self.kw))
        db = T.store(T.seq_sum(dy_t.widen(), axis=0), policy.compute_dtype)
        if not want_dx:
            return None, {"weight": dw, "bias": db}

        wmat = T.reshape(params["weight"],
                         (self.out_channels, c * self.kh * self.kw))
        dcols = T.matmul(dy_t, wmat, policy.accum, DType.F32).data
        dcols = dcols.reshape(b, oh, ow, c, self.kh, self.kw)

        # col2im: overlapping patches add in f32, (kh, kw) loop order fixed
        dxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=np.float32)
        for i in range(self.kh):
            for j in range(self.kw):
                dxp[:, :, i:i + oh * s:s, j:j + ow * s:s] += np.transpose(
                    dcols[:, :, :, :, i, j], (0, 3, 1, 2))
        dx = _store(dxp[:, :, p:p + h, p:p + w], policy)
        return dx, {"weight": dw, "bias": db}

    def forward_ref(self, x, params, state, prefix):
        b, c, h, w, oh, ow = self._geometry(x.shape)
        cols = self._im2col_bits(x, oh, ow).astype(np.float64)
        wmat = params["weight"].reshape(self.out_channels, -1)
        y = cols @ wmat.T + params["bias"][None, :]
        y = y.reshape(b, oh, ow, self.out_channels)
        return np.transpose(y, (0, 3, 1, 2))


class ReLU(Layer):
    def spec_string(self):
        return "ReLU"

    def forward(self, x, params, policy, rec, train, state, prefix):
        rec.tensors["x"] = x
        return _store(np.maximum(x.widen(), np.float32(0)), policy)

    def backward(self, dy, params, policy, rec):
        mask = rec.tensors["x"].widen() > 0
        dx = _store(np.where(mask, dy.widen(), np.float32(0)), policy)
        return dx, {}

    def forward_ref(self, x, params, state, prefix):
        return np.maximum(x, 0.0)


class LeakyReLU(Layer):
    def __init__(self, slope: float = 0.01):
        self.slope = float(slope)

    def spec_string(self):
        return f"LeakyReLU({self.slope})"

    def forward(self, x, params, policy, rec, train, state, prefix):
        rec.tensors["x"] = x
        xw = x.widen()
        return _store(np.where(xw > 0, xw, np.float32(self.slope) * xw), policy)

    def backward(self, dy, params, policy, rec):
        xw = rec.tensors["x"].widen()
        g = np.where(xw > 0, np.float32(1.0), np.float32(self.slope))
        return _store(dy.widen() * g, policy), {}

    def forward_ref(self, x, params, state, prefix):
        return np.where(x > 0, x, self.slope * x)


class Tanh(Layer):
    def spec_string(self):
        return "Tanh"

    def forward(self, x, params, policy, rec, train, state, prefix):
        y = _store(np.tanh(x.widen()), policy)
        rec.tensors["y"] = y
        return y

    def backward(self, dy, params, policy, rec):
        yw = rec.tensors["y"].widen()  # derivative from the stored value
        return _store(dy.widen() * (np.float32(1.0) - yw * yw), policy), {}

    def forward_ref(self, x, params, state, prefix):
        return np.tanh(x)


class Sigmoid(Layer):
    def spec_string(self):
        return "Sigmoid"

    def forward(self, x, params, policy, rec, train, state, prefix):
        y = _store(_sigmoid(x.widen()), policy)
        rec.tensors["y"] = y
        return y

    def backward(self, dy, params, policy, rec):
        yw = rec.tensors["y"].widen()
        return _store(dy.widen() * yw * (np.float32(1.0) - yw), policy), {}

    def forward_ref(self, x, params, state, prefix):
        return 1.0 / (1.0 + np.exp(-x))


class BatchNorm(Layer):
    """Feature-wise batch norm over 2-d input; statistics in f32 only.

    Biased variance; running stats are blended in f32 with `momentum`
    weighting the fresh batch statistic.
    """

    def __init__(self, features: int, momentum: float = 0.1, epsilon: float = 1e-5):
        if features < 1:
            raise ValueError("features must be positive")
        if not 0 < momentum <= 1:
            raise ValueError("momentum must be in (0, 1]")
        if epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        self.features = features
        self.momentum = float(momentum)
        self.epsilon = float(epsilon)

    def spec_string(self):
        return f"BatchNorm({self.features},momentum={self.momentum},epsilon={self.epsilon})"

    def param_shapes(self):
        return {"gamma": (self.features,), "beta": (self.features,)}

    def init_values(self, seed, index):
        return {"gamma": np.ones(self.features, dtype=np.float32),
                "beta": np.zeros(self.features, dtype=np.float32)}

    def state_shapes(self):
        return {"running_mean": (self.features,), "running_var": (self.features,)}

    def forward(self, x, params, policy, rec, train, state, prefix):
        if len(x.shape) != 2 or x.shape[1] != self.features:
            raise ValueError(f"BatchNorm expected [batch,{self.features}], got {x.shape}")
        xw = x.widen()
        b = x.shape[0]
        if train:
            mean = T.seq_sum(xw, axis=0) / np.float32(b)
            centered = xw - mean[None, :]
            var = T.seq_sum(centered * centered, axis=0) / np.float32(b)
            rmk, rvk = prefix + "running_mean", prefix + "running_var"
            mom = np.float32(self.momentum)
            state[rmk] = (np.float32(1) - mom) * state[rmk] + mom * mean
            state[rvk] = (np.float32(1) - mom) * state[rvk] + mom * var
        else:
            mean = state[prefix + "running_mean"]
            var = state[prefix + "running_var"]
            centered = xw - mean[None, :]
        invstd = np.float32(1.0) / np.sqrt(var + np.float32(self.epsilon))
        xhat = centered * invstd[None, :]
        y = params["gamma"].widen()[None, :] * xhat + params["beta"].widen()[None, :]
        rec.tensors["x"] = x
        rec.f32["mean"] = mean
        rec.f32["invstd"] = invstd
        return _store(y, policy)

    def backward(self, dy, params, policy, rec):
        x = rec.tensors["x"]
        xw = x.widen()
        b = np.float32(x.shape[0])
        mean, invstd = rec.f32["mean"], rec.f32["invstd"]
        xhat = (xw - mean[None, :]) * invstd[None, :]
        dyw = dy.widen()

        dgamma = T.seq_sum(dyw * xhat, axis=0)
        dbeta = T.seq_sum(dyw, axis=0)
        dxhat = dyw * params["gamma"].widen()[None, :]
        sum_dxhat = T.seq_sum(dxhat, axis=0)
        sum_dxhat_xhat = T.seq_sum(dxhat * xhat, axis=0)
        dx = (invstd[None, :] / b) * (b * dxhat - sum_dxhat[None, :]
                                      - xhat * sum_dxhat_xhat[None, :])
        grads = {"gamma": T.store(dgamma, policy.compute_dtype),
                 "beta": T.store(dbeta, policy.compute_dtype)}
        return _store(dx, policy), grads

    def forward_ref(self, x, params, state, prefix):
        mean = x.mean(axis=0)
        var = ((x - mean) ** 2).mean(axis=0)
        xhat = (x - mean) / np.sqrt(var + self.epsilon)
        return params["gamma"][None, :] * xhat + params["beta"][None, :]


class LSTMCell(Layer):
    """Standard LSTM cell unrolled over [batch, time, features] input;
    returns the final hidden state.  Gate layout along the 4H axis is
    input | forget | cell | output."""

    def __init__(self, in_features: int, hidden: int):
        if in_features < 1 or hidden < 1:
            raise ValueError("LSTMCell dimensions must be positive")
        self.in_features = in_features
        self.hidden = hidden

    def spec_string(self):
        return f"LSTMCell({self.in_features},{self.hidden})"

    def param_shapes(self):
        return {"w_ih": (self.in_features, 4 * self.hidden),
                "w_hh": (self.hidden, 4 * self.hidden),
                "bias": (4 * self.hidden,)}

    def init_values(self, seed, index):
        return {
            "w_ih": T.random_normal(self.param_shapes()["w_ih"], DType.F32,
                                    0.0, 1.0 / np.sqrt(self.in_features),
                                    seed=seed, stream=(index << 8) | 0).data.copy(),
            "w_hh": T.random_normal(self.param_shapes()["w_hh"], DType.F32,
                                    0.0, 1.0 / np.sqrt(self.hidden),
                                    seed=seed, stream=(index << 8) | 1).data.copy(),
            "bias": np.zeros(4 * self.hidden, dtype=np.float32),
        }

    def _split(self, z):
        h = self.hidden
        return z[:, :h], z[:, h:2 * h], z[:, 2 * h:3 * h], z[:, 3 * h:]

    def forward(self, x, params, policy, rec, train, state, prefix):
        if len(x.shape) != 3 or x.shape[2] != self.in_features:
            raise ValueError(f"LSTMCell expected [batch,time,{self.in_features}], got {x.shape}")
        b, steps, _ = x.shape
        h_t = T.zeros((b, self.hidden), policy.compute_dtype)
        c_t = T.zeros((b, self.hidden), policy.compute_dtype)
        rec.tensors["x"] = x
        rec.f32["steps"] = np.array([steps])
        bias = params["bias"].widen()[None, :]
        for t in range(steps):
            x_t = T.slice_(x, (slice(None), t))
            z = (T.matmul(x_t, params["w_ih"], policy.accum, DType.F32).data
                 + T.matmul(h_t, params["w_hh"], policy.accum, DType.F32).data
                 + bias)
            zi, zf, zg, zo = self._split(z)
            gi = _store(_sigmoid(zi), policy)
            gf = _store(_sigmoid(zf), policy)
            gg = _store(np.tanh(zg), policy)
            go = _store(_sigmoid(zo), policy)
            c_new = _store(gf.widen() * c_t.widen() + gi.widen() * gg.widen(),
                           policy)
            h_new = _store(go.widen() * np.tanh(c_new.widen()), policy)
            rec.tensors[f"t{t}.h_prev"] = h_t
            rec.tensors[f"t{t}.c_prev"] = c_t
            for name, g in (("i", gi), ("f", gf), ("g", gg), ("o", go)):
                rec.tensors[f"t{t}.{name}"] = g
            rec.tensors[f"t{t}.c"] = c_new
            h_t, c_t = h_new, c_new
        return h_t

    def backward(self, dy, params, policy, rec):
        x = rec.tensors["x"]
        b, steps, _ = x.shape
        one = np.float32(1.0)
        dh = dy
        dc = T.zeros((b, self.hidden), policy.compute_dtype)
        dw_ih = np.zeros(params["w_ih"].shape, dtype=np.float32)
        dw_hh = np.zeros(params["w_hh"].shape, dtype=np.float32)
        db = np.zeros(4 * self.hidden, dtype=np.float32)
        dx_steps = []
        w_ih_t = T.transpose(params["w_ih"])
        w_hh_t = T.transpose(params["w_hh"])

        for t in reversed(range(steps)):
            gi = rec.tensors[f"t{t}.i"].widen()
            gf = rec.tensors[f"t{t}.f"].widen()
            gg = rec.tensors[f"t{t}.g"].widen()
            go = rec.tensors[f"t{t}.o"].widen()
            c_new = rec.tensors[f"t{t}.c"].widen()
            c_prev = rec.tensors[f"t{t}.c_prev"].widen()
            tanh_c = np.tanh(c_new)

            dhw = dh.widen()
            dcw = dc.widen() + dhw * go * (one - tanh_c * tanh_c)
            dzi = dcw * gg * gi * (one - gi)
            dzf = dcw * c_prev * gf * (one - gf)
            dzg = dcw * gi * (one - gg * gg)
            dzo = dhw * tanh_c * go * (one - go)
            dz = _store(np.concatenate([dzi, dzf, dzg, dzo], axis=1), policy)

            x_t = T.slice_(x, (slice(None), t))
            h_prev = rec.tensors[f"t{t}.h_prev"]
            dw_ih += T.matmul(T.transpose(x_t), dz, policy.accum, DType.F32).data
            dw_hh += T.matmul(T.transpose(h_prev), dz, policy.accum, DType.F32).data
            db += T.seq_sum(dz.widen(), axis=0)

            dx_steps.append(T.matmul(dz, w_ih_t, policy.accum,
                                     policy.compute_dtype))
            dh = T.matmul(dz, w_hh_t, policy.accum, policy.compute_dtype)
            dc = _store(dcw * gf, policy)

        dx_data = np.stack([d.data for d in reversed(dx_steps)], axis=1)
        dx = T.Tensor(dx_data.shape, policy.compute_dtype,
                      np.ascontiguousarray(dx_data))
        grads = {"w_ih": T.store(dw_ih, policy.compute_dtype),
                 "w_hh": T.store(dw_hh, policy.compute_dtype),
                 "bias": T.store(db, policy.compute_dtype)}
        return dx, grads

    def forward_ref(self, x, params, state, prefix):
        b, steps, _ = x.shape
        h = np.zeros((b, self.hidden), dtype=np.float64)
        c = np.zeros((b, self.hidden), dtype=np.float64)
        for t in range(steps):
            z = x[:, t] @ params["w_ih"] + h @ params["w_hh"] + params["bias"]
            zi, zf, zg, zo = self._split(z)
            gi = 1.0 / (1.0 + np.exp(-zi))
            gf = 1.0 / (1.0 + np.exp(-zf))
            gg = np.tanh(zg)
            go = 1.0 / (1.0 + np.exp(-zo))
            c = gf * c + gi * gg
            h = go * np.tanh(c)
        return h


class LossLayer(Layer):
    is_loss = True

    def loss(self, pred: Tensor, targets, policy, rec: TapeEntry) -> float:
        raise NotImplementedError

    def loss_grad(self, seed: float, policy, rec: TapeEntry) -> Tensor:
        raise NotImplementedError

    def loss_ref(self, pred: np.ndarray, targets) -> float:
        raise NotImplementedError


class SoftmaxCrossEntropy(LossLayer):
    """Mean cross entropy over the batch; exp/log and the row sums run
    in f32, probabilities live on the tape as f32 side-band only."""

    def spec_string(self):
        return "SoftmaxCrossEntropy"

    @staticmethod
    def _labels(targets) -> np.ndarray:
        if isinstance(targets, Tensor):
            return targets.widen().astype(np.int64).reshape(-1)
        return np.asarray(targets, dtype=np.int64).reshape(-1)

    def loss(self, pred, targets, policy, rec):
        labels = self._labels(targets)
        zw = pred.widen()
        if zw.shape[0] != labels.shape[0]:
            raise ValueError("batch/label count mismatch")
        with np.errstate(over="ignore", invalid="ignore"):
            m = zw.max(axis=1, keepdims=True)
            e = np.exp(zw - m)
            s = T.seq_sum(e, axis=1)
            logsum = np.log(s) + m[:, 0]
            per_row = logsum - zw[np.arange(zw.shape[0]), labels]
            loss = T.seq_sum(per_row) / np.float32(zw.shape[0])
            rec.f32["probs"] = e / s[:, None]
        rec.f32["labels"] = labels
        return float(loss)

    def loss_grad(self, seed, policy, rec):
        probs = rec.f32["probs"]
        labels = rec.f32["labels"]
        b = probs.shape[0]
        g = probs.copy()
        g[np.arange(b), labels] -= np.float32(1.0)
        g *= np.float32(seed) / np.float32(b)
        return _store(g, policy)

    def loss_ref(self, pred, targets):
        labels = self._labels(targets)
        m = pred.max(axis=1, keepdims=True)
        e = np.exp(pred - m)
        logsum = np.log(e.sum(axis=1)) + m[:, 0]
        return float(np.mean(logsum - pred[np.arange(pred.shape[0]), labels]))


class MeanSquaredError(LossLayer):
    """Mean of squared residuals over every element."""

    def spec_string(self):
        return "MeanSquaredError"

    def loss(self, pred, targets, policy, rec):
        tw = targets.widen() if isinstance(targets, Tensor) else np.asarray(
            targets, dtype=np.float32)
        pw = pred.widen()
        if pw.shape != tw.shape:
            raise ValueError(f"prediction {pw.shape} vs target {tw.shape}")
        with np.errstate(over="ignore", invalid="ignore"):
            diff = pw - tw
            loss = T.seq_sum(diff * diff) / np.float32(diff.size)
        rec.f32["diff"] = diff
        return float(loss)

    def loss_grad(self, seed, policy, rec):
        diff = rec.f32["diff"]
        g = diff * (np.float32(2.0) * np.float32(seed) / np.float32(diff.size))
        return _store(g, policy)

    def loss_ref(self, pred, targets):
        tw = targets.widen().astype(np.float64) if isinstance(targets, Tensor) \
            else np.asarray(targets, dtype=np.float64)
        return float(np.mean((pred - tw) ** 2))


class Model:
    """Layer stack plus the current parameter bindings and f32 state."""

    def __init__(self, layers: list[Layer]):
        if not layers or not isinstance(layers[-1], LossLayer):
            raise ValueError("model must end with a loss layer")
        for lay in layers[:-1]:
            if isinstance(lay, LossLayer):
                raise ValueError("loss layer must be last")
        self.layers = layers
        self.params: dict[str, Tensor] = {}
        self.state: dict[str, np.ndarray] = {}
        for i, lay in enumerate(layers):
            if isinstance(lay, BatchNorm):
                self.state[f"{i}.running_mean"] = np.zeros(lay.features, np.float32)
                self.state[f"{i}.running_var"] = np.ones(lay.features, np.float32)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for i, lay in enumerate(self.layers):
            for name, shp in lay.param_shapes().items():
                shapes[f"{i}.{name}"] = shp
        return shapes

    def init_values(self, seed: int) -> dict[str, np.ndarray]:
        vals = {}
        for i, lay in enumerate(self.layers):
            for name, arr in lay.init_values(seed, i).items():
                vals[f"{i}.{name}"] = arr
        return vals

    def bind_f32(self, values: dict[str, np.ndarray]) -> None:
        for key, arr in values.items():
            self.params[key] = T.store(arr, DType.F32)

    def spec_strings(self) -> list[str]:
        return [lay.spec_string() for lay in self.layers]


def forward(model: Model, inputs: Tensor, targets, policy: PrecisionPolicy,
            train: bool = True) -> tuple[float, ActivationTape]:
    """Run the stack, returning the f32 loss and the tape for backward."""
    if inputs.dtype is not policy.compute_dtype:
        raise ValueError(f"batch dtype {inputs.dtype} does not match policy "
                         f"{policy.compute_dtype}")
    if inputs.shape[0] < 1:
        raise ValueError("empty batch")
    entries = []
    x = inputs
    for i, lay in enumerate(model.layers[:-1]):
        rec = TapeEntry()
        x = lay.forward(x, _layer_params(model, i), policy, rec, train,
                        model.state, f"{i}.")
        entries.append(rec)
    rec = TapeEntry()
    loss_layer = model.layers[-1]
    loss = loss_layer.loss(x, targets, policy, rec)
    rec.tensors["pred"] = x
    entries.append(rec)
    return loss, ActivationTape(entries, inputs, targets, policy,
                                inputs.shape[0], loss)


def backward(model: Model, tape: ActivationTape, loss_scale: float = 1.0,
             first_input_grad: bool = True) -> Gradients:
    """Back-propagate seeded with loss_scale, producing stored gradients.

    first_input_grad=False skips the gradient w.r.t. the very first
    layer's input (pure diagnostics output, nothing downstream of it);
    weight gradients and reports are unaffected.
    """
    if len(tape.entries) != len(model.layers):
        raise ValueError("tape does not match model")
    if not loss_scale > 0:
        raise ValueError("loss_scale must be positive")
    policy = tape.policy
    n = len(model.layers)
    weights: dict[str, Tensor] = {}
    activations: list[Optional[Tensor]] = [None] * n

    loss_layer = model.layers[-1]
    dy = loss_layer.loss_grad(loss_scale, policy, tape.entries[-1])
    activations[n - 1] = dy

    for i in range(n - 2, -1, -1):
        lay = model.layers[i]
        if i == 0 and not first_input_grad and isinstance(lay, (Linear, Conv2d)):
            dx, grads = lay.backward(dy, _layer_params(model, i), policy,
                                     tape.entries[i], want_dx=False)
        else:
            dx, grads = lay.backward(dy, _layer_params(model, i), policy,
                                     tape.entries[i])
        for name, g in grads.items():
            weights[f"{i}.{name}"] = g
        activations[i] = dx
        dy = dx
    return Gradients(weights, activations)


def _layer_params(model: Model, i: int) -> dict[str, Tensor]:
    prefix = f"{i}."
    return {k[len(prefix):]: v for k, v in model.params.items()
            if k.startswith(prefix)}


def predictions(model: Model, inputs: Tensor, policy: PrecisionPolicy
                ) -> np.ndarray:
    """Forward through every non-loss layer; returns the f32 outputs."""
    x = inputs
    for i, lay in enumerate(model.layers[:-1]):
        x = lay.forward(x, _layer_params(model, i), policy, TapeEntry(),
                        False, model.state, f"{i}.")
    return x.widen()


def loss_ref_f64(model: Model, values: dict[str, np.ndarray], inputs: np.ndarray,
                 targets) -> float:
    """Float64 reference loss used by the finite-difference oracle."""
    x = inputs.astype(np.float64)
    for i, lay in enumerate(model.layers[:-1]):
        prefix = f"{i}."
        p64 = {k[len(prefix):]: np.asarray(v, dtype=np.float64)
               for k, v in values.items() if k.startswith(prefix)}
        x = lay.forward_ref(x, p64, model.state, prefix)
    return model.layers[-1].loss_ref(x, targets)


def grad_check(model: Model, inputs: Tensor, targets, epsilon: float = 1e-5
               ) -> float:
    """Worst relative error between analytic gradients (f32 baseline
    policy) and central differences of the f64 reference loss."""
    policy = F32_POLICY
    x32 = T.cast(inputs, DType.F32)
    _, tape = forward(model, x32, targets, policy, train=True)
    grads = backward(model, tape, 1.0)

    values = {k: v.widen().astype(np.float64) for k, v in model.params.items()}
    x64 = x32.widen().astype(np.float64)

    worst = 0.0
    for key, analytic in grads.weights.items():
        a = analytic.widen().reshape(-1)
        base = values[key]
        flat = base.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + epsilon
            up = loss_ref_f64(model, values, x64, targets)
            flat[idx] = orig - epsilon
            down = loss_ref_f64(model, values, x64, targets)
            flat[idx] = orig
            numeric = (up - down) / (2.0 * epsilon)
            denom = max(abs(float(a[idx])), abs(numeric), 1e-8)
            worst = max(worst, abs(float(a[idx]) - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# Layer spec strings: "Linear(784,256,bias=true)" etc., used by configs
# and checkpoint manifests.
# ---------------------------------------------------------------------------

_LAYER_KINDS = {
    "Linear": Linear, "Conv2d": Conv2d, "ReLU": ReLU, "LeakyReLU": LeakyReLU,
    "Tanh": Tanh, "Sigmoid": Sigmoid, "BatchNorm": BatchNorm,
    "LSTMCell": LSTMCell, "SoftmaxCrossEntropy": SoftmaxCrossEntropy,
    "MeanSquaredError": MeanSquaredError,
}

_SPEC_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*(?:\((.*)\))?\s*$")


def _parse_arg(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise ValueError(f"cannot parse layer argument {text!r}") from None


def layer_from_spec(text: str) -> Layer:
    m = _SPEC_RE.match(text)
    if not m:
        raise ValueError(f"malformed layer spec {text!r}")
    kind, argtext = m.group(1), m.group(2)
    if kind not in _LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    args, kwargs = [], {}
    if argtext and argtext.strip():
        for piece in argtext.split(","):
            if "=" in piece:
                key, val = piece.split("=", 1)
                kwargs[key.strip()] = _parse_arg(val)
            else:
                args.append(_parse_arg(piece))
    return _LAYER_KINDS[kind](*args, **kwargs)


def model_from_specs(specs: list[str]) -> Model:
    return Model([layer_from_spec(s) for s in specs])
