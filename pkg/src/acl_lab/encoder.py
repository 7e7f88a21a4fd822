"""MLP encoder f, projection head g and an optional linear classifier, with
hand-written forward/backward passes and a binary checkpoint format.

Parameters live in one ordered ``dict`` of float64 arrays so an optimizer can
update them in place by name:

    f.{k}.W, f.{k}.b          encoder layer k (W is fan_in x fan_out)
    g.W1, g.b1                head hidden layer
    g.bn_gamma, g.bn_beta     head batch-norm affine parameters
    g.bn_run_mean, g.bn_run_var   running statistics (not trained)
    g.W2, g.b2                head output layer
    cls.W, cls.b              linear classifier on h (supervised mode)
"""

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .errors import BadMagic, DimMismatch, StaleTrace, TruncatedFile, VersionMismatch
from .numerics import as_matrix

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
ACTIVATIONS = ("identity", "relu")
NON_TRAINABLE = ("g.bn_run_mean", "g.bn_run_var")

MAGIC = b"ACL1"
FORMAT_VERSION = 1
ACT_TENSOR = "f.activation"


@dataclass
class EncoderParams:
    tensors: dict
    activations: list

    @property
    def n_layers(self):
        return len(self.activations)

    @property
    def d_in(self):
        return self.tensors["f.0.W"].shape[0]

    @property
    def d_h(self):
        return self.tensors[f"f.{self.n_layers - 1}.W"].shape[1]

    @property
    def has_head(self):
        return "g.W1" in self.tensors

    @property
    def d_z(self):
        return self.tensors["g.W2"].shape[1] if self.has_head else None

    @property
    def has_classifier(self):
        return "cls.W" in self.tensors

    def trainable(self) -> dict:
        return {k: v for k, v in self.tensors.items() if k not in NON_TRAINABLE}

    def copy(self) -> "EncoderParams":
        return EncoderParams({k: v.copy() for k, v in self.tensors.items()}, list(self.activations))

    def validate(self):
        t = self.tensors
        prev = None
        for k, act in enumerate(self.activations):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            W, b = t[f"f.{k}.W"], t[f"f.{k}.b"]
            if prev is not None and W.shape[0] != prev:
                raise DimMismatch(f"layer {k} expects {W.shape[0]} inputs, previous gives {prev}")
            if b.shape != (W.shape[1],):
                raise DimMismatch(f"layer {k} bias shape {b.shape}")
            prev = W.shape[1]
        if self.has_head:
            hidden = t["g.W1"].shape[1]
            if t["g.W1"].shape[0] != prev or t["g.W2"].shape[0] != hidden:
                raise DimMismatch("projection head dims do not chain")
            for name in ("g.b1", "g.bn_gamma", "g.bn_beta", "g.bn_run_mean", "g.bn_run_var"):
                if t[name].shape != (hidden,):
                    raise DimMismatch(f"{name} has shape {t[name].shape}")
            if np.any(t["g.bn_run_var"] <= 0):
                raise ValueError("running variance must be positive")
        if self.has_classifier and t["cls.W"].shape[0] != prev:
            raise DimMismatch("classifier input dim does not match d_h")
        return self


def _glorot(g, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return g.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(d_in, hidden=(256, 256), d_h=64, d_z=32, head_hidden=None, n_classes=None,
                seed=0, head=True, final_activation="identity") -> EncoderParams:
    """Glorot-uniform weights, zero biases, unit BN scale; one rng stream per layer."""
    widths = [d_in, *hidden, d_h]
    acts = ["relu"] * len(hidden) + [final_activation]
    t = {}
    for k in range(len(widths) - 1):
        t[f"f.{k}.W"] = _glorot(rngmod.stream(seed, rngmod.INIT, k), widths[k], widths[k + 1])
        t[f"f.{k}.b"] = np.zeros(widths[k + 1])
    if head:
        hh = head_hidden or d_h
        t["g.W1"] = _glorot(rngmod.stream(seed, rngmod.INIT, 100), d_h, hh)
        t["g.b1"] = np.zeros(hh)
        t["g.bn_gamma"] = np.ones(hh)
        t["g.bn_beta"] = np.zeros(hh)
        t["g.bn_run_mean"] = np.zeros(hh)
        t["g.bn_run_var"] = np.ones(hh)
        t["g.W2"] = _glorot(rngmod.stream(seed, rngmod.INIT, 101), hh, d_z)
        t["g.b2"] = np.zeros(d_z)
    if n_classes:
        t["cls.W"] = _glorot(rngmod.stream(seed, rngmod.INIT, 200), d_h, n_classes)
        t["cls.b"] = np.zeros(n_classes)
    return EncoderParams(t, acts).validate()


@dataclass
class ForwardTrace:
    mode: str
    inputs: list = field(default_factory=list)   # input to each encoder layer
    pre: list = field(default_factory=list)      # pre-activations of each encoder layer
    h: np.ndarray = None
    head: dict = None
    z: np.ndarray = None
    params: EncoderParams = None


def _act(name, x):
    return np.maximum(x, 0.0) if name == "relu" else x


def encode(params: EncoderParams, x, trace=None):
    x = as_matrix(x)
    if x.shape[1] != params.d_in:
        raise DimMismatch(f"input has {x.shape[1]} columns, encoder expects {params.d_in}")
    a = x
    t = params.tensors
    for k, act in enumerate(params.activations):
        pre = a @ t[f"f.{k}.W"] + t[f"f.{k}.b"]
        if trace is not None:
            trace.inputs.append(a)
            trace.pre.append(pre)
        a = _act(act, pre)
    return a


def project(params: EncoderParams, h, mode="train", cache=None):
    t = params.tensors
    p1 = h @ t["g.W1"] + t["g.b1"]
    if mode == "train":
        mu = p1.mean(axis=0)
        var = p1.var(axis=0)
    elif mode == "eval":
        mu, var = t["g.bn_run_mean"], t["g.bn_run_var"]
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (p1 - mu) * inv_std
    y = t["g.bn_gamma"] * xhat + t["g.bn_beta"]
    r = np.maximum(y, 0.0)
    z = r @ t["g.W2"] + t["g.b2"]
    if cache is not None:
        cache.update(mu=mu, var=var, inv_std=inv_std, xhat=xhat, y=y, r=r)
    return z


def forward(params: EncoderParams, x, mode="train"):
    """Return ``(h, z, trace)``; ``z`` is None when the params carry no head.

    Train mode normalizes the head with batch statistics; the updated running
    statistics are left in the trace (see ``commit_running_stats``) so that this
    function never mutates ``params``.
    """
    trace = ForwardTrace(mode=mode, params=params)
    h = encode(params, x, trace)
    trace.h = h
    if params.has_head:
        trace.head = {}
        trace.z = project(params, h, mode, trace.head)
    return h, trace.z, trace


def embed(params: EncoderParams, x, batch_size=1024):
    """Eval-mode encoder features h, computed in fixed-size chunks."""
    x = as_matrix(x)
    if x.shape[0] <= batch_size:
        return encode(params, x)
    return np.concatenate([encode(params, x[i:i + batch_size]) for i in range(0, x.shape[0], batch_size)])


def commit_running_stats(params: EncoderParams, trace: ForwardTrace):
    if trace.mode != "train" or trace.head is None:
        return
    n = trace.h.shape[0]
    unbiased = trace.head["var"] * (n / (n - 1)) if n > 1 else trace.head["var"]
    t = params.tensors
    t["g.bn_run_mean"][...] = BN_MOMENTUM * t["g.bn_run_mean"] + (1 - BN_MOMENTUM) * trace.head["mu"]
    t["g.bn_run_var"][...] = BN_MOMENTUM * t["g.bn_run_var"] + (1 - BN_MOMENTUM) * unbiased


def backward(trace: ForwardTrace, grad_h=None, grad_z=None) -> dict:
    """Gradients of every trainable parameter.

    ``grad_z`` enters at the head output and flows through g and f; ``grad_h``
    joins at the encoder output. Either may be None (treated as zero).
    """
    params = trace.params
    if trace.mode != "train":
        raise StaleTrace("backward needs a train-mode trace")
    t = params.tensors
    n = trace.h.shape[0]
    grads = {}
    dh = np.zeros_like(trace.h)
    if grad_h is not None:
        grad_h = np.asarray(grad_h, dtype=np.float64)
        if grad_h.shape != trace.h.shape:
            raise StaleTrace(f"grad_h shape {grad_h.shape} != h shape {trace.h.shape}")
        dh = dh + grad_h

    if params.has_head:
        c = trace.head
        if grad_z is None:
            grad_z = np.zeros_like(trace.z)
        grad_z = np.asarray(grad_z, dtype=np.float64)
        if grad_z.shape != trace.z.shape:
            raise StaleTrace(f"grad_z shape {grad_z.shape} != z shape {trace.z.shape}")
        grads["g.W2"] = c["r"].T @ grad_z
        grads["g.b2"] = grad_z.sum(axis=0)
        dy = (grad_z @ t["g.W2"].T) * (c["y"] > 0)
        grads["g.bn_gamma"] = np.sum(dy * c["xhat"], axis=0)
        grads["g.bn_beta"] = dy.sum(axis=0)
        dxhat = dy * t["g.bn_gamma"]
        dp1 = (c["inv_std"] / n) * (n * dxhat - dxhat.sum(axis=0)
                                    - c["xhat"] * np.sum(dxhat * c["xhat"], axis=0))
        grads["g.W1"] = trace.h.T @ dp1
        grads["g.b1"] = dp1.sum(axis=0)
        dh = dh + dp1 @ t["g.W1"].T
    elif grad_z is not None:
        raise StaleTrace("grad_z given but the params carry no projection head")

    da = dh
    for k in reversed(range(params.n_layers)):
        dpre = da * (trace.pre[k] > 0) if params.activations[k] == "relu" else da
        grads[f"f.{k}.W"] = trace.inputs[k].T @ dpre
        grads[f"f.{k}.b"] = dpre.sum(axis=0)
        if k:
            da = dpre @ t[f"f.{k}.W"].T
    return grads


def classifier_logits(params: EncoderParams, h):
    return h @ params.tensors["cls.W"] + params.tensors["cls.b"]


def classifier_backward(params: EncoderParams, h, grad_logits):
    """Classifier parameter gradients and the gradient flowing back into h."""
    grads = {"cls.W": h.T @ grad_logits, "cls.b": grad_logits.sum(axis=0)}
    return grads, grad_logits @ params.tensors["cls.W"].T


# checkpoint: magic, u32 version, then per tensor: u32 name length, utf-8 name,
# u32 rank, u32 dims, little-endian float64 payload (row-major)

def save_checkpoint(params: EncoderParams, path):
    tensors = dict(params.tensors)
    tensors[ACT_TENSOR] = np.array([float(ACTIVATIONS.index(a)) for a in params.activations])
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        for name, arr in tensors.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedFile(f"checkpoint ends at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count=1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals

    @property
    def done(self):
        return self.pos == len(self.data)


def load_checkpoint(path) -> EncoderParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise TruncatedFile("checkpoint shorter than its magic")
    if data[:4] != MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r}")
    rd = _Reader(data)
    rd.take(4)
    version = rd.u32()
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    tensors = {}
    while not rd.done:
        name = rd.take(rd.u32()).decode("utf-8")
        rank = rd.u32()
        dims = rd.u32(rank) if rank > 1 else ((rd.u32(),) if rank == 1 else ())
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(rd.take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
        tensors[name] = arr
    if ACT_TENSOR not in tensors:
        raise TruncatedFile("checkpoint is missing the activation table")
    acts = [ACTIVATIONS[int(c)] for c in tensors.pop(ACT_TENSOR)]
    for k in range(len(acts)):
        if f"f.{k}.W" not in tensors or f"f.{k}.b" not in tensors:
            raise TruncatedFile(f"checkpoint is missing encoder layer {k}")
    head = [n for n in tensors if n.startswith("g.")]
    if head and len(head) != 8:
        raise TruncatedFile("checkpoint has an incomplete projection head")
    return EncoderParams(tensors, acts).validate()
