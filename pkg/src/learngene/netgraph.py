"""Layered network families with per-layer feature traces.

Models are flat lists of layers.  A layer is "counted" when it contributes
one entry to the feature trace and participates in layer numbering (1-based);
preprocessing and classifier heads are plumbing and stay outside the count.
The three built-in families share one desk-scale input convention: NCHW
image batches, 16x16 spatial extent by default.

Block equations:
  attention block    Z_hat = MSA(LN(Z)) + Z ;  Z' = FFN(LN(Z_hat)) + Z_hat
  conv block         Z' = act(BN(Conv3x3(Z)))
  residual block     Z' = act(BN(Conv3x3(Z)) + Z)
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import numcore as nc
from .numcore import SeededRng, Tensor

LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # kept mass of the old running statistic per batch

KINDS = (
    "dense",
    "conv1x1",
    "conv3x3_bn",
    "residual_conv",
    "attention_block",
    "feed_forward_block",
    "layer_norm",
    "classifier_head",
    "patch_embed",
)

# kinds that appear in the trace and in 1-based layer numbering
COUNTED_KINDS = (
    "dense",
    "conv1x1",
    "conv3x3_bn",
    "residual_conv",
    "attention_block",
    "feed_forward_block",
    "layer_norm",
)

ACTIVATIONS = ("identity", "relu", "relu6")

FAMILIES = ("tiny-transformer", "tiny-cnn", "tiny-resnet")


@dataclass(frozen=True)
class LayerSpec:
    """Shape-level description of one layer; parameters live in ``Layer``."""

    kind: str
    in_dim: int
    out_dim: int
    activation: str = "identity"
    heads: int = 0        # attention blocks only
    mlp_ratio: int = 2    # feed-forward expansion inside blocks
    patch: int = 0        # patch embedding edge length
    tokens: int = 0       # token count including the class token
    pool: str = ""        # classifier head: "gap" | "token" | "none"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ValueError("layer dims must be positive")
        if self.kind == "residual_conv" and self.in_dim != self.out_dim:
            raise ValueError("residual layers need in_dim == out_dim")
        if self.kind in ("attention_block", "feed_forward_block", "layer_norm"):
            if self.in_dim != self.out_dim:
                raise ValueError(f"{self.kind} preserves width")
        if self.kind == "attention_block":
            if self.heads <= 0 or self.in_dim % self.heads:
                raise ValueError("head count must divide the block width")
        if self.kind == "patch_embed" and (self.patch <= 0 or self.tokens <= 1):
            raise ValueError("patch embedding needs patch size and token count")
        if self.kind == "classifier_head" and self.pool not in ("gap", "token", "none"):
            raise ValueError("classifier head pool must be gap, token, or none")

    @property
    def counted(self):
        return self.kind in COUNTED_KINDS


class Layer:
    """A LayerSpec plus its parameter tensors and non-trainable buffers."""

    def __init__(self, spec, params, buffers=None):
        self.spec = spec
        self.params = params
        self.buffers = buffers or {}

    def param_count(self):
        return sum(int(p.size) for p in self.params.values())


def _uniform_fanin(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape, dtype=np.float32), requires_grad=True)


def _ones(shape):
    return Tensor(np.ones(shape, dtype=np.float32), requires_grad=True)


def init_layer(spec, rng):
    """Fresh parameters for ``spec`` drawn from seeded uniform fan-in ranges."""
    k = spec.kind
    p = {}
    buffers = {}
    if k == "dense":
        p["w"] = _uniform_fanin(rng, (spec.in_dim, spec.out_dim), spec.in_dim)
        p["b"] = _zeros(spec.out_dim)
    elif k == "conv1x1":
        p["w"] = _uniform_fanin(rng, (spec.out_dim, spec.in_dim, 1, 1), spec.in_dim)
        p["b"] = _zeros(spec.out_dim)
    elif k in ("conv3x3_bn", "residual_conv"):
        fan = spec.in_dim * 9
        p["w"] = _uniform_fanin(rng, (spec.out_dim, spec.in_dim, 3, 3), fan)
        p["gamma"] = _ones(spec.out_dim)
        p["beta"] = _zeros(spec.out_dim)
        buffers["running_mean"] = np.zeros(spec.out_dim, dtype=np.float32)
        buffers["running_var"] = np.ones(spec.out_dim, dtype=np.float32)
    elif k == "attention_block":
        d = spec.in_dim
        hidden = d * spec.mlp_ratio
        p["ln1_g"], p["ln1_b"] = _ones(d), _zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            p[name] = _uniform_fanin(rng, (d, d), d)
        for name in ("bq", "bk", "bv", "bo"):
            p[name] = _zeros(d)
        p["ln2_g"], p["ln2_b"] = _ones(d), _zeros(d)
        p["w1"] = _uniform_fanin(rng, (d, hidden), d)
        p["b1"] = _zeros(hidden)
        p["w2"] = _uniform_fanin(rng, (hidden, d), hidden)
        p["b2"] = _zeros(d)
    elif k == "feed_forward_block":
        d = spec.in_dim
        hidden = d * spec.mlp_ratio
        p["ln_g"], p["ln_b"] = _ones(d), _zeros(d)
        p["w1"] = _uniform_fanin(rng, (d, hidden), d)
        p["b1"] = _zeros(hidden)
        p["w2"] = _uniform_fanin(rng, (hidden, d), hidden)
        p["b2"] = _zeros(d)
    elif k == "layer_norm":
        p["g"], p["b"] = _ones(spec.in_dim), _zeros(spec.in_dim)
    elif k == "classifier_head":
        if spec.pool == "token":
            p["ln_g"], p["ln_b"] = _ones(spec.in_dim), _zeros(spec.in_dim)
        p["w"] = _uniform_fanin(rng, (spec.in_dim, spec.out_dim), spec.in_dim)
        p["b"] = _zeros(spec.out_dim)
    elif k == "patch_embed":
        flat = spec.in_dim * spec.patch * spec.patch
        p["w"] = _uniform_fanin(rng, (flat, spec.out_dim), flat)
        p["b"] = _zeros(spec.out_dim)
        p["cls"] = Tensor(rng.uniform(-0.02, 0.02, (1, 1, spec.out_dim)), requires_grad=True)
        p["pos"] = Tensor(
            rng.uniform(-0.02, 0.02, (1, spec.tokens, spec.out_dim)), requires_grad=True
        )
    else:  # pragma: no cover - guarded by LayerSpec validation
        raise ValueError(k)
    return Layer(spec, p, buffers)


def clone_layer(layer, trainable=True):
    """Deep copy of parameters and buffers; the spec itself is immutable."""
    params = {k: Tensor(v.data.copy(), requires_grad=trainable) for k, v in layer.params.items()}
    buffers = {k: v.copy() for k, v in layer.buffers.items()}
    return Layer(layer.spec, params, buffers)


def _apply_activation(x, name):
    if name == "relu":
        return nc.relu(x)
    if name == "relu6":
        return nc.relu6(x)
    return x


def layer_norm(x, gain, bias, eps=LN_EPS):
    """Normalize over the last axis, then scale and shift."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / (var + eps).sqrt() * gain + bias


def batch_norm(x, layer, train, eps=BN_EPS):
    """Per-channel normalization over (batch, H, W) with tracked running stats."""
    gamma = layer.params["gamma"].reshape(1, -1, 1, 1)
    beta = layer.params["beta"].reshape(1, -1, 1, 1)
    if train:
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        m = BN_MOMENTUM
        layer.buffers["running_mean"] = (
            m * layer.buffers["running_mean"] + (1 - m) * mu.data.reshape(-1)
        ).astype(np.float32)
        layer.buffers["running_var"] = (
            m * layer.buffers["running_var"] + (1 - m) * var.data.reshape(-1)
        ).astype(np.float32)
        return xc / (var + eps).sqrt() * gamma + beta
    rm = Tensor(layer.buffers["running_mean"].reshape(1, -1, 1, 1))
    rv = Tensor(layer.buffers["running_var"].reshape(1, -1, 1, 1))
    return (x - rm) / (rv + eps).sqrt() * gamma + beta


def _attention(x, layer):
    spec = layer.spec
    p = layer.params
    b, t, d = x.shape
    heads = spec.heads
    dh = d // heads
    h1 = layer_norm(x, p["ln1_g"], p["ln1_b"])
    q = h1 @ p["wq"] + p["bq"]
    k = h1 @ p["wk"] + p["bk"]
    v = h1 @ p["wv"] + p["bv"]

    def split(m):
        return m.reshape(b, t, heads, dh).transpose((0, 2, 1, 3))

    q, k, v = split(q), split(k), split(v)
    att = (q @ k.transpose((0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    att = att.softmax(axis=-1)
    ctx = (att @ v).transpose((0, 2, 1, 3)).reshape(b, t, d)
    z = ctx @ p["wo"] + p["bo"] + x
    h2 = layer_norm(z, p["ln2_g"], p["ln2_b"])
    ffn = nc.relu(h2 @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]
    return ffn + z


def forward_layer(layer, x, train=False):
    """Apply one layer to a feature tensor; pure given eval mode."""
    spec = layer.spec
    p = layer.params
    k = spec.kind
    if k == "dense":
        return _apply_activation(x @ p["w"] + p["b"], spec.activation)
    if k == "conv1x1":
        return _apply_activation(nc.conv2d(x, p["w"], p["b"], padding=0), spec.activation)
    if k == "conv3x3_bn":
        out = batch_norm(nc.conv2d(x, p["w"], padding=1), layer, train)
        return _apply_activation(out, spec.activation)
    if k == "residual_conv":
        out = batch_norm(nc.conv2d(x, p["w"], padding=1), layer, train) + x
        return _apply_activation(out, spec.activation)
    if k == "attention_block":
        return _apply_activation(_attention(x, layer), spec.activation)
    if k == "feed_forward_block":
        h = layer_norm(x, p["ln_g"], p["ln_b"])
        return x + (nc.relu(h @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"])
    if k == "layer_norm":
        return layer_norm(x, p["g"], p["b"])
    if k == "classifier_head":
        if spec.pool == "gap":
            pooled = x.mean(axis=(2, 3))
        elif spec.pool == "token":
            normed = layer_norm(x, p["ln_g"], p["ln_b"])
            pooled = nc.narrow(normed, 1, 0, 1).reshape(x.shape[0], x.shape[2])
        else:
            pooled = x
        return pooled @ p["w"] + p["b"]
    if k == "patch_embed":
        bsz, c, h, w = x.shape
        ps = spec.patch
        if h % ps or w % ps:
            raise ValueError("input extent must be divisible by the patch size")
        n = (h // ps) * (w // ps)
        patches = (
            x.reshape(bsz, c, h // ps, ps, w // ps, ps)
            .transpose((0, 2, 4, 1, 3, 5))
            .reshape(bsz, n, c * ps * ps)
        )
        tok = patches @ p["w"] + p["b"]
        cls = p["cls"].broadcast_to((bsz, 1, spec.out_dim))
        return nc.concat([cls, tok], axis=1) + p["pos"]
    raise ValueError(k)  # pragma: no cover


class Model:
    """Ordered layers plus bookkeeping for trace collection and identity."""

    def __init__(self, family, layers, num_classes, input_shape, role="ancestry"):
        self.family = family
        self.layers = layers
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self.role = role
        self.provenance = {}

    @property
    def counted_indices(self):
        return [i for i, layer in enumerate(self.layers) if layer.spec.counted]

    @property
    def depth(self):
        """Number of counted layers (the L in 1-based layer numbering)."""
        return len(self.counted_indices)

    def counted_layer(self, number):
        """Layer object for 1-based counted layer ``number``."""
        idx = self.counted_indices
        if not 1 <= number <= len(idx):
            raise IndexError(f"counted layer {number} out of range 1..{len(idx)}")
        return self.layers[idx[number - 1]]

    def parameters(self):
        return [p for layer in self.layers for p in layer.params.values()]

    def named_parameters(self):
        for i, layer in enumerate(self.layers):
            for key in sorted(layer.params):
                yield f"layers.{i}.{key}", layer.params[key]

    def named_buffers(self):
        for i, layer in enumerate(self.layers):
            for key in sorted(layer.buffers):
                yield f"layers.{i}.buf.{key}", layer.buffers[key]

    def param_count(self):
        return sum(layer.param_count() for layer in self.layers)

    def set_trainable(self, flag):
        for p in self.parameters():
            p.requires_grad = bool(flag)
            if not flag:
                p.grad = None

    def checksum(self):
        """SHA-256 over all parameter and buffer bytes in canonical order."""
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        for name, b in self.named_buffers():
            h.update(name.encode())
            h.update(np.ascontiguousarray(b).tobytes())
        return h.hexdigest()

    def _check_input(self, x):
        if x.shape[1:] != self.input_shape:
            raise ValueError(
                f"expected input shape (N, {', '.join(map(str, self.input_shape))}), got {x.shape}"
            )

    def forward(self, x, train=False):
        logits, _ = self.forward_collect(x, train=train, want_trace=False)
        return logits

    def forward_collect(self, x, train=False, want_trace=True):
        """Run all layers; also return the per-counted-layer feature trace."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=np.float32))
        self._check_input(x.data)
        trace = []
        for layer in self.layers:
            x = forward_layer(layer, x, train=train)
            if want_trace and layer.spec.counted:
                trace.append(x)
        return x, trace


def forward_collect(model, batch, train=False):
    """Module-level alias: (logits, trace) for a batch."""
    return model.forward_collect(batch, train=train)


def _resolve_widths(width, depth, doubling=True):
    if isinstance(width, (list, tuple)):
        widths = [int(w) for w in width]
        if len(widths) != depth:
            raise ValueError("per-layer widths must match depth")
        return widths
    if doubling:
        return [int(width) * 2 ** min(i, 3) for i in range(depth)]
    return [int(width)] * depth


def build_model(family, depth, width, num_classes, input_shape=(3, 16, 16), seed=0,
                role="ancestry", heads=2, patch=4, constant_width=False):
    """Deterministically construct one of the supported families.

    ``width`` is either a base width (channel/width progression is then a
    deterministic function of depth) or an explicit per-layer sequence.
    """
    if family not in FAMILIES:
        raise ValueError(f"unsupported family {family!r}")
    if depth < 1:
        raise ValueError("depth must be at least 1")
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    rng = SeededRng(seed).child("build_model")
    c_in = input_shape[0]
    layers = []
    if family == "tiny-transformer":
        d = int(width) if not isinstance(width, (list, tuple)) else int(width[0])
        h, w = input_shape[1], input_shape[2]
        if h % patch or w % patch:
            raise ValueError("input extent must be divisible by the patch size")
        tokens = (h // patch) * (w // patch) + 1
        layers.append(init_layer(
            LayerSpec("patch_embed", c_in, d, patch=patch, tokens=tokens), rng.child("embed")))
        for i in range(depth):
            layers.append(init_layer(
                LayerSpec("attention_block", d, d, heads=heads), rng.child(f"block{i}")))
        layers.append(init_layer(
            LayerSpec("classifier_head", d, num_classes, pool="token"), rng.child("head")))
    elif family == "tiny-cnn":
        widths = _resolve_widths(width, depth, doubling=not constant_width)
        prev = c_in
        for i, w in enumerate(widths):
            layers.append(init_layer(
                LayerSpec("conv3x3_bn", prev, w, activation="relu"), rng.child(f"conv{i}")))
            prev = w
        layers.append(init_layer(
            LayerSpec("classifier_head", prev, num_classes, pool="gap"), rng.child("head")))
    else:  # tiny-resnet: plain conv blocks interleaved with residual blocks
        if isinstance(width, (list, tuple)):
            widths = _resolve_widths(width, depth)
        elif constant_width:
            widths = [int(width)] * depth
        else:
            widths = [int(width) * 2 ** min(i // 2, 3) for i in range(depth)]
        prev = c_in
        for i, w in enumerate(widths):
            if w == prev and i > 0:
                layers.append(init_layer(
                    LayerSpec("residual_conv", w, w), rng.child(f"res{i}")))
            else:
                layers.append(init_layer(
                    LayerSpec("conv3x3_bn", prev, w, activation="relu"), rng.child(f"conv{i}")))
            prev = w
        layers.append(init_layer(
            LayerSpec("classifier_head", prev, num_classes, pool="gap"), rng.child("head")))
    return Model(family, layers, num_classes, input_shape, role=role)


def model_from_specs(specs, num_classes, input_shape, seed=0, family="custom", role="ancestry"):
    """Assemble a model from explicit LayerSpecs (used by tests and descendants)."""
    rng = SeededRng(seed).child("from_specs")
    layers = [init_layer(s, rng.child(f"layer{i}")) for i, s in enumerate(specs)]
    return Model(family, layers, num_classes, input_shape, role=role)


def spec_to_dict(spec):
    return asdict(spec)


def spec_from_dict(d):
    return LayerSpec(**d)
