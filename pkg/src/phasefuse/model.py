"""Dual-branch CNN with parallel-attention fusion and interchangeable heads.

Both inputs (the grayscale image replicated to three channels and the
multi-feature image) go through identical, independently weighted
convolutional trunks.  After selected stages the two feature maps exchange
information through a parallel-attention block: each branch queries the
other branch's features and the attended result is added back residually.
Maps larger than ``pool_target`` are average-pooled before attention and the
output is bilinearly upsampled back.

The final-stage maps go to one of three heads:

``cross_vit``
    256-d token projection, CLS token and learned positional embedding per
    branch, then pre-norm encoder layers in which each branch attends to the
    other; the two CLS outputs are projected to class scores and summed.
``mid_conv``
    channel concatenation, 3x3 convolution, global average pool, linear.
``late_sum``
    per-branch global average pool and linear layer; the scores are summed.

All tensors are channels-last; a leading batch axis is expected by
:meth:`FusionModel.forward`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

HEADS = ("cross_vit", "mid_conv", "late_sum")
BRANCHES = ("cxr", "enh")


@dataclass
class ModelConfig:
    channels: tuple[int, ...] = (16, 32, 64, 128)
    in_channels: int = 3
    image_size: int = 224
    fusion_scales: tuple[int, ...] = (0, 1, 2)
    head: str = "cross_vit"
    pool_target: int = 7
    pa_bias: bool = False
    share_pa_weights: bool = False
    branches: int = 2
    embed_dim: int = 256
    num_heads: int = 4
    mlp_hidden: int = 512
    depth: int = 2
    num_classes: int = 3
    init: str = "he"
    trunk_norm: bool = False
    head_data_init: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.fusion_scales = tuple(sorted(int(s) for s in self.fusion_scales))
        if not self.channels or min(self.channels) < 1:
            raise ConfigError(f"channels must be positive, got {self.channels}")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.branches not in (1, 2):
            raise ConfigError("branches must be 1 or 2")
        if self.branches == 1 and self.fusion_scales:
            raise ConfigError("a single-branch model cannot use fusion scales")
        for s in self.fusion_scales:
            if not 0 <= s < len(self.channels):
                raise ConfigError(f"fusion scale {s} is not a stage index")
        if self.image_size % self.divisor:
            raise ConfigError(f"image_size {self.image_size} not divisible by {self.divisor}")
        if self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.init not in ("he", "uniform"):
            raise ConfigError(f"init must be 'he' or 'uniform', got {self.init!r}")
        if self.pool_target < 1:
            raise ConfigError("pool_target must be positive")

    @property
    def divisor(self) -> int:
        return 2 ** (len(self.channels) + 1)

    @property
    def final_size(self) -> int:
        return self.image_size // self.divisor

    @property
    def branch_names(self) -> tuple[str, ...]:
        return BRANCHES[: self.branches]

    def stage_sizes(self, size: int | None = None) -> list[int]:
        size = size or self.image_size
        return [size // 4 // 2 ** i for i in range(len(self.channels))]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["fusion_scales"] = list(self.fusion_scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


# ------------------------------------------------------------ building blocks


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, w)
    return y if b is None else T.add(y, b)


def pa_block(f_cxr: Tensor, f_enh: Tensor, wq: Tensor, wk: Tensor, wq2: Tensor, wk2: Tensor,
             biases: dict | None = None, trace: list | None = None) -> tuple[Tensor, Tensor]:
    """Parallel attention between two ``(..., H, W, C)`` feature maps.

    For the cxr output, queries come from ``f_cxr`` through ``wq``, keys from
    ``f_enh`` through ``wk``, and the values are the raw ``f_enh`` features;
    the enh output mirrors this with ``(wq2, wk2)``.  Softmax temperature is
    ``sqrt(C)``.  Attention matrices are appended to ``trace`` when given.
    """
    if f_cxr.shape != f_enh.shape:
        raise ShapeError(f"pa_block: branch shapes differ, {f_cxr.shape} vs {f_enh.shape}")
    c = f_cxr.shape[-1]
    for w in (wq, wk, wq2, wk2):
        if w.shape != (c, c):
            raise ShapeError(f"pa_block: weight {w.shape} does not match {c} channels")
    biases = biases or {}
    lead, (h, w_) = f_cxr.shape[:-3], f_cxr.shape[-3:-1]
    flat = lead + (h * w_, c)
    temp = math.sqrt(c)

    def attend(src, other, w_q, w_k, b_q, b_k):
        q = T.reshape(T.conv1x1(src, w_q, b_q), flat)
        k = T.reshape(T.conv1x1(other, w_k, b_k), flat)
        m = T.softmax_rows(T.matmul(q, T.transpose(k)), temp)
        if trace is not None:
            trace.append(m.data)
        return T.reshape(T.matmul(m, T.reshape(other, flat)), f_cxr.shape)

    o_cxr = attend(f_cxr, f_enh, wq, wk, biases.get("bq"), biases.get("bk"))
    o_enh = attend(f_enh, f_cxr, wq2, wk2, biases.get("bq2"), biases.get("bk2"))
    return o_cxr, o_enh


def fuse_at_scale(f_cxr: Tensor, f_enh: Tensor, weights: tuple, pool_target: int,
                  biases: dict | None = None, trace: list | None = None) -> tuple[Tensor, Tensor]:
    """Residual PA fusion, pooling to ``pool_target`` first when the map is larger."""
    h, w = f_cxr.shape[-3], f_cxr.shape[-2]
    ph, pw = min(h, pool_target), min(w, pool_target)
    if (ph, pw) != (h, w):
        o_cxr, o_enh = pa_block(T.avg_pool_to(f_cxr, ph, pw), T.avg_pool_to(f_enh, ph, pw),
                                *weights, biases=biases, trace=trace)
        o_cxr = T.bilinear_upsample(o_cxr, h, w)
        o_enh = T.bilinear_upsample(o_enh, h, w)
    else:
        o_cxr, o_enh = pa_block(f_cxr, f_enh, *weights, biases=biases, trace=trace)
    return T.add(f_cxr, o_cxr), T.add(f_enh, o_enh)


def layer_norm(x: Tensor, p: dict, name: str) -> Tensor:
    return T.layer_norm(x, p[name + ".g"], p[name + ".b"])


def multi_head_attention(xq: Tensor, xkv: Tensor, p: dict, name: str, num_heads: int,
                         trace: list | None = None) -> Tensor:
    b, nq, d = xq.shape
    nk = xkv.shape[1]
    hd = d // num_heads

    def split(x, n, which):
        y = linear(x, p[f"{name}.w{which}"], p[f"{name}.b{which}"])
        return T.permute(T.reshape(y, (b, n, num_heads, hd)), (0, 2, 1, 3))

    q, k, v = split(xq, nq, "q"), split(xkv, nk, "k"), split(xkv, nk, "v")
    att = T.softmax_rows(T.matmul(q, T.transpose(k)), math.sqrt(hd))
    if trace is not None:
        trace.append(att.data)
    out = T.reshape(T.permute(T.matmul(att, v), (0, 2, 1, 3)), (b, nq, d))
    return linear(out, p[f"{name}.wo"], p[f"{name}.bo"])


def cross_encoder_layer(xs: dict, p: dict, layer: int, num_heads: int,
                        trace: list | None = None) -> dict:
    """One pre-norm layer; every branch attends to the other (itself when alone)."""
    names = list(xs)
    normed = {b: layer_norm(xs[b], p, f"head.{b}.layer{layer}.ln1") for b in names}
    out = {}
    for i, b in enumerate(names):
        other = names[(i + 1) % len(names)]
        pre = f"head.{b}.layer{layer}"
        x = T.add(xs[b], multi_head_attention(normed[b], normed[other], p, pre + ".attn", num_heads, trace))
        hdn = T.gelu(linear(layer_norm(x, p, pre + ".ln2"), p[pre + ".mlp.w1"], p[pre + ".mlp.b1"]))
        out[b] = T.add(x, linear(hdn, p[pre + ".mlp.w2"], p[pre + ".mlp.b2"]))
    return out


def cross_vit_head(maps: dict, p: dict, cfg: ModelConfig, trace: list | None = None) -> Tensor:
    first = next(iter(maps.values()))
    for m in maps.values():
        if m.shape != first.shape:
            raise ShapeError(f"head: branch shapes differ, {[v.shape for v in maps.values()]}")
    bsz, h, w, _ = first.shape
    d = cfg.embed_dim
    xs = {}
    for b, f in maps.items():
        tok = T.reshape(T.conv1x1(f, p[f"head.{b}.proj.w"], p[f"head.{b}.proj.b"]), (bsz, h * w, d))
        cls = T.add(Tensor(np.zeros((bsz, 1, d))), p[f"head.{b}.cls"])
        x = T.concat([cls, tok], axis=1)
        if x.shape[1] != p[f"head.{b}.pos"].shape[0]:
            raise ShapeError(f"head: {x.shape[1]} tokens but positional table has {p[f'head.{b}.pos'].shape[0]}")
        xs[b] = T.add(x, p[f"head.{b}.pos"])
    for layer in range(cfg.depth):
        xs = cross_encoder_layer(xs, p, layer, cfg.num_heads, trace)
    logits = None
    for b, x in xs.items():
        cls_out = T.getitem(layer_norm(x, p, f"head.{b}.ln"), (slice(None), 0))
        z = linear(cls_out, p[f"head.{b}.out.w"], p[f"head.{b}.out.b"])
        logits = z if logits is None else T.add(logits, z)
    return logits


def mid_fusion_head(maps: dict, p: dict, cfg: ModelConfig, trace=None) -> Tensor:
    shapes = {m.shape for m in maps.values()}
    if len(shapes) != 1:
        raise ShapeError(f"head: branch shapes differ, {shapes}")
    x = T.concat(list(maps.values()), axis=-1) if len(maps) > 1 else next(iter(maps.values()))
    x = T.gelu(T.conv2d(x, p["head.mid.w"], p["head.mid.b"], 1))
    pooled = layer_norm(T.mean(x, (1, 2)), p, "head.mid.ln")
    return linear(pooled, p["head.mid.out.w"], p["head.mid.out.b"])


def late_fusion_head(maps: dict, p: dict, cfg: ModelConfig, trace=None) -> Tensor:
    shapes = {m.shape for m in maps.values()}
    if len(shapes) != 1:
        raise ShapeError(f"head: branch shapes differ, {shapes}")
    logits = None
    for b, f in maps.items():
        pooled = layer_norm(T.mean(f, (1, 2)), p, f"head.{b}.ln")
        z = linear(pooled, p[f"head.{b}.out.w"], p[f"head.{b}.out.b"])
        logits = z if logits is None else T.add(logits, z)
    return logits


HEAD_FUNCS = {"cross_vit": cross_vit_head, "mid_conv": mid_fusion_head, "late_sum": late_fusion_head}


def _conv_act(x: Tensor, p: dict, name: str, stride: int) -> Tensor:
    y = T.conv2d(x, p[name + ".w"], p[name + ".b"], stride)
    if name + ".ln.g" in p:  # per-pixel channel normalization
        y = layer_norm(y, p, name + ".ln")
    return T.gelu(y)


def stem_forward(x: Tensor, p: dict, branch: str) -> Tensor:
    y = _conv_act(x, p, f"{branch}.stem", 2)
    return T.avg_pool_to(y, y.shape[1] // 2, y.shape[2] // 2)


def stage_forward(x: Tensor, p: dict, branch: str, i: int) -> Tensor:
    return _conv_act(x, p, f"{branch}.stage{i}", 1 if i == 0 else 2)


def backbone_forward(img: Tensor, p: dict, cfg: ModelConfig, branch: str = "cxr") -> list[Tensor]:
    """Feature pyramid of one trunk without any fusion."""
    _check_input(img, cfg)
    x = stem_forward(img, p, branch)
    out = []
    for i in range(len(cfg.channels)):
        x = stage_forward(x, p, branch, i)
        out.append(x)
    return out


def _check_input(img: Tensor, cfg: ModelConfig) -> None:
    if img.ndim != 4 or img.shape[-1] != cfg.in_channels:
        raise ShapeError(f"expected (B, H, W, {cfg.in_channels}) input, got {img.shape}")
    h, w = img.shape[1:3]
    if h % cfg.divisor or w % cfg.divisor:
        raise ShapeError(f"input size {h}x{w} is not divisible by {cfg.divisor}")


# ------------------------------------------------------------------ the model


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class FusionModel:
    """Parameter store plus architecture descriptor."""

    def __init__(self, arch: ModelConfig, params: dict[str, np.ndarray]):
        self.arch = arch
        self.params = params

    @classmethod
    def init(cls, arch: ModelConfig, seed: int = 0) -> "FusionModel":
        rng = np.random.default_rng(seed)
        p: dict[str, np.ndarray] = {}

        def conv(name, k, cin, cout):
            fan = k * k * cin
            if arch.init == "he":
                p[name + ".w"] = rng.uniform(-1, 1, (k, k, cin, cout)) * math.sqrt(6.0 / fan)
                p[name + ".b"] = np.zeros(cout)
            else:
                p[name + ".w"] = _uniform(rng, (k, k, cin, cout), fan)
                p[name + ".b"] = _uniform(rng, (cout,), fan)

        def trunk_conv(name, cin, cout):
            conv(name, 3, cin, cout)
            if arch.trunk_norm:
                p[name + ".ln.g"] = np.ones(cout)
                p[name + ".ln.b"] = np.zeros(cout)

        def dense(name, cin, cout, wkey="w", bkey="b"):
            p[f"{name}.{wkey}"] = _uniform(rng, (cin, cout), cin)
            p[f"{name}.{bkey}"] = _uniform(rng, (cout,), cin)

        ch = arch.channels
        for b in arch.branch_names:
            trunk_conv(f"{b}.stem", arch.in_channels, ch[0])
            for i, c in enumerate(ch):
                trunk_conv(f"{b}.stage{i}", ch[i - 1] if i else ch[0], c)
        for s in arch.fusion_scales:
            c = ch[s]
            keys = ("q", "k") if arch.share_pa_weights else ("q", "k", "q2", "k2")
            for k in keys:
                p[f"pa{s}.w{k}"] = _uniform(rng, (c, c), c)
                if arch.pa_bias:
                    p[f"pa{s}.b{k}"] = _uniform(rng, (c,), c)
        cf, d = ch[-1], arch.embed_dim
        if arch.head == "cross_vit":
            n_tok = arch.final_size ** 2 + 1
            for b in arch.branch_names:
                dense(f"head.{b}.proj", cf, d)
                p[f"head.{b}.cls"] = rng.normal(0.0, 0.02, d)
                p[f"head.{b}.pos"] = rng.normal(0.0, 0.02, (n_tok, d))
                for layer in range(arch.depth):
                    pre = f"head.{b}.layer{layer}"
                    for ln in ("ln1", "ln2"):
                        p[f"{pre}.{ln}.g"] = np.ones(d)
                        p[f"{pre}.{ln}.b"] = np.zeros(d)
                    for k in ("q", "k", "v", "o"):
                        dense(pre + ".attn", d, d, "w" + k, "b" + k)
                    dense(pre + ".mlp", d, arch.mlp_hidden, "w1", "b1")
                    dense(pre + ".mlp", arch.mlp_hidden, d, "w2", "b2")
                p[f"head.{b}.ln.g"] = np.ones(d)
                p[f"head.{b}.ln.b"] = np.zeros(d)
                dense(f"head.{b}.out", d, arch.num_classes)
        elif arch.head == "mid_conv":
            conv("head.mid", 3, cf * arch.branches, cf)
            p["head.mid.ln.g"] = np.ones(cf)
            p["head.mid.ln.b"] = np.zeros(cf)
            dense("head.mid.out", cf, arch.num_classes)
        else:
            for b in arch.branch_names:
                p[f"head.{b}.ln.g"] = np.ones(cf)
                p[f"head.{b}.ln.b"] = np.zeros(cf)
                dense(f"head.{b}.out", cf, arch.num_classes)
        return cls(arch, p)

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad) for k, v in self.params.items()}

    def pa_weights(self, p: dict, s: int) -> tuple:
        wq, wk = p[f"pa{s}.wq"], p[f"pa{s}.wk"]
        if self.arch.share_pa_weights:
            return wq, wk, wq, wk
        return wq, wk, p[f"pa{s}.wq2"], p[f"pa{s}.wk2"]

    def pa_biases(self, p: dict, s: int) -> dict | None:
        if not self.arch.pa_bias:
            return None
        keys = ("q", "k") if self.arch.share_pa_weights else ("q", "k", "q2", "k2")
        out = {f"b{k}": p[f"pa{s}.b{k}"] for k in keys}
        if self.arch.share_pa_weights:
            out["bq2"], out["bk2"] = out["bq"], out["bk"]
        return out

    def pooled_features(self, cxr, mf) -> dict[str, np.ndarray]:
        """Pooled vectors entering the LayerNorms of the ``mid_conv`` / ``late_sum`` heads.

        Keys are the LayerNorm prefixes; values are ``(B, C)`` before normalization.
        """
        arch = self.arch
        if arch.head == "cross_vit":
            return {}
        trace: dict = {}
        p = self.tensors()
        self.forward(cxr, mf, p, trace)
        last = len(arch.channels) - 1
        maps = {b: trace["stages"][(b, last)] for b in arch.branch_names}
        if arch.head == "mid_conv":
            x = T.concat(list(maps.values()), axis=-1) if len(maps) > 1 else maps["cxr"]
            x = T.gelu(T.conv2d(x, p["head.mid.w"], p["head.mid.b"], 1))
            return {"head.mid.ln": x.data.mean(axis=(1, 2))}
        return {f"head.{b}.ln": m.data.mean(axis=(1, 2)) for b, m in maps.items()}

    def init_head_from_data(self, batches, eps: float = 1e-5) -> None:
        """Data-dependent init of the pooled-vector heads.

        Sets the LayerNorm gain and shift so that, over ``batches`` of
        ``(cxr, mf)`` arrays, every normalized pooled channel starts with zero
        mean and unit variance across samples.  Without this the pooled
        vectors share one dominant template and the class-dependent part is
        too small for the linear readout to pick up quickly.  A no-op for
        ``cross_vit``.
        """
        acc: dict[str, list] = {}
        for cxr, mf in batches:
            for k, v in self.pooled_features(cxr, mf).items():
                acc.setdefault(k, []).append(v)
        for k, vs in acc.items():
            v = np.concatenate(vs)
            xc = v - v.mean(axis=-1, keepdims=True)
            xh = xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
            g = 1.0 / (xh.std(axis=0) + eps)
            self.params[k + ".g"] = g
            self.params[k + ".b"] = -xh.mean(axis=0) * g

    def forward(self, cxr, mf, params: dict | None = None, trace: dict | None = None) -> Tensor:
        """Class scores ``(B, num_classes)`` for image batches ``(B, H, W, 3)``.

        ``mf`` is ignored by single-branch models.  When ``trace`` is a dict
        it receives ``"attention"`` (every attention matrix) and
        ``"stages"`` (``{(branch, stage): Tensor}`` as fed to the next stage).
        """
        arch = self.arch
        p = params if params is not None else self.tensors()
        inputs = {"cxr": cxr, "enh": mf}
        xs = {}
        for b in arch.branch_names:
            x = inputs[b] if isinstance(inputs[b], Tensor) else Tensor(inputs[b])
            _check_input(x, arch)
            xs[b] = x
        if arch.branches == 2 and xs["cxr"].shape != xs["enh"].shape:
            raise ShapeError(f"input shapes differ: {xs['cxr'].shape} vs {xs['enh'].shape}")
        att = trace.setdefault("attention", []) if trace is not None else None
        stages = trace.setdefault("stages", {}) if trace is not None else None
        xs = {b: stem_forward(x, p, b) for b, x in xs.items()}
        for i in range(len(arch.channels)):
            xs = {b: stage_forward(x, p, b, i) for b, x in xs.items()}
            if i in arch.fusion_scales:
                xs["cxr"], xs["enh"] = fuse_at_scale(xs["cxr"], xs["enh"], self.pa_weights(p, i),
                                                     arch.pool_target, self.pa_biases(p, i), att)
            if stages is not None:
                for b, x in xs.items():
                    stages[(b, i)] = x
        return HEAD_FUNCS[arch.head](xs, p, arch, att)

    __call__ = forward

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))
