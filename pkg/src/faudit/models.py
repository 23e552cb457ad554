"""The two reference classifiers, instrumented for explanation probes.

Both are deliberately tiny float64 models built on the tape ops:

* ``TinyCnnCbam`` — two conv blocks (optional residual skip on block 2) with a
  channel+spatial attention module between the last conv features and the
  pooled head.  No batch normalisation — keeps backward rules auditable.
* ``TinyViT`` — patch embedding, learnable CLS + positional embeddings, plain
  pre-softmax-scaled attention blocks (no layernorm) and an MLP head on the
  final CLS token.  Every attention matrix is recordable.

``forward`` returns an :class:`InstrumentedForward` carrying logits, any
requested named activations (kept on the tape so their gradients can be read
after a backward pass), and the per-layer attention stack for the ViT.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .tensor import Tensor


class ModelError(RuntimeError):
    pass


@dataclass
class InstrumentedForward:
    logits: Tensor
    activations: dict[str, Tensor] = field(default_factory=dict)
    attentions: np.ndarray | None = None  # [n, layers, heads, tokens, tokens]

    def probs(self) -> np.ndarray:
        z = self.logits.data
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def backward_on_logit(self, class_index: int, sample: int = 0) -> None:
        """Backprop from one pre-softmax logit (Grad-CAM style target)."""
        T.backward(self.logits[sample, class_index])

    def grad(self, name: str) -> np.ndarray:
        act = self.activations[name]
        if act.grad is None:
            raise ModelError(f"no gradient captured at {name!r}; run backward first")
        return act.grad


def _bias(t: Tensor, b: Tensor) -> Tensor:
    """Add a channel/feature bias via an explicit broadcast."""
    shape = (1,) * (t.ndim - 1) + (b.size,)
    return T.add(t, T.broadcast_to(T.reshape(b, shape), t.shape))


def _channel_bias(t: Tensor, b: Tensor) -> Tensor:
    """Bias over axis 1 of [n,c,h,w]."""
    return T.add(t, T.broadcast_to(T.reshape(b, (1, b.size, 1, 1)), t.shape))


def _scale_channels(t: Tensor, s: Tensor) -> Tensor:
    """Multiply [n,c,h,w] by per-(n,c) scales."""
    n, c = s.shape
    return T.mul(t, T.broadcast_to(T.reshape(s, (n, c, 1, 1)), t.shape))


def _as_batch(x) -> tuple[Tensor, bool]:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim == 3:
        return T.reshape(t, (1,) + t.shape), True
    if t.ndim == 4:
        return t, False
    raise ModelError(f"expected [c,h,w] or [n,c,h,w], got {t.shape}")


class _ModelBase:
    family = "base"

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def _add_param(self, name: str, arr: np.ndarray) -> Tensor:
        p = Tensor(arr, requires_grad=True)
        self.params[name] = p
        return p

    def capture_names(self) -> tuple[str, ...]:
        raise NotImplementedError

    def arch(self) -> dict:
        raise NotImplementedError

    def _check_capture(self, capture) -> set[str]:
        wanted = set(capture)
        unknown = wanted - set(self.capture_names())
        if unknown:
            raise ModelError(
                f"unknown capture layer(s) {sorted(unknown)}; "
                f"available: {sorted(self.capture_names())}"
            )
        return wanted

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for name, p in self.params.items():
            out[name] = np.zeros_like(p.data) if p.grad is None else p.grad
        return out

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ModelError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for k, p in self.params.items():
            if state[k].shape != p.data.shape:
                raise ModelError(
                    f"shape mismatch for {k}: {state[k].shape} vs {p.data.shape}"
                )
            p.data = np.ascontiguousarray(state[k], dtype=np.float64)

    def save(self, path) -> None:
        save_checkpoint(path, self.state_arrays(), meta=self.arch())


class TinyCnnCbam(_ModelBase):
    """Two conv blocks + channel/spatial attention + GAP linear head."""

    family = "cnn_cbam"
    GRAD_CAM_LAYER = "cbam_out"

    def __init__(
        self,
        n_classes: int = 5,
        image_size: int = 32,
        in_channels: int = 1,
        channels: tuple[int, int] = (16, 32),
        reduction: int = 4,
        residual_skip: bool = True,
        spatial_kernel: int = 7,
        seed: int = 0,
    ):
        super().__init__()
        if image_size % 4:
            raise ModelError("image size must be divisible by 4 (two 2x2 pools)")
        self.n_classes = n_classes
        self.image_size = image_size
        self.in_channels = in_channels
        self.channels = tuple(channels)
        self.reduction = reduction
        self.residual_skip = bool(residual_skip)
        self.spatial_kernel = spatial_kernel
        self.seed = seed
        c1, c2 = self.channels
        hidden = max(1, c2 // reduction)
        rng = np.random.default_rng(seed)

        def w(shape, fan_in):
            return rng.normal(size=shape) / math.sqrt(fan_in)

        self._add_param("conv1.k", w((c1, in_channels, 3, 3), in_channels * 9))
        self._add_param("conv1.b", np.zeros(c1))
        self._add_param("conv2.k", w((c2, c1, 3, 3), c1 * 9))
        self._add_param("conv2.b", np.zeros(c2))
        if self.residual_skip and c1 != c2:
            self._add_param("skip.k", w((c2, c1, 1, 1), c1))
        self._add_param("cbam.mlp1.w", w((c2, hidden), c2))
        self._add_param("cbam.mlp1.b", np.zeros(hidden))
        self._add_param("cbam.mlp2.w", w((hidden, c2), hidden))
        self._add_param("cbam.mlp2.b", np.zeros(c2))
        self._add_param("cbam.spatial.k", w((1, 2, spatial_kernel, spatial_kernel), 2 * spatial_kernel**2))
        self._add_param("cbam.spatial.b", np.zeros(1))
        self._add_param("head.w", w((c2, n_classes), c2))
        self._add_param("head.b", np.zeros(n_classes))

    def capture_names(self) -> tuple[str, ...]:
        return ("conv1_out", "pool1_out", "block2_out", "channel_attn", "spatial_attn", "cbam_out")

    def arch(self) -> dict:
        return {
            "family": self.family,
            "n_classes": self.n_classes,
            "image_size": self.image_size,
            "in_channels": self.in_channels,
            "channels": list(self.channels),
            "reduction": self.reduction,
            "residual_skip": self.residual_skip,
            "spatial_kernel": self.spatial_kernel,
            "seed": self.seed,
        }

    def _mlp(self, z: Tensor) -> Tensor:
        h = T.relu(_bias(z @ self.params["cbam.mlp1.w"], self.params["cbam.mlp1.b"]))
        return _bias(h @ self.params["cbam.mlp2.w"], self.params["cbam.mlp2.b"])

    def forward(self, x, capture=(), record_attn: bool = False) -> InstrumentedForward:
        wanted = self._check_capture(capture)
        xb, _ = _as_batch(x)
        acts: dict[str, Tensor] = {}

        def keep(name: str, t: Tensor) -> Tensor:
            if name in wanted:
                acts[name] = t.retain_grad()
            return t

        c1 = keep(
            "conv1_out",
            T.relu(_channel_bias(T.conv2d(xb, self.params["conv1.k"], 1, 1), self.params["conv1.b"])),
        )
        p1 = keep("pool1_out", T.pool2d(c1, "max", 2))

        h2 = T.relu(_channel_bias(T.conv2d(p1, self.params["conv2.k"], 1, 1), self.params["conv2.b"]))
        if self.residual_skip:
            skip = (
                T.conv2d(p1, self.params["skip.k"], 1, 0)
                if "skip.k" in self.params
                else p1
            )
            b2 = T.add(h2, skip)
        else:
            b2 = h2
        b2 = keep("block2_out", b2)
        p2 = T.pool2d(b2, "max", 2)

        # channel attention: shared MLP over global avg- and max-pooled features
        ga = T.pool2d(p2, "global_avg")
        gm = T.pool2d(p2, "global_max")
        mc = T.sigmoid(T.add(self._mlp(ga), self._mlp(gm)))
        keep("channel_attn", mc)
        f1 = _scale_channels(p2, mc)

        # spatial attention: sigmoid(conv7x7 over [channel-avg; channel-max])
        ca = T.mean(f1, axis=1, keepdims=True)
        cm = T.max_(f1, axis=1, keepdims=True)
        ms = T.sigmoid(
            _channel_bias(
                T.conv2d(T.concat([ca, cm], axis=1), self.params["cbam.spatial.k"], 1, self.spatial_kernel // 2),
                self.params["cbam.spatial.b"],
            )
        )
        keep("spatial_attn", ms)
        f2 = keep("cbam_out", T.mul(f1, T.broadcast_to(ms, f1.shape)))

        gap = T.pool2d(f2, "global_avg")
        # logits stay [n, k] even for a single [c,h,w] input; callers index row 0
        logits = _bias(gap @ self.params["head.w"], self.params["head.b"])
        return InstrumentedForward(logits=logits, activations=acts, attentions=None)


class TinyViT(_ModelBase):
    """Patch-embedding transformer with recordable attention, no layernorm."""

    family = "vit"
    GRAD_CAM_LAYER = "block3_attn_out"

    def __init__(
        self,
        n_classes: int = 5,
        image_size: int = 32,
        in_channels: int = 1,
        patch: int = 4,
        dim: int = 64,
        depth: int = 4,
        heads: int = 2,
        mlp_dim: int = 128,
        seed: int = 0,
    ):
        super().__init__()
        if image_size % patch:
            raise ModelError("image size must be divisible by the patch size")
        if dim % heads:
            raise ModelError("dim must be divisible by heads")
        self.n_classes = n_classes
        self.image_size = image_size
        self.in_channels = in_channels
        self.patch = patch
        self.dim = dim
        self.depth = depth
        self.heads = heads
        self.mlp_dim = mlp_dim
        self.seed = seed
        self.grid = image_size // patch
        self.n_patches = self.grid * self.grid
        self.tokens = self.n_patches + 1
        rng = np.random.default_rng(seed)
        pdim = in_channels * patch * patch

        def w(shape, fan_in):
            return rng.normal(size=shape) / math.sqrt(fan_in)

        self._add_param("patch.w", w((pdim, dim), pdim))
        self._add_param("patch.b", np.zeros(dim))
        self._add_param("cls", np.zeros((1, dim)))
        self._add_param("pos", rng.normal(size=(self.tokens, dim)) * 0.02)
        for i in range(depth):
            for name in ("wq", "wk", "wv", "wo"):
                self._add_param(f"block{i}.attn.{name}", w((dim, dim), dim))
                self._add_param(f"block{i}.attn.b{name[1]}", np.zeros(dim))
            self._add_param(f"block{i}.mlp.w1", w((dim, mlp_dim), dim))
            self._add_param(f"block{i}.mlp.b1", np.zeros(mlp_dim))
            self._add_param(f"block{i}.mlp.w2", w((mlp_dim, dim), mlp_dim))
            self._add_param(f"block{i}.mlp.b2", np.zeros(dim))
        self._add_param("head.w", w((dim, n_classes), dim))
        self._add_param("head.b", np.zeros(n_classes))

    def capture_names(self) -> tuple[str, ...]:
        names = ["tokens_in"]
        for i in range(self.depth):
            names.append(f"block{i}_attn_out")
            names.append(f"block{i}_out")
        names.append("cls_final")
        return tuple(names)

    def arch(self) -> dict:
        return {
            "family": self.family,
            "n_classes": self.n_classes,
            "image_size": self.image_size,
            "in_channels": self.in_channels,
            "patch": self.patch,
            "dim": self.dim,
            "depth": self.depth,
            "heads": self.heads,
            "mlp_dim": self.mlp_dim,
            "seed": self.seed,
        }

    def _patchify(self, xb: Tensor) -> Tensor:
        n = xb.shape[0]
        g, p, c = self.grid, self.patch, self.in_channels
        t = T.reshape(xb, (n, c, g, p, g, p))
        t = T.transpose(t, (0, 2, 4, 1, 3, 5))
        return T.reshape(t, (n, g * g, c * p * p))

    def forward(self, x, capture=(), record_attn: bool = True) -> InstrumentedForward:
        wanted = self._check_capture(capture)
        xb, _ = _as_batch(x)
        if xb.shape[2] != self.image_size or xb.shape[3] != self.image_size:
            raise ModelError(f"expected {self.image_size}x{self.image_size} input, got {xb.shape}")
        n = xb.shape[0]
        acts: dict[str, Tensor] = {}
        attn_layers: list[np.ndarray] = []

        def keep(name: str, t: Tensor) -> Tensor:
            if name in wanted:
                acts[name] = t.retain_grad()
            return t

        tok = _bias(self._patchify(xb) @ self.params["patch.w"], self.params["patch.b"])
        cls = T.broadcast_to(T.reshape(self.params["cls"], (1, 1, self.dim)), (n, 1, self.dim))
        seq = T.concat([cls, tok], axis=1)
        pos = T.broadcast_to(
            T.reshape(self.params["pos"], (1, self.tokens, self.dim)), (n, self.tokens, self.dim)
        )
        h = keep("tokens_in", T.add(seq, pos))

        dk = self.dim // self.heads
        scale = 1.0 / math.sqrt(dk)
        for i in range(self.depth):
            pz = self.params

            def split_heads(t: Tensor) -> Tensor:
                t = T.reshape(t, (n, self.tokens, self.heads, dk))
                return T.transpose(t, (0, 2, 1, 3))

            q = split_heads(_bias(h @ pz[f"block{i}.attn.wq"], pz[f"block{i}.attn.bq"]))
            k = split_heads(_bias(h @ pz[f"block{i}.attn.wk"], pz[f"block{i}.attn.bk"]))
            v = split_heads(_bias(h @ pz[f"block{i}.attn.wv"], pz[f"block{i}.attn.bv"]))
            scores = T.mul(q @ T.transpose(k, (0, 1, 3, 2)), scale)
            attn = T.softmax(scores, axis=-1)
            if record_attn:
                attn_layers.append(attn.data.copy())
            ctx = T.reshape(T.transpose(attn @ v, (0, 2, 1, 3)), (n, self.tokens, self.dim))
            out = _bias(ctx @ pz[f"block{i}.attn.wo"], pz[f"block{i}.attn.bo"])
            h = keep(f"block{i}_attn_out", T.add(h, out))

            m = T.relu(_bias(h @ pz[f"block{i}.mlp.w1"], pz[f"block{i}.mlp.b1"]))
            m = _bias(m @ pz[f"block{i}.mlp.w2"], pz[f"block{i}.mlp.b2"])
            h = keep(f"block{i}_out", T.add(h, m))

        cls_final = keep("cls_final", h[:, 0, :])
        logits = _bias(cls_final @ self.params["head.w"], self.params["head.b"])

        attentions = None
        if record_attn:
            # [layers, n, heads, t, t] -> [n, layers, heads, t, t]
            attentions = np.stack(attn_layers).transpose(1, 0, 2, 3, 4)
        return InstrumentedForward(logits=logits, activations=acts, attentions=attentions)


FAMILIES = {TinyCnnCbam.family: TinyCnnCbam, TinyViT.family: TinyViT}


def build_model(arch: dict) -> _ModelBase:
    spec = dict(arch)
    family = spec.pop("family", None)
    cls = FAMILIES.get(family)
    if cls is None:
        raise ModelError(f"unknown model family {family!r}")
    if "channels" in spec:
        spec["channels"] = tuple(spec["channels"])
    return cls(**spec)


def load_model(path) -> _ModelBase:
    state, meta = load_checkpoint(path)
    if not meta:
        raise ModelError(f"checkpoint {path} carries no architecture descriptor")
    model = build_model(meta)
    model.load_state_arrays(state)
    return model


def predict_proba(model: _ModelBase, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Softmax probabilities for [k,c,h,w] (or a single [c,h,w]) input."""
    arr = np.asarray(images, dtype=np.float64)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    outs = []
    with T.no_grad():
        for i in range(0, arr.shape[0], batch_size):
            fwd = model.forward(Tensor(arr[i : i + batch_size]), record_attn=False)
            outs.append(fwd.probs())
    probs = np.concatenate(outs, axis=0)
    return probs[0] if single else probs


class Predictor:
    """Callable image->probs with an explicit batched entry point."""

    def __init__(self, model: _ModelBase, batch_size: int = 256):
        self.model = model
        self.batch_size = batch_size
        self.n_classes = model.n_classes

    def __call__(self, image: np.ndarray) -> np.ndarray:
        return predict_proba(self.model, image, self.batch_size)

    def predict_batch(self, images: np.ndarray) -> np.ndarray:
        return predict_proba(self.model, images, self.batch_size)
