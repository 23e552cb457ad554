"""Saliency explainers producing normalized [0,1] heatmaps.

Covered: gradient-weighted class activation maps on a named conv (or token)
layer, attention rollout with half-identity mixing, the raw final-layer CLS
attention row, randomized-mask probing of a black-box predictor, and a seeded
random baseline.  Every explainer is a pure function of (model/predictor,
image, seed), so repeated calls are byte-identical.

A heatmap whose raw dynamic range is below 1e-12 is *degenerate*: it is
returned flagged with all-zero values rather than raised, and downstream
metrics fall back to the documented tie-break behaviour.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .imageops import bilinear_resize, nearest_resize
from .models import InstrumentedForward, _ModelBase

DEGENERATE_EPS = 1e-12

GRAD_CAM = "grad_cam"
ATTENTION_ROLLOUT = "attention_rollout"
CLS_ATTENTION = "cls_attention"
RISE = "rise"
RANDOM = "random"

EXPLAINER_NAMES = (GRAD_CAM, ATTENTION_ROLLOUT, CLS_ATTENTION, RISE, RANDOM)


class ExplainerError(RuntimeError):
    pass


@dataclass(frozen=True)
class RiseConfig:
    """Sampling parameters for randomized-mask probing."""

    n_masks: int = 4000
    grid: int = 8
    p: float = 0.5
    seed: int = 0
    offsets: bool = True  # uniform sub-cell crop offset per mask

    def validate(self, h: int, w: int) -> None:
        if self.n_masks < 1:
            raise ExplainerError(f"n_masks must be >= 1, got {self.n_masks}")
        if not 1 <= self.grid <= min(h, w):
            raise ExplainerError(f"grid {self.grid} outside [1, {min(h, w)}]")
        if not 0.0 < self.p < 1.0:
            raise ExplainerError(f"keep probability must be in (0,1), got {self.p}")


@dataclass
class Heatmap:
    values: np.ndarray  # [h, w], min-max normalized to [0,1]; zeros if degenerate
    explainer: str
    target_class: int
    sample_id: str = ""
    raw_min: float = 0.0
    raw_max: float = 0.0
    degenerate: bool = False


def _finalize(raw: np.ndarray, explainer: str, target_class: int, sample_id: str) -> Heatmap:
    raw = np.asarray(raw, dtype=np.float64)
    lo = float(raw.min())
    hi = float(raw.max())
    if hi - lo < DEGENERATE_EPS:
        return Heatmap(
            values=np.zeros_like(raw),
            explainer=explainer,
            target_class=target_class,
            sample_id=sample_id,
            raw_min=lo,
            raw_max=hi,
            degenerate=True,
        )
    return Heatmap(
        values=(raw - lo) / (hi - lo),
        explainer=explainer,
        target_class=target_class,
        sample_id=sample_id,
        raw_min=lo,
        raw_max=hi,
        degenerate=False,
    )


def _single_image(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ExplainerError(f"expected one [c,h,w] image, got shape {arr.shape}")
    return arr


def _predicted_class(fwd: InstrumentedForward) -> int:
    return int(fwd.probs()[0].argmax())


# -- gradient-weighted class activation -------------------------------------


def grad_cam(
    model: _ModelBase,
    image,
    target_class: int | None = None,
    layer: str | None = None,
    sample_id: str = "",
) -> Heatmap:
    """Channel-gradient weighted activation map at a named layer.

    The backward pass starts from the *pre-softmax* logit of the target
    class.  Token activations ([tokens, dim], CLS first) are reshaped to a
    dim-channels x grid feature map; conv activations are used as-is.  The
    combined map is ReLU-ed, bilinearly upsampled to the input size, and
    min-max normalized.
    """
    arr = _single_image(image)
    h, w = arr.shape[-2:]
    layer = layer or model.GRAD_CAM_LAYER
    fwd = model.forward(arr, capture=(layer,), record_attn=False)
    if target_class is None:
        target_class = _predicted_class(fwd)
    if not 0 <= target_class < fwd.logits.shape[-1]:
        raise ExplainerError(
            f"class {target_class} outside [0, {fwd.logits.shape[-1]})"
        )
    fwd.backward_on_logit(target_class)
    act = fwd.activations[layer].data
    grad = fwd.grad(layer)

    if act.ndim == 4:  # [1, c, gh, gw] conv feature map
        amap = act[0]
        gmap = grad[0]
    elif act.ndim == 3:  # [1, tokens, dim] -> channels x grid, CLS dropped
        tokens = act[0, 1:, :]
        gtokens = grad[0, 1:, :]
        n_pat = tokens.shape[0]
        side = int(round(n_pat**0.5))
        if side * side != n_pat:
            raise ExplainerError(f"token count {n_pat} is not a square grid")
        amap = tokens.T.reshape(-1, side, side)
        gmap = gtokens.T.reshape(-1, side, side)
    else:
        raise ExplainerError(f"cannot build a map from activation shape {act.shape}")

    alpha = gmap.mean(axis=(1, 2))  # spatial mean of the gradients per channel
    cam = np.maximum((alpha[:, None, None] * amap).sum(axis=0), 0.0)
    up = bilinear_resize(cam, h, w)
    return _finalize(up, GRAD_CAM, target_class, sample_id)


# -- attention rollout --------------------------------------------------------


def rollout_matrices(attn: np.ndarray) -> np.ndarray:
    """Cumulative rollout products R^(1..L) for a [layers,heads,t,t] stack.

    Each layer's head-averaged matrix is mixed half-and-half with the
    identity (the residual path) and left-multiplied onto the running
    product.  Rows of every R^(l) stay stochastic because each mixed matrix
    is itself row-stochastic.
    """
    if attn.ndim != 4 or attn.shape[-1] != attn.shape[-2]:
        raise ExplainerError(f"expected [layers,heads,t,t], got {attn.shape}")
    layers, _, t, _ = attn.shape
    eye = np.eye(t)
    out = np.empty((layers, t, t))
    running = eye
    for i in range(layers):
        mixed = 0.5 * attn[i].mean(axis=0) + 0.5 * eye
        running = mixed @ running
        out[i] = running
    return out


def _cls_row_to_map(row: np.ndarray, h: int, w: int) -> np.ndarray:
    n_pat = row.shape[0]
    side = int(round(n_pat**0.5))
    if side * side != n_pat:
        raise ExplainerError(f"patch count {n_pat} is not a square grid")
    return nearest_resize(row.reshape(side, side), h, w)


def attention_rollout(model: _ModelBase, image, sample_id: str = "") -> Heatmap:
    """CLS row of the full rollout product, mapped onto the patch grid."""
    arr = _single_image(image)
    h, w = arr.shape[-2:]
    with T.no_grad():
        fwd = model.forward(arr, record_attn=True)
    if fwd.attentions is None:
        raise ExplainerError(f"{model.family} records no attention")
    target = _predicted_class(fwd)
    final = rollout_matrices(fwd.attentions[0])[-1]
    raw = _cls_row_to_map(final[0, 1:], h, w)
    return _finalize(raw, ATTENTION_ROLLOUT, target, sample_id)


def cls_attention_last(model: _ModelBase, image, sample_id: str = "") -> Heatmap:
    """Head-averaged CLS->patch row of the last layer, no residual mixing."""
    arr = _single_image(image)
    h, w = arr.shape[-2:]
    with T.no_grad():
        fwd = model.forward(arr, record_attn=True)
    if fwd.attentions is None:
        raise ExplainerError(f"{model.family} records no attention")
    target = _predicted_class(fwd)
    last = fwd.attentions[0][-1].mean(axis=0)
    raw = _cls_row_to_map(last[0, 1:], h, w)
    return _finalize(raw, CLS_ATTENTION, target, sample_id)


# -- randomized-mask probing --------------------------------------------------


def rise_masks(
    h: int,
    w: int,
    n_masks: int,
    grid: int,
    p: float,
    rng: np.random.Generator,
    offsets: bool = True,
) -> np.ndarray:
    """Soft occlusion masks: Bernoulli(p) cells bilinearly upsampled with a
    uniform random sub-cell crop offset per mask."""
    cell_h = -(-h // grid)
    cell_w = -(-w // grid)
    up_h = (grid + 1) * cell_h
    up_w = (grid + 1) * cell_w
    cells = (rng.random((n_masks, grid, grid)) < p).astype(np.float64)
    if offsets:
        oy = rng.integers(0, cell_h, size=n_masks)
        ox = rng.integers(0, cell_w, size=n_masks)
    else:
        oy = np.zeros(n_masks, dtype=np.int64)
        ox = np.zeros(n_masks, dtype=np.int64)
    masks = np.empty((n_masks, h, w))
    for i in range(n_masks):
        big = bilinear_resize(cells[i], up_h, up_w)
        masks[i] = big[oy[i] : oy[i] + h, ox[i] : ox[i] + w]
    return masks


def rise(
    predict,
    image,
    target_class: int | None = None,
    cfg: RiseConfig | None = None,
    batch: int = 256,
    sample_id: str = "",
) -> Heatmap:
    """Probability-weighted average of random occlusion masks, divided by the
    mask count.  Only the score *ranking* feeds the downstream metrics, so no
    further normalisation by the keep probability is applied before the usual
    min-max step."""
    cfg = cfg or RiseConfig()
    arr = _single_image(image)
    h, w = arr.shape[-2:]
    cfg.validate(h, w)
    if target_class is None:
        target_class = int(np.asarray(predict(arr)).argmax())
    rng = np.random.default_rng(cfg.seed)
    masks = rise_masks(h, w, cfg.n_masks, cfg.grid, cfg.p, rng, cfg.offsets)

    weights = np.empty(cfg.n_masks)
    batch_fn = getattr(predict, "predict_batch", None)
    for start in range(0, cfg.n_masks, batch):
        chunk = masks[start : start + batch]
        masked = arr[None] * chunk[:, None]
        try:
            if batch_fn is not None:
                probs = np.asarray(batch_fn(masked))
            else:
                probs = np.stack([np.asarray(predict(m)) for m in masked])
        except ExplainerError:
            raise
        except Exception as exc:
            idx = _first_failing_mask(predict, masked, start)
            raise ExplainerError(f"predict failed on mask {idx}: {exc}") from exc
        weights[start : start + batch] = probs[:, target_class]

    raw = (weights[:, None, None] * masks).sum(axis=0) / cfg.n_masks
    return _finalize(raw, RISE, target_class, sample_id)


def _first_failing_mask(predict, masked: np.ndarray, start: int) -> int:
    """Pin a batch failure to the lowest failing mask index."""
    for j, m in enumerate(masked):
        try:
            predict(m)
        except Exception:
            return start + j
    return start


# -- random baseline ----------------------------------------------------------


def random_baseline(image, seed: int = 0, sample_id: str = "") -> Heatmap:
    """Uniform random but tie-free: a permutation of pixel ranks in [0,1]."""
    arr = _single_image(image)
    h, w = arr.shape[-2:]
    rng = np.random.default_rng(seed)
    perm = rng.permutation(h * w).astype(np.float64)
    raw = (perm / (h * w - 1)).reshape(h, w)
    return _finalize(raw, RANDOM, -1, sample_id)


# -- persistence ----------------------------------------------------------------


def save_heatmap(base_path, hm: Heatmap, write_image: bool = False) -> None:
    """base.f64 (raw little-endian values) + base.json sidecar [+ base.pgm]."""
    base = Path(base_path)
    base.parent.mkdir(parents=True, exist_ok=True)
    base.with_suffix(".f64").write_bytes(
        np.ascontiguousarray(hm.values, dtype="<f8").tobytes()
    )
    sidecar = {
        "explainer": hm.explainer,
        "target_class": hm.target_class,
        "sample_id": hm.sample_id,
        "raw_min": hm.raw_min,
        "raw_max": hm.raw_max,
        "degenerate": hm.degenerate,
        "shape": list(hm.values.shape),
        "dtype": "<f8",
    }
    base.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    if write_image:
        write_pgm(base.with_suffix(".pgm"), hm.values)


def load_heatmap(base_path) -> Heatmap:
    base = Path(base_path)
    sidecar = json.loads(base.with_suffix(".json").read_text())
    values = np.frombuffer(base.with_suffix(".f64").read_bytes(), dtype="<f8").reshape(
        sidecar["shape"]
    )
    return Heatmap(
        values=values.copy(),
        explainer=sidecar["explainer"],
        target_class=sidecar["target_class"],
        sample_id=sidecar["sample_id"],
        raw_min=sidecar["raw_min"],
        raw_max=sidecar["raw_max"],
        degenerate=sidecar["degenerate"],
    )


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit binary portable graymap of a [0,1] map."""
    arr = np.clip(np.asarray(values), 0.0, 1.0)
    bytes8 = np.round(arr * 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(bytes8.tobytes())
