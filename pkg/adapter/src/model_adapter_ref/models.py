"""Built-in predictors and the ``--model <spec>`` resolver.

Spec grammar (colon-separated, first token selects the kind)::

    constant:<k>                 uniform distribution over k classes
    linear:<size>[:seed=<s>]     planted-weight two-class scorer on size x size
    checkpoint:<path>            frozen faudit model restored from a checkpoint
    pyfunc:<module>:<attr>       any importable callable image -> logits/probs

``pyfunc`` needs the class count from ``--n-classes`` unless the callable
carries an ``n_classes`` attribute.  Everything else knows its own.
"""

from __future__ import annotations

import importlib

import numpy as np


class ModelSpecError(ValueError):
    """The --model string does not describe a usable predictor."""


def constant_model(n_classes: int):
    """Every image maps to the uniform distribution."""
    probs = np.full(n_classes, 1.0 / n_classes)

    def predict(image) -> np.ndarray:
        return probs.copy()

    predict.n_classes = n_classes
    return predict


def _bilinear_upsample(lattice: np.ndarray, size: int) -> np.ndarray:
    """Sample a small grid at size x size pixel centers, clamped at the rim."""
    g = lattice.shape[0]
    pos = (np.arange(size) + 0.5) / size * g - 0.5
    lo = np.clip(np.floor(pos).astype(int), 0, g - 1)
    hi = np.clip(lo + 1, 0, g - 1)
    frac = np.clip(pos - lo, 0.0, 1.0)
    rows = (
        lattice[lo][:, lo] * np.outer(1 - frac, 1 - frac)
        + lattice[lo][:, hi] * np.outer(1 - frac, frac)
        + lattice[hi][:, lo] * np.outer(frac, 1 - frac)
        + lattice[hi][:, hi] * np.outer(frac, frac)
    )
    return rows


def linear_scorer(size: int = 16, seed: int = 0, plant_grid: int = 4):
    """Two-class scorer whose class-0 probability is linear in the image.

    The weight field is a mean-zero random lattice bilinearly upsampled to
    the image size, scaled so that Bernoulli(1/2) occlusion masks produce a
    response spread well clear of a Monte-Carlo sampler's noise floor while
    the clamp around [0, 1] rarely binds.  The planted field is exposed as
    ``predict.weights`` so a harness can score how well an attribution
    method recovers it.
    """
    if size % 8:
        raise ModelSpecError(f"linear scorer size must be a multiple of 8, got {size}")
    rng = np.random.default_rng(seed)
    lattice = rng.random((plant_grid, plant_grid)) * 2.0 - 1.0
    lattice -= lattice.mean()
    w = _bilinear_upsample(lattice, size)
    cell = size // 8
    cell_sums = w.reshape(8, cell, 8, cell).sum(axis=(1, 3))
    raw_sigma = float(np.sqrt((cell_sums**2).sum() * 0.25))
    alpha = 0.12 / raw_sigma
    offset = 0.15

    def predict(image) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        plane = img[0] if img.ndim == 3 else img
        if plane.shape != (size, size):
            raise ValueError(f"expected a {size}x{size} image, got {plane.shape}")
        f = min(max(alpha * float((w * plane).sum()) + offset, 0.0), 1.0)
        return np.array([f, 1.0 - f])

    predict.n_classes = 2
    predict.weights = w
    return predict


def checkpoint_model(path: str):
    """Frozen faudit reference model restored from a checkpoint file."""
    from faudit.models import Predictor, load_model

    try:
        model = load_model(path)
    except Exception as exc:
        raise ModelSpecError(f"cannot load checkpoint {path!r}: {exc}") from exc
    predictor = Predictor(model)

    def predict(image) -> np.ndarray:
        return predictor(image)

    predict.n_classes = model.n_classes
    return predict


def pyfunc_model(module: str, attr: str):
    try:
        mod = importlib.import_module(module)
    except ImportError as exc:
        raise ModelSpecError(f"cannot import module {module!r}: {exc}") from exc
    try:
        fn = getattr(mod, attr)
    except AttributeError as exc:
        raise ModelSpecError(f"module {module!r} has no attribute {attr!r}") from exc
    if not callable(fn):
        raise ModelSpecError(f"{module}:{attr} is not callable")
    return fn


def _int(text: str, what: str) -> int:
    try:
        return int(text)
    except ValueError as exc:
        raise ModelSpecError(f"{what} must be an integer, got {text!r}") from exc


def resolve_model(spec: str, n_classes: int | None = None):
    """Turn a --model string into (predict callable, class count)."""
    kind, _, rest = spec.partition(":")
    if kind == "constant":
        k = _int(rest, "constant class count")
        if k < 2:
            raise ModelSpecError(f"constant class count must be >= 2, got {k}")
        return constant_model(k), k
    if kind == "linear":
        size_part, _, seed_part = rest.partition(":")
        size = _int(size_part or "16", "linear size")
        seed = 0
        if seed_part:
            key, _, value = seed_part.partition("=")
            if key != "seed":
                raise ModelSpecError(f"unknown linear option {seed_part!r}")
            seed = _int(value, "linear seed")
        predict = linear_scorer(size, seed)
        return predict, 2
    if kind == "checkpoint":
        if not rest:
            raise ModelSpecError("checkpoint spec needs a path: checkpoint:<path>")
        predict = checkpoint_model(rest)
        return predict, predict.n_classes
    if kind == "pyfunc":
        module, sep, attr = rest.partition(":")
        if not sep or not module or not attr:
            raise ModelSpecError("pyfunc spec must be pyfunc:<module>:<attr>")
        fn = pyfunc_model(module, attr)
        k = n_classes if n_classes is not None else getattr(fn, "n_classes", None)
        if not isinstance(k, int) or k < 2:
            raise ModelSpecError(
                "pyfunc models need --n-classes (or an n_classes attribute on the callable)"
            )
        return fn, k
    raise ModelSpecError(
        f"unknown model kind {kind!r}; expected constant, linear, checkpoint, or pyfunc"
    )
