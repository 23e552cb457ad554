import numpy as np
import pytest
from faudit.models import TinyCnnCbam
from faudit.synthwafer import (
    DatasetSpec,
    balanced_eval_subset,
    generate,
    split_of,
    stack_images,
)
from faudit.training import TrainConfig, train


@pytest.fixture(scope="session")
def cnn_checkpoint(tmp_path_factory):
    """Briefly trained small CNN checkpoint plus 20 balanced eval images."""
    spec = DatasetSpec(counts={"train": 30, "val": 10, "test": 10}, seed=5)
    samples = generate(spec)
    tr_x, tr_y = stack_images(split_of(samples, "train"))
    va_x, va_y = stack_images(split_of(samples, "val"))
    model = TinyCnnCbam(n_classes=5, image_size=32, channels=(4, 8), seed=0)
    train(
        model,
        tr_x,
        tr_y,
        va_x,
        va_y,
        TrainConfig(epochs=6, batch_size=16, lr=2e-3, patience=6, seed=1),
    )
    path = tmp_path_factory.mktemp("ckpt") / "cnn_cbam-s0.ckpt"
    model.save(path)
    eval_x, _ = stack_images(balanced_eval_subset(split_of(samples, "test"), 4, seed=9))
    return path, eval_x
