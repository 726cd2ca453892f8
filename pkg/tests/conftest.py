import numpy as np
import pytest
import torch

from gcdet.detector import RawPredictions


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


def make_raw(cls_logits, dfl_logits, strides, input_hw, reg_max):
    """RawPredictions from explicit per-scale tensors (any number of scales)."""
    return RawPredictions(
        cls_logits=tuple(cls_logits),
        dfl_logits=tuple(dfl_logits),
        strides=tuple(strides),
        input_hw=tuple(input_hw),
        reg_max=reg_max,
    )


def random_single_scale_raw(rng, grid=4, stride=8, num_classes=3, reg_max=8,
                            dtype=torch.float64, scale=2.0):
    """One-scale toy predictions with well-spread random logits."""
    cls = torch.tensor(
        rng.normal(0.0, scale, size=(1, num_classes, grid, grid)), dtype=dtype
    )
    dfl = torch.tensor(
        rng.normal(0.0, scale, size=(1, 4 * reg_max, grid, grid)), dtype=dtype
    )
    return make_raw([cls], [dfl], [stride], (grid * stride, grid * stride), reg_max)


def softmax_np(v):
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max())
    return e / e.sum()
