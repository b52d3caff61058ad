from __future__ import annotations

import numpy as np
import pytest
from boxpretrain.augment import (
    Photometric,
    ViewTransform,
    apply_to_boxes,
    apply_to_image,
    make_view,
    pad_to_stride,
    sample_transform,
)
from boxpretrain.config import AugConfig
from boxpretrain.geometry import BBox, box_inside
from boxpretrain.proposals import ProposalSet


def _image(height: int = 32, width: int = 48) -> np.ndarray:
    rng = np.random.default_rng(0)
    return rng.uniform(0.0, 1.0, size=(height, width, 3)).astype(np.float32)


def _proposals() -> ProposalSet:
    return ProposalSet(
        "img", 48, 32, [BBox(10.0, 8.0, 8.0, 6.0), BBox(40.0, 20.0, 10.0, 20.0)]
    )


def test_identity_view_changes_nothing() -> None:
    image = _image()
    view = make_view(image, _proposals(), ViewTransform.identity(48, 32))

    assert np.array_equal(view.image, image)
    assert view.proposals.boxes == _proposals().boxes


def test_horizontal_flip_mirrors_image_and_boxes() -> None:
    image = _image()
    t = ViewTransform.scaled(48, 32, 1.0, hflip=True)

    flipped = apply_to_image(image, t)
    boxes = apply_to_boxes(_proposals(), t).boxes

    assert np.array_equal(flipped, image[:, ::-1])
    assert boxes[0] == BBox(38.0, 8.0, 8.0, 6.0)
    assert boxes[1] == BBox(8.0, 20.0, 10.0, 20.0)


def test_resize_scales_boxes_and_keeps_order() -> None:
    t = ViewTransform.scaled(48, 32, 2.0)

    view = make_view(_image(), _proposals(), t)

    assert view.image.shape == (64, 96, 3)
    assert (view.proposals.width, view.proposals.height) == (96, 64)
    assert view.proposals.boxes == [
        BBox(20.0, 16.0, 16.0, 12.0),
        BBox(80.0, 40.0, 20.0, 40.0),
    ]
    for box in view.proposals.boxes:
        assert box_inside(box, 96, 64)


def test_sampled_short_side_stays_in_range() -> None:
    cfg = AugConfig(short_side_range=(40, 50), hflip_p=1.0)
    rng = np.random.default_rng(3)

    for _ in range(20):
        t = sample_transform(rng, cfg, (48, 32))
        assert 40 <= min(t.output_size) <= 50
        assert t.hflip


def test_hflip_probability_zero_never_flips() -> None:
    cfg = AugConfig(hflip_p=0.0)
    rng = np.random.default_rng(4)

    assert not any(sample_transform(rng, cfg, (64, 64)).hflip for _ in range(20))


def test_photometric_output_stays_in_unit_range() -> None:
    t = ViewTransform(
        (48, 32),
        (48, 32),
        1.0,
        photometric=Photometric(0.4, 1.5, (1.2, 0.8, 1.0)),
    )

    out = apply_to_image(_image(), t)

    assert out.dtype == np.float32
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert not np.array_equal(out, _image())


def test_pad_to_stride_adds_zeros_bottom_right() -> None:
    image = _image(50, 70)

    padded = pad_to_stride(image, 16)

    assert padded.shape == (64, 80, 3)
    assert np.array_equal(padded[:50, :70], image)
    assert not padded[50:].any() and not padded[:, 70:].any()
    assert pad_to_stride(padded, 16) is padded


@pytest.mark.parametrize("scale", [0.5, 1.25])
def test_view_keeps_every_proposal(scale: float) -> None:
    t = ViewTransform.scaled(48, 32, scale, hflip=True)

    view = make_view(_image(), _proposals(), t)

    assert len(view.proposals) == len(_proposals())
