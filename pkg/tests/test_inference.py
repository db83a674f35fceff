"""Test-time augmentation, thresholds, and run-length encoding."""

import numpy as np
import pytest

from ftuseg.data import Domain, Organ
from ftuseg.inference import (
    ThresholdTable,
    rle_decode,
    rle_encode,
    threshold_mask,
    tta_predict,
)
from ftuseg.model import EncoderConfig, SegModel
from ftuseg.tensor import Tensor, sigmoid_array


class ConstantModel:
    """Stub returning the same logit map regardless of input."""

    def __init__(self, logit):
        self.logit = logit

    def forward(self, image, aux_stages=()):
        h, w = image.shape[-2], image.shape[-1]
        return Tensor(np.full((1, h, w), self.logit)), {}


class PixelRuleModel:
    """Stub whose logit is a per-pixel function of channel 0: equivariant to flips."""

    def forward(self, image, aux_stages=()):
        return Tensor(3.0 * (image.data[:1] - 0.4)), {}


class TestTtaPredict:
    def test_constant_model_gives_constant_sigmoid(self):
        model = ConstantModel(0.0)
        probs = tta_predict(model, np.zeros((3, 8, 8)))
        np.testing.assert_array_equal(probs, np.full((1, 8, 8), 0.5))

    def test_equivariant_model_equals_single_pass(self):
        """When the model is exactly flip-equivariant, TTA changes nothing."""
        rng = np.random.default_rng(90)
        img = rng.uniform(0, 1, (3, 8, 8))
        model = PixelRuleModel()
        probs = tta_predict(model, img)
        single = sigmoid_array(3.0 * (img[:1] - 0.4))
        np.testing.assert_allclose(probs, single, atol=1e-12)

    def test_probabilities_in_unit_interval(self):
        model = ConstantModel(37.0)
        probs = tta_predict(model, np.zeros((3, 4, 4)))
        assert probs.min() >= 0.0 and probs.max() <= 1.0

    @pytest.mark.parametrize(
        "flip",
        [
            lambda a: a[..., ::-1].copy(),
            lambda a: a[..., ::-1, :].copy(),
            lambda a: a[..., ::-1, ::-1].copy(),
        ],
        ids=["h", "v", "hv"],
    )
    def test_flip_invariance_is_bitwise_for_real_model(self, flip):
        config = EncoderConfig(stage_channels=(2, 3, 4, 5), stage_strides=(4, 2, 2, 2))
        model = SegModel(config=config, decoder_width=3, seed=10)
        rng = np.random.default_rng(91)
        img = rng.uniform(0, 1, (3, 32, 32))
        base = tta_predict(model, img)
        flipped = tta_predict(model, flip(img))
        assert np.array_equal(flipped, flip(base))


class TestThresholdMask:
    def test_strict_inequality_at_exact_threshold(self):
        probs = np.array([[[0.5, 0.5000001, 0.4999999]]])
        out = threshold_mask(probs, 0.5)
        np.testing.assert_array_equal(out, [[[0.0, 1.0, 0.0]]])

    def test_table_worked_cases(self):
        table = ThresholdTable.default()
        cases = [
            (0.45, Organ.KIDNEY, Domain.HPA, 0.0),
            (0.45, Organ.KIDNEY, Domain.HUBMAP, 1.0),
            (0.12, Organ.LUNG, Domain.HUBMAP, 1.0),
            (0.12, Organ.LUNG, Domain.HPA, 0.0),
        ]
        for p, organ, domain, expected in cases:
            out = threshold_mask(np.full((1, 2, 2), p), table.lookup(organ, domain))
            assert np.all(out == expected), (p, organ, domain)

    def test_lower_threshold_gives_superset(self):
        rng = np.random.default_rng(92)
        probs = rng.uniform(size=(1, 16, 16))
        hi = threshold_mask(probs, 0.5)
        lo = threshold_mask(probs, 0.3)
        assert np.all(lo >= hi)

    def test_threshold_range_validation(self):
        with pytest.raises(ValueError):
            threshold_mask(np.zeros((1, 2, 2)), 1.5)
        with pytest.raises(ValueError):
            threshold_mask(np.zeros((1, 2, 2)), -0.1)


class TestThresholdTable:
    def test_default_values(self):
        table = ThresholdTable.default()
        for organ in Organ:
            hpa = table.lookup(organ, Domain.HPA)
            hub = table.lookup(organ, Domain.HUBMAP)
            if organ is Organ.LUNG:
                assert (hpa, hub) == (0.15, 0.1)
            else:
                assert (hpa, hub) == (0.5, 0.4)

    def test_lookup_missing_pair_raises(self):
        table = ThresholdTable({})
        with pytest.raises(KeyError):
            table.lookup(Organ.KIDNEY, Domain.HPA)

    def test_overrides_replace_single_entry(self):
        table = ThresholdTable.default().with_overrides(
            {(Organ.SPLEEN, Domain.HPA): 0.33}
        )
        assert table.lookup(Organ.SPLEEN, Domain.HPA) == 0.33
        assert table.lookup(Organ.SPLEEN, Domain.HUBMAP) == 0.4

    def test_override_range_validation(self):
        with pytest.raises(ValueError):
            ThresholdTable.default().with_overrides({(Organ.LUNG, Domain.HPA): 2.0})


class TestRle:
    def test_worked_example_row_major(self):
        mask = np.array([[1, 1, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
        assert rle_encode(mask) == "1 2 5 1 9 1"

    def test_worked_example_column_major_decode(self):
        mask = np.array([[1, 1, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
        decoded = rle_decode("1 1 4 2 9 1", (3, 3), column_major=True)
        np.testing.assert_array_equal(decoded[0], mask)

    def test_empty_mask_is_empty_string(self):
        assert rle_encode(np.zeros((4, 4))) == ""
        np.testing.assert_array_equal(rle_decode("", (4, 4))[0], np.zeros((4, 4)))

    def test_full_mask(self):
        assert rle_encode(np.ones((2, 3))) == "1 6"

    def test_single_pixel_corners(self):
        m = np.zeros((3, 3))
        m[0, 0] = 1
        assert rle_encode(m) == "1 1"
        m = np.zeros((3, 3))
        m[2, 2] = 1
        assert rle_encode(m) == "9 1"

    def test_accepts_leading_channel_axis(self):
        m = np.zeros((1, 2, 2))
        m[0, 1, 1] = 1
        assert rle_encode(m) == "4 1"

    def test_random_round_trips(self):
        rng = np.random.default_rng(93)
        for _ in range(200):
            h = int(rng.integers(1, 33))
            w = int(rng.integers(1, 33))
            mask = (rng.uniform(size=(h, w)) > rng.uniform(0.2, 0.8)).astype(float)
            text = rle_encode(mask)
            np.testing.assert_array_equal(rle_decode(text, (h, w))[0], mask)

    def test_decode_rejects_odd_token_count(self):
        with pytest.raises(ValueError):
            rle_decode("1 2 3", (3, 3))

    def test_decode_rejects_non_integer(self):
        with pytest.raises(ValueError):
            rle_decode("1 a", (3, 3))

    def test_decode_rejects_zero_start_or_length(self):
        with pytest.raises(ValueError):
            rle_decode("0 2", (3, 3))
        with pytest.raises(ValueError):
            rle_decode("1 0", (3, 3))

    def test_decode_rejects_overlap_and_disorder(self):
        with pytest.raises(ValueError):
            rle_decode("1 3 2 1", (3, 3))
        with pytest.raises(ValueError):
            rle_decode("5 1 1 1", (3, 3))

    def test_decode_rejects_out_of_bounds(self):
        with pytest.raises(ValueError):
            rle_decode("8 3", (3, 3))
