import numpy as np
import pytest

from flowcert.flow import (
    FlowField,
    extract_flow,
    flow_sequence,
    impose_flow,
    impose_flow_batch,
    magnitude_direction,
)
from flowcert.tensors import Video

from conftest import QUALITY_SPEC, TRUE_DIRECTION


def test_zero_motion_identity():
    rng = np.random.default_rng(0)
    f = rng.random((9, 9, 1))
    field = extract_flow(f, f)
    assert np.all(field.u == 0.0)
    assert np.all(field.v == 0.0)


def test_brightness_invariance():
    rng = np.random.default_rng(1)
    f1 = 0.5 * rng.random((10, 10, 1))
    f2 = 0.5 * rng.random((10, 10, 1))
    base = extract_flow(f1, f2)
    shifted = extract_flow(f1 + 0.3, f2 + 0.3)
    assert np.abs(shifted.u - base.u).max() < 1e-6
    assert np.abs(shifted.v - base.v).max() < 1e-6


def test_too_small_frames():
    with pytest.raises(ValueError, match="3x3"):
        extract_flow(np.zeros((2, 2)), np.zeros((2, 2)))


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        extract_flow(np.zeros((4, 4)), np.zeros((5, 5)))


def test_translation_endpoint_error(quality_clips):
    for label, clip in quality_clips.items():
        dx, dy = TRUE_DIRECTION[label]
        flows = flow_sequence(clip)
        support = clip.data[0, :, :, 0] > 0.25
        for t in range(flows.shape[0]):
            ee = np.sqrt((flows[t, :, :, 0] - dx) ** 2 + (flows[t, :, :, 1] - dy) ** 2)
            assert ee[support].mean() < 0.5, f"{label} flow {t}"


def test_flow_sequence_shape_and_static():
    two = Video(np.full((2, 6, 5, 1), 0.4))
    assert flow_sequence(two).shape == (1, 6, 5, 2)
    static = Video(np.tile(np.random.default_rng(2).random((1, 8, 8, 1)), (4, 1, 1, 1)))
    assert np.all(flow_sequence(static) == 0.0)


def test_flow_sequence_needs_two_frames():
    with pytest.raises(ValueError, match="2 frames"):
        flow_sequence(np.zeros((1, 8, 8, 1)))


def test_rightward_clip_mean_u_positive(right_clip):
    flows = flow_sequence(right_clip)
    assert flows.shape[0] == QUALITY_SPEC.frames - 1
    for t in range(flows.shape[0]):
        assert flows[t, :, :, 0].mean() > 0.0
        assert abs(flows[t, :, :, 1].mean()) < 0.15


def test_round_trip(quality_clips):
    for label, clip in quality_clips.items():
        flows = flow_sequence(clip)
        rebuilt = impose_flow(clip.data, flows)
        assert np.abs(rebuilt - clip.data).max() < 0.05, label


def test_reextraction_consistency(quality_clips):
    for label, clip in quality_clips.items():
        flows = flow_sequence(clip)
        rebuilt = impose_flow(clip.data, flows)
        dev = np.abs(flow_sequence(rebuilt) - flows).max()
        assert dev <= 0.25, label


def test_zero_flow_propagates_first_frame(right_clip):
    zeros = np.zeros_like(flow_sequence(right_clip))
    rebuilt = impose_flow(right_clip.data, zeros)
    for t in range(rebuilt.shape[0]):
        np.testing.assert_allclose(rebuilt[t], right_clip.data[0], atol=1e-12)


def test_impose_output_clamped(right_clip):
    flows = flow_sequence(right_clip)
    big = flows + 3.7  # large displacements drag border values around
    rebuilt = impose_flow(right_clip.data, big)
    assert rebuilt.min() >= 0.0
    assert rebuilt.max() <= 1.0


def test_impose_shape_mismatch(right_clip):
    flows = flow_sequence(right_clip)
    with pytest.raises(ValueError, match="does not match"):
        impose_flow(right_clip.data, flows[:-1])


def test_impose_batch_matches_single(right_clip):
    flows = flow_sequence(right_clip)
    batch = np.stack([flows, flows * 0.5])
    out = impose_flow_batch(right_clip.data, batch)
    np.testing.assert_array_equal(out[0], impose_flow(right_clip.data, flows))
    np.testing.assert_array_equal(out[1], impose_flow(right_clip.data, flows * 0.5))


def test_residual_decreases(quality_clips):
    # Jacobi neighbour mixing can wiggle the data residual by ~1e-4 relative
    # once converged; monotonicity is asserted up to that slack.
    for clip in quality_clips.values():
        res = []
        extract_flow(clip.data[0], clip.data[1], record_residuals=res)
        r = np.array(res)
        assert len(r) >= 10
        assert np.all(np.diff(r) <= 1e-4 * r[0])
        assert r[-1] < 0.5 * r[0]


class TestMagnitudeDirection:
    def test_345(self):
        field = FlowField(np.full((3, 3), 3.0), np.full((3, 3), 4.0))
        mag, ang = magnitude_direction(field)
        np.testing.assert_allclose(mag, 5.0)
        np.testing.assert_allclose(ang, np.arctan2(4.0, 3.0))

    def test_zero_field(self):
        field = FlowField(np.zeros((2, 2)), np.zeros((2, 2)))
        mag, ang = magnitude_direction(field)
        assert np.all(mag == 0.0)
        assert np.all(ang == 0.0)

    def test_straight_down_negative_v(self):
        field = FlowField(np.zeros((1, 1)), np.full((1, 1), -1.0))
        mag, ang = magnitude_direction(field)
        assert mag[0, 0] == pytest.approx(1.0)
        assert ang[0, 0] == pytest.approx(-np.pi / 2)

    def test_component_shape_mismatch(self):
        with pytest.raises(ValueError, match="matching"):
            FlowField(np.zeros((2, 2)), np.zeros((3, 2)))
