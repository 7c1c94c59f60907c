import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from avdm.core import (AVDMPipeline, LaminaState, ModelParams, PathwayBuffers, ResponseAccumulator,
                       TextureEstimate, accumulate_response, balanced_correlation, boundary_count,
                       decode_angular_velocity, detector_field, estimate_texture, hr_reference_response,
                       lamina_step, persistence_coefficients, split_on_off, texture_from_stats)
from avdm.errors import AVDMError, DecodeUnavailable
from avdm.stimuli import Frame, GratingSpec, generate_grating_frame, grating_frames

from oracles import decode, detector_pair, lamina_trace

finite = st.floats(-5, 5, allow_nan=False)


# --- ModelParams --------------------------------------------------------------

def test_reference_values():
    p = ModelParams.reference()
    assert (p.tau, p.alpha, p.phi, p.m, p.mu, p.a_star, p.b_star) == (0.08, 0.25, 2.0, 10, 1.0, 48.84, 1.0)
    assert p.tau_steps == 20  # 0.08 s at 250 Hz


def test_default_params_and_derived_counts():
    p = ModelParams()
    assert (p.alpha, p.phi, p.m, p.mu) == (0.25, 2.0, 10, 1.0)
    assert p.tau_steps == 4 and p.window_steps == 200
    assert p.warmup_frames == p.m + p.tau_steps


def test_params_text_roundtrip(tmp_path):
    p = ModelParams().with_fit(284.1, 0.99)
    path = tmp_path / "p.txt"
    p.save(path, {"rms_error": 1.5, "converged": True})
    assert ModelParams.load(path) == p
    text = path.read_text()
    for key in ("tau", "alpha", "phi", "m", "mu", "a_star", "b_star", "dt", "window_duration"):
        assert f"\n{key}=" in "\n" + text


def test_params_text_rejects_unknown_and_missing_keys():
    good = ModelParams().to_text()
    with pytest.raises(AVDMError):
        ModelParams.from_text(good + "bogus=1\n")
    with pytest.raises(AVDMError):
        ModelParams.from_text("\n".join(l for l in good.splitlines() if not l.startswith("alpha")))


@pytest.mark.parametrize("kw", [dict(tau=0.0005), dict(dt=0), dict(m=-1), dict(window_duration=0)])
def test_params_validation(kw):
    with pytest.raises(AVDMError):
        ModelParams(**kw)


# --- texture -----------------------------------------------------------------

def test_uniform_frame_zero_contrast():
    tex = estimate_texture(Frame(np.full((2, 10), 0.5)))
    assert tex.contrast == 0 and tex.zero_contrast and tex.spatial_period is None and not tex.defined


def test_square_wave_period_estimate():
    # 40 receptors, period 10 receptors, phase chosen so 8 transitions fall inside; field 78 deg
    row = np.where(((np.arange(40) + 2) // 5) % 2 == 0, 1.0, 0.0)
    tex = estimate_texture(Frame(row[None, :]), phi=2.0)
    assert tex.boundary_count == 8
    assert tex.spatial_period == pytest.approx(19.5)
    assert abs(tex.spatial_period - 20.0) < 2.0


def test_sine_contrast_point_four():
    f = generate_grating_frame(GratingSpec(40, 0, 0.4), (4, 46), 0.0)
    assert estimate_texture(f).contrast == pytest.approx(0.4, abs=1e-6)


def test_no_boundaries_flag():
    row = np.linspace(0.2, 0.8, 10)  # a single half-cycle ramp: one transition
    assert estimate_texture(Frame(row[None, :])).boundary_count == 1
    tex = texture_from_stats(0.8, 0.2, 0.0, 18.0)
    assert tex.no_boundaries and tex.spatial_period is None and not tex.defined


def test_boundary_count_is_row_mean():
    lum = np.array([[0, 1, 0, 1], [0, 0, 1, 1]], dtype=float)
    assert boundary_count(lum) == pytest.approx(2.0)


@settings(max_examples=60, deadline=None)
@given(period=st.integers(6, 45), shift=st.integers(0, 44))
def test_property_square_period_within_quantization(period, shift):
    """Square gratings with 2-8 cycles in the field: |lam_hat - lam| within one count step."""
    cols, phi = 46, 2.0
    field = (cols - 1) * phi
    lam = period * phi
    cycles = field / lam
    if not 2 <= cycles <= 8:
        return
    y = np.arange(cols) + shift
    row = np.where(np.sin(2 * np.pi * (y + 0.25) / period) >= 0, 1.0, 0.0)
    tex = estimate_texture(Frame(row[None, :]), phi)
    n = tex.boundary_count
    step = 2 * field / (n * (n - 1))
    assert abs(tex.spatial_period - lam) <= max(2 * phi, step) + 1e-9


@settings(max_examples=40, deadline=None)
@given(c=st.sampled_from([0.2, 0.5, 1.0]), k=st.integers(2, 5), t=st.floats(0, 1))
def test_property_contrast_exact(c, k, t):
    f = generate_grating_frame(GratingSpec(8.0 * k, 0.0, c), (4, 46), t)
    assert estimate_texture(f).contrast == pytest.approx(c, abs=1e-6)


# --- lamina ------------------------------------------------------------------

def test_persistence_coefficients_values():
    p = persistence_coefficients(10, 1.0)
    assert p[0] == pytest.approx(1 / (1 + math.e))
    assert np.all(np.diff(p) < 0) and np.all(p > 0) and np.all(p < 0.5)


@given(mu=st.floats(0.05, 5), m=st.integers(1, 30))
def test_property_persistence_monotone(mu, m):
    p = persistence_coefficients(m, mu)
    assert len(p) == m and np.all(p > 0) and np.all(p < 0.5)
    if m > 1 and mu * m < 30:  # beyond that the tail underflows towards equal tiny values
        assert np.all(np.diff(p) < 0)


def test_lamina_hand_trace():
    st_ = LaminaState(m=10, mu=1.0)
    f = lambda v: Frame(np.full((1, 2), v))
    assert np.all(lamina_step(st_, f(0.2)) == 0)  # first frame
    assert np.all(lamina_step(st_, f(0.2)) == 0)  # constant input
    assert lamina_step(st_, f(0.7))[0, 0] == pytest.approx(0.5)
    assert lamina_step(st_, f(0.7))[0, 0] == pytest.approx(0.5 / (1 + math.e))
    assert 0.5 / (1 + math.e) == pytest.approx(0.13447, abs=1e-5)


@settings(max_examples=40, deadline=None)
@given(series=st.lists(st.floats(0, 1), min_size=1, max_size=30), m=st.integers(0, 12), mu=st.floats(0.2, 3))
def test_property_lamina_matches_oracle(series, m, mu):
    state = LaminaState(m, mu)
    got = [float(state.step(np.array([[v, v]]))[0, 0]) for v in series]
    np.testing.assert_allclose(got, lamina_trace(series, m, mu), atol=1e-12)
    assert len(state.history) <= max(m, 1)


def test_lamina_rejects_shape_change():
    st_ = LaminaState()
    st_.step(np.zeros((1, 3)))
    with pytest.raises(AVDMError):
        st_.step(np.zeros((1, 4)))


# --- ON/OFF and detectors ------------------------------------------------------

def test_split_examples():
    assert split_on_off(0.3) == (0.3, 0.0)
    assert split_on_off(-0.2) == (0.0, -0.2)


@given(arrays(float, (3, 7), elements=finite))
def test_property_on_off_identity(p):
    on, off = split_on_off(p)
    assert np.all(on >= 0) and np.all(off <= 0)
    np.testing.assert_array_equal(on + off, p)


def _buffers(seq, tau_steps, alpha):
    b = PathwayBuffers(tau_steps, alpha)
    for p in seq:
        b.push(np.asarray(p, dtype=float)[None, :])
    return b


def test_detector_hand_traces():
    assert np.all(detector_field(_buffers([[0, 0], [0, 0]], 1, 0.25)) == 0)
    # left fires at t - tau, right at t: preferred direction
    d = detector_field(_buffers([[1, 0], [0, 1]], 1, 0.25))
    assert d.shape == (1, 1) and d[0, 0] == pytest.approx(1.0)
    # mirrored impulse pattern
    d = detector_field(_buffers([[0, 1], [1, 0]], 1, 0.25))
    assert d[0, 0] == pytest.approx(-0.25)


def test_detector_off_pathway_and_warmup():
    d = detector_field(_buffers([[-1, 0], [0, -1]], 1, 0.25))
    assert d[0, 0] == pytest.approx(1.0)  # OFF products of two negatives
    assert detector_field(_buffers([[1, 0]], 1, 0.25)) is None
    with pytest.raises(AVDMError):
        PathwayBuffers(0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(finite, finite), min_size=3, max_size=3), st.floats(0, 1))
def test_property_detector_matches_oracle(seq, alpha):
    b = _buffers(seq, 2, alpha)
    (l0, r0), _, (l2, r2) = seq
    assert detector_field(b)[0, 0] == pytest.approx(detector_pair(l0, r2, l2, r0, alpha), abs=1e-12)


def _field_mean_sequence(lums, tau_steps, alpha, m=10, mu=1.0):
    lam = LaminaState(m, mu)
    buf = PathwayBuffers(tau_steps, alpha)
    out = []
    for lum in lums:
        buf.push(lam.step(lum))
        d = detector_field(buf)
        if d is not None:
            out.append(float(d.mean()))
    return np.array(out)


@settings(max_examples=30, deadline=None)
@given(arrays(float, (12, 2, 6), elements=st.floats(0, 1)), st.integers(1, 3))
def test_property_mirror_antisymmetry_at_alpha_one(lums, tau_steps):
    fwd = _field_mean_sequence(lums, tau_steps, 1.0)
    mirrored = _field_mean_sequence(lums[..., ::-1], tau_steps, 1.0)
    np.testing.assert_allclose(mirrored, -fwd, atol=1e-9)


def test_balanced_correlation_shape():
    a = np.ones((2, 5))
    assert balanced_correlation(a, a, 0.25).shape == (2, 4)


# --- response accumulator -------------------------------------------------------

def test_accumulator_constant_and_alternating():
    acc = ResponseAccumulator(4)
    assert acc.R is None
    for _ in range(6):
        accumulate_response(acc, np.full((2, 3), 0.7))
    assert acc.full and acc.R == pytest.approx(0.7)
    for i in range(4):
        acc.push(np.full((1, 2), 0.3 if i % 2 else -0.3))
    assert acc.R == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.lists(finite, min_size=1, max_size=40), st.integers(1, 10))
def test_property_accumulator_is_window_mean(values, n):
    acc = ResponseAccumulator(n)
    for v in values:
        acc.push(np.array([[v]]))
    assert len(acc.window) <= n
    assert acc.R == pytest.approx(np.mean(values[-n:]), abs=1e-12)


def test_response_stationarity_over_windows():
    """omega=300, lam=38, C=1: spread of R over 10 disjoint windows < 10% of the mean."""
    p = ModelParams()
    pipe = AVDMPipeline(p)
    n = p.warmup_frames + 11 * p.window_steps
    rs = []
    for out in pipe.run(grating_frames(GratingSpec(38, 300, 1.0), (4, 46), p.dt, n)):
        k = pipe.frame_index - p.warmup_frames
        if k > p.window_steps and k % p.window_steps == 0:
            rs.append(out.R)
    rs = np.array(rs[:10])
    assert len(rs) == 10 and rs.mean() > 0
    assert rs.std() < 0.1 * rs.mean()


# --- decoding ---------------------------------------------------------------

def tex(c=1.0, lam=38.0):
    return TextureEstimate(c, lam, 2 * 90 / lam)


def test_decode_examples():
    p = ModelParams.reference()
    assert decode_angular_velocity(0.0, tex(), p) == 0.0
    assert decode_angular_velocity(0.25, tex(), p) == pytest.approx(927.96)
    assert decode_angular_velocity(-0.5, tex(), p) == 0.0


def test_decode_unavailable():
    p = ModelParams.reference()
    with pytest.raises(DecodeUnavailable):
        decode_angular_velocity(0.1, TextureEstimate(0.0, None, 0.0, zero_contrast=True), p)
    with pytest.raises(DecodeUnavailable):
        decode_angular_velocity(0.1, TextureEstimate(0.5, None, 0.0, no_boundaries=True), p)
    with pytest.raises(DecodeUnavailable):
        decode_angular_velocity(math.nan, tex(), p)


@settings(max_examples=80, deadline=None)
@given(r1=st.floats(1e-6, 10), r2=st.floats(1e-6, 10), c1=st.floats(0.01, 1), c2=st.floats(0.01, 1),
       lam=st.floats(5, 90), a=st.floats(1, 500), b=st.floats(0.25, 4))
def test_property_decode_monotone_and_matches_oracle(r1, r2, c1, c2, lam, a, b):
    p = ModelParams(a_star=a, b_star=b)
    w = lambda r, c: decode_angular_velocity(r, tex(c, lam), p)
    assert w(r1, c1) == pytest.approx(decode(a, b, lam, c1, r1), rel=1e-12)
    if r1 < r2:
        assert w(r1, c1) < w(r2, c1)
    if c1 < c2:
        assert w(r1, c1) > w(r1, c2)


# --- pipeline ------------------------------------------------------------------

def _run(spec, params, n, grid=(4, 46)):
    return list(AVDMPipeline(params).run(grating_frames(spec, grid, params.dt, n)))


def test_warmup_safety():
    p = ModelParams()
    outs = _run(GratingSpec(38, 300), p, p.warmup_frames + p.window_steps + 5)
    assert all(not o.valid and o.reason == "warm-up" for o in outs[: p.warmup_frames])
    assert all(not o.valid for o in outs[: p.warmup_frames + p.window_steps - 1])
    assert outs[p.warmup_frames + p.window_steps - 1].valid


def test_stationary_grating_decodes_to_zero():
    p = ModelParams(a_star=284.1, b_star=1.0)
    outs = _run(GratingSpec(38, 0.0), p, 600)
    valid = [o.omega for o in outs if o.valid]
    assert valid and max(abs(w) for w in valid) < 5.0


def test_uniform_stream_never_decodes():
    p = ModelParams()
    frames = (Frame(np.full((4, 46), 0.5), timestamp=i * p.dt) for i in range(400))
    outs = list(AVDMPipeline(p).run(frames))
    assert not any(o.valid for o in outs)
    assert outs[-1].reason == "zero contrast"


def test_reverse_motion_direction_flag():
    # only the fully balanced detector is odd in the direction of motion; at alpha < 1 the
    # rectified products leave a positive offset
    p = ModelParams(a_star=284.1, alpha=1.0)
    fwd = _run(GratingSpec(38, 300), p, 400)[-1]
    rev = _run(GratingSpec(38, -300), p, 400)[-1]
    assert fwd.direction == 1 and fwd.omega > 0
    assert rev.direction == -1 and rev.omega == 0.0
    assert rev.R == pytest.approx(-fwd.R, rel=0.05)


def test_pipeline_rejects_shape_change_and_bad_clock():
    p = ModelParams()
    pipe = AVDMPipeline(p)
    pipe.step(Frame(np.zeros((1, 4)), timestamp=0.0))
    with pytest.raises(AVDMError):
        pipe.step(Frame(np.zeros((1, 5)), timestamp=p.dt))
    pipe = AVDMPipeline(p)
    pipe.step(Frame(np.zeros((1, 4)), timestamp=0.0))
    with pytest.raises(AVDMError):
        pipe.step(Frame(np.zeros((1, 4)), timestamp=3 * p.dt))


def test_pipeline_deterministic_and_reset():
    p = ModelParams(a_star=284.1)
    spec = GratingSpec(54, 200)
    a = [o.omega for o in _run(spec, p, 300)]
    pipe = AVDMPipeline(p)
    list(pipe.run(grating_frames(GratingSpec(19, 500), (4, 46), p.dt, 100)))
    pipe.reset()
    b = [o.omega for o in pipe.run(grating_frames(spec, (4, 46), p.dt, 300))]
    np.testing.assert_array_equal(a, b)


def test_end_to_end_after_calibration(calibrated):
    outs = _run(GratingSpec(38, 300, 1.0), calibrated, 600)
    w = np.mean([o.omega for o in outs if o.valid])
    assert 255 <= w <= 345


# --- HR baseline -----------------------------------------------------------------

def test_hr_stationary_is_zero():
    frames = grating_frames(GratingSpec(38, 0.0), (4, 46), 0.001, 100)
    assert hr_reference_response(frames, 0.015, 0.001) == pytest.approx(0.0, abs=1e-15)


def test_hr_needs_output():
    with pytest.raises(DecodeUnavailable):
        hr_reference_response(grating_frames(GratingSpec(38, 1.0), (1, 4), 0.001, 5), 0.015, 0.001)


def test_hr_unimodal_with_interior_peak():
    omegas = np.arange(50, 801, 50)
    resp = [hr_reference_response(grating_frames(GratingSpec(19, w), (4, 46), 0.001, 400), 0.015, 0.001, 0.1)
            for w in omegas]
    k = int(np.argmax(resp))
    assert 0 < k < len(omegas) - 1
    assert np.all(np.diff(resp[: k + 1]) > 0) and np.all(np.diff(resp[k:]) < 0)
