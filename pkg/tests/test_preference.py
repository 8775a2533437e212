"""
Tests for the preference calibrator: shapes, parameter utilities and
analytic gradients against finite differences
"""
from types import SimpleNamespace

import numpy as np
import pytest

from prefsynth.core.errors import DomainError
from prefsynth.core.numerics import check_gradient, spawn_rng
from prefsynth.schemas import ModelDims, ReflectionConfig
from prefsynth.services.encoders import SemanticProjector
from prefsynth.services.preference import (
    CalibratorParams,
    calibrate,
    calibrator_gradients,
    flatten_gradients,
    forward,
)
from prefsynth.services.reflection import smooth_objective

TINY = ModelDims(n_img_tokens=2, n_queries=3, mapper_depth=3, mapper_dim=3, attn_dim=4, lift_rows=2)


def _unit(rng, n):
    v = rng.normal(size=n)
    return v / np.linalg.norm(v)


@pytest.fixture
def tiny_params() -> CalibratorParams:
    return CalibratorParams.initialize(TINY, text_dim=5, pref_dim=6, seed=2)


def test_initialize_shapes_and_determinism(tiny_params):
    assert tiny_params.text_dim == 5
    assert tiny_params.mapper_dim == 3
    assert tiny_params.pref_dim == 6
    assert tiny_params["lifts"].shape == (2, 5, 5)
    assert tiny_params["attn_q"].shape == (4, 8)
    assert tiny_params["out_proj"].shape == (6, 9)
    assert sum(name.startswith("mapper.2.") for name in tiny_params.names) == 5
    again = CalibratorParams.initialize(TINY, text_dim=5, pref_dim=6, seed=2)
    assert again == tiny_params
    assert again.checksum() == tiny_params.checksum()
    other = CalibratorParams.initialize(TINY, text_dim=5, pref_dim=6, seed=3)
    assert other.checksum() != tiny_params.checksum()


def test_flat_round_trip_and_step(tiny_params):
    flat = tiny_params.flat()
    rebuilt = tiny_params.with_flat(flat)
    assert rebuilt == tiny_params
    zero = {name: np.zeros_like(arr) for name, arr in tiny_params.arrays.items()}
    assert tiny_params.step(zero, lr=0.5) == tiny_params
    ones = {name: np.ones_like(arr) for name, arr in tiny_params.arrays.items()}
    stepped = tiny_params.step(ones, lr=0.1)
    np.testing.assert_allclose(stepped.flat(), flat - 0.1)


def test_validate_rejects_bad_arrays(tiny_params):
    broken = tiny_params.copy()
    broken.arrays["attn_k"] = np.zeros((3, 5))
    with pytest.raises(DomainError):
        broken.validate()
    nan = tiny_params.copy()
    nan.arrays["queries"][0, 0] = np.nan
    with pytest.raises(DomainError):
        nan.validate()


def test_forward_shapes_and_calibrate_agree(tiny_params):
    rng = spawn_rng(0, "forward")
    e_txt, e_g = _unit(rng, 5), _unit(rng, 5)
    trace = forward(tiny_params, e_txt, e_g)
    assert trace.e_d.shape == (8,)
    assert trace.p_gen.shape == (6,)
    assert trace.attn.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(calibrate(trace.e_d, e_g, tiny_params), trace.p_gen, atol=1e-12)
    with pytest.raises(DomainError):
        forward(tiny_params, np.ones(4), e_g)
    with pytest.raises(DomainError):
        calibrate(np.ones(7), e_g, tiny_params)


def test_linear_readout_gradient_matches_finite_differences(tiny_params):
    """d(c . p_gen)/dtheta through the calibrator and the mapper."""
    rng = spawn_rng(1, "readout")
    e_txt, e_g = _unit(rng, 5), _unit(rng, 5)
    c = rng.normal(size=6)
    trace = forward(tiny_params, e_txt, e_g)
    analytic = flatten_gradients(tiny_params, calibrator_gradients(trace, tiny_params, c))

    def f(flat: np.ndarray) -> float:
        return float(c @ forward(tiny_params.with_flat(flat), e_txt, e_g).p_gen)

    report = check_gradient(f, analytic, tiny_params.flat(), floor=1e-5)
    assert report.parameter_count == tiny_params.flat().size
    assert report.passed(1e-4), report.max_relative_error


def test_direct_detailed_gradient_matches_finite_differences(tiny_params):
    """A loss on e_d alone reaches only the mapper parameters."""
    rng = spawn_rng(2, "e_d-readout")
    e_txt, e_g = _unit(rng, 5), _unit(rng, 5)
    c = rng.normal(size=8)
    trace = forward(tiny_params, e_txt, e_g)
    grads = calibrator_gradients(trace, tiny_params, np.zeros(6), grad_e_d=c)
    assert not np.any(grads["out_proj"])
    assert not np.any(grads["lifts"])

    def f(flat: np.ndarray) -> float:
        return float(c @ forward(tiny_params.with_flat(flat), e_txt, e_g).e_d)

    report = check_gradient(f, flatten_gradients(tiny_params, grads), tiny_params.flat(), floor=1e-5)
    assert report.passed(1e-4), report.max_relative_error


def test_smooth_objective_without_retrieval(tiny_params):
    rng = spawn_rng(3, "no-retrieval")
    ctx = SimpleNamespace(e_txt=_unit(rng, 5), e_g=_unit(rng, 5), e_sem_ref=_unit(rng, 5), p_ret=None)
    projector = SemanticProjector(out_dim=5, seed=4)
    cfg = ReflectionConfig(beta=0.5, gamma=0.3)
    loss, grads = smooth_objective(tiny_params, ctx, projector, cfg)
    assert loss > 0.0
    # only the semantic term is present, so the output projection gets no gradient
    assert not np.any(grads["out_proj"])

    def f(flat: np.ndarray) -> float:
        return smooth_objective(tiny_params.with_flat(flat), ctx, projector, cfg)[0]

    report = check_gradient(f, flatten_gradients(tiny_params, grads), tiny_params.flat(), floor=1e-5)
    assert report.passed(1e-4), report.max_relative_error


def test_smooth_objective_on_pipeline_context(small_pipeline, small_corpus, toy_ranker):
    """Calibrator plus semantic loss on a real user context."""
    ctx = small_pipeline.prepare_user(small_corpus.users[0], toy_ranker)
    params = small_pipeline.init_params(seed=5)
    cfg = small_pipeline.config.reflection
    loss, grads = smooth_objective(params, ctx, small_pipeline.projector, cfg)
    assert np.isfinite(loss)

    def f(flat: np.ndarray) -> float:
        return smooth_objective(params.with_flat(flat), ctx, small_pipeline.projector, cfg)[0]

    report = check_gradient(f, flatten_gradients(params, grads), params.flat(), floor=1e-5)
    assert report.passed(1e-4), report.max_relative_error


def test_descent_on_smooth_objective_lowers_loss(tiny_params):
    rng = spawn_rng(6, "descent")
    ctx = SimpleNamespace(
        e_txt=_unit(rng, 5), e_g=_unit(rng, 5), e_sem_ref=_unit(rng, 5), p_ret=_unit(rng, 6)
    )
    projector = SemanticProjector(out_dim=5, seed=4)
    cfg = ReflectionConfig()
    params = tiny_params
    first, _ = smooth_objective(params, ctx, projector, cfg)
    for _ in range(50):
        _, grads = smooth_objective(params, ctx, projector, cfg)
        params = params.step(grads, 0.01)
    last, _ = smooth_objective(params, ctx, projector, cfg)
    assert last < first
