import numpy as np
import pytest

from hifinet import tensor as tc
from hifinet import verify
from hifinet.gradcheck import gradcheck


@pytest.mark.parametrize("name", sorted(verify.BLOCK_CASES))
def test_block_cases_pass_on_a_few_seeds(name):
    res = verify.run_case(name, verify.BLOCK_CASES[name], seeds=3, tol=verify.BLOCK_TOL)
    assert res.passed, res.line()


def test_sign_flip_fails_and_names_op():
    with verify.sign_flipped("softmax"):
        results = verify.run_suite(seeds=2, include_model=False, only=["softmax", "conv2d"])
    by_name = {r.name: r for r in results}
    assert not by_name["softmax"].passed and by_name["conv2d"].passed
    assert "FAIL softmax" in by_name["softmax"].line()
    # restored afterwards
    assert verify.run_case("softmax", verify.case_softmax, 2, verify.BLOCK_TOL).passed


def test_sign_flip_on_conv_breaks_dependent_blocks():
    with verify.sign_flipped("conv2d"):
        results = {r.name: r.passed for r in verify.run_suite(seeds=1, include_model=False,
                                                             only=["conv2d", "matmul", "partial_conv"])}
    assert results == {"conv2d": False, "matmul": True, "partial_conv": False}


def test_impossible_tolerance_fails():
    res = verify.run_suite(seeds=2, tol=1e-12, include_model=False, only=["conv2d", "attention"])
    assert not all(r.passed for r in res)


def test_flipped_op_restored_even_on_error():
    orig = tc.relu
    with pytest.raises(RuntimeError):
        with verify.sign_flipped("relu"):
            raise RuntimeError("boom")
    assert tc.relu is orig


def test_model_case_passes():
    f, params = verify.model_case()
    rep = gradcheck(f, params, tol=verify.MODEL_TOL)
    assert rep.max_rel_error <= verify.MODEL_TOL
    assert np.isfinite(rep.max_rel_error)
