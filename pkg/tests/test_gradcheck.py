import numpy as np

from dtp import diffcore as dc
from dtp.diffcore import Tensor
from dtp.diffcore.gradcheck import check_function, rel_error, run_full_check
from dtp.diffcore.tensor import record


def test_corrupted_backward_rule_is_caught():
    # an op whose backward rule is wrong by 10% must trip the checker
    def bad_square(x: Tensor) -> Tensor:
        out = x.data * x.data

        def rule(g):
            x.accumulate_grad(g * 2.2 * x.data)  # should be 2.0 * x

        return record((x,), out, rule)

    arr = np.array([0.7, -1.3, 0.4])
    err = check_function(lambda lv: dc.norm_loss("mean_abs", bad_square(lv[0])), [arr])
    assert err > 1e-4  # the suite threshold flags it


def test_correct_rule_passes_same_harness():
    arr = np.array([0.7, -1.3, 0.4])
    err = check_function(
        lambda lv: dc.norm_loss("mean_abs", dc.elementwise("mul", lv[0], lv[0])), [arr])
    assert err < 1e-4


def test_rel_error_floors_small_magnitudes():
    a = np.array([1e-9])
    n = np.array([2e-9])
    assert rel_error(a, n) < 1e-6  # absolute comparison below the floor


def test_full_check_meets_tolerance_quickly():
    import time
    t0 = time.time()
    err = run_full_check(n_params=50, seed=3)
    assert err < 1e-3
    assert time.time() - t0 < 60
