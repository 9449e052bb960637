# Copyright 2026 The dynavatar Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#   http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""

Assertion helpers for arrays and tensors.

These complement qcore.asserts, which compares scalars and containers. On
failure they report the worst offending element instead of the whole array:

   assert_array_eq(expected, actual, tolerance=1e-6)

   AssertionError: arrays differ by 0.25 > 1e-06 at index (3, 1): 1.0 != 0.75

"""

__all__ = [
    "assert_array_eq",
    "assert_array_ne",
    "assert_shape",
    "assert_finite",
    "assert_all_between",
    "assert_rel_error_lt",
]

import numpy as np


def _as_numpy(value):
    if hasattr(value, "detach"):
        value = value.detach().cpu().numpy()
    return np.asarray(value)


def _fail_message(message, default, extra):
    if message:
        return message
    if extra:
        return "%s (%s)" % (default, extra)
    return default


def assert_array_eq(expected, actual, tolerance=0.0, message=None, extra=None):
    """Raises an AssertionError if the arrays differ by more than tolerance anywhere.

    Shapes must match exactly; broadcasting is not applied.

    """
    expected = _as_numpy(expected)
    actual = _as_numpy(actual)
    assert expected.shape == actual.shape, _fail_message(
        message, "shapes differ: %r != %r" % (expected.shape, actual.shape), extra
    )
    if expected.size == 0:
        return
    diff = np.abs(expected.astype(np.float64) - actual.astype(np.float64))
    diff = np.where(np.isnan(diff), np.inf, diff)
    worst = np.unravel_index(int(np.argmax(diff)), diff.shape)
    assert diff[worst] <= tolerance, _fail_message(
        message,
        "arrays differ by %r > %r at index %r: %r != %r"
        % (float(diff[worst]), tolerance, worst, expected[worst], actual[worst]),
        extra,
    )


def assert_array_ne(expected, actual, tolerance=0.0, message=None, extra=None):
    """Raises an AssertionError if no element differs by more than tolerance."""
    expected = _as_numpy(expected)
    actual = _as_numpy(actual)
    if expected.shape != actual.shape:
        return
    diff = np.abs(expected.astype(np.float64) - actual.astype(np.float64))
    assert diff.size > 0 and float(diff.max()) > tolerance, _fail_message(
        message, "arrays are equal within %r" % (tolerance,), extra
    )


def assert_shape(expected_shape, value, message=None, extra=None):
    """Raises an AssertionError if value.shape != expected_shape.

    None in expected_shape matches any extent.

    """
    shape = tuple(_as_numpy(value).shape)
    expected_shape = tuple(expected_shape)
    ok = len(shape) == len(expected_shape) and all(
        e is None or e == s for e, s in zip(expected_shape, shape)
    )
    assert ok, _fail_message(
        message, "shape %r does not match %r" % (shape, expected_shape), extra
    )


def assert_finite(value, message=None, extra=None):
    """Raises an AssertionError if value contains NaN or infinity."""
    array = _as_numpy(value)
    bad = ~np.isfinite(array)
    assert not bad.any(), _fail_message(
        message,
        "%d non-finite values, first at index %r"
        % (int(bad.sum()), tuple(int(i) for i in np.argwhere(bad)[0])),
        extra,
    )


def assert_all_between(low, high, value, message=None, extra=None):
    """Raises an AssertionError if any element falls outside [low, high]."""
    array = _as_numpy(value)
    if array.size == 0:
        return
    lo = float(array.min())
    hi = float(array.max())
    assert low <= lo and hi <= high, _fail_message(
        message, "values span [%r, %r], outside [%r, %r]" % (lo, hi, low, high), extra
    )


def assert_rel_error_lt(expected, actual, bound, message=None, extra=None):
    """Raises an AssertionError if ||actual - expected|| / ||expected|| >= bound."""
    expected = _as_numpy(expected).astype(np.float64).ravel()
    actual = _as_numpy(actual).astype(np.float64).ravel()
    scale = max(float(np.linalg.norm(expected)), 1e-12)
    error = float(np.linalg.norm(actual - expected)) / scale
    assert error < bound, _fail_message(
        message, "relative error %r >= %r" % (error, bound), extra
    )
