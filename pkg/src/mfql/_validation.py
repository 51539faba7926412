import numpy as np
from sklearn.utils import check_array


def check_time_state_pairs(X, n_times: int, n_states: int) -> np.ndarray:
    """Validate an ``(m, 2)`` integer array of ``(time index, state index)`` rows."""
    X = check_array(X, dtype=None, ensure_2d=True)
    if X.shape[1] != 2:
        raise ValueError(f"expected 2 columns (time index, state index), got {X.shape[1]}")
    if not np.all(np.equal(np.mod(X, 1), 0)):
        raise ValueError("time and state indices must be integers")
    X = X.astype(np.int64)
    if X[:, 0].min() < 0 or X[:, 0].max() >= n_times:
        raise ValueError(f"time index out of range [0, {n_times})")
    if X[:, 1].min() < 0 or X[:, 1].max() >= n_states:
        raise ValueError(f"state index out of range [0, {n_states})")
    return X


def check_unit_interval(value, name: str, *, open_left=False) -> float:
    value = float(value)
    ok = (0.0 < value <= 1.0) if open_left else (0.0 <= value <= 1.0)
    if not ok:
        interval = "(0, 1]" if open_left else "[0, 1]"
        raise ValueError(f"{name} must lie in {interval}, got {value}")
    return value
