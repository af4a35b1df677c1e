"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .dsp import Waveform


def check_sequences(X, n_features=None, name="X"):
    """Validate a collection of ``L_i x K`` float arrays.

    Accepts a single 2-D array, a 3-D array (``n x L x K``) or a list of
    2-D arrays of varying length.  Returns ``(list_of_arrays, was_single)``.
    """
    if isinstance(X, np.ndarray) and X.ndim == 2:
        items, single = [X], True
    elif isinstance(X, np.ndarray) and X.ndim == 3:
        items, single = list(X), False
    else:
        items, single = list(X), False
    if not items:
        raise ValueError(f"{name} is empty")
    checked = []
    for i, item in enumerate(items):
        arr = check_array(item, dtype=np.float64, ensure_2d=True, input_name=f"{name}[{i}]")
        if n_features is not None and arr.shape[1] != n_features:
            raise ValueError(
                f"{name}[{i}] has {arr.shape[1]} bins; expected {n_features}"
            )
        checked.append(arr)
    return checked, single


def check_paired(X, y, n_features=None):
    """Validate inputs and targets with identical per-item shapes; targets in [0, 1]."""
    X, _ = check_sequences(X, n_features, "X")
    y, _ = check_sequences(y, X[0].shape[1], "y")
    if len(X) != len(y):
        raise ValueError(f"X has {len(X)} items but y has {len(y)}")
    for i, (a, b) in enumerate(zip(X, y)):
        if a.shape != b.shape:
            raise ValueError(f"X[{i}] shape {a.shape} != y[{i}] shape {b.shape}")
        if b.min() < 0.0 or b.max() > 1.0:
            raise ValueError(f"y[{i}] must lie in [0, 1]")
    return X, y


def check_waveforms(W, sample_rate=None, name="W"):
    """Coerce a waveform or a list of waveforms / 1-D arrays to ``Waveform`` objects."""
    single = isinstance(W, Waveform) or (isinstance(W, np.ndarray) and W.ndim == 1)
    items = [W] if single else list(W)
    out = []
    for item in items:
        if not isinstance(item, Waveform):
            item = Waveform(np.asarray(item, dtype=np.float64), sample_rate or 16000)
        elif sample_rate is not None and item.sample_rate != sample_rate:
            raise ValueError(f"{name}: sample rate {item.sample_rate} != {sample_rate}")
        out.append(item)
    return out, single
