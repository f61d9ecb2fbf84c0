"""Input checks shared by the estimators."""

import numpy as np
from sklearn.exceptions import NotFittedError

from .data import DataError, Dataset


def check_dataset(ds, min_events=None):
    if not isinstance(ds, Dataset):
        raise TypeError(f"expected a Dataset, got {type(ds).__name__}")
    if min_events is not None and ds.n_events < min_events:
        raise DataError(f"need at least {min_events} event(s), found {ds.n_events}")
    return ds


def check_terms(schema, terms, kinds=("numeric", "categorical", "outcome")):
    for term in terms:
        kind = schema.kinds.get(term)
        if kind is None:
            raise DataError(f"unknown column {term!r}")
        if kind not in kinds:
            raise DataError(f"column {term!r} has kind {kind!r}; expected one of {kinds}")


def check_fitted(model, attribute="coef_"):
    if not hasattr(model, attribute):
        raise NotFittedError(f"{type(model).__name__} is not fitted yet; call fit() first")


def check_horizon(times, s):
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if (times < s).any():
        raise ValueError(f"horizon points must not precede the conditioning time {s}")
    return times
