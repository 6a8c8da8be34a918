"""Shared estimator plumbing: input validation and the portable model file."""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ..sampling import Scaler

FORMAT_VERSION = 1


def _encode(obj, indent=0) -> str:
    """JSON text with every float written to 17 significant digits."""
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_encode(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if all(isinstance(v, (int, float, np.floating, np.integer)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(_encode(v) for v in obj) + "]"
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(pad + _encode(v, indent + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return '"nan"'
        if math.isinf(v):
            return '"inf"' if v > 0 else '"-inf"'
        return f"{v:.17g}" if v != int(v) or abs(v) >= 1e16 else f"{v:.1f}"
    if obj is None:
        return "null"
    return json.dumps(obj)


def write_model_file(path, kind: str, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"format": "cardiometa-model", "version": FORMAT_VERSION, "kind": kind}
    doc.update(payload)
    path.write_text(_encode(doc) + "\n", encoding="utf-8")
    return path


def read_model_file(path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != "cardiometa-model":
        raise ValueError(f"{path} is not a model file")
    return doc


def as_matrix(values) -> np.ndarray:
    return np.asarray(values, dtype=float)


class Emulator(RegressorMixin, BaseEstimator):
    """Multi-output regressor with physical-space inputs and outputs.

    Subclasses implement ``_fit_scaled`` and ``_predict_scaled`` on
    standardised data; the scalers are fitted here.
    """

    kind = "emulator"

    def _validate_xy(self, X, Y):
        X = check_array(X, dtype=float)
        Y = np.asarray(Y, dtype=float)
        self._y_1d = Y.ndim == 1
        Y = check_array(Y.reshape(-1, 1) if Y.ndim == 1 else Y, dtype=float)
        if X.shape[0] != Y.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = Y.shape[1]
        return X, Y

    def _validate_x(self, X):
        check_is_fitted(self, "n_features_in_")
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = check_array(X.reshape(1, -1) if single else X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} input columns, got {X.shape[1]}")
        return X, single

    def _fit_scalers(self, X, Y, input_names=None, output_names=None):
        self.input_scaler_ = Scaler().fit(X, input_names)
        self.output_scaler_ = Scaler().fit(Y, output_names)

    def _shape_out(self, Y, single):
        if single:
            Y = Y[0]
            return Y[0] if self._y_1d else Y
        return Y[:, 0] if self._y_1d else Y

    # model file ---------------------------------------------------------
    def _scaler_payload(self) -> dict:
        return {"input_scaler": self.input_scaler_.to_dict(), "output_scaler": self.output_scaler_.to_dict(),
                "n_features_in": self.n_features_in_, "n_outputs": self.n_outputs_, "y_1d": self._y_1d}

    def _restore_scalers(self, doc) -> None:
        self.input_scaler_ = Scaler.from_dict(doc["input_scaler"])
        self.output_scaler_ = Scaler.from_dict(doc["output_scaler"])
        self.n_features_in_ = int(doc["n_features_in"])
        self.n_outputs_ = int(doc["n_outputs"])
        self._y_1d = bool(doc.get("y_1d", False))

    def save(self, path, metadata: dict | None = None) -> Path:
        check_is_fitted(self, "n_features_in_")
        payload = {"params": _plain(self.get_params()), "metadata": metadata or {}}
        payload.update(self._scaler_payload())
        payload.update(self._state_payload())
        return write_model_file(path, self.kind, payload)

    @classmethod
    def load(cls, path):
        doc = read_model_file(path)
        if doc["kind"] != cls.kind:
            raise ValueError(f"model file holds a {doc['kind']!r}, not a {cls.kind!r}")
        est = cls(**_unplain(doc["params"]))
        est._restore_scalers(doc)
        est._restore_state(doc)
        est.metadata_ = doc.get("metadata", {})
        return est

    def _state_payload(self) -> dict:
        raise NotImplementedError

    def _restore_state(self, doc) -> None:
        raise NotImplementedError


def _plain(params: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in params.items()}


def _unplain(params: dict) -> dict:
    return {k: (tuple(v) if isinstance(v, list) else v) for k, v in params.items()}


def load_emulator(path):
    """Load any emulator model file, dispatching on its kind."""
    from . import REGISTRY
    doc = read_model_file(path)
    try:
        cls = REGISTRY[doc["kind"]]
    except KeyError:
        raise ValueError(f"unknown model kind {doc.get('kind')!r}") from None
    return cls.load(path)
