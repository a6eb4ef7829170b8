"""Curve-fit and detection scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class FitScore:
    rmse: float
    mae: float
    mape: float

    def to_dict(self) -> dict:
        return {"rmse": self.rmse, "mae": self.mae, "mape": self.mape}


@dataclass(frozen=True)
class DetectionScore:
    precision: float
    recall: float
    f1: float
    tp: int = 0
    fp: int = 0
    fn: int = 0
    undefined: bool = False  # some ratio had an empty denominator

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "tp": self.tp, "fp": self.fp, "fn": self.fn, "undefined": self.undefined}


def fit_score(pred, actual) -> FitScore:
    """RMSE, MAE and MAPE (as a ratio, zero actuals skipped)."""
    pred = np.asarray(pred, dtype=float).ravel()
    actual = np.asarray(actual, dtype=float).ravel()
    if pred.shape != actual.shape:
        raise DomainError("pred and actual lengths differ")
    if pred.size == 0:
        raise DomainError("empty input")
    err = pred - actual
    nz = actual != 0
    # subnormal actuals overflow to inf, which is the right limit
    with np.errstate(over="ignore"):
        mape = float(np.mean(np.abs(err[nz] / actual[nz]))) if nz.any() else 0.0
    # scale before squaring so tiny or huge errors do not under/overflow
    scale = float(np.max(np.abs(err)))
    rmse = scale * float(np.sqrt(np.mean((err / scale) ** 2))) if scale > 0 else 0.0
    return FitScore(rmse, float(np.mean(np.abs(err))), mape)


def detection_score(alarms, truth) -> DetectionScore:
    alarms = np.asarray(alarms, dtype=bool).ravel()
    truth = np.asarray(truth, dtype=bool).ravel()
    if alarms.shape != truth.shape:
        raise DomainError("alarms and truth lengths differ")
    tp = int(np.sum(alarms & truth))
    fp = int(np.sum(alarms & ~truth))
    fn = int(np.sum(~alarms & truth))
    undefined = False
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision, undefined = 0.0, True
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall, undefined = 0.0, True
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return DetectionScore(precision, recall, f1, tp, fp, fn, undefined)


def first_alarm_delay(alarms, truth):
    """Segments between the first positive segment and the first alarm at or after it (None if never)."""
    alarms = np.asarray(alarms, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    pos = np.nonzero(truth)[0]
    if pos.size == 0:
        return None
    hits = np.nonzero(alarms[pos[0]:])[0]
    return int(hits[0]) if hits.size else None
