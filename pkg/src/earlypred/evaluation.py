"""Accuracy versus observation ratio, per-class threshold tables, ablation tables, fusion.

Every prefix level ``k = 1..K`` of every test sequence is scored once. Accuracy
at a level is reported per video (primary) and as a class mean. Predictions
take the arg-max of the class scores, ties going to the lowest class index.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import Dataset
from .model import fuse_scores

THRESHOLD_RATIOS = (0.1, 0.5, 1.0)
THRESHOLDS = (0.6, 0.8, 0.9)
ABLATION_RATIOS = (0.1, 0.3, 0.5)


class EvaluationError(ValueError):
    pass


def ratio_to_level(r: float, n_segments: int) -> int:
    """Progress level for an observation ratio: ``round(r * K)`` clipped to ``[1, K]``."""
    if not 0.0 < r <= 1.0:
        raise EvaluationError(f"observation ratio must lie in (0, 1], got {r}")
    return int(min(n_segments, max(1, round(r * n_segments))))


def _fingerprint(ids: np.ndarray, labels: np.ndarray) -> str:
    order = np.argsort(ids, kind="stable")
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ids[order], dtype="<i8").tobytes())
    h.update(np.ascontiguousarray(labels[order], dtype="<i8").tobytes())
    return h.hexdigest()[:16]


@dataclass
class EvaluationReport:
    n_classes: int
    n_segments: int
    accuracy: np.ndarray  # (K,) per-video accuracy at level k = index + 1
    class_accuracy: np.ndarray  # (C, K); nan for classes absent from the test set
    class_counts: np.ndarray  # (C,) sequences per class
    confusion: np.ndarray  # (K, C, C) rows true class, columns predicted
    test_fingerprint: str = ""

    @property
    def ratios(self) -> np.ndarray:
        return np.arange(1, self.n_segments + 1) / self.n_segments

    @property
    def n_sequences(self) -> int:
        return int(self.class_counts.sum())

    @property
    def average(self) -> float:
        """Unweighted mean of the per-ratio accuracies."""
        return float(self.accuracy.mean())

    @property
    def class_mean_accuracy(self) -> np.ndarray:
        present = self.class_counts > 0
        return self.class_accuracy[present].mean(axis=0)

    def accuracy_at(self, r: float) -> float:
        return float(self.accuracy[ratio_to_level(r, self.n_segments) - 1])

    def top_classes(self, r: float, n: int = 5) -> list[tuple[int, float]]:
        """Best ``n`` classes at ratio ``r``; ties broken by class index."""
        col = self.class_accuracy[:, ratio_to_level(r, self.n_segments) - 1]
        present = np.flatnonzero(self.class_counts > 0)
        ranked = sorted(present, key=lambda c: (-col[c], c))[:n]
        return [(int(c), float(col[c])) for c in ranked]

    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "n_segments": self.n_segments,
            "accuracy": [float(a) for a in self.accuracy],
            "class_accuracy": [[None if np.isnan(a) else float(a) for a in row] for row in self.class_accuracy],
            "class_counts": [int(c) for c in self.class_counts],
            "confusion": self.confusion.tolist(),
            "test_fingerprint": self.test_fingerprint,
            "average": self.average,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvaluationReport":
        ca = np.array([[np.nan if a is None else a for a in row] for row in d["class_accuracy"]], dtype=np.float64)
        return cls(int(d["n_classes"]), int(d["n_segments"]), np.array(d["accuracy"], dtype=np.float64),
                   ca.reshape(int(d["n_classes"]), int(d["n_segments"])),
                   np.array(d["class_counts"], dtype=np.int64),
                   np.array(d["confusion"], dtype=np.int64).reshape(
                       int(d["n_segments"]), int(d["n_classes"]), int(d["n_classes"])),
                   d.get("test_fingerprint", ""))


def evaluate_predictions(predictions: np.ndarray, labels: np.ndarray, n_classes: int,
                         ids: np.ndarray | None = None) -> EvaluationReport:
    """Aggregate hard predictions of shape ``(K, N)`` against ``labels`` of shape ``(N,)``."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.ndim != 2 or predictions.shape[1] != labels.shape[0]:
        raise EvaluationError(f"predictions {predictions.shape} do not match {labels.shape[0]} labels")
    K, N = predictions.shape
    if N == 0:
        raise EvaluationError("cannot evaluate an empty test set")
    if labels.min() < 0 or labels.max() >= n_classes or predictions.min() < 0 or predictions.max() >= n_classes:
        raise EvaluationError(f"labels and predictions must lie in [0, {n_classes})")
    confusion = np.zeros((K, n_classes, n_classes), dtype=np.int64)
    for k in range(K):
        np.add.at(confusion[k], (labels, predictions[k]), 1)
    counts = np.bincount(labels, minlength=n_classes)
    correct = confusion[:, np.arange(n_classes), np.arange(n_classes)]  # (K, C)
    with np.errstate(invalid="ignore", divide="ignore"):
        class_acc = np.where(counts[None, :] > 0, correct / counts[None, :], np.nan).T
    accuracy = correct.sum(axis=1) / N
    if ids is None:
        ids = np.arange(N)
    return EvaluationReport(n_classes, K, accuracy, class_acc, counts, confusion,
                            _fingerprint(np.asarray(ids, dtype=np.int64), labels))


def evaluate_scores(scores: np.ndarray, labels: np.ndarray, n_classes: int,
                    ids: np.ndarray | None = None) -> EvaluationReport:
    """Like ``evaluate_predictions`` but from class scores of shape ``(K, N, C)``."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 3 or scores.shape[2] != n_classes:
        raise EvaluationError(f"scores must have shape (K, N, {n_classes}), got {scores.shape}")
    return evaluate_predictions(scores.argmax(axis=2), labels, n_classes, ids)


Scorer = Callable[[np.ndarray], np.ndarray]


def _score_all(model, raw: np.ndarray) -> np.ndarray:
    if hasattr(model, "scores_all"):
        return model.scores_all(raw)
    if callable(model):
        return model(raw)
    raise TypeError("model must be a ModelBundle or a callable returning (K, N, C) scores")


def _check_compatible(model, test: Dataset) -> None:
    dims = getattr(model, "dims", None)
    if dims is None:
        return
    if (dims.d_raw, dims.n_classes) != (test.d_raw, test.n_classes):
        raise EvaluationError(
            f"model expects d_raw={dims.d_raw}, C={dims.n_classes}; test set has d_raw={test.d_raw}, "
            f"C={test.n_classes}")


def evaluate(model, test: Dataset) -> EvaluationReport:
    """Score every prefix view of ``test``; ``model`` is a bundle or a scorer returning ``(K, N, C)``."""
    if len(test) == 0:
        raise EvaluationError("cannot evaluate an empty test set")
    _check_compatible(model, test)
    scores = _score_all(model, test.raw())
    return evaluate_scores(scores, test.labels(), test.n_classes, test.ids())


def _paired(test_a: Dataset, test_b: Dataset) -> tuple[np.ndarray, np.ndarray]:
    ia, ib = test_a.ids(), test_b.ids()
    if len(set(ia.tolist())) != len(ia) or len(set(ib.tolist())) != len(ib):
        raise EvaluationError("duplicate sequence ids in a fused test set")
    if set(ia.tolist()) != set(ib.tolist()):
        raise EvaluationError("fused test sets are not paired: sequence ids differ")
    oa, ob = np.argsort(ia, kind="stable"), np.argsort(ib, kind="stable")
    if not np.array_equal(test_a.labels()[oa], test_b.labels()[ob]):
        raise EvaluationError("fused test sets disagree on labels of paired sequences")
    return oa, ob


def evaluate_fused(model_a, model_b, test_a: Dataset, test_b: Dataset) -> EvaluationReport:
    """Two-stream evaluation: per view, the two models' class scores are summed."""
    if len(test_a) == 0:
        raise EvaluationError("cannot evaluate an empty test set")
    oa, ob = _paired(test_a, test_b)
    _check_compatible(model_a, test_a)
    _check_compatible(model_b, test_b)
    sa = _score_all(model_a, test_a.raw()[oa])
    sb = _score_all(model_b, test_b.raw()[ob])
    return evaluate_scores(fuse_scores(sa, sb)[1], test_a.labels()[oa], test_a.n_classes, test_a.ids()[oa])


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------


@dataclass
class ThresholdTable:
    ratios: tuple[float, ...]
    thresholds: tuple[float, ...]
    percent: np.ndarray  # (len(thresholds), len(ratios))

    def value(self, r: float, tau: float) -> float:
        return float(self.percent[self.thresholds.index(tau), self.ratios.index(r)])

    def format(self) -> str:
        head = "accuracy    " + "".join(f"r={r:<8g}" for r in self.ratios)
        lines = [head]
        for i, tau in enumerate(self.thresholds):
            lines.append(f">= {tau * 100:3.0f}%     " + "".join(f"{v:<10.2f}" for v in self.percent[i]))
        return "\n".join(lines)


def threshold_table(report: EvaluationReport, ratios: Sequence[float] = THRESHOLD_RATIOS,
                    thresholds: Sequence[float] = THRESHOLDS) -> ThresholdTable:
    """Percentage of classes whose accuracy at ratio ``r`` reaches each threshold."""
    present = report.class_counts > 0
    n = int(present.sum())
    out = np.zeros((len(thresholds), len(ratios)))
    for j, r in enumerate(ratios):
        col = report.class_accuracy[present, ratio_to_level(r, report.n_segments) - 1]
        for i, tau in enumerate(thresholds):
            out[i, j] = 100.0 * np.count_nonzero(col >= tau) / n if n else 0.0
    return ThresholdTable(tuple(ratios), tuple(thresholds), out)


@dataclass
class AblationTable:
    variants: list[str]
    ratios: tuple[float, ...]
    accuracy: np.ndarray  # (V, len(ratios))
    baseline: str

    @property
    def mean(self) -> np.ndarray:
        return self.accuracy.mean(axis=1)

    @property
    def delta(self) -> np.ndarray:
        """Mean accuracy of each variant minus the baseline's."""
        return self.mean - self.mean[self.variants.index(self.baseline)]

    def row(self, variant: str) -> dict[str, float]:
        i = self.variants.index(variant)
        out = {f"r={r:g}": float(a) for r, a in zip(self.ratios, self.accuracy[i])}
        out["mean"] = float(self.mean[i])
        out["delta"] = float(self.delta[i])
        return out

    def format(self) -> str:
        lines = ["variant     " + "".join(f"r={r:<8g}" for r in self.ratios) + "mean      delta"]
        for i, v in enumerate(self.variants):
            cells = "".join(f"{100 * a:<10.2f}" for a in self.accuracy[i])
            lines.append(f"{v:<12}{cells}{100 * self.mean[i]:<10.2f}{100 * self.delta[i]:+.2f}")
        return "\n".join(lines)


def compare_ablations(reports: Mapping[str, EvaluationReport], ratios: Sequence[float] = ABLATION_RATIOS,
                      baseline: str | None = None) -> AblationTable:
    """Per-variant accuracy at ``ratios``, their mean, and the difference to ``baseline``."""
    if not reports:
        raise EvaluationError("no reports to compare")
    names = list(reports)
    first = reports[names[0]]
    for name in names[1:]:
        rep = reports[name]
        if (rep.n_classes, rep.n_segments, rep.test_fingerprint) != (first.n_classes, first.n_segments,
                                                                     first.test_fingerprint):
            raise EvaluationError(f"report {name!r} was computed on a different test set than {names[0]!r}")
    baseline = names[0] if baseline is None else baseline
    if baseline not in reports:
        raise EvaluationError(f"baseline {baseline!r} is not among the reports")
    acc = np.array([[reports[v].accuracy_at(r) for r in ratios] for v in names])
    return AblationTable(names, tuple(ratios), acc, baseline)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------


def curve_csv(report: EvaluationReport) -> str:
    lines = ["ratio,accuracy"]
    for r, a in zip(report.ratios, report.accuracy):
        lines.append(f"{float(r)!r},{float(a)!r}")
    return "\n".join(lines) + "\n"


def confusion_csv(report: EvaluationReport) -> str:
    """One block per ratio: a ``# ratio=`` line followed by C rows of C counts."""
    blocks = []
    for k in range(report.n_segments):
        rows = [f"# ratio={float(report.ratios[k])!r}"]
        rows += [",".join(str(int(v)) for v in row) for row in report.confusion[k]]
        blocks.append("\n".join(rows))
    return "\n\n".join(blocks) + "\n"


def text_report(report: EvaluationReport, title: str = "evaluation") -> str:
    lines = [f"# {title}", f"classes={report.n_classes} segments={report.n_segments} "
             f"sequences={report.n_sequences}", "", "ratio  accuracy  class-mean"]
    for r, a, c in zip(report.ratios, report.accuracy, report.class_mean_accuracy):
        lines.append(f"{r:<6.2f} {100 * a:7.2f}  {100 * c:9.2f}")
    lines += [f"average {100 * report.average:.2f}", "", "## classes reaching accuracy thresholds (%)",
              threshold_table(report).format(), "", "## top-5 classes per ratio"]
    for r in THRESHOLD_RATIOS:
        top = ", ".join(f"class {c} ({100 * a:.2f})" for c, a in report.top_classes(r, 5))
        lines.append(f"r={r:g}: {top}")
    return "\n".join(lines) + "\n"


def write_report(report: EvaluationReport, out_dir, prefix: str = "eval", title: str | None = None) -> dict[str, Path]:
    """Write curve, confusion, text and JSON files; returns their paths by kind."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "curve": out / f"{prefix}_curve.csv",
        "confusion": out / f"{prefix}_confusion.csv",
        "text": out / f"{prefix}_report.txt",
        "json": out / f"{prefix}_report.json",
    }
    paths["curve"].write_text(curve_csv(report))
    paths["confusion"].write_text(confusion_csv(report))
    paths["text"].write_text(text_report(report, title or prefix))
    paths["json"].write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n")
    return paths


def load_report(path) -> EvaluationReport:
    try:
        return EvaluationReport.from_dict(json.loads(Path(path).read_text()))
    except (KeyError, TypeError, ValueError) as exc:
        raise EvaluationError(f"{path}: not a valid report file ({exc})") from exc
