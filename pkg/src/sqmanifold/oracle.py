"""Statistical-query channel: queries, sessions and adversary policies.

An :class:`OracleSession` owns the hidden model.  Estimators only see answers
``a`` with ``|a - E[r]| <= tau``; the transcript records both so validity can
be asserted after the fact.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

CLIP_TOL = 1e-12
DEFAULT_BUDGET_CAP = 10 ** 7


class BudgetExhaustedError(RuntimeError):
    """Raised when a session would exceed its hard cap on answers."""


class ValidityError(AssertionError):
    """Raised when a transcript entry violates the tolerance."""


def _clip_values(values: np.ndarray, label: str) -> np.ndarray:
    excess = np.max(np.abs(values)) - 1.0 if values.size else 0.0
    if excess > CLIP_TOL:
        log.warning("query %s exceeded [-1, 1] by %.3g; clipping", label, excess)
    return np.clip(values, -1.0, 1.0)


class Query:
    """A bounded test function r: R^n -> [-1, 1].

    ``support`` (optional) is a region outside of which the evaluator is known to
    vanish; it is a hint for the expectation engine, not part of the semantics.
    """

    def __init__(self, evaluator: Callable, label: str = "query", support=None):
        self.evaluator = evaluator
        self.label = label
        self.support = support
        self.clipped = False

    def __call__(self, X) -> np.ndarray:
        raw = np.asarray(self.evaluator(np.atleast_2d(X)), dtype=float).reshape(-1)
        out = _clip_values(raw, self.label)
        if out is not raw and np.any(out != raw):
            self.clipped = True
        return out


class QueryFamily:
    """A batch of queries sharing an evaluator returning an (m, p) array.

    Answering a family issues ``p`` separate queries (one per column), each
    counted and logged; only the expectation is computed jointly.
    """

    def __init__(self, evaluator: Callable, labels, support=None):
        self.evaluator = evaluator
        self.labels = list(labels)
        self.support = support

    def __len__(self) -> int:
        return len(self.labels)

    def __call__(self, X) -> np.ndarray:
        vals = np.asarray(self.evaluator(np.atleast_2d(X)), dtype=float)
        return _clip_values(vals.reshape(len(vals), len(self.labels)), self.labels[0])


def constant_query(c: float, label: str = "constant") -> Query:
    return Query(lambda X: np.full(len(X), float(c)), label)


def ball_indicator(x0, h: float, label: str = "ball") -> Query:
    from .supports import ball

    x0 = np.asarray(x0, dtype=float)
    return Query(lambda X: (np.sum((X - x0) ** 2, axis=1) <= h * h).astype(float), label, ball(x0, h))


@dataclass
class TranscriptEntry:
    index: int
    label: str
    tau: float
    true_mean: float
    answer: float


# --- adversaries -----------------------------------------------------------------
class Adversary:
    """Maps a true mean to an answer, possibly looking at the transcript."""

    name = "adversary"

    def perturb(self, true_mean: float, tau: float, label: str, transcript) -> float:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"policy": self.name}


class ExactAdversary(Adversary):
    name = "exact"

    def perturb(self, true_mean, tau, label, transcript):
        return float(true_mean)


def rounding_grid_value(t: float, tau: float) -> float:
    """Smallest grid value L_i = min(-1 + (2i+1) tau, 1) within tau of ``t``."""
    if tau <= 0:
        return float(t)
    i = max(0, math.ceil((t + 1.0) / (2.0 * tau) - 1.0 - 1e-12))
    return min(-1.0 + (2 * i + 1) * tau, 1.0)


class RoundingAdversary(Adversary):
    """Deterministic discrete oracle with at most 1 + floor(1/tau) outputs."""

    name = "rounding"

    def perturb(self, true_mean, tau, label, transcript):
        return rounding_grid_value(float(true_mean), tau)


def label_class(label: str) -> str:
    return label.split("[", 1)[0]


def alternate_by_class(label: str, transcript) -> float:
    """Default sign rule: flip the sign of the previous perturbation of the same label class."""
    cls = label_class(label)
    count = transcript.class_counts.get(cls, 0)
    return 1.0 if count % 2 == 0 else -1.0


class WorstSignAdversary(Adversary):
    """Answers true_mean + tau * s with a pluggable sign rule s(label, transcript)."""

    name = "worst-sign"

    def __init__(self, rule: Callable | None = None):
        self.rule = rule or alternate_by_class

    def perturb(self, true_mean, tau, label, transcript):
        s = float(np.sign(self.rule(label, transcript)) or 1.0)
        return float(true_mean) + tau * s


def make_adversary(spec) -> Adversary:
    if isinstance(spec, Adversary):
        return spec
    name = (spec or "exact").lower().replace("_", "-")
    table = {"exact": ExactAdversary, "rounding": RoundingAdversary,
             "worst-sign": WorstSignAdversary, "worstsign": WorstSignAdversary}
    if name not in table:
        raise ValueError(f"unknown adversary policy {spec!r}")
    return table[name]()


# --- sessions --------------------------------------------------------------------
class Transcript(list):
    """Ordered list of :class:`TranscriptEntry` with per-label-class counters."""

    def __init__(self):
        super().__init__()
        self.class_counts: dict[str, int] = {}

    def record(self, entry: TranscriptEntry) -> None:
        self.append(entry)
        cls = label_class(entry.label)
        self.class_counts[cls] = self.class_counts.get(cls, 0) + 1


class OracleSession:
    """Stateful STAT(tau) oracle over a hidden model.

    Parameters
    ----------
    model : ManifoldModel
        Hidden distribution; must implement ``expect(func, support)``.
    tau : float
        Tolerance.
    adversary : str or Adversary
        Answering policy.
    budget_cap : int
        Hard limit on the number of answers.
    """

    def __init__(self, model, tau: float, adversary="exact", budget_cap: int = DEFAULT_BUDGET_CAP, seed: int = 0):
        if tau < 0 or not math.isfinite(tau):
            raise ValueError("tau must be a finite nonnegative number")
        self._model = model
        self.tau = float(tau)
        self.adversary = make_adversary(adversary)
        self.budget_cap = int(budget_cap)
        self.seed = int(seed)
        self.transcript = Transcript()

    @property
    def budget_used(self) -> int:
        return len(self.transcript)

    @property
    def model(self):
        """Ground truth; reserved for evaluation and instrumentation."""
        return self._model

    def true_mean(self, query) -> np.ndarray:
        return self._model.expect(query, query.support)

    def _emit(self, label: str, mean: float) -> float:
        if self.budget_used >= self.budget_cap:
            raise BudgetExhaustedError(f"budget cap of {self.budget_cap} answers reached")
        ans = self.adversary.perturb(mean, self.tau, label, self.transcript)
        # the policy sees tau; clamp to the valid window in case a custom rule overshoots
        ans = float(min(max(ans, mean - self.tau), mean + self.tau))
        self.transcript.record(TranscriptEntry(self.budget_used, label, self.tau, float(mean), ans))
        return ans

    def answer(self, query: Query) -> float:
        return self._emit(query.label, float(self.true_mean(query)))

    def answer_family(self, family: QueryFamily) -> np.ndarray:
        if self.budget_used + len(family) > self.budget_cap:
            raise BudgetExhaustedError(f"budget cap of {self.budget_cap} answers reached")
        means = np.asarray(self._model.expect(family, family.support), dtype=float).reshape(-1)
        return np.array([self._emit(lbl, m) for lbl, m in zip(family.labels, means)])

    def check_validity(self, slack: float = 1e-12) -> None:
        for e in self.transcript:
            if abs(e.answer - e.true_mean) > e.tau + slack:
                raise ValidityError(f"answer {e.index} ({e.label}) off by {abs(e.answer - e.true_mean)} > tau")

    def digest(self) -> dict:
        h = hashlib.sha256()
        for e in self.transcript:
            h.update(f"{e.label}|{e.answer!r}\n".encode())
        return {"count": self.budget_used, "sha256": h.hexdigest()}

    def export_transcript(self, path, reveal: bool = False) -> None:
        with Path(path).open("w") as fh:
            for e in self.transcript:
                row = {"index": e.index, "label": e.label, "tau": e.tau, "answer": e.answer}
                if reveal:
                    row["true_mean"] = e.true_mean
                fh.write(json.dumps(row) + "\n")


def clutter_answer_lift(a, beta: float, q0_mean):
    """Convert an answer for the clutter mixture into an answer for the clean model."""
    if not 0.0 < beta <= 1.0:
        raise ValueError("beta must lie in (0, 1]")
    return (np.asarray(a, dtype=float) - (1.0 - beta) * np.asarray(q0_mean, dtype=float)) / beta


class ClutterLiftedSession:
    """Session facade turning a mixture oracle into a STAT(tau/beta) oracle for the clean model.

    The learner knows ``beta`` and the clutter distribution ``q0`` (an object with
    ``expect(func, support)``), so it can compute E_Q0[r] itself and lift each answer.
    Answers can leave [-1, 1]; routines only rely on their accuracy.
    """

    def __init__(self, inner: OracleSession, beta: float, q0):
        if not 0.0 < beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        self.inner = inner
        self.beta = float(beta)
        self.q0 = q0
        self.tau = inner.tau / self.beta
        self.lifted: list[float] = []

    @property
    def budget_used(self) -> int:
        return self.inner.budget_used

    @property
    def transcript(self):
        return self.inner.transcript

    @property
    def model(self):
        return self.inner.model.base

    def answer(self, query: Query) -> float:
        a = self.inner.answer(query)
        out = float(clutter_answer_lift(a, self.beta, self.q0.expect(query, query.support)))
        self.lifted.append(out)
        return out

    def answer_family(self, family: QueryFamily) -> np.ndarray:
        a = self.inner.answer_family(family)
        q0 = np.asarray(self.q0.expect(family, family.support), dtype=float).reshape(-1)
        out = clutter_answer_lift(a, self.beta, q0)
        self.lifted.extend(float(v) for v in out)
        return out

    def check_validity(self, slack: float = 1e-12) -> None:
        # validity for the clean model follows from mixture validity, since E_Q0 is computed exactly
        self.inner.check_validity(slack)
