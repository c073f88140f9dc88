"""Behavioural trust features and the sigmoid trust score.

Reads only agent records and trust parameters; nothing here knows about
covariance matrices or the optimizer.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .agents import AgentId, AgentRecord
from .errors import InsufficientDataError, InvalidInputError, UndefinedRateError


@dataclass(frozen=True)
class TrustParams:
    weights: tuple[float, float, float, float] = (1.5, 1.5, 2.0, 1.0)
    bias: float = 0.0
    window: int = 10
    embed_dim: int = 32
    threshold: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if len(self.weights) != 4 or any(w <= 0 for w in self.weights):
            raise InvalidInputError("trust weights must be four positive numbers")
        if self.window < 2:
            raise InvalidInputError("trust window must be at least 2")
        if self.embed_dim < 1:
            raise InvalidInputError("embed_dim must be at least 1")
        if not 0.0 < self.threshold < 1.0:
            raise InvalidInputError("threshold must lie in (0, 1)")


@dataclass(frozen=True)
class TrustReport:
    agent: AgentId
    f1: float
    f2: float
    f3: float
    f4: float
    score: float
    normalized_weight: float

    @property
    def features(self) -> np.ndarray:
        return np.array([self.f1, self.f2, self.f3, self.f4])


def _pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    # Treat variance at rounding-noise level as zero.
    if sxx <= 1e-24 * max(1.0, float(x @ x)) or syy <= 1e-24 * max(1.0, float(y @ y)):
        return 0.0
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def feature_f1(records: Sequence[AgentRecord]) -> float:
    """Correlation between stated sentiment and net position change."""
    if len(records) < 2:
        raise InsufficientDataError("f1 needs a window of at least 2 records")
    return _pearson([r.stated_sentiment for r in records], [r.position_change for r in records])


def _sign(x: float) -> int:
    return int(x > 0) - int(x < 0)


def realized_pnl(records: Sequence[AgentRecord], peg_series: Sequence[float]) -> np.ndarray:
    """Per-step profit of each action valued at par: buying below par gains."""
    if len(peg_series) < len(records):
        raise InvalidInputError("peg series shorter than the record window")
    return np.array([r.quantity * peg_series[i] for i, r in enumerate(records)])


def feature_f2(records: Sequence[AgentRecord], pnl_series: Sequence[float]) -> float:
    """Share of steps that were profitable or matched the stated belief."""
    if len(records) != len(pnl_series):
        raise InvalidInputError("pnl series must align with the record window")
    if not records:
        raise InsufficientDataError("f2 needs a non-empty window")
    hits = sum(
        1
        for r, pnl in zip(records, pnl_series)
        if pnl > 0 or _sign(r.stated_sentiment) == _sign(r.position_change)
    )
    return hits / len(records)


def _panic_bucket(p: float) -> str:
    return "lo" if p < 1 / 3 else "mid" if p < 2 / 3 else "hi"


def _quantity_edges(windows: Sequence[Sequence[AgentRecord]]) -> tuple[float, float]:
    sizes = np.array([abs(r.quantity) for w in windows for r in w if r.quantity != 0.0])
    if sizes.size == 0:
        return (0.0, 0.0)
    lo, hi = np.quantile(sizes, [1 / 3, 2 / 3])
    return float(lo), float(hi)


def _tokens(records: Sequence[AgentRecord], edges: tuple[float, float]) -> list[str]:
    out = []
    for r in records:
        if r.action_type.value == "Hold":
            # A hold touches no asset and moves no size.
            out.append(f"{r.step}|Hold|{_panic_bucket(r.panic_level)}")
            continue
        q = r.quantity
        if q == 0.0:
            bucket = "0"
        else:
            mag = abs(q)
            size = "S" if mag <= edges[0] else "M" if mag <= edges[1] else "L"
            bucket = ("+" if q > 0 else "-") + size
        out.append(f"{r.step}|{r.action_type.value}|{r.asset}|{bucket}|{_panic_bucket(r.panic_level)}")
    return out


def embed_population(windows: Sequence[Sequence[AgentRecord]], embed_dim: int = 32) -> np.ndarray:
    """Unit-norm behaviour embeddings, one row per window.

    Each record becomes one token (step, action, asset, signed size tercile,
    panic tercile). Windows are TF-IDF weighted over the population corpus and
    projected onto the leading right singular vectors of that corpus. When the
    corpus rank is at most ``embed_dim`` the projection keeps every pairwise
    angle; unused dimensions are zero.
    """
    n = len(windows)
    if n == 0:
        return np.zeros((0, embed_dim))
    edges = _quantity_edges(windows)
    docs = [Counter(_tokens(w, edges)) for w in windows]
    vocab = sorted(set().union(*docs))
    if not vocab:
        return np.zeros((n, embed_dim))
    column = {tok: j for j, tok in enumerate(vocab)}
    tf = np.zeros((n, len(vocab)))
    for i, doc in enumerate(docs):
        for tok, count in doc.items():
            tf[i, column[tok]] = count
    df = (tf > 0).sum(axis=0)
    idf = np.log((1.0 + n) / (1.0 + df)) + 1.0
    x = tf * idf
    _, s, vt = np.linalg.svd(x, full_matrices=False)
    k = min(embed_dim, int(np.sum(s > s[0] * 1e-12)) if s.size and s[0] > 0 else 0)
    out = np.zeros((n, embed_dim))
    if k:
        out[:, :k] = x @ vt[:k].T
    norms = np.linalg.norm(out, axis=1)
    nonzero = norms > 0
    out[nonzero] /= norms[nonzero, None]
    return out


def embed_history(
    records: Sequence[AgentRecord],
    corpus: Sequence[Sequence[AgentRecord]] | None = None,
    embed_dim: int = 32,
) -> np.ndarray:
    """Embedding of one window, fitted on ``corpus`` (default: the window alone)."""
    corpus = list(corpus) if corpus is not None else []
    return embed_population(corpus + [list(records)], embed_dim)[-1]


def feature_f3(index: int, embeddings: np.ndarray) -> float:
    """Largest cosine similarity to any other agent, floored at 0."""
    e = np.asarray(embeddings, dtype=float)
    if len(e) < 2:
        return 0.0
    sims = e @ e[index]
    sims[index] = -np.inf
    return float(min(1.0, max(0.0, sims.max())))


def feature_f4(records: Sequence[AgentRecord], peg_series: Sequence[float]) -> float:
    """Correlation of signed quantity with the next-step change in |peg deviation|."""
    if len(peg_series) < len(records) + 1:
        raise InsufficientDataError("peg series must cover the window plus one step")
    if len(records) < 2:
        raise InsufficientDataError("f4 needs a window of at least 2 records")
    peg = np.abs(np.asarray(peg_series[: len(records) + 1], dtype=float))
    return _pearson([r.quantity for r in records], np.diff(peg))


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def signed_features(f: Sequence[float]) -> np.ndarray:
    """Feature vector oriented so every weight rewards trustworthiness: (f1, f2, -f3, -f4)."""
    return np.array([f[0], f[1], -f[2], -f[3]], dtype=float)


def trust_score(f: Sequence[float], params: TrustParams | None = None) -> float:
    params = params or TrustParams()
    z = float(np.dot(params.weights, signed_features(f))) + params.bias
    return _sigmoid(z)


def trust_gradient(f: Sequence[float], params: TrustParams | None = None) -> np.ndarray:
    """Derivative of the trust score with respect to each weight."""
    params = params or TrustParams()
    t = trust_score(f, params)
    return t * (1.0 - t) * signed_features(f)


def score_population(
    windows: Mapping[AgentId, Sequence[AgentRecord]] | Sequence[Sequence[AgentRecord]],
    peg_series: Sequence[float],
    params: TrustParams | None = None,
) -> list[TrustReport]:
    """Score every agent's window. ``peg_series[i]`` is the peg seen by the i-th record."""
    params = params or TrustParams()
    window_list = list(windows.values()) if isinstance(windows, Mapping) else [list(w) for w in windows]
    if not window_list:
        return []
    embeddings = embed_population(window_list, params.embed_dim)
    raw = []
    for i, recs in enumerate(window_list):
        f1 = feature_f1(recs)
        f2 = feature_f2(recs, realized_pnl(recs, peg_series))
        f3 = feature_f3(i, embeddings)
        f4 = feature_f4(recs, peg_series)
        raw.append((recs[0].agent, f1, f2, f3, f4, trust_score((f1, f2, f3, f4), params)))
    total = sum(r[-1] for r in raw)
    return [TrustReport(a, f1, f2, f3, f4, s, s / total) for a, f1, f2, f3, f4, s in raw]


def uniform_reports(agents: Sequence[AgentId]) -> list[TrustReport]:
    """Reports with trust fixed at 1 (features unset), for the no-trust baseline."""
    n = len(agents)
    return [TrustReport(a, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0 / n) for a in agents]


def detection_metrics(
    reports: Sequence[TrustReport] | Sequence[float], labels: Sequence[bool], threshold: float
) -> tuple[float, float]:
    """(TPR, FPR) of flagging agents whose score is below ``threshold``."""
    scores = np.asarray([r.score if isinstance(r, TrustReport) else r for r in reports], dtype=float)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape:
        raise InvalidInputError("scores and labels must align")
    if not labels.any():
        raise UndefinedRateError("no adversarial agents: TPR undefined")
    if labels.all():
        raise UndefinedRateError("no benign agents: FPR undefined")
    flagged = scores < threshold
    return float(flagged[labels].mean()), float(flagged[~labels].mean())
