"""Evaluation harnesses: similar-command retrieval (MRR@K / Top@K),
gene-pool malicious-command detection (Mann-Whitney AUC), and the
seven-command classification benchmark.

Scores and metrics use fixed summation orders, so repeated runs over
the same inputs are bit-identical.
"""

from __future__ import annotations

import logging
import math
import random
import string
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import CommandLine, canonical_dedup_key
from .embedding import EmbeddingCache, embed_batch
from .jsonl import read_records

logger = logging.getLogger(__name__)

# A technique must have at least this many commands to take part in the
# detection benchmark; below that the pool/query split degenerates.
MIN_TECHNIQUE_SIZE = 9


@dataclass(frozen=True)
class RetrievalCase:
    """One retrieval query: its true positive and the negative pool."""

    query: CommandLine
    positive: CommandLine
    negatives: tuple[CommandLine, ...]

    def __post_init__(self) -> None:
        negative_texts = {n.text for n in self.negatives}
        if self.positive.text in negative_texts:
            raise ValueError("positive must not appear among the negatives")
        if self.query.text in negative_texts:
            raise ValueError("query must not appear among the negatives")


def rank_from_scores(positive_score: float, negative_scores: Iterable[float]) -> int:
    """1-based rank by descending score; ties count against the positive."""
    return 1 + sum(1 for s in negative_scores if s >= positive_score)


def rank_of_positive(case: RetrievalCase, scorer: Callable[[CommandLine], float]) -> int:
    """Rank of the positive among {positive} union negatives under scorer."""
    positive_score = scorer(case.positive)
    return rank_from_scores(positive_score, (scorer(n) for n in case.negatives))


def _check_ranks(ranks: Sequence[int], k: int) -> None:
    if not ranks:
        raise ValueError("cannot aggregate an empty list of ranks")
    if k < 1:
        raise ValueError("K must be >= 1")
    for rank in ranks:
        if rank < 1:
            raise ValueError(f"ranks are 1-based, got {rank}")


def mrr_at_k(ranks: Sequence[int], k: int) -> float:
    """Mean reciprocal rank, zero beyond K, as a percentage."""
    _check_ranks(ranks, k)
    return 100.0 * sum(1.0 / r if r <= k else 0.0 for r in ranks) / len(ranks)


def top_at_k(ranks: Sequence[int], k: int) -> float:
    """Share of cases ranked within the top K, as a percentage."""
    _check_ranks(ranks, k)
    return 100.0 * sum(1 for r in ranks if r <= k) / len(ranks)


@dataclass(frozen=True)
class RetrievalReport:
    ranks: tuple[int, ...]
    metrics: dict[str, float]


def load_retrieval_cases(
    testset_path: str | Path,
    corpus: Sequence[CommandLine],
) -> list[RetrievalCase]:
    """Read {query, positive, negative_ids} records; ids index ``corpus``."""
    cases: list[RetrievalCase] = []
    for lineno, record in enumerate(read_records(testset_path), start=1):
        for key in ("query", "positive", "negative_ids"):
            if key not in record:
                raise ValueError(f"{testset_path}:{lineno}: missing field {key!r}")
        negatives = []
        for negative_id in record["negative_ids"]:
            if not 0 <= negative_id < len(corpus):
                raise ValueError(
                    f"{testset_path}:{lineno}: negative id {negative_id} outside "
                    f"corpus of {len(corpus)}"
                )
            negatives.append(corpus[negative_id])
        cases.append(
            RetrievalCase(
                query=CommandLine(record["query"]),
                positive=CommandLine(record["positive"]),
                negatives=tuple(negatives),
            )
        )
    return cases


def evaluate_retrieval(
    cases: Sequence[RetrievalCase],
    backend,
    ks: Sequence[int] = (3, 10),
    adapter=None,
    cache: EmbeddingCache | None = None,
) -> RetrievalReport:
    """Cosine-score every case and aggregate MRR@K / Top@K per K.

    ``adapter`` is any object with a ``transform`` method over row
    vectors (identity when None).
    """
    if not cases:
        raise ValueError("no retrieval cases given")
    texts: list[str] = []
    for case in cases:
        texts.append(case.query.text)
        texts.append(case.positive.text)
        texts.extend(n.text for n in case.negatives)
    unique_texts = list(dict.fromkeys(texts))
    matrix = embed_batch(backend, unique_texts, cache)
    if adapter is not None:
        matrix = adapter.transform(matrix)
    row = {text: i for i, text in enumerate(unique_texts)}

    ranks: list[int] = []
    for case in cases:
        query_vector = matrix[row[case.query.text]]
        positive_score = float(query_vector @ matrix[row[case.positive.text]])
        negative_rows = matrix[[row[n.text] for n in case.negatives]]
        negative_scores = negative_rows @ query_vector
        ranks.append(rank_from_scores(positive_score, negative_scores))
    metrics: dict[str, float] = {}
    for k in ks:
        metrics[f"mrr@{k}"] = mrr_at_k(ranks, k)
        metrics[f"top@{k}"] = top_at_k(ranks, k)
    return RetrievalReport(ranks=tuple(ranks), metrics=metrics)


@dataclass(frozen=True)
class Technique:
    """One technique id and its command lines, in file order."""

    technique_id: str
    commands: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.technique_id:
            raise ValueError("technique_id must not be empty")
        keys = [canonical_dedup_key(c) for c in self.commands]
        if len(set(keys)) != len(keys):
            raise ValueError(f"technique {self.technique_id}: duplicate commands")

    @property
    def size(self) -> int:
        return len(self.commands)


class TechniqueCorpus:
    """All techniques of the detection benchmark, order-preserving."""

    def __init__(self, techniques: Sequence[Technique]) -> None:
        ids = [t.technique_id for t in techniques]
        if len(set(ids)) != len(ids):
            raise ValueError("technique ids must be unique")
        self.techniques = tuple(techniques)

    def __len__(self) -> int:
        return len(self.techniques)

    @property
    def all_commands(self) -> list[str]:
        """Union of every technique's commands, in corpus order."""
        return [c for t in self.techniques for c in t.commands]


def load_technique_corpus(path: str | Path) -> TechniqueCorpus:
    """Read {technique_id, command} records grouped by technique id.

    Records of one technique keep their file order; techniques appear in
    order of first occurrence.
    """
    grouped: dict[str, list[str]] = {}
    for lineno, record in enumerate(read_records(path), start=1):
        for key in ("technique_id", "command"):
            if key not in record:
                raise ValueError(f"{path}:{lineno}: missing field {key!r}")
        grouped.setdefault(record["technique_id"], []).append(record["command"])
    return TechniqueCorpus(
        [Technique(technique_id, tuple(commands)) for technique_id, commands in grouped.items()]
    )


@dataclass(frozen=True)
class GenePoolSplit:
    """Reference-versus-query split of one technique at sample rate r.

    ``pool`` is the technique's first ceil((r/100) * size) commands in
    corpus order, ``queries`` the remainder.  ``candidates`` is every
    corpus command outside the pool and ``negatives`` every corpus
    command outside the technique; both keep corpus order and may repeat
    texts when different techniques share a command.
    """

    technique_id: str
    sample_rate: float
    pool: tuple[str, ...]
    queries: tuple[str, ...]
    candidates: tuple[str, ...]
    negatives: tuple[str, ...]


def _ceil_fraction(rate: float, size: int) -> int:
    # Exact integer arithmetic when the rate is integral; 20% of 10 must
    # never become ceil(2.0000000000000004) = 3.
    if float(rate).is_integer():
        return (int(rate) * size + 99) // 100
    return math.ceil(rate / 100.0 * size)


def build_gene_pools(corpus: TechniqueCorpus, rate: float) -> list[GenePoolSplit]:
    """Split every eligible technique (size >= 9) at sample rate ``rate``."""
    if not 0 < rate < 100:
        raise ValueError(f"sample rate must be strictly between 0 and 100, got {rate}")
    splits: list[GenePoolSplit] = []
    for technique in corpus.techniques:
        if technique.size < MIN_TECHNIQUE_SIZE:
            continue
        pool_size = _ceil_fraction(rate, technique.size)
        pool = technique.commands[:pool_size]
        queries = technique.commands[pool_size:]
        pool_set = set(pool)
        candidates = tuple(
            c for t in corpus.techniques for c in t.commands
            if not (t.technique_id == technique.technique_id and c in pool_set)
        )
        negatives = tuple(
            c for t in corpus.techniques if t.technique_id != technique.technique_id
            for c in t.commands
        )
        splits.append(
            GenePoolSplit(
                technique_id=technique.technique_id,
                sample_rate=rate,
                pool=pool,
                queries=queries,
                candidates=candidates,
                negatives=negatives,
            )
        )
    return splits


def malicious_score(
    command: str,
    split: GenePoolSplit,
    backend,
    cache: EmbeddingCache | None = None,
) -> float:
    """Maximum cosine similarity between the command and the pool."""
    if not split.pool:
        raise ValueError(f"technique {split.technique_id}: empty gene pool")
    matrix = embed_batch(backend, [command, *split.pool], cache)
    return float(np.max(matrix[1:] @ matrix[0]))


def mann_whitney_auc(
    positive_scores: Sequence[float],
    negative_scores: Sequence[float],
) -> float:
    """ROC AUC as the Mann-Whitney statistic with midrank tie handling.

    Algebraically identical to exhaustive pair counting with ties worth
    one half, including in floating point (ranks are halves of
    integers, exact in binary).
    """
    positives = np.asarray(positive_scores, dtype=np.float64)
    negatives = np.asarray(negative_scores, dtype=np.float64)
    if positives.size == 0 or negatives.size == 0:
        raise ValueError("AUC needs at least one positive and one negative score")
    combined = np.concatenate([positives, negatives])
    order = np.argsort(combined, kind="mergesort")
    sorted_values = combined[order]
    midranks = np.empty(combined.size, dtype=np.float64)
    i = 0
    while i < combined.size:
        j = i
        while j + 1 < combined.size and sorted_values[j + 1] == sorted_values[i]:
            j += 1
        midranks[order[i:j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    rank_sum = float(np.sum(midranks[: positives.size]))
    wins = rank_sum - positives.size * (positives.size + 1) / 2.0
    return wins / (positives.size * negatives.size)


def detection_auc(
    corpus: TechniqueCorpus,
    rate: float,
    backend,
    mode: str = "concatenated",
    cache: EmbeddingCache | None = None,
) -> float:
    """Gene-pool detection AUC over the whole corpus.

    Per technique, positives are its held-out queries and negatives are
    every other technique's commands, each scored by maximum pool
    similarity.  ``concatenated`` pools all scored items into a single
    AUC; ``averaged`` means the per-technique AUCs.
    """
    if mode not in ("concatenated", "averaged"):
        raise ValueError(f"unknown mode {mode!r}")
    splits = build_gene_pools(corpus, rate)
    if not splits:
        raise ValueError(
            f"no technique has >= {MIN_TECHNIQUE_SIZE} commands; nothing to evaluate"
        )
    unique_texts = list(dict.fromkeys(corpus.all_commands))
    matrix = embed_batch(backend, unique_texts, cache)
    row = {text: i for i, text in enumerate(unique_texts)}

    def pool_scores(texts: Sequence[str], pool: Sequence[str]) -> np.ndarray:
        pool_rows = matrix[[row[t] for t in pool]]
        target_rows = matrix[[row[t] for t in texts]]
        return (target_rows @ pool_rows.T).max(axis=1)

    all_positives: list[float] = []
    all_negatives: list[float] = []
    per_technique: list[float] = []
    for split in splits:
        if not split.queries:
            raise ValueError(f"technique {split.technique_id}: no query commands at rate {rate}")
        if not split.negatives:
            raise ValueError(f"technique {split.technique_id}: no negative commands")
        positives = pool_scores(split.queries, split.pool)
        negatives = pool_scores(split.negatives, split.pool)
        if mode == "concatenated":
            all_positives.extend(float(s) for s in positives)
            all_negatives.extend(float(s) for s in negatives)
        else:
            per_technique.append(mann_whitney_auc(positives, negatives))
    if mode == "concatenated":
        return mann_whitney_auc(all_positives, all_negatives)
    return float(np.mean(per_technique))


CLASS_COMMANDS: tuple[str, ...] = (
    "find",
    "robocopy",
    "msiexec",
    "rundll32",
    "sc query",
    "certutil",
    "print",
)

_ARGUMENT_ALPHABET = string.ascii_letters + string.digits


@dataclass(frozen=True)
class ClassificationDataset:
    """Balanced (label, text) records split half/half per class."""

    train: tuple[tuple[str, str], ...]
    test: tuple[tuple[str, str], ...]


def _random_argument(rng, decoy_probability: float) -> str:
    slots = []
    for _ in range(7):
        if rng.random() < decoy_probability:
            slots.append(rng.choice(CLASS_COMMANDS))
        else:
            length = rng.randint(1, 20)
            slots.append("".join(rng.choice(_ARGUMENT_ALPHABET) for _ in range(length)))
    return " ".join(slots)


def synth_classification_dataset(
    rng,
    per_command: int = 7000,
    decoy_probability: float = 0.5,
) -> ClassificationDataset:
    """Generate the seven-command benchmark: ``<command> '<argument>'``.

    Arguments are seven space-separated random alphanumeric strings of
    length 1 to 20; each slot is independently replaced by one of the
    seven command names with ``decoy_probability``, so decoys appear
    inside the quoted argument while the label stays the leading
    command.  Each class is split evenly into train and test.
    """
    if per_command < 2 or per_command % 2 != 0:
        raise ValueError("per_command must be an even number >= 2")
    if not 0 <= decoy_probability <= 1:
        raise ValueError("decoy_probability must be within [0, 1]")
    train: list[tuple[str, str]] = []
    test: list[tuple[str, str]] = []
    half = per_command // 2
    for command in CLASS_COMMANDS:
        lines = [
            (command, f"{command} '{_random_argument(rng, decoy_probability)}'")
            for _ in range(per_command)
        ]
        train.extend(lines[:half])
        test.extend(lines[half:])
    return ClassificationDataset(train=tuple(train), test=tuple(test))


DEFAULT_HYPER_GRID: tuple[dict[str, float], ...] = (
    {"l2": 1e-4, "learning_rate": 1.0, "iterations": 200},
    {"l2": 1e-3, "learning_rate": 1.0, "iterations": 200},
    {"l2": 1e-2, "learning_rate": 0.5, "iterations": 200},
)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shift = logits.max(axis=1, keepdims=True)
    exp = np.exp(logits - shift)
    return exp / exp.sum(axis=1, keepdims=True)


def _fit_multinomial(
    features: np.ndarray,
    class_indices: np.ndarray,
    num_classes: int,
    l2: float,
    learning_rate: float,
    iterations: int,
) -> np.ndarray:
    """Full-batch gradient descent on the multinomial cross-entropy.

    Returns (d+1, C) weights with the bias in the last row (never
    penalized).
    """
    n = features.shape[0]
    design = np.hstack([features, np.ones((n, 1))])
    weights = np.zeros((design.shape[1], num_classes))
    one_hot = np.zeros((n, num_classes))
    one_hot[np.arange(n), class_indices] = 1.0
    for _ in range(int(iterations)):
        probabilities = _softmax_rows(design @ weights)
        gradient = design.T @ (probabilities - one_hot) / n
        gradient[:-1] += l2 * weights[:-1]
        weights = weights - learning_rate * gradient
    return weights


def _predict(weights: np.ndarray, features: np.ndarray) -> np.ndarray:
    design = np.hstack([features, np.ones((features.shape[0], 1))])
    return np.argmax(design @ weights, axis=1)


def train_logreg(
    train_embeddings: np.ndarray,
    train_labels: Sequence[str],
    test_embeddings: np.ndarray,
    test_labels: Sequence[str],
    hyper_grid: Sequence[dict[str, float]] | None = None,
    rng=None,
) -> tuple[np.ndarray, float]:
    """Multinomial logistic-regression probe over fixed embeddings.

    Hyperparameters are chosen by accuracy on a random 20% slice of the
    training set (ties resolved toward the earlier grid entry), then the
    winner is refit on the full training set.  Returns the fitted
    weights and the test accuracy as a percentage.
    """
    if hyper_grid is None:
        hyper_grid = DEFAULT_HYPER_GRID
    if not hyper_grid:
        raise ValueError("hyper_grid must not be empty")
    if rng is None:
        rng = random.Random(0)
    train_x = np.asarray(train_embeddings, dtype=np.float64)
    test_x = np.asarray(test_embeddings, dtype=np.float64)
    if train_x.shape[0] != len(train_labels):
        raise ValueError("train embeddings and labels disagree in length")
    if test_x.shape[0] != len(test_labels):
        raise ValueError("test embeddings and labels disagree in length")
    classes = sorted(set(train_labels))
    if len(classes) < 2:
        raise ValueError("need at least two classes to train a classifier")
    class_index = {label: i for i, label in enumerate(classes)}
    for label in test_labels:
        if label not in class_index:
            raise ValueError(f"test label {label!r} never seen in training")
    train_y = np.asarray([class_index[label] for label in train_labels])
    test_y = np.asarray([class_index[label] for label in test_labels])

    order = list(range(train_x.shape[0]))
    rng.shuffle(order)
    val_count = max(1, round(0.2 * len(order)))
    if val_count >= len(order):
        raise ValueError("training set too small for a 20% validation slice")
    val_idx = order[:val_count]
    fit_idx = order[val_count:]

    best_accuracy = -1.0
    best_hyper = None
    for hyper in hyper_grid:
        weights = _fit_multinomial(
            train_x[fit_idx],
            train_y[fit_idx],
            len(classes),
            l2=hyper["l2"],
            learning_rate=hyper["learning_rate"],
            iterations=hyper["iterations"],
        )
        accuracy = float(np.mean(_predict(weights, train_x[val_idx]) == train_y[val_idx]))
        logger.debug("hyper %s: validation accuracy %.4f", hyper, accuracy)
        if accuracy > best_accuracy:
            best_accuracy = accuracy
            best_hyper = hyper
    assert best_hyper is not None
    weights = _fit_multinomial(
        train_x,
        train_y,
        len(classes),
        l2=best_hyper["l2"],
        learning_rate=best_hyper["learning_rate"],
        iterations=best_hyper["iterations"],
    )
    test_accuracy = 100.0 * float(np.mean(_predict(weights, test_x) == test_y))
    return weights, test_accuracy
