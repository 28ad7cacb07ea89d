"""Verification scoring and metric tables.

Scores are cosine similarities between embeddings; accept iff score >= t.
TAR@FAR uses the empirical score distributions with no interpolation: the
threshold for a FAR target is the smallest candidate score whose impostor
acceptance fraction does not exceed the target, where candidates are every
observed score plus one value above the maximum (the reject-all point).
FAR targets finer than 1/len(impostor) fall back to that most conservative
achievable operating point and are flagged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ProtocolError
from .network import MultiBranchModel
from .tensor import no_grad

DEFAULT_FAR_TARGETS = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1)

# machine-readable report rows are written in this exact order
REPORT_FIELDS = ("label", "far", "threshold", "tar")


@dataclass
class PairProtocol:
    """Verification trial list: (sample index a, sample index b, is_genuine)."""

    pairs: list[tuple[int, int, bool]]

    def __post_init__(self):
        genuine = impostor = 0
        for a, b, is_genuine in self.pairs:
            if a == b:
                raise ProtocolError(f"pair ({a}, {b}) compares a sample with itself")
            genuine += is_genuine
            impostor += not is_genuine
        if genuine == 0 or impostor == 0:
            raise ProtocolError(
                f"protocol needs both pair kinds, got {genuine} genuine / {impostor} impostor"
            )


@dataclass(frozen=True)
class TarPoint:
    threshold: float
    tar: float
    achievable: bool  # False when the FAR target is below 1/len(impostor)


@dataclass
class VerificationReport:
    genuine: np.ndarray
    impostor: np.ndarray
    tar_at_far: dict[float, TarPoint]
    roc: list[tuple[float, float]] = field(default_factory=list)


_BRANCHES = {"baseline": "fr", "fused": "fused"}


def embed_samples(model: MultiBranchModel, dataset, indices: Sequence[int],
                  branch: str = "fused", batch_size: int = 64) -> np.ndarray:
    """Embeddings for the given sample indices, row-aligned with ``indices``."""
    if branch not in _BRANCHES:
        raise ValueError(f"branch must be one of {sorted(_BRANCHES)}, got '{branch}'")
    net_branch = _BRANCHES[branch]
    rows = []
    with no_grad():
        for start in range(0, len(indices), batch_size):
            chunk = indices[start:start + batch_size]
            batch = np.stack([dataset.samples[i].image for i in chunk])
            out = model.forward(batch, branches=(net_branch,))
            emb = out.fr_embedding if net_branch == "fr" else out.fused_embedding
            rows.append(emb.data.astype(np.float64))
    return np.concatenate(rows, axis=0)


def score_pairs_from_embeddings(embeddings: np.ndarray, index_of: dict[int, int],
                                protocol: PairProtocol) -> tuple[np.ndarray, np.ndarray]:
    """Cosine score per pair given an embedding matrix and sample->row map."""
    norms = np.linalg.norm(embeddings, axis=1)
    if (norms == 0).any():
        raise ValueError("degenerate embedding: zero norm")
    unit = embeddings / norms[:, None]
    genuine, impostor = [], []
    for a, b, is_genuine in protocol.pairs:
        score = float(unit[index_of[a]] @ unit[index_of[b]])
        (genuine if is_genuine else impostor).append(score)
    return np.array(genuine), np.array(impostor)


def score_pairs(model: MultiBranchModel, dataset, protocol: PairProtocol,
                branch: str = "fused") -> tuple[np.ndarray, np.ndarray]:
    """Genuine and impostor cosine scores in protocol order."""
    needed = sorted({i for a, b, _ in protocol.pairs for i in (a, b)})
    embeddings = embed_samples(model, dataset, needed, branch)
    index_of = {sample: row for row, sample in enumerate(needed)}
    return score_pairs_from_embeddings(embeddings, index_of, protocol)


def tar_at_far(genuine, impostor, far_targets: Iterable[float]) -> dict[float, TarPoint]:
    """Operating points for each FAR target; see the module docstring."""
    g = np.asarray(genuine, dtype=np.float64)
    imp = np.sort(np.asarray(impostor, dtype=np.float64))
    if g.size == 0 or imp.size == 0:
        raise ValueError("tar_at_far needs non-empty genuine and impostor score lists")
    targets = list(far_targets)
    for f in targets:
        if not (0.0 < f <= 1.0):
            raise ValueError(f"FAR target must be in (0, 1], got {f}")
    g_sorted = np.sort(g)
    candidates = np.unique(np.concatenate([g_sorted, imp]))
    candidates = np.append(candidates, candidates[-1] + 1.0)
    far = (imp.size - np.searchsorted(imp, candidates, side="left")) / imp.size
    result = {}
    for f in targets:
        idx = int(np.argmax(far <= f))  # far is non-increasing; first hit
        t = float(candidates[idx])
        tar = float((g_sorted.size - np.searchsorted(g_sorted, t, side="left")) / g_sorted.size)
        result[f] = TarPoint(threshold=t, tar=tar, achievable=f >= 1.0 / imp.size)
    return result


def roc_points(genuine, impostor) -> list[tuple[float, float]]:
    """Empirical (FAR, TAR) step curve over all candidate thresholds."""
    g = np.sort(np.asarray(genuine, dtype=np.float64))
    imp = np.sort(np.asarray(impostor, dtype=np.float64))
    candidates = np.unique(np.concatenate([g, imp]))
    candidates = np.append(candidates, candidates[-1] + 1.0)
    far = (imp.size - np.searchsorted(imp, candidates, side="left")) / imp.size
    tar = (g.size - np.searchsorted(g, candidates, side="left")) / g.size
    return [(float(f), float(t)) for f, t in zip(far, tar)]


def verification_report(genuine, impostor,
                        far_targets: Iterable[float] = DEFAULT_FAR_TARGETS) -> VerificationReport:
    return VerificationReport(
        genuine=np.asarray(genuine, dtype=np.float64),
        impostor=np.asarray(impostor, dtype=np.float64),
        tar_at_far=tar_at_far(genuine, impostor, far_targets),
        roc=roc_points(genuine, impostor),
    )


def accuracy_from_probs(probs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-attribute accuracy of thresholded probabilities.

    Prediction is positive when p >= 0.5 (ties predict positive).
    """
    if probs.shape != targets.shape:
        raise ValueError(f"probs {probs.shape} vs targets {targets.shape}")
    preds = probs >= 0.5
    return (preds == (targets > 0.5)).mean(axis=0)


def attribute_accuracy(model: MultiBranchModel, dataset,
                       indices: Optional[Sequence[int]] = None) -> dict[str, float]:
    """Accuracy per attribute over the eval split (or the given indices)."""
    if indices is None:
        indices = dataset.eval_indices
    names = model.cfg.attribute_names
    probs_rows, target_rows = [], []
    with no_grad():
        for start in range(0, len(indices), 64):
            chunk = indices[start:start + 64]
            batch = np.stack([dataset.samples[i].image for i in chunk])
            out = model.forward(batch, branches=("sb",))
            probs_rows.append(out.sb_probs.data.astype(np.float64))
            target_rows.append(np.stack(
                [dataset.samples[i].attributes[:len(names)] for i in chunk]
            ).astype(np.float64))
    acc = accuracy_from_probs(np.concatenate(probs_rows), np.concatenate(target_rows))
    return {name: float(a) for name, a in zip(names, acc)}


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------

def format_verification_table(rows: list[tuple[str, dict[float, TarPoint]]],
                              far_targets: Sequence[float]) -> str:
    """Aligned text table: one row per label, one TAR column per FAR target."""
    label_width = max(16, max((len(label) for label, _ in rows), default=0) + 2)
    header = "method".ljust(label_width) + "".join(f"{f:>12.0e}" for f in far_targets)
    lines = [header, "-" * len(header)]
    for label, table in rows:
        cells = []
        for f in far_targets:
            point = table[f]
            flag = "" if point.achievable else "*"
            cells.append(f"{point.tar * 100:>11.2f}{flag or ' '}")
        lines.append(label.ljust(label_width) + "".join(cells))
    lines.append("TAR in %; * marks FAR targets below empirical resolution.")
    return "\n".join(lines)


def report_records(label: str, report: VerificationReport) -> list[tuple]:
    """Rows (label, far, threshold, tar) for the machine-readable report."""
    return [
        (label, far, point.threshold, point.tar)
        for far, point in sorted(report.tar_at_far.items())
    ]


def write_report_csv(path, records: Iterable[tuple]) -> None:
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_FIELDS)
        for row in records:
            writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def ablation_report(results: list[tuple[str, VerificationReport]],
                    far_targets: Sequence[float] = DEFAULT_FAR_TARGETS) -> tuple[str, list[tuple]]:
    """Text table plus machine-readable records for a set of labelled runs."""
    rows = [(label, report.tar_at_far) for label, report in results]
    text = format_verification_table(rows, far_targets)
    records = []
    for label, report in results:
        records.extend(report_records(label, report))
    return text, records
