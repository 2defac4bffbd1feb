"""Cost matrices and the two training losses.

The ordinal loss is the smooth one-sided regression (SOSR) loss. For a bag of
true grade ``y`` with predicted risk vector ``r`` and cost table ``C``::

    loss = sum_k softplus(s_k * (r_k - C[y, k])),   s_k = +1 if k == y else -1

so the risk of the true class is pushed below its (zero) cost and every other
risk is pushed above its misclassification cost. The prediction is the class
with the lowest risk. The batch loss is the sum of per-bag losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .numerics import ContractError, sigmoid, softmax, softplus

DEFAULT_CLASS_NAMES = ("benign", "low_grade", "high_grade", "carcinoma")

_CUSTOM_4 = np.array(
    [
        [0.0, 0.1, 0.7, 1.0],
        [0.1, 0.0, 0.3, 0.7],
        [0.7, 0.3, 0.0, 0.3],
        [1.0, 0.7, 0.3, 0.0],
    ]
)


@dataclass
class CostMatrix:
    entries: np.ndarray
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        m = np.asarray(self.entries, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 2:
            raise ContractError(f"cost matrix must be square with n >= 2, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ContractError("cost matrix entries must be finite")
        if np.any(np.diag(m) != 0.0):
            raise ContractError("cost matrix diagonal must be zero")
        if m.min() < 0.0 or m.max() > 1.0:
            raise ContractError("cost matrix entries must lie in [0, 1]")
        self.entries = m
        if not self.class_names:
            n = m.shape[0]
            self.class_names = list(DEFAULT_CLASS_NAMES) if n == 4 else [f"class_{i}" for i in range(n)]
        if len(self.class_names) != m.shape[0]:
            raise ContractError("one class name per row is required")

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def __getitem__(self, idx):
        return self.entries[idx]

    def is_symmetric(self) -> bool:
        return bool(np.array_equal(self.entries, self.entries.T))


def builtin_cost_matrix(kind: str, n: int = 4) -> CostMatrix:
    """Return the expert ``custom`` table (n=4 only) or a ``linear`` one.

    The linear table is ``|i - j| / (n - 1)`` truncated to two decimals, which
    gives the familiar 0.33 / 0.66 entries for four classes.
    """
    if kind == "custom":
        if n != 4:
            raise ContractError("the custom cost matrix is only defined for 4 classes")
        return CostMatrix(_CUSTOM_4.copy())
    if kind == "linear":
        if n < 2:
            raise ContractError("need at least two classes")
        i, j = np.indices((n, n))
        # floor-style truncation keeps 2/3 at 0.66 rather than 0.67
        entries = np.floor(np.abs(i - j) / (n - 1) * 100 + 1e-9) / 100
        return CostMatrix(entries)
    raise ContractError(f"unknown cost matrix kind {kind!r} (expected 'custom' or 'linear')")


def load_cost_matrix(path) -> CostMatrix:
    """Read an n x n comma-separated table, one row per line."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            rows.append([float(tok) for tok in line.split(",")])
        except ValueError as exc:
            raise ContractError(f"{path}:{lineno}: not a row of numbers") from exc
    if not rows or any(len(r) != len(rows) for r in rows):
        raise ContractError(f"{path}: expected a square table")
    return CostMatrix(np.array(rows))


def save_cost_matrix(cm: CostMatrix, path) -> None:
    lines = [",".join(repr(float(x)) for x in row) for row in cm.entries]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class LossConfig:
    kind: str = "sosr"
    cost_matrix: Optional[CostMatrix] = None

    def __post_init__(self) -> None:
        if self.kind not in ("sosr", "cross_entropy"):
            raise ContractError(f"unknown loss kind {self.kind!r}")
        if self.kind == "sosr" and self.cost_matrix is None:
            self.cost_matrix = builtin_cost_matrix("custom")

    def check(self, n_classes: int) -> None:
        if self.kind == "sosr" and self.cost_matrix.n != n_classes:
            raise ContractError(
                f"cost matrix is {self.cost_matrix.n}x{self.cost_matrix.n} but the model has {n_classes} classes"
            )

    def value_and_grad(self, output: np.ndarray, true_class: int) -> tuple[float, np.ndarray]:
        """Loss and its gradient w.r.t. the network output."""
        if self.kind == "sosr":
            return sosr_loss(output, true_class, self.cost_matrix), sosr_gradient(output, true_class, self.cost_matrix)
        return cross_entropy_loss(output, true_class)

    def value(self, output: np.ndarray, true_class: int) -> float:
        if self.kind == "sosr":
            return sosr_loss(output, true_class, self.cost_matrix)
        return cross_entropy_loss(output, true_class)[0]


def _sosr_margins(risk, true_class: int, cm: CostMatrix) -> tuple[np.ndarray, np.ndarray]:
    r = np.asarray(risk, dtype=np.float64)
    if r.ndim != 1 or r.size != cm.n:
        raise ContractError(f"risk vector has length {r.size}, cost matrix is {cm.n}x{cm.n}")
    if not 0 <= true_class < cm.n:
        raise ContractError(f"class index {true_class} out of range for {cm.n} classes")
    signs = -np.ones(cm.n)
    signs[true_class] = 1.0
    return signs, signs * (r - cm.entries[true_class])


def sosr_loss(risk, true_class: int, cm: CostMatrix) -> float:
    _, margins = _sosr_margins(risk, true_class, cm)
    return float(softplus(margins).sum())


def sosr_gradient(risk, true_class: int, cm: CostMatrix) -> np.ndarray:
    signs, margins = _sosr_margins(risk, true_class, cm)
    return signs * sigmoid(margins)


def cross_entropy_loss(logits, true_class: int) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy on raw logits; returns ``(loss, d loss / d logits)``."""
    z = np.asarray(logits, dtype=np.float64)
    if not 0 <= true_class < z.size:
        raise ContractError(f"class index {true_class} out of range for {z.size} classes")
    shifted = z - z.max()
    log_norm = np.log(np.exp(shifted).sum())
    loss = float(log_norm - shifted[true_class])
    grad = softmax(z)
    grad[true_class] -= 1.0
    return loss, grad


def batch_sosr_loss(risks: Sequence, labels: Sequence[int], cm: CostMatrix) -> float:
    """Sum of per-example SOSR losses over a batch."""
    return float(sum(sosr_loss(r, int(y), cm) for r, y in zip(risks, labels)))
