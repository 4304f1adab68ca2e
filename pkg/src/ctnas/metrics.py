"""Classification metrics."""

import numpy as np


def confusion_matrix(y_true, y_pred, classes: int) -> np.ndarray:
    m = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(m, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return m


def accuracy(y_true, y_pred) -> float:
    y_true = np.asarray(y_true)
    if y_true.size == 0:
        raise ValueError("accuracy of an empty prediction set")
    return float(np.mean(y_true == np.asarray(y_pred)))


def cohen_kappa(y_true, y_pred, classes: int) -> float:
    """Chance-corrected agreement (p_o - p_e) / (1 - p_e)."""
    m = confusion_matrix(y_true, y_pred, classes).astype(np.float64)
    n = m.sum()
    if n == 0:
        raise ValueError("kappa of an empty prediction set")
    p_o = np.trace(m) / n
    p_e = float(m.sum(axis=0) @ m.sum(axis=1)) / (n * n)
    if p_e == 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return float((p_o - p_e) / (1.0 - p_e))
