"""Open-set semi-supervised learning on a small numpy training core.

Modules:
    diffcore   dense layers, fused softmax cross-entropy, momentum SGD, EMA
    data       synthetic open-set clusters, IDX reader, splits, augmentation
    scomatch   OOD memory queue, curriculum OOD threshold, SCO self-training
    baselines  FixMatch and supervised-only loops
    metrics    close/open-set accuracy, AUC, queue and pseudo-label diagnostics
    harness    config-driven runs, comparison tables, ablations, CLI
"""

__version__ = "0.1.0"
