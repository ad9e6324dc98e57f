"""Checkpoints: a single ``.npz`` with every array plus a JSON metadata blob.

Holds student and teacher parameters, momentum buffers, queue contents,
threshold state, iteration counter and the state of every named RNG, which is
enough for bit-exact resume.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .diffcore import SGD, Network, SgdConfig
from .scomatch import OODMemoryQueue, ThresholdController, TrainState

CHECKPOINT_VERSION = 1


def save_checkpoint(path, state: TrainState, extra: dict | None = None) -> None:
    s = state.student
    meta = {
        "version": CHECKPOINT_VERSION,
        "network": {"in_dim": s.in_dim, "hidden": list(s.hidden), "num_classes": s.num_classes,
                    "aux_classes": s.aux_classes},
        "sgd": vars(state.optimizer.config),
        "iteration": state.iteration,
        "rngs": {k: g.bit_generator.state for k, g in state.rngs.items()},
        "controller": vars(state.controller) if state.controller else None,
        "queue": None,
        "extra": extra or {},
    }
    arrays = {}
    for i, p in enumerate(state.student.params()):
        arrays[f"student_{i}"] = p
    for i, p in enumerate(state.teacher.params()):
        arrays[f"teacher_{i}"] = p
    for i, b in enumerate(state.optimizer.buffers):
        arrays[f"momentum_{i}"] = b
    if state.queue is not None:
        meta["queue"] = {"capacity": state.queue.capacity, "dim": state.queue.dim,
                         "tags": state.queue.tags()}
        arrays["queue_features"] = state.queue.features()
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    tmp = Path(str(path) + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[TrainState, dict]:
    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        net = meta["network"]
        student = Network(net["in_dim"], net["hidden"], net["num_classes"], None, net["aux_classes"])
        n = len(student.params())
        student.load_params([z[f"student_{i}"] for i in range(n)])
        teacher = student.copy()
        teacher.load_params([z[f"teacher_{i}"] for i in range(n)])
        opt = SGD(student.params(), SgdConfig(**meta["sgd"]))
        for i, b in enumerate(opt.buffers):
            b[...] = z[f"momentum_{i}"]
        rngs = {}
        for name, st in meta["rngs"].items():
            g = np.random.Generator(np.random.PCG64())
            g.bit_generator.state = st
            rngs[name] = g
        state = TrainState(student, teacher, opt, rngs, iteration=meta["iteration"])
        if meta["controller"] is not None:
            state.controller = ThresholdController(**meta["controller"])
        if meta["queue"] is not None:
            q = meta["queue"]
            state.queue = OODMemoryQueue(q["capacity"], q["dim"])
            state.queue.push(z["queue_features"], q["tags"])
    return state, meta["extra"]
