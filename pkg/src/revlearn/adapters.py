"""Adaptation operators over a frozen core.

Behavioral adaptation trains a removable low-rank module while the core stays
read-only; weight adaptation returns a new, different core. ``unload`` takes the
module out of the forward path, which is the only rollback that needs no
snapshot of the original parameters.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as _model
from .exceptions import (
    CompatibilityError,
    ConfigurationError,
    LifecycleError,
    NumericalDivergenceError,
    ProtocolError,
)
from .model import CoreParams, Prompt

logger = logging.getLogger(__name__)

DETACHED = "detached"
ATTACHED = "attached"
ELIMINATED = "eliminated"


@dataclass(frozen=True, eq=False)
class BehavioralModule:
    """Low-rank behavioral parameters, one ``(A, B)`` pair per adapted layer.

    Layer ``l`` in ``attach_map`` receives the additive delta ``B @ A`` with
    ``A`` of shape ``(rank, in)`` and ``B`` of shape ``(out, rank)``. Only
    modules in the attached or eliminated state take part in the forward pass.
    """

    A: tuple[np.ndarray, ...]
    B: tuple[np.ndarray, ...]
    rank: int
    attach_map: tuple[int, ...]
    train_seed: int = 0
    state: str = DETACHED
    elimination_rate: float | None = None
    _fingerprint: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "A", tuple(np.array(a, dtype=np.float64) for a in self.A))
        object.__setattr__(self, "B", tuple(np.array(b, dtype=np.float64) for b in self.B))
        object.__setattr__(self, "attach_map", tuple(int(l) for l in self.attach_map))
        for a in self.A + self.B:
            a.flags.writeable = False
        if not (len(self.A) == len(self.B) == len(self.attach_map)):
            raise CompatibilityError("A, B and attach_map must have equal length")
        if self.state not in (DETACHED, ATTACHED, ELIMINATED):
            raise LifecycleError(f"unknown state {self.state!r}")

    @property
    def is_active(self) -> bool:
        return self.state in (ATTACHED, ELIMINATED)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.A + self.B])

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))

    @property
    def fingerprint(self) -> str:
        if not self._fingerprint:
            h = hashlib.sha256()
            for a in self.A + self.B:
                h.update(repr(a.shape).encode())
                h.update(a.astype("<f8").tobytes())
            self._fingerprint.append(h.hexdigest())
        return self._fingerprint[0]

    def with_factors(self, A: Sequence[np.ndarray], B: Sequence[np.ndarray], **changes) -> "BehavioralModule":
        return replace(self, A=tuple(A), B=tuple(B), _fingerprint=[], **changes)

    def unflatten(self, flat: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
        out, pos = [], 0
        for a in self.A + self.B:
            out.append(flat[pos:pos + a.size].reshape(a.shape))
            pos += a.size
        k = len(self.A)
        return out[:k], out[k:]


@dataclass(frozen=True)
class AdaptationTask:
    """Shared objective for behavioral and weight-based adaptation.

    ``batch_size=None`` means full-batch gradient steps; otherwise each step
    draws a minibatch using ``seed``.
    """

    objective_prompts: tuple[tuple[Prompt, int], ...]
    steps: int = 150
    learning_rate: float = 0.5
    seed: int = 0
    batch_size: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "objective_prompts", tuple(self.objective_prompts))
        if not self.objective_prompts:
            raise ConfigurationError("AdaptationTask needs at least one objective prompt")
        if int(self.steps) < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        X = np.array([p.tokens for p, _ in self.objective_prompts], dtype=np.int64)
        y = np.array([t for _, t in self.objective_prompts], dtype=np.int64)
        return X, y

    def batches(self):
        X, y = self.arrays()
        if self.batch_size is None or self.batch_size >= len(y):
            for _ in range(self.steps):
                yield X, y
            return
        rng = np.random.default_rng(self.seed)
        for _ in range(self.steps):
            idx = rng.choice(len(y), size=self.batch_size, replace=False)
            yield X[idx], y[idx]


@dataclass(frozen=True)
class MutationSpec:
    alpha: float
    mode: str = "noise"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("noise", "finetune"):
            raise ConfigurationError(f"mode must be 'noise' or 'finetune', got {self.mode!r}")
        if not self.alpha >= 0:
            raise ConfigurationError(f"alpha must be non-negative, got {self.alpha}")


@dataclass(frozen=True)
class PerturbationSpec:
    radius: float
    samples: int = 5
    seed: int = 0

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigurationError(f"radius must be positive, got {self.radius}")
        if int(self.samples) < 1:
            raise ConfigurationError(f"samples must be >= 1, got {self.samples}")


def new_module(core: CoreParams, rank: int = 4, attach_map: Sequence[int] | None = None,
               seed: int = 0) -> BehavioralModule:
    """Fresh detached module with ``B = 0``, so attaching it is an exact no-op."""
    if rank < 1:
        raise ConfigurationError(f"rank must be >= 1, got {rank}")
    shapes = core.config.layer_shapes
    if attach_map is None:
        attach_map = range(len(shapes))
    attach_map = tuple(attach_map)
    rng = np.random.default_rng(seed)
    A, B = [], []
    for l in attach_map:
        if not 0 <= l < len(shapes):
            raise CompatibilityError(f"layer {l} does not exist (core has {len(shapes)} dense layers)")
        out_dim, in_dim = shapes[l]
        A.append(rng.standard_normal((rank, in_dim)) / np.sqrt(in_dim))
        B.append(np.zeros((out_dim, rank)))
    return BehavioralModule(A=tuple(A), B=tuple(B), rank=rank, attach_map=attach_map, train_seed=seed)


def check_compatible(core: CoreParams, module: BehavioralModule) -> None:
    shapes = core.config.layer_shapes
    for l, A, B in zip(module.attach_map, module.A, module.B):
        if not 0 <= l < len(shapes):
            raise CompatibilityError(f"module targets layer {l}, core has {len(shapes)} layers")
        out_dim, in_dim = shapes[l]
        if A.shape != (module.rank, in_dim) or B.shape != (out_dim, module.rank):
            raise CompatibilityError(f"layer {l}: A{A.shape}/B{B.shape} incompatible with W{shapes[l]}")


def attach(core: CoreParams, module: BehavioralModule) -> BehavioralModule:
    check_compatible(core, module)
    if module.is_active:
        return module
    return replace(module, state=ATTACHED)


def adapt_behavioral(core: CoreParams, module: BehavioralModule, task: AdaptationTask) -> BehavioralModule:
    """Train only the module's factors with plain SGD; the core is never written."""
    if not module.is_active:
        raise LifecycleError("adapt_behavioral needs an attached module")
    check_compatible(core, module)
    before = core.fingerprint
    A = [a.copy() for a in module.A]
    B = [b.copy() for b in module.B]
    current = module
    for X, y in task.batches():
        loss, (gA, gB) = _model.nll_and_grads(core, current, X, y, wrt="module")
        if not np.isfinite(loss):
            raise NumericalDivergenceError(f"non-finite loss {loss} during behavioral adaptation")
        for i in range(len(A)):
            A[i] -= task.learning_rate * gA[i]
            B[i] -= task.learning_rate * gB[i]
        current = module.with_factors(A, B)
    if core.fingerprint != before:
        raise ProtocolError("core parameters changed during behavioral adaptation")
    return current


def finetune_core(core: CoreParams, task: AdaptationTask) -> CoreParams:
    arrays = [a.copy() for a in core.arrays()]
    current = core
    for X, y in task.batches():
        loss, grads = _model.nll_and_grads(current, None, X, y, wrt="core")
        if not np.isfinite(loss):
            raise NumericalDivergenceError(f"non-finite loss {loss} during fine-tuning")
        for a, g in zip(arrays, grads):
            a -= task.learning_rate * g
        current = core.replace_arrays(arrays)
    return current


def layer_scales(core: CoreParams) -> list[float]:
    """Noise reference scale for each array: a bias uses its layer's weight std."""
    scales = [float(np.std(core.embedding))]
    for w in core.weights:
        s = float(np.std(w))
        scales.extend((s, s))
    return scales


def adapt_weights(core: CoreParams, spec: MutationSpec, task: AdaptationTask | None = None) -> CoreParams:
    """Weight-based adaptation. Returns a new core; ``core`` itself is untouched.

    Noise mode adds ``N(0, (alpha * sigma_layer)^2)`` to every entry, where
    ``sigma_layer`` is the empirical std of that layer's weight matrix.
    Fine-tune mode runs SGD on all core parameters against ``task``.
    """
    if spec.mode == "noise":
        if spec.alpha == 0:
            raise ConfigurationError("alpha = 0 makes noise mutation a no-op")
        rng = np.random.default_rng(spec.seed)
        arrays = [
            a + rng.normal(0.0, spec.alpha * s, size=a.shape)
            for a, s in zip(core.arrays(), layer_scales(core))
        ]
        return core.replace_arrays(arrays)
    if task is None:
        raise ConfigurationError("finetune mutation requires an AdaptationTask")
    return finetune_core(core, task)


def unload(module: BehavioralModule) -> BehavioralModule:
    if module.state == DETACHED:
        logger.info("unload called on an already detached module; no-op")
        return module
    return replace(module, state=DETACHED)


def eliminate(module: BehavioralModule, epsilon: float, seed: int = 0) -> BehavioralModule:
    """Zero a seeded uniformly random fraction ``epsilon`` of the module's scalar entries."""
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigurationError(f"epsilon must lie in [0, 1], got {epsilon}")
    if not module.is_active:
        raise LifecycleError("eliminate needs an attached module")
    flat = module.flat().copy()
    n_zero = int(round(epsilon * flat.size))
    rng = np.random.default_rng(seed)
    flat[rng.permutation(flat.size)[:n_zero]] = 0.0
    A, B = module.unflatten(flat)
    return module.with_factors(A, B, state=ELIMINATED, elimination_rate=float(epsilon))


def perturb(module: BehavioralModule, spec: PerturbationSpec) -> list[BehavioralModule]:
    """Independent copies ``phi + Delta`` with ``||Delta|| = radius * ||phi||``."""
    if not module.is_active:
        raise LifecycleError("perturb needs an attached module")
    base = module.flat()
    scale = np.linalg.norm(base)
    if scale == 0:
        logger.warning("behavioral parameters have zero norm; using absolute radius %g", spec.radius)
        scale = 1.0
    rng = np.random.default_rng(spec.seed)
    copies = []
    for _ in range(int(spec.samples)):
        direction = rng.standard_normal(base.size)
        delta = direction * (spec.radius * scale / np.linalg.norm(direction))
        A, B = module.unflatten(base + delta)
        copies.append(module.with_factors(A, B))
    return copies


def layer_stats(core: CoreParams) -> list[tuple[float, float]]:
    """Per-array (mean, std): the only information a snapshot-free rollback keeps."""
    return [(float(np.mean(a)), float(np.std(a))) for a in core.arrays()]


def rollback_heuristic(mutated: CoreParams, stats: Sequence[tuple[float, float]]) -> CoreParams:
    """Moment-match each mutated array back to the original per-array mean and std."""
    arrays = []
    for a, (mu0, sd0) in zip(mutated.arrays(), stats):
        sd = np.std(a)
        if sd == 0:
            arrays.append(np.full_like(a, mu0))
        else:
            arrays.append((a - np.mean(a)) * (sd0 / sd) + mu0)
    return mutated.replace_arrays(arrays)


_MAGIC = b"RLBM"
_VERSION = 1


def save_module(module: BehavioralModule, path) -> Path:
    """Write ``RLBM | u16 version | u32 header length | JSON header | float64 payload``."""
    header = {
        "rank": module.rank,
        "attach_map": list(module.attach_map),
        "train_seed": int(module.train_seed),
        "state": module.state,
        "elimination_rate": module.elimination_rate,
        "shapes": [list(a.shape) for a in module.A + module.B],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in module.A + module.B)
    path = Path(path)
    path.write_bytes(_MAGIC + struct.pack("<HI", _VERSION, len(blob)) + blob + payload)
    return path


def load_module(path) -> BehavioralModule:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ConfigurationError(f"{path} is not a behavioral module file")
    version, hlen = struct.unpack("<HI", raw[4:10])
    if version != _VERSION:
        raise ConfigurationError(f"unsupported module file version {version}")
    header = json.loads(raw[10:10 + hlen])
    pos = 10 + hlen
    arrays = []
    for shape in header["shapes"]:
        n = int(np.prod(shape))
        arrays.append(np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).copy())
        pos += 8 * n
    k = len(header["attach_map"])
    return BehavioralModule(
        A=tuple(arrays[:k]), B=tuple(arrays[k:]), rank=header["rank"],
        attach_map=tuple(header["attach_map"]), train_seed=header["train_seed"],
        state=header["state"], elimination_rate=header["elimination_rate"],
    )
