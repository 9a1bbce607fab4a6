"""Deterministic feed-forward next-token scorer.

A prompt is a fixed-length sequence of token indices. Token embeddings are
averaged over the context, passed through tanh dense layers and a final
softmax over the vocabulary. Every dense layer ``l`` computes
``h @ W_l.T + b_l`` and, when a behavioral module is attached to it, adds the
low-rank term ``(h @ A_l.T) @ B_l.T``. The delta is added to the frozen path
rather than merged into ``W_l`` so that a zero delta never changes a bit.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .exceptions import CompatibilityError, ConfigurationError

if TYPE_CHECKING:
    from .adapters import BehavioralModule

PROB_FLOOR = 1e-12

# Init gains: a sharp output layer gives the base model low-entropy outputs,
# and keeps randomised copies of it confident too.
HIDDEN_GAIN = 1.5
OUTPUT_GAIN = 16.0

SCALE_WIDTHS: dict[str, tuple[int, ...]] = {
    "S": (32,),
    "M": (64, 64),
    "L": (128, 128),
}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and initialisation seed of the toy model.

    Parameters
    ----------
    vocab_size : int
        Number of output symbols, at least 2.
    context_len : int
        Number of tokens per prompt.
    hidden_widths : sequence of int
        Widths of the tanh hidden layers; the embedding width equals the
        first entry. ``(32,)`` gives a 32-d embedding, one 32-unit tanh
        layer and the output layer.
    scale_tag : str
        Label used by the scale sweep.
    init_seed : int
        Unsigned 64-bit seed for parameter initialisation.
    """

    vocab_size: int = 32
    context_len: int = 8
    hidden_widths: tuple[int, ...] = SCALE_WIDTHS["S"]
    scale_tag: str = "S"
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if int(self.vocab_size) < 2:
            raise ConfigurationError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if int(self.context_len) < 1:
            raise ConfigurationError(f"context_len must be >= 1, got {self.context_len}")
        if not self.hidden_widths:
            raise ConfigurationError("hidden_widths must be non-empty")
        if any(w < 1 for w in self.hidden_widths):
            raise ConfigurationError(f"hidden widths must be positive, got {self.hidden_widths}")
        if not 0 <= int(self.init_seed) < 2**64:
            raise ConfigurationError(f"init_seed must be an unsigned 64-bit integer, got {self.init_seed}")

    @classmethod
    def for_scale(cls, scale_tag: str, **kwargs) -> "ModelConfig":
        if scale_tag not in SCALE_WIDTHS:
            raise ConfigurationError(
                f"unknown scale_tag {scale_tag!r}; expected one of {sorted(SCALE_WIDTHS)}"
            )
        return cls(hidden_widths=SCALE_WIDTHS[scale_tag], scale_tag=scale_tag, **kwargs)

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """(out, in) shape of every dense layer, output layer last."""
        dims = [self.hidden_widths[0], *self.hidden_widths, self.vocab_size]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    def to_dict(self) -> dict:
        return {
            "vocab_size": int(self.vocab_size),
            "context_len": int(self.context_len),
            "hidden_widths": list(self.hidden_widths),
            "scale_tag": self.scale_tag,
            "init_seed": int(self.init_seed),
        }


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, order="C", copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class CoreParams:
    """Frozen core parameter set. Arrays are read-only; updates build a new instance."""

    config: ModelConfig
    embedding: np.ndarray
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    _fingerprint: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "embedding", _frozen(self.embedding))
        object.__setattr__(self, "weights", tuple(_frozen(w) for w in self.weights))
        object.__setattr__(self, "biases", tuple(_frozen(b) for b in self.biases))
        expected = self.config.layer_shapes
        if [w.shape for w in self.weights] != expected:
            raise ConfigurationError(f"weight shapes {[w.shape for w in self.weights]} != {expected}")
        if self.embedding.shape != (self.config.vocab_size, self.config.hidden_widths[0]):
            raise ConfigurationError(f"bad embedding shape {self.embedding.shape}")
        if [b.shape for b in self.biases] != [(o,) for o, _ in expected]:
            raise ConfigurationError("bias shapes do not match weight shapes")
        if not all(np.isfinite(a).all() for a in self.arrays()):
            raise ConfigurationError("core parameters must be finite")

    def arrays(self) -> list[np.ndarray]:
        """All parameter arrays in canonical order: embedding, then (W, b) per layer."""
        out = [self.embedding]
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def fingerprint(self) -> str:
        if not self._fingerprint:
            h = hashlib.sha256()
            for a in self.arrays():
                h.update(repr(a.shape).encode())
                h.update(a.astype("<f8").tobytes())
            self._fingerprint.append(h.hexdigest())
        return self._fingerprint[0]

    def replace_arrays(self, arrays: Sequence[np.ndarray]) -> "CoreParams":
        """New CoreParams from arrays in :meth:`arrays` order."""
        arrays = list(arrays)
        return CoreParams(
            config=self.config,
            embedding=arrays[0],
            weights=tuple(arrays[1::2]),
            biases=tuple(arrays[2::2]),
        )


@dataclass(frozen=True)
class Prompt:
    tokens: tuple[int, ...]
    id: str

    def validate(self, config: ModelConfig) -> None:
        if len(self.tokens) != config.context_len:
            raise ConfigurationError(
                f"prompt {self.id} has {len(self.tokens)} tokens, expected {config.context_len}"
            )
        if min(self.tokens) < 0 or max(self.tokens) >= config.vocab_size:
            raise ConfigurationError(f"prompt {self.id} has token out of range")


@dataclass(frozen=True, eq=False)
class OutputDistribution:
    probs: np.ndarray
    prompt_id: str

    def __eq__(self, other):
        if not isinstance(other, OutputDistribution):
            return NotImplemented
        return self.prompt_id == other.prompt_id and np.array_equal(self.probs, other.probs)


def init_core(config: ModelConfig) -> CoreParams:
    """Seeded initialisation; identical configs give bit-identical parameters."""
    rng = np.random.default_rng(int(config.init_seed))
    d0 = config.hidden_widths[0]
    embedding = rng.standard_normal((config.vocab_size, d0))
    weights, biases = [], []
    shapes = config.layer_shapes
    for l, (out_dim, in_dim) in enumerate(shapes):
        gain = OUTPUT_GAIN if l == len(shapes) - 1 else HIDDEN_GAIN
        weights.append(rng.standard_normal((out_dim, in_dim)) * (gain / np.sqrt(in_dim)))
        biases.append(np.zeros(out_dim))
    return CoreParams(config=config, embedding=embedding, weights=tuple(weights), biases=tuple(biases))


def _as_token_matrix(prompts, config: ModelConfig) -> np.ndarray:
    if isinstance(prompts, np.ndarray):
        X = prompts
    else:
        X = np.array([p.tokens if isinstance(p, Prompt) else p for p in prompts])
    X = np.asarray(X, dtype=np.int64)
    if X.ndim != 2 or X.shape[1] != config.context_len:
        raise ConfigurationError(f"token matrix must have shape (n, {config.context_len}), got {X.shape}")
    if X.size and (X.min() < 0 or X.max() >= config.vocab_size):
        raise ConfigurationError("token index out of range")
    return X


def _active_factors(core: CoreParams, module: "BehavioralModule | None") -> dict:
    if module is None or not module.is_active:
        return {}
    factors = {}
    shapes = core.config.layer_shapes
    for layer, A, B in zip(module.attach_map, module.A, module.B):
        if not 0 <= layer < len(shapes):
            raise CompatibilityError(f"module targets layer {layer}, core has {len(shapes)} layers")
        out_dim, in_dim = shapes[layer]
        if A.shape != (module.rank, in_dim) or B.shape != (out_dim, module.rank):
            raise CompatibilityError(
                f"layer {layer}: A{A.shape}/B{B.shape} incompatible with W{shapes[layer]}"
            )
        factors[layer] = (A, B)
    return factors


def _forward_pass(core: CoreParams, module, X: np.ndarray):
    """Return logits and the per-layer inputs needed for backprop."""
    factors = _active_factors(core, module)
    h = core.embedding[X].mean(axis=1)
    inputs, lowrank = [], []
    z = None
    for l, (W, b) in enumerate(zip(core.weights, core.biases)):
        inputs.append(h)
        z = h @ W.T + b
        if l in factors:
            A, B = factors[l]
            u = h @ A.T
            z = z + u @ B.T
            lowrank.append(u)
        else:
            lowrank.append(None)
        if l < core.n_layers - 1:
            h = np.tanh(z)
    return z, inputs, lowrank, factors


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def clamp_probs(p: np.ndarray) -> np.ndarray:
    """Normalise along the last axis with every entry floored at :data:`PROB_FLOOR`."""
    p = np.maximum(np.asarray(p, dtype=np.float64), PROB_FLOOR)
    p = np.maximum(p / p.sum(axis=-1, keepdims=True), PROB_FLOOR)
    # the floor adds mass; take it back from the largest entry so no entry drops below the floor
    top = p.argmax(axis=-1)[..., None]
    excess = p.sum(axis=-1, keepdims=True) - 1.0
    np.put_along_axis(p, top, np.take_along_axis(p, top, axis=-1) - excess, axis=-1)
    return p


def predict_proba(core: CoreParams, module, X) -> np.ndarray:
    """Clamped output distributions for a batch of token rows, shape (n, vocab)."""
    X = _as_token_matrix(X, core.config)
    logits, *_ = _forward_pass(core, module, X)
    return clamp_probs(_softmax(logits))


def evaluate(core: CoreParams, module, prompts: Sequence[Prompt]) -> list[OutputDistribution]:
    probs = predict_proba(core, module, prompts)
    return [OutputDistribution(probs=row, prompt_id=p.id) for row, p in zip(probs, prompts)]


def forward(core: CoreParams, behavioral, prompt: Prompt) -> OutputDistribution:
    prompt.validate(core.config)
    return evaluate(core, behavioral, [prompt])[0]


def entropy(dist: OutputDistribution | np.ndarray) -> float:
    """Shannon entropy in nats."""
    p = dist.probs if isinstance(dist, OutputDistribution) else np.asarray(dist, dtype=np.float64)
    p = clamp_probs(p)
    return float(max(0.0, -np.sum(p * np.log(p))))


def nll_and_grads(core: CoreParams, module, X, y, wrt: str = "core"):
    """Mean negative log-likelihood of targets ``y`` and its analytic gradient.

    ``wrt`` selects the parameters to differentiate: ``"core"`` returns
    gradients in :meth:`CoreParams.arrays` order, ``"module"`` returns
    ``(dA, dB)`` lists aligned with ``module.attach_map``.
    """
    X = _as_token_matrix(X, core.config)
    y = np.asarray(y, dtype=np.int64)
    n = X.shape[0]
    logits, inputs, lowrank, factors = _forward_pass(core, module, X)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_norm - shifted[np.arange(n), y]))

    dz = np.exp(shifted - log_norm[:, None])
    dz[np.arange(n), y] -= 1.0
    dz /= n

    dW = [None] * core.n_layers
    db = [None] * core.n_layers
    dA: dict[int, np.ndarray] = {}
    dB: dict[int, np.ndarray] = {}
    for l in range(core.n_layers - 1, -1, -1):
        h = inputs[l]
        W = core.weights[l]
        dW[l] = dz.T @ h
        db[l] = dz.sum(axis=0)
        dh = dz @ W
        if l in factors:
            A, B = factors[l]
            dB[l] = dz.T @ lowrank[l]
            du = dz @ B
            dA[l] = du.T @ h
            dh = dh + du @ A
        if l > 0:
            dz = dh * (1.0 - h**2)
        else:
            dh0 = dh

    if wrt == "module":
        layers = list(module.attach_map)
        return loss, ([dA[l] for l in layers], [dB[l] for l in layers])

    dE = np.zeros_like(core.embedding)
    scaled = dh0 / core.config.context_len
    for c in range(core.config.context_len):
        np.add.at(dE, X[:, c], scaled)
    grads = [dE]
    for l in range(core.n_layers):
        grads.extend((dW[l], db[l]))
    return loss, grads


def nll(core: CoreParams, module, X, y) -> float:
    X = _as_token_matrix(X, core.config)
    y = np.asarray(y, dtype=np.int64)
    logits, *_ = _forward_pass(core, module, X)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(log_norm - shifted[np.arange(X.shape[0]), y]))


def grad_check(core: CoreParams, behavioral, prompt: Prompt, target: int, *,
               step: float = 1e-4, n_samples: int = 64, seed: int = 0,
               wrt: str = "both", abs_floor: float = 1e-6) -> float:
    """Max relative error between analytic gradients and central differences.

    Samples up to ``n_samples`` scalar entries from the core arrays, the
    behavioral factors, or both, and compares each analytic partial with
    ``(L(w + step) - L(w - step)) / (2 step)``. The relative error uses
    ``max(|analytic|, |numeric|, abs_floor)`` as denominator, so partials
    near zero are judged on absolute error instead of round-off noise.
    """
    if not step > 0:
        raise ValueError("finite-difference step must be positive")
    X = np.array([prompt.tokens])
    y = np.array([target])
    rng = np.random.default_rng(seed)

    slots = []  # (kind, array index, analytic gradient)
    if wrt in ("core", "both"):
        _, core_grads = nll_and_grads(core, behavioral, X, y, wrt="core")
        slots.extend(("core", i, g) for i, g in enumerate(core_grads))
    if wrt in ("module", "both") and behavioral is not None and behavioral.is_active:
        _, (gA, gB) = nll_and_grads(core, behavioral, X, y, wrt="module")
        slots.extend(("A", i, g) for i, g in enumerate(gA))
        slots.extend(("B", i, g) for i, g in enumerate(gB))

    sizes = np.array([g.size for _, _, g in slots], dtype=float)
    picks = rng.choice(len(slots), size=n_samples, p=sizes / sizes.sum())
    worst = 0.0
    for slot in picks:
        kind, idx, g = slots[slot]
        flat = int(rng.integers(g.size))
        losses = []
        for sign in (1.0, -1.0):
            c, m = _nudge(core, behavioral, kind, idx, flat, sign * step)
            losses.append(nll(c, m, X, y))
        numeric = (losses[0] - losses[1]) / (2 * step)
        analytic = float(g.ravel()[flat])
        denom = max(abs(analytic), abs(numeric), abs_floor)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def _nudge(core: CoreParams, module, kind: str, idx: int, flat: int, delta: float):
    if kind == "core":
        arrays = [a.copy() for a in core.arrays()]
        arrays[idx].ravel()[flat] += delta
        return core.replace_arrays(arrays), module
    A = [a.copy() for a in module.A]
    B = [b.copy() for b in module.B]
    (A if kind == "A" else B)[idx].ravel()[flat] += delta
    return core, module.with_factors(A, B)
