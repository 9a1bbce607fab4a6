"""Behavioral divergence, recoverability, identity leakage and structural variance."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .exceptions import ProtocolError
from .model import OutputDistribution, clamp_probs, evaluate

PRECISION_FLOOR = 1e-6
DEFAULT_TAU = 0.01
LOG2 = float(np.log(2.0))

EXACT = "exact"
PARTIAL = "partial"
NONE = "none"


def _probs(d) -> np.ndarray:
    return d.probs if isinstance(d, OutputDistribution) else np.asarray(d, dtype=np.float64)


def _pair(p, q) -> tuple[np.ndarray, np.ndarray]:
    p, q = _probs(p), _probs(q)
    if p.shape != q.shape:
        raise ValueError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    return clamp_probs(p), clamp_probs(q)


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    if np.array_equal(p, q):
        return 0.0
    return float(max(0.0, np.sum(p * (np.log(p) - np.log(q)))))


def kl(p, q) -> float:
    """KL(p || q) in nats after flooring both inputs at 1e-12."""
    return _kl(*_pair(p, q))


def js(p, q) -> float:
    """Jensen-Shannon divergence in nats, symmetric and bounded by log 2."""
    p, q = _pair(p, q)
    if np.array_equal(p, q):
        return 0.0
    m = 0.5 * (p + q)
    # summing the two halves in a fixed order keeps js(p, q) == js(q, p) to the last ulp
    a, b = _kl(p, m), _kl(q, m)
    lo, hi = min(a, b), max(a, b)
    return float(min(LOG2, 0.5 * lo + 0.5 * hi))


@dataclass
class DivergenceReport:
    per_prompt: dict[str, tuple[float, float]]
    mean_kl: float
    mean_js: float
    direction: tuple[str, str] = ("baseline", "candidate")

    def to_dict(self) -> dict:
        return {
            "direction": list(self.direction),
            "mean_kl": self.mean_kl,
            "mean_js": self.mean_js,
            "per_prompt": {k: {"kl": v[0], "js": v[1]} for k, v in sorted(self.per_prompt.items())},
        }


def _aligned(reference, candidate):
    ref = sorted(reference, key=lambda d: d.prompt_id)
    cand = sorted(candidate, key=lambda d: d.prompt_id)
    if [d.prompt_id for d in ref] != [d.prompt_id for d in cand]:
        raise ProtocolError("reference and candidate cover different prompt sets")
    if len({d.prompt_id for d in ref}) != len(ref):
        raise ProtocolError("duplicate prompt ids")
    return ref, cand


def divergence_report(reference: Sequence[OutputDistribution], candidate: Sequence[OutputDistribution],
                      direction: tuple[str, str] = ("baseline", "candidate")) -> DivergenceReport:
    ref, cand = _aligned(reference, candidate)
    if not ref:
        raise ProtocolError("empty prompt set")
    per_prompt = {r.prompt_id: (kl(r, c), js(r, c)) for r, c in zip(ref, cand)}
    kls = np.array([v[0] for v in per_prompt.values()])
    jss = np.array([v[1] for v in per_prompt.values()])
    return DivergenceReport(per_prompt=per_prompt, mean_kl=float(kls.mean()),
                            mean_js=float(jss.mean()), direction=tuple(direction))


@dataclass
class RecoverabilityReport:
    d_adapt: float
    d_rec: float
    rf: float
    regime: str
    js_rec: float = 0.0
    precision_floor: float = PRECISION_FLOOR

    def to_dict(self) -> dict:
        return {
            "d_adapt": self.d_adapt, "d_rec": self.d_rec, "js_rec": self.js_rec,
            "rf": self.rf, "regime": self.regime, "precision_floor": self.precision_floor,
        }


def classify_regime(d_rec: float, js_rec: float, floor: float = PRECISION_FLOOR) -> str:
    if d_rec < floor and js_rec < floor:
        return EXACT
    return PARTIAL


def recoverability(d_baseline_adapt: DivergenceReport, d_baseline_rec: DivergenceReport,
                   floor: float = PRECISION_FLOOR) -> RecoverabilityReport:
    """RF = 1 - d_rec / d_adapt on mean KL, clamped to [0, 1].

    Below the precision floor the ratio is undefined; RF is then 1 if the
    recovered model is also below the floor and 0 otherwise.
    """
    if set(d_baseline_adapt.per_prompt) != set(d_baseline_rec.per_prompt):
        raise ProtocolError("recoverability needs reports over the same prompt set")
    if d_baseline_adapt.direction[0] != d_baseline_rec.direction[0]:
        raise ProtocolError("both reports must use the same baseline as reference")
    d_adapt, d_rec = d_baseline_adapt.mean_kl, d_baseline_rec.mean_kl
    if d_adapt < floor:
        rf = 1.0 if d_rec < floor else 0.0
    else:
        rf = float(np.clip(1.0 - d_rec / d_adapt, 0.0, 1.0))
    regime = classify_regime(d_rec, d_baseline_rec.mean_js, floor)
    if regime != EXACT and rf == 0.0:
        regime = NONE
    return RecoverabilityReport(d_adapt=d_adapt, d_rec=d_rec, rf=rf, regime=regime,
                                js_rec=d_baseline_rec.mean_js, precision_floor=floor)


@dataclass
class ILSReport:
    per_prompt: dict[str, float]
    average: float
    tau: float
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"ils": dict(sorted(self.per_prompt.items())), "ils_avg": self.average,
                "tau": self.tau, "flags": sorted(self.flags)}


def ils(baseline: Sequence[OutputDistribution], post_reset: Sequence[OutputDistribution],
        tau: float = DEFAULT_TAU) -> ILSReport:
    """Prompt-level identity leakage: per-prompt KL from the baseline, flagged above ``tau``."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    ref, cand = _aligned(baseline, post_reset)
    per_prompt = {r.prompt_id: kl(r, c) for r, c in zip(ref, cand)}
    average = float(np.mean(list(per_prompt.values())))
    flags = sorted(pid for pid, v in per_prompt.items() if v > tau)
    return ILSReport(per_prompt=per_prompt, average=average, tau=tau, flags=flags)


@dataclass
class SvarReport:
    radius: float
    samples: int
    mean_divergence: float
    per_sample: list[float]

    def to_dict(self) -> dict:
        return {"radius": self.radius, "samples": self.samples,
                "svar_mean": self.mean_divergence, "per_sample": list(self.per_sample)}


def svar(core, module, prompts, spec) -> SvarReport:
    """Expected mean-over-prompts KL between the adapted model and perturbed copies."""
    from .adapters import perturb

    if int(spec.samples) < 1:
        raise ValueError("svar needs at least one perturbation sample")
    fingerprint = core.fingerprint
    reference = evaluate(core, module, prompts)
    per_sample = []
    for copy in perturb(module, spec):
        per_sample.append(divergence_report(reference, evaluate(core, copy, prompts)).mean_kl)
    if core.fingerprint != fingerprint:
        raise ProtocolError("svar altered the core parameters")
    return SvarReport(radius=float(spec.radius), samples=int(spec.samples),
                      mean_divergence=float(np.mean(per_sample)), per_sample=per_sample)
