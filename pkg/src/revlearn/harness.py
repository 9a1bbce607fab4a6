"""Three-stage evaluation protocol and the five sweep experiments.

Every experiment pretrains a base core, freezes a prompt set, and for each
seed runs baseline -> adaptation -> rollback, measuring all divergences
against the stage-1 baseline. Only the measurement layer ever holds the
original core; rollback after weight adaptation sees per-array moments only.
"""

from __future__ import annotations

import hashlib
import json
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import adapters
from .adapters import AdaptationTask, MutationSpec, PerturbationSpec
from .exceptions import ConfigurationError, NumericalDivergenceError, ProtocolError
from .io import dumps
from .metrics import (
    DEFAULT_TAU,
    EXACT,
    classify_regime,
    divergence_report,
    ils,
    recoverability,
    svar,
)
from .model import (
    SCALE_WIDTHS,
    CoreParams,
    ModelConfig,
    OutputDistribution,
    Prompt,
    entropy,
    evaluate,
    init_core,
    nll_and_grads,
    predict_proba,
)

logger = logging.getLogger(__name__)

KINDS = ("elimination_sweep", "mutation_sweep", "rf_comparison", "baseline_stability", "scale_sweep")
SCENARIOS = ("rlae", "mutation", "finetune")
DEFAULT_SEEDS = (11, 23, 42)

ELIMINATION_GRID = (0.0, 0.001, 0.01, 0.05, 0.2, 0.4, 0.6, 0.8, 1.0)
# Three-decade grid plus the intensity at which post-reset JS saturates on the
# toy model (calibrated once on the pinned seeds; see tests/test_acceptance.py).
SATURATION_ALPHA = 10.0
MUTATION_GRID = (0.001, 0.01, 0.05, SATURATION_ALPHA)

RECORD_FORMAT = "revlearn.record/1"


# --------------------------------------------------------------------------- data


@dataclass(frozen=True)
class PromptSet:
    prompts: tuple[Prompt, ...]
    held_out: tuple[bool, ...]
    generation_seed: int

    def __post_init__(self):
        ids = [p.id for p in self.prompts]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("prompt ids must be unique")
        if len(self.held_out) != len(self.prompts):
            raise ConfigurationError("held_out marker must cover every prompt")

    def __len__(self):
        return len(self.prompts)

    @property
    def adaptation(self) -> list[Prompt]:
        return [p for p, h in zip(self.prompts, self.held_out) if not h]

    @property
    def held_out_ids(self) -> set[str]:
        return {p.id for p, h in zip(self.prompts, self.held_out) if h}


def make_prompt_set(config: ModelConfig, seed: int = 0, n_prompts: int = 64,
                    n_held_out: int = 16) -> PromptSet:
    if n_prompts < 2 or not 1 <= n_held_out < n_prompts:
        raise ConfigurationError("need at least one adaptation and one held-out prompt")
    rng = np.random.default_rng([seed, 0x5EED])
    X = rng.integers(0, config.vocab_size, size=(n_prompts, config.context_len))
    prompts = tuple(Prompt(tokens=tuple(int(t) for t in row), id=f"p{i:03d}") for i, row in enumerate(X))
    held = np.zeros(n_prompts, dtype=bool)
    held[rng.permutation(n_prompts)[:n_held_out]] = True
    return PromptSet(prompts=prompts, held_out=tuple(bool(h) for h in held), generation_seed=seed)


def _teacher(config: ModelConfig, corpus_seed: int) -> np.ndarray:
    rng = np.random.default_rng([corpus_seed, 0x7EAC])
    return rng.standard_normal((config.vocab_size, config.vocab_size))


def teacher_targets(X: np.ndarray, config: ModelConfig, corpus_seed: int) -> np.ndarray:
    """Hidden rule behind the synthetic corpus: argmax of a fixed linear score of token counts."""
    X = np.asarray(X, dtype=np.int64)
    counts = np.zeros((X.shape[0], config.vocab_size))
    np.add.at(counts, (np.repeat(np.arange(X.shape[0]), X.shape[1]), X.ravel()), 1.0)
    return (counts @ _teacher(config, corpus_seed)).argmax(axis=1)


def pretrain(config: ModelConfig, corpus_seed: int = 0, steps: int = 200, *,
             learning_rate: float = 1.0, corpus_size: int = 2048, clip_norm: float = 5.0) -> CoreParams:
    """Full-batch SGD on a seeded synthetic corpus, gradient norm clipped at ``clip_norm``."""
    if steps < 0:
        raise ConfigurationError(f"steps must be >= 0, got {steps}")
    core = init_core(config)
    if steps == 0:
        return core
    rng = np.random.default_rng([corpus_seed, 0xC0DE])
    X = rng.integers(0, config.vocab_size, size=(corpus_size, config.context_len))
    y = teacher_targets(X, config, corpus_seed)
    return train_core(core, X, y, steps, learning_rate=learning_rate, clip_norm=clip_norm)


def train_core(core: CoreParams, X, y, steps: int, *, learning_rate: float = 1.0,
               clip_norm: float | None = 5.0) -> CoreParams:
    arrays = [a.copy() for a in core.arrays()]
    current = core
    for _ in range(steps):
        loss, grads = nll_and_grads(current, None, X, y)
        if not np.isfinite(loss):
            raise NumericalDivergenceError(f"non-finite loss {loss} during pretraining")
        scale = learning_rate
        if clip_norm is not None:
            norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
            if norm > clip_norm:
                scale *= clip_norm / norm
        for a, g in zip(arrays, grads):
            a -= scale * g
        current = core.replace_arrays(arrays)
    return current


@dataclass(frozen=True)
class TaskSettings:
    """Training budget shared by behavioral adaptation and fine-tuning."""

    steps: int = 150
    learning_rate: float = 0.5
    batch_size: int | None = None
    target_shift: int | None = None

    def build(self, prompts: PromptSet, config: ModelConfig, corpus_seed: int, seed: int) -> AdaptationTask:
        objective = prompts.adaptation
        X = np.array([p.tokens for p in objective])
        shift = self.target_shift if self.target_shift is not None else config.vocab_size // 2
        y = (teacher_targets(X, config, corpus_seed) + shift) % config.vocab_size
        return AdaptationTask(
            objective_prompts=tuple((p, int(t)) for p, t in zip(objective, y)),
            steps=self.steps, learning_rate=self.learning_rate, seed=seed, batch_size=self.batch_size,
        )


@dataclass(frozen=True)
class ExperimentSpec:
    kind: str
    grid: tuple = ()
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    model_config: ModelConfig = field(default_factory=ModelConfig)
    task: TaskSettings = field(default_factory=TaskSettings)
    scales: tuple[str, ...] | None = None
    alpha: float = 0.01
    rank: int = 4
    corpus_seed: int = 0
    pretrain_steps: int = 200
    pretrain_lr: float = 1.0
    prompt_seed: int = 0
    n_prompts: int = 64
    n_held_out: int = 16
    tau: float = DEFAULT_TAU
    svar_radius: float = 0.05
    svar_samples: int = 5
    isolate_sprints: bool = True
    output_dir: str = "runs"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        object.__setattr__(self, "grid", tuple(self.grid) if self.grid else default_grid(self.kind))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.scales is not None:
            object.__setattr__(self, "scales", tuple(self.scales))
        if not self.seeds:
            raise ConfigurationError("seeds must be non-empty")
        validate_grid(self.kind, self.grid)
        for tag in self.scales or ():
            if tag not in SCALE_WIDTHS:
                raise ConfigurationError(f"unknown scale_tag {tag!r}")
        if self.kind == "mutation_sweep" and self.scales is None:
            object.__setattr__(self, "scales", ("S", "M", "L"))
        if not self.tau > 0:
            raise ConfigurationError("tau must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["seeds"] = list(self.seeds)
        d["scales"] = None if self.scales is None else list(self.scales)
        d["model_config"] = self.model_config.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown spec fields: {sorted(unknown)}")
        if "kind" not in data:
            raise ConfigurationError("spec needs a 'kind'")
        mc = data.get("model_config") or {}
        if isinstance(mc, dict):
            mc_known = {f.name for f in fields(ModelConfig)}
            if set(mc) - mc_known:
                raise ConfigurationError(f"unknown model_config fields: {sorted(set(mc) - mc_known)}")
            if "scale_tag" in mc and "hidden_widths" not in mc:
                mc = {**mc, "hidden_widths": SCALE_WIDTHS.get(mc["scale_tag"], (32,))}
            data["model_config"] = ModelConfig(**mc)
        task = data.get("task") or {}
        if isinstance(task, dict):
            t_known = {f.name for f in fields(TaskSettings)}
            if set(task) - t_known:
                raise ConfigurationError(f"unknown task fields: {sorted(set(task) - t_known)}")
            data["task"] = TaskSettings(**task)
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    @property
    def spec_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(dumps(d).encode()).hexdigest()


def default_grid(kind: str) -> tuple:
    return {
        "elimination_sweep": ELIMINATION_GRID,
        "mutation_sweep": MUTATION_GRID,
        "rf_comparison": (0.01,),
        "baseline_stability": (4,),
        "scale_sweep": ("S", "M", "L"),
    }[kind]


def validate_grid(kind: str, grid: Sequence) -> None:
    if not grid:
        raise ConfigurationError("grid must be non-empty")
    if kind == "scale_sweep":
        bad = [g for g in grid if g not in SCALE_WIDTHS]
        if bad:
            raise ConfigurationError(f"unknown scale_tag(s) {bad}")
        return
    try:
        values = [float(g) for g in grid]
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{kind} grid must be numeric: {grid}") from exc
    if kind == "elimination_sweep":
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ConfigurationError("elimination grid values must lie in [0, 1]")
        if 0.0 not in values or 1.0 not in values:
            raise ConfigurationError("elimination grid must include 0.0 and 1.0")
    elif kind == "mutation_sweep":
        if any(v <= 0 for v in values):
            raise ConfigurationError("mutation intensities must be positive")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ConfigurationError("mutation grid must be strictly ascending")
    elif kind == "rf_comparison":
        if len(values) != 1 or values[0] <= 0:
            raise ConfigurationError("rf_comparison grid is a single positive mutation intensity")
    elif kind == "baseline_stability":
        if len(values) != 1 or values[0] < 1 or values[0] != int(values[0]):
            raise ConfigurationError("baseline_stability grid is a single positive sprint count")


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text.strip()


def _set_path(data: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        child = node.get(part)
        if child is None:
            child = {}
        elif not isinstance(child, dict):
            child = _as_plain(child)
        node[part] = child
        node = child
    node[parts[-1]] = value


def _as_plain(obj):
    if isinstance(obj, ModelConfig):
        return obj.to_dict()
    if isinstance(obj, TaskSettings):
        return asdict(obj)
    return obj


def apply_overrides(data: dict, overrides: Sequence[str]) -> dict:
    """Apply ``key=value`` strings (dotted keys reach nested fields) to a spec dict."""
    data = json.loads(json.dumps(data, default=_as_plain))
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        _set_path(data, key.strip(), parse_value(value))
    return data


def parse_spec_text(text: str) -> dict:
    """A spec file is one JSON document or ``key = value`` lines (``#`` comments allowed)."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            return json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"invalid JSON spec: {exc}") from exc
    data: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        _set_path(data, key.strip(), parse_value(value.strip()))
    return data


def load_spec(path, overrides: Sequence[str] = ()) -> ExperimentSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"spec file not found: {path}")
    data = parse_spec_text(path.read_text(encoding="utf-8"))
    if overrides:
        data = apply_overrides(data, overrides)
    return ExperimentSpec.from_dict(data)


# ----------------------------------------------------------------------- protocol


@dataclass
class Baseline:
    """Pretrained core plus its frozen prompt set and stage-1 outputs."""

    core: CoreParams
    prompts: PromptSet
    distributions: list

    def to_dict(self) -> dict:
        ents = [entropy(d) for d in self.distributions]
        return {
            "fingerprint": self.core.fingerprint,
            "scale_tag": self.core.config.scale_tag,
            "entropy": _entropy_stats(ents),
            "distributions": {d.prompt_id: d.probs for d in self.distributions},
        }


def _entropy_stats(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std()), "max": float(v.max())}


def scale_config(spec: ExperimentSpec, scale_tag: str | None) -> ModelConfig:
    mc = spec.model_config
    if scale_tag is None or scale_tag == mc.scale_tag:
        return mc
    return replace(mc, hidden_widths=SCALE_WIDTHS[scale_tag], scale_tag=scale_tag)


def prepare_baseline(spec: ExperimentSpec, scale_tag: str | None = None) -> Baseline:
    config = scale_config(spec, scale_tag)
    core = pretrain(config, spec.corpus_seed, spec.pretrain_steps, learning_rate=spec.pretrain_lr)
    prompts = make_prompt_set(config, spec.prompt_seed, spec.n_prompts, spec.n_held_out)
    return Baseline(core=core, prompts=prompts, distributions=evaluate(core, None, prompts.prompts))


def _split_mean(report, held_out_ids) -> dict:
    held = [v[0] for k, v in report.per_prompt.items() if k in held_out_ids]
    seen = [v[0] for k, v in report.per_prompt.items() if k not in held_out_ids]
    return {"adaptation_mean_kl": float(np.mean(seen)), "held_out_mean_kl": float(np.mean(held))}


def _task_accuracy(core, module, task: AdaptationTask) -> float:
    X, y = task.arrays()
    return float(np.mean(predict_proba(core, module, X).argmax(axis=1) == y))


def run_protocol(baseline: Baseline, scenario: str, seed: int, *, task: AdaptationTask,
                 alpha: float = 0.01, rank: int = 4, tau: float = DEFAULT_TAU,
                 epsilons: Sequence[float] = (), svar_spec: PerturbationSpec | None = None) -> dict:
    """Run one seeded baseline -> adapt -> rollback cycle and measure it.

    ``epsilons`` (rlae only) additionally records partial resets by elimination
    before the final unload.
    """
    if scenario not in SCENARIOS:
        raise ConfigurationError(f"unknown scenario {scenario!r}")
    core = baseline.core
    prompts = baseline.prompts.prompts
    if not prompts:
        raise ProtocolError("empty prompt set")
    fingerprint = core.fingerprint
    base = baseline.distributions
    fresh = evaluate(core, None, prompts)
    if any(a != b for a, b in zip(fresh, base)):
        raise ProtocolError("baseline evaluation is not reproducible")

    out: dict[str, Any] = {"scenario": scenario, "seed": int(seed), "baseline_fingerprint": fingerprint,
                           "task_fingerprint": task_fingerprint(task)}
    if scenario == "rlae":
        module = adapters.attach(core, adapters.new_module(core, rank=rank, seed=seed))
        module = adapters.adapt_behavioral(core, module, task)
        _check_identity(core, fingerprint, "behavioral adaptation")
        adapted = evaluate(core, module, prompts)
        out["task_accuracy"] = _task_accuracy(core, module, task)
        if svar_spec is not None:
            out["svar"] = svar(core, module, prompts, replace(svar_spec, seed=seed)).to_dict()
        partial = []
        for eps in epsilons:
            reduced = adapters.eliminate(module, float(eps), seed=seed)
            rep = divergence_report(base, evaluate(core, reduced, prompts))
            partial.append({"epsilon": float(eps), "kl": rep.mean_kl, "js": rep.mean_js,
                            "regime": classify_regime(rep.mean_kl, rep.mean_js)})
        if partial:
            out["elimination"] = partial
        module = adapters.unload(module)
        _check_identity(core, fingerprint, "unload")
        recovered = evaluate(core, module, prompts)
        out["post_core_fingerprint"] = core.fingerprint
    else:
        stats = adapters.layer_stats(core)
        if scenario == "mutation":
            mutated = adapters.adapt_weights(core, MutationSpec(alpha=alpha, mode="noise", seed=seed))
        else:
            mutated = adapters.adapt_weights(core, MutationSpec(alpha=alpha, mode="finetune", seed=seed), task)
            out["task_accuracy"] = _task_accuracy(mutated, None, task)
        adapted = evaluate(mutated, None, prompts)
        # snapshot oracle: only the measurement layer compares against the original core
        out["snapshot_oracle"] = {"core_changed": mutated.fingerprint != fingerprint}
        if not out["snapshot_oracle"]["core_changed"]:
            raise ProtocolError("weight adaptation left the core unchanged")
        rolled = adapters.rollback_heuristic(mutated, stats)
        recovered = evaluate(rolled, None, prompts)
        out["post_core_fingerprint"] = rolled.fingerprint

    d_adapt = divergence_report(base, adapted, ("baseline", "adapted"))
    d_rec = divergence_report(base, recovered, ("baseline", "recovered"))
    rec = recoverability(d_adapt, d_rec)
    leak = ils(base, recovered, tau)
    out.update({
        "post_adaptation": d_adapt.to_dict(),
        "post_rollback": d_rec.to_dict(),
        "held_out": _split_mean(d_rec, baseline.prompts.held_out_ids),
        "recoverability": rec.to_dict(),
        "ils": leak.to_dict(),
        "entropy": {
            "baseline": _entropy_stats([entropy(d) for d in base]),
            "post_rollback": _entropy_stats([entropy(d) for d in recovered]),
        },
        "bit_identical_rollback": all(a == b for a, b in zip(base, recovered)),
    })
    return out


def task_fingerprint(task: AdaptationTask) -> str:
    """Hash of everything that defines a task, to audit that mechanisms shared it."""
    X, y = task.arrays()
    h = hashlib.sha256()
    h.update(X.astype("<i8").tobytes())
    h.update(y.astype("<i8").tobytes())
    h.update(dumps([task.steps, task.learning_rate, task.seed, task.batch_size]).encode())
    return h.hexdigest()


def _check_identity(core: CoreParams, fingerprint: str, stage: str) -> None:
    if core.fingerprint != fingerprint:
        raise ProtocolError(f"core fingerprint changed during {stage}")


# -------------------------------------------------------------------- experiments


def _mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


def _new_record(spec: ExperimentSpec) -> dict:
    return {
        "format": RECORD_FORMAT,
        "kind": spec.kind,
        "spec": spec.to_dict(),
        "spec_hash": spec.spec_hash,
        "baselines": {},
        "per_seed": [],
        "summary": {},
        "tables": {},
    }


def _task(spec: ExperimentSpec, baseline: Baseline, seed: int) -> AdaptationTask:
    return spec.task.build(baseline.prompts, baseline.core.config, spec.corpus_seed, seed)


def run_elimination_sweep(spec: ExperimentSpec) -> dict:
    record = _new_record(spec)
    baseline = prepare_baseline(spec)
    record["baselines"][baseline.core.config.scale_tag] = baseline.to_dict()
    grid = [float(e) for e in spec.grid]
    for seed in spec.seeds:
        frag = run_protocol(baseline, "rlae", seed, task=_task(spec, baseline, seed), rank=spec.rank,
                            tau=spec.tau, epsilons=grid)
        record["per_seed"].append(frag)

    rows, kl_std, js_std = [], [], []
    for i, eps in enumerate(grid):
        kls = [f["elimination"][i]["kl"] for f in record["per_seed"]]
        jss = [f["elimination"][i]["js"] for f in record["per_seed"]]
        (kl_m, kl_s), (js_m, js_s) = _mean_std(kls), _mean_std(jss)
        rows.append([eps, kl_m, js_m, classify_regime(kl_m, js_m)])
        kl_std.append(kl_s)
        js_std.append(js_s)
    eps_desk = None
    for i in range(len(rows) - 1, -1, -1):
        if rows[i][3] != EXACT:
            break
        eps_desk = rows[i][0]
    record["tables"]["elimination"] = {"columns": ["epsilon", "kl", "js", "regime"], "rows": rows}
    record["summary"] = {
        "epsilon_desk": eps_desk,
        "post_adaptation_mean_kl": float(np.mean([f["post_adaptation"]["mean_kl"] for f in record["per_seed"]])),
        "kl_std": kl_std,
        "js_std": js_std,
        "rf": float(np.mean([f["recoverability"]["rf"] for f in record["per_seed"]])),
    }
    return record


def run_mutation_sweep(spec: ExperimentSpec) -> dict:
    record = _new_record(spec)
    rows, stds = [], []
    for tag in spec.scales:
        baseline = prepare_baseline(spec, tag)
        record["baselines"][tag] = baseline.to_dict()
        for alpha in spec.grid:
            frags = []
            for seed in spec.seeds:
                frag = run_protocol(baseline, "mutation", seed, task=_task(spec, baseline, seed),
                                    alpha=float(alpha), tau=spec.tau)
                frag["scale_tag"] = tag
                frag["alpha"] = float(alpha)
                frags.append(frag)
            record["per_seed"].extend(frags)
            kl_m, kl_s = _mean_std([f["post_rollback"]["mean_kl"] for f in frags])
            js_m, js_s = _mean_std([f["post_rollback"]["mean_js"] for f in frags])
            rf_m = float(np.mean([f["recoverability"]["rf"] for f in frags]))
            rows.append([tag, float(alpha), kl_m, js_m, rf_m])
            stds.append({"scale_tag": tag, "alpha": float(alpha), "kl_std": kl_s, "js_std": js_s})
    record["tables"]["mutation"] = {"columns": ["scale", "alpha", "kl", "js", "rf"], "rows": rows}
    record["summary"] = {"std": stds}
    return record


MECHANISMS = (("mutation", "mutation"), ("finetune", "finetune"), ("rlae", "rlae"))


def _rf_rows(spec: ExperimentSpec, baseline: Baseline, alpha: float, record: dict, tag: str):
    rows = []
    svar_spec = PerturbationSpec(radius=spec.svar_radius, samples=spec.svar_samples)
    for name, scenario in MECHANISMS:
        frags = []
        for seed in spec.seeds:
            frag = run_protocol(baseline, scenario, seed, task=_task(spec, baseline, seed), alpha=alpha,
                                rank=spec.rank, tau=spec.tau,
                                svar_spec=svar_spec if scenario == "rlae" else None)
            frag["scale_tag"] = tag
            frags.append(frag)
        record["per_seed"].extend(frags)
        kl_m = float(np.mean([f["post_rollback"]["mean_kl"] for f in frags]))
        js_m = float(np.mean([f["post_rollback"]["mean_js"] for f in frags]))
        rfs = [f["recoverability"]["rf"] for f in frags]
        rows.append((name, kl_m, js_m, float(np.mean(rfs)), float(np.std(rfs))))
    return rows


def run_rf_comparison(spec: ExperimentSpec) -> dict:
    record = _new_record(spec)
    baseline = prepare_baseline(spec)
    tag = baseline.core.config.scale_tag
    record["baselines"][tag] = baseline.to_dict()
    rows = _rf_rows(spec, baseline, float(spec.grid[0]), record, tag)
    record["tables"]["rf_comparison"] = {
        "columns": ["mechanism", "post_reset_divergence", "rf"],
        "rows": [[name, kl, rf] for name, kl, _, rf, _ in rows],
    }
    record["summary"] = {"post_reset_js": {name: js for name, _, js, _, _ in rows}}
    return record


def run_scale_sweep(spec: ExperimentSpec) -> dict:
    record = _new_record(spec)
    table, stds = [], []
    for tag in spec.grid:
        baseline = prepare_baseline(spec, tag)
        record["baselines"][tag] = baseline.to_dict()
        for name, kl, js, rf, rf_std in _rf_rows(spec, baseline, spec.alpha, record, tag):
            table.append([tag, name, 100.0 * rf])
            stds.append({"scale_tag": tag, "mechanism": name, "post_reset_kl": kl,
                         "post_reset_js": js, "pct_std": 100.0 * rf_std})
    record["tables"]["scale_sweep"] = {"columns": ["scale", "mechanism", "recoverability_pct"], "rows": table}
    record["summary"] = {"detail": stds}
    return record


def _sprint(spec_dict: dict) -> dict:
    """One sprint: rebuild the base model from scratch and measure its outputs."""
    spec = ExperimentSpec.from_dict(spec_dict)
    baseline = prepare_baseline(spec)
    probs = np.stack([d.probs for d in baseline.distributions])
    ents = [entropy(d) for d in baseline.distributions]
    return {"fingerprint": baseline.core.fingerprint, "probs": probs, "entropy": _entropy_stats(ents)}


def run_baseline_stability(spec: ExperimentSpec) -> dict:
    record = _new_record(spec)
    n_sprints = int(spec.grid[0])
    spec_dict = spec.to_dict()
    sprints = []
    for _ in range(n_sprints):
        if spec.isolate_sprints:
            # a fresh interpreter per sprint rules out in-process state carrying over
            ctx = multiprocessing.get_context("spawn")
            with ProcessPoolExecutor(max_workers=1, mp_context=ctx) as pool:
                sprints.append(pool.submit(_sprint, spec_dict).result())
        else:
            sprints.append(_sprint(spec_dict))
    ids = [f"p{i:03d}" for i in range(spec.n_prompts)]
    first = [OutputDistribution(probs=row, prompt_id=pid) for row, pid in zip(sprints[0]["probs"], ids)]
    rows, cross = [], []
    for i, sp in enumerate(sprints, 1):
        dists = [OutputDistribution(probs=row, prompt_id=pid) for row, pid in zip(sp["probs"], ids)]
        rep = divergence_report(first, dists, ("sprint-1", f"sprint-{i}"))
        e = sp["entropy"]
        rows.append([f"sprint-{i}", e["mean"], e["std"], e["max"]])
        cross.append({"sprint": i, "fingerprint": sp["fingerprint"], "kl_vs_sprint_1": rep.mean_kl,
                      "js_vs_sprint_1": rep.mean_js,
                      "bit_identical": bool(np.array_equal(sp["probs"], sprints[0]["probs"]))})
    record["per_seed"] = cross
    record["tables"]["baseline_stability"] = {
        "columns": ["sprint", "mean_entropy", "std_entropy", "max_entropy"], "rows": rows,
    }
    record["summary"] = {
        "max_cross_sprint_kl": float(max(c["kl_vs_sprint_1"] for c in cross)),
        "all_bit_identical": all(c["bit_identical"] for c in cross),
        "log_vocab": float(np.log(spec.model_config.vocab_size)),
    }
    return record


RUNNERS = {
    "elimination_sweep": run_elimination_sweep,
    "mutation_sweep": run_mutation_sweep,
    "rf_comparison": run_rf_comparison,
    "baseline_stability": run_baseline_stability,
    "scale_sweep": run_scale_sweep,
}


def run_experiment(spec: ExperimentSpec) -> dict:
    return RUNNERS[spec.kind](spec)
