"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are printed together at the
end of the pytest run (see conftest.py) and when this file is executed
directly with ``python3 tests/test_acceptance.py``.
"""

import math
import time

import numpy as np
import pytest

import oracle
from revlearn import adapters, cli, harness
from revlearn.harness import ExperimentSpec
from revlearn.io import dumps
from revlearn.metrics import divergence_report, ils, js, kl, recoverability
from revlearn.model import ModelConfig, OutputDistribution, Prompt, evaluate, grad_check, init_core

LOG2 = math.log(2)
SEEDS = (11, 23, 42)
THREE_DECADES = (0.001, 0.01, 0.05)

RESULTS: dict[int, str] = {}


def report(n, ok, detail):
    RESULTS[n] = f"{'PASS' if ok else 'FAIL'}  criterion {n:>2}: {detail}"
    return ok


_records: dict[str, tuple[dict, float]] = {}


def record(kind):
    """Run each experiment once per session with its default spec; returns (record, seconds)."""
    if kind not in _records:
        t0 = time.perf_counter()
        rec = harness.run_experiment(ExperimentSpec(kind=kind))
        _records[kind] = (rec, time.perf_counter() - t0)
    return _records[kind]


def test_c01_exact_reversibility():
    t0 = time.perf_counter()
    spec = ExperimentSpec(kind="rf_comparison")
    base = harness.prepare_baseline(spec)
    prompts = base.prompts.prompts
    problems = []
    for seed in SEEDS:
        task = spec.task.build(base.prompts, base.core.config, spec.corpus_seed, seed)
        module = adapters.attach(base.core, adapters.new_module(base.core, rank=spec.rank, seed=seed))
        module = adapters.adapt_behavioral(base.core, module, task)
        adapted = evaluate(base.core, module, prompts)
        recovered = evaluate(base.core, adapters.unload(module), prompts)
        d_adapt = divergence_report(base.distributions, adapted)
        d_rec = divergence_report(base.distributions, recovered)
        nonzero = [pid for pid, (k, j) in d_rec.per_prompt.items() if k != 0.0 or j != 0.0]
        bitwise = all(np.array_equal(a.probs, b.probs) for a, b in zip(base.distributions, recovered))
        rf = recoverability(d_adapt, d_rec).rf
        if nonzero or not bitwise or rf != 1.0 or len(prompts) != 64:
            problems.append(f"seed {seed}: {len(nonzero)} prompts nonzero, bitwise={bitwise}, rf={rf}")
    elapsed = time.perf_counter() - t0
    ok = not problems and elapsed < 10
    report(1, ok, f"unload exact on 64 prompts x 3 seeds, RF=1 ({elapsed:.1f}s < 10s) {'; '.join(problems)}")
    assert ok, problems


def test_c02_elimination_threshold_structure():
    rec, elapsed = record("elimination_sweep")
    rows = rec["tables"]["elimination"]["rows"]
    grid = [r[0] for r in rows]
    zero_gap = max(max(abs(f["elimination"][0]["kl"] - f["post_adaptation"]["mean_kl"]),
                       abs(f["elimination"][0]["js"] - f["post_adaptation"]["mean_js"])) for f in rec["per_seed"])
    last = rows[grid.index(1.0)]
    eps_desk = rec["summary"]["epsilon_desk"]
    after_exact = eps_desk is not None and all(r[3] == "exact" for r in rows if r[0] >= eps_desk)
    ok = (grid == [0.0, 0.001, 0.01, 0.05, 0.2, 0.4, 0.6, 0.8, 1.0] and zero_gap <= 1e-12
          and last[1] < 1e-6 and last[2] < 1e-6 and after_exact and elapsed < 60)
    report(2, ok, f"eps=0 gap {zero_gap:.1e}, eps=1 KL {last[1]:.1e} JS {last[2]:.1e}, "
                  f"eps_desk={eps_desk} ({elapsed:.1f}s < 60s)")
    assert ok


def test_c03_irreversibility_of_mutation():
    rec, elapsed = record("mutation_sweep")
    frags = [f for f in rec["per_seed"] if f["alpha"] in THREE_DECADES]
    low_kl = [f for f in frags if not f["post_rollback"]["mean_kl"] > 1e-6]
    rf_pos = [f for f in frags if f["recoverability"]["rf"] != 0.0]
    not_increasing = []
    for tag in rec["spec"]["scales"]:
        means = [r[2] for r in rec["tables"]["mutation"]["rows"] if r[0] == tag and r[1] in THREE_DECADES]
        if not all(b > a for a, b in zip(means, means[1:])):
            not_increasing.append(tag)
    ok = not low_kl and not rf_pos and not not_increasing and elapsed < 60
    worst = max((f["recoverability"]["rf"] for f in frags), default=0.0)
    report(3, ok, f"{len(frags) - len(low_kl)}/{len(frags)} seed cells KL>1e-6, "
                  f"{len(frags) - len(rf_pos)}/{len(frags)} with RF=0 (max RF {worst:.3g}), "
                  f"KL strictly increasing on {len(rec['spec']['scales']) - len(not_increasing)}/"
                  f"{len(rec['spec']['scales'])} scales ({elapsed:.1f}s < 60s)")
    assert not low_kl, "post-rollback KL not strictly positive"
    assert not not_increasing, f"KL not increasing in alpha on {not_increasing}"
    assert elapsed < 60
    assert not rf_pos, [(f["scale_tag"], f["alpha"], f["seed"], f["recoverability"]["rf"]) for f in rf_pos]


def test_c04_js_saturation():
    rec, _ = record("mutation_sweep")
    alpha = max(rec["spec"]["grid"])
    rows = [r for r in rec["tables"]["mutation"]["rows"] if r[1] == alpha]
    inside = [LOG2 - 0.05 <= r[3] <= LOG2 + 1e-9 for r in rows]
    ok = bool(rows) and all(inside)
    report(4, ok, f"alpha={alpha:g}: mean JS " + ", ".join(f"{r[0]} {r[3]:.4f}" for r in rows)
           + f" in [{LOG2 - 0.05:.4f}, {LOG2:.4f}]")
    assert ok


def test_c05_rf_comparison_table():
    rec, _ = record("rf_comparison")
    rows = {r[0]: r for r in rec["tables"]["rf_comparison"]["rows"]}
    checks = {
        "mutation": rows["mutation"][1] > 0 and rows["mutation"][2] == 0.0,
        "finetune": rows["finetune"][1] > 0 and rows["finetune"][2] == 0.0,
        "rlae": rows["rlae"][1] < 1e-6 and rows["rlae"][2] == 1.0,
    }
    same_task = all(len({f["task_fingerprint"] for f in rec["per_seed"] if f["seed"] == s}) == 1 for s in SEEDS)
    ok = all(checks.values()) and same_task and list(rows) == ["mutation", "finetune", "rlae"]
    report(5, ok, "; ".join(f"{m}: div {rows[m][1]:.3g}, RF {rows[m][2]:.3g} {'ok' if c else 'MISMATCH'}"
                            for m, c in checks.items()) + f"; shared task {same_task}")
    assert same_task
    assert ok, checks


def test_c06_scale_invariance():
    rec, elapsed = record("scale_sweep")
    table = rec["tables"]["scale_sweep"]["rows"]
    rlae = {r[0]: r[2] for r in table if r[1] == "rlae"}
    mutation = {r[0]: r[2] for r in table if r[1] == "mutation"}
    rlae_ok = set(rlae) == {"S", "M", "L"} and all(v == 100.0 for v in rlae.values())
    mut_ok = set(mutation) == {"S", "M", "L"} and all(v == 0.0 for v in mutation.values())
    ok = rlae_ok and mut_ok and elapsed < 180
    report(6, ok, "RLAE % " + " ".join(f"{k}={v:g}" for k, v in rlae.items())
           + "; mutation % " + " ".join(f"{k}={v:.3g}" for k, v in mutation.items()) + f" ({elapsed:.1f}s < 180s)")
    assert rlae_ok
    assert elapsed < 180
    assert mut_ok, mutation


def test_c07_baseline_stability():
    rec, _ = record("baseline_stability")
    rows = rec["tables"]["baseline_stability"]["rows"]
    identical = len(rows) == 4 and all(r[1:] == rows[0][1:] for r in rows)
    cross = rec["summary"]["max_cross_sprint_kl"]
    ok = identical and cross == 0.0 and rec["summary"]["all_bit_identical"] and rec["spec"]["isolate_sprints"]
    report(7, ok, f"4 isolated sprints, identical entropy stats {identical}, max cross-sprint KL {cross}")
    assert ok


def test_c08_metric_correctness():
    rng = np.random.default_rng(2024)
    worst_kl = worst_js = worst_sym = 0.0
    max_js = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 5))
        # mix smooth and spiky pairs so the floor is exercised too
        conc = rng.choice([0.05, 1.0, 10.0])
        p, q = rng.dirichlet(np.full(n, conc)), rng.dirichlet(np.full(n, conc))
        worst_kl = max(worst_kl, abs(kl(p, q) - float(oracle.kl(p, q))))
        worst_js = max(worst_js, abs(js(p, q) - float(oracle.js(p, q))))
        worst_sym = max(worst_sym, abs(js(p, q) - js(q, p)))
        max_js = max(max_js, js(p, q))
    rf_values = []
    for d_adapt, d_rec in [(0.0, 0.0), (1e-9, 0.0), (1e-9, 1.0), (0.5, 0.0), (0.5, 0.25), (0.5, 3.0), (2.0, 2.0)]:
        rf_values.append(recoverability(_report(d_adapt), _report(d_rec)).rf)
    rf_ok = all(0.0 <= v <= 1.0 for v in rf_values) and rf_values[:3] == [1.0, 1.0, 0.0]
    base = [_dist(rng.dirichlet(np.ones(4)), i) for i in range(64)]
    post = [_dist(rng.dirichlet(np.ones(4)), i) for i in range(64)]
    ils_gap = abs(ils(base, post, 0.01).average - divergence_report(base, post).mean_kl)
    ok = worst_kl < 1e-10 and worst_js < 1e-10 and worst_sym <= 1e-12 and max_js <= LOG2 and rf_ok and ils_gap <= 1e-12
    report(8, ok, f"|kl-oracle| {worst_kl:.1e}, |js-oracle| {worst_js:.1e}, asym {worst_sym:.1e}, "
                  f"max JS {max_js:.4f} <= log2, RF in [0,1] {rf_ok}, ILS gap {ils_gap:.1e}")
    assert ok


def _dist(p, i):
    return OutputDistribution(np.asarray(p, dtype=float), f"p{i:03d}")


def _report(target_kl):
    """Single-prompt report whose KL from the uniform pair equals ``target_kl``."""
    if target_kl == 0.0:
        return divergence_report([_dist([0.5, 0.5], 0)], [_dist([0.5, 0.5], 0)])
    lo, hi = 1e-12, 0.5
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if kl([0.5, 0.5], [mid, 1 - mid]) > target_kl else (lo, mid)
    return divergence_report([_dist([0.5, 0.5], 0)], [_dist([hi, 1 - hi], 0)])


def test_c09_gradient_fidelity():
    rng = np.random.default_rng(9)
    worst = 0.0
    for i in range(100):
        tag = ("S", "M", "L")[i % 3]
        vocab, ctx = int(rng.integers(2, 9)), int(rng.integers(1, 6))
        widths = tuple(int(w) for w in rng.integers(2, 9, size=1 if tag == "S" else 2))
        cfg = ModelConfig(vocab_size=vocab, context_len=ctx, hidden_widths=widths, scale_tag=tag, init_seed=i)
        core = init_core(cfg)
        module = adapters.attach(core, adapters.new_module(core, rank=int(rng.integers(1, 4)), seed=i))
        module = module.with_factors(module.A, [0.3 * rng.standard_normal(b.shape) for b in module.B])
        prompt = Prompt(tuple(int(t) for t in rng.integers(0, vocab, size=ctx)), f"g{i}")
        worst = max(worst, grad_check(core, module, prompt, int(rng.integers(vocab)), n_samples=32, seed=i))
    ok = worst < 1e-3
    report(9, ok, f"max relative error {worst:.2e} over 100 seeded instances (< 1e-3)")
    assert ok


def test_c10_replayability(tmp_path):
    kinds = ["elimination_sweep", "mutation_sweep", "rf_comparison", "baseline_stability", "scale_sweep"]
    failed = []
    for kind in kinds:
        rec, _ = record(kind)
        path = tmp_path / f"{kind}.json"
        path.write_text(dumps(rec), encoding="utf-8")
        if cli.main(["-q", "replay", "--record", str(path)]) != 0:
            failed.append(kind)
    ok = not failed
    report(10, ok, f"byte-identical replay of {len(kinds) - len(failed)}/{len(kinds)} records "
                   f"(criteria 1-7) {' '.join(failed)}")
    assert ok, failed


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
