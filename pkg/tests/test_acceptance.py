"""End-to-end acceptance checks; each prints one pass/fail line.

The training-based checks share three default-size runs (full, local-only,
global-only) plus a second full run for the determinism check, so this
module takes roughly half an hour on one core.
"""

import math
import time

import numpy as np
import pytest

from conftest import CRITERIA
from hmrnet import tensor as T
from hmrnet.cem import assignment_score, greedy_top1_baseline, hungarian
from hmrnet.checkpoint import load_checkpoint, read_manifest
from hmrnet.data import DEFAULT_DOMAINS, SplitConfig, default_prompts, generate_scene, load_scenes, make_splits
from hmrnet.evaluate import evaluate, predict, route_report
from hmrnet.global_router import UsageTracker, cekd_loss, routing_regularization
from hmrnet.gradcheck import TOLERANCE, run_gradcheck
from hmrnet.local_router import coherence_loss, region_count
from hmrnet.model import HMRNet, ModelConfig
from hmrnet.tensor import Tensor
from hmrnet.train import TrainConfig, _targets, staged_train, total_loss

from test_cem import brute_force


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    CRITERIA.append(line)


@pytest.fixture(scope="module")
def splits():
    return make_splits(SplitConfig())


class Runs:
    """Default-config training runs, trained on first use and shared by the checks."""

    def __init__(self, root, splits):
        self.root, self.splits, self.cache = root, splits, {}

    def get(self, variant: str, tag: str = "a"):
        key = (variant, tag)
        if key not in self.cache:
            out = self.root / f"{variant}_{tag}"
            cpu, wall = time.process_time(), time.perf_counter()
            result = staged_train(TrainConfig(variant=variant), self.splits["train"], out_dir=out,
                                  checkpoint_every=6)
            cpu, wall = time.process_time() - cpu, time.perf_counter() - wall
            metrics, preds = evaluate(result.model, self.splits["test"])
            (out / "metrics.json").write_text(metrics.to_json())
            self.cache[key] = dict(out=out, model=result.model, metrics=metrics, preds=preds, cpu=cpu, wall=wall)
        return self.cache[key]


@pytest.fixture(scope="module")
def runs(tmp_path_factory, splits):
    return Runs(tmp_path_factory.mktemp("acceptance"), splits)


# -- 1 ------------------------------------------------------------------------------

def test_gradient_suite():
    cpu = time.process_time()
    results = run_gradcheck(points=100)
    cpu = time.process_time() - cpu
    worst = max(results, key=lambda r: r.worst_error)
    failed = [r.name for r in results if not r.worst_error < TOLERANCE or r.points != 100]
    ok = not failed and cpu < 120
    report(1, ok, f"{len(results)} checks, worst {worst.name} {worst.worst_error:.2e} < {TOLERANCE:g}, "
                  f"{cpu:.1f}s CPU < 120s" + (f"; failed {failed}" if failed else ""))
    assert not failed
    assert cpu < 120
    assert {r.name for r in results} >= {"conv2d", "batch_norm", "detection_loss", "stage3_total_loss"}


# -- 2 ------------------------------------------------------------------------------

def test_hungarian_oracle():
    rng = np.random.default_rng(2024)
    exact = bounded = 0
    for _ in range(1000):
        m = int(rng.integers(1, 7))
        r = int(rng.integers(1, m + 1))
        s = rng.uniform(-1, 1, (r, m))
        h = assignment_score(s, hungarian(s))
        exact += h == brute_force(s)[0]
        bounded += assignment_score(s, greedy_top1_baseline(s)) <= h
    adv = np.array([[0.9, 0.8], [0.85, 0.1]])
    g, h = assignment_score(adv, greedy_top1_baseline(adv)), assignment_score(adv, hungarian(adv))
    ok = exact == 1000 and bounded == 1000 and g < h and math.isclose(g, 1.0) and math.isclose(h, 1.65)
    report(2, ok, f"exact optimum {exact}/1000, greedy <= hungarian {bounded}/1000, adversarial {g:.2f} vs {h:.2f}")
    assert ok


# -- 3 ------------------------------------------------------------------------------

def test_partition_algebra():
    model = HMRNet(ModelConfig())
    rng = np.random.default_rng(7)
    exact, counts = 0, []
    with T.no_grad():
        for b in range(0, 500, 25):
            scenes = [generate_scene(DEFAULT_DOMAINS[int(rng.integers(4))], int(s))
                      for s in rng.integers(0, 10 ** 6, 25)]
            x = Tensor(np.stack([s.image for s in scenes]))
            f = model.global_experts.experts[0](model.backbone(x, True), True)
            local = model.local_partition(f)
            coverage = local.masks.sum(axis=1)
            exact += int(np.sum(np.all(coverage == 1.0, axis=(1, 2))))
            counts += local.counts.tolist()
    sweep = [region_count(e, 1.0, 8) for e in np.linspace(0, 50, 5001)]
    monotone = all(b >= a for a, b in zip(sweep, sweep[1:]))
    anchors = (region_count(0.0, 1.0, 8), region_count(1e9, 1.0, 8))
    ok = exact == 500 and 2 <= min(counts) and max(counts) <= 8 and monotone and anchors == (5, 8)
    report(3, ok, f"exact partitions {exact}/500, R in [{min(counts)}, {max(counts)}], "
                  f"monotone {monotone}, R(0)={anchors[0]} R(inf)={anchors[1]}")
    assert ok


# -- 4 ------------------------------------------------------------------------------

def test_loss_analytics():
    route_uniform = routing_regularization(UsageTracker.from_usage(np.full(2, 0.5))).item()
    route_onehot = routing_regularization(UsageTracker.from_usage([1.0, 0.0])).item()
    same = [Tensor(np.array([0.4, -1.2, 2.0, 0.1]))] * 6
    distill = cekd_loss(same, 3).item()
    # through the model: identical global experts agree on every image; one-hot routing makes the gate 1
    model = HMRNet(ModelConfig())
    model.warm_start_global_experts()
    images = np.stack([generate_scene(DEFAULT_DOMAINS[d], d).image for d in range(4)])
    with T.no_grad():
        v = model.backbone(Tensor(images), True)
        f = model.global_experts.experts[0](v, True, update_stats=False)
        chosen = np.array([0, 2, 3, 5])
        probs = Tensor(np.eye(6)[chosen])
        distill_model = model.distillation(v, f, probs, chosen)[0].item()
    coh_const = coherence_loss(Tensor(np.full((8, 4, 4), 0.125))).item()
    board = np.zeros((2, 4, 4))
    yy, xx = np.mgrid[:4, :4]
    board[0] = (yy + xx) % 2
    board[1] = 1 - board[0]
    coh_board = coherence_loss(Tensor(board)).item()
    ok = (route_uniform == 0.0 and math.isclose(route_onehot, 0.5, abs_tol=1e-15) and abs(distill) < 1e-12
          and abs(distill_model) < 1e-12 and coh_const == 0.0 and coh_board == 48.0)
    report(4, ok, f"route {route_uniform:g}/{route_onehot:g}, distill {distill:.1e}/{distill_model:.1e}, "
                  f"coh {coh_const:g}/{coh_board:g}")
    assert ok


# -- 5 ------------------------------------------------------------------------------

def test_routing_specialization(runs, splits):
    run = runs.get("full")
    rr = route_report(run["model"], splits["test"], run["preds"])
    share = rr.expert_share
    ok = run["cpu"] <= 600 and rr.purity >= 0.9 and share.min() >= 0.02
    report(5, ok, f"train {run['cpu']:.0f}s CPU ({run['wall']:.0f}s wall) <= 600s, purity {rr.purity:.3f} >= 0.9, "
                  f"min expert share {share.min():.3f} >= 0.02, counts {rr.counts.tolist()}")
    assert run["cpu"] <= 600
    assert rr.purity >= 0.9
    assert share.min() >= 0.02


# -- 6 ------------------------------------------------------------------------------

def test_ablation_ordering(runs):
    full = runs.get("full")["metrics"].map
    local = runs.get("local-only")["metrics"].map
    glob = runs.get("global-only")["metrics"].map
    ok = full - local >= 0.005 and local - glob >= 0.005
    report(6, ok, f"mAP full {100 * full:.2f} > local-only {100 * local:.2f} > global-only {100 * glob:.2f}, "
                  f"gaps >= 0.5 points")
    assert full - local >= 0.005
    assert local - glob >= 0.005


# -- 7 ------------------------------------------------------------------------------

def test_open_category_recall(runs, splits):
    run = runs.get("full")
    metrics, _ = evaluate(run["model"], splits["zsd"], "zsd", read_manifest(run["out"])["train_config"])
    r = metrics.recall_at_100
    monotone = r["0.4"] >= r["0.5"] >= r["0.6"]
    ok = monotone and r["0.4"] > 0
    report(7, ok, f"RE@100 {r['0.4']:.4f} >= {r['0.5']:.4f} >= {r['0.6']:.4f}, unseen recall > 0")
    assert monotone
    assert r["0.4"] > 0


# -- 8 ------------------------------------------------------------------------------

def test_cem_overhead(runs):
    model = runs.get("full")["model"]
    scenes = load_scenes(make_splits(SplitConfig(test_per_domain=50))["test"])
    prompts = [text for text, _, _ in default_prompts()]
    assert len(scenes) == 200 and len(prompts) == 16
    off, on = [], []
    for _ in range(3):
        t = time.perf_counter()
        predict(model, scenes)
        off.append(time.perf_counter() - t)
        t = time.perf_counter()
        predict(model, scenes, cem=True, prompts=prompts)
        on.append(time.perf_counter() - t)
    overhead = min(on) / min(off) - 1
    ok = overhead < 0.10
    report(8, ok, f"CEM on {min(on):.2f}s vs off {min(off):.2f}s (best of 3), overhead {100 * overhead:.1f}% < 10%")
    assert ok


# -- 9 ------------------------------------------------------------------------------

def test_determinism(runs):
    a, b = runs.get("full", "a"), runs.get("full", "b")
    files_a = sorted(p.relative_to(a["out"]) for p in a["out"].rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b["out"]) for p in b["out"].rglob("*") if p.is_file())
    differ = [str(p) for p in files_a if (a["out"] / p).read_bytes() != (b["out"] / p).read_bytes()]
    ok = files_a == files_b and not differ and len(files_a) > 0
    report(9, ok, f"{len(files_a)} checkpoint and metrics files, {len(differ)} differ")
    assert files_a == files_b
    assert not differ


# -- 10 -----------------------------------------------------------------------------

def _params(module):
    return [p.data for p in module.parameters()]


def test_stage_isolation(runs, splits):
    run = runs.get("full")
    fresh = HMRNet(ModelConfig())
    end_stage1, _ = load_checkpoint(run["out"] / "epoch_006")
    end_stage2, _ = load_checkpoint(run["out"] / "epoch_018")
    global_routing = lambda m: _params(m.router) + _params(m.distill_head)
    local_and_cem = lambda m: (_params(m.partition) + _params(m.local_experts) + _params(m.cem_visual)
                               + _params(m.cem_text))
    frozen1 = all(np.array_equal(a, b) for a, b in zip(global_routing(fresh), global_routing(end_stage1)))
    frozen2 = all(np.array_equal(a, b) for a, b in zip(local_and_cem(fresh), local_and_cem(end_stage2)))

    # audited batches: every unselected expert's gradient is exactly zero
    model, _ = load_checkpoint(run["out"])
    scenes = load_scenes(splits["train"])
    rng = np.random.default_rng(10)
    audited, leaks, selected_ok = 0, 0, True
    prompts = [text for text, tag, _ in default_prompts() if tag == "seen"]
    for stage in (2, 3, 3, 3):
        idx = rng.choice(len(scenes), 8, replace=False)
        batch = [scenes[i] for i in idx]
        model.zero_grad()
        out = model.forward(np.stack([s.image for s in batch]), np.array([s.domain for s in batch]), stage=stage,
                            targets=[_targets(s) for s in batch], prompts=prompts)
        model.tracker.current = None
        T.backward(total_loss(out.losses, stage))
        used = set(out.experts.tolist())
        for e in range(model.config.global_experts):
            grads = [p.grad for p in model.global_experts.expert_parameters(e)]
            if e in used:
                selected_ok &= any(np.any(g != 0) for g in grads)
            else:
                leaks += any(np.any(g != 0) for g in grads)
        active_local = set() if out.local is None else {r for r in range(model.config.local_experts)
                                                        if out.local.masks[:, r].any()}
        for r in range(model.config.local_experts):
            grads = [p.grad for p in model.local_experts.expert_parameters(r)]
            if r not in active_local:
                leaks += any(np.any(g != 0) for g in grads)
        if stage == 2:
            leaks += any(np.any(p.grad != 0) for p in model.partition.parameters() + model.cem_visual.parameters()
                         + model.cem_text.parameters())
        audited += 1
    ok = frozen1 and frozen2 and leaks == 0 and selected_ok
    report(10, ok, f"routing params unchanged through stage 1 {frozen1}, local/CEM through stage 2 {frozen2}, "
                   f"{leaks} gradient leaks over {audited} audited batches")
    assert frozen1 and frozen2
    assert leaks == 0 and selected_ok
