import math

import numpy as np
import pytest

from hmrnet import tensor as T
from hmrnet.checkpoint import load_checkpoint, read_manifest, save_checkpoint
from hmrnet.data import SplitConfig, load_scenes, make_splits
from hmrnet.errors import ConfigurationError, DivergenceError, ValidationError
from hmrnet.model import HMRNet, ModelConfig
from hmrnet.tensor import Tensor
from hmrnet.train import SGD, TrainConfig, flip_scene, staged_train, total_loss
from hmrnet.detection import BoundingBox


@pytest.fixture(scope="module")
def small_manifest():
    return make_splits(SplitConfig(train_per_domain=8))["train"]


@pytest.fixture(scope="module")
def five_epoch_run(small_manifest, tmp_path_factory):
    out = tmp_path_factory.mktemp("five")
    config = TrainConfig(epochs=5, seed=3)
    result = staged_train(config, small_manifest, out_dir=out, checkpoint_every=1)
    return config, result, out


# -- loss assembly --------------------------------------------------------------------

def test_total_loss_arithmetic_example():
    terms = {"det": 2.0, "route": 0.5, "distill": 0.1, "align": 0.3, "coh": 0.05}
    assert total_loss(terms, 3) == pytest.approx(2.95, abs=1e-15)
    assert total_loss(terms, 2) == pytest.approx(2.6, abs=1e-15)


def test_total_loss_stage_one_and_zero_weights_are_detection_only():
    det = T.parameter(np.array(1.25))
    others = {k: T.parameter(np.array(0.7)) for k in ("route", "distill", "align", "coh")}
    for stage in (1, 2, 3):
        loss = total_loss({"det": det, **others}, stage, (0.0, 0.0, 0.0, 0.0))
        assert loss.item() == 1.25
    loss = total_loss({"det": det, **others}, 1)
    assert loss.item() == 1.25
    T.backward(loss)
    assert all(np.all(t.grad == 0) for t in others.values())


def test_total_loss_names_non_finite_term():
    with pytest.raises(DivergenceError, match="distill"):
        total_loss({"det": 1.0, "distill": float("nan")}, 2)
    with pytest.raises(DivergenceError, match="coh"):
        total_loss({"det": 1.0, "coh": float("inf")}, 3)
    with pytest.raises(ConfigurationError):
        total_loss({"route": 1.0}, 2)


# -- optimizer and schedule ------------------------------------------------------------------

def test_sgd_two_step_hand_example():
    p = T.parameter(np.array(1.0))
    opt = SGD([("p", p)], momentum=0.9, weight_decay=1e-4)
    p.grad = np.array(0.5)
    opt.step(0.1, [p])
    # g1 = 0.5 + 1e-4 * 1 = 0.5001; buf = g1; p = 1 - 0.1 * 0.5001
    assert p.data == 1.0 - 0.1 * 0.5001
    assert p.data == pytest.approx(0.94999, abs=1e-15)
    p.grad = np.array(-0.2)
    opt.step(0.1, [p])
    g2 = -0.2 + 1e-4 * 0.94999
    buf = 0.9 * 0.5001 + g2
    assert p.data == pytest.approx(0.94999 - 0.1 * buf, abs=1e-15)
    assert p.data == pytest.approx(0.9249715001, abs=1e-13)


def test_sgd_leaves_unreached_parameters_alone():
    a, b = T.parameter(np.ones(3)), T.parameter(np.ones(3))
    opt = SGD([("a", a), ("b", b)])
    T.backward(T.tsum(T.square(a)))
    reached = [a]
    opt.step(0.1, reached)
    assert np.array_equal(b.data, np.ones(3)) and "b" not in opt.buffers


def test_schedule_stages_and_decay():
    c = TrainConfig(epochs=30)
    assert [c.stage(e) for e in (0, 5, 6, 17, 18, 29)] == [1, 1, 2, 2, 3, 3]
    assert c.learning_rate(17) == 0.001
    assert c.learning_rate(18) == pytest.approx(1e-4)
    assert c.learning_rate(24) == pytest.approx(1e-5)
    with pytest.raises(ConfigurationError):
        TrainConfig(stage_bounds=(0.6, 0.2)).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(lambdas=(1.0, -1.0, 1.0, 1.0)).validate()


def test_flip_mirrors_boxes():
    image = np.zeros((3, 64, 64))
    image[:, 10, 2] = 1.0
    flipped, boxes = flip_scene(image, [BoundingBox(2, 3, 10, 12)])
    assert flipped[0, 10, 61] == 1.0
    assert boxes[0].as_list() == [54, 3, 62, 12]


# -- training runs --------------------------------------------------------------------------------

def test_one_epoch_smoke(small_manifest):
    result = staged_train(TrainConfig(epochs=1), small_manifest)
    entry = result.timeline[0]
    assert all(math.isfinite(entry[k]) for k in ("det", "total"))
    assert len(small_manifest["entries"]) == 32


def test_timeline_and_first_epoch_improves(five_epoch_run):
    _, result, _ = five_epoch_run
    assert [e["stage"] for e in result.timeline] == [1, 2, 2, 3, 3]
    assert result.timeline[0]["det"] < result.initial_loss
    assert all(math.isfinite(e["total"]) for e in result.timeline)


def test_stage_isolation_across_checkpoints(five_epoch_run):
    config, _, out = five_epoch_run
    fresh = HMRNet(ModelConfig(seed=config.seed))
    after_stage1, _ = load_checkpoint(out / "epoch_001")
    after_stage2, _ = load_checkpoint(out / "epoch_003")
    final, _ = load_checkpoint(out)

    def group(model, name):
        return [p.data for p in model.component_parameters()[name]]

    router_only = lambda m: [p.data for p in m.router.parameters() + m.distill_head.parameters()]
    assert all(np.array_equal(a, b) for a, b in zip(router_only(fresh), router_only(after_stage1)))
    for name in ("cem", "local"):
        assert all(np.array_equal(a, b) for a, b in zip(group(fresh, name), group(after_stage2, name)))
    assert any(not np.array_equal(a, b) for a, b in zip(group(fresh, "cem"), group(final, "cem")))
    assert any(not np.array_equal(a, b) for a, b in zip(router_only(fresh), router_only(after_stage2)))


def test_resume_reproduces_uninterrupted_run(five_epoch_run, small_manifest, tmp_path):
    config, full, out = five_epoch_run
    resumed = staged_train(config, small_manifest, out_dir=tmp_path, resume=out / "epoch_002")
    for a, b in zip(full.timeline, resumed.timeline):
        for k in ("det", "route", "distill", "align", "coh", "total"):
            assert abs(a[k] - b[k]) <= 1e-10
    final_a = dict(full.model.named_parameters())
    for name, p in resumed.model.named_parameters():
        assert np.array_equal(p.data, final_a[name].data), name


def test_checkpoint_save_load_save_is_byte_identical(five_epoch_run, tmp_path):
    _, _, out = five_epoch_run
    model, manifest = load_checkpoint(out)
    save_checkpoint(tmp_path, model)
    for entry in read_manifest(tmp_path)["tensors"]:
        assert (tmp_path / entry["file"]).read_bytes() == (out / entry["file"]).read_bytes(), entry["name"]
    assert manifest["tracker_steps"] == model.tracker.steps > 0


def test_checkpoint_rejects_foreign_directory(tmp_path):
    (tmp_path / "manifest.json").write_text('{"schema": "something-else"}')
    with pytest.raises(ValidationError):
        load_checkpoint(tmp_path)


def test_divergence_aborts_with_diagnostics(small_manifest):
    with pytest.raises(DivergenceError, match="epoch"):
        staged_train(TrainConfig(epochs=1, lr=1e4, momentum=0.0), small_manifest)


def test_empty_manifest_rejected():
    with pytest.raises(ConfigurationError):
        staged_train(TrainConfig(epochs=1), {"entries": []})


def test_local_experts_start_as_identity_at_stage_three(five_epoch_run, small_manifest):
    _, _, out = five_epoch_run
    model, _ = load_checkpoint(out / "epoch_003")
    assert model.trained_stage == 2 and not model.local_ready
    scenes = load_scenes(small_manifest)[:8]
    images = np.stack([s.image for s in scenes])
    domains = np.array([s.domain for s in scenes])
    with T.no_grad():
        before = model.forward(images, domains, stage=2, training=True)
    model.warm_start_local_experts([before.features.data])
    assert model.local_ready and model.trained_stage == 3
    with T.no_grad():
        after = model.forward(images, domains, stage=3, training=True)
    # batch stats of each expert's masked input equal the measured ones, so the detector input is unchanged
    np.testing.assert_allclose(after.fused.data, before.features.data, atol=1e-10)
    np.testing.assert_allclose(after.predictions.data, before.predictions.data, atol=1e-10)
