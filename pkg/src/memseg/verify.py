"""Self-contained integrity checks behind the `verify` subcommand.

Each check re-derives an expected value independently (hand arithmetic,
scalar reference loops, brute-force recounts) and compares it against the
library, resolving library symbols at call time so that a corrupted
module fails its check instead of a stale alias passing it.
"""
from __future__ import annotations

import math

import numpy as np

CHECKS = []


def check(name: str):
    def register(fn):
        CHECKS.append((name, fn))
        return fn
    return register


def _tiny_model(seed: int = 0):
    from .model import FewShotSegmenter, ModelConfig
    return FewShotSegmenter(ModelConfig(16, 4, 16, 1, 4, 1, 8),
                            np.random.default_rng(seed))


def _tiny_episode(seed: int = 9, k: int = 1):
    from .data import SyntheticConfig, generate_synthetic_episode, episode_rng
    cfg = SyntheticConfig(image_size=16, clutter=1, seed=5)
    return generate_synthetic_episode(cfg, class_id=seed % cfg.n_classes, K=k,
                                      similarity="independent",
                                      rng=episode_rng(31, seed))


@check("engine_gradients")
def check_engine_gradients():
    from . import autograd as ag
    rng = np.random.default_rng(0)
    x = ag.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = ag.Tensor(rng.normal(size=(4, 4)), requires_grad=True)

    def f(*_):
        h = ag.softmax(ag.matmul(x, w), axis=-1)
        return ag.tensor_sum(ag.mul(h, ag.sigmoid(ag.matmul(x, w))))

    err = ag.finite_difference_gradcheck(f, [x, w])
    assert err < 1e-6, f"rel err {err:.3e}"
    return f"matmul/softmax/sigmoid rel err {err:.1e}"


@check("pipeline_gradients")
def check_pipeline_gradients():
    from . import autograd as ag
    from .train import combined_loss
    model = _tiny_model(1)
    model.set_requires_grad(True)
    ep = _tiny_episode()
    picks = [model.patch_embed.proj.W, model.out_proj.b,
             model.bank_proj.W, model.decode_stack.out.kernel]

    def f(*_):
        logits = model.forward_logits(ep.query_image, ep.support)
        return combined_loss(ag.reshape(logits, ep.query_mask.shape),
                             ep.query_mask)

    # composite pipelines need eps above the f64 roundoff floor
    err = ag.finite_difference_gradcheck(f, picks, eps=1e-4)
    assert err < 1e-4, f"rel err {err:.3e}"
    return f"end-to-end rel err {err:.1e}"


@check("adapter_neutrality")
def check_adapter_neutrality():
    from .lora import LoraConfig, attach_lora
    ep = _tiny_episode(3)
    model = _tiny_model(2)
    before = model.segment(ep.query_image, ep.support).logits.data.tobytes()
    attach_lora(model, LoraConfig(rank_by_group={"image_encoder": 2,
                                                 "memory_attention": 2}),
                np.random.default_rng(7))
    after = model.segment(ep.query_image, ep.support).logits.data.tobytes()
    assert before == after, "fresh adapters changed the forward pass"
    return "fresh adapters are bit-exact no-ops"


@check("adapter_merge")
def check_adapter_merge():
    from .lora import LoraConfig, attach_lora, iter_adapters, merge_all
    ep = _tiny_episode(4)
    model = _tiny_model(3)
    attach_lora(model, LoraConfig(rank_by_group={"memory_attention": 2}),
                np.random.default_rng(1))
    rng = np.random.default_rng(2)
    for _, _, adapter in iter_adapters(model):
        adapter.B.data[...] = rng.normal(size=adapter.B.shape) * 0.05
    factored = model.segment(ep.query_image, ep.support).logits.data
    merge_all(model)
    merged = model.segment(ep.query_image, ep.support).logits.data
    gap = float(np.max(np.abs(factored - merged)))
    assert gap <= 1e-9, f"merged-vs-factored gap {gap:.3e}"
    return f"merged vs factored gap {gap:.1e}"


@check("support_set_semantics")
def check_support_set_semantics():
    model = _tiny_model(4)
    ep = _tiny_episode(5, k=3)
    base = model.segment(ep.query_image, ep.support).logits.data
    doubled = model.segment(ep.query_image, ep.support + ep.support).logits.data
    permuted = model.segment(ep.query_image, ep.support[::-1]).logits.data
    gap = max(float(np.max(np.abs(base - doubled))),
              float(np.max(np.abs(base - permuted))))
    assert gap <= 1e-9, f"set-semantics gap {gap:.3e}"
    return f"duplication/permutation gap {gap:.1e}"


@check("metric_accumulation")
def check_metric_accumulation():
    from .evaluation import MetricsReport
    report = MetricsReport()
    report.add(0, 2, 6)
    report.add(0, 4, 4)
    got = report.miou()
    assert got == 0.6, f"count-accumulated mIoU {got} != 0.6"
    assert got != (2 / 6 + 1) / 2, "metric degenerated to per-image averaging"
    return "counts accumulate before the ratio"


@check("metric_recount")
def check_metric_recount():
    from .evaluation import MetricsReport, iou_accumulate
    rng = np.random.default_rng(11)
    report = MetricsReport()
    raw = []
    for _ in range(30):
        c = int(rng.integers(3))
        pred, truth = rng.random((7, 7)) > 0.5, rng.random((7, 7)) > 0.5
        raw.append((c, pred, truth))
        iou_accumulate(report, c, pred, truth)
    for c in range(3):
        inter = sum(int(np.sum(p & t)) for cc, p, t in raw if cc == c)
        union = sum(int(np.sum(p | t)) for cc, p, t in raw if cc == c)
        assert report.counts.get(c, [0, 0]) == [inter, union], f"class {c} counts drifted"
    return "30-episode brute-force recount matches"


@check("optimizer_reference")
def check_optimizer_reference():
    from . import autograd as ag
    from .train import AdamW
    p = ag.Tensor(np.array([1.0]), requires_grad=True)
    opt = AdamW([p], weight_decay=1e-2)
    theta, m, v = 1.0, 0.0, 0.0
    for t in range(1, 11):
        g = 2.0 * float(p.data[0])
        opt.step({p: np.array([g])}, lr=0.1)
        gr = 2.0 * theta
        m = 0.9 * m + 0.1 * gr
        v = 0.999 * v + 0.001 * gr * gr
        theta -= 0.1 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8) \
            + 0.1 * 1e-2 * theta
    gap = abs(float(p.data[0]) - theta)
    assert gap < 1e-12, f"optimizer drifted {gap:.3e} from scalar reference"
    return f"10-step scalar-reference gap {gap:.1e}"


@check("schedule_endpoints")
def check_schedule_endpoints():
    from .train import cosine_lr
    assert cosine_lr(0, 40, 3e-3, 1e-5) == 3e-3, "t=0 must give lr0"
    assert cosine_lr(40, 40, 3e-3, 1e-5) == 1e-5, "t=T must give lr_min"
    assert cosine_lr(90, 40, 3e-3, 1e-5) == 1e-5, "t>T must clamp"
    mid = cosine_lr(20, 40, 3e-3, 1e-5)
    assert abs(mid - (3e-3 + 1e-5) / 2) < 1e-12, "midpoint off"
    return "cosine endpoints exact, tail clamped"


@check("loss_values")
def check_loss_values():
    from . import autograd as ag
    from . import train
    z0 = ag.Tensor(np.zeros((3, 3)))
    got = train.bce_loss(z0, np.zeros((3, 3))).item()
    assert abs(got - math.log(2)) < 1e-12, f"bce at zero logits {got} != ln 2"

    z = np.array([[1.0, -1.0], [0.0, 2.0]])
    t = np.array([[1.0, 0.0], [0.0, 1.0]])
    expected = np.mean([max(zi, 0) - zi * ti + math.log1p(math.exp(-abs(zi)))
                        for zi, ti in zip(z.ravel(), t.ravel())])
    got = train.bce_loss(ag.Tensor(z), t).item()
    assert abs(got - expected) < 1e-12, "bce per-pixel recomputation mismatch"

    got = train.dice_loss(ag.Tensor(np.zeros((2, 2))), np.zeros((2, 2))).item()
    assert abs(got - (1 - 1 / 3)) < 1e-12, f"dice at p=0.5, empty target: {got}"
    got = train.dice_loss(ag.Tensor(np.zeros((2, 2))), np.ones((2, 2))).item()
    assert abs(got - (1 - 5 / 7)) < 1e-12, f"dice at p=0.5, full target: {got}"
    return "bce and dice match hand arithmetic"


@check("sampler_determinism")
def check_sampler_determinism():
    from .data import (SyntheticConfig, SyntheticIndex, episode_rng,
                       sample_episode_class_first)
    cfg = SyntheticConfig(image_size=16, clutter=1, seed=5)
    index = SyntheticIndex(cfg, images_per_class=3)
    for i in range(20):
        a = sample_episode_class_first(index, [0, 1, 2], 2, episode_rng(3, i))
        b = sample_episode_class_first(index, [0, 1, 2], 2, episode_rng(3, i))
        assert a.query_id == b.query_id and a.support_ids == b.support_ids, \
            f"episode {i} not reproducible"
        assert a.query_id not in a.support_ids, "query leaked into support"
    return "20 episodes reproducible, query disjoint from support"


@check("checkpoint_roundtrip")
def check_checkpoint_roundtrip():
    import tempfile
    from pathlib import Path
    from .checkpoint import load_checkpoint, save_checkpoint
    ep = _tiny_episode(6)
    model = _tiny_model(5)
    before = model.segment(ep.query_image, ep.support).logits.data
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.ckpt"
        save_checkpoint(path, model, extras={"stage": "verify"})
        first_bytes = path.read_bytes()
        save_checkpoint(path, model, extras={"stage": "verify"})
        assert path.read_bytes() == first_bytes, "repeated save not byte-identical"
        clone, extras = load_checkpoint(path)
    after = clone.segment(ep.query_image, ep.support).logits.data
    assert before.tobytes() == after.tobytes(), "reloaded model drifted"
    assert extras.get("stage") == "verify", "extras lost in round trip"
    return "save/load round trip bit-exact"


@check("mask_geometry")
def check_mask_geometry():
    from .data import SyntheticConfig, make_scene
    cfg = SyntheticConfig(seed=2)
    scene = make_scene(cfg, class_id=4, rng=np.random.default_rng(8))
    assert set(np.unique(scene.mask)) <= {0.0, 1.0}, "mask must be binary"
    assert scene.mask.sum() >= 8, "degenerate mask"
    assert scene.image.shape == (3, cfg.image_size, cfg.image_size)
    assert scene.image.min() >= 0.0 and scene.image.max() <= 1.0, "image range"
    quantized = np.round(scene.image * 255) / 255
    assert np.array_equal(quantized, scene.image), "image not 8-bit exact"
    return "rendered scenes are 8-bit exact with live masks"


def run_checks(writer=print):
    """Run every named check; returns the number of failures."""
    failures = 0
    for name, fn in CHECKS:
        try:
            detail = fn()
            writer(f"ok   {name}: {detail}")
        except AssertionError as e:
            failures += 1
            writer(f"FAIL {name}: {e}")
        except Exception as e:  # noqa: BLE001 - a crash is a failed check
            failures += 1
            writer(f"FAIL {name}: {type(e).__name__}: {e}")
    writer(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed")
    return failures
