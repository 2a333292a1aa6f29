"""Acceptance suite: ten gates, one test and one PASS/FAIL line each.

Gates 1-5 and 9-10 are exact property checks (gradients, adapter algebra,
attention set semantics, metric arithmetic, optimizer oracles, determinism,
sampler distributions). Gates 6-8 run the full desk-scale experiment:
pretrain a propagation base per seed, meta-train adapters, and check the
learned-adaptation effects directionally. The experiment for the three
seeds runs in parallel worker processes and is shared by gates 6-8.

Every gate prints one line; the same lines repeat in the terminal summary
(see conftest.py) so a plain ``pytest -v`` run shows them.
"""
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest
from scipy import stats

import memseg.autograd as ag
import memseg.cli as cli
from memseg.autograd import Tensor, finite_difference_gradcheck
from memseg.checkpoint import load_checkpoint, save_checkpoint
from memseg.data import (SyntheticConfig, SyntheticIndex, episode_rng,
                         generate_synthetic_episode, make_folds,
                         sample_episode_class_first, sample_episode_query_first)
from memseg.evaluation import (MetricsReport, evaluate_fold,
                               evaluate_identity_support)
from memseg.lora import merge_all, select_trainable
from memseg.model import FewShotSegmenter, ModelConfig
from memseg.train import (AdamW, TrainConfig, combined_loss, cosine_lr,
                          meta_train, pretrain_base)

RESULTS = []


def _gate(number: int, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# experiment profile shared by gates 6-8
# ---------------------------------------------------------------------------

SEEDS = (0, 1, 2)
MODEL = dict(image_size=32, patch=4, d_model=32, enc_depth=2, n_heads=4,
             mem_depth=1, d_mem=16, mem_locality=0.5)
PRETRAIN = dict(epochs=40, lr0=3e-3, batch=16, episodes_per_epoch=256,
                val_episodes=8, train_K=1, patience=100)
META = dict(epochs=48, lr0=1e-2, batch=16, episodes_per_epoch=256,
            val_episodes=48, train_K=1, patience=12)
EVAL_EPISODES = 100
EVAL_SEED = 123


def _setup(seed: int):
    synth = SyntheticConfig(image_size=32, clutter=2, seed=seed, jitter=0.0)
    folds = make_folds(synth.class_ids(), 4)
    index = SyntheticIndex(synth, images_per_class=8)
    return synth, folds.train_classes(0), folds.test_classes(0), index


def _scores(model, index, classes):
    indep = evaluate_fold(model, index, classes, K=1, n_episodes=EVAL_EPISODES,
                          seed=EVAL_SEED).miou()
    ident = evaluate_identity_support(model, index, classes, EVAL_EPISODES,
                                      seed=EVAL_SEED).miou()
    k5 = evaluate_fold(model, index, classes, K=5, n_episodes=EVAL_EPISODES,
                       seed=EVAL_SEED).miou()
    return {"indep": indep, "ident": ident, "k5": k5}


def _pretrain_worker(args):
    seed, path = args
    synth, train_classes, test_classes, index = _setup(seed)
    model = FewShotSegmenter(ModelConfig(**MODEL), np.random.default_rng(seed))
    pretrain_base(model, synth, TrainConfig(seed=seed, **PRETRAIN), train_classes)
    save_checkpoint(path, model)
    return seed, _scores(model, index, test_classes)


def _meta_worker(args):
    seed, strategy, path = args
    synth, train_classes, test_classes, index = _setup(seed)
    model, _ = load_checkpoint(path)
    meta_train(model, strategy, synth, TrainConfig(seed=seed, **META),
               train_classes, test_classes)
    return seed, strategy, _scores(model, index, test_classes)


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    """Pretrain per seed, then meta-train lora on every seed plus
    full_memory on seed 0; returns nested score dicts and the wall time."""
    root = tmp_path_factory.mktemp("acceptance")
    paths = {s: str(root / f"base{s}.ckpt") for s in SEEDS}
    t0 = time.monotonic()
    out = {"base": {}, "lora_enc_mem": {}, "full_memory": {}}
    with ProcessPoolExecutor(max_workers=4) as pool:
        for seed, scores in pool.map(_pretrain_worker,
                                     [(s, paths[s]) for s in SEEDS]):
            out["base"][seed] = scores
        jobs = [(s, "lora_enc_mem", paths[s]) for s in SEEDS]
        jobs.append((0, "full_memory", paths[0]))
        for seed, strategy, scores in pool.map(_meta_worker, jobs):
            out[strategy][seed] = scores
    out["minutes"] = (time.monotonic() - t0) / 60.0
    return out


# ---------------------------------------------------------------------------
# gates
# ---------------------------------------------------------------------------

def test_criterion_01_full_pipeline_gradients():
    t0 = time.monotonic()
    cfg = ModelConfig(image_size=16, patch=4, d_model=8, enc_depth=2,
                      n_heads=2, mem_depth=1, d_mem=8)
    model = FewShotSegmenter(cfg, np.random.default_rng(0))
    model.set_requires_grad(True)
    synth = SyntheticConfig(image_size=16, clutter=1, seed=5)
    ep = generate_synthetic_episode(synth, 3, 1, "independent", episode_rng(17, 0))

    def loss(*_):
        logits = ag.reshape(model.forward_logits(ep.query_image, ep.support),
                            ep.query_mask.shape)
        return combined_loss(logits, ep.query_mask, 1.0, 1.0)

    picks = [model.patch_embed.proj.W,
             model.enc_block[0].attn.q.W,
             model.mask_gain,
             model.out_proj.W,
             model.locality_gate,
             model.bank_proj.W,
             model.mem_block[0].cross_attn.k.W,
             model.dec_block.mlp.fc2.b,
             model.decode_stack.up2.kernel,
             model.decode_stack.out.kernel]
    err = finite_difference_gradcheck(loss, picks, eps=1e-4)
    dt = time.monotonic() - t0
    _gate(1, err < 1e-4 and dt < 120.0,
          f"pipeline gradcheck max rel err {err:.2e} (< 1e-4) in {dt:.0f}s (< 120s)")


def test_criterion_02_adapter_neutrality_and_merge(tmp_path):
    cfg = ModelConfig(image_size=16, patch=4, d_model=16, enc_depth=1,
                      n_heads=4, mem_depth=1, d_mem=8)
    synth = SyntheticConfig(image_size=16, clutter=1, seed=2)

    def episodes(n, seed0=0):
        return [generate_synthetic_episode(synth, i % 16, 1, "independent",
                                           episode_rng(31, seed0 + i))
                for i in range(n)]

    model = FewShotSegmenter(cfg, np.random.default_rng(1))
    probe = episodes(3)
    before = [model.segment(e.query_image, e.support).logits.data.tobytes()
              for e in probe]
    select_trainable(model, "lora_enc_mem", np.random.default_rng(7))
    after = [model.segment(e.query_image, e.support).logits.data.tobytes()
             for e in probe]
    neutral = before == after

    rng = np.random.default_rng(9)
    for _, p in model.named_parameters():
        if p.requires_grad:
            p.data += rng.normal(0.0, 0.05, p.shape)
    factored_path, merged_path = tmp_path / "f.ckpt", tmp_path / "m.ckpt"
    save_checkpoint(factored_path, model)
    to_merge, _ = load_checkpoint(factored_path)
    merge_all(to_merge)
    save_checkpoint(merged_path, to_merge)

    factored, _ = load_checkpoint(factored_path)
    merged, _ = load_checkpoint(merged_path)
    gap = 0.0
    for e in episodes(100, seed0=100):
        a = factored.segment(e.query_image, e.support).logits.data
        b = merged.segment(e.query_image, e.support).logits.data
        gap = max(gap, float(np.abs(a - b).max()))
    _gate(2, neutral and gap < 1e-9,
          f"zero-init adapters bit-identical: {neutral}; merged-vs-factored "
          f"max |dlogit| {gap:.1e} over 100 episodes (< 1e-9)")


def test_criterion_03_support_set_semantics():
    cfg = ModelConfig(image_size=16, patch=4, d_model=16, enc_depth=1,
                      n_heads=4, mem_depth=2, d_mem=8)
    model = FewShotSegmenter(cfg, np.random.default_rng(3))
    synth = SyntheticConfig(image_size=16, clutter=1, seed=4)
    worst = 0.0
    for K in (1, 2, 5):
        ep = generate_synthetic_episode(synth, K, K, "independent",
                                        episode_rng(23, K))
        base = model.segment(ep.query_image, ep.support).logits.data
        perm = list(reversed(ep.support))
        worst = max(worst, float(np.abs(
            model.segment(ep.query_image, perm).logits.data - base).max()))
        for m in (2, 3):
            dup = [pair for _ in range(m) for pair in ep.support]
            worst = max(worst, float(np.abs(
                model.segment(ep.query_image, dup).logits.data - base).max()))
    _gate(3, worst <= 1e-9,
          f"permutation and 2x/3x duplication max |dlogit| {worst:.1e} "
          f"for K in (1,2,5) (<= 1e-9)")


def test_criterion_04_metric_oracle():
    cfg = ModelConfig(image_size=16, patch=4, d_model=16, enc_depth=1,
                      n_heads=4, mem_depth=1, d_mem=8)
    model = FewShotSegmenter(cfg, np.random.default_rng(5))
    synth = SyntheticConfig(image_size=16, clutter=1, seed=6)
    index = SyntheticIndex(synth, images_per_class=4)
    classes = list(range(8))
    report = evaluate_fold(model, index, classes, K=1, n_episodes=100,
                           sampler="class_first", seed=77)

    recount = MetricsReport()
    for i in range(100):
        ep = sample_episode_class_first(index, classes, 1, episode_rng(77, i))
        pred = model.segment(ep.query_image, ep.support).mask
        truth = ep.query_mask.astype(bool)
        inter = int(np.logical_and(pred, truth).sum())
        union = int(np.logical_or(pred, truth).sum())
        recount.add(ep.class_id, inter, union)
    counts_equal = report.counts == recount.counts

    disc = MetricsReport()
    disc.add(1, 2, 6)
    disc.add(1, 4, 4)
    accumulated = disc.miou()
    averaged = np.mean([2 / 6, 4 / 4])
    _gate(4, counts_equal and accumulated == 0.6 and abs(averaged - 2 / 3) < 1e-12,
          f"recount of 100 episodes integer-exact: {counts_equal}; "
          f"accumulation 0.6 vs per-episode mean {averaged:.4f}")


def test_criterion_05_optimizer_and_schedule_oracles():
    def scalar_reference(theta, grads, lrs, b1=0.9, b2=0.999, eps=1e-8, wd=1e-2):
        m = v = 0.0
        for t, (g, lr) in enumerate(zip(grads, lrs), start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            step = lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            theta = theta - step - lr * wd * theta
        return theta

    p = Tensor(np.array([0.7]), requires_grad=True)
    opt = AdamW([p])
    rng = np.random.default_rng(11)
    grads, lrs = [], []
    for t in range(10):
        g = float(rng.normal())
        lr = cosine_lr(t, 10, 1e-2, 1e-4)
        grads.append(g)
        lrs.append(lr)
        opt.step({p: np.array([g])}, lr=lr)
    drift = abs(float(p.data[0]) - scalar_reference(0.7, grads, lrs))

    endpoints = (cosine_lr(0, 100, 3e-4, 1e-6) == 3e-4
                 and cosine_lr(100, 100, 3e-4, 1e-6) == 1e-6)
    _gate(5, drift < 1e-12 and endpoints,
          f"AdamW vs scalar reference drift {drift:.1e} over 10 steps "
          f"(< 1e-12); cosine endpoints exact: {endpoints}")


def test_criterion_06_adaptation_beats_frozen_baseline(experiment):
    gaps = {s: experiment["lora_enc_mem"][s]["indep"]
               - experiment["base"][s]["indep"] for s in SEEDS}
    minutes = experiment["minutes"]
    ok = all(g >= 0.10 for g in gaps.values()) and minutes < 30.0
    shown = ", ".join(f"seed {s}: {100 * g:+.1f}" for s, g in gaps.items())
    _gate(6, ok, f"novel-fold mIoU gain of lora_enc_mem over none "
                 f"({shown} points, each >= +10) in {minutes:.1f} min (< 30)")


def test_criterion_07_propagation_vs_forgetting(experiment):
    base = experiment["base"][0]
    premise = base["ident"] - base["indep"]
    drop_lora = base["ident"] - experiment["lora_enc_mem"][0]["ident"]
    drop_full = base["ident"] - experiment["full_memory"][0]["ident"]
    ok = premise >= 0.20 and drop_full > drop_lora
    _gate(7, ok, f"pretrained identity-support advantage {100 * premise:+.1f} "
                 f"points (>= +20); identity drop full_memory "
                 f"{100 * drop_full:.1f} > lora_enc_mem {100 * drop_lora:.1f}")


def test_criterion_08_five_shot_non_degradation(experiment):
    deltas = {s: experiment["lora_enc_mem"][s]["k5"]
                 - experiment["lora_enc_mem"][s]["indep"] for s in SEEDS}
    ok = all(d >= -0.02 for d in deltas.values())
    shown = ", ".join(f"seed {s}: {100 * d:+.1f}" for s, d in deltas.items())
    _gate(8, ok, f"K=5 minus K=1 mIoU on the 1-shot-trained model "
                 f"({shown} points, each >= -2)")


def test_criterion_09_determinism(tmp_path):
    profile = {
        "model": {"image_size": 16, "patch": 4, "d_model": 16, "enc_depth": 1,
                  "n_heads": 4, "mem_depth": 1, "d_mem": 8},
        "synth": {"image_size": 16, "clutter": 1},
        "train": {"epochs": 2, "lr0": 1e-3, "batch": 2, "episodes_per_epoch": 4,
                  "val_episodes": 2, "patience": 2},
        "eval": {"n_episodes": 8},
        "images_per_class": 2,
    }
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(profile))
    args = ["--config", str(cfg), "--seed", "3"]
    assert cli.main(["pretrain", "--out", str(tmp_path / "pre")] + args) == 0
    blobs = []
    for copy in ("a", "b"):
        code = cli.main(["metatrain", "--ckpt", str(tmp_path / "pre" / "base.ckpt"),
                         "--out", str(tmp_path / copy),
                         "--strategy", "lora_enc_mem"] + args)
        assert code == 0
        blobs.append((tmp_path / copy / "meta.ckpt").read_bytes())
    identical = blobs[0] == blobs[1]

    reports = []
    for jobs in ("1", "4"):
        out = tmp_path / f"jobs{jobs}"
        assert cli.main(["eval", "--ckpt", str(tmp_path / "a" / "meta.ckpt"),
                         "--out", str(out), "--jobs", jobs] + args) == 0
        reports.append((out / "report.json").read_text())
    invariant = reports[0] == reports[1]
    _gate(9, identical and invariant,
          f"repeat metatrain checkpoints bit-identical: {identical}; "
          f"evaluation invariant to --jobs: {invariant}")


def test_criterion_10_sampler_distributions():
    # query-first: uniform over images, then a class present on the image;
    # class-first: uniform over classes regardless of image counts
    from test_data import toy_index
    index = toy_index({1: ["A", "B", "C", "D"], 2: ["D", "E", "F"]})
    images = sorted({i for c in (1, 2) for i in index.images_of(c)})
    expected_qf = {1: 0.0, 2: 0.0}
    for img in images:
        present = [c for c in (1, 2) if img in index.images_of(c)]
        for c in present:
            expected_qf[c] += 1.0 / (len(images) * len(present))

    n = 8000
    rng = np.random.default_rng(4)
    drawn_qf, drawn_cf = {1: 0, 2: 0}, {1: 0, 2: 0}
    for _ in range(n):
        drawn_qf[sample_episode_query_first(index, [1, 2], 1, rng).class_id] += 1
        drawn_cf[sample_episode_class_first(index, [1, 2], 1, rng).class_id] += 1
    p_qf = stats.chisquare([drawn_qf[1], drawn_qf[2]],
                           [n * expected_qf[1], n * expected_qf[2]]).pvalue
    p_cf = stats.chisquare([drawn_cf[1], drawn_cf[2]], [n / 2, n / 2]).pvalue
    _gate(10, p_qf > 0.01 and p_cf > 0.01,
          f"chi-square vs enumeration: query-first p={p_qf:.3f}, "
          f"class-first p={p_cf:.3f} (both > 0.01)")
