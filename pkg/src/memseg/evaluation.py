"""Accumulated-count segmentation metrics and the evaluation protocols.

IoU is computed from per-class integer pixel counts summed over every
episode of that class, not from per-image IoU averages; the two disagree
whenever episode difficulty varies, and only the count form is exact
under parallel merging.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .data import SAMPLERS, episode_rng
from .errors import ConfigError, ContractError, ProtocolError


class MetricsReport:
    """Per-class intersection/union pixel counts plus run metadata."""

    def __init__(self, meta: dict | None = None):
        self.counts: dict[int, list[int]] = {}
        self.episode_count = 0
        self.meta = dict(meta or {})
        self.warnings: list[str] = []

    def add(self, class_id: int, intersection: int, union: int):
        if intersection < 0 or union < 0 or intersection > union:
            raise ContractError(f"bad counts ({intersection}, {union}) "
                                f"for class {class_id}")
        pair = self.counts.setdefault(int(class_id), [0, 0])
        pair[0] += int(intersection)
        pair[1] += int(union)
        self.episode_count += 1

    def merge(self, other: "MetricsReport"):
        for class_id, (i, u) in other.counts.items():
            pair = self.counts.setdefault(class_id, [0, 0])
            pair[0] += i
            pair[1] += u
        self.episode_count += other.episode_count
        self.warnings.extend(other.warnings)

    def iou(self, class_id: int):
        i, u = self.counts.get(int(class_id), (0, 0))
        return i / u if u > 0 else None

    def miou(self):
        """Mean IoU over classes with nonzero union; None when undefined."""
        values = []
        for class_id in sorted(self.counts):
            v = self.iou(class_id)
            if v is None:
                self.warnings.append(f"class {class_id} has zero union; excluded")
            else:
                values.append(v)
        return float(np.mean(values)) if values else None

    def to_dict(self) -> dict:
        miou = self.miou()
        return {
            "meta": self.meta,
            "episodes": self.episode_count,
            "per_class": {
                str(c): {"intersection": i, "union": u,
                         "iou": (i / u if u > 0 else None)}
                for c, (i, u) in sorted(self.counts.items())
            },
            "miou": miou,
            "undefined": miou is None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        raw = json.loads(text)
        report = cls(meta=raw.get("meta", {}))
        for key, row in raw.get("per_class", {}).items():
            pair = report.counts.setdefault(int(key), [0, 0])
            pair[0] = int(row["intersection"])
            pair[1] = int(row["union"])
        report.episode_count = int(raw.get("episodes", 0))
        return report

    def to_csv(self) -> str:
        lines = ["class_id,intersection,union,iou"]
        for c, (i, u) in sorted(self.counts.items()):
            iou = f"{i / u:.6f}" if u > 0 else ""
            lines.append(f"{c},{i},{u},{iou}")
        miou = self.miou()
        lines.append(f"miou,,,{'' if miou is None else f'{miou:.6f}'}")
        return "\n".join(lines) + "\n"


def iou_accumulate(report: MetricsReport, class_id: int,
                   predicted: np.ndarray, truth: np.ndarray):
    """Fold one episode's prediction into the per-class pixel counts."""
    p = np.asarray(predicted).astype(bool)
    t = np.asarray(truth).astype(bool)
    if p.shape != t.shape:
        raise ContractError(f"prediction shape {p.shape} != truth shape {t.shape}")
    report.add(class_id, int(np.sum(p & t)), int(np.sum(p | t)))


def _as_predictor(model):
    """Normalize to fn(query_image, support, truth) -> bool mask.

    Callables receive the truth mask so that oracle and constant baselines
    can be expressed; a real model never sees it.
    """
    if hasattr(model, "segment"):
        return lambda image, support, truth: model.segment(image, support).mask
    if callable(model):
        return model
    raise ContractError(f"cannot evaluate object of type {type(model).__name__}")


def _run_episodes(predict, make_episode, n_episodes: int, jobs: int,
                  meta: dict) -> MetricsReport:
    report = MetricsReport(meta=meta)
    if n_episodes == 0:
        report.warnings.append("no episodes; mIoU undefined")
        return report

    def one(i: int):
        class_id, image, mask, support = make_episode(i)
        pred = predict(image, support, mask)
        p = np.asarray(pred).astype(bool)
        if p.shape != mask.shape:
            raise ContractError(f"prediction shape {p.shape} != truth "
                                f"shape {mask.shape}")
        return class_id, int(np.sum(p & mask.astype(bool))), \
            int(np.sum(p | mask.astype(bool)))

    if jobs <= 1:
        rows = [one(i) for i in range(n_episodes)]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(one, range(n_episodes)))
    for class_id, inter, union in rows:
        report.add(class_id, inter, union)
    return report


def evaluate_fold(model, index, classes, K: int, n_episodes: int,
                  sampler: str = "class_first", seed: int = 0,
                  jobs: int = 1) -> MetricsReport:
    """Sampled-episode evaluation over the given class set.

    Episode i depends only on (seed, i), so the result is independent of
    job count and episode completion order.
    """
    if sampler not in SAMPLERS:
        raise ConfigError(f"unknown sampler '{sampler}'")
    if n_episodes < 0 or K < 1 or jobs < 1:
        raise ConfigError("n_episodes >= 0, K >= 1, jobs >= 1 required")
    classes = sorted(int(c) for c in classes)
    if not classes:
        raise ConfigError("evaluation needs a non-empty class set")
    predict = _as_predictor(model)
    draw = SAMPLERS[sampler]

    def make_episode(i: int):
        ep = draw(index, classes, K, episode_rng(seed, i))
        return ep.class_id, ep.query_image, ep.query_mask, ep.support

    meta = {"classes": classes, "K": K, "n_episodes": n_episodes,
            "sampler": sampler, "seed": seed, "mode": "standard"}
    return _run_episodes(predict, make_episode, n_episodes, jobs, meta)


def evaluate_identity_support(model, index, classes, n_episodes: int,
                              sampler: str = "class_first", seed: int = 0,
                              jobs: int = 1) -> MetricsReport:
    """Evaluation with the support set replaced by the query itself (K=1).

    The episode stream matches evaluate_fold at K=1; only the support pair
    differs, isolating memory-readout fidelity from cross-image transfer.
    """
    if sampler not in SAMPLERS:
        raise ConfigError(f"unknown sampler '{sampler}'")
    if n_episodes < 0 or jobs < 1:
        raise ConfigError("n_episodes >= 0 and jobs >= 1 required")
    classes = sorted(int(c) for c in classes)
    if not classes:
        raise ConfigError("evaluation needs a non-empty class set")
    predict = _as_predictor(model)
    draw = SAMPLERS[sampler]

    def make_episode(i: int):
        ep = draw(index, classes, 1, episode_rng(seed, i))
        return ep.class_id, ep.query_image, ep.query_mask, \
            [(ep.query_image, ep.query_mask)]

    meta = {"classes": classes, "K": 1, "n_episodes": n_episodes,
            "sampler": sampler, "seed": seed, "mode": "identity"}
    return _run_episodes(predict, make_episode, n_episodes, jobs, meta)


def evaluate_domain_shift(model, index, train_classes, test_classes, K: int,
                          n_episodes: int, sampler: str = "class_first",
                          seed: int = 0, jobs: int = 1) -> MetricsReport:
    """evaluate_fold plus a protocol guard: test classes must be disjoint
    from the classes trained on, else the run measures memorization."""
    overlap = sorted(set(int(c) for c in train_classes)
                     & set(int(c) for c in test_classes))
    if overlap:
        raise ProtocolError(f"test classes {overlap} were seen in training")
    report = evaluate_fold(model, index, test_classes, K, n_episodes,
                           sampler=sampler, seed=seed, jobs=jobs)
    report.meta["mode"] = "shift"
    return report
