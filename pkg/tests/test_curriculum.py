import logging
import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlcurate.curriculum import (
    PackItem,
    allocate,
    build_plan,
    emit_config,
    load_config,
    pack_batches,
    sample_pack_item,
    scaled,
    split_by_complexity,
    stage_samples,
)
from vlcurate.errors import ConfigError, VlcurateError
from vlcurate.manifest import TaskCategory
from vlcurate.scoring import EQUAL_WEIGHTS, ComplexityReport
from vlcurate.tileplan import ResolutionConfig

from conftest import make_manifest, make_sample


def rep(name, score, category=TaskCategory.CAPTION, n=10):
    return ComplexityReport(
        name=name, category=category, n_samples=n, raw={}, normalized={},
        axis_scores={"S_text": score, "S_image": score, "S_task": score}, weights=EQUAL_WEIGHTS, score=score,
    )


CAPTIONS = [rep("c1", 0.2), rep("c2", 0.4), rep("c3", 0.6), rep("c4", 0.8)]
OTHERS = [rep("o1", 0.1, TaskCategory.OCR, 5), rep("o2", 0.9, TaskCategory.OCR, 7)]


def names(rs):
    return [r.name for r in rs]


def test_split_examples():
    low, high = split_by_complexity(CAPTIONS)
    assert names(low) == ["c1", "c2"] and names(high) == ["c3", "c4"]
    low, high = split_by_complexity([rep("x", 0.5)], "threshold", 0.5)
    assert names(low) == ["x"] and high == []
    assert names(split_by_complexity([rep("x", 0.7)])[0]) == ["x"]


def test_split_per_category():
    low, high = split_by_complexity(CAPTIONS + OTHERS)
    assert names(low) == ["c1", "c2", "o1"] and names(high) == ["c3", "c4", "o2"]


def test_split_errors():
    with pytest.raises(VlcurateError):
        split_by_complexity([])
    with pytest.raises(ConfigError):
        split_by_complexity(CAPTIONS, "threshold")
    with pytest.raises(ConfigError):
        split_by_complexity(CAPTIONS, "quartile")


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.sampled_from(list(TaskCategory))), min_size=1, max_size=12))
def test_split_partition(items):
    reports = [rep(f"d{i}", s, c) for i, (s, c) in enumerate(items)]
    low, high = split_by_complexity(reports)
    assert sorted(names(low) + names(high)) == sorted(names(reports))
    assert not set(names(low)) & set(names(high))
    for c in {r.category for r in reports}:
        assert any(r.category == c for r in low)


def test_build_plan_reference_constants():
    plan = build_plan(CAPTIONS, CAPTIONS + OTHERS, 1.0)
    s = plan.stages
    assert [x.sample_budget for x in s] == [10_000_000, 23_000_000, 54_000_000, 66_000_000]
    assert [x.learning_rate for x in s] == [2e-4, 1e-5, 4e-5, 4e-5]
    assert [x.warmup_steps for x in s] == [100, 100, None, None]
    assert [x.warmup_ratio for x in s] == [None, None, 0.03, 0.03]
    assert [x.train_steps for x in s] == [65_000, 90_000, 140_000, 250_000]
    assert [set(x.trainable) for x in s] == [
        {"projector"}, {"visual_encoder", "projector"}, {"visual_encoder", "projector", "llm"},
        {"visual_encoder", "projector", "llm"},
    ]
    assert s[0].frozen() == ("visual_encoder", "llm") and s[1].frozen() == ("llm",)
    assert (plan.max_pack_tokens, plan.max_pack_images, plan.max_tiles) == (16384, 48, 24)
    assert (plan.optimizer, plan.schedule) == ("AdamW", "cosine decay")
    assert [a.name for a in s[0].datasets] == ["c1", "c2"] and [a.name for a in s[3].datasets] == ["c3", "c4", "o2"]


def test_build_plan_tiny_scale():
    plan = build_plan(CAPTIONS, CAPTIONS, 1e-6)
    assert [x.sample_budget for x in plan.stages] == [10, 23, 54, 66]
    assert [x.train_steps for x in plan.stages] == [1, 1, 1, 1]


@pytest.mark.parametrize("scale", [0.5, 0.1, 0.37, 1e-3, 3e-7])
def test_freeze_flags_independent_of_scale(scale):
    base = build_plan(CAPTIONS, CAPTIONS, 1.0)
    other = build_plan(CAPTIONS, CAPTIONS, scale)
    assert [x.trainable for x in other.stages] == [x.trainable for x in base.stages]
    assert [x.learning_rate for x in other.stages] == [x.learning_rate for x in base.stages]


def test_build_plan_errors(caplog):
    with pytest.raises(VlcurateError, match="caption"):
        build_plan([], OTHERS)
    with pytest.raises(ConfigError):
        build_plan(CAPTIONS, CAPTIONS, 0)
    with pytest.raises(ConfigError):
        build_plan(CAPTIONS, CAPTIONS, 1.5)
    with caplog.at_level(logging.WARNING):
        build_plan(CAPTIONS, CAPTIONS, policy="threshold", threshold=1.0)
    assert "stage 2" in caplog.text and "no high-complexity" in caplog.text


def test_scaled_rounding():
    assert scaled(10_000_000, 1e-6) == 10
    assert scaled(65_000, 0.1) == 6500
    assert scaled(3, 0.5) == 2


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(0, 500), min_size=1, max_size=8))
def test_allocate_is_proportional(budget, sizes):
    allocs = allocate(budget, [(f"d{i}", n) for i, n in enumerate(sizes)])
    total = sum(sizes)
    if total == 0:
        assert all(a.quota == 0 for a in allocs)
        return
    assert sum(a.quota for a in allocs) == budget
    for a, n in zip(allocs, sizes):
        assert abs(a.quota - budget * n / total) < 1


def test_pack_examples():
    packs = pack_batches([PackItem("a", 9000), PackItem("b", 9000), PackItem("c", 400)])
    assert [p.ids for p in packs] == [("a", "c"), ("b",)]
    packs = pack_batches([PackItem(f"i{k}", 0, (10,)) for k in range(49)])
    assert [p.total_images for p in packs] == [48, 1]
    with pytest.raises(VlcurateError, match="'big'"):
        pack_batches([PackItem("big", 20000)])


def test_pack_10k_random():
    rnd = random.Random(11)
    items = [
        PackItem(f"s{i}", rnd.randint(0, 3000), tuple(rnd.randint(1, 3456) for _ in range(rnd.randint(0, 3))))
        for i in range(10_000)
    ]
    items = [it if it.cost <= 16384 else PackItem(it.id, 0, it.image_tokens[:1]) for it in items]
    packs = pack_batches(items)
    assert all(p.total_tokens <= 16384 and p.total_images <= 48 for p in packs)
    assert Counter(i for p in packs for i in p.ids) == Counter(it.id for it in items)
    assert sum(p.total_tokens for p in packs) == sum(it.cost for it in items)
    assert len(packs) <= len(items)
    assert packs == pack_batches(items)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 16384), st.integers(0, 5)), max_size=60))
def test_pack_properties(specs):
    items = [PackItem(f"s{i}", t, (0,) * k) for i, (t, k) in enumerate(specs)]
    packs = pack_batches(items, max_images=8)
    assert all(p.total_tokens <= 16384 and p.total_images <= 8 for p in packs)
    assert sorted(i for p in packs for i in p.ids) == sorted(it.id for it in items)
    assert len(packs) <= len(items)


def test_sample_pack_item_counts_retained_tokens():
    s = make_sample("x", "What is shown?", "A cat.", size=(940, 479))
    item = sample_pack_item(s, (940, 479), ResolutionConfig())
    assert item.text_tokens == 5 and item.image_tokens == (435,) and item.cost == 440


def test_stage_samples_is_seeded_and_capped():
    ds = {"c1": make_manifest("c1", [make_sample(f"a{i}") for i in range(30)]),
          "c2": make_manifest("c2", [make_sample(f"b{i}") for i in range(5)])}
    reports = [rep("c1", 0.1, n=30), rep("c2", 0.2, n=5), rep("c3", 0.9, n=1)]
    plan = build_plan(reports, reports, 1e-6)
    stage = plan.stages[0]
    picked = stage_samples(stage, ds, seed=4)
    quotas = {a.name: a.quota for a in stage.datasets}
    counts = Counter(d.name for d, _ in picked)
    assert counts == {n: min(quotas[n], len(ds[n].samples)) for n in quotas}
    assert [s.id for _, s in picked] == [s.id for _, s in stage_samples(stage, ds, seed=4)]
    assert [s.id for _, s in picked] != [s.id for _, s in stage_samples(stage, ds, seed=5)]


def test_emit_round_trip_and_determinism():
    plan = build_plan(CAPTIONS, CAPTIONS + OTHERS, 1.0, seed=3, metadata={"note": "desk run"})
    doc = emit_config(plan)
    assert doc == emit_config(plan)
    assert load_config(doc) == plan
    import json

    stage4 = json.loads(doc)["stages"][3]
    assert stage4["train_steps"] == 250000 and stage4["learning_rate"] == 4e-5


def test_load_config_detects_tampering():
    doc = emit_config(build_plan(CAPTIONS, CAPTIONS))
    with pytest.raises(ConfigError):
        load_config(doc.replace('"learning_rate": 0.0002', '"learning_rate": 0.0003'))
