import pytest

from octfew.balance import (ALL, REMAINDER, BalanceError, BalanceStrategy, Composition, Engines,
                            builtin_strategy, default_engines, execute, plan_balance)
from octfew.dataset import MAJOR_CLASSES, RARE_CLASSES, ClassLabel, ImageRecord, Provenance, make_folds, \
    root_ancestor


def test_builtin_strategies_full_scale():
    s = builtin_strategy("bal_5000")
    assert all(s.per_class_targets[c] == 5000 for c in ClassLabel)
    assert all(s.composition_rules[c] == Composition(0, 2000, 3000) for c in RARE_CLASSES)
    s = builtin_strategy("bal_10000")
    assert all(s.composition_rules[c] == Composition(0, 2000, 8000) for c in RARE_CLASSES)
    assert s.composition_rules[ClassLabel.DRUSEN] == Composition(ALL, REMAINDER, 0)
    s = builtin_strategy("imb_5000")
    assert all(s.per_class_targets[c] is None for c in MAJOR_CLASSES)
    with pytest.raises(ValueError):
        builtin_strategy("bal_7000")


def test_plan_scaled(small_manifest, quick_checkpoints):
    strat = builtin_strategy("bal_5000", scale=0.004, major_fill="topup")  # 20 per class: 8 aug + 12 gen
    plan = plan_balance(small_manifest, strat, quick_checkpoints)
    for c in RARE_CLASSES:
        led = plan.per_class_ledger[c]
        assert (led.real, led.augmented, led.generated) == (0, 8, 12)
    for c in MAJOR_CLASSES:
        led = plan.per_class_ledger[c]
        assert (led.real, led.augmented, led.generated) == (20, 0, 0)
    assert plan.total() == 180


def test_plan_errors(small_manifest, quick_checkpoints):
    with pytest.raises(BalanceError, match="CSC"):
        plan_balance(small_manifest, builtin_strategy("bal_5000"), {})
    with pytest.raises(BalanceError, match="short by"):
        plan_balance(small_manifest, builtin_strategy("bal_5000", scale=0.01), quick_checkpoints)
    bad = BalanceStrategy("x", {ClassLabel.CSC: 5}, {ClassLabel.CSC: Composition(0, 4, 3)})
    with pytest.raises(BalanceError, match="do not sum to target 5"):
        plan_balance(small_manifest, bad, {ClassLabel.CSC: None})


def test_execute_exact_composition_and_hygiene(small_manifest, quick_checkpoints, tmp_path):
    strat = builtin_strategy("bal_5000", seed=4, scale=0.006, major_fill="topup")  # 30 per class
    plan = plan_balance(small_manifest, strat, quick_checkpoints)
    normal = small_manifest.subset(r.id for r in small_manifest.of_class(ClassLabel.NORMAL))
    out = execute(plan, default_engines(tmp_path, normal))
    assert all(n == 30 for n in out.counts().values())
    for c in RARE_CLASSES:
        assert out.provenance_histogram(c) == {"augmented": 12, "generated": 18}
    for c in MAJOR_CLASSES:
        assert out.provenance_histogram(c) == {"real": 20, "augmented": 10}
    # synthetic rare images descend from real rare images (augmented) or real normals (generated)
    index = {**small_manifest.by_id(), **out.by_id()}
    for r in out.records:
        if r.provenance is not Provenance.real:
            assert root_ancestor(r, index) in small_manifest.by_id()
    # reruns are identical
    again = execute(plan, default_engines(tmp_path / "again", normal))
    assert [(r.id, r.source_id, r.seed) for r in again.records] == [(r.id, r.source_id, r.seed) for r in out.records]


def test_execute_detects_engine_miscount(small_manifest, quick_checkpoints, tmp_path):
    strat = builtin_strategy("bal_5000", scale=0.004, major_fill="topup")
    plan = plan_balance(small_manifest, strat, quick_checkpoints)

    def short_aug(sources, count, seed):
        return [ImageRecord(f"a{i}", sources[0].path, sources[0].label, Provenance.augmented, sources[0].id)
                for i in range(count - 1)]

    engines = Engines(short_aug, lambda label, ck, count, seed: [])
    with pytest.raises(BalanceError):
        execute(plan, engines, out_dir=tmp_path)
    assert (tmp_path / "INVALID").is_file()


def test_id_collisions_are_resalted(small_manifest, tmp_path):
    strat = BalanceStrategy("t", {ClassLabel.CSC: 2, ClassLabel.MH: 2},
                            {ClassLabel.CSC: Composition(0, 2, 0), ClassLabel.MH: Composition(0, 2, 0)}, seed=3)
    plan = plan_balance(small_manifest, strat, {})

    def aug(sources, count, seed):
        return [ImageRecord(f"dup{i}", sources[0].path, sources[0].label, Provenance.augmented, sources[0].id)
                for i in range(count)]

    out = execute(plan, Engines(aug, None))
    assert sorted(out.ids) == ["dup0", "dup0~3", "dup1", "dup1~3"]


def test_balanced_set_folds_keep_synthetics_out_of_test(small_manifest, quick_checkpoints, tmp_path):
    strat = builtin_strategy("bal_5000", seed=1, scale=0.004, major_fill="topup")
    plan = plan_balance(small_manifest, strat, quick_checkpoints)
    normal = small_manifest.subset(r.id for r in small_manifest.of_class(ClassLabel.NORMAL))
    out = execute(plan, default_engines(tmp_path, normal))
    from octfew.dataset import merge_manifests

    union = merge_manifests(out, small_manifest)
    plan = make_folds(union, 5, 0)
    index = union.by_id()
    for f in range(5):
        test = set(plan.test_ids(f))
        assert all(index[i].provenance is Provenance.real for i in test)
        assert all(root_ancestor(index[i], index) not in test for i in plan.train_ids(f))
