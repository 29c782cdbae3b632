import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from damlab.data import CORNERS, TaskSpec, TriggerSpec, apply_trigger, generate, poison
from damlab.tensor import Rng


def test_zero_noise_equals_prototypes():
    task = TaskSpec("t", noise_sigma=0.0, n_train=12)
    ds = generate(task, 0, "train")
    np.testing.assert_array_equal(ds.inputs, task.prototypes()[ds.labels])


def test_generation_deterministic_and_bounded():
    task = TaskSpec("t", prototype_seed=4)
    a, b = generate(task, 1, "test"), generate(task, 1, "test")
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.inputs.min() >= 0 and a.inputs.max() <= 1
    assert not np.array_equal(a.inputs, generate(task, 2, "test").inputs)
    assert np.bincount(a.labels).tolist() == [100] * 4


def test_class_separation_interpolates():
    protos_1 = TaskSpec("t", prototype_seed=5).prototypes()
    protos_0 = TaskSpec("t", prototype_seed=5, class_separation=0.0).prototypes()
    assert np.ptp(protos_0, axis=0).max() == 0  # every class shares the base image
    assert protos_1.min() > 0 and protos_1.max() < 1


def test_trigger_on_zero_image():
    x = apply_trigger(np.zeros(196), TriggerSpec())
    assert int((x == 1.0).sum()) == 9
    assert x.reshape(14, 14)[11:, 11:].min() == 1.0


@settings(max_examples=40)
@given(
    st.integers(1, 5),
    st.sampled_from(CORNERS),
    st.floats(0, 1),
    st.integers(0, 2**31),
)
def test_trigger_idempotent_and_local(p, corner, value, seed):
    trig = TriggerSpec(p, corner, value)
    x = Rng(seed).uniform01_open((3, 196))
    once = apply_trigger(x, trig)
    np.testing.assert_array_equal(apply_trigger(once, trig), once)
    keep = np.ones(196, bool)
    keep[trig.pixel_indices(14)] = False
    np.testing.assert_array_equal(once[:, keep], x[:, keep])


def test_trigger_bad_position():
    with pytest.raises(ValueError):
        TriggerSpec(position="middle")
    with pytest.raises(ValueError):
        TriggerSpec(patch_size=20).pixel_indices(14)


def test_poison_counts():
    task = TaskSpec("t", n_train=500)
    clean = generate(task, 0, "train")
    trig = TriggerSpec(target_class=2)
    same = poison(clean, trig, 0.0, Rng(0))
    np.testing.assert_array_equal(same.inputs, clean.inputs)
    np.testing.assert_array_equal(same.labels, clean.labels)

    bd = poison(clean, trig, 0.1, Rng(0))
    changed = np.flatnonzero(np.any(bd.inputs != clean.inputs, axis=1) | (bd.labels != clean.labels))
    stamped = np.all(bd.inputs[:, trig.pixel_indices(14)] == 1.0, axis=1)
    assert bd.provenance["poison"]["count"] == 50
    assert stamped.sum() >= 50 and set(changed) <= set(np.flatnonzero(stamped))
    rows = np.flatnonzero(stamped & (bd.labels == 2))
    assert len(rows) >= 50

    full = poison(clean, trig, 1.0, Rng(0))
    assert np.all(full.labels == 2)
    with pytest.raises(ValueError):
        poison(clean, trig, 1.5, Rng(0))
