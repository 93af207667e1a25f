import numpy as np
import pytest

from peftcl.data import (PRETEXT_CLASS_OFFSET, StreamError, StreamSpec, TaskDescriptor, cil_spec, dil_spec,
                         load_task, make_pretext, make_stream, read_dataset, write_dataset, write_task)

SMALL = dict(image_height=8, image_width=8, train_per_class=4, test_per_class=3)


def test_cil_splits_classes_evenly():
    tasks = make_stream(cil_spec(10, 5, **SMALL), 0)
    assert [t.classes for t in tasks] == [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)]
    for t in tasks:
        assert set(t.train_y.tolist()) == set(t.classes)
        assert t.n_train == 8 and t.n_test == 6
        assert t.train_x.shape == (8, 8, 8, 3)
    with pytest.raises(StreamError):
        cil_spec(10, 3)


def test_dil_shares_label_set_and_differs_by_domain():
    tasks = make_stream(dil_spec(3, 4, **SMALL), 0)
    assert all(t.classes == (0, 1, 2) for t in tasks)
    assert [t.domain for t in tasks] == [0, 1, 2, 3]
    assert not np.array_equal(tasks[0].train_x, tasks[1].train_x)


@pytest.mark.parametrize("scenario,classes", [("CIL", [(0, 1), (1, 2)]), ("DIL", [(0, 1), (0, 2)]),
                                              ("CIL", [(0,), ()])])
def test_invalid_streams_rejected(scenario, classes):
    spec = StreamSpec(scenario, tuple(TaskDescriptor(c) for c in classes))
    with pytest.raises(StreamError):
        make_stream(spec, 0)


def test_unknown_scenario_and_empty_stream():
    with pytest.raises(StreamError):
        StreamSpec("TIL", (TaskDescriptor((0,)),)).validate()
    with pytest.raises(StreamError):
        StreamSpec("CIL", ()).validate()


def test_same_seed_same_pixels():
    a, b = make_stream(cil_spec(4, 2, **SMALL), 5), make_stream(cil_spec(4, 2, **SMALL), 5)
    c = make_stream(cil_spec(4, 2, **SMALL), 6)
    for x, y, z in zip(a, b, c):
        assert x.train_x.tobytes() == y.train_x.tobytes()
        assert np.array_equal(x.test_y, y.test_y)
        assert x.train_x.tobytes() != z.train_x.tobytes()


def test_pretext_classes_are_disjoint_and_reindexed():
    spec = cil_spec(4, 2, pretext_classes=3, pretext_train_per_class=4, **SMALL)
    pre = make_pretext(spec, 0)
    assert sorted(set(pre.train_y.tolist())) == [0, 1, 2]
    assert PRETEXT_CLASS_OFFSET > spec.num_classes
    stream = make_stream(spec, 0)
    # class 0 of the stream and class 0 of the pretext task use different patterns
    s0 = stream[0].train_x[stream[0].train_y == 0].mean(0)
    p0 = pre.train_x[pre.train_y == 0].mean(0)
    assert not np.allclose(s0, p0, atol=0.1)


def test_dataset_file_round_trip(tmp_path):
    task = make_stream(dil_spec(2, 2, **SMALL), 1)[1]
    write_task(tmp_path / "t", task)
    back = load_task(tmp_path / "t", 1)
    assert back.train_x.tobytes() == task.train_x.tobytes()
    assert np.array_equal(back.test_y, task.test_y)
    assert back.domain == 1 and back.classes == task.classes
    manifest = (tmp_path / "t" / "train" / "manifest").read_text().splitlines()
    assert "dtype: f32le" in manifest and "count: 8" in manifest
    raw = (tmp_path / "t" / "train" / "images.f32").read_bytes()
    assert len(raw) == 8 * 8 * 8 * 3 * 4
    assert np.frombuffer(raw, "<f4")[0] == np.float32(task.train_x[0, 0, 0, 0])


def test_dataset_file_errors(tmp_path):
    with pytest.raises(StreamError):
        write_dataset(tmp_path / "a", np.zeros((2, 2, 2)), [0, 1])
    with pytest.raises(StreamError):
        write_dataset(tmp_path / "a", np.zeros((2, 2, 2, 1)), [0])
    write_dataset(tmp_path / "b", np.zeros((2, 2, 2, 1)), [0, 1])
    (tmp_path / "b" / "images.f32").write_bytes(b"\0" * 12)
    with pytest.raises(StreamError):
        read_dataset(tmp_path / "b")


def test_stream_from_paths(tmp_path):
    tasks = make_stream(cil_spec(4, 2, **SMALL), 0)
    for t in tasks:
        write_task(tmp_path / str(t.task_id), t)
    spec = StreamSpec("CIL", tuple(TaskDescriptor(path=str(tmp_path / str(i))) for i in range(2)))
    loaded = make_stream(spec, 0)
    assert [t.classes for t in loaded] == [(0, 1), (2, 3)]
    clash = StreamSpec("CIL", (TaskDescriptor(path=str(tmp_path / "0")),) * 2)
    with pytest.raises(StreamError):
        make_stream(clash, 0)
