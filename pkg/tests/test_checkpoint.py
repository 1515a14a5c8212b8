import numpy as np
import pytest

from amffuse.checkpoint import CheckpointError, load_arrays, save_arrays
from amffuse.training import run_pretrain

from conftest import tiny_config


def test_round_trip_exact(tmp_path, rng):
    arrays = {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=4), "step": np.array(7.0),
              "empty": np.zeros((0, 2))}
    manifest = save_arrays(tmp_path / "ck", arrays, {"epoch": 3, "note": "x"})
    assert manifest.name == "ck.manifest" and (tmp_path / "ck.bin").exists()
    back, meta = load_arrays(tmp_path / "ck")
    assert meta == {"epoch": 3, "note": "x"}
    assert list(back) == list(arrays)
    for k, v in arrays.items():
        assert back[k].shape == v.shape
        assert back[k].tobytes() == np.asarray(v, dtype=np.float64).tobytes()


def test_blob_is_little_endian_float64(tmp_path):
    save_arrays(tmp_path / "ck", {"a": np.array([1.0, -2.5])})
    assert (tmp_path / "ck.bin").read_bytes() == np.array([1.0, -2.5], dtype="<f8").tobytes()


def test_either_file_name_loads(tmp_path):
    save_arrays(tmp_path / "ck", {"a": np.ones(2)})
    assert np.array_equal(load_arrays(tmp_path / "ck.bin")[0]["a"], np.ones(2))
    assert np.array_equal(load_arrays(tmp_path / "ck.manifest")[0]["a"], np.ones(2))


def test_bad_magic_and_version(tmp_path):
    m = save_arrays(tmp_path / "ck", {"a": np.ones(2)})
    text = m.read_text()
    m.write_text(text.replace("amf-ckpt 1", "amf-ckpt 9"))
    with pytest.raises(CheckpointError, match="version"):
        load_arrays(m)
    m.write_text(text.replace("amf-ckpt", "something"))
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_arrays(m)


def test_truncated_blob(tmp_path):
    save_arrays(tmp_path / "ck", {"a": np.ones(8)})
    (tmp_path / "ck.bin").write_bytes(b"\0" * 16)
    with pytest.raises(CheckpointError, match="truncated"):
        load_arrays(tmp_path / "ck")


def test_invalid_name(tmp_path):
    with pytest.raises(CheckpointError):
        save_arrays(tmp_path / "ck", {"a\tb": np.ones(1)})


def test_resume_reproduces_uninterrupted_run(tiny_data, tmp_path):
    cfg = tiny_config(stage="pretrain", pretrain_epochs=3)
    full = run_pretrain(cfg, tiny_data, seed=5)
    first = run_pretrain(cfg, tiny_data, seed=5, out_dir=tmp_path / "a", epochs_to_run=1)
    rest = run_pretrain(cfg, tiny_data, seed=5, resume=first.checkpoint)
    assert len(first.step_losses) + len(rest.step_losses) == len(full.step_losses)
    resumed = first.step_losses + rest.step_losses
    assert np.max(np.abs(np.array(resumed) - np.array(full.step_losses))) < 1e-10
    for k, v in full.model.image_encoder.state_dict().items():
        assert np.allclose(rest.model.image_encoder.state_dict()[k], v, rtol=0, atol=1e-10)
