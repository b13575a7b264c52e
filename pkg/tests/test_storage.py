import struct

import numpy as np
import pytest

from app.core.exceptions import FormatError
from app.engine.optim import AdamState, adam_step
from app.models.baseline import baseline_forward, init_baseline_params
from app.models.neuralizer import forward, init_params
from app.models.params import param_dict
from app.schemas.checkpoint import CheckpointMeta, HistoryEntry
from app.schemas.sampler import Holdout, PhantomConfig
from app.storage.checkpoint import Checkpoint, checkpoint_dumps, checkpoint_loads, load_checkpoint, save_checkpoint
from app.storage.ntf import ntf_dumps, ntf_load, ntf_loads, ntf_save
from app.storage.pool_cache import INDEX_FILE, cache_key, get_cache, load_or_generate_pool


@pytest.fixture
def neuralizer_checkpoint(tiny_model_config):
    params = init_params(tiny_model_config, seed=3)
    tensors = param_dict(params)
    grads = {name: np.full(t.shape, 0.1, dtype=np.float32) for name, t in tensors.items()}
    _, adam = adam_step(tensors, grads, AdamState(lr=1e-3))
    meta = CheckpointMeta(
        model_kind="neuralizer",
        model=tiny_model_config,
        step=7,
        best_val=0.25,
        history=[HistoryEntry(step=7, train_loss=0.5, val_loss=0.25)],
        holdout=[Holdout.parse("task:inpainting")],
        rng_state={"bit_generator": "PCG64", "state": {"state": 1, "inc": 3}, "has_uint32": 0, "uinteger": 0},
    )
    return Checkpoint(meta=meta, params=params, adam=adam)


def test_ntf_round_trip_keeps_dtype_and_shape(tmp_path):
    arr = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
    ntf_save(arr, tmp_path / "a.ntf")
    out = ntf_load(tmp_path / "a.ntf")
    assert out.dtype == np.float64
    np.testing.assert_array_equal(out, arr)


def test_ntf_header_layout():
    buf = ntf_dumps(np.zeros((2, 5), dtype=np.float32))
    assert buf[:4] == b"NTF1"
    assert struct.unpack_from("<BB2I", buf, 4) == (0, 2, 2, 5)
    assert len(buf) == 6 + 8 + 40


@pytest.mark.parametrize("cut", [3, 7, 12, 20])
def test_truncated_ntf_raises(cut):
    buf = ntf_dumps(np.ones((2, 3), dtype=np.float32))
    with pytest.raises(FormatError):
        ntf_loads(buf[:cut])


def test_ntf_rejects_bad_magic_and_dtype():
    buf = bytearray(ntf_dumps(np.ones(2, dtype=np.float32)))
    with pytest.raises(FormatError):
        ntf_loads(b"XXXX" + bytes(buf[4:]))
    buf[4] = 9
    with pytest.raises(FormatError):
        ntf_loads(bytes(buf))


def test_ntf_file_with_trailing_bytes_raises(tmp_path):
    path = tmp_path / "t.ntf"
    path.write_bytes(ntf_dumps(np.ones(2, dtype=np.float32)) + b"\x00")
    with pytest.raises(FormatError):
        ntf_load(path)


def test_checkpoint_round_trip_is_bit_identical(neuralizer_checkpoint, tmp_path, rng):
    path = save_checkpoint(neuralizer_checkpoint, tmp_path / "model.nlz")
    loaded = load_checkpoint(path)

    x = rng.uniform(0, 1, size=(2, 3, 16, 16)).astype(np.float32)
    ctx = rng.uniform(0, 1, size=(3, 2, 4, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(
        forward(x, ctx, neuralizer_checkpoint.params).numpy(),
        forward(x, ctx, loaded.params).numpy(),
    )
    assert loaded.meta.step == 7
    assert loaded.meta.holdout == neuralizer_checkpoint.meta.holdout
    assert loaded.meta.rng_state == neuralizer_checkpoint.meta.rng_state
    assert loaded.adam.step == 1 and loaded.adam.lr == pytest.approx(1e-3)
    for name, m in neuralizer_checkpoint.adam.m.items():
        np.testing.assert_array_equal(loaded.adam.m[name], m)
        np.testing.assert_array_equal(loaded.adam.v[name], neuralizer_checkpoint.adam.v[name])


def test_checkpoint_is_byte_stable(neuralizer_checkpoint):
    buf = checkpoint_dumps(neuralizer_checkpoint)
    assert buf[:4] == b"NLZ1"
    assert checkpoint_dumps(checkpoint_loads(buf)) == buf


def test_baseline_checkpoint_round_trip(tiny_baseline_config, rng):
    params = init_baseline_params(tiny_baseline_config, seed=1)
    ckpt = Checkpoint(
        meta=CheckpointMeta(model_kind="baseline", baseline=tiny_baseline_config, baseline_subjects=2),
        params=params,
        adam=AdamState(),
    )
    loaded = checkpoint_loads(checkpoint_dumps(ckpt))
    x = rng.uniform(0, 1, size=(1, 3, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(baseline_forward(x, params).numpy(), baseline_forward(x, loaded.params).numpy())
    assert loaded.meta.image_size == 16


@pytest.mark.parametrize("cut", [0, 5, 12, 100, -1])
def test_truncated_checkpoint_raises(neuralizer_checkpoint, cut):
    buf = checkpoint_dumps(neuralizer_checkpoint)
    with pytest.raises(FormatError):
        checkpoint_loads(buf[:cut])


def test_corrupt_checkpoint_raises(neuralizer_checkpoint, tmp_path):
    buf = bytearray(checkpoint_dumps(neuralizer_checkpoint))
    with pytest.raises(FormatError):
        checkpoint_loads(b"NTF1" + bytes(buf[4:]))
    wrong_version = bytes(buf[:4]) + struct.pack("<H", 2) + bytes(buf[6:])
    with pytest.raises(FormatError):
        checkpoint_loads(wrong_version)
    with pytest.raises(FormatError):
        checkpoint_loads(bytes(buf) + b"\x00\x00")
    buf[12] = ord("!")
    with pytest.raises(FormatError):
        checkpoint_loads(bytes(buf))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "missing.nlz")


def test_checkpoint_with_wrong_config_raises(neuralizer_checkpoint):
    meta = neuralizer_checkpoint.meta.model_copy(
        update={"model": neuralizer_checkpoint.meta.model.model_copy(update={"channels": 8})}
    )
    buf = checkpoint_dumps(Checkpoint(meta=meta, params=neuralizer_checkpoint.params, adam=AdamState()))
    with pytest.raises(FormatError):
        checkpoint_loads(buf)


def test_pool_cache_round_trip(tmp_path):
    config = PhantomConfig()
    generated = load_or_generate_pool(config, 16, 4, seed=2, cache_root=tmp_path)
    key = cache_key(config, 16, 4, 2, 0)
    assert (tmp_path / key / INDEX_FILE).is_file()
    cached = get_cache(tmp_path, key)
    for a, b in zip(generated, cached):
        assert (a.subject_id, a.dataset_id) == (b.subject_id, b.dataset_id)
        np.testing.assert_array_equal(a.seg_map, b.seg_map)
        np.testing.assert_array_equal(a.modalities, b.modalities)
        np.testing.assert_array_equal(a.brain_mask, b.brain_mask)


def test_pool_cache_key_depends_on_parameters():
    config = PhantomConfig()
    assert cache_key(config, 16, 4, 2, 0) != cache_key(config, 16, 4, 3, 0)
    assert cache_key(config, 16, 4, 2, 0) != cache_key(config, 32, 4, 2, 0)


def test_damaged_pool_cache_is_regenerated(tmp_path):
    config = PhantomConfig()
    key = cache_key(config, 16, 3, 0, 0)
    load_or_generate_pool(config, 16, 3, seed=0, cache_root=tmp_path)
    (tmp_path / key / "subject_0_mod.ntf").write_bytes(b"junk")
    assert get_cache(tmp_path, key) is None
    pool = load_or_generate_pool(config, 16, 3, seed=0, cache_root=tmp_path)
    assert len(pool) == 3
