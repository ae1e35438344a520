import numpy as np
import pytest
from PIL import Image

from uvc.harness import (DataError, DenseParams, evaluate, load_image_folder, minibatches, synth_dataset,
                         train_dense)
from uvc.vit import ViTConfig, init_weights


def test_synth_dataset_sizes_and_determinism():
    a = synth_dataset()
    b = synth_dataset()
    assert len(a) == 2000 and len(a.train_idx) == 1600 and len(a.val_idx) == 400
    assert a.images.tobytes() == b.images.tobytes() and np.array_equal(a.train_idx, b.train_idx)
    assert a.images.shape == (2000, 3, 32, 32) and a.images.min() >= 0 and a.images.max() <= 1
    assert np.bincount(a.labels[a.val_idx]).tolist() == [40] * 10
    assert not np.array_equal(synth_dataset(seed=1).images, a.images)
    with pytest.raises(DataError):
        synth_dataset(per_class=0)


def _write(path, color, size=(5, 7)):
    Image.new("RGB", size, color).save(path)


def test_load_image_folder(tmp_path):
    for name, color in (("cats", (255, 0, 0)), ("dogs", (0, 128, 255))):
        (tmp_path / name).mkdir()
        _write(tmp_path / name / "a.png", color)
    (tmp_path / "dogs" / "notes.txt").write_text("not an image")
    data = load_image_folder(tmp_path, image_size=8)
    assert len(data) == 2 and data.num_classes == 2 and data.labels.tolist() == [0, 1]
    # a solid image stays solid after resizing
    np.testing.assert_allclose(data.images[1, :, :, :].reshape(3, -1).std(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(data.images[1, :, 0, 0], np.array([0, 128, 255]) / 255.0)


def test_load_image_folder_errors(tmp_path):
    with pytest.raises(DataError):
        load_image_folder(tmp_path, 8)
    (tmp_path / "empty").mkdir()
    (tmp_path / "empty" / "junk.bin").write_bytes(b"\x00\x01")
    with pytest.raises(DataError):
        load_image_folder(tmp_path, 8)


def test_minibatches_cover_everything():
    batches = minibatches(10, 3, np.random.default_rng(0))
    assert [len(b) for b in batches] == [3, 3, 3, 1]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))


def test_evaluate_constant_logits_is_majority_frequency():
    cfg = ViTConfig(image_size=8, patch_size=4, embed_dim=8, num_blocks=1, num_heads=2, num_classes=3)
    w = init_weights(cfg, np.random.default_rng(0))
    w.head_w[:] = 0.0
    w.head_b[:] = [0.0, 5.0, 1.0]
    labels = np.array([1, 1, 0, 2, 1])
    images = np.random.default_rng(1).random((5, 3, 8, 8))
    m = evaluate(w, images, labels)
    assert m["top1"] == pytest.approx(0.6)
    assert evaluate(w, images, labels) == m


def test_dense_training_can_memorise_a_tiny_set():
    cfg = ViTConfig(image_size=8, patch_size=4, embed_dim=16, num_blocks=1, num_heads=2, num_classes=3)
    data = synth_dataset(num_classes=3, per_class=6, image_size=8, seed=2)
    w, hist = train_dense(cfg, data, DenseParams(epochs=40, batch_size=8, lr=3e-3, weight_decay=0.0,
                                                 warmup_epochs=1), dtype=np.float64)
    assert evaluate(w, *data.split("train"))["top1"] == 1.0 or hist[-1]["train_loss"] < 0.1
    assert len(hist) == 40
