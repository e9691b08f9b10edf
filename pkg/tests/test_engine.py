import itertools
from fractions import Fraction

import numpy as np
import pytest

from segkit.architectures import ModelSpec, build_model
from segkit.data import SampleSet, SceneSpec, split_dataset, synth_scene, synth_scenes
from segkit.engine import (
    HISTORY_HEADER,
    TrainConfig,
    checkpoint_bytes,
    checkpoint_from_bytes,
    evaluate,
    infer_probabilities,
    load_checkpoint,
    model_from_checkpoint,
    predict_scene,
    save_checkpoint,
    train,
)
from segkit.errors import ConfigError, DimensionError, DivergenceError, FormatError
from segkit.experiments import overfit_ships
from segkit.objectives import argmax_labels


def ticking():
    c = itertools.count()
    return lambda: float(next(c))


SPEC = ModelSpec("modified_unet", 32, 32, 1, 2, Fraction(1, 16), seed=4)


@pytest.fixture(scope="module")
def data():
    return split_dataset(synth_scenes("ships_optical", 6, 64, 2), seed=1)


@pytest.fixture(scope="module")
def small():
    scenes = [s for s in synth_scenes("buildings", 6, 64, 3)]
    for s in scenes:
        s.image, s.mask = s.image[:32, :32], s.mask[:32, :32]
    return split_dataset(scenes, seed=0)


def cfg(**kw):
    base = dict(epochs=2, batch_size=2, seed=7, loss="binary_ce")
    base.update(kw)
    return TrainConfig(**base)


def test_history_length_and_callback(small):
    seen = []
    _, hist = train(build_model(SPEC), small, cfg(epochs=3), seen.append)
    assert len(hist) == 3 and [e.epoch for e in hist] == [1, 2, 3]
    assert seen == list(hist)
    lines = hist.to_csv().splitlines()
    assert lines[0] == HISTORY_HEADER and len(lines) == 4


def test_config_validation(small):
    with pytest.raises(ConfigError):
        train(build_model(SPEC), small, cfg(epochs=0))
    with pytest.raises(ConfigError):
        train(build_model(ModelSpec("modified_unet", 32, 32, 1, 3, Fraction(1, 16))), small, cfg())


def test_shape_mismatch(data):
    with pytest.raises(DimensionError):
        train(build_model(SPEC), data, cfg())


def test_divergence_reports_epoch_and_batch(small):
    m = build_model(SPEC)
    m.params["head.conv.bias"].data[:] = np.nan
    with pytest.raises(DivergenceError) as e:
        train(m, small, cfg())
    assert e.value.epoch == 1 and e.value.batch == 0


def test_determinism_bit_exact(small):
    a, ha = train(build_model(SPEC), small, cfg(epochs=2), clock=ticking())
    b, hb = train(build_model(SPEC), small, cfg(epochs=2), clock=ticking())
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert ha.to_csv() == hb.to_csv()


def test_resume_equivalence(small, tmp_path):
    full, _ = train(build_model(SPEC), small, cfg(epochs=5), clock=ticking())
    part, _ = train(build_model(SPEC), small, cfg(epochs=3, checkpoint_path=str(tmp_path / "k.segc")), clock=ticking())
    resumed, _ = train(build_model(SPEC), small, cfg(epochs=5), resume=load_checkpoint(tmp_path / "k.segc"), clock=ticking())
    assert part.epoch == 3 and resumed.epoch == 5
    assert checkpoint_bytes(resumed) == checkpoint_bytes(full)


def test_gradient_reaches_every_layer(small):
    m = build_model(SPEC)
    before = {k: p.data.copy() for k, p in m.params.items()}
    train(m, small, cfg(epochs=1, batch_size=len(small.train)))
    layers = {k.rsplit(".", 1)[0] for k in before}
    for layer in layers:
        names = [k for k in before if k.rsplit(".", 1)[0] == layer]
        assert any(not np.array_equal(before[k], m.params[k].data) for k in names), layer


def test_loss_decreases_over_first_epochs():
    r = overfit_ships(epochs=10, seed=0)
    assert r.history[-1].loss < r.history[0].loss


def test_evaluate_matches_history(small):
    m = build_model(SPEC)
    _, hist = train(m, small, cfg(epochs=2))
    counts, rep = evaluate(m, small.train, 2)
    assert np.allclose(rep.iou, hist[-1].train_iou, atol=1e-6)
    assert counts.total == len(small.train) * 32 * 32


def test_evaluate_empty_foreground():
    scene = synth_scene(SceneSpec("ships_optical", 64, count=(0, 0), seed=1))
    scene.image, scene.mask = scene.image[:32, :32], scene.mask[:32, :32]
    m = build_model(SPEC)
    m.params["head.conv.bias"].data[:] = [-50.0, 50.0]  # force background everywhere
    for name, st in m.bn_state.items():
        c = m.params[f"{name}.gamma"].shape[0]
        st.running_mean, st.running_var = np.zeros(c, np.float32), np.ones(c, np.float32)
    _, rep = evaluate(m, [scene], 2)
    assert rep.iou[1] == 1.0 and rep.absent[0]


def test_evaluate_shape_mismatch(data):
    with pytest.raises(DimensionError):
        evaluate(build_model(SPEC), data.train)


@pytest.fixture(scope="module")
def trained(small):
    m = build_model(SPEC)
    train(m, small, cfg(epochs=1))
    return m


def test_predict_single_tile(trained, small):
    img = small.train[0].image
    labels, probs = predict_scene(trained, img)
    x = img[None].astype(np.float32) / np.float32(255)
    assert np.array_equal(probs, infer_probabilities(trained, x)[0])
    assert labels.shape == (32, 32)


def test_predict_700_consistency(trained):
    img = synth_scene(SceneSpec("buildings", 700, seed=3)).image
    labels, probs = predict_scene(trained, img, 32, 0)
    assert labels.shape == (700, 700) and probs.shape == (700, 700, 2)
    assert np.array_equal(labels, argmax_labels(probs))
    again, _ = predict_scene(trained, img, 32, 0)
    assert np.array_equal(labels, again)


def test_predict_too_small(trained):
    with pytest.raises(ConfigError):
        predict_scene(trained, np.zeros((40, 20, 1), np.uint8), 32)


# ---------------------------------------------------------------------------
# checkpoint file


@pytest.fixture(scope="module")
def ckpt(small):
    c, _ = train(build_model(SPEC), small, cfg(epochs=1), clock=ticking())
    return c


def test_checkpoint_round_trip(ckpt, tmp_path):
    save_checkpoint(ckpt, tmp_path / "a.segc")
    back = load_checkpoint(tmp_path / "a.segc")
    save_checkpoint(back, tmp_path / "b.segc")
    assert (tmp_path / "a.segc").read_bytes() == (tmp_path / "b.segc").read_bytes()
    assert back.spec == ckpt.spec and back.epoch == 1 and back.adam.t == ckpt.adam.t
    m = model_from_checkpoint(back)
    assert all(np.array_equal(m.params[k].data, ckpt.params[k]) for k in ckpt.params)


def test_checkpoint_magic_and_version(ckpt):
    b = bytearray(checkpoint_bytes(ckpt))
    assert bytes(b[:4]) == b"SEGC" and b[4:6] == bytes([1, 0])
    b[4] = 9
    with pytest.raises(FormatError, match="version"):
        checkpoint_from_bytes(bytes(b))


def test_checkpoint_tamper_names_section(ckpt):
    b = bytearray(checkpoint_bytes(ckpt))
    b[len(b) // 2] ^= 0xFF
    with pytest.raises(FormatError) as e:
        checkpoint_from_bytes(bytes(b))
    assert e.value.section is not None


def test_checkpoint_truncated(ckpt):
    with pytest.raises(FormatError):
        checkpoint_from_bytes(checkpoint_bytes(ckpt)[:-10])
