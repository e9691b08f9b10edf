from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from segkit.architectures import (
    ModelSpec,
    build_model,
    build_modified_unet,
    build_vgg_unet,
    conv_count,
    describe,
    model_forward,
    shape_plan,
)
from segkit.errors import ConfigError, DimensionError
from segkit.ops import INFER, TRAIN
from segkit.rng import RngStream

GOLDEN = Path(__file__).parent / "golden"


def unet(size=512, **kw):
    return ModelSpec("modified_unet", size, size, kw.pop("channels", 1), kw.pop("classes", 2), **kw)


def vgg(size=512, **kw):
    return ModelSpec("vgg_unet", size, size, kw.pop("channels", 3), kw.pop("classes", 5), **kw)


def test_modified_unet_first_stage_and_pool():
    plan = shape_plan(unet())
    transitions = [(r.in_shape, r.out_shape) for r in plan]
    assert ((512, 512, 1), (512, 512, 64)) in transitions
    assert ((512, 512, 64), (256, 256, 64)) in transitions
    assert plan[0].kind == "conv3x3" and plan[0].out_shape == (512, 512, 64)


def test_modified_unet_ten_convs():
    plan = shape_plan(unet())
    assert conv_count(plan) == 10
    assert conv_count(plan, ("encoder", "bottleneck")) == 5
    assert conv_count(plan, ("decoder",)) == 4
    assert conv_count(plan, ("head",)) == 1


def test_modified_unet_bottleneck():
    plan = shape_plan(unet())
    bott = [r for r in plan if r.section == "bottleneck" and r.kind == "conv3x3"]
    assert bott[0].out_shape == (32, 32, 1024)


def test_modified_unet_head_is_1x1():
    plan = shape_plan(unet())
    assert [r.kind for r in plan][-2:] == ["conv1x1", "softmax"]


def test_vgg_counts():
    plan = shape_plan(vgg())
    assert conv_count(plan, ("encoder",)) == 13
    assert conv_count(plan, ("decoder",)) == 13
    enc_blocks = {r.block for r in plan if r.section == "encoder"}
    dec_blocks = {r.block for r in plan if r.section == "decoder"}
    assert len(enc_blocks) == 5 and len(dec_blocks) == 5
    assert sum(r.kind == "maxpool2x2" for r in plan) == 5


def test_vgg_bottleneck_16():
    plan = shape_plan(vgg())
    assert [r for r in plan if r.section == "bottleneck"][0].in_shape[:2] == (16, 16)
    assert plan[-2].kind == "dense1x1"


@pytest.mark.parametrize("spec,name", [(unet(), "describe_modified_unet_512x512x1.txt"), (vgg(), "describe_vgg_unet_512x512x3.txt")])
def test_describe_golden(spec, name):
    assert describe(spec) + "\n" == (GOLDEN / name).read_text()


def test_describe_rows():
    text = describe(unet())
    assert "[512,512,1]" in text and "[512,512,64]" in text and "[256,256,64]" in text
    assert text.splitlines()[-1].split()[0] == "total"


def test_width_multiplier_keeps_structure():
    full, small = shape_plan(unet()), shape_plan(unet(width_multiplier=Fraction(1, 16)))
    assert [r.kind for r in full] == [r.kind for r in small]
    assert conv_count(small) == 10
    assert small[0].out_shape == (512, 512, 4)


def test_invalid_specs():
    with pytest.raises(ConfigError):
        unet(size=40)
    with pytest.raises(ConfigError):
        vgg(size=48)
    with pytest.raises(ConfigError):
        unet(classes=1)
    with pytest.raises(ConfigError):
        unet(width_multiplier=0)
    with pytest.raises(ConfigError):
        build_vgg_unet(unet())
    with pytest.raises(ConfigError):
        build_modified_unet(vgg())


def test_divisibility_differs_by_kind():
    unet(size=384)
    unet(size=400)
    with pytest.raises(ConfigError):
        vgg(size=400)


@given(st.integers(1, 8), st.integers(1, 8), st.sampled_from(["modified_unet", "vgg_unet"]))
def test_skip_pairing(hm, wm, kind):
    div = 16 if kind == "modified_unet" else 32
    spec = ModelSpec(kind, hm * div, wm * div, 1, 2, Fraction(1, 16))
    plan = shape_plan(spec)
    for r in plan:
        if r.kind == "concat":
            assert r.in_shape[:2] == r.skip_shape[:2]
    for a, b in zip(plan, plan[1:]):
        assert a.out_shape == b.in_shape


def test_parameters_deterministic():
    spec = unet(32, width_multiplier=Fraction(1, 16), seed=9)
    a, b = build_model(spec), build_model(spec)
    assert list(a.params) == list(b.params)
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)
    assert a.parameter_count() == sum(r.params for r in a.plan)


def test_parameter_names_unique_and_stable():
    m = build_model(vgg(32, width_multiplier=Fraction(1, 16)))
    names = list(m.params)
    assert len(names) == len(set(names))
    assert names[0] == "enc1.1.conv.kernel" and names[-1] == "head.dense.bias"


@pytest.mark.parametrize("spec", [unet(32, width_multiplier=Fraction(1, 16)), vgg(64, width_multiplier=Fraction(1, 16))])
def test_forward_contract(spec):
    m = build_model(spec)
    x = RngStream(1).uniform(0, 1, (2, spec.input_height, spec.input_width, spec.input_channels)).astype(np.float32)
    y = model_forward(m, x, TRAIN, RngStream(2))
    assert y.shape == (2, spec.input_height, spec.input_width, spec.num_classes)
    np.testing.assert_allclose(y.data.sum(-1), 1, atol=1e-6)
    a, b = model_forward(m, x, INFER), model_forward(m, x, INFER)
    assert a.data.tobytes() == b.data.tobytes()


def test_forward_shape_mismatch():
    m = build_model(unet(32, width_multiplier=Fraction(1, 16)))
    with pytest.raises(DimensionError):
        model_forward(m, np.zeros((1, 16, 32, 1), np.float32), INFER)
