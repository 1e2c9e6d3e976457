import pytest

from vesselseg.errors import ArchSyntaxError, ShapeInferenceError
from vesselseg.net.arch import (
    Conv3D,
    Dense,
    Dropout,
    Flatten,
    MaxPool2x2,
    OutputDense,
    count_parameters,
    describe,
    infer_shapes,
    parse_arch,
    receptive_margins,
)

BASELINE = "3*C 3x3x3 - P - 2*C 3x3 - P - NN"


def test_parse_baseline_layer_sequence():
    spec = parse_arch(BASELINE)
    kinds = [type(l).__name__ for l in spec.layers]
    assert kinds == [
        "Conv3D", "Conv3D", "Conv3D", "MaxPool2x2",
        "Conv3D", "Conv3D", "MaxPool2x2",
        "Flatten", "Dense", "Dropout", "OutputDense",
    ]
    convs = [l for l in spec.layers if isinstance(l, Conv3D)]
    assert [c.kernel for c in convs] == [(3, 3, 3)] * 3 + [(3, 3, 1)] * 2
    # 32 feature maps before the first pool, 64 after
    assert [c.out_channels for c in convs] == [32, 32, 32, 64, 64]
    assert spec.layers[-3] == Dense(1024)
    assert spec.layers[-2] == Dropout(0.5)
    assert isinstance(spec.layers[-1], OutputDense)
    assert spec.out_units == 5 * 5 * 1 * 2


def test_parse_multipliers_and_2d_kernels():
    spec = parse_arch("2*C 5x5 - P - NN", fov=(17, 17, 1), roi=(1, 1, 1))
    convs = [l for l in spec.layers if isinstance(l, Conv3D)]
    assert [c.kernel for c in convs] == [(5, 5, 1), (5, 5, 1)]
    # a repeated fully connected block stacks dense+dropout pairs
    spec2 = parse_arch("C 3x3 - P - 2*NN", fov=(9, 9, 1), roi=(1, 1, 1), hidden_width=32)
    tail = [type(l).__name__ for l in spec2.layers[-6:]]
    assert tail == ["Flatten", "Dense", "Dropout", "Dense", "Dropout", "OutputDense"]


def test_parse_rejects_malformed_blocks():
    for bad in (
        "",
        "Q 3x3",
        "C",  # kernel required
        "C 3x",
        "C 3x3x3x3",
        "P 2x2",  # pool takes no kernel
        "NN 3x3",
        "0*C 3x3",
        "NN - C 3x3",  # convolution after the dense stage
        "NN - P",
        "C 0x3x3",
    ):
        with pytest.raises(ArchSyntaxError):
            parse_arch(bad, fov=(17, 17, 3), roi=(1, 1, 1))


def test_parse_validates_fov_roi_and_hyperparams():
    with pytest.raises(ValueError):
        parse_arch(BASELINE, fov=(33, 33))
    with pytest.raises(ValueError):
        parse_arch(BASELINE, roi=(0, 5, 1))
    with pytest.raises(ValueError):
        parse_arch(BASELINE, hidden_width=0)
    with pytest.raises(ValueError):
        parse_arch(BASELINE, dropout_rate=1.0)


def test_infer_shapes_baseline_trace():
    spec = parse_arch(BASELINE)
    shapes = infer_shapes(spec)
    assert shapes == [
        (33, 33, 7, 1),
        (31, 31, 5, 32),
        (29, 29, 3, 32),
        (27, 27, 1, 32),
        (14, 14, 1, 32),
        (12, 12, 1, 64),
        (10, 10, 1, 64),
        (5, 5, 1, 64),
        (1600,),
        (1024,),
        (1024,),
        (50,),
    ]
    assert "5x5x1x64" in describe(spec)


def test_pool_uses_ceil_semantics():
    spec = parse_arch("C 3x3 - P - NN", fov=(10, 9, 1), roi=(2, 1, 1), hidden_width=8)
    shapes = infer_shapes(spec)
    # 8x7 after the conv; ceil pooling gives 4x4
    assert shapes[1][:2] == (8, 7)
    assert shapes[2][:2] == (4, 4)


def test_shape_collapse_raises():
    with pytest.raises(ShapeInferenceError):
        parse_arch(BASELINE, fov=(33, 33, 5))  # depth 5 shrinks 3, 1, then < 1
    with pytest.raises(ShapeInferenceError):
        parse_arch("C 9x9 - P - NN", fov=(7, 7, 1), roi=(1, 1, 1))


def test_count_parameters_matches_hand_sum():
    spec = parse_arch(BASELINE)
    # conv: k^3*cin*cout + cout; dense: in*out + out, summed over the stack
    assert count_parameters(spec) == 1_802_354
    tiny = parse_arch("C 3x3x3 - P - NN", fov=(7, 7, 3), roi=(1, 1, 1), hidden_width=10)
    # conv 3x3x3x1x32+32 = 896; flatten 3*3*1*32 = 288; dense 288*10+10 = 2890
    # output 10*2+2 = 22
    assert count_parameters(tiny) == 896 + 2890 + 22


def test_receptive_margins():
    spec = parse_arch(BASELINE)
    assert receptive_margins(spec) == (14, 14, 3)
    with pytest.raises(ValueError):
        receptive_margins(parse_arch(BASELINE, fov=(33, 33, 7), roi=(4, 5, 1)))


def test_descriptor_roundtrip_text_preserved():
    spec = parse_arch("  " + BASELINE + "  ")
    assert spec.descriptor == BASELINE
    again = parse_arch(spec.descriptor, spec.fov, spec.roi, spec.hidden_width,
                       spec.dropout_rate)
    assert again.layers == spec.layers
