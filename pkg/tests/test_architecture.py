import numpy as np
import pytest

from melnet.architecture import (
    ArchError,
    ArchSpec,
    LayerSpec,
    build,
    cat,
    conv,
    count_all_layers,
    count_conv_layers,
    detect,
    head_strides,
    load_weights,
    reference_spec,
    res,
    save_weights,
    spec_from_text,
    spec_to_text,
    tiny_spec,
    up,
    validate_spec,
)
from melnet.autograd import no_grad
from melnet.weights import WeightsFormatError, read_tensors, write_tensors


class TestSpecCounts:
    def test_reference_has_70_convs(self):
        assert count_conv_layers(reference_spec(9, 3)) == 70

    @pytest.mark.parametrize("nc,b", [(9, 3), (9, 2), (1, 1), (20, 5)])
    def test_conv_count_independent_of_widths(self, nc, b):
        assert count_conv_layers(reference_spec(nc, b)) == 70

    def test_reference_layer_total_including_up_and_cat(self):
        assert count_all_layers(reference_spec(9, 3)) == 72

    def test_head_channels(self):
        assert reference_spec(9, 3).head_channels == 3 * (4 + 1 + 9) == 42
        assert reference_spec(9, 2).head_channels == 2 * (4 + 1 + 9) == 28

    def test_single_conv_spec_counts_one(self):
        spec = ArchSpec(layers=(conv(8, 3, 1),), input_size=64)
        assert count_conv_layers(spec) == 1

    def test_tiny_is_smaller(self):
        assert count_conv_layers(tiny_spec(9)) < 70

    def test_tiny_parameter_budget(self):
        assert build(tiny_spec(9), seed=0).num_parameters() < 100_000

    def test_head_strides(self):
        assert head_strides(reference_spec(9, 3)) == {1: 32, 2: 16}


class TestValidation:
    def test_bad_concat_source_rejected(self):
        layers = list(reference_spec().layers)
        idx = next(i for i, l in enumerate(layers) if l.kind == "cat")
        layers[idx] = cat(idx + 3)
        with pytest.raises(ArchError):
            validate_spec(ArchSpec(layers=tuple(layers)))

    def test_wrong_detect_count_rejected(self):
        layers = tuple(l for l in reference_spec().layers if l.scale != 2)
        with pytest.raises(ArchError):
            validate_spec(ArchSpec(layers=layers))

    def test_input_size_multiple_of_32(self):
        with pytest.raises(ArchError):
            validate_spec(ArchSpec(layers=reference_spec().layers, input_size=100))

    def test_kernel_size_restricted(self):
        with pytest.raises(ArchError):
            validate_spec(ArchSpec(layers=(conv(8, 5, 1),) + reference_spec().layers[1:]))


class TestBuildForward:
    def test_build_is_deterministic(self):
        a = build(tiny_spec(9), seed=7)
        b = build(tiny_spec(9), seed=7)
        for (na, ta), (nb, tb) in zip(a.state_arrays().items(), b.state_arrays().items()):
            assert na == nb
            np.testing.assert_array_equal(ta, tb)

    def test_seeds_differ(self):
        a = build(tiny_spec(9), seed=0)
        b = build(tiny_spec(9), seed=1)
        assert any(
            not np.array_equal(x, y)
            for x, y in zip(a.state_arrays().values(), b.state_arrays().values())
        )

    def test_tiny_head_grids(self, rng):
        net = build(tiny_spec(9), seed=0)
        h1, h2 = net.forward(rng.random((1, 3, 64, 64), dtype=np.float32))
        assert h1.shape == (1, 42, 2, 2)
        assert h2.shape == (1, 42, 4, 4)

    def test_head_grid_ratio_for_other_input_sizes(self, rng):
        net = build(tiny_spec(9), seed=0)
        for s in (64, 96, 128):
            h1, h2 = net.forward(rng.random((1, 3, s, s), dtype=np.float32))
            assert h1.shape[2:] == (s // 32, s // 32)
            assert h2.shape[2:] == (s // 16, s // 16)

    def test_parameter_shapes_match_spec_arithmetic(self):
        spec = tiny_spec(9)
        net = build(spec, seed=0)
        state = net.state_arrays()
        # first conv: 3 -> scaled(32) channels
        first = state["l00.weight"]
        assert first.shape == (spec.scaled(32), 3, 3, 3)
        # detect convs are 1x1 onto B*(5+C) channels with bias
        assert state["l20.weight"].shape[0] == spec.head_channels
        assert state["l20.weight"].shape[2:] == (1, 1)
        assert state["l20.bias"].shape == (spec.head_channels,)
        # second head consumes the concatenated route + tap channels
        assert state["l24.weight"].shape[1] == spec.scaled(256) + spec.scaled(512)

    def test_indivisible_input_rejected(self, rng):
        net = build(tiny_spec(9), seed=0)
        with pytest.raises(ValueError):
            net.forward(rng.random((1, 3, 60, 60), dtype=np.float32))

    def test_inference_is_pure(self, rng):
        net = build(tiny_spec(9), seed=0)
        x = rng.random((1, 3, 64, 64), dtype=np.float32)
        with no_grad():
            a1, a2 = net.forward(x, training=False)
            b1, b2 = net.forward(x, training=False)
        np.testing.assert_array_equal(a1.data, b1.data)
        np.testing.assert_array_equal(a2.data, b2.data)

    def test_training_mode_updates_running_stats(self, rng):
        net = build(tiny_spec(9), seed=0)
        before = {k: v.copy() for k, v in net.state_arrays().items() if "running" in k}
        net.forward(rng.random((2, 3, 64, 64), dtype=np.float32), training=True)
        after = net.state_arrays()
        assert any(not np.array_equal(before[k], after[k]) for k in before)

    def test_connectivity_every_parameter_reaches_output(self, rng):
        # perturbing any single parameter tensor must change some head value
        net = build(tiny_spec(2), seed=3)
        x = rng.random((1, 3, 64, 64), dtype=np.float32)
        with no_grad():
            h1, h2 = net.forward(x, training=False)
        base = np.concatenate([h1.data.ravel(), h2.data.ravel()])
        for name, p in net.parameters():
            old = p.data.copy()
            p.data += 0.5
            with no_grad():
                g1, g2 = net.forward(x, training=False)
            out = np.concatenate([g1.data.ravel(), g2.data.ravel()])
            p.data[...] = old
            assert not np.allclose(out, base), f"{name} does not influence the output"


class TestTextFormat:
    def test_round_trip(self):
        spec = reference_spec(9, 3)
        assert spec_from_text(spec_to_text(spec)) == spec

    def test_layer_lines(self):
        text = spec_to_text(reference_spec())
        lines = [l for l in text.splitlines() if not l.startswith("#")]
        assert lines[0] == "conv 32 3 1"
        assert "res 8" in lines
        assert "up" in lines
        assert "cat 8" in lines
        assert lines[-1] == "detect 2"

    def test_malformed_line_rejected(self):
        with pytest.raises(ArchError):
            spec_from_text("conv 32 three 1\ndetect 1\ndetect 2\n")


class TestWeightsFile:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        tensors = {
            "a": rng.normal(size=(3, 4)).astype(np.float32),
            "b.c": rng.normal(size=7).astype(np.float32),
            "scalar": np.array(2.5, dtype=np.float32),
        }
        path = tmp_path / "t.melw"
        write_tensors(path, tensors)
        out = read_tensors(path)
        assert set(out) == set(tensors)
        for k in tensors:
            np.testing.assert_array_equal(out[k], tensors[k])
        write_tensors(tmp_path / "t2.melw", out)
        assert (tmp_path / "t.melw").read_bytes() == (tmp_path / "t2.melw").read_bytes()

    def test_magic_and_truncation(self, tmp_path, rng):
        path = tmp_path / "t.melw"
        write_tensors(path, {"a": rng.normal(size=8).astype(np.float32)})
        raw = path.read_bytes()
        (tmp_path / "bad.melw").write_bytes(b"XXXXX" + raw[5:])
        with pytest.raises(WeightsFormatError):
            read_tensors(tmp_path / "bad.melw")
        (tmp_path / "trunc.melw").write_bytes(raw[:-3])
        with pytest.raises(WeightsFormatError):
            read_tensors(tmp_path / "trunc.melw")

    def test_network_round_trip(self, tmp_path):
        net = build(tiny_spec(9), seed=5)
        path = tmp_path / "net.melw"
        save_weights(net, path)
        restored = load_weights(path, tiny_spec(9), seed=0)
        for (ka, va), (kb, vb) in zip(
            sorted(net.state_arrays().items()), sorted(restored.state_arrays().items())
        ):
            assert ka == kb
            np.testing.assert_array_equal(va, vb)

    def test_truncated_file_leaves_no_partial_network(self, tmp_path):
        net = build(tiny_spec(9), seed=5)
        path = tmp_path / "net.melw"
        save_weights(net, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(WeightsFormatError):
            load_weights(path, tiny_spec(9))

    def test_wrong_class_count_rejected(self, tmp_path):
        net = build(tiny_spec(9), seed=5)
        path = tmp_path / "net.melw"
        save_weights(net, path)
        with pytest.raises(ValueError):
            load_weights(path, tiny_spec(5))
