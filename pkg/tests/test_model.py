import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybridecg import model as M
from hybridecg.checkpoint import decode_checkpoint, load_checkpoint, save_checkpoint
from hybridecg.errors import DimensionError, FormatError, ValidationError
from hybridecg.gradcheck import finite_difference_check, model_gradient_errors, tiny_spec


def layer_counts(model):
    return {name: n for name, _, n in M.count_parameters(model)[1]}


def test_presets_exact():
    p = M.presets()
    assert len(p) == 6
    stacks = {k: [(r.kind, r.hidden) for r in v.recurrent_stack] for k, v in p.items()}
    assert stacks == {
        "CNN": [], "LSTM": [("lstm", 128)], "BiLSTM": [("bilstm", 128)], "GRU": [("gru", 128)],
        "LSTM+BiLSTM": [("lstm", 128), ("bilstm", 128)],
        "GRU+BiLSTM+LSTM": [("gru", 128), ("bilstm", 128), ("lstm", 128)],
    }
    assert all(s.gating_enabled and s.conv_blocks == M.DEFAULT_CONV and s.head == M.DEFAULT_HEAD
               for s in p.values())
    with pytest.raises(ValidationError):
        M.get_preset("Transformer")


def test_backbone_shapes_and_counts():
    model = M.build(M.get_preset("LSTM+BiLSTM"), seed=0)
    shapes = {name: shape for name, _, shape in model.layer_shapes()}
    assert [shapes[f"conv{i}_pool"] for i in (1, 2, 3)] == [(500, 64), (250, 128), (125, 256)]
    assert shapes["rnn2_bilstm"] == (125, 256)
    assert shapes["gap"] == (256,)
    assert shapes["output_sigmoid"] == (23,)
    n = layer_counts(model)
    assert n["conv1"] == 11_584  # formula value; the printed table row says 11,264
    assert n["conv2"] == 82_048
    assert n["conv3"] == 164_096
    assert n["rnn1_lstm"] == 197_120
    assert n["rnn2_bilstm"] == 263_168
    assert n["dense1"] == 131_584
    assert n["dense2"] == 131_328


@pytest.mark.parametrize("name,width", [("CNN", 256), ("BiLSTM", 256), ("LSTM", 128), ("GRU", 128),
                                        ("GRU+BiLSTM+LSTM", 128)])
def test_gap_width_follows_last_layer(name, width):
    shapes = {n: s for n, _, s in M.build(M.get_preset(name)).layer_shapes(t=40)}
    assert shapes["gap"] == (width,)


def test_cnn_has_no_recurrent_parameters():
    assert M.recurrent_parameter_count(M.build(M.get_preset("CNN"))) == 0
    assert M.recurrent_parameter_count(M.build(M.get_preset("LSTM"))) == 197_120


def test_bn_running_stats_not_counted():
    model = M.build(M.get_preset("CNN"))
    n = layer_counts(model)
    assert n["conv1_bn"] == 2 * 64
    total = sum(v.size for v in model.parameters().values())
    assert model.count_parameters() == total


def test_forward_shape_range_and_independence(rng):
    spec = M.ArchitectureSpec.from_dict({"name": "small", "conv_blocks": [[4, 5, 2, 0.1]],
                                         "recurrent_stack": [["gru", 3]], "head": [[6, 0.5]]})
    model = M.build(spec, seed=1)
    x = rng.standard_normal((3, 40, 12)).astype(np.float32)
    p1, _ = model.forward(x, "infer")
    p2, _ = model.forward(x, "infer")
    assert p1.shape == (3, 23)
    assert np.all((p1 > 0) & (p1 < 1))
    np.testing.assert_array_equal(p1, p2)
    assert not np.allclose(p1.sum(axis=1), 1)
    with pytest.raises(DimensionError):
        model.forward(np.zeros((3, 40, 11), np.float32))


def test_same_seed_same_parameters():
    a = M.build(M.get_preset("GRU"), seed=5).parameters()
    b = M.build(M.get_preset("GRU"), seed=5).parameters()
    c = M.build(M.get_preset("GRU"), seed=6).parameters()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not all(np.array_equal(a[k], c[k]) for k in a)


def test_zero_gate_halves_input(rng):
    d = 8
    h = M.gating_hidden(d)
    g = M.GatingModule(np.zeros((d, h)), np.zeros(h), np.zeros((h, d)), np.zeros(d))
    x = rng.standard_normal((2, d))
    y, _ = M.apply_gating(x, g)
    np.testing.assert_array_equal(y, x / 2)


def test_gating_widths():
    assert M.gating_hidden(256) == 64
    assert M.gating_hidden(8) == 4
    assert M.gating_hidden(10) == 4
    assert M.gating_hidden(30) == 8


def test_ablation_equals_ungated_composition(rng):
    spec = tiny_spec(stack=(("lstm", 3),))
    on = M.build(spec, seed=2, dtype=np.float64)
    off = M.build(spec.with_gating(False), seed=2, dtype=np.float64)
    assert "gating" in [l.name for l in on.layers] and "gating" not in [l.name for l in off.layers]
    x = rng.standard_normal((2, 32, 12))
    h = x
    for layer in on.layers:
        if layer.name != "gating":
            h, _ = layer.forward(h, "infer")
    # same weights for every non-gating layer gives the ungated output
    shared = {k: v for k, v in on.snapshot().items() if not k.startswith("gating.")}
    off.load_arrays(shared)
    np.testing.assert_allclose(off.forward(x, "infer")[0], h, rtol=1e-12)


@given(seed=st.integers(0, 2**31 - 1))
def test_gating_gradient(seed):
    r = np.random.default_rng(seed)
    layer = M.Gating("g", 8, 4, r, np.float64)
    layer.params["fc1_bias"][...] = r.standard_normal(layer.params["fc1_bias"].shape)
    # normwise: elementwise ratios blow up on entries that cancel to ~0
    err = finite_difference_check(layer, r.standard_normal((3, 8)), seed=seed, normwise=True)
    assert err < 1e-5


def test_tiny_model_end_to_end_gradient():
    spec = tiny_spec(stack=(("bilstm", 3),))
    model = M.build(spec, seed=0, dtype=np.float64)
    x = np.random.default_rng(0).standard_normal((3, 32, 12))
    errs = model_gradient_errors(model, x, max_entries=16)
    assert max(errs.values()) < 1e-3


def test_spec_json_round_trip_and_list_form():
    spec = M.get_preset("GRU+BiLSTM+LSTM")
    assert M.ArchitectureSpec.from_json(spec.to_json()) == spec
    doc = json.loads(spec.to_json())
    doc["conv_blocks"] = [[64, 15, 2, 0.1], [128, 10, 2, 0.1], [256, 5, 2, 0.0]]
    assert M.ArchitectureSpec.from_dict(doc) == spec
    with pytest.raises(ValidationError):
        M.ArchitectureSpec.from_dict({**doc, "num_classes": 0})
    with pytest.raises(ValidationError):
        M.ArchitectureSpec.from_dict({**doc, "recurrent_stack": [["rnn", 3]]})
    with pytest.raises(ValidationError):
        M.ArchitectureSpec.from_json("{not json")


class TestCheckpoint:
    @pytest.fixture(scope="class")
    @classmethod
    def saved(cls, tmp_path_factory):
        model = M.build(M.get_preset("BiLSTM"), seed=3)
        # move BN running stats off their initial values
        x = np.random.default_rng(0).standard_normal((2, 64, 12)).astype(np.float32)
        model.forward(x, "train", np.random.default_rng(1))
        path = tmp_path_factory.mktemp("ckpt") / "m.hgc"
        save_checkpoint(model, str(path), {"note": "x"})
        return model, str(path), x

    def test_round_trip_bit_exact(self, saved):
        model, path, x = saved
        loaded = load_checkpoint(path)
        assert loaded.spec == model.spec and loaded.metadata == {"note": "x"}
        snap_a, snap_b = model.snapshot(), loaded.snapshot()
        assert all(np.array_equal(snap_a[k], snap_b[k]) for k in snap_a)
        np.testing.assert_array_equal(model.forward(x, "infer")[0], loaded.forward(x, "infer")[0])
        assert loaded.count_parameters() == model.count_parameters()

    def test_truncation_is_a_format_error(self, saved):
        buf = open(saved[1], "rb").read()
        for cut in (0, 5, 12, 40, len(buf) // 2, len(buf) - 1):
            with pytest.raises(FormatError):
                decode_checkpoint(buf[:cut])

    def test_corruption_detected(self, saved):
        buf = bytearray(open(saved[1], "rb").read())
        buf[-100] ^= 0xFF
        with pytest.raises(FormatError, match="checksum"):
            decode_checkpoint(bytes(buf))
        with pytest.raises(FormatError, match="magic"):
            decode_checkpoint(b"NOTACKPT" + bytes(buf[8:]))

    def test_spec_mismatch(self, saved):
        with pytest.raises(ValidationError):
            load_checkpoint(saved[1], expected_spec=M.get_preset("LSTM"))

    def test_header_missing_key(self):
        import struct
        from hybridecg.checkpoint import MAGIC, VERSION
        header = json.dumps({"dtype": "float32", "blocks": []}).encode()
        buf = MAGIC + struct.pack("<HI", VERSION, len(header)) + header
        with pytest.raises(FormatError, match="lacks"):
            decode_checkpoint(buf)
