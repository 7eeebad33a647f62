"""Tests for model.py: classifier assembly, forward contract and checkpoints."""
from dataclasses import replace

import numpy as np
import pytest

from common import ConfigurationError, InputError, SchemaError
from model import (
    ARCHITECTURES,
    ModelConfig,
    argmax_score,
    build_classifier,
    forward_logits,
    load_checkpoint,
    lora_partition,
    parameter_census,
    parameter_count,
    predict_score,
    save_checkpoint,
)

VOCAB = 20
CLASSES = 3


def tiny_config(architecture: str, **overrides) -> ModelConfig:
    fields = dict(
        architecture=architecture,
        vocab_size=VOCAB,
        n_classes=CLASSES,
        d_model=8,
        depth=2,
        n_heads=2,
        window_radius=2 if architecture == "sliding-window" else None,
        segment_length=4 if architecture == "segment-recurrent" else None,
        state_dim=4,
        conv_width=3,
        scan_chunk=4,
        max_length=16,
    )
    fields.update(overrides)
    return ModelConfig(**fields)


@pytest.fixture
def tokens():
    return np.random.default_rng(0).integers(0, VOCAB, size=12).tolist()


def _silu(x):
    return x / (1.0 + np.exp(-x))


@pytest.mark.parametrize("architecture", ARCHITECTURES)
class TestForwardContract:
    def test_shape_and_determinism(self, architecture, tokens):
        """Test logit shape and seed determinism per architecture."""
        first = build_classifier(tiny_config(architecture), seed=3)
        second = build_classifier(tiny_config(architecture), seed=3)
        for name, tensor in first.parameters().items():
            np.testing.assert_array_equal(tensor.data, second.parameters()[name].data)
        logits = forward_logits(first, tokens)
        assert logits.shape == (CLASSES,)
        np.testing.assert_array_equal(logits.data, forward_logits(second, tokens).data)

    def test_truncation(self, architecture):
        """Test that tokens past max_length are ignored."""
        model = build_classifier(tiny_config(architecture), seed=1)
        long = np.random.default_rng(4).integers(0, VOCAB, size=16 + 50).tolist()
        np.testing.assert_array_equal(
            forward_logits(model, long).data, forward_logits(model, long[:16]).data
        )

    def test_zero_head_gives_zero_logits(self, architecture, tokens):
        """Test that a zero head gives zero logits."""
        model = build_classifier(tiny_config(architecture), seed=2)
        model.head_weight.data[...] = 0.0
        model.head_bias.data[...] = 0.0
        assert not forward_logits(model, tokens).data.any()

    def test_empty_input(self, architecture):
        """Test that an empty token list is an input error."""
        with pytest.raises(InputError):
            forward_logits(build_classifier(tiny_config(architecture), seed=0), [])

    def test_checkpoint_round_trip(self, architecture, tokens, tmp_path):
        """Test that a saved checkpoint reloads to identical logits."""
        model = build_classifier(tiny_config(architecture), seed=5)
        save_checkpoint(model, tmp_path / "a.lsck")
        save_checkpoint(model, tmp_path / "b.lsck")
        assert (tmp_path / "a.lsck").read_bytes() == (tmp_path / "b.lsck").read_bytes()
        restored = load_checkpoint(tmp_path / "a.lsck")
        assert restored.config == model.config
        for name, tensor in model.parameters().items():
            np.testing.assert_array_equal(tensor.data, restored.parameters()[name].data)
        np.testing.assert_array_equal(
            forward_logits(model, tokens).data, forward_logits(restored, tokens).data
        )


def test_head_shape():
    """Test the head shape and its uniform init bound."""
    model = build_classifier(tiny_config("full-attention", d_model=16, n_classes=4), seed=0)
    assert model.head_weight.shape == (16, 4)
    bound = 1.0 / np.sqrt(16)
    assert np.abs(model.head_weight.data).max() <= bound


def test_ssm_parameter_census():
    """Test a 2-layer ssm count against closed-form arithmetic."""
    config = tiny_config("ssm")
    model = build_classifier(config, seed=0)
    d, inner, n, k = 8, 16, 4, 3
    per_block = d * inner + inner + d * inner + inner + k * inner + 3 * inner * n + inner * d
    expected = VOCAB * d + 2 * per_block + d * CLASSES + CLASSES
    census = parameter_census(model)
    assert census["blocks.0"] == per_block
    assert sum(census.values()) == parameter_count(model) == expected


def test_single_token_ssm_closed_form():
    """Test T=1: conv keeps its last tap and the scan reduces to sum(B*C) * u."""
    model = build_classifier(tiny_config("ssm"), seed=9)
    h = model.embedding.data[7].copy()
    for block in model.blocks:
        u = h @ block.in_weight.data + block.in_bias.data
        u = _silu(block.conv.data[-1] * u)
        y = (block.B.data * block.C.data).sum(axis=1) * u
        gate = _silu(h @ block.gate_weight.data + block.gate_bias.data)
        h = h + (y * gate) @ block.out_weight.data
    expected = h @ model.head_weight.data + model.head_bias.data
    np.testing.assert_allclose(forward_logits(model, [7]).data, expected, rtol=1e-10)


def test_segment_model_within_one_segment_equals_attention_stack(tokens):
    """Test that a one-segment recurrent model equals causal full attention."""
    recurrent = build_classifier(tiny_config("segment-recurrent", segment_length=16), seed=4)
    plain = build_classifier(tiny_config("full-attention", causal=True), seed=4)
    np.testing.assert_array_equal(
        forward_logits(recurrent, tokens).data, forward_logits(plain, tokens).data
    )


def test_pooling_defaults():
    """Test the default pooling position per architecture."""
    assert tiny_config("sliding-window").resolved_pooling == "first-token"
    assert tiny_config("ssm").resolved_pooling == "last-token"
    assert tiny_config("full-attention", causal=False).resolved_pooling == "first-token"
    assert tiny_config("ssm", pooling="first-token").resolved_pooling == "first-token"


@pytest.mark.parametrize(
    "overrides",
    [
        {"architecture": "sliding-window", "window_radius": None},
        {"architecture": "segment-recurrent", "segment_length": None},
        {"n_classes": 1},
        {"architecture": "ssm", "lora_rank": 2},
        {"architecture": "full-attention", "n_heads": 3},
        {"architecture": "ssm", "conv_width": 9},
        {"architecture": "transformer"},
        {"architecture": "full-attention", "rope_base_overrides": (100.0,)},
    ],
)
def test_invalid_configs(overrides):
    """Test rejection of inconsistent model configs."""
    base = dict(architecture="full-attention")
    base.update(overrides)
    architecture = base.pop("architecture")
    with pytest.raises(ConfigurationError):
        tiny_config(architecture, **base)


def test_rope_overrides_and_disable(tokens):
    """Test per-layer rope bases and disabling rope."""
    config = tiny_config("full-attention", rope_base_overrides=(100.0, 50000.0))
    model = build_classifier(config, seed=0)
    assert [layer.rope_base for layer in model.blocks] == [100.0, 50000.0]
    no_rope = build_classifier(replace(config, rope_base=None, rope_base_overrides=()), seed=0)
    assert all(layer.rope_base is None for layer in no_rope.blocks)
    assert forward_logits(no_rope, tokens).shape == (CLASSES,)


class TestLoraModel:
    def test_attach_keeps_logits_and_partitions(self, tokens):
        """Test that adapters keep base logits and train only adapters and head."""
        base = build_classifier(tiny_config("full-attention"), seed=6)
        adapted = build_classifier(tiny_config("full-attention", lora_rank=2), seed=6)
        np.testing.assert_array_equal(
            forward_logits(base, tokens).data, forward_logits(adapted, tokens).data
        )
        trainable = set(adapted.trainable_parameters())
        assert trainable == {"head.weight", "head.bias"} | {
            f"blocks.{i}.lora.{t}.{part}"
            for i in range(2) for t in ("L_q", "L_k", "L_v") for part in ("down", "up")
        }

    def test_partition_function(self):
        """Test the adapter partition of a sliding-window model."""
        model = build_classifier(tiny_config("sliding-window", lora_rank=1), seed=0)
        frozen, trainable = lora_partition(model)
        assert "embedding" in frozen and "blocks.0.wq" in frozen
        assert not frozen & trainable


class TestPrediction:
    def test_argmax_offset(self):
        """Test mapping the best class back to a rubric score."""
        assert argmax_score(np.array([0.1, 3.0, -1.0]), 1) == 2

    def test_tie_goes_to_lower_index(self):
        """Test that ties pick the lower score."""
        assert argmax_score(np.array([1.0, 1.0]), 1) == 1

    def test_matches_brute_force_argmax(self):
        """Test argmax against a brute-force scan."""
        rng = np.random.default_rng(11)
        for _ in range(1000):
            logits = rng.integers(-3, 4, size=5).astype(float)
            best = 0
            for index in range(1, 5):
                if logits[index] > logits[best]:
                    best = index
            assert argmax_score(logits, 2) == best + 2

    def test_constant_shift_invariance(self, tokens):
        """Test that shifting every logit keeps the prediction."""
        model = build_classifier(tiny_config("ssm"), seed=8)
        before = predict_score(model, tokens, 1)
        model.head_bias.data += 17.0
        assert predict_score(model, tokens, 1) == before


class TestCheckpointErrors:
    def test_bad_magic(self, tmp_path):
        """Test that a file without the magic is a schema error."""
        path = tmp_path / "x.lsck"
        path.write_bytes(b"NOPE" + b"\0" * 16)
        with pytest.raises(SchemaError):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        """Test that trailing bytes are a schema error."""
        path = tmp_path / "x.lsck"
        save_checkpoint(build_classifier(tiny_config("ssm"), seed=0), path)
        path.write_bytes(path.read_bytes() + b"\0" * 8)
        with pytest.raises(SchemaError):
            load_checkpoint(path)

    def test_layout_is_magic_then_version(self, tmp_path):
        """Test the container preamble layout."""
        path = tmp_path / "x.lsck"
        save_checkpoint(build_classifier(tiny_config("ssm"), seed=0), path)
        blob = path.read_bytes()
        assert blob[:4] == b"LSCK"
        assert int.from_bytes(blob[4:6], "little") == 1

    def _saved(self, tmp_path):
        path = tmp_path / "x.lsck"
        save_checkpoint(build_classifier(tiny_config("ssm"), seed=0), path)
        return path

    def test_truncated_payload(self, tmp_path):
        """Test that a checkpoint cut short inside the payload is a schema error."""
        path = self._saved(tmp_path)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(SchemaError, match="truncated"):
            load_checkpoint(path)

    @pytest.mark.parametrize("keep", [6, 40])
    def test_truncated_preamble_or_header(self, tmp_path, keep):
        """Test that a file ending before the header is complete is a schema error."""
        path = self._saved(tmp_path)
        path.write_bytes(path.read_bytes()[:keep])
        with pytest.raises(SchemaError):
            load_checkpoint(path)

    def test_corrupt_header_json(self, tmp_path):
        """Test that an undecodable header is a schema error."""
        path = self._saved(tmp_path)
        blob = bytearray(path.read_bytes())
        blob[10] = ord("#")
        path.write_bytes(bytes(blob))
        with pytest.raises(SchemaError, match="malformed header"):
            load_checkpoint(path)
