import math

import numpy as np
import pytest

import jamflow

TOY = "\n".join(
    [
        "model.n_layers = 2",
        "model.n_joint = 1",
        "model.hidden_dim = 16",
        "model.heads = 2",
        "model.head_dim = 8",
        "train.steps = 4",
        "train.checkpoint_every = 2",
        "data.corpus_size = 8",
        "eval.samples = 2",
        "sampler.nfe = 4",
    ]
)


def test_generate_sample_shapes_and_determinism():
    cfg = jamflow.ModelConfig()
    a = jamflow.generate_sample(3, 10, cfg)
    b = jamflow.generate_sample(3, 10, cfg)
    assert a["audio"].shape == (40, cfg.audio_channels)
    assert a["motion"].shape == (10, 12)
    assert a["rest_motion"].shape == (10, cfg.rest_channels)
    np.testing.assert_array_equal(a["audio"], b["audio"])
    assert a["text_tokens"] == b["text_tokens"]


def test_generate_sample_rejects_short_sequences():
    with pytest.raises(jamflow.JamflowError):
        jamflow.generate_sample(0, 4)


def test_audio_query_mask_has_one_motion_key_per_row():
    mask = jamflow.joint_mask("audio_query", 15, 4)
    assert mask.shape == (15, 19)
    assert mask[:, :15].all()
    assert (mask[:, 15:].sum(axis=1) == 1).all()
    for i in range(15):
        assert mask[i, 15 + (i * 4) // 15]
    with pytest.raises(ValueError):
        jamflow.joint_mask("sideways", 3, 3)


def test_rope_angles_align_across_rates():
    audio = jamflow.rope_angles(16, 16, 8)
    motion = jamflow.rope_angles(4, 16, 8)
    np.testing.assert_array_equal(audio[::4], motion)
    assert audio[0].tolist() == [0.0] * 4


def test_inpaint_mask_is_contiguous():
    mask = np.array(jamflow.inpaint_mask(20, seed=5, p_full=0.0))
    assert 6 <= mask.sum() <= 20
    edges = np.flatnonzero(np.diff(np.concatenate([[0], mask.astype(int), [0]])))
    assert len(edges) == 2


def test_config_round_trip():
    text = jamflow.normalize_config(TOY, ["train.lr=0.0005"])
    values = dict(line.split(" = ", 1) for line in text.splitlines() if " = " in line)
    assert float(values["train.lr"]) == 0.0005
    assert jamflow.normalize_config(text) == text
    with pytest.raises(jamflow.JamflowError):
        jamflow.normalize_config("train.nope = 1")


def test_sequence_file_round_trip(tmp_path):
    streams = {"audio": np.arange(6, dtype=np.float32).reshape(3, 2)}
    jamflow.write_sequences(tmp_path / "x.jseq", streams)
    back = jamflow.read_sequences(tmp_path / "x.jseq")
    np.testing.assert_array_equal(back["audio"], streams["audio"])


def test_train_sample_evaluate(tmp_path):
    overrides = [f"paths.checkpoint_dir={tmp_path / 'ck'}", f"paths.metrics={tmp_path / 'metrics.csv'}"]
    summary = jamflow.train(TOY, overrides, from_scratch=True)
    assert summary["end_step"] == 4
    assert len(summary["losses"]) == 4
    assert all(math.isfinite(x) for x in summary["losses"])

    model = jamflow.Model(summary["checkpoint"])
    assert model.parameter_count > 0
    ref = jamflow.generate_sample(1, 8, model.config)
    audio, motion = model.sample(8, text=[1, 2], ref_audio=ref["audio"][:10], nfe=4, seed=3)
    assert audio.shape == (32, model.config.audio_channels)
    assert motion.shape == (8, model.config.motion_channels)
    np.testing.assert_array_equal(audio[:10], ref["audio"][:10])
    again, _ = model.sample(8, text=[1, 2], ref_audio=ref["audio"][:10], nfe=4, seed=3)
    np.testing.assert_array_equal(audio, again)

    results = jamflow.evaluate(summary["checkpoint"], TOY, regimes=["audio_to_motion"])
    assert [r["regime"] for r in results] == ["audio_to_motion"]
    assert math.isnan(results[0]["audio_mse"])
    assert results[0]["motion_mse"] >= 0
