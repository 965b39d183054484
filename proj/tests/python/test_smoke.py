import numpy as np
import pytest

import proxyprompt as pp

SMALL = dict(height=32, width=32, patch=8, channels=16, vim_embed=12, vim_state=3, vim_depth=1,
             heads=2, ccm_blocks=4, cbam_ratio=4, hires_channels=4, backbone_layers=1,
             lora_rank=2, lora_alpha=2.0)


def test_episode_is_deterministic():
    a = pp.generate_episode(seed=3, shots=2)
    b = pp.generate_episode(seed=3, shots=2)
    assert a["classes"] == ["blob", "ring"]
    assert a["target"].shape == (3, 64, 64)
    assert a["support_masks"].shape == (2, 2, 64, 64)
    for key in ("target", "gt", "support_images", "support_masks"):
        assert np.array_equal(a[key], b[key])
    assert set(np.unique(a["gt"])) <= {0.0, 1.0}


def test_dice_matches_counts():
    p = np.zeros((1, 4, 4)); g = np.zeros((1, 4, 4))
    p.flat[:4] = 1; g.flat[2:6] = 1
    assert pp.dice_score(p, g) == pytest.approx(0.5)
    assert pp.iou_score(p, g) == pytest.approx(1 / 3)
    assert pp.dice_loss(p, g) == pytest.approx(1 - 6 / 10)


def test_selective_map_columns_are_distributions():
    rng = np.random.default_rng(0)
    sup, x = rng.normal(size=(5, 7)), rng.normal(size=(5, 3))
    raw, norm = pp.selective_map(sup, x)
    ref = (2 * sup.T @ x - (sup ** 2).sum(0)[:, None]) / np.sqrt(5)
    assert np.allclose(raw, ref, atol=1e-12)
    assert np.allclose(norm.sum(0), 1.0)
    d = ((sup[:, :, None] - x[:, None, :]) ** 2).sum(0)
    assert np.array_equal(norm.argmax(0), d.argmin(0))


def test_ppgt_round_trip(tmp_path):
    a = np.arange(24, dtype=float).reshape(2, 3, 4) - 7.5
    assert np.array_equal(pp.decode_ppgt(pp.encode_ppgt(a)), a)
    pp.save_tensor(tmp_path / "a.ppgt", a)
    assert np.array_equal(pp.load_tensor(tmp_path / "a.ppgt"), a)
    with pytest.raises(ValueError, match="truncated"):
        pp.decode_ppgt(pp.encode_ppgt(a)[:-1])


def test_model_forward_train_save(tmp_path):
    m = pp.Model(**SMALL)
    ep = pp.generate_episode(seed=1, size=32, shots=2)
    out = m.forward(ep["target"], ep["support_images"], ep["support_masks"])
    assert out["probs"].shape == (2, 32, 32)
    assert out["prompt"].shape == (2, 1, 16)
    assert np.allclose(out["selective_map"].sum(0), 1.0)
    assert m.parameter_count(True) > 0 and m.parameter_count(False) > 0

    suite = pp.generate_suite(seed=5, count=3, size=32, shots=2)
    losses = m.train(suite, steps=3, shots=2)
    assert len(losses) == 3 and all(np.isfinite(losses))
    report = m.evaluate(suite[:2], suite, shots=1, repeats=2)
    assert 0.0 <= report["mean_dice"] <= 1.0

    m.save(tmp_path / "ckpt")
    back = pp.Model.load(tmp_path / "ckpt")
    again = back.forward(ep["target"], ep["support_images"], ep["support_masks"])
    assert np.array_equal(again["probs"], m.forward(ep["target"], ep["support_images"], ep["support_masks"])["probs"])


def test_errors_map_to_python():
    with pytest.raises(ValueError):
        pp.Model(height=33)
    with pytest.raises(ValueError, match="unknown model option"):
        pp.Model(colour="red")
    with pytest.raises(ValueError):
        pp.generate_episode(seed=1, classes=["blob", "blob"])


def test_gradcheck_from_python():
    assert "ccm" in pp.checkable_modules()
    rows = pp.gradcheck("ccm")
    assert rows and all(ok for _, _, ok in rows)
