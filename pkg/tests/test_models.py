import json

import numpy as np
import pytest
import torch

from uaediff.diffusion import make_linear_schedule
from uaediff.errors import CapabilityError, GateError, IngestionError, ParameterError
from uaediff.harness import ModelStore
from uaediff.models.adapters import DiffusionAdapter, EmbedderAdapter
from uaediff.models.data import NUM_CLASSES, generate, load_dataset, write_dataset
from uaediff.models.networks import Embedder
from uaediff.models.pgd import pgd_baseline
from uaediff.models.training import (load_model, save_model, train_toy_classifier, train_toy_diffusion,
                                     train_toy_embedder)


def test_dataset_generation_is_seeded(tmp_path):
    a, la = generate(3, seed=1)
    b, lb = generate(3, seed=1)
    c, _ = generate(3, seed=2)
    assert np.array_equal(a, b) and np.array_equal(la, lb) and not np.array_equal(a, c)
    assert a.shape == (3 * NUM_CLASSES, 3, 32, 32) and a.dtype == np.uint8
    assert list(la[:NUM_CLASSES]) == list(range(NUM_CLASSES))


def test_dataset_checksum_and_missing(tmp_path):
    with pytest.raises(IngestionError):
        load_dataset(tmp_path / "nope" / "manifest.json")
    path = write_dataset(tmp_path / "d", 2, 1)
    manifest = json.loads(path.read_text())
    manifest["sha256"] = "0" * 64
    path.write_text(json.dumps(manifest))
    with pytest.raises(IngestionError, match="checksum"):
        load_dataset(path)


def test_classifier_training_is_deterministic(tiny_dataset):
    a = train_toy_classifier(tiny_dataset, "cnn_b", epochs=1, seed=3, min_accuracy=0.0)
    b = train_toy_classifier(tiny_dataset, "cnn_b", epochs=1, seed=3, min_accuracy=0.0)
    assert abs(a.history[-1] - b.history[-1]) < 1e-6
    x = torch.from_numpy(tiny_dataset.x_test[:8])
    assert torch.equal(a.logits(x), b.logits(x))


def test_classifier_gate(tiny_dataset):
    with pytest.raises(GateError) as info:
        train_toy_classifier(tiny_dataset, "cnn_a", epochs=1, seed=0, min_accuracy=1.01)
    assert info.value.diagnostics["model"] == "cnn_a" and 0 <= info.value.diagnostics["test_accuracy"] <= 1


def test_log_probs_normalized(random_classifier):
    lp = random_classifier.log_probs(torch.rand(5, 3, 32, 32))
    torch.testing.assert_close(lp.exp().sum(-1), torch.ones(5), atol=1e-5, rtol=0)
    x = torch.rand(2, 3, 32, 32)
    assert random_classifier.grad_log_prob(x, torch.tensor([0, 1])).shape == x.shape


@pytest.mark.parametrize("prediction", ["v", "eps"])
def test_diffusion_training_is_deterministic(tiny_dataset, tmp_path, prediction):
    s = make_linear_schedule(20, 5e-4, 0.1)
    a = train_toy_diffusion(tiny_dataset, s, epochs=1, seed=2, base_channels=8, max_steps=3, prediction=prediction)
    b = train_toy_diffusion(tiny_dataset, s, epochs=1, seed=2, base_channels=8, max_steps=3, prediction=prediction)
    assert abs(a.history[-1] - b.history[-1]) < 1e-6
    x = torch.randn(2, 3, 32, 32)
    assert torch.equal(a.predict_noise(x, 5, torch.tensor([1, 2])), b.predict_noise(x, 5, torch.tensor([1, 2])))
    save_model(a, tmp_path, "diffusion")
    back = load_model(tmp_path, "diffusion")
    assert back.prediction == prediction
    assert torch.equal(back.predict_noise(x, 5, torch.tensor([1, 2])), a.predict_noise(x, 5, torch.tensor([1, 2])))


def test_no_class_dropout_means_no_unconditional_branch(tiny_dataset):
    s = make_linear_schedule(20, 5e-4, 0.1)
    d = train_toy_diffusion(tiny_dataset, s, epochs=1, seed=0, base_channels=8, class_dropout_rate=0.0, max_steps=1)
    x = torch.randn(1, 3, 32, 32)
    assert d.predict_noise(x, 3, torch.tensor([0])).shape == x.shape
    with pytest.raises(CapabilityError):
        d.predict_noise(x, 3, None)
    with pytest.raises(ParameterError):
        train_toy_diffusion(tiny_dataset, s, epochs=1, class_dropout_rate=1.0)


class OracleV(torch.nn.Module):
    """Returns the exact v target for a known clean image ``x0``."""

    def __init__(self, x0, alpha_bar):
        super().__init__()
        self.x0, self.ab = x0, torch.as_tensor(alpha_bar)

    def forward(self, x, t, y):
        ab = self.ab[t].to(x.dtype)[:, None, None, None]
        eps = (x - ab.sqrt() * self.x0) / (1 - ab).sqrt()
        return ab.sqrt() * eps - (1 - ab).sqrt() * self.x0


def test_v_prediction_converts_to_noise():
    s = make_linear_schedule(50, 5e-4, 0.1)
    x0 = torch.rand(2, 3, 4, 4, dtype=torch.float64) * 2 - 1
    eps = torch.randn_like(x0)
    d = DiffusionAdapter(OracleV(x0, s.alpha_bar), 10, prediction="v", alpha_bar=s.alpha_bar)
    for t in (1, 17, 50):
        x_t = s.alpha_bar[t] ** 0.5 * x0 + (1 - s.alpha_bar[t]) ** 0.5 * eps
        torch.testing.assert_close(d.predict_noise(x_t, t, torch.tensor([0, 1])), eps, rtol=1e-10, atol=1e-10)
    with pytest.raises(ParameterError):
        DiffusionAdapter(OracleV(x0, s.alpha_bar), 10, prediction="v")


def test_embedder_contracts():
    torch.manual_seed(0)
    f = EmbedderAdapter(Embedder(16))
    x = torch.rand(6, 3, 32, 32)
    e = f.embed(x)
    torch.testing.assert_close(e.norm(dim=-1), torch.ones(6), atol=1e-5, rtol=0)
    torch.testing.assert_close(f.score(x, x), torch.ones(6), atol=1e-5, rtol=0)
    sims = f.similarity(e[0:1], e)
    assert int(sims.argmax()) == 0
    assert f.grad_similarity_wrt_first(x[0], x[1]).shape == (3, 32, 32)


def test_embedder_gate(tiny_dataset):
    with pytest.raises(GateError):
        train_toy_embedder(tiny_dataset, epochs=1, seed=0, dim=8, min_verification=1.01)


def test_checkpoint_round_trip(tmp_path, tiny_dataset, random_classifier, random_diffusion):
    random_classifier.descriptor = {"kind": "classifier", "architecture": "cnn_a", "class_count": 10,
                                    "resolution": 32}
    save_model(random_classifier, tmp_path, "cnn_a")
    back = load_model(tmp_path, "cnn_a")
    x = torch.rand(3, 3, 32, 32)
    assert torch.equal(back.logits(x), random_classifier.logits(x))

    random_diffusion.descriptor = {"kind": "diffusion", "channels": 3, "base_channels": 8, "class_count": 10,
                                   "class_dropout_rate": 0.1, "resolution": 32}
    save_model(random_diffusion, tmp_path, "diffusion")
    store = ModelStore(tmp_path)
    d = store.get("diffusion")
    assert torch.equal(d.predict_noise(x, 4, None), random_diffusion.predict_noise(x, 4, None))
    assert store.get("diffusion") is d
    assert "history" not in store.descriptors()["diffusion"]

    blob = bytearray((tmp_path / "cnn_a.pt").read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    (tmp_path / "cnn_a.pt").write_bytes(bytes(blob))
    with pytest.raises(IngestionError, match="hash"):
        ModelStore(tmp_path).get("cnn_a")
    with pytest.raises(IngestionError):
        load_model(tmp_path, "missing")


def test_cross_architecture_disagreement(tiny_dataset):
    a = train_toy_classifier(tiny_dataset, "cnn_a", epochs=1, seed=0, min_accuracy=0.0)
    b = train_toy_classifier(tiny_dataset, "cnn_b", epochs=1, seed=0, min_accuracy=0.0)
    x = torch.from_numpy(tiny_dataset.x_test)
    assert (a.predict(x) != b.predict(x)).float().mean() > 0


def test_pgd_trivial_cases(random_classifier):
    x = torch.rand(2, 3, 32, 32)
    assert torch.equal(pgd_baseline(random_classifier, x, 1, 0.0, 0.01, 5), x)
    assert torch.equal(pgd_baseline(random_classifier, x, 1, 0.03, 0.01, 0), x)
    with pytest.raises(ParameterError):
        pgd_baseline(random_classifier, x, 1, -0.1, 0.01, 5)


def test_pgd_stays_in_ball_and_raises_target_probability(random_classifier):
    g = torch.Generator().manual_seed(0)
    for trial in range(5):
        x = torch.rand(4, 3, 32, 32, generator=g)
        eps = [0.01, 0.03, 0.1, 0.3, 0.5][trial]
        tgt = torch.tensor([0, 3, 5, 9])
        out = pgd_baseline(random_classifier, x, tgt, eps, eps / 4, 10)
        assert float((out - x).abs().max()) <= eps + 1e-6
        assert out.min() >= 0 and out.max() <= 1
        before = random_classifier.log_probs(x).gather(1, tgt[:, None])
        after = random_classifier.log_probs(out).gather(1, tgt[:, None])
        assert (after >= before - 1e-6).all()
