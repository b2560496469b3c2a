import copy
import math

import numpy as np
import pytest
import torch

from octfew.dataset import ClassLabel, DatasetManifest, load_image
from octfew.ugatit import (AdaLIN, Discriminator, Generator, NonFiniteLossError, TranslationCheckpoint,
                           TranslationConfig, TranslationState, adalin, cam_attention, clamp_rho, generate,
                           instance_norm, layer_norm, load_checkpoint, rho_values, save_checkpoint, train,
                           training_step)

from oracles import in_oracle, ln_oracle

TINY = dict(image_size=32, channels=1, iterations=3, seed=0)


def test_adalin_reductions(rng):
    x = rng.normal(2.0, 3.0, (2, 4, 5, 6))
    t = torch.tensor(x)
    ones, zeros = torch.ones(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64)
    np.testing.assert_allclose(adalin(t, ones, zeros, ones).numpy(), in_oracle(x), rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(adalin(t, ones, zeros, zeros).numpy(), ln_oracle(x), rtol=1e-5, atol=1e-7)
    half = adalin(t, ones, zeros, torch.full((4,), 0.5, dtype=torch.float64)).numpy()
    np.testing.assert_allclose(half, (in_oracle(x) + ln_oracle(x)) / 2, atol=1e-10)
    g = torch.tensor(rng.normal(size=(2, 4)))
    b = torch.tensor(rng.normal(size=(2, 4)))
    out = adalin(t, g, b, ones).numpy()
    np.testing.assert_allclose(out, in_oracle(x) * g.numpy()[:, :, None, None] + b.numpy()[:, :, None, None],
                               atol=1e-9)
    normed = instance_norm(t)
    assert normed.mean(dim=(2, 3)).abs().max() < 1e-12
    assert layer_norm(t).mean(dim=(1, 2, 3)).abs().max() < 1e-12


def test_adalin_shape_errors():
    x = torch.zeros(2, 4, 3, 3)
    with pytest.raises(ValueError):
        adalin(x, torch.ones(3), torch.zeros(4), torch.ones(4))
    with pytest.raises(ValueError):
        adalin(torch.zeros(4, 3, 3), torch.ones(4), torch.zeros(4), torch.ones(4))


def test_cam_attention_examples(rng):
    f = torch.tensor(rng.normal(size=(5, 4, 3)))
    out = cam_attention(f, torch.ones(5, dtype=torch.float64))
    torch.testing.assert_close(out.weighted_features, f)
    onehot = torch.zeros(5, dtype=torch.float64)
    onehot[3] = 1
    torch.testing.assert_close(cam_attention(f, onehot).attention_map, f[3])
    w = torch.tensor(rng.normal(size=5))
    out = cam_attention(f, w)
    brute = sum(w[c] * f[c] for c in range(5))
    torch.testing.assert_close(out.attention_map, brute)
    assert out.logit.item() == pytest.approx(float((f.mean(dim=(1, 2)) * w).sum()))
    assert cam_attention(f, w, pool="max").logit.item() == pytest.approx(float((f.amax(dim=(1, 2)) * w).sum()))
    with pytest.raises(ValueError):
        cam_attention(f, torch.ones(4, dtype=torch.float64))


def test_gradients_finite_differences(rng):
    x = torch.tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    g = torch.tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = torch.tensor(rng.normal(size=(2, 3)), requires_grad=True)
    rho = torch.tensor(rng.uniform(0.2, 0.8, 3), requires_grad=True)
    assert torch.autograd.gradcheck(adalin, (x, g, b, rho), eps=1e-6, atol=1e-6, rtol=1e-3)
    f = torch.tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    w = torch.tensor(rng.normal(size=3), requires_grad=True)
    fn = lambda f, w: (cam_attention(f, w).weighted_features, cam_attention(f, w).logit,  # noqa: E731
                       cam_attention(f, w).attention_map)
    assert torch.autograd.gradcheck(fn, (f, w), eps=1e-6, atol=1e-6, rtol=1e-3)
    # least-squares, L1 and BCE loss components
    y = torch.tensor(rng.normal(size=(2, 5)), requires_grad=True)
    t = torch.tensor(rng.normal(size=(2, 5)))
    for loss in (lambda y: ((y - 1) ** 2).mean(), lambda y: (y - t).abs().mean(),
                 lambda y: torch.nn.functional.binary_cross_entropy_with_logits(y, torch.ones_like(y))):
        assert torch.autograd.gradcheck(loss, (y,), eps=1e-6, atol=1e-6, rtol=1e-3)


def test_config_validation():
    with pytest.raises(ValueError):
        TranslationConfig(iterations=0)
    with pytest.raises(ValueError):
        TranslationConfig(image_size=30)
    with pytest.raises(ValueError, match="minimum 32"):
        TranslationConfig(image_size=16)
    with pytest.raises(ValueError, match="minimum 128"):
        TranslationConfig(image_size=64, preset="paper")
    with pytest.raises(ValueError):
        TranslationConfig(loss_weights={"cam": -1})
    cfg = TranslationConfig(loss_weights={"cycle": 5})
    assert cfg.loss_weights == {"adversarial": 1.0, "cycle": 5, "identity": 10.0, "cam": 1000.0}
    assert TranslationConfig.from_json(cfg.to_json()) == cfg
    paper = TranslationConfig.paper()
    assert (paper.image_size, paper.iterations, paper.learning_rate, paper.betas) == (256, 200_000, 1e-4,
                                                                                         (0.5, 0.999))


def test_network_shapes():
    G = Generator(1, 1, ngf=8, n_res=1)
    img, cam, heat = G(torch.zeros(2, 1, 32, 32))
    assert img.shape == (2, 1, 32, 32) and cam.shape == (2, 2) and heat.shape == (2, 1, 8, 8)
    assert img.abs().max() <= 1
    D = Discriminator(1, ndf=8, n_layers=4)
    logits, cam, heat = D(torch.zeros(2, 1, 32, 32))
    assert logits.shape[0] == 2 and cam.shape == (2, 2)


def test_zero_initialised_discriminator_real_loss_is_one():
    cfg = TranslationConfig(**TINY, spectral_norm=False)
    state = TranslationState.create(cfg)
    for D in state.discriminators:
        for p in D.parameters():
            torch.nn.init.zeros_(p)
    x = torch.rand(1, 1, 32, 32) * 2 - 1
    _, rec = training_step(x, x, state)
    assert rec["d_real"] == 1.0
    assert rec["d_fake"] == 0.0


def test_cycle_loss_matches_independent_recomputation():
    cfg = TranslationConfig(**TINY, loss_weights={"adversarial": 0, "identity": 0, "cam": 0})
    state = TranslationState.create(cfg)
    a = torch.rand(1, 1, 32, 32) * 2 - 1
    G_AB, G_BA = (copy.deepcopy(g) for g in state.generators)
    with torch.no_grad():
        want = (G_BA(G_AB(a)[0])[0] - a).abs().mean().item()
    _, rec = training_step(a, a, state)
    assert rec["g_cycle_A"] == pytest.approx(want, abs=1e-5)
    assert rec["g_total"] == pytest.approx(10 * rec["g_cycle"], rel=1e-5)


def test_step_records_and_rho_clamp():
    state = TranslationState.create(TranslationConfig(**TINY))
    G_AB, G_BA = state.generators
    with torch.no_grad():
        for m in G_AB.modules():
            if isinstance(m, AdaLIN):
                m.rho.fill_(1.7)
    x = torch.rand(2, 1, 32, 32) * 2 - 1
    _, rec = training_step(x, x.flip(-1), state)
    keys = {"d_real", "d_fake", "d_adv", "d_total", "g_adv", "g_cycle", "g_identity", "g_cam", "g_total"}
    assert keys <= set(rec) and all(math.isfinite(v) for v in rec.values())
    rho = rho_values(G_AB, G_BA)
    assert rho.min() >= 0 and rho.max() <= 1
    assert state.iteration == 1 and len(state.history) == 1
    with pytest.raises(ValueError):
        training_step(torch.zeros(0, 1, 32, 32), x, state)
    with pytest.raises(ValueError):
        training_step(torch.zeros(1, 1, 64, 64), x, state)


def test_non_finite_loss_names_component():
    state = TranslationState.create(TranslationConfig(**TINY))
    x = torch.full((1, 1, 32, 32), float("nan"))
    with pytest.raises(NonFiniteLossError) as err:
        training_step(x, x, state)
    assert err.value.component == "d_real" and err.value.iteration == 0


def test_clamp_rho():
    G = Generator(1, 1, ngf=4, n_res=1)
    with torch.no_grad():
        for p in G.parameters():
            p.mul_(0).add_(-3.0)
    clamp_rho(G)
    assert rho_values(G).min() == 0


def test_train_checkpoint_generate(small_manifest, tmp_path):
    normal = small_manifest.subset([r.id for r in small_manifest.of_class(ClassLabel.NORMAL)][:4])
    csc = small_manifest.subset(r.id for r in small_manifest.of_class(ClassLabel.CSC))
    cfg = TranslationConfig(**{**TINY, "iterations": 4})
    ckpt = train(normal, csc, cfg, out_dir=tmp_path / "ck", snapshot_every=2)
    assert ckpt.iteration == 4 and len(ckpt.loss_history) == 4 and ckpt.target_class is ClassLabel.CSC
    assert (tmp_path / "ck" / "snapshots" / "iter_0000002" / "header.json").is_file()
    back = load_checkpoint(tmp_path / "ck")
    assert back.config == cfg and back.loss_history == ckpt.loss_history
    for k, v in ckpt.generator_AB.items():
        np.testing.assert_array_equal(back.generator_AB[k], v)
    # determinism of training
    again = train(normal, csc, cfg)
    assert again.loss_history == ckpt.loss_history
    gen = generate(back, normal, 6, seed=5, img_dir=tmp_path / "img")
    assert len(gen) == 6
    assert {r.source_id for r in gen} <= set(normal.ids)
    assert all(r.label is ClassLabel.CSC and r.provenance.value == "generated" for r in gen)
    img = load_image(gen.records[0].path, channels=1)
    assert img.shape == (32, 32, 1) and img.dtype == np.uint8
    one_a = generate(back, normal, 1, seed=9, img_dir=tmp_path / "a")
    one_b = generate(back, normal, 1, seed=9, img_dir=tmp_path / "b")
    np.testing.assert_array_equal(load_image(one_a.records[0].path), load_image(one_b.records[0].path))
    with pytest.raises(ValueError):
        generate(back, DatasetManifest(), 1, 0, tmp_path)
    with pytest.raises(ValueError, match="single-class"):
        train(normal, small_manifest, cfg)
    with pytest.raises(ValueError):
        TranslationCheckpoint(ckpt.generator_AB, ckpt.generator_BA, ckpt.discriminators, cfg, 5,
                              ckpt.loss_history, ClassLabel.CSC)
    save_checkpoint(back, tmp_path / "ck2")
    assert load_checkpoint(tmp_path / "ck2").iteration == 4
