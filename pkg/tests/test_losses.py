import numpy as np
import pytest

from cardiosynth import diffcore as dc
from cardiosynth.diffcore import Tensor
from cardiosynth.losses import (
    LossWeights,
    NonFiniteLossError,
    adv_img_losses,
    adv_z_losses,
    age_loss,
    cyc_loss,
    rec_loss,
    total_loss,
)
from cardiosynth.model import ModelConfig, SynthesisModel
from cardiosynth.trainer import compute_loss_terms, sample_step_noise

LN2 = float(np.log(2.0))


class _ConstantDisc:
    """Discriminator stub whose probability is constant (logit fixed)."""

    def __init__(self, prob):
        self._logit = float(np.log(prob / (1 - prob)))

    def logit(self, x, cond=None, frozen=False):
        n = x.shape[0]
        return Tensor(np.full(n, self._logit))

    def logit_recording(self, x, cond, frozen=False):
        return self.logit(x), []

    def logit_replay(self, x, cond, cached):
        return self.logit(x)


class TestReconstruction:
    def test_identical_tensors_give_zero(self):
        x = Tensor(np.random.default_rng(0).random((2, 8, 4, 4, 4)))
        assert rec_loss(x, x).item() == 0.0
        assert cyc_loss(x, x).item() == 0.0

    def test_one_hot_vs_uniform_soft(self):
        target = Tensor(np.array([1.0, 0.0, 0.0, 0.0]))
        soft = Tensor(np.full(4, 0.25))
        assert rec_loss(target, soft).item() == pytest.approx(0.375)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.random((3, 4)))
        b = Tensor(rng.random((3, 4)))
        assert rec_loss(a, b).item() == rec_loss(b, a).item()


class TestAgeLoss:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((2, 7)))
        loss = age_loss(logits, np.array([1, 2]), logits, np.array([0, 6]))
        assert loss.item() == pytest.approx(2 * np.log(7.0))

    def test_confident_logits_drive_loss_to_zero(self):
        logits = np.full((1, 7), -40.0)
        logits[0, 3] = 40.0
        loss = age_loss(Tensor(logits), np.array([3]), Tensor(logits), np.array([3]))
        assert loss.item() < 1e-6

    def test_consistent_permutation_invariance(self):
        rng = np.random.default_rng(2)
        logits = rng.normal(size=(3, 7))
        targets = np.array([0, 4, 6])
        perm = rng.permutation(7)
        loss_a = age_loss(Tensor(logits), targets, Tensor(logits), targets)
        loss_b = age_loss(
            Tensor(logits[:, perm]),
            np.argsort(perm)[targets],
            Tensor(logits[:, perm]),
            np.argsort(perm)[targets],
        )
        assert loss_a.item() == pytest.approx(loss_b.item(), rel=1e-12)


class TestAdvZ:
    def test_half_probability_gives_two_ln2(self):
        dz = _ConstantDisc(0.5)
        z = Tensor(np.zeros((4, 6)))
        d, g = adv_z_losses(dz, z, np.zeros((4, 6)))
        assert d.item() == pytest.approx(2 * LN2)
        assert g.item() == pytest.approx(LN2)

    def test_perfect_discriminator_loss_vanishes(self):
        dz = _ConstantDisc(0.5)
        # emulate perfection: logits +-20 via two stubs
        real = Tensor(np.full(4, 20.0))
        fake = Tensor(np.full(4, -20.0))
        d = dc.add(
            dc.mean_all(dc.softplus(dc.scale(real, -1.0))),
            dc.mean_all(dc.softplus(fake)),
        )
        assert d.item() < 1e-6

    def test_g_loss_decreases_as_prob_rises(self):
        z = Tensor(np.zeros((4, 6)))
        losses = [
            adv_z_losses(_ConstantDisc(p), z, np.zeros((4, 6)))[1].item()
            for p in (0.2, 0.5, 0.9)
        ]
        assert losses[0] > losses[1] > losses[2]


class TestAdvImg:
    def test_half_probability_values(self):
        dimg = _ConstantDisc(0.5)
        x = Tensor(np.zeros((2, 8, 4, 4, 4)))
        a = np.zeros((2, 7))
        d, g_t, g_s = adv_img_losses(dimg, x, a, x, a, x)
        # two real/fake pairings, each contributing 2 ln 2
        assert d.item() == pytest.approx(4 * LN2)
        assert g_t.item() == pytest.approx(LN2)
        assert g_s.item() == pytest.approx(LN2)

    def test_generator_loss_finite_for_any_probability(self):
        x = Tensor(np.zeros((2, 8, 4, 4, 4)))
        a = np.zeros((2, 7))
        for p in (0.01, 0.5, 0.99):
            _, g_t, g_s = adv_img_losses(_ConstantDisc(p), x, a, x, a, x)
            assert np.isfinite(g_t.item()) and np.isfinite(g_s.item())


class TestDetachContracts:
    """Gradient flow separation between the two optimisation groups."""

    @pytest.fixture()
    def setup(self):
        cfg = ModelConfig.micro()
        model = SynthesisModel(cfg, seed=3)
        rng = np.random.default_rng(4)
        x = np.zeros((2, cfg.in_channels) + cfg.grid)
        for i in range(2):
            for half in range(2):
                labels = rng.integers(0, cfg.n_labels, size=cfg.grid)
                for c in range(cfg.n_labels):
                    x[i, half * cfg.n_labels + c] = labels == c
        src = np.array([1, 5])
        noise = sample_step_noise(rng, src, ["F", "M"], cfg.n_age_bins, 0.02, cfg.n_z)
        return model, x, src, noise

    def test_discriminator_loss_never_reaches_generator(self, setup):
        model, x, src, noise = setup
        terms = compute_loss_terms(model, x, src, noise)
        for store in model.stores.values():
            store.zero_grads()
        d_total = dc.add(terms["adv_z_d"], terms["adv_img_d"])
        d_total.backward()
        assert all(p.tensor.grad is None for _, p in model.gen_store.items())
        assert all(p.tensor.grad is None for _, p in model.pred_store.items())
        assert any(p.tensor.grad is not None for _, p in model.adv_store.items())

    def test_generator_loss_never_reaches_discriminators(self, setup):
        model, x, src, noise = setup
        terms = compute_loss_terms(model, x, src, noise)
        for store in model.stores.values():
            store.zero_grads()
        g_total, _, _ = total_loss(terms, LossWeights())
        g_total.backward()
        assert all(p.tensor.grad is None for _, p in model.adv_store.items())
        assert any(p.tensor.grad is not None for _, p in model.gen_store.items())
        # age loss uses a frozen predictor: no gradient lands on P either
        assert all(p.tensor.grad is None for _, p in model.pred_store.items())

    def test_predictor_fit_only_touches_predictor(self, setup):
        model, x, src, noise = setup
        terms = compute_loss_terms(model, x, src, noise)
        for store in model.stores.values():
            store.zero_grads()
        terms["pred_fit"].backward()
        assert all(p.tensor.grad is None for _, p in model.gen_store.items())
        assert all(p.tensor.grad is None for _, p in model.adv_store.items())
        assert any(p.tensor.grad is not None for _, p in model.pred_store.items())


class TestTotalLoss:
    def _terms(self, value=0.5):
        t = Tensor(np.asarray(value))
        return {
            "rec": t, "cyc": t, "age": t, "adv_z_g": t,
            "adv_img_t_g": t, "adv_img_s_g": t, "adv_z_d": t, "adv_img_d": t,
        }

    def test_all_zero_weights_gives_zero_totals(self):
        w = LossWeights(l0=0, l1=0, l2=0, l3=0, l4=0, l5=0)
        gen, disc, report = total_loss(self._terms(), w)
        assert gen.item() == 0.0 and disc.item() == 0.0

    def test_only_reconstruction(self):
        w = LossWeights(l0=1, l1=0, l2=0, l3=0, l4=0, l5=0)
        terms = self._terms()
        terms["rec"] = Tensor(np.asarray(0.0))
        gen, _, _ = total_loss(terms, w)
        assert gen.item() == 0.0

    def test_weighting(self):
        w = LossWeights()
        gen, disc, report = total_loss(self._terms(1.0), w)
        assert gen.item() == pytest.approx(1 + 0.1 + 0.01 + 0.1 + 1 + 1)
        assert disc.item() == pytest.approx(0.1 + 1.0)

    def test_report_has_all_terms(self):
        _, _, report = total_loss(self._terms(), LossWeights(), step=7)
        assert report.step == 7
        assert len(report.terms()) == 8

    def test_non_finite_term_is_named(self):
        terms = self._terms()
        terms["cyc"] = Tensor(np.asarray(np.inf))
        with pytest.raises(NonFiniteLossError, match="cyc"):
            total_loss(terms, LossWeights())

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError, match="non-negative"):
            LossWeights(l0=-1.0)

    def test_log_line_format(self):
        _, _, report = total_loss(self._terms(), LossWeights(), step=3)
        fields = report.to_line().split(",")
        assert len(fields) == 10  # step + 8 terms + wall time
        assert fields[0] == "3"
