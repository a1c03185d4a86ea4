import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from argf.model import (
    EmbeddingStage,
    StageTrainer,
    W_MAX,
    W_MIN,
    loss_cl,
    loss_rl,
    phase_groups,
)
from argf.numcore import DivergenceError, ShapeError, Tensor, gradcheck

from conftest import random_batch, zero_params

LN2 = math.log(2)


def snapshot(stage):
    return stage.state_dict()


def changed(before, after):
    return {name for name in before if not np.array_equal(before[name], after[name])}


def names_of(stage, params):
    ids = {id(p) for p in params}
    return {name for name, p in stage.named_parameters() if id(p) in ids}


def saturating_discriminator(stage, scale):
    """D reads the first embedding coordinate: ~1 for positive, ~0 for negative."""
    first, last = stage.discriminator.layers
    first.weight.values = np.zeros_like(first.weight.values)
    first.weight.values[0, 0] = 1.0
    first.weight.values[1, 0] = -1.0
    first.bias.values[:] = 0.0
    last.weight.values = np.zeros_like(last.weight.values)
    last.weight.values[0, 0] = scale
    last.weight.values[0, 1] = -scale
    last.bias.values[:] = 0.0


class TestForwardPieces:
    def test_encode_shape(self, rng):
        stage = EmbeddingStage(16, 8, 2, rng=rng)
        assert stage.encode(rng.normal(size=(4, 16)), "a").shape == (4, 8)

    def test_encode_zero_params(self, stage, rng):
        zero_params(stage.encoders["v"])
        np.testing.assert_array_equal(stage.encode(rng.normal(size=(3, 6)), "v").values, 0.0)

    def test_encode_deterministic(self, stage, rng):
        x = rng.normal(size=(5, 6))
        assert stage.encode(x, "l").values.tobytes() == stage.encode(x, "l").values.tobytes()

    def test_encode_unknown_modality(self, stage):
        with pytest.raises(ValueError, match="unknown modality"):
            stage.encode(np.zeros((2, 6)), "t")

    def test_encode_wrong_dim(self, stage):
        with pytest.raises(ShapeError):
            stage.encode(np.zeros((2, 5)), "a")

    def test_all_encoders_share_k(self, stage):
        for m in "avl":
            assert stage.encode(np.ones((2, 6)), m).shape[1] == stage.k

    def test_decode_shape(self, rng):
        stage = EmbeddingStage(16, 8, 2, rng=rng)
        assert stage.decode(rng.normal(size=(4, 8)), "a").shape == (4, 16)

    def test_decode_zero(self, stage, rng):
        zero_params(stage.decoders["l"])
        np.testing.assert_array_equal(stage.decode(rng.normal(size=(4, 4)), "l").values, 0.0)

    def test_decode_k_mismatch(self, stage):
        with pytest.raises(ShapeError):
            stage.decode(np.zeros((4, 5)), "a")

    def test_discriminator_zero_is_half(self, stage, rng):
        zero_params(stage.discriminator)
        np.testing.assert_array_equal(stage.discriminate(rng.normal(size=(6, 4))).values, 0.5)

    def test_discriminator_open_interval_for_huge_inputs(self, stage, rng):
        d = stage.discriminate(1e3 * rng.normal(size=(200, 4))).values
        assert d.shape == (200, 1)
        assert np.all((d > 0) & (d < 1))

    def test_classifier_rows(self, stage, rng):
        out = stage.classify(rng.normal(size=(5, 4))).values
        assert out.shape == (5, 3)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_classifier_zero_two_classes(self, rng):
        stage = EmbeddingStage(6, 4, 2, rng=rng)
        zero_params(stage.classifier)
        np.testing.assert_array_equal(stage.classify(rng.normal(size=(3, 4))).values, 0.5)

    def test_sources_follow_target(self, rng):
        assert EmbeddingStage(3, 2, 2, target="a", rng=rng).sources == ("v", "l")
        assert EmbeddingStage(3, 2, 2, rng=rng).sources == ("a", "v")
        with pytest.raises(ValueError):
            EmbeddingStage(3, 2, 2, target="x", rng=rng)


class TestAdversarialLosses:
    def test_fal_at_half(self, stage, rng):
        zero_params(stage.discriminator)
        e = rng.normal(size=(5, 4))
        assert stage.loss_fal(e, e).item() == pytest.approx(2 * LN2, abs=1e-12)

    def test_tal_at_half(self, stage, rng):
        zero_params(stage.discriminator)
        e = rng.normal(size=(5, 4))
        assert stage.loss_tal(e, e, e).item() == pytest.approx(3 * LN2, abs=1e-12)

    def test_fal_linear_in_w(self, stage, rng):
        a, v = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        stage.w.values = np.array(1.0)
        one = stage.loss_fal(a, v).item()
        stage.w.values = np.array(2.0)
        assert stage.loss_fal(a, v).item() == pytest.approx(2 * one, rel=1e-14)

    def test_fal_vanishes_when_fooled(self, stage):
        saturating_discriminator(stage, 60.0)
        e = np.tile([1.0, 0, 0, 0], (3, 1))
        loss = stage.loss_fal(e, e).item()
        assert 0 < loss < 1e-6

    def test_tal_vanishes_for_perfect_discriminator(self, stage):
        saturating_discriminator(stage, 60.0)
        target = np.tile([1.0, 0, 0, 0], (3, 1))
        source = np.tile([-1.0, 0, 0, 0], (3, 1))
        loss = stage.loss_tal(target, source, source).item()
        assert 0 < loss < 1e-6

    @pytest.mark.parametrize("scale", [1e3, 1e6, 1e12])
    def test_finite_for_extreme_logits(self, stage, scale):
        saturating_discriminator(stage, scale)
        pos = np.tile([1.0, 0, 0, 0], (2, 1))
        neg = -pos
        for loss in (stage.loss_fal(neg, neg), stage.loss_tal(neg, pos, pos)):
            assert np.isfinite(loss.item())
            # log clamped at 1e-7 caps each term at -log(1e-7)
            assert loss.item() <= 3 * -math.log(1e-7) + 1e-9

    def test_adversarial_losses_nonnegative(self, stage, rng):
        for _ in range(20):
            e = [rng.normal(size=(3, 4)) * 5 for _ in range(3)]
            assert stage.loss_fal(e[0], e[1]).item() >= 0
            assert stage.loss_tal(*e).item() >= 0


class TestReconstructionAndClassification:
    def test_rl_zero(self, rng):
        x = {m: rng.normal(size=(3, 5)) for m in "avl"}
        assert loss_rl({m: Tensor(v) for m, v in x.items()}, x).item() == 0.0

    def test_rl_unit_offsets(self, rng):
        x = {m: rng.normal(size=(4, 5)) for m in "avl"}
        unit = np.eye(5)[rng.integers(0, 5, size=4)]
        recon = {m: Tensor(x[m] + unit) for m in "avl"}
        assert loss_rl(recon, x).item() == pytest.approx(3.0, abs=1e-12)

    @given(st.integers(0, 2**32 - 1))
    def test_rl_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        x = {m: rng.normal(size=(3, 4)) for m in "avl"}
        recon = {m: Tensor(rng.normal(size=(3, 4))) for m in "avl"}
        assert loss_rl(recon, x).item() >= 0

    def test_cl_zero(self):
        y = np.eye(3)[[0, 2, 1]]
        assert loss_cl({m: Tensor(y) for m in "avl"}, y).item() == 0.0

    def test_cl_half_half(self):
        y = np.array([[1.0, 0.0]])
        preds = {m: Tensor([[0.5, 0.5]]) for m in "avl"}
        assert loss_cl(preds, y).item() == pytest.approx(3 * math.sqrt(0.5), abs=1e-12)

    def test_cl_class_permutation(self, rng):
        y = np.eye(4)[rng.integers(0, 4, size=6)]
        preds = {m: rng.dirichlet(np.ones(4), size=6) for m in "avl"}
        perm = rng.permutation(4)
        base = loss_cl({m: Tensor(p) for m, p in preds.items()}, y).item()
        permuted = loss_cl({m: Tensor(p[:, perm]) for m, p in preds.items()}, y[:, perm]).item()
        assert permuted == pytest.approx(base, abs=1e-12)


class TestLossGradients:
    def test_all_losses_gradcheck(self, stage, batch):
        trainer = StageTrainer(stage)
        for fn in (
            lambda: trainer.phase1_loss(batch)[1],
            lambda: trainer.phase1_loss(batch)[2],
            lambda: stage.loss_tal(*[stage.encode(batch.x[m], m) for m in "lav"]),
            lambda: trainer.phase3_loss(batch)[0],
        ):
            assert gradcheck(fn, stage.parameters()) < 1e-4


class TestTrainStep:
    def test_phase_scopes(self, stage, batch):
        trainer = StageTrainer(stage, lr=1e-2)
        for phase, loss_fn in ((1, trainer.phase1_loss), (2, trainer.phase2_loss), (3, trainer.phase3_loss)):
            before = snapshot(stage)
            trainer._update(phase, loss_fn(batch)[0], {})
            declared = names_of(stage, trainer.phase_params(phase))
            assert changed(before, snapshot(stage)) == declared

    def test_phase1_leaves_discriminator(self, stage, batch):
        trainer = StageTrainer(stage)
        before = stage.discriminator.state_dict()
        trainer._update(1, trainer.phase1_loss(batch)[0], {})
        after = stage.discriminator.state_dict()
        assert all(before[k].tobytes() == after[k].tobytes() for k in before)

    def test_phase2_leaves_decoders(self, stage, batch):
        trainer = StageTrainer(stage)
        trainer.train_step(batch)
        before = {m: stage.decoders[m].state_dict() for m in "avl"}
        trainer._update(2, trainer.phase2_loss(batch)[0], {})
        for m in "avl":
            after = stage.decoders[m].state_dict()
            assert all(before[m][k].tobytes() == after[k].tobytes() for k in after)

    def test_lambda_zero_is_pure_reconstruction(self, stage, batch):
        trainer = StageTrainer(stage, lam=0.0)
        stage.zero_grad()
        trainer.phase1_loss(batch)[0].backward()
        mixed = [p.grad.copy() for p in stage.group("encoders")]
        stage.zero_grad()
        trainer.phase1_loss(batch)[2].backward()
        pure = [p.grad.copy() for p in stage.group("encoders")]
        for a, b in zip(mixed, pure):
            np.testing.assert_array_equal(a, b)

    def test_no_adv_skips_adversarial(self, stage, batch):
        trainer = StageTrainer(stage, no_adv=True)
        before = stage.discriminator.state_dict()
        w = stage.w.item()
        for _ in range(3):
            lb = trainer.train_step(batch)
            assert lb.fal is None and lb.tal is None
        after = stage.discriminator.state_dict()
        assert all(before[k].tobytes() == after[k].tobytes() for k in before)
        assert stage.w.item() == w

    def test_ablation_groups(self):
        assert phase_groups(2, no_adv=True) == ()
        assert phase_groups(3, no_classifier=True) == ()
        assert "decoders" not in phase_groups(1, no_decoder=True)
        assert "w" not in phase_groups(1, no_adv=True)

    def test_no_decoder_touches_source_encoders_only(self, stage, batch):
        trainer = StageTrainer(stage, no_decoder=True)
        names = names_of(stage, trainer.phase_params(1))
        assert not any(n.startswith("decoders") for n in names)
        assert not any(n.startswith("encoders.l") for n in names)
        assert any(n.startswith("encoders.a") for n in names)

    def test_w_stays_clamped(self, stage, batch):
        trainer = StageTrainer(stage, lr=0.5)
        for _ in range(40):
            trainer.train_step(batch)
            assert W_MIN <= stage.w.item() <= W_MAX
        assert stage.w.item() == W_MIN

    def test_breakdown_total(self, stage, batch):
        lb = StageTrainer(stage, lam=0.3).train_step(batch)
        assert lb.total == pytest.approx(0.3 * lb.fal + 0.7 * lb.rl + 0.5 * lb.tal + lb.cl)
        assert lb.rl >= 0 and lb.cl >= 0 and lb.fal >= 0 and lb.tal >= 0

    def test_nan_aborts_with_breakdown(self, stage, batch):
        batch.x["a"][0, 0] = np.nan
        with pytest.raises(DivergenceError, match="phase 1"):
            StageTrainer(stage).train_step(batch)

    def test_lambda_range(self, stage):
        with pytest.raises(ValueError):
            StageTrainer(stage, lam=1.5)

    def test_batch_order_invariance(self, stage, rng):
        b = random_batch(rng, batch=7)
        perm = rng.permutation(7)
        shuffled = random_batch(rng, batch=7)
        shuffled.x = {m: b.x[m][perm] for m in "avl"}
        shuffled.y = b.y[perm]
        trainer = StageTrainer(stage)
        for fn in (trainer.phase1_loss, trainer.phase2_loss, trainer.phase3_loss):
            first = [t.item() for t in fn(b) if t is not None]
            second = [t.item() for t in fn(shuffled) if t is not None]
            np.testing.assert_allclose(first, second, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-1e6, 1e6), st.integers(0, 1000))
    def test_losses_finite_for_any_finite_input(self, scale, seed):
        rng = np.random.default_rng(seed)
        stage = EmbeddingStage(6, 4, 3, rng=rng)
        b = random_batch(rng)
        b.x = {m: v * scale for m, v in b.x.items()}
        trainer = StageTrainer(stage)
        for fn in (trainer.phase1_loss, trainer.phase2_loss, trainer.phase3_loss):
            for t in fn(b):
                if t is not None:
                    assert np.isfinite(t.item())


class TestTrainedStage:
    def test_reconstruction_improves(self):
        from argf.data import SyntheticSpec, batches, generate_synthetic, make_batch

        bundle = generate_synthetic(
            SyntheticSpec(num_classes=4, dim=6, separation=1.0, noise=(0.05,) * 3, count=400, seed=0)
        )
        stage = EmbeddingStage(6, 6, 4, rng=np.random.default_rng(0))
        trainer = StageTrainer(stage, lr=1e-2, lam=0.5)
        test = make_batch(bundle, bundle.indices("test"))

        def recon_error():
            emb = stage.encode_all(test.x)
            return loss_rl({m: stage.decode(emb[m], m) for m in "avl"}, test.x).item()

        initial = recon_error()
        for epoch in range(30):
            for batch in batches(bundle, "train", 32, seed=(0, epoch)):
                trainer.train_step(batch)
        assert recon_error() < 0.2 * initial
