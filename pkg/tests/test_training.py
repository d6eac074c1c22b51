import numpy as np
import pytest

from wstal import autodiff as ad
from wstal.autodiff import Tensor, TrainingError, backward
from wstal.config import RunConfig
from wstal.data import SyntheticSpec, generate_synthetic
from wstal.memory import MemoryBank
from wstal.training import (
    Model,
    cross_entropy,
    infer_video,
    load_checkpoint,
    loss_att,
    loss_cls,
    loss_kd,
    pseudo_tcams,
    save_checkpoint,
    total_loss,
    train,
)
from wstal.saliency import SaliencyPartition
from gradcheck import max_rel_err, numeric_gradient


def tiny_config(**overrides):
    base = dict(epochs=3, batch_size=4, learning_rate=1e-3, memory_slots=2, seed=1)
    base.update(overrides)
    return RunConfig(**base).validate()


def tiny_dataset(seed=5):
    return generate_synthetic(
        SyntheticSpec(
            num_classes=2,
            feature_dim=8,
            videos_per_class=4,
            test_videos_per_class=2,
            snippets_range=(14, 18),
            segments_range=(1, 2),
            boundary_contrast=2.0,
            noise_sigma=0.25,
            seed=seed,
        )
    )


class TestClassificationLoss:
    def test_hand_cross_entropy(self):
        logits = Tensor(np.log([0.7, 0.2, 0.1]))
        val = cross_entropy(logits, np.array([1.0, 0.0, 0.0]))
        assert val.item() == pytest.approx(-np.log(0.7), abs=1e-12)

    def test_perfect_prediction_hits_label_entropy(self):
        target = np.array([0.5, 0.0, 0.5])
        logits = Tensor(np.log(np.maximum(target, 1e-30)))
        entropy = -np.sum(target[target > 0] * np.log(target[target > 0]))
        assert cross_entropy(logits, target).item() == pytest.approx(entropy, abs=1e-9)

    def test_theta_zero_leaves_only_ca_term(self):
        rng = np.random.default_rng(0)
        mil, ca = Tensor(rng.standard_normal(3)), Tensor(rng.standard_normal(3))
        label = np.array([1, 0])
        full = loss_cls(mil, ca, label, theta_mil=0.0)
        ca_term = cross_entropy(ca, np.array([0.5, 0.0, 0.5]))
        assert full.item() == pytest.approx(ca_term.item(), abs=1e-12)

    def test_background_bits_enter_targets(self):
        mil, ca = Tensor(np.zeros(3)), Tensor(np.zeros(3))
        label = np.array([1, 0])
        # uniform logits: CE = -sum(y * log(1/3)) = log 3 regardless of y
        val = loss_cls(mil, ca, label, theta_mil=1.0, mil_bg_bit=0.0, ca_bg_bit=1.0)
        assert val.item() == pytest.approx(2 * np.log(3.0), abs=1e-12)

    def test_all_zero_label_rejected(self):
        with pytest.raises(ValueError, match="label"):
            loss_cls(Tensor(np.zeros(3)), Tensor(np.zeros(3)), np.zeros(2), 0.2)


class TestDistillationLoss:
    def test_zero_when_target_equals_softmax(self):
        rng = np.random.default_rng(1)
        logits = rng.standard_normal((4, 3))
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        target = z / z.sum(axis=1, keepdims=True)
        assert loss_kd(Tensor(logits), target).item() == pytest.approx(0.0, abs=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            logits = rng.standard_normal((5, 4))
            target = rng.dirichlet(np.ones(4), size=5)
            assert loss_kd(Tensor(logits), target).item() >= -1e-12

    def test_hand_value_ln2(self):
        target = np.array([[1.0, 0.0], [0.0, 1.0]])
        logits = Tensor(np.zeros((2, 2)))
        assert loss_kd(logits, target).item() == pytest.approx(np.log(2.0), abs=1e-12)

    def test_gradient_flows_into_logits_only(self):
        logits = Tensor(np.random.default_rng(3).standard_normal((3, 3)), requires_grad=True)
        target = np.full((3, 3), 1 / 3)
        backward(loss_kd(logits, target))
        assert logits.grad is not None


class TestAttentionLoss:
    def test_constant_attention_is_zero(self):
        assert loss_att(Tensor(np.full(16, 0.37))).item() == pytest.approx(0.0, abs=1e-12)

    def test_hand_case(self):
        val = loss_att(Tensor(np.array([0.9, 0.1, 0.5, 0.5])))
        assert val.item() == pytest.approx(-0.8, abs=1e-12)

    def test_perfect_separation_approaches_minus_one(self):
        lam = np.concatenate([np.full(8, 1.0 - 1e-9), np.full(8, 1e-9)])
        assert loss_att(Tensor(lam)).item() == pytest.approx(-1.0, abs=1e-6)


class TestTotalLoss:
    def test_degenerate_weights(self):
        l_cls = Tensor(np.asarray(1.3))
        zero = Tensor(np.asarray(0.0))
        out = total_loss(l_cls, zero, Tensor(np.asarray(0.9)), lambda_att=0.0)
        assert out.item() == pytest.approx(1.3, abs=1e-15)

    def test_all_zero(self):
        zero = lambda: Tensor(np.asarray(0.0))
        assert total_loss(zero(), zero(), zero(), 0.1).item() == 0.0

    def test_decomposition(self):
        rng = np.random.default_rng(4)
        a, b, c = (float(x) for x in rng.standard_normal(3))
        out = total_loss(Tensor(np.asarray(a)), Tensor(np.asarray(b)), Tensor(np.asarray(c)), 0.1)
        assert out.item() == pytest.approx(a + b + 0.1 * c, abs=1e-12)

    def test_non_finite_part_named(self):
        bad = Tensor(np.asarray(1.0))
        bad.data = np.asarray(np.inf)
        with pytest.raises(TrainingError, match="kd"):
            total_loss(Tensor(np.asarray(0.0)), bad, Tensor(np.asarray(0.0)), 0.1)


class TestPseudoLabels:
    def test_equal_branches_collapse_to_one(self):
        model = Model(8, 2, tiny_config(), np.random.default_rng(0))
        f = Tensor(np.random.default_rng(1).standard_normal((5, 8)))
        pseudo = pseudo_tcams(model.head, f, f)
        np.testing.assert_allclose(pseudo.target, pseudo.tcam_refined.data, atol=1e-12)

    def test_rows_sum_to_one(self):
        model = Model(8, 3, tiny_config(), np.random.default_rng(0))
        rng = np.random.default_rng(2)
        pseudo = pseudo_tcams(
            model.head, Tensor(rng.standard_normal((6, 8))), Tensor(rng.standard_normal((6, 8)))
        )
        np.testing.assert_allclose(pseudo.target.sum(axis=1), 1.0, atol=1e-6)

    def test_distillation_target_detached_from_refiner_params(self):
        """No gradient may reach parameters that only feed the pseudo target."""
        config = tiny_config()
        model = Model(8, 2, config, np.random.default_rng(0))
        rng = np.random.default_rng(3)
        features = rng.standard_normal((10, 8))
        partition = SaliencyPartition(b=np.array([0, 1] * 5, dtype=np.int8), K=5)
        for p in model.parameters():
            p.grad = None
        f, tcam_logits, _ = model.base_forward(features)
        refined = model.refine(f, partition)
        pseudo = pseudo_tcams(model.head, refined, None)
        backward(loss_kd(tcam_logits, pseudo.target))
        for unit in (model.unit_a, model.unit_b):
            for p in unit.parameters():
                assert p.grad is None or not p.grad.any(), p.name


@pytest.mark.parametrize("seed", range(2))
def test_full_composite_loss_gradient(seed):
    """Finite differences across every parameter of the joint loss.

    The pseudo target is computed once and frozen, matching how training
    treats it (a constant between steps).
    """
    config = tiny_config(seed=seed)
    model = Model(8, 2, config, np.random.default_rng(seed))
    rng = np.random.default_rng(50 + seed)
    features = rng.standard_normal((6, 8))
    label = np.array([1, 0])
    partition = SaliencyPartition(b=np.array([0, 1, 0, 1, 1, 0], dtype=np.int8), K=3)

    f, tcam_logits, _ = model.base_forward(features)
    refined = model.refine(f, partition)
    frozen_target = pseudo_tcams(model.head, refined, None).target

    def build():
        emb, logits, attention = model.base_forward(features)
        pooled_mil, pooled_ca = model.head.pooled_logits(logits, attention)
        l_cls = loss_cls(pooled_mil, pooled_ca, label, config.theta_mil)
        l_kd = loss_kd(logits, frozen_target)
        return total_loss(l_cls, l_kd, loss_att(attention), config.lambda_att)

    for p in model.parameters():
        p.grad = None
    backward(build())
    for p in model.parameters():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_gradient(lambda: float(build().data), p.data)
        assert max_rel_err(analytic, numeric) < 1e-3, p.name


class TestTrainLoop:
    def test_zero_epochs_keeps_initialization(self):
        ds = tiny_dataset()
        config = tiny_config(epochs=0)
        result = train(ds, config)
        fresh = Model(ds.feature_dim, ds.num_classes, config, np.random.default_rng(config.seed))
        for got, init in zip(result.model.parameters(), fresh.parameters()):
            np.testing.assert_array_equal(got.data, init.data)

    def test_fixed_seed_runs_are_bit_identical(self):
        ds = tiny_dataset()
        r1 = train(ds, tiny_config())
        r2 = train(ds, tiny_config())
        for p1, p2 in zip(r1.model.parameters(), r2.model.parameters()):
            assert np.array_equal(p1.data, p2.data), p1.name
        assert np.array_equal(r1.bank.features, r2.bank.features)
        for a, b in zip(r1.log, r2.log):
            assert a == b

    def test_log_decomposition(self):
        result = train(tiny_dataset(), tiny_config(epochs=4))
        assert len(result.log) == 4
        for row in result.log:
            total = row.loss_cls + row.loss_kd + row.loss_att_weighted
            assert total == pytest.approx(row.loss_total, abs=1e-9)

    def test_warmup_has_no_distillation(self):
        config = tiny_config(epochs=4)  # warmup = max(1, round(0.4)) = 1
        result = train(tiny_dataset(), config)
        assert result.log[0].loss_kd == 0.0
        assert any(row.loss_kd != 0.0 for row in result.log[1:])

    def test_base_only_never_distills_or_updates_memory(self):
        result = train(tiny_dataset(), tiny_config(modules="base", epochs=3))
        assert all(row.loss_kd == 0.0 for row in result.log)
        assert not result.bank.initialized.any()

    def test_memory_initialized_in_joint_phase(self):
        result = train(tiny_dataset(), tiny_config(epochs=3))
        assert result.bank.initialized.all()

    def test_eta_logged_in_joint_phase(self):
        result = train(tiny_dataset(), tiny_config(epochs=4, eta0=0.2))
        assert result.log[0].eta == 0.0
        assert result.log[1].eta == pytest.approx(0.2 * np.log(np.exp(1 / 4) + 1))


class TestInference:
    def test_activation_rows_are_distributions(self):
        ds = tiny_dataset()
        result = train(ds, tiny_config())
        for rec in ds.split("test"):
            out = infer_video(result.model, result.bank, rec, result.model.config)
            assert out.activation.shape == (rec.num_snippets, ds.num_classes + 1)
            np.testing.assert_allclose(out.activation.sum(axis=1), 1.0, atol=1e-6)

    def test_uninitialized_memory_falls_back(self):
        ds = tiny_dataset()
        config = tiny_config(epochs=0)
        model = Model(ds.feature_dim, ds.num_classes, config, np.random.default_rng(0))
        bank = MemoryBank.empty(ds.num_classes, config.memory_slots, ds.feature_dim)
        out = infer_video(model, bank, ds.records[0], config)
        assert np.isfinite(out.activation).all()


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        ds = tiny_dataset()
        config = tiny_config()
        result = train(ds, config)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, result.model, result.bank, config, ds.class_names)
        model, bank, loaded_config, class_names = load_checkpoint(path)
        assert class_names == ds.class_names
        assert loaded_config == config
        for p_orig, p_back in zip(result.model.parameters(), model.parameters()):
            assert p_orig.name == p_back.name
            np.testing.assert_array_equal(p_orig.data, p_back.data)
        np.testing.assert_array_equal(bank.features, result.bank.features)
        np.testing.assert_array_equal(bank.initialized, result.bank.initialized)

    def test_two_saves_byte_identical(self, tmp_path):
        ds = tiny_dataset()
        config = tiny_config()
        result = train(ds, config)
        save_checkpoint(tmp_path / "a.ckpt", result.model, result.bank, config, ds.class_names)
        save_checkpoint(tmp_path / "b.ckpt", result.model, result.bank, config, ds.class_names)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_rejects_garbage(self, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError, match="checkpoint"):
            load_checkpoint(tmp_path / "bad.ckpt")
