"""Network architecture, pooling, loss heads, and saddle-point gradient plumbing."""

import numpy as np
import pytest

from danse import autodiff as ad
from danse import nn
from danse.autodiff import Tape, Tensor
from danse.model import (
    ExtractorConfig,
    SpeakerNet,
    am_softmax_loss,
    bce_loss,
    cross_entropy,
)

TINY = ExtractorConfig(
    feature_dim=4,
    block_counts=(1, 1, 1, 1),
    channel_widths=(4, 4, 8, 8),
    embedding_dim=8,
    fc_hidden_dim=8,
    attention_dim=4,
)


def tiny_net(num_speakers=3, seed=0):
    return SpeakerNet(num_speakers, TINY, classifier_hidden=8, discriminator_hidden=8, seed=seed)


def random_chunks(rng, n, feature_dim=4, t=40):
    return [rng.normal(size=(feature_dim, int(t))) for _ in range(n)]


class TestArchitecture:
    def test_default_layer_count(self):
        cfg = ExtractorConfig()
        assert 3 * sum(cfg.block_counts) == 48
        assert cfg.named_layer_count == 52

    def test_pooled_length_is_ceil_t_over_8(self):
        cfg = TINY
        net = tiny_net()
        rng = np.random.default_rng(0)
        for t in (32, 33, 40, 63, 64, 100):
            maps = net.extractor.feature_maps(random_chunks(rng, 1, t=t), "train")
            assert maps[0].shape == (cfg.pooled_channels, -(-t // 8))

    def test_channel_count_independent_of_length(self):
        net = tiny_net()
        rng = np.random.default_rng(1)
        a = net.extractor.feature_maps(random_chunks(rng, 1, t=40), "train")[0]
        b = net.extractor.feature_maps(random_chunks(rng, 1, t=80), "train")[0]
        assert a.shape[0] == b.shape[0] == TINY.pooled_channels

    def test_too_short_input_names_minimum(self):
        net = tiny_net()
        rng = np.random.default_rng(2)
        with pytest.raises(ValueError, match="minimum is 32"):
            net.extractor.feature_maps(random_chunks(rng, 1, t=10), "train")

    def test_wrong_feature_dim_rejected(self):
        net = tiny_net()
        rng = np.random.default_rng(3)
        with pytest.raises(ValueError, match="F=4"):
            net.extractor.feature_maps([rng.normal(size=(5, 40))], "train")

    def test_embedding_shape(self):
        net = tiny_net()
        rng = np.random.default_rng(4)
        emb = net.embed_sequences(random_chunks(rng, 3), "train")
        assert emb.shape == (3, TINY.embedding_dim)

    def test_zero_fc2_gives_zero_embedding(self):
        net = tiny_net()
        net.extractor.fc2.weight.data[:] = 0.0
        net.extractor.fc2.bias.data[:] = 0.0
        rng = np.random.default_rng(5)
        emb = net.embed_sequences(random_chunks(rng, 2), "train")
        np.testing.assert_array_equal(emb.data, np.zeros((2, 8)))

    def test_eval_forward_is_deterministic(self):
        net = tiny_net()
        rng = np.random.default_rng(6)
        chunks = random_chunks(rng, 2)
        net.embed_sequences(chunks, "train")  # populate running stats
        a = net.embed_sequences(chunks, "eval").data
        b = net.embed_sequences(chunks, "eval").data
        assert a.tobytes() == b.tobytes()

    def test_eval_before_training_raises(self):
        net = tiny_net()
        rng = np.random.default_rng(7)
        with pytest.raises(RuntimeError, match="running statistics"):
            net.embed_sequences(random_chunks(rng, 1), "eval")

    def test_parameter_partitions_disjoint_and_exhaustive(self):
        net = tiny_net()
        f, y, d = net.params_f(), net.params_y(), net.params_d()
        names = list(f) + list(y) + list(d)
        assert len(names) == len(set(names))
        assert set(names) == set(net.all_params())
        ids = [id(t) for t in list(f.values()) + list(y.values()) + list(d.values())]
        assert len(ids) == len(set(ids))


class TestBatchNorm:
    def test_constant_input_returns_beta(self):
        bn = nn.BatchNorm1d(1)
        bn.beta.data[:] = 0.5
        x = Tensor(np.full((1, 6), 3.25))
        out = bn.forward_time(x, "train")
        assert np.all(np.abs(out.data - 0.5) <= np.sqrt(bn.eps))

    def test_two_value_batch_normalizes_to_unit(self):
        # Batch {1, 3}: mean 2, biased variance 1 -> {-1, +1} with eps = 0.
        gamma = Tensor(np.ones(1), requires_grad=True)
        beta = Tensor(np.zeros(1), requires_grad=True)
        x = Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1))
        out = nn.batchnorm1d(x, gamma, beta, eps=0.0, mode="train")
        np.testing.assert_allclose(out.data.reshape(-1), [-1.0, 1.0], atol=1e-15)

    def test_train_output_is_normalized(self):
        rng = np.random.default_rng(8)
        bn = nn.BatchNorm1d(3, eps=1e-12)
        x = Tensor(rng.normal(loc=5.0, scale=2.0, size=(3, 200)))
        out = bn.forward_time(x, "train").data
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-9)
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-6)

    def test_running_stats_momentum(self):
        bn = nn.BatchNorm1d(1, momentum=0.1)
        x = Tensor(np.array([[2.0, 2.0, 2.0, 2.0]]))
        bn.forward_time(x, "train")
        np.testing.assert_allclose(bn.running_mean, 0.9 * 0.0 + 0.1 * 2.0)
        np.testing.assert_allclose(bn.running_var, 0.9 * 1.0 + 0.1 * 0.0)

    def test_eval_uses_running_stats(self):
        bn = nn.BatchNorm1d(1, eps=0.0)
        bn.running_mean = np.array([1.0])
        bn.running_var = np.array([4.0])
        bn.ready = True
        out = bn.forward_time(Tensor(np.array([[3.0]])), "eval")
        np.testing.assert_allclose(out.data, [[1.0]])

    def test_rank3_batch_and_time_axes_pooled(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(4, 3, 5))
        out = nn.batchnorm1d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), 1e-12, "train")
        np.testing.assert_allclose(out.data.mean(axis=(0, 2)), 0.0, atol=1e-9)

    def test_bad_mode_rejected(self):
        bn = nn.BatchNorm1d(1)
        with pytest.raises(ValueError, match="mode"):
            bn.forward_time(Tensor(np.ones((1, 2))), "test")


class TestAttention:
    def test_scalar_example(self):
        # nF = 1, d_a = 1, W = 1, b = 0, v = 1, k = 0, h = (0, 1):
        # scores are (tanh 0, tanh 1) and the weights their softmax.
        pool = nn.AttentionPool(1, 1, rng=np.random.default_rng(0))
        pool.w.data[:] = 1.0
        pool.b.data[:] = 0.0
        pool.v.data[:] = 1.0
        pool.k.data[...] = 0.0
        alpha = pool.weights(Tensor(np.array([[0.0, 1.0]])))
        want = np.exp([0.0, np.tanh(1.0)])
        want /= want.sum()
        np.testing.assert_allclose(alpha.data, want, rtol=1e-12)
        np.testing.assert_allclose(alpha.data, [0.31830026, 0.68169974], atol=1e-8)

    def test_weights_sum_to_one(self):
        rng = np.random.default_rng(10)
        pool = nn.AttentionPool(6, 4, rng=rng)
        alpha = pool.weights(Tensor(rng.normal(size=(6, 9))))
        assert alpha.shape == (9,)
        np.testing.assert_allclose(alpha.data.sum(), 1.0, atol=1e-12)

    def test_one_hot_weights_select_frame(self):
        rng = np.random.default_rng(11)
        pool = nn.AttentionPool(3, 2, var_floor=1e-8, rng=rng)
        h = rng.normal(size=(3, 5))
        alpha = Tensor(np.array([0.0, 0.0, 1.0, 0.0, 0.0]))
        stats = pool.stats(Tensor(h), alpha).data
        np.testing.assert_allclose(stats[:3], h[:, 2], rtol=1e-12)
        np.testing.assert_allclose(stats[3:], np.sqrt(1e-8), rtol=1e-9)

    def test_identical_frames_hit_variance_floor(self):
        rng = np.random.default_rng(12)
        pool = nn.AttentionPool(2, 2, var_floor=1e-8, rng=rng)
        col = rng.normal(size=(2, 1))
        h = Tensor(np.repeat(col, 4, axis=1))
        stats = pool(h).data
        np.testing.assert_allclose(stats[:2], col[:, 0], rtol=1e-12)
        np.testing.assert_allclose(stats[2:], np.sqrt(1e-8), rtol=1e-9)

    def test_half_half_example(self):
        # alpha = (1/2, 1/2) on h = (0, 2): mean 1, sd sqrt(2 - 1) = 1.
        pool = nn.AttentionPool(1, 1, var_floor=1e-8, rng=np.random.default_rng(1))
        stats = pool.stats(Tensor(np.array([[0.0, 2.0]])), Tensor(np.array([0.5, 0.5]))).data
        np.testing.assert_allclose(stats, [1.0, 1.0], rtol=1e-12)

    def test_pooled_vector_length(self):
        rng = np.random.default_rng(13)
        pool = nn.AttentionPool(5, 3, rng=rng)
        out = pool(Tensor(rng.normal(size=(5, 7))))
        assert out.shape == (10,)


class TestAmSoftmax:
    def test_two_class_example(self):
        # cos(true) = 0.9, cos(other) = 0.1, m = 0.6, s = 30:
        # logits (9, 3), loss = log(1 + exp(-6)).
        f = Tensor(np.array([[1.0, 0.0]]))
        w = Tensor(np.array([[0.9, 0.1], [np.sqrt(1 - 0.81), np.sqrt(1 - 0.01)]]))
        loss = am_softmax_loss(f, np.array([0]), w, margin=0.6, scale=30.0)
        np.testing.assert_allclose(loss.item(), np.log1p(np.exp(-6.0)), rtol=1e-10)
        assert abs(loss.item() - 0.0024756851) < 1e-9

    def test_single_class_loss_is_zero(self):
        rng = np.random.default_rng(14)
        f = Tensor(rng.normal(size=(4, 6)))
        w = Tensor(rng.normal(size=(6, 1)))
        loss = am_softmax_loss(f, np.zeros(4, dtype=int), w)
        np.testing.assert_allclose(loss.item(), 0.0, atol=1e-15)

    def test_zero_margin_unit_scale_is_plain_ce_on_cosines(self):
        rng = np.random.default_rng(15)
        f = rng.normal(size=(5, 6))
        w = rng.normal(size=(6, 4))
        labels = rng.integers(0, 4, size=5)
        loss = am_softmax_loss(Tensor(f), labels, Tensor(w), margin=0.0, scale=1.0)
        fhat = f / np.linalg.norm(f, axis=1, keepdims=True)
        what = w / np.linalg.norm(w, axis=0, keepdims=True)
        cos = fhat @ what
        ref = cross_entropy(Tensor(cos), labels)
        assert abs(loss.item() - ref.item()) <= 1e-12

    def test_speaker_permutation_invariance(self):
        rng = np.random.default_rng(16)
        f = rng.normal(size=(5, 6))
        w = rng.normal(size=(6, 4))
        labels = rng.integers(0, 4, size=5)
        perm = rng.permutation(4)
        loss_a = am_softmax_loss(Tensor(f), labels, Tensor(w))
        loss_b = am_softmax_loss(Tensor(f), perm[labels], Tensor(w[:, np.argsort(perm)]))
        np.testing.assert_allclose(loss_a.item(), loss_b.item(), rtol=1e-12)

    def test_margin_raises_loss(self):
        rng = np.random.default_rng(17)
        f = Tensor(rng.normal(size=(6, 5)))
        w = Tensor(rng.normal(size=(5, 3)))
        labels = rng.integers(0, 3, size=6)
        plain = am_softmax_loss(f, labels, w, margin=0.0, scale=30.0)
        margined = am_softmax_loss(f, labels, w, margin=0.6, scale=30.0)
        assert margined.item() > plain.item()

    def test_degenerate_feature_rejected(self):
        f = Tensor(np.zeros((1, 4)))
        w = Tensor(np.eye(4))
        with pytest.raises(ValueError, match="norm"):
            am_softmax_loss(f, np.array([0]), w)

    def test_bad_label_rejected(self):
        rng = np.random.default_rng(18)
        f = Tensor(rng.normal(size=(2, 4)))
        w = Tensor(rng.normal(size=(4, 3)))
        with pytest.raises(ValueError, match="labels"):
            am_softmax_loss(f, np.array([0, 3]), w)


class TestBceLoss:
    def test_half_is_log2(self):
        p = Tensor(np.full(4, 0.5))
        loss = bce_loss(p, np.array([0.0, 1.0, 1.0, 0.0]))
        np.testing.assert_allclose(loss.item(), np.log(2.0), rtol=1e-12)

    def test_sigmoid_30_limit(self):
        z = np.array([30.0, -30.0])
        p = Tensor(1.0 / (1.0 + np.exp(-z)))
        loss = bce_loss(p, np.array([1.0, 0.0]))
        assert loss.item() < 1e-12

    def test_point_nine_example(self):
        loss = bce_loss(Tensor(np.array([0.9])), np.array([1.0]))
        np.testing.assert_allclose(loss.item(), 0.10536051565782628, rtol=1e-10)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="inside"):
            bce_loss(Tensor(np.array([0.0, 0.5])), np.array([0.0, 1.0]))


class TestDiscriminator:
    def test_zeroed_output_layer_gives_half(self):
        net = tiny_net()
        net.disc_out.weight.data[:] = 0.0
        net.disc_out.bias.data[:] = 0.0
        rng = np.random.default_rng(19)
        emb = Tensor(rng.normal(size=(4, 8)))
        p = net.discriminate(emb, lam=3.0, mode="train")
        np.testing.assert_allclose(p.data, 0.5, atol=1e-15)

    def test_probabilities_in_unit_interval(self):
        net = tiny_net()
        rng = np.random.default_rng(20)
        p = net.discriminate(Tensor(rng.normal(size=(6, 8))), 3.0, "train")
        assert np.all(p.data > 0.0) and np.all(p.data < 1.0)

    def test_reversal_scales_extractor_gradient(self):
        # d(BCE o GRL)/d(embedding) must equal -lam times the un-reversed one.
        net = tiny_net()
        rng = np.random.default_rng(21)
        embval = rng.normal(size=(4, 8))
        d = np.array([0.0, 0.0, 1.0, 1.0])
        lam = 3.0

        def grad_with(lam_value):
            emb = Tensor(embval, requires_grad=True)
            with Tape() as tape:
                z = net.domain_logits(emb, lam_value, "train")
                tape.backward(ad.bce_with_logits(z, d))
            return emb.grad.copy()

        reversed_grad = grad_with(lam)
        raw_grad = grad_with(-1.0)  # -(-1) = +1: plain gradient
        np.testing.assert_allclose(reversed_grad, -lam * raw_grad, atol=1e-10)


class TestSaddlePointGradients:
    """The combined tape must realize the three-way update decomposition."""

    def _losses_on_one_tape(self, net, src, labels, tgt, lam):
        src_emb = net.embed_sequences(src, "train")
        tgt_emb = net.embed_sequences(tgt, "train")
        l_y = net.classification_loss(src_emb, labels, "train")
        emb_all = ad.concat([src_emb, tgt_emb], axis=0)
        z = net.domain_logits(emb_all, lam, "train")
        d = np.concatenate([np.zeros(len(src)), np.ones(len(tgt))])
        l_d = ad.bce_with_logits(z, d)
        return l_y, l_d

    def test_extractor_gradient_combines_both_losses(self):
        net = tiny_net(seed=3)
        rng = np.random.default_rng(22)
        src = random_chunks(rng, 3)
        tgt = random_chunks(rng, 3)
        labels = np.array([0, 1, 2])
        lam = 3.0
        params = net.params_f()

        def collect():
            return {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

        def clear_all():
            for p in net.all_params().values():
                p.zero_grad()

        # Combined tape through gradient reversal.
        clear_all()
        with Tape() as tape:
            l_y, l_d = self._losses_on_one_tape(net, src, labels, tgt, lam)
            tape.backward(ad.add(l_y, l_d))
        combined = collect()

        # Separate tapes for each term.
        clear_all()
        with Tape() as tape:
            src_emb = net.embed_sequences(src, "train")
            tape.backward(net.classification_loss(src_emb, labels, "train"))
        g_y = collect()

        clear_all()
        with Tape() as tape:
            src_emb = net.embed_sequences(src, "train")
            tgt_emb = net.embed_sequences(tgt, "train")
            emb_all = ad.concat([src_emb, tgt_emb], axis=0)
            z = net.domain_logits(emb_all, -1.0, "train")  # un-reversed
            d = np.concatenate([np.zeros(3), np.ones(3)])
            tape.backward(ad.bce_with_logits(z, d))
        g_d = collect()

        for name in params:
            np.testing.assert_allclose(
                combined[name], g_y[name] - lam * g_d[name], atol=1e-10,
                err_msg=f"composite gradient mismatch for {name}",
            )

    def test_classifier_gradient_sees_only_classification(self):
        net = tiny_net(seed=4)
        rng = np.random.default_rng(23)
        src = random_chunks(rng, 3)
        tgt = random_chunks(rng, 3)
        labels = np.array([0, 1, 2])
        for p in net.all_params().values():
            p.zero_grad()
        with Tape() as tape:
            l_y, l_d = self._losses_on_one_tape(net, src, labels, tgt, 3.0)
            tape.backward(ad.add(l_y, l_d))
        combined = {k: p.grad.copy() for k, p in net.params_y().items()}
        for p in net.all_params().values():
            p.zero_grad()
        with Tape() as tape:
            src_emb = net.embed_sequences(src, "train")
            tape.backward(net.classification_loss(src_emb, labels, "train"))
        solo = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in net.params_y().items()}
        for name in combined:
            np.testing.assert_allclose(combined[name], solo[name], atol=1e-12)

    def test_discriminator_gradient_unreversed(self):
        # theta_d sits after the reversal layer, so its gradient is the
        # plain descent direction on the domain loss.
        net = tiny_net(seed=5)
        rng = np.random.default_rng(24)
        embval = rng.normal(size=(4, 8))
        d = np.array([0.0, 1.0, 0.0, 1.0])

        def disc_grads(lam):
            for p in net.params_d().values():
                p.zero_grad()
            with Tape() as tape:
                z = net.domain_logits(Tensor(embval), lam, "train")
                tape.backward(ad.bce_with_logits(z, d))
            return {k: p.grad.copy() for k, p in net.params_d().items()}

        with_reversal = disc_grads(3.0)
        without = disc_grads(-1.0)
        for name in with_reversal:
            np.testing.assert_allclose(with_reversal[name], without[name], atol=1e-15)


class TestEndToEndGradients:
    def test_margin_loss_grad_check_subset(self):
        # Representative parameters from every layer family; the full
        # acceptance run covers every parameter.
        net = tiny_net(seed=6)
        rng = np.random.default_rng(25)
        chunks = random_chunks(rng, 3)
        labels = np.array([0, 1, 2])

        def fn():
            emb = net.embed_sequences(chunks, "train")
            return net.classification_loss(emb, labels, "train")

        subset = [
            net.extractor.stem.weight,
            net.extractor.stages[1][0].conv2.weight,
            net.extractor.stages[2][0].bn2.gamma,
            net.extractor.stages[3][0].proj.weight,
            net.extractor.attention.w,
            net.extractor.attention.k,
            net.extractor.fc1.weight,
            net.extractor.fc2.bias,
            net.cls_hidden.weight,
            net.cls_bn.beta,
            net.margin_weight,
        ]
        assert ad.grad_check(fn, subset) < 1e-4

    def test_full_objective_grad_check_subset(self):
        net = tiny_net(seed=7)
        rng = np.random.default_rng(26)
        src = random_chunks(rng, 2)
        tgt = random_chunks(rng, 2)
        labels = np.array([0, 1])
        d = np.array([0.0, 0.0, 1.0, 1.0])
        lam = 3.0

        def objective():
            # Plain composition of E = L_y - lam * L_d; the reversal layer
            # must produce the same extractor gradient (checked above).
            src_emb = net.embed_sequences(src, "train")
            tgt_emb = net.embed_sequences(tgt, "train")
            l_y = net.classification_loss(src_emb, labels, "train")
            emb_all = ad.concat([src_emb, tgt_emb], axis=0)
            z = net.domain_logits(emb_all, -1.0, "train")
            l_d = ad.bce_with_logits(z, d)
            return ad.sub(l_y, ad.mul(l_d, Tensor(lam)))

        subset = [
            net.extractor.stem.weight,
            net.extractor.stages[0][0].conv3.weight,
            net.extractor.attention.v,
            net.extractor.fc2.weight,
            net.cls_hidden.bias,
            net.margin_weight,
            net.disc_fc1.weight,
            net.disc_bn2.gamma,
            net.disc_out.bias,
        ]
        assert ad.grad_check(objective, subset) < 1e-4


class TestStateDict:
    def test_roundtrip_restores_everything(self):
        net = tiny_net(seed=8)
        rng = np.random.default_rng(27)
        chunks = random_chunks(rng, 2)
        net.embed_sequences(chunks, "train")
        state = net.state_dict()
        other = tiny_net(seed=99)
        other.load_state_dict(state)
        a = net.embed_sequences(chunks, "eval").data
        b = other.embed_sequences(chunks, "eval").data
        assert a.tobytes() == b.tobytes()

    def test_missing_tensor_rejected(self):
        net = tiny_net()
        state = net.state_dict()
        state.pop("extractor.stem.weight")
        with pytest.raises(KeyError, match="stem.weight"):
            tiny_net().load_state_dict(state)

    def test_shape_mismatch_rejected(self):
        net = tiny_net()
        state = net.state_dict()
        state["extractor.stem.weight"] = np.zeros((1, 1, 1))
        with pytest.raises(ValueError, match="shape"):
            tiny_net().load_state_dict(state)

    def test_classifier_reinit_changes_only_theta_y(self):
        net = tiny_net(seed=9)
        before_f = {k: v.data.copy() for k, v in net.params_f().items()}
        before_y = {k: v.data.copy() for k, v in net.params_y().items()}
        net.reinit_classifier(seed=123)
        for k, v in net.params_f().items():
            assert np.array_equal(before_f[k], v.data)
        changed = any(
            not np.array_equal(before_y[k], v.data)
            for k, v in net.params_y().items()
            if v.data.size and k != "classifier.hidden_bn.gamma" and k != "classifier.hidden_bn.beta"
        )
        assert changed
