"""Encoder block mechanics and full-model forward behavior."""

import numpy as np
import pytest

import mmbert.autograd as ag
from mmbert.corpus import CorpusConfig, MultimodalSample, build_vocab, generate_base_corpus
from mmbert.encoder import ClassificationHead, EncoderBlock, MultiHeadAttention
from mmbert.errors import ConfigError, SequenceLengthError, ShapeError, VocabError
from mmbert.model import Capture, MMBertModel, ModelConfig


def make_block(d_model=8, n_heads=2, seed=0):
    return EncoderBlock(0, d_model, 16, n_heads, ("text", "speech", "vision"),
                        1e-12, np.random.default_rng(seed))


def x_of(shape, seed=1):
    return ag.Tensor(np.random.default_rng(seed).standard_normal(shape).astype(np.float32))


@pytest.fixture(scope="module")
def tiny_setup():
    ccfg = CorpusConfig(n_samples=60)
    vocab = build_vocab(ccfg, seed=5)
    corpus = generate_base_corpus(ccfg, 5, vocab)
    mcfg = ModelConfig(d_model=16, n_layers=2, n_heads=2, d_ff=24, max_total_len=64)
    model = MMBertModel(mcfg, vocab, seed=5)
    return vocab, corpus, mcfg, model


def bucket(corpus, n, count):
    picked = [s for s in corpus if len(s.token_ids) == n][:count]
    assert len(picked) == count
    return picked


class TestEncoderBlock:
    def test_residual_identity_with_zeroed_outputs(self):
        blk = make_block()
        blk.attn.wo.data[:] = 0.0
        blk.attn.bo.data[:] = 0.0
        for e in blk.moe.experts:
            e.w2.data[:] = 0.0
            e.b2.data[:] = 0.0
        x = x_of((5, 8))
        out = blk.forward(x, ffn_mode="moe")
        assert np.array_equal(out.data, x.data)
        out_single = blk.forward(x, ffn_mode=("single", 1))
        assert np.array_equal(out_single.data, x.data)

    def test_shape_preserved_across_lengths(self):
        blk = make_block()
        for L in (1, 2, 7, 64):
            assert blk.forward(x_of((L, 8))).data.shape == (L, 8)

    def test_single_token_attention_is_value_projection(self):
        attn = MultiHeadAttention(8, 2, np.random.default_rng(3))
        x = x_of((1, 8))
        cap = Capture()
        out = attn(x, capture=cap)
        assert np.allclose(cap.attention[0], 1.0, atol=1e-7)
        v = x.data @ attn.wv.data + attn.bv.data
        expected = v @ attn.wo.data + attn.bo.data
        assert np.allclose(out.data, expected, atol=1e-5)

    def test_attention_rows_stochastic(self):
        blk = make_block()
        cap = Capture()
        blk.forward(x_of((2, 9, 8)), capture=cap)
        sums = cap.attention[0].sum(axis=-1)
        assert np.allclose(sums, 1.0, atol=1e-6)

    def test_permutation_equivariance(self):
        blk = make_block(seed=7)
        x = x_of((6, 8), seed=2)
        perm = [3, 1, 0, 5, 4, 2]
        out = blk.forward(x).data
        out_perm = blk.forward(ag.Tensor(x.data[perm])).data
        assert np.allclose(out[perm], out_perm, atol=1e-5)

    def test_bad_ffn_mode(self):
        with pytest.raises(ValueError):
            make_block().forward(x_of((3, 8)), ffn_mode=("dense", 0))


class TestClassificationHead:
    def test_zero_everything_gives_zero_logits(self):
        head = ClassificationHead(8, 2, np.random.default_rng(0))
        logits = head(ag.Tensor(np.zeros((4, 8), dtype=np.float32)))
        assert np.allclose(logits.data, 0.0)

    def test_uniform_logits_cross_entropy_ln2(self):
        head = ClassificationHead(8, 2, np.random.default_rng(0))
        head.w_out.data[:] = 0.0
        logits = head(x_of((2, 5, 8)))
        loss = ag.cross_entropy(logits, np.array([0, 1]))
        assert abs(loss.item() - np.log(2.0)) < 1e-6

    def test_grad_reaches_pooling(self):
        head = ClassificationHead(8, 2, np.random.default_rng(1))
        loss = ag.cross_entropy(head(x_of((3, 6, 8))), np.array([1, 0, 1]))
        ag.backward(loss)
        assert head.w_pool.grad is not None and np.any(head.w_pool.grad != 0.0)

    def test_empty_sequence_raises(self):
        head = ClassificationHead(8, 2, np.random.default_rng(0))
        with pytest.raises(ValueError):
            head(ag.Tensor(np.zeros((0, 8), dtype=np.float32)))

    def test_batch_pooling_uses_first_position(self):
        head = ClassificationHead(4, 2, np.random.default_rng(2))
        x = np.zeros((2, 3, 4), dtype=np.float32)
        x[0, 0] = 1.0
        x[1, 0] = -1.0
        x[:, 1:] = 99.0  # later positions must not matter
        a, b = head(ag.Tensor(x)).data
        x2 = x.copy()
        x2[:, 1:] = -7.0
        a2, b2 = head(ag.Tensor(x2)).data
        assert np.array_equal(a, a2) and np.array_equal(b, b2)


class TestModelConfig:
    def test_head_divisibility(self):
        with pytest.raises(ConfigError):
            ModelConfig(d_model=10, n_heads=4)

    def test_expert_modality_match(self):
        with pytest.raises(ConfigError):
            ModelConfig(n_experts=2, modalities=("text", "speech", "vision"))
        cfg = ModelConfig(modalities=("text", "speech"))
        assert cfg.n_experts == 2

    def test_text_required(self):
        with pytest.raises(ConfigError):
            ModelConfig(modalities=("speech", "vision"))

    def test_unknown_modality(self):
        with pytest.raises(ConfigError):
            ModelConfig(modalities=("text", "smell"))


class TestModelForward:
    def test_logit_shape_and_gate_capture(self, tiny_setup):
        _, corpus, mcfg, model = tiny_setup
        batch = bucket(corpus, n=8, count=3)
        cap = Capture()
        logits = model.forward_batch(batch, capture=cap)
        assert logits.data.shape == (3, 2)
        assert len(cap.gates) == mcfg.n_layers
        assert cap.gates[0].gates.shape == (3 * 32, 3)  # n + 2n + n positions
        assert np.allclose(cap.gates[0].gates.sum(axis=1), 1.0, atol=1e-6)

    def test_modality_subsets_change_length(self, tiny_setup):
        _, corpus, _, model = tiny_setup
        batch = bucket(corpus, n=8, count=2)
        cap_ts = Capture()
        model.forward_batch(batch, active=("text", "speech"), capture=cap_ts)
        assert cap_ts.gates[0].gates.shape[0] == 2 * (8 + 16)
        cap_t = Capture()
        model.forward_batch(batch, active=("text",), ffn_mode=("single", 0), capture=cap_t)
        assert cap_t.gates == []

    def test_ragged_batch_rejected(self, tiny_setup):
        _, corpus, _, model = tiny_setup
        a = next(s for s in corpus if len(s.token_ids) == 8)
        b = next(s for s in corpus if len(s.token_ids) == 9)
        with pytest.raises(ShapeError):
            model.forward_batch([a, b])

    def test_empty_batch_rejected(self, tiny_setup):
        with pytest.raises(ValueError):
            tiny_setup[3].forward_batch([])

    def test_overlength_rejected(self, tiny_setup):
        vocab = tiny_setup[0]
        model = tiny_setup[3]
        long = MultimodalSample(0, list(range(20)), 0)
        with pytest.raises(SequenceLengthError):
            model.forward_batch([long])

    def test_unconfigured_modality_rejected(self, tiny_setup):
        vocab, corpus, _, _ = tiny_setup
        cfg = ModelConfig(d_model=16, n_heads=2, modalities=("text",))
        model = MMBertModel(cfg, vocab, seed=1)
        with pytest.raises(ConfigError):
            model.forward_batch(bucket(corpus, 8, 1), active=("text", "speech"))

    def test_vocab_error(self, tiny_setup):
        model = tiny_setup[3]
        bad = MultimodalSample(0, [0, 1, 250, 2, 3, 4], 0)
        with pytest.raises(VocabError):
            model.forward_batch([bad])

    def test_forward_determinism_across_instances(self, tiny_setup):
        vocab, corpus, mcfg, model = tiny_setup
        again = MMBertModel(mcfg, vocab, seed=5)
        other = MMBertModel(mcfg, vocab, seed=6)
        batch = bucket(corpus, 10, 4)
        a = model.forward_batch(batch).data
        b = again.forward_batch(batch).data
        c = other.forward_batch(batch).data
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_dropout_only_in_train_mode(self, tiny_setup):
        _, corpus, _, model = tiny_setup
        batch = bucket(corpus, 7, 2)
        e1 = model.forward_batch(batch).data
        e2 = model.forward_batch(batch).data
        t1 = model.forward_batch(batch, train=True).data
        t2 = model.forward_batch(batch, train=True).data
        assert np.array_equal(e1, e2)
        assert not np.array_equal(t1, t2)


class TestEmbedText:
    def test_empty_sequence(self, tiny_setup):
        model = tiny_setup[3]
        assert model.embed_text([]).data.shape == (0, 16)

    def test_positions_distinguish_repeats(self, tiny_setup):
        model = tiny_setup[3]
        out = model.embed_text([4, 4]).data
        assert not np.array_equal(out[0], out[1])

    def test_out_of_range(self, tiny_setup):
        with pytest.raises(VocabError):
            tiny_setup[3].embed_text([200])


class TestParameterRegistry:
    def test_registry_covers_expected_groups(self, tiny_setup):
        _, _, mcfg, model = tiny_setup
        names = set(model.params())
        assert "embed.word" in names and "embed.pos" in names
        for i in range(mcfg.n_layers):
            assert f"block{i}.attn.wq" in names
            assert f"block{i}.router.w" in names
            for tag in ("text", "speech", "vision"):
                assert f"block{i}.expert.{tag}.w1" in names
        assert {"head.pool.w", "head.out.w", "aligner.speech.w1", "aligner.vision.w1"} <= names

    def test_select_by_prefix(self, tiny_setup):
        model = tiny_setup[3]
        aligners = model.select("aligner.")
        assert len(aligners) == 8
        routers = model.select("block0.router", "block1.router")
        assert len(routers) == 4

    def test_registry_tensors_are_trainable_and_unique(self, tiny_setup):
        model = tiny_setup[3]
        tensors = list(model.params().values())
        assert all(t.requires_grad for t in tensors)
        assert len({id(t) for t in tensors}) == len(tensors)


class TestEndToEndGradients:
    def test_full_loss_gradcheck_tiny(self):
        from mmbert.moe import aux_loss, total_loss

        ccfg = CorpusConfig(n_samples=40)
        vocab = build_vocab(ccfg, seed=3)
        corpus = generate_base_corpus(ccfg, 3, vocab)
        mcfg = ModelConfig(d_model=8, n_layers=2, n_heads=2, d_ff=12,
                           dropout_rate=0.0, max_total_len=64)
        model = MMBertModel(mcfg, vocab, seed=3)
        rng = np.random.default_rng(0)
        for i in range(mcfg.n_layers):
            model.params()[f"block{i}.router.w"].data[:] = \
                rng.normal(0.0, 0.5, (8, 3)).astype(np.float32)

        batch = bucket(corpus, 6, 2)
        labels = np.array([s.label for s in batch])

        # freeze the argmax fractions of the balancing loss at their
        # unperturbed values: backward differentiates at constant p, so the
        # numeric oracle must probe the same function
        warm = Capture()
        model.forward_batch(batch, capture=warm)
        p_frozen = [np.bincount(r.argmax, minlength=3) / len(r.argmax)
                    for r in warm.gates]

        def loss_fn():
            cap = Capture()
            logits = model.forward_batch(batch, capture=cap)
            ce = ag.cross_entropy(logits, labels)
            return total_loss(ce, aux_loss(cap.gate_tensors, p_override=p_frozen),
                              alpha=0.01)

        # composite depth makes h=1e-3 truncation-limited (error shrinks as
        # h^2); a smaller step keeps the check well inside tolerance
        err = ag.finite_diff_check(loss_fn, model.params().values(),
                                   step=3e-4, max_coords_per_param=8,
                                   rng=np.random.default_rng(1))
        assert err < 1e-3
