import numpy as np
import pytest

from hvqa import tensor as T
from hvqa.config import ENCODER_LAYERS, preset
from hvqa.data import ANSWER_VOCAB, QUESTION_VOCAB
from hvqa.errors import ShapeError
from hvqa.gradcheck import check_grads
from hvqa.layers import LSTM, MLP, BatchNorm, ConvStack, Dense, QuestionEncoder, lstm_encode
from hvqa.model import VQAModel
from hvqa.tensor import Tensor


class TestConvStack:
    def test_clevr_spec_on_128(self):
        rng = np.random.default_rng(0)
        net = ConvStack(3, ENCODER_LAYERS["clevr"], rng)
        assert net(Tensor(np.zeros((2, 128, 128, 3), np.float32))).shape == (2, 8, 8, 128)

    def test_desk_spec_on_64(self):
        rng = np.random.default_rng(0)
        net = ConvStack(3, ENCODER_LAYERS["desk"], rng)
        assert net(Tensor(np.zeros((2, 64, 64, 3), np.float32))).shape == (2, 4, 4, 128)

    def test_zero_image_zero_preactivations(self):
        rng = np.random.default_rng(1)
        net = ConvStack(3, ENCODER_LAYERS["desk"], rng)
        assert np.all(net.conv0(Tensor(np.zeros((1, 64, 64, 3), np.float32))).data == 0)

    def test_image_too_small(self):
        rng = np.random.default_rng(2)
        net = ConvStack(3, ((4, 7, 2),), rng)
        with pytest.raises(ShapeError):
            net(Tensor(np.zeros((1, 5, 5, 3), np.float32)))

    def test_gradients(self):
        rng = np.random.default_rng(3)
        net = ConvStack(2, ((3, 3, 2), (2, 3, 2)), rng, np.float64)
        x = Tensor(rng.standard_normal((3, 6, 6, 2)), requires_grad=True)
        w = rng.standard_normal((3, 2, 2, 2))
        assert check_grads(lambda: (net(x) * w).sum(), [x, *net.parameters()]) < 1e-4


class TestLSTM:
    def test_zero_weights_zero_output(self):
        rng = np.random.default_rng(4)
        enc = QuestionEncoder(10, 4, 5, rng, np.float64)
        for p in enc.parameters():
            p.data[...] = 0
        assert np.all(enc([1, 2, 3]).data == 0)

    def test_repeated_token_differs(self):
        rng = np.random.default_rng(5)
        enc = QuestionEncoder(10, 4, 5, rng, np.float64)
        assert not np.allclose(enc([3]).data, enc([3, 3]).data)

    def test_matches_direct_equations(self):
        rng = np.random.default_rng(6)
        lstm = LSTM(3, 4, rng, np.float64)
        x = rng.standard_normal((1, 5, 3))
        H = 4
        h = np.zeros(H)
        c = np.zeros(H)
        sig = lambda z: 1 / (1 + np.exp(-z))
        for t in range(5):
            z = x[0, t] @ lstm.w_x.data + h @ lstm.w_h.data + lstm.bias.data
            i, f, g, o = sig(z[:H]), sig(z[H : 2 * H]), np.tanh(z[2 * H : 3 * H]), sig(z[3 * H :])
            c = f * c + i * g
            h = o * np.tanh(c)
        np.testing.assert_allclose(lstm(Tensor(x), [5]).data[0], h, atol=1e-12)

    def test_padding_ignored(self):
        rng = np.random.default_rng(7)
        enc = QuestionEncoder(10, 4, 5, rng, np.float64)
        batch = enc(np.array([[1, 2, -1, -1], [4, 5, 6, 7]]))
        np.testing.assert_allclose(batch.data[0], enc([1, 2]).data, atol=1e-12)
        np.testing.assert_allclose(batch.data[1], enc([4, 5, 6, 7]).data, atol=1e-12)

    def test_gradient_five_steps(self):
        rng = np.random.default_rng(8)
        enc = QuestionEncoder(6, 3, 4, rng, np.float64)
        w = rng.standard_normal(4)
        assert check_grads(lambda: (enc([0, 3, 5, 1, 2]) * w).sum(), enc.parameters()) < 1e-4

    def test_empty_sequence(self):
        enc = QuestionEncoder(6, 3, 4, np.random.default_rng(0))
        with pytest.raises(ValueError):
            enc([])
        with pytest.raises(ValueError):
            enc(np.array([[-1, -1]]))

    def test_out_of_vocabulary(self):
        enc = QuestionEncoder(6, 3, 4, np.random.default_rng(0))
        with pytest.raises(ValueError):
            enc([1, 6])

    def test_functional_form(self):
        enc = QuestionEncoder(6, 3, 4, np.random.default_rng(0))
        assert lstm_encode([1, 2], enc).shape == (4,)

    def test_forget_bias_initialized_to_one(self):
        lstm = LSTM(3, 4, np.random.default_rng(0))
        np.testing.assert_array_equal(lstm.bias.data, [0] * 4 + [1] * 4 + [0] * 8)


class TestMLP:
    def test_identity_single_layer(self):
        net = MLP([3, 3], np.random.default_rng(0), np.float64)
        net.fc0.weight.data[...] = np.eye(3)
        x = Tensor([[1.0, -2.0, 3.0]])
        np.testing.assert_array_equal(net(x).data, x.data)

    def test_dropout_zero_same_in_both_modes(self):
        rng = np.random.default_rng(1)
        net = MLP([4, 8, 2], rng, np.float64, dropout=0.0)
        x = Tensor(rng.standard_normal((3, 4)))
        train = net(x).data
        net.eval()
        assert net(x).data.tobytes() == train.tobytes()

    def test_dropout_eval_is_deterministic(self):
        rng = np.random.default_rng(2)
        net = MLP([4, 8, 2], rng, np.float64, dropout=0.5)
        plain = MLP([4, 8, 2], np.random.default_rng(2), np.float64)
        x = Tensor(rng.standard_normal((3, 4)))
        net.eval()
        assert net(x).data.tobytes() == net(x).data.tobytes()
        np.testing.assert_array_equal(net(x).data, plain(x).data)

    def test_inverted_dropout_scale(self):
        net = MLP([2, 1000, 1], np.random.default_rng(3), np.float64, dropout=0.5)
        net.set_rng(np.random.default_rng(4))
        h = net.fc0(Tensor(np.ones((1, 2)))).relu()
        dropped = net.drop(h).data
        kept = dropped != 0
        np.testing.assert_allclose(dropped[kept], 2 * h.data[kept])

    def test_dimension_mismatch(self):
        net = MLP([3, 2], np.random.default_rng(0))
        with pytest.raises(ShapeError):
            net(Tensor(np.zeros((1, 4), np.float32)))

    def test_gradients(self):
        rng = np.random.default_rng(5)
        net = MLP([3, 5, 2], rng, np.float64)
        x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        assert check_grads(lambda: (net(x) * net(x)).sum(), [x, *net.parameters()]) < 1e-4


class TestBatchNorm:
    def test_already_normalized(self):
        x = np.array([[-1.0, 1.0], [1.0, -1.0]])
        bn = BatchNorm(2, np.float64)
        np.testing.assert_allclose(bn(Tensor(x)).data, x, atol=1e-5)

    def test_constant_channel(self):
        bn = BatchNorm(3, np.float64)
        assert np.all(bn(Tensor(np.full((4, 3), 7.0))).data == 0)

    def test_running_average_oracle(self):
        rng = np.random.default_rng(6)
        bn = BatchNorm(2, np.float64)
        mean, var = np.zeros(2), np.ones(2)
        for _ in range(5):
            x = rng.standard_normal((8, 2)) * 3 + 1
            bn(Tensor(x))
            mean = 0.9 * mean + 0.1 * x.mean(axis=0)
            var = 0.9 * var + 0.1 * x.var(axis=0)
        np.testing.assert_allclose(bn.running_mean, mean, atol=1e-12)
        np.testing.assert_allclose(bn.running_var, var, atol=1e-12)
        bn.eval()
        probe = rng.standard_normal((3, 2))
        np.testing.assert_allclose(bn(Tensor(probe)).data, (probe - mean) / np.sqrt(var + 1e-5), atol=1e-12)

    def test_eval_does_not_update(self):
        bn = BatchNorm(2, np.float64).eval()
        bn(Tensor(np.ones((4, 2))))
        assert bn.running_mean.tolist() == [0, 0]

    def test_single_sample_batch(self):
        with pytest.raises(ValueError):
            BatchNorm(2)(Tensor(np.ones((1, 2), np.float32)))

    def test_gradients(self):
        rng = np.random.default_rng(7)
        bn = BatchNorm(3, np.float64)
        x = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
        w = rng.standard_normal((5, 3))
        assert check_grads(lambda: (bn(x) * w).sum(), [x, *bn.parameters()]) < 1e-4


class TestDense:
    def test_glorot_bounds(self):
        layer = Dense(30, 20, np.random.default_rng(0), np.float64)
        s = np.sqrt(6 / 50)
        assert np.abs(layer.weight.data).max() <= s
        assert np.all(layer.bias.data == 0)


def expected_params(cfg, vocab, answers):
    """Independent count from the documented architecture."""
    m, g = cfg.model, cfg.aggregation
    total, c = 0, 3
    for filters, k, _ in ENCODER_LAYERS[m.encoder]:
        total += k * k * c * filters + filters + 2 * filters
        c = filters
    d = m.d
    total += (c + 2) * d + d + d * d + d
    total += vocab * m.embed_dim + (m.embed_dim + m.lstm_hidden) * 4 * m.lstm_hidden + 4 * m.lstm_hidden
    total += m.lstm_hidden * d + d + d * d + d
    total += m.alignment_depth * (d * d + d)
    total += d * m.classifier_hidden + m.classifier_hidden + m.classifier_hidden * answers + answers
    if g.kind == "rn":
        h = g.rn_hidden
        total += 2 * d * h + m.lstm_hidden * h + h + (g.rn_layers - 1) * (h * h + h) + h * d + d
    return total


class TestParameterCounts:
    @pytest.mark.parametrize("name,count", [("desk", 173_456), ("clevr", 1_419_664)])
    def test_presets(self, name, count):
        cfg = preset(name)
        model = VQAModel(cfg, len(QUESTION_VOCAB), len(ANSWER_VOCAB))
        assert model.num_parameters() == expected_params(cfg, len(QUESTION_VOCAB), len(ANSWER_VOCAB))
        assert model.num_parameters() == count

    def test_rn_variant(self):
        cfg = preset("desk").with_overrides({"aggregation.kind": "rn"})
        model = VQAModel(cfg, len(QUESTION_VOCAB), len(ANSWER_VOCAB))
        assert model.num_parameters() == expected_params(cfg, len(QUESTION_VOCAB), len(ANSWER_VOCAB))

    def test_pure_function_of_config(self):
        cfg = preset("desk")
        a = VQAModel(cfg, 24, 16)
        b = VQAModel(cfg.copy(), 24, 16)
        assert [p.data.tobytes() for p in a.parameters()] == [p.data.tobytes() for p in b.parameters()]


def test_eval_forward_is_deterministic():
    cfg = preset("desk")
    model = VQAModel(cfg, 24, 16).eval()
    rng = np.random.default_rng(0)
    images = rng.random((2, 64, 64, 3)).astype(np.float32)
    tokens = np.array([[1, 2, 3, -1], [4, 5, -1, -1]])
    with T.no_grad():
        a = model(images, tokens).logits.data
        b = model(images, tokens).logits.data
    assert a.tobytes() == b.tobytes()
