import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bssad.errors import DataError, ModelFormatError, PreconditionError
from bssad.neural import (
    GATES,
    Hyperparams,
    Layer,
    LSTMCell,
    NeuralModel,
    NoiseEstimate,
    decode,
    encode,
    estimate_noise,
    gradient,
    init_model,
    load_model,
    loss,
    loss_and_gradient,
    lstm_summary,
    sample_covariance,
    save_model,
    train,
    transition,
)
from bssad.timeseries import Dataset, SynthConfig, apply_normalizer, fit_normalizer, make_windows, synth_generate

from oracles import central_differences, reference_loss


def _lstm(M, H, fill=0.0):
    return LSTMCell({g: np.full((H, M + H), fill) for g in GATES}, {g: np.zeros(H) for g in GATES})


def _model(M=2, Mp=2, tau=1, H=1, enc=None, dec=None, trans=None, weights=(0.45, 0.45, 0.45)):
    """Single-layer linear stacks; ``None`` means all zeros."""
    def lin(W, shape):
        W = np.zeros(shape) if W is None else np.asarray(W, dtype=float)
        return [Layer(W, np.zeros(W.shape[0]), "linear")]

    return NeuralModel(
        lin(enc, (Mp, tau * M)), lin(dec, (M, Mp)), _lstm(M, H), lin(trans, (Mp, Mp + H)),
        tau, weights,
    )


def _identity_model(M=2, H=1):
    """Encoder/decoder identity, transition passes z through and ignores the LSTM."""
    return _model(M, M, 1, H, np.eye(M), np.eye(M), np.hstack([np.eye(M), np.zeros((M, H))]))


def _activations(model):
    return {
        "enc": [l.activation for l in model.encoder],
        "dec": [l.activation for l in model.decoder],
        "trans": [l.activation for l in model.transition],
    }


# -- forward passes -----------------------------------------------------------------

def test_encode_identity():
    m = _model(enc=np.eye(2))
    np.testing.assert_array_equal(encode(m, np.array([[3.0, 4.0]])), [3, 4])


def test_encode_zero_parameters():
    m = _model(tau=3, Mp=2)
    np.testing.assert_array_equal(encode(m, np.ones((3, 2))), [0, 0])


def test_encode_tanh_all_ones():
    m = _model()
    m.encoder = [Layer(np.ones((2, 2)), np.zeros(2), "tanh")]
    np.testing.assert_array_equal(encode(m, np.zeros((1, 2))), [0, 0])


def test_decode_examples():
    np.testing.assert_array_equal(decode(_model(dec=np.eye(2)), [0.3, -1.0]), [0.3, -1.0])
    np.testing.assert_array_equal(decode(_model(), [0.3, -1.0]), [0, 0])
    np.testing.assert_array_equal(decode(_model(dec=[[2, 0], [0, 3]]), [1.0, 1.0]), [2, 3])


def test_transition_zero_and_identity_routing():
    window = np.array([[0.2, -0.7]])
    assert np.all(transition(_model(), np.array([1.0, 2.0]), window) == 0)
    z = np.array([1.5, -2.5])
    np.testing.assert_array_equal(transition(_identity_model(), z, window), z)


def test_lstm_one_step_hand_trace():
    # 1-D input, 1 hidden unit: i = o = f = sigmoid(0), g = tanh(x)
    m = _model(M=1, Mp=1, tau=1, H=1, trans=[[0.0, 1.0]])
    m.lstm.W["g"][:] = [[1.0, 0.0]]
    x = 0.8
    c = 0.5 * math.tanh(x)
    h = 0.5 * math.tanh(c)
    assert lstm_summary(m, np.array([[x]]))[0] == pytest.approx(h, abs=1e-15)
    assert transition(m, np.array([7.0]), np.array([[x]]))[0] == pytest.approx(h, abs=1e-15)


def test_batched_forward_matches_single():
    m = init_model(3, 2, 4, hidden_dim=5, seed=2)
    w = np.random.default_rng(0).standard_normal((6, 4, 3))
    z = encode(m, w)
    for k in range(6):
        np.testing.assert_allclose(encode(m, w[k]), z[k], rtol=0, atol=1e-14)
        np.testing.assert_allclose(lstm_summary(m, w[k]), lstm_summary(m, w)[k], rtol=0, atol=1e-14)


def test_init_model_shapes():
    m = init_model(4, 3, 12, hidden_dim=8)
    assert m.encoder[0].weights.shape == (8, 48)
    assert m.latent_dim == 3 and m.n_features == 4
    assert m.loss_weights == (0.45, 0.45, 0.45)
    assert Hyperparams().alpha1 == Hyperparams().alpha2 == Hyperparams().alpha3 == 0.45


# -- loss and gradient ------------------------------------------------------------

def test_loss_zero_for_perfect_constant_model():
    m = _identity_model()
    x = np.array([0.3, -0.4])
    batch = (np.tile(x, (5, 1, 1)), np.tile(x, (5, 1)))
    assert loss(m, batch) == 0.0
    for g in gradient(m, batch).values():
        assert np.all(g == 0)


def test_loss_single_prediction_term():
    m = _model(weights=(0.0, 0.45, 0.0))
    batch = (np.zeros((1, 1, 2)), np.array([[1.0, 1.0]]))
    assert loss(m, batch) == pytest.approx(0.9, abs=1e-15)


def test_loss_accepts_window_views():
    d = Dataset(np.random.default_rng(1).standard_normal((10, 2)))
    m = init_model(2, 2, 3, hidden_dim=4)
    views = make_windows(d, 3)
    arrays = (np.stack([v.past for v in views]), np.stack([v.current for v in views]))
    assert loss(m, views) == loss(m, arrays)


def test_loss_matches_reference():
    m = init_model(3, 2, 2, hidden_dim=4, seed=5)
    rng = np.random.default_rng(5)
    w, x = rng.standard_normal((4, 2, 3)), rng.standard_normal((4, 3))
    ref = reference_loss(m.parameters(), _activations(m), 2, m.loss_weights, w, x)
    assert loss(m, (w, x)) == pytest.approx(float(ref), rel=1e-12)


def test_gradient_mirrors_parameters():
    m = init_model(2, 2, 2, hidden_dim=3)
    batch = (np.ones((2, 2, 2)), np.ones((2, 2)))
    g = gradient(m, batch)
    assert list(g) == list(m.parameters())
    assert all(g[k].shape == p.shape for k, p in m.parameters().items())


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    M, Mp, tau = 3, 2, 2
    m = init_model(M, Mp, tau, hidden_dim=4, seed=seed)
    w, x = rng.standard_normal((3, tau, M)), rng.standard_normal((3, M))
    _, analytic = loss_and_gradient(m, (w, x))
    params = {k: v.astype(np.longdouble) for k, v in m.parameters().items()}
    acts = _activations(m)
    numeric = central_differences(
        params, lambda p: reference_loss(p, acts, tau, m.loss_weights, w, x)
    )
    for k in analytic:
        a, n = analytic[k], numeric[k]
        scale = np.maximum(np.abs(a), np.abs(n))
        mask = scale > 1e-8
        assert np.all(np.abs(a - n)[mask] <= 1e-4 * scale[mask]), k


# -- training -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_data():
    d = synth_generate(SynthConfig(num_sensors=3, latent_dim=2, length=400, seed=3))
    d = apply_normalizer(d, fit_normalizer(d))
    return d.rows(0, 300), d.rows(300, 400)


def test_train_loss_decreases(small_data):
    tr, va = small_data
    _, noise, hist = train(tr, va, Hyperparams(tau=4, latent_dim=2, hidden_dim=8, epochs=5), seed=0)
    assert len(hist) == 5 and all(math.isfinite(h) for h in hist)
    assert hist[-1] <= hist[0]
    assert noise.Q.shape == (2, 2) and noise.R.shape == (3, 3)


def test_train_deterministic(small_data):
    tr, va = small_data
    hp = Hyperparams(tau=4, latent_dim=2, hidden_dim=8, epochs=2)
    a, _, _ = train(tr, va, hp, seed=11)
    b, _, _ = train(tr, va, hp, seed=11)
    for k, v in a.parameters().items():
        assert v.tobytes() == b.parameters()[k].tobytes()


def test_train_zero_epochs_returns_init(small_data):
    tr, va = small_data
    m, _, hist = train(tr, va, Hyperparams(tau=4, latent_dim=2, hidden_dim=8, epochs=0), seed=4)
    assert hist == []
    ref = init_model(3, 2, 4, 8, seed=4)
    for k, v in m.parameters().items():
        assert np.array_equal(v, ref.parameters()[k])


def test_train_rejects_anomalies():
    d = Dataset(np.zeros((40, 2)), np.r_[np.zeros(39), 1])
    with pytest.raises(PreconditionError):
        train(d, d, Hyperparams(tau=2, epochs=1))


# -- noise estimation -----------------------------------------------------------------

def test_noise_zero_for_perfect_reconstruction():
    d = Dataset(np.random.default_rng(0).standard_normal((30, 2)))
    noise = estimate_noise(_identity_model(), d)
    assert np.all(noise.R == 0)


def test_sample_covariance_hand_case():
    np.testing.assert_array_equal(sample_covariance(np.array([[1.0, 0.0], [-1.0, 0.0]])), [[2, 0], [0, 0]])
    with pytest.raises(DataError):
        sample_covariance(np.ones((1, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_noise_symmetric_psd(seed):
    rng = np.random.default_rng(seed)
    m = init_model(3, 2, 2, hidden_dim=4, seed=seed)
    noise = estimate_noise(m, Dataset(rng.standard_normal((12, 3))))
    for S in (noise.Q, noise.R):
        assert np.max(np.abs(S - S.T)) <= 1e-12
        assert np.min(np.linalg.eigvalsh(S)) >= -1e-12


# -- persistence ------------------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    m = init_model(3, 2, 4, hidden_dim=5, seed=9)
    m.metadata = {"raw_features": ["a", "b", "c"]}
    noise = NoiseEstimate(np.eye(2) * 0.1, np.diag([0.3, 0.2, 1 / 3]))
    save_model(m, noise, tmp_path / "m.txt")
    back, nb = load_model(tmp_path / "m.txt")
    for k, v in m.parameters().items():
        assert v.tobytes() == back.parameters()[k].tobytes()
    assert nb.R.tobytes() == noise.R.tobytes()
    assert back.tau == 4 and back.metadata == m.metadata


def test_load_corrupted_header(tmp_path):
    p = tmp_path / "m.txt"
    p.write_text("bssad-model 99\nend\n")
    with pytest.raises(ModelFormatError, match="version"):
        load_model(p)
    p.write_text("garbage\n")
    with pytest.raises(ModelFormatError):
        load_model(p)


def test_load_shape_mismatch_names_tensor(tmp_path):
    src = tmp_path / "m.txt"
    save_model(_model(), NoiseEstimate(np.eye(2), np.eye(2)), src)
    lines = src.read_text().split("\n")
    k = lines.index("tensor noise.R 2 2 2")
    lines[k + 1] = "1.0 0.0 0.0"
    src.write_text("\n".join(lines))
    with pytest.raises(ModelFormatError, match="noise.R"):
        load_model(src)
