import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from resroute.backbone import NetworkSpec, init_network
from resroute.core import ConfigError, DataError, NumericError
from resroute.degrade import DatasetManifest, save_image
from resroute.harness import (
    Adam,
    EvalReport,
    TrainConfig,
    adam_step,
    eval_cross,
    eval_grid,
    parse_config,
    parse_report,
    read_config,
    read_report,
    render_csv,
    render_markdown,
    report_from_dict,
    report_to_dict,
    train_model,
    write_report,
)

# ------------------------------------------------------------------ Adam


def reference_adam_trace(w0, steps, lr=3e-4, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam on f(w) = w^2 written out with plain floats."""
    w, m, v, trace = w0, 0.0, 0.0, []
    for t in range(1, steps + 1):
        g = 2.0 * w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        w = w - lr * m_hat / (math.sqrt(v_hat) + eps)
        trace.append(w)
    return trace


def test_adam_first_step():
    cfg = TrainConfig(lr=3e-4)
    p, _ = adam_step({"w": np.float64(0.0)}, {"w": np.float64(0.5)}, None, 1, cfg)
    assert float(p["w"]) == pytest.approx(-3e-4 * 0.5 / (0.5 + 1e-8), abs=1e-18)
    assert float(p["w"]) == pytest.approx(-3e-4, rel=1e-7)


def test_adam_zero_gradient_fixed_point():
    cfg = TrainConfig()
    p, m = {"w": np.array([1.5, -2.0])}, None
    for t in range(1, 20):
        p, m = adam_step(p, {"w": np.zeros(2)}, m, t, cfg)
    assert p["w"].tolist() == [1.5, -2.0]


@pytest.mark.parametrize("lr", [3e-4, 0.1])
def test_adam_matches_reference_trace(lr):
    cfg = TrainConfig(lr=lr)
    expected = reference_adam_trace(1.0, 10, lr=lr)
    p, m = {"w": np.float64(1.0)}, None
    for t in range(1, 11):
        p, m = adam_step(p, {"w": 2.0 * p["w"]}, m, t, cfg)
        assert abs(float(p["w"]) - expected[t - 1]) <= 1e-10


def test_adam_torch_wrapper_matches_numpy():
    cfg = TrainConfig(lr=0.05)
    w = torch.nn.Parameter(torch.tensor([1.0, -0.5], dtype=torch.float64))
    opt = Adam([("w", w)], cfg)
    p, m = {"w": np.array([1.0, -0.5])}, None
    for t in range(1, 8):
        opt.step(opt.grads_of((w**2).sum()))
        p, m = adam_step(p, {"w": 2 * p["w"]}, m, t, cfg)
    assert np.allclose(w.detach().numpy(), p["w"], rtol=0, atol=1e-14)


def test_adam_nan_gradient_names_parameter():
    with pytest.raises(NumericError, match="layer.weight"):
        adam_step({"layer.weight": np.zeros(2)}, {"layer.weight": np.array([0.0, np.nan])}, None, 1, TrainConfig())
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(1)}, {"w": np.zeros(1)}, None, 0, TrainConfig())


@given(st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=5), st.floats(0.01, 100))
def test_adam_step_one_scale_consistent(g, c):
    g = np.asarray(g)
    if np.min(np.abs(c * g)) < 1e-3:
        return
    cfg = TrainConfig()
    s1, _ = adam_step({"w": np.zeros_like(g)}, {"w": g}, None, 1, cfg)
    s2, _ = adam_step({"w": np.zeros_like(g)}, {"w": c * g}, None, 1, cfg)
    # step 1 is -lr * g / (|g| + eps): only eps breaks the scale invariance
    assert np.all(np.abs(s1["w"] - s2["w"]) <= 1e-6)
    assert np.all(np.sign(s1["w"]) == -np.sign(g))


def test_adam_loss_decreases_each_window():
    cfg = TrainConfig(lr=0.01)
    p, m = {"w": np.array([1.0, -2.0, 0.5])}, None
    losses = []
    for t in range(1, 101):
        losses.append(float((p["w"] ** 2).sum()))
        p, m = adam_step(p, {"w": 2 * p["w"]}, m, t, cfg)
    windows = [losses[i] for i in range(0, 100, 10)]
    assert all(b < a for a, b in zip(windows, windows[1:]))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(lr=-1.0)
    assert TrainConfig.desk().batch_size == 32 and TrainConfig.desk().epochs == 30
    d = TrainConfig()
    assert (d.batch_size, d.lr, d.epochs, d.beta1, d.beta2, d.eps) == (256, 3e-4, 80, 0.9, 0.999, 1e-8)


# ------------------------------------------------------------------ training


def separable(n=32, seed=0):
    gen = np.random.default_rng(seed)
    y = np.arange(n) % 2
    X = gen.random((n, 3, 8, 8)).astype(np.float32) * 0.3
    X[y == 1, 0] += 0.6
    return X, y


def test_lr_zero_keeps_parameters():
    net = init_network(NetworkSpec.tiny(), 2, seed=0)
    before = {k: v.clone() for k, v in net.named_parameters()}
    X, y = separable()
    train_model(net, X, y, TrainConfig(lr=0.0, epochs=3, batch_size=8))
    assert all(torch.equal(before[k], v) for k, v in net.named_parameters())


def test_tiny_net_fits_separable_data():
    net = init_network(NetworkSpec.tiny(input_size=8, width=4), 2, seed=0)
    X, y = separable()
    res = train_model(net, X, y, TrainConfig(lr=0.01, epochs=30, batch_size=8, seed=1))
    net.eval()
    with torch.no_grad():
        pred = net(torch.from_numpy((X - 0.5) / 0.25)).argmax(dim=1).numpy()
    assert np.mean(pred == y) == 1.0
    assert res.losses[-1] < res.losses[0]


def test_training_is_deterministic():
    X, y = separable()
    curves = []
    for _ in range(2):
        net = init_network(NetworkSpec.tiny(), 2, seed=3)
        curves.append(train_model(net, X, y, TrainConfig(lr=0.01, epochs=4, batch_size=8, seed=5)).losses)
    assert curves[0] == curves[1]


def test_label_out_of_range_names_entry():
    net = init_network(NetworkSpec.tiny(), 2, seed=0)
    X, y = separable(8)
    y = y.copy()
    y[5] = 7
    with pytest.raises(DataError, match="entry 5"):
        train_model(net, X, y, TrainConfig(epochs=1))
    with pytest.raises(DataError):
        train_model(net, X[:0], y[:0], TrainConfig(epochs=1))


# ------------------------------------------------------------------ evaluation


@pytest.fixture
def dataset(tmp_path):
    """Tiny prepared dataset whose label is readable from pixel (0, 0)."""
    m = DatasetManifest(tmp_path)
    gen = np.random.default_rng(0)
    for f in (1, 2, 12):
        for i in range(6):
            label = i % 3
            img = gen.random((4, 4, 3))
            img[0, 0, 0] = label / 2
            rel = f"test/x{f}/{i:03d}.png"
            save_image(tmp_path / rel, img)
            m.entries.append((rel, label, f))
    m.write()
    return tmp_path


class PixelOracle:
    def predict(self, X):
        return np.rint(X[:, 0, 0, 0] / 127.5).astype(int)


class RoutedStub(PixelOracle):
    trained_factors_ = (1, 2)

    def predict(self, X, factor=None):
        return super().predict(X)

    def predict_routes(self, X, factor=None):
        return np.eye(2, dtype=np.int8)[np.zeros(len(X), int)]


def test_eval_grid_perfect_stub(dataset):
    r = eval_grid(PixelOracle(), dataset, (1, 2, 12), method="oracle", trained_factors=(1, 2))
    assert r.per_factor_accuracy == {1: 1.0, 2: 1.0, 12: 1.0}
    assert r.mean_accuracy == 1.0 and r.route_accuracy is None


def test_eval_grid_refuses_untrained_factor_for_routed_model(dataset):
    with pytest.raises(ConfigError, match="trained factors"):
        eval_grid(RoutedStub(), dataset, (1, 12), method="drg")
    r = eval_grid(RoutedStub(), dataset, (1, 2), method="drg")
    assert r.route_accuracy == 0.5


def test_eval_grid_missing_split(dataset):
    with pytest.raises(FileNotFoundError, match="x4"):
        eval_grid(PixelOracle(), dataset, (4,))


def test_eval_cross(dataset):
    cross = eval_cross({"x1": PixelOracle()}, dataset, (1, 12))
    assert cross == {("x1", 1): 1.0, ("x1", 12): 1.0}


def test_mean_accuracy_arithmetic():
    assert EvalReport("m", (1, 2), {1: 0.8, 2: 0.9}).mean_accuracy == pytest.approx(0.85)
    # extras never enter the mean
    assert EvalReport("m", (1, 2), {1: 0.8, 2: 0.9, 12: 0.0}).mean_accuracy == pytest.approx(0.85)
    assert EvalReport("m", (1, 2), {1: 0.8}).mean_accuracy is None


# ------------------------------------------------------------------ reports


def _reports():
    a = EvalReport("mean", (1, 2), {1: 0.8924, 2: 0.8823, 12: 0.5})
    b = EvalReport("drg", (1, 2), {1: 0.9, 2: 0.85}, route_accuracy=0.97,
                   cross_matrix={("x1", 1): 0.9, ("x1", 12): 0.4, ("x2", 1): 0.7})
    return [a, b]


def test_markdown_format():
    md = render_markdown(_reports())
    assert "| x1 | 89.24% | 90.00% |" in md
    assert "| x12 | 50.00% | - |" in md
    assert "Route accuracy (DRG): 97.00%" in md


def test_empty_cross_matrix_gives_header_only():
    text = render_csv([EvalReport("mean", (1,), {1: 0.5})])
    assert text.splitlines()[-2:] == ["", "method,train_set"]


def test_write_report_twice_identical(tmp_path):
    write_report(_reports(), tmp_path / "a")
    write_report(_reports(), tmp_path / "b")
    for name in ("report.csv", "report.md"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_write_report_unwritable(tmp_path):
    blocker = tmp_path / "f"
    blocker.write_text("")
    with pytest.raises(OSError, match=str(blocker)):
        write_report(_reports(), blocker / "sub")


def test_report_round_trip(tmp_path):
    write_report(_reports(), tmp_path)
    back = read_report(tmp_path / "report.csv")
    for a, b in zip(_reports(), back):
        assert (a.method, a.factors, a.per_factor_accuracy, a.route_accuracy, a.cross_matrix) == \
               (b.method, b.factors, b.per_factor_accuracy, b.route_accuracy, b.cross_matrix)
        assert report_from_dict(report_to_dict(a)) == a


acc = st.floats(0, 1, allow_nan=False)


@given(st.dictionaries(st.sampled_from([1, 2, 4, 12]), acc, min_size=0, max_size=4),
       st.none() | acc,
       st.dictionaries(st.tuples(st.sampled_from(["x1", "x2"]), st.sampled_from([1, 12])), acc, max_size=4))
def test_report_round_trip_property(per, route, cross):
    r = EvalReport("drg", (1, 2, 4), per, route, cross)
    (back,) = parse_report(render_csv([r]))
    assert back == r


def test_mismatched_factor_sets_rejected():
    with pytest.raises(ConfigError):
        render_csv([EvalReport("a", (1,), {}), EvalReport("b", (1, 2), {})])


# ------------------------------------------------------------------ config files


def test_parse_config():
    cfg = parse_config("""
        # desk run
        method = drg
        factors = 1, 2,4
        batch_size: 32
        lr = 3e-4
        epochs = 30
        seed = 7
        dataset_root = data/
        output_dir = out/
    """)
    assert cfg == dict(method="drg", factors=(1, 2, 4), batch_size=32, lr=3e-4, epochs=30, seed=7,
                       dataset_root="data/", output_dir="out/")


@pytest.mark.parametrize("text", ["colour = red", "epochs = many", "method = svm", "lr = 0", "just words"])
def test_parse_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_read_config_missing(tmp_path):
    with pytest.raises(ConfigError):
        read_config(tmp_path / "nope.cfg")
