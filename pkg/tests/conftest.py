import numpy as np
import pytest
from hypothesis import settings

from conceptmed.net import LayerSpec, LayeredNetwork, init_network

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def small_conv_net(seed, input_shape=(6, 6, 1), n_classes=3, bias_scale=0.1):
    """conv-relu-pool-conv-relu-flatten-dense-relu-dense-softmax with random nonzero biases."""
    h, w, c = input_shape
    layers = [
        LayerSpec("conv3x3", np.zeros((3, 3, c, 3)), np.zeros(3)),
        LayerSpec("relu"),
        LayerSpec("maxpool2x2"),
        LayerSpec("conv3x3", np.zeros((3, 3, 3, 4)), np.zeros(4)),
        LayerSpec("relu"),
        LayerSpec("flatten"),
        LayerSpec("dense", np.zeros(((h // 2) * (w // 2) * 4, 5)), np.zeros(5)),
        LayerSpec("relu"),
        LayerSpec("dense", np.zeros((5, n_classes)), np.zeros(n_classes)),
        LayerSpec("softmax"),
    ]
    net = init_network(layers, input_shape, [2, 5, 8], seed)
    rng = np.random.default_rng(seed + 10_000)
    for layer in net.layers:
        if layer.has_params:
            layer.bias = rng.normal(0, bias_scale, layer.bias.shape)
    return net


def dense_net(weights, biases, split_candidates=(1,)):
    """Stack of dense layers joined by relu, ending in softmax."""
    layers = []
    for i, (w, b) in enumerate(zip(weights, biases)):
        if i:
            layers.append(LayerSpec("relu"))
        layers.append(LayerSpec("dense", np.asarray(w, float), np.asarray(b, float)))
    layers.append(LayerSpec("softmax"))
    return LayeredNetwork(layers, (np.asarray(weights[0]).shape[0],), list(split_candidates))


@pytest.fixture
def conv_net():
    return small_conv_net(0)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
