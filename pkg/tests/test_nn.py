import numpy as np
import pytest

from capembed.nn import (
    DetectorNetwork,
    LayerSpec,
    StaleTapeError,
    append_head,
    embedding_specs,
    load_checkpoint,
    xavier_init,
)
from gradcheck import numeric_grad, rel_error

TOY = dict(hidden=(12, 10), embedding_dim=4)


def toy_net(seed=0, normalize=False, dropout_p=0.1):
    return xavier_init(embedding_specs(16, TOY["hidden"], TOY["embedding_dim"], dropout_p), seed, normalize)


def test_reference_specs():
    specs = embedding_specs(2381)
    assert [(s.in_dim, s.out_dim) for s in specs] == [(2381, 4000), (4000, 1024), (1024, 512), (512, 512), (512, 32)]
    assert all(s.activation == "sigmoid" and s.use_batchnorm and s.dropout_p == 0.1 for s in specs[:-1])
    last = specs[-1]
    assert last.activation == "linear" and not last.use_batchnorm and last.dropout_p == 0.0


def test_final_layer_must_be_plain_linear():
    with pytest.raises(ValueError):
        xavier_init([LayerSpec(4, 3, "sigmoid", True, 0.1)], 0)


def test_xavier_bounds_and_init_state():
    net = xavier_init([LayerSpec(4000, 1024), LayerSpec(1024, 8, "linear", False, 0.0)], seed=1)
    bound = np.sqrt(6 / 5024)
    assert bound == pytest.approx(0.03456, abs=5e-6)
    w = net.params["0.W"]
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.99 * bound
    assert not net.params["0.b"].any()
    np.testing.assert_array_equal(net.params["0.gamma"], 1.0)
    np.testing.assert_array_equal(net.params["0.beta"], 0.0)
    np.testing.assert_array_equal(net.running[0]["mean"], 0.0)
    np.testing.assert_array_equal(net.running[0]["var"], 1.0)


def test_xavier_determinism():
    a, b, c = toy_net(3), toy_net(3), toy_net(4)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert not np.array_equal(a.params["0.W"], c.params["0.W"])


def test_eval_forward_is_deterministic(rng):
    net = toy_net().eval()
    x = rng.normal(size=(5, 16))
    np.testing.assert_array_equal(net.forward(x)[0], net.forward(x)[0])


def test_train_forward_deterministic_per_seed(rng):
    x = rng.normal(size=(6, 16))
    a, b = toy_net(2).train(), toy_net(2).train()
    np.testing.assert_array_equal(a.forward(x)[0], b.forward(x)[0])


def test_normalized_rows_have_unit_norm(rng):
    net = toy_net(normalize=True).eval()
    out, _ = net.forward(rng.normal(size=(7, 16)))
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)


def test_forward_errors(rng):
    net = toy_net().train()
    with pytest.raises(ValueError):
        net.forward(rng.normal(size=(4, 15)))
    with pytest.raises(ValueError):
        net.forward(rng.normal(size=(1, 16)))
    net.eval().forward(rng.normal(size=(1, 16)))


def test_dropout_rate_monte_carlo(rng):
    spec = [LayerSpec(8, 100, "sigmoid", False, 0.1), LayerSpec(100, 2, "linear", False, 0.0)]
    net = xavier_init(spec, 0).train()
    x = rng.normal(size=(100, 8))
    zeros = []
    for _ in range(100):
        _, tape = net.forward(x)
        zeros.append(np.mean(tape.layers[0].mask == 0))
    # 100 forwards x 100 rows x 100 units = 1e6 draws
    assert abs(np.mean(zeros) - 0.1) < 0.01
    kept = tape.layers[0].mask[tape.layers[0].mask > 0]
    np.testing.assert_allclose(kept, 1 / 0.9)


def test_batchnorm_standardizes_batch(rng):
    from capembed.nn import BN_EPS
    net = toy_net(dropout_p=0.0).train()
    _, tape = net.forward(rng.normal(size=(64, 16)) * 3 + 1)
    for cache in tape.layers[:-1]:
        np.testing.assert_allclose(cache.xhat.mean(axis=0), 0.0, atol=1e-6)
        pre_var = 1.0 / cache.inv_std ** 2 - BN_EPS
        np.testing.assert_allclose(cache.xhat.var(axis=0), pre_var / (pre_var + BN_EPS), rtol=1e-12)
    # first layer sees high-variance inputs, so eps is negligible there
    np.testing.assert_allclose(tape.layers[0].xhat.var(axis=0), 1.0, atol=1e-4)


def test_running_stats_converge(rng):
    net = toy_net(dropout_p=0.0)
    probe = rng.normal(size=(512, 16)) * 2 + 0.5
    for _ in range(200):
        net.train().forward(rng.normal(size=(64, 16)) * 2 + 0.5)
    train_out = net.train().forward(probe, update_stats=False)[0]
    eval_out = net.eval().forward(probe)[0]
    np.testing.assert_allclose(eval_out.mean(axis=0), train_out.mean(axis=0), atol=0.05)
    np.testing.assert_allclose(eval_out.std(axis=0), train_out.std(axis=0), rtol=0.1)
    assert all(np.all(r["var"] > 0) for r in net.running if r)


def _fd_check(net, x, upstream, normalize=False):
    net.train()
    out, tape = net.forward(x, normalize=normalize)
    masks = tape.masks
    grads = net.backward(tape, upstream)

    def loss():
        return float(np.sum(net.forward(x, normalize=normalize, masks=masks, update_stats=False)[0] * upstream))

    for name, p in net.params.items():
        num = numeric_grad(loss, p)
        assert rel_error(grads[name], num) < 1e-4, name


@pytest.mark.parametrize("normalize", [False, True])
def test_backward_matches_finite_differences(rng, normalize):
    net = toy_net(normalize=normalize)
    net.params["0.gamma"] = rng.uniform(0.5, 1.5, size=12)
    net.params["1.beta"] = rng.normal(size=10)
    _fd_check(net, rng.normal(size=(8, 16)), rng.normal(size=(8, 4)), normalize)


def test_input_gradient_matches_finite_differences(rng):
    net = toy_net().train()
    x = rng.normal(size=(8, 16))
    up = rng.normal(size=(8, 4))
    _, tape = net.forward(x)
    masks = tape.masks
    _, dx = net.backward(tape, up, return_input_grad=True)
    num = numeric_grad(lambda: float(np.sum(net.forward(x, masks=masks, update_stats=False)[0] * up)), x)
    assert rel_error(dx, num) < 1e-4


def test_zero_upstream_gives_zero_gradients(rng):
    net = toy_net().train()
    _, tape = net.forward(rng.normal(size=(8, 16)))
    grads = net.backward(tape, np.zeros((8, 4)))
    assert all(not g.any() for g in grads.values())


def test_normalization_gradient_is_tangent(rng):
    net = toy_net(normalize=True).train()
    _, tape = net.forward(rng.normal(size=(8, 16)))
    u = rng.normal(size=(8, 4))
    # gradient w.r.t. the pre-normalized output, read through the last layer's bias path
    y = tape.output
    g = (u - y * np.sum(y * u, axis=1, keepdims=True)) / tape.norms
    radial = np.sum(g * tape.pre_norm, axis=1)
    np.testing.assert_allclose(radial, 0.0, atol=1e-9)
    # same quantity through the network: db of the last layer equals sum of g over rows
    grads = net.backward(tape, u)
    np.testing.assert_allclose(grads[f"{len(net.specs) - 1}.b"], g.sum(axis=0), atol=1e-12)


def test_stale_tape_rejected(rng):
    net = toy_net().train()
    x = rng.normal(size=(8, 16))
    _, tape = net.forward(x)
    grads = net.backward(tape, np.ones((8, 4)))
    net.sgd_step(grads, 0.1)
    with pytest.raises(StaleTapeError):
        net.backward(tape, np.ones((8, 4)))
    _, old = net.forward(x)
    net.forward(x)
    with pytest.raises(StaleTapeError):
        net.backward(old, np.ones((8, 4)))


def test_sgd_step_rules(rng):
    spec = [LayerSpec(1, 1, "linear", False, 0.0)]
    net = xavier_init(spec, 0)
    net.params["0.W"] = np.array([[1.0]])
    net.sgd_step({"0.W": np.array([[2.0]]), "0.b": np.zeros(1)}, 0.001)
    assert net.params["0.W"][0, 0] == pytest.approx(0.998, abs=1e-15)

    a, b = toy_net(1), toy_net(1)
    g = {k: rng.normal(size=v.shape) for k, v in a.params.items()}
    before = {k: v.copy() for k, v in a.params.items()}
    a.sgd_step(g, 0.0)
    assert all(np.array_equal(a.params[k], before[k]) for k in before)
    a.sgd_step(g, 0.01).sgd_step(g, 0.01)
    b.sgd_step(g, 0.02)
    for k in a.params:
        np.testing.assert_allclose(a.params[k], b.params[k], atol=1e-15)
    with pytest.raises(ValueError):
        a.sgd_step({**g, "0.W": np.zeros((2, 2))}, 0.1)


def test_checkpoint_round_trip(tmp_path, rng):
    net = toy_net(5, normalize=True)
    net.train().forward(rng.normal(size=(8, 16)))
    net.save(tmp_path / "a.npz")
    back = load_checkpoint(tmp_path / "a.npz")
    probe = rng.normal(size=(10, 16))
    diff = np.abs(back.embed(probe) - net.embed(probe)).max()
    assert diff < 1e-12
    assert back.normalize and back.seed == 5
    back.save(tmp_path / "b.npz")
    net.save(tmp_path / "c.npz")
    assert (tmp_path / "b.npz").read_bytes() == (tmp_path / "c.npz").read_bytes()


def test_checkpoint_format_tag(tmp_path):
    from capembed.nn import write_checkpoint
    write_checkpoint(tmp_path / "x.npz", {"format": "other/9"}, {})
    with pytest.raises(ValueError, match="unsupported checkpoint format"):
        load_checkpoint(tmp_path / "x.npz")


def test_head_range_and_removal(rng):
    net = toy_net()
    x = rng.normal(size=(6, 16))
    before = net.embed(x)
    det = append_head(net, seed=1)
    scores = det.score(x)
    assert scores.shape == (6,) and np.all((scores > 0) & (scores < 1))
    np.testing.assert_array_equal(det.body.embed(x), before)
    with pytest.raises(ValueError):
        append_head(net, LayerSpec(5, 1, "sigmoid", False, 0.0))


def test_detector_gradients_match_finite_differences(rng):
    det = append_head(toy_net(2), seed=2).train()
    x = rng.normal(size=(8, 16))
    up_e, up_s = rng.normal(size=(8, 4)), rng.normal(size=8)
    _, _, tape = det.forward(x)
    masks = tape.masks
    grads = det.backward(tape, up_e, up_s)

    def loss():
        e, s, _ = det.forward(x, masks=masks, update_stats=False)
        return float(np.sum(e * up_e) + np.sum(s * up_s))

    for name in list(det.body.params) + list(det.head_params):
        p = det.body.params[name] if name in det.body.params else det.head_params[name]
        assert rel_error(grads[name], numeric_grad(loss, p)) < 1e-4, name


def test_detector_checkpoint_round_trip(tmp_path, rng):
    det = append_head(toy_net(1), seed=1)
    det.save(tmp_path / "d.npz")
    back = load_checkpoint(tmp_path / "d.npz")
    assert isinstance(back, DetectorNetwork)
    x = rng.normal(size=(4, 16))
    assert np.abs(back.score(x) - det.score(x)).max() < 1e-12
