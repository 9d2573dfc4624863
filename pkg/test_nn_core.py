import math

import numpy as np
import pytest
import torch
from torch.autograd import gradcheck
from torch.func import functional_call

from radarpose.errors import CheckpointError, ConfigError, PointSetError, ShapeError
from radarpose.nn_core import (
    MLP,
    ChebGraphConv,
    ExponentialMovingAverage,
    GCNBlock,
    GraphAttention,
    GraphSpec,
    MultiHeadSelfAttention,
    TemporalConv,
    TransformerLayer,
    ball_query,
    fps,
    knn,
    knn_batch,
    load_checkpoint,
    load_module_state,
    save_checkpoint,
    skeleton_graph,
)


def np_params(module):
    return {name: p.detach().double().numpy() for name, p in module.named_parameters()}


def layer_norm(x, weight, bias, eps=1e-5):
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * weight + bias


def mlp_oracle(x, p, prefix=''):
    h = layer_norm(x, p[prefix + 'norm.weight'], p[prefix + 'norm.bias'])
    h = np.maximum(h @ p[prefix + 'fc1.weight'].T + p[prefix + 'fc1.bias'], 0.0)
    return h @ p[prefix + 'fc2.weight'].T + p[prefix + 'fc2.bias']


def attention_oracle(x, p, heads, prefix=''):
    """Per-head softmax(q k^T / sqrt(d)) by explicit loops; x is (tokens, dim)."""
    tokens, dim = x.shape
    head_dim = dim // heads
    qkv = x @ p[prefix + 'qkv.weight'].T + p[prefix + 'qkv.bias']
    q, k, v = qkv[:, :dim], qkv[:, dim:2 * dim], qkv[:, 2 * dim:]
    weights = np.zeros((heads, tokens, tokens))
    out = np.zeros((tokens, dim))
    for h in range(heads):
        cols = slice(h * head_dim, (h + 1) * head_dim)
        for i in range(tokens):
            scores = [float(np.dot(q[i, cols], k[j, cols])) / math.sqrt(head_dim) for j in range(tokens)]
            top = max(scores)
            exps = [math.exp(s - top) for s in scores]
            total = sum(exps)
            for j in range(tokens):
                weights[h, i, j] = exps[j] / total
                out[i, cols] += weights[h, i, j] * v[j, cols]
    return out @ p[prefix + 'out.weight'].T + p[prefix + 'out.bias'], weights


def transformer_oracle(x, p, heads):
    normed = layer_norm(x, p['norm.weight'], p['norm.bias'])
    attended, _ = attention_oracle(normed, p, heads, 'attention.')
    x = x + attended
    return x + mlp_oracle(x, p, 'feed_forward.')


def path_graph(n, order=2):
    adjacency = np.zeros((n, n))
    for i in range(n - 1):
        adjacency[i, i + 1] = adjacency[i + 1, i] = 1.0
    return GraphSpec(adjacency, order)


def check_gradients(module, *inputs):
    module = module.double().eval()
    names = [name for name, _ in module.named_parameters()]
    params = tuple(p.detach().clone().requires_grad_(True) for _, p in module.named_parameters())
    inputs = tuple(t.double().requires_grad_(True) for t in inputs)

    def forward(*args):
        return functional_call(module, dict(zip(names, args[:len(names)])), args[len(names):])

    return gradcheck(forward, params + inputs, eps=1e-5, atol=1e-8, rtol=1e-4)


def test_mlp_examples():
    torch.manual_seed(0)
    mlp = MLP(3, 5, 2).eval()
    with torch.no_grad():
        mlp.fc2.weight.zero_()
        mlp.fc2.bias.copy_(torch.tensor([0.25, -1.5]))
    out = mlp(torch.randn(4, 3))
    assert torch.allclose(out, torch.tensor([0.25, -1.5]).expand(4, 2)), f"Expected bias broadcast but got {out}"

    torch.manual_seed(0)
    dropped = MLP(3, 5, 2, dropout=1.0).train()
    out = dropped(torch.randn(4, 3))
    assert torch.allclose(out, dropped.fc2.bias.detach().expand(4, 2)), "dropout p=1 should leave the bias path"

    with pytest.raises(ShapeError):
        mlp(torch.randn(4, 4))


def test_mlp_hand_oracle():
    mlp = MLP(3, 2, 2).eval()
    with torch.no_grad():
        mlp.fc1.weight.copy_(torch.tensor([[0.5, -0.25, 0.1], [0.2, 0.3, -0.4]]))
        mlp.fc1.bias.copy_(torch.tensor([0.05, -0.1]))
        mlp.fc2.weight.copy_(torch.tensor([[1.0, -0.5], [0.3, 0.7]]))
        mlp.fc2.bias.copy_(torch.tensor([0.01, 0.02]))
    x = np.array([[0.1, 0.2, 0.3], [-0.3, 0.0, 0.6]])
    expected = mlp_oracle(x, np_params(mlp))
    result = mlp(torch.tensor(x, dtype=torch.float32)).detach().double().numpy()
    assert np.allclose(result, expected, atol=1e-6), f"Expected {expected} but got {result}"


def test_attention_examples():
    torch.manual_seed(1)
    layer = TransformerLayer(8, 2).eval()

    _, weights = layer(torch.randn(1, 1, 8), return_attention=True)
    assert torch.allclose(weights, torch.ones_like(weights)), "a single token attends only to itself"

    token = torch.randn(1, 1, 8)
    out = layer(token.expand(1, 2, 8))
    assert torch.allclose(out[0, 0], out[0, 1]), "identical tokens should give identical rows"

    _, weights = layer(torch.randn(3, 11, 8), return_attention=True)
    assert torch.allclose(weights.sum(-1), torch.ones(3, 2, 11), atol=1e-6)

    with pytest.raises(ConfigError):
        MultiHeadSelfAttention(10, 4)


def test_attention_matches_loop_oracle():
    torch.manual_seed(2)
    attention = MultiHeadSelfAttention(4, 1)
    x = np.random.default_rng(0).normal(size=(3, 4))
    expected_out, expected_weights = attention_oracle(x, np_params(attention), heads=1)
    out, weights = attention(torch.tensor(x, dtype=torch.float32)[None])
    assert np.allclose(weights[0].detach().numpy(), expected_weights, atol=1e-6)
    assert np.allclose(out[0].detach().numpy(), expected_out, atol=1e-5)


def test_attention_key_mask():
    torch.manual_seed(3)
    attention = MultiHeadSelfAttention(4, 2)
    mask = torch.tensor([[True, True, False, False]])
    _, weights = attention(torch.randn(1, 4, 4), mask)
    assert torch.all(weights[..., 2:] == 0), "masked keys must get zero weight"


def test_cheb_order_zero_is_linear_map():
    torch.manual_seed(4)
    x = torch.randn(2, 17, 3)
    conv = ChebGraphConv(3, 5, skeleton_graph(order=0))
    other = ChebGraphConv(3, 5, path_graph(17, order=0))
    other.load_state_dict(conv.state_dict())
    expected = x @ conv.weight[0] + conv.bias
    assert torch.allclose(conv(x), expected, atol=1e-6)
    assert torch.allclose(other(x), expected, atol=1e-6), "order 0 must not depend on the graph"


def test_cheb_edgeless_graph():
    graph = GraphSpec(np.zeros((2, 2)), order=2)
    assert np.allclose(graph.scaled_laplacian(), np.eye(2))
    conv = ChebGraphConv(1, 1, graph, bias=False)
    with torch.no_grad():
        conv.weight.copy_(torch.tensor([[[0.5]], [[2.0]], [[-1.0]]]))
    x = torch.tensor([[[3.0], [-2.0]]])
    # T0 = T1 = T2 = I on an edgeless graph
    assert torch.allclose(conv(x), x * 1.5)


def test_cheb_zero_input_and_linearity():
    torch.manual_seed(5)
    conv = ChebGraphConv(4, 3, skeleton_graph())
    with torch.no_grad():
        conv.bias.copy_(torch.tensor([0.1, -0.2, 0.3]))
    out = conv(torch.zeros(1, 17, 4))
    assert torch.allclose(out, conv.bias.expand(1, 17, 3))

    conv = ChebGraphConv(4, 3, skeleton_graph(), bias=False).double()
    x, y = torch.randn(17, 4, dtype=torch.float64), torch.randn(17, 4, dtype=torch.float64)
    a, b = 0.7, -1.9
    assert torch.allclose(conv(a * x + b * y), a * conv(x) + b * conv(y), atol=1e-9)


def test_cheb_matches_loop_oracle():
    graph = path_graph(4)
    degree = [sum(graph.adjacency[i]) for i in range(4)]
    lap = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            lap[i, j] = (1.0 if i == j else 0.0) - graph.adjacency[i, j] / math.sqrt(degree[i] * degree[j])
    scaled = 2.0 * lap / max(np.linalg.eigvalsh(lap)) - np.eye(4)
    assert np.allclose(graph.scaled_laplacian(), scaled)

    torch.manual_seed(6)
    conv = ChebGraphConv(2, 3, graph).double()
    x = np.random.default_rng(1).normal(size=(4, 2))
    w = conv.weight.detach().numpy()
    t0, t1 = x, scaled @ x
    t2 = 2.0 * scaled @ t1 - t0
    expected = t0 @ w[0] + t1 @ w[1] + t2 @ w[2] + conv.bias.detach().numpy()
    # the Laplacian buffer is stored in float32
    assert np.allclose(conv(torch.tensor(x)).detach().numpy(), expected, atol=1e-6)


def test_skeleton_graph_spectrum():
    graph = skeleton_graph()
    assert np.array_equal(graph.adjacency, graph.adjacency.T)
    eig = np.linalg.eigvalsh(graph.scaled_laplacian())
    assert eig.min() >= -1 - 1e-9 and eig.max() <= 1 + 1e-9
    with pytest.raises(ConfigError):
        GraphSpec(np.triu(np.ones((3, 3))))
    with pytest.raises(ShapeError):
        ChebGraphConv(2, 2, graph)(torch.randn(1, 16, 2))


def test_graph_attention_examples():
    torch.manual_seed(7)
    attention = GraphAttention(skeleton_graph(), 8, heads=4).eval()
    same = torch.randn(1, 1, 8).expand(1, 17, 8)
    _, weights = attention(same, return_attention=True)
    assert torch.allclose(weights, torch.full_like(weights, 1.0 / 17), atol=1e-6)

    single = GraphAttention(skeleton_graph(), 8, heads=1).eval()
    plain = TransformerLayer(8, 1).eval()
    plain.load_state_dict(single.state_dict())
    x = torch.randn(2, 17, 8)
    assert torch.allclose(single(x), plain(x), atol=1e-6)

    with pytest.raises(ShapeError):
        attention(torch.randn(1, 16, 8))


def test_graph_attention_matches_loop_oracle():
    torch.manual_seed(8)
    attention = GraphAttention(path_graph(4), 4, heads=2).double().eval()
    x = np.random.default_rng(2).normal(size=(4, 4))
    expected = transformer_oracle(x, np_params(attention), heads=2)
    result = attention(torch.tensor(x)[None])[0].detach().numpy()
    assert np.allclose(result, expected, atol=1e-10)


def identity_kernels(conv, channels):
    with torch.no_grad():
        conv.weight.zero_()
        conv.bias.zero_()
        for c in range(channels):
            conv.weight[c, c, 1] = 1.0


def test_temporal_conv_single_frame():
    conv = TemporalConv(3).eval()
    identity_kernels(conv.conv1, 3)
    identity_kernels(conv.conv2, 3)
    frame = torch.rand(1, 17, 3) + 0.1
    assert torch.allclose(conv(frame), frame[0]), "identity kernels should return the only frame"


def test_temporal_conv_zero_input():
    torch.manual_seed(9)
    conv = TemporalConv(2).eval()
    out = conv(torch.zeros(4, 17, 2))
    hidden = torch.relu(conv.conv1.bias)
    expected = conv.conv2.weight.sum(-1) @ hidden + conv.conv2.bias
    assert torch.allclose(out, expected.expand(17, 2), atol=1e-6)


def test_temporal_conv_hand_oracle():
    conv = TemporalConv(1).eval()
    k1, b1 = [1.0, 2.0, -1.0], 0.5
    k2, b2 = [0.5, -1.0, 1.0], -0.2
    with torch.no_grad():
        conv.conv1.weight.copy_(torch.tensor(k1).reshape(1, 1, 3))
        conv.conv1.bias.fill_(b1)
        conv.conv2.weight.copy_(torch.tensor(k2).reshape(1, 1, 3))
        conv.conv2.bias.fill_(b2)

    rng = np.random.default_rng(3)
    signal = rng.normal(size=(6, 17))
    expected = np.zeros(17)
    for j in range(17):
        s = signal[:, j]
        hidden = [max(sum(k1[i] * s[t + i] for i in range(3)) + b1, 0.0) for t in range(4)]
        second = [sum(k2[i] * hidden[t + i] for i in range(3)) + b2 for t in range(2)]
        expected[j] = max(second)
    out = conv(torch.tensor(signal, dtype=torch.float32)[:, :, None])
    assert np.allclose(out[:, 0].detach().numpy(), expected, atol=1e-5)


CLOUDS = 200
CLOUD_POINTS = 100


def padded_cloud(seed, fill):
    """A 100-point cloud in the unit cube with a random set of padded rows set to ``fill``."""
    rng = np.random.default_rng(seed)
    points = rng.uniform(0.0, 1.0, size=(CLOUD_POINTS, 3))
    valid = np.ones(CLOUD_POINTS, dtype=bool)
    valid[rng.choice(CLOUD_POINTS, size=rng.integers(0, 40), replace=False)] = False
    points[~valid] = fill
    return points, valid


def ranked_neighbours(points, valid, anchor):
    """Valid indices sorted by (distance, index), computed one point at a time."""
    distances = {i: float(np.linalg.norm(points[i] - anchor)) for i in range(len(points)) if valid[i]}
    return sorted(distances, key=lambda i: (distances[i], i)), distances


def np_fps_oracle(points, count, valid):
    """Each pick recomputes every candidate's distance to all chosen points (plus the start point)."""
    ids = np.flatnonzero(valid)
    start = ids[np.argmin(np.linalg.norm(points[ids] - points[ids].mean(axis=0), axis=1))]
    references, selected = [start], []
    for _ in range(count):
        nearest = np.linalg.norm(points[ids][:, None] - points[references][None], axis=-1).min(axis=1)
        nearest[np.isin(ids, selected)] = -1.0
        best = int(ids[np.argmax(nearest)])
        selected.append(best)
        references.append(best)
    return selected


def test_fps_matches_brute_force():
    for seed in range(CLOUDS):
        points, valid = padded_cloud(seed, fill=50.0)
        count = min(12, int(valid.sum()))
        chosen = fps(torch.tensor(points), count, torch.tensor(valid)).tolist()
        expected = np_fps_oracle(points, count, valid)
        assert chosen == expected, f"cloud {seed}: expected {expected} but got {chosen}"
        assert all(valid[i] for i in chosen), f"cloud {seed}: a padded row was sampled"


def test_fps_examples():
    line = torch.tensor([[0.0, 0, 0], [1.0, 0, 0], [10.0, 0, 0]])
    picked = set(fps(line, 2).tolist())
    assert picked == {0, 2}, f"Expected the two extremes but got {picked}"

    cloud = torch.randn(9, 6)
    assert sorted(fps(cloud, 9).tolist()) == list(range(9))

    duplicates = torch.tensor([[0.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0], [0.0, 2, 0]])
    coords = {tuple(duplicates[i].tolist()) for i in fps(duplicates, 3).tolist()}
    assert len(coords) == 3, "duplicates should only be picked once distinct points run out"

    with pytest.raises(PointSetError):
        fps(line, 4)


def test_fps_respects_mask_and_order():
    gen = torch.Generator().manual_seed(10)
    points = torch.rand(30, 3, generator=gen)
    mask = torch.ones(30, dtype=torch.bool)
    mask[20:] = False
    chosen = fps(points, 6, mask)
    assert all(i < 20 for i in chosen.tolist()), "padded rows must never be sampled"
    with pytest.raises(PointSetError):
        fps(points, 21, mask)

    perm = torch.randperm(20, generator=gen)
    shuffled = fps(points[:20][perm], 6)
    original = {tuple(points[i].tolist()) for i in fps(points[:20], 6).tolist()}
    permuted = {tuple(points[:20][perm][i].tolist()) for i in shuffled.tolist()}
    assert original == permuted


def test_ball_query_examples():
    rng = np.random.default_rng(4)
    near = rng.normal(size=(32, 3))
    near = near / np.linalg.norm(near, axis=1, keepdims=True) * rng.uniform(0.0, 0.09, size=(32, 1))
    far = rng.uniform(1.0, 2.0, size=(20, 3))
    points = torch.tensor(np.vstack([near, far]))
    anchor = torch.zeros(1, 3, dtype=torch.float64)

    groups, empty = ball_query(points, anchor, radius=0.1, nsamples=32)
    assert set(groups[0].tolist()) == set(range(32))
    assert not bool(empty[0])

    groups, empty = ball_query(points, torch.tensor([[9.0, 9.0, 9.0]]), radius=0.1, nsamples=8)
    assert bool(empty[0]), "an isolated anchor should be flagged empty"
    assert len(set(groups[0].tolist())) == 1


def test_ball_query_matches_brute_force():
    radius, nsamples = 0.3, 8
    for seed in range(CLOUDS):
        rng = np.random.default_rng(10_000 + seed)
        anchors = rng.uniform(0.0, 1.0, size=(4, 3))
        points, valid = padded_cloud(seed, fill=anchors[0])
        groups, empty = ball_query(torch.tensor(points), torch.tensor(anchors), radius=radius,
                                   nsamples=nsamples, mask=torch.tensor(valid))
        for p, anchor in enumerate(anchors):
            ranked, distances = ranked_neighbours(points, valid, anchor)
            inside = [i for i in ranked if distances[i] <= radius][:nsamples]
            expected = inside + [ranked[0]] * (nsamples - len(inside))
            assert groups[p].tolist() == expected, f"cloud {seed} anchor {p}: expected {expected} but got {groups[p].tolist()}"
            assert bool(empty[p]) == (not inside)


def test_knn_examples():
    gen = torch.Generator().manual_seed(11)
    points = torch.rand(10, 6, generator=gen)
    assert sorted(knn(points, points[0, :3], k=10).tolist()) == list(range(10))
    assert int(knn(points, points[7, :3], k=3)[0]) == 7

    few = knn(points[:3], torch.tensor([5.0, 5.0, 5.0]), k=7)
    assert len(few) == 7 and set(few.tolist()) <= {0, 1, 2}
    with pytest.raises(PointSetError):
        knn(points[:0], points[0, :3], k=3)


def test_knn_matches_full_sort():
    k = 50
    clouds, masks, anchors = [], [], []
    for seed in range(CLOUDS):
        rng = np.random.default_rng(20_000 + seed)
        anchor = rng.uniform(0.0, 1.0, size=(3, 3))
        points, valid = padded_cloud(seed, fill=anchor[0])
        clouds.append(points)
        masks.append(valid)
        anchors.append(anchor)
    indices, dist = knn_batch(torch.tensor(np.stack(clouds)), torch.tensor(np.stack(anchors)), k,
                              torch.tensor(np.stack(masks)))
    for seed in range(CLOUDS):
        for p, anchor in enumerate(anchors[seed]):
            ranked, distances = ranked_neighbours(clouds[seed], masks[seed], anchor)
            assert indices[seed, p].tolist() == ranked[:k], f"cloud {seed} anchor {p}: neighbours differ from the full sort"
            assert np.allclose(dist[seed, p].numpy(), [distances[i] for i in ranked[:k]], atol=1e-12)
            assert torch.all(dist[seed, p, 1:] >= dist[seed, p, :-1]), "distances should come back sorted"


def test_ema_closed_form():
    layer = torch.nn.Linear(3, 2)
    ema = ExponentialMovingAverage(layer, decay=0.999)
    start = {name: t.clone() for name, t in ema.shadow.items()}
    with torch.no_grad():
        for p in layer.parameters():
            p.add_(1.0)
    steps = 50
    for _ in range(steps):
        ema.update(layer)
    for name, p in layer.named_parameters():
        expected = p.detach() + (start[name] - p.detach()) * 0.999 ** steps
        assert torch.allclose(ema.shadow[name], expected, atol=1e-5), f"{name} does not follow the closed form"

    target = torch.nn.Linear(3, 2)
    ema.copy_to(target)
    assert torch.equal(target.weight, ema.shadow['weight'])
    with pytest.raises(CheckpointError):
        ema.load_state_dict({'weight': torch.zeros(4, 4)})


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(12)
    block = GCNBlock(skeleton_graph(), 8, heads=2)
    ema = ExponentialMovingAverage(block)
    save_checkpoint(str(tmp_path), block.state_dict(), step=7, ema_state=ema.state_dict(), kind='test',
                    config={'hidden_dim': 8})
    state, ema_state, manifest = load_checkpoint(str(tmp_path))
    assert manifest['step'] == 7 and manifest['kind'] == 'test' and manifest['ema']
    for name, tensor in block.state_dict().items():
        assert torch.equal(state[name], tensor), f"{name} changed in the round trip"
    assert set(ema_state) == set(ema.shadow)

    other = GCNBlock(skeleton_graph(), 8, heads=2)
    load_module_state(other, state)
    assert torch.equal(other.conv.weight, block.conv.weight)
    with pytest.raises(CheckpointError):
        load_module_state(GCNBlock(skeleton_graph(), 4, heads=2), state)


def test_checkpoint_corruption(tmp_path):
    save_checkpoint(str(tmp_path), torch.nn.Linear(2, 2).state_dict())
    params = tmp_path / 'params.f32'
    params.write_bytes(params.read_bytes()[:-4])
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path))
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / 'missing'))


def test_gradients_match_finite_differences():
    torch.manual_seed(13)
    graph = path_graph(5)
    cases = [
        (MLP(4, 6, 3), torch.randn(3, 4)),
        (TransformerLayer(4, 2), torch.randn(1, 3, 4)),
        (ChebGraphConv(3, 2, graph), torch.randn(5, 3)),
        (GraphAttention(graph, 4, heads=2), torch.randn(1, 5, 4)),
        (GCNBlock(graph, 4, heads=2), torch.randn(1, 5, 4)),
        (TemporalConv(2), torch.randn(6, 5, 2)),
    ]
    for module, x in cases:
        assert check_gradients(module, x), f"{type(module).__name__} gradients disagree with finite differences"


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
