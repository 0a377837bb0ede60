import time

import numpy as np
import pytest
import torch

from msclr.conventions import pad_to_unified
from msclr.dataio.streams import interpolate_frames
from msclr.graph import adjacency_for, build_adjacency, hop_distance, neighbor_set
from msclr.network import (
    ContrastiveEncoder,
    MaskedBatchNorm,
    STGCNBlock,
    STGCNConfig,
    adjacency_tensors,
    encode,
    linear_classify,
)

from conftest import chain

torch.set_default_dtype(torch.float32)


def eq3_oracle(x, conv, w_spatial, w_temporal, b_temporal, gamma):
    """Direct neighbor-set summation for one block with no norm/activation/residual.

    ``x`` is (C_in, T, V); w_spatial is (K, C_out, C_in); w_temporal (C_out, C_out, gamma).
    """
    hops = hop_distance(build_adjacency(conv))
    c_in, t_len, v = x.shape
    centre = hops[:, conv.center_joint]

    def label(i, j):
        if i == j:
            return 0
        return 1 if centre[j] < centre[i] else 2

    spatial = np.zeros((w_spatial.shape[1], t_len, v))
    for t in range(t_len):
        for i in range(v):
            nbrs = neighbor_set(hops, i, t, K=1, gamma=1, T=t_len)
            labels = {j: label(i, j) for _, j in nbrs}
            for q, j in nbrs:
                z = sum(1 for l in labels.values() if l == labels[j])
                spatial[:, t, i] += w_spatial[labels[j]] @ x[:, q, j] / z
    out = np.zeros_like(spatial)
    half = gamma // 2
    for t in range(t_len):
        for i in range(v):
            for q, _ in neighbor_set(hops, i, t, K=0, gamma=gamma, T=t_len):
                out[:, t, i] += w_temporal[:, :, q - t + half] @ spatial[:, q, i]
            out[:, t, i] += b_temporal
    return out


def hand_weighted_block(conv, c_in, c_out, gamma):
    block = STGCNBlock(c_in, c_out, conv.joint_count, temporal_kernel=gamma, residual=False,
                       edge_importance=False, norm=False, activation=False).double()
    k = 3
    w_sp = (np.arange(k * c_out * c_in).reshape(k, c_out, c_in) % 5 - 2) * 0.5
    w_t = (np.arange(c_out * c_out * gamma).reshape(c_out, c_out, gamma) % 7 - 3) * 0.25
    b_t = np.linspace(-0.3, 0.3, c_out)
    with torch.no_grad():
        block.gcn.weight.copy_(torch.from_numpy(w_sp.reshape(k * c_out, c_in, 1, 1)))
        block.gcn.bias.zero_()
        block.tcn.weight.copy_(torch.from_numpy(w_t[..., None]))
        block.tcn.bias.copy_(torch.from_numpy(b_t))
    return block, w_sp, w_t, b_t


def test_block_matches_neighbor_set_summation():
    start = time.perf_counter()
    conv = chain(3, center=1)
    block, w_sp, w_t, b_t = hand_weighted_block(conv, 2, 3, gamma=3)
    x = np.random.default_rng(0).normal(size=(2, 2, 3))  # C, T=2, V=3
    a, mask = adjacency_tensors(adjacency_for(conv), dtype=torch.float64)
    got = block(torch.from_numpy(x)[None], a, mask.double().view(1, 1, 1, -1))[0].detach().numpy()
    want = eq3_oracle(x, conv, w_sp, w_t, b_t, 3)
    assert np.abs(got - want).max() <= 1e-5
    assert time.perf_counter() - start < 1.0


def test_block_oracle_on_kinect(registry):
    conv = registry["kinectv2"]
    block, w_sp, w_t, b_t = hand_weighted_block(conv, 3, 2, gamma=5)
    x = np.random.default_rng(1).normal(size=(3, 6, 25))
    a, mask = adjacency_tensors(adjacency_for(conv), dtype=torch.float64)
    got = block(torch.from_numpy(x)[None], a, mask.double().view(1, 1, 1, -1))[0].detach().numpy()
    np.testing.assert_allclose(got, eq3_oracle(x, conv, w_sp, w_t, b_t, 5), atol=1e-10)


def test_zero_input_gives_zero_output():
    block = STGCNBlock(3, 4, 5)
    for p in block.modules():
        if isinstance(p, torch.nn.Conv2d):
            torch.nn.init.zeros_(p.bias)
    a, mask = adjacency_tensors(adjacency_for(chain(5)))
    out = block(torch.zeros(2, 3, 6, 5), a, mask.float().view(1, 1, 1, -1))
    assert not out.any()


def test_single_joint_graph_is_temporal_conv():
    from msclr.conventions import SkeletonConvention
    conv = SkeletonConvention("dot", 1, (), 0, (0,), ("a",))
    block = STGCNBlock(2, 2, 1, temporal_kernel=3, residual=False, edge_importance=False,
                       norm=False, activation=False).double()
    a, mask = adjacency_tensors(adjacency_for(conv), dtype=torch.float64)
    x = torch.randn(1, 2, 7, 1, dtype=torch.float64)
    got = block(x, a, mask.double().view(1, 1, 1, -1))
    root = block.gcn.weight.view(3, 2, 2)[0]
    root_bias = block.gcn.bias.view(3, 2)[0]
    y = torch.einsum("oc,nctv->notv", root, x) + root_bias.view(1, 2, 1, 1)
    want = torch.nn.functional.conv2d(y, block.tcn.weight, block.tcn.bias, padding=(1, 0))
    torch.testing.assert_close(got, want, rtol=0, atol=1e-12)


def test_masked_batchnorm_ignores_padding():
    bn = MaskedBatchNorm(2)
    x = torch.randn(4, 2, 5, 6)
    mask = torch.tensor([1, 1, 1, 1, 0, 0.]).view(1, 1, 1, -1)
    garbage = x.clone()
    garbage[..., 4:] = 1e6
    y1, y2 = bn(x * mask, mask), bn(garbage, mask)
    torch.testing.assert_close(y1, y2)
    assert not y1[..., 4:].any()
    valid = y1[..., :4]
    torch.testing.assert_close(valid.mean(dim=(0, 2, 3)), torch.zeros(2), atol=1e-5, rtol=0)


def kinect_batch(registry, small_dataset, n=4):
    return np.stack([pad_to_unified(interpolate_frames(r.formats["kinectv2"], 20), "kinectv2",
                                    registry).data for r in small_dataset[:n]])


def test_padded_joints_exactly_zero_after_every_block(registry, small_dataset):
    torch.manual_seed(0)
    model = ContrastiveEncoder(STGCNConfig(), registry.v_max)
    x = torch.from_numpy(kinect_batch(registry, small_dataset))
    a, mask = adjacency_tensors(adjacency_for(registry["kinectv2"], 43))
    feats, _, _ = model.encoder.trunk(x, a, mask)
    assert len(feats) == 3
    for f in feats:
        assert f.shape[-1] == 43 and torch.count_nonzero(f[..., 25:]) == 0


@pytest.mark.parametrize("train", [True, False])
def test_padded_equals_native(registry, small_dataset, train):
    torch.manual_seed(0)
    model = ContrastiveEncoder(STGCNConfig(), registry.v_max).double()
    model.train(train)
    adj = adjacency_for(registry["kinectv2"], 43)
    x = torch.from_numpy(kinect_batch(registry, small_dataset)).double()
    a43, m43 = adjacency_tensors(adj, 43, dtype=torch.float64)
    a25, m25 = adjacency_tensors(adj, 25, dtype=torch.float64)
    z43 = model.encoder(x, a43, m43)
    z25 = model.encoder(x[:, :, :25].contiguous(), a25, m25)
    assert (z43 - z25).abs().max().item() <= 1e-6


def test_joint_permutation_invariance(registry, small_dataset):
    torch.manual_seed(3)
    model = ContrastiveEncoder(STGCNConfig(), registry.v_max).double().eval()
    adj = adjacency_for(registry["kinectv2"], 43)
    a, mask = adjacency_tensors(adj, dtype=torch.float64)
    x = torch.from_numpy(kinect_batch(registry, small_dataset)).double()
    perm = torch.from_numpy(np.random.default_rng(0).permutation(43))
    pa = a[:, perm][:, :, perm]
    z = model.encoder(x, a, mask)
    zp = model.encoder(x[:, :, perm], pa, mask[perm])
    assert (z - zp).abs().max().item() <= 1e-5


def test_encoder_outputs(registry, small_dataset):
    torch.manual_seed(0)
    model = ContrastiveEncoder(STGCNConfig(), registry.v_max).eval()
    adj = adjacency_for(registry["kinectv2"], 43)
    batch = kinect_batch(registry, small_dataset, 8)
    out = encode(model, batch, adj)
    assert out.embedding.shape == (8, 256) and out.projection.shape == (8, 128)
    torch.testing.assert_close(out.projection.norm(dim=1), torch.ones(8), atol=1e-6, rtol=0)
    single = encode(model, batch[3:4], adj)
    assert (single.embedding - out.embedding[3:4]).abs().max() <= 1e-5
    twice = encode(model, np.stack([batch[0], batch[0]]), adj)
    assert torch.equal(twice.embedding[0], twice.embedding[1])
    with pytest.raises(ValueError):
        encode(model, batch, adj, conventions=["kinectv2", "smpl"])


def test_absent_person_does_not_dilute_pooling(registry, small_dataset):
    torch.manual_seed(0)
    model = ContrastiveEncoder(STGCNConfig(), registry.v_max).eval()
    adj = adjacency_for(registry["kinectv2"], 43)
    batch = kinect_batch(registry, small_dataset, 2)
    one_person = encode(model, batch[..., :1], adj).embedding
    two_slots = encode(model, batch, adj).embedding
    torch.testing.assert_close(one_person, two_slots, atol=1e-6, rtol=0)


def test_config_validation_and_presets():
    assert STGCNConfig().strides() == (1, 1, 2)
    full = STGCNConfig.full_scale()
    assert full.block_channel_widths == (64,) * 4 + (128,) * 3 + (256,) * 3
    with pytest.raises(ValueError):
        STGCNConfig(temporal_kernel=4)
    with pytest.raises(ValueError):
        STGCNConfig(block_channel_widths=(0,))


def test_linear_classify():
    head = torch.nn.Linear(4, 2)
    torch.nn.init.zeros_(head.weight)
    torch.nn.init.zeros_(head.bias)
    assert not linear_classify(torch.randn(3, 4), head).any()
    with torch.no_grad():
        head.weight.copy_(torch.tensor([[1., 0, 0, 0], [0, 1., 0, 0]]))
    scores = linear_classify(torch.tensor([[2., 0, 0, 0], [0, 2., 0, 0]]), head)
    assert scores.argmax(dim=1).tolist() == [0, 1]
    with pytest.raises(ValueError):
        linear_classify(torch.randn(3, 5), head)


def test_linear_head_gradient_matches_finite_differences():
    torch.manual_seed(0)
    head = torch.nn.Linear(6, 3).double()
    z = torch.randn(5, 6, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 1, 0])
    loss = torch.nn.functional.cross_entropy(linear_classify(z, head), y)
    loss.backward()
    analytic = head.weight.grad.clone()
    numeric = torch.zeros_like(analytic)
    eps = 1e-6
    with torch.no_grad():
        for idx in np.ndindex(*analytic.shape):
            w = head.weight[idx].item()
            head.weight[idx] = w + eps
            up = torch.nn.functional.cross_entropy(head(z), y).item()
            head.weight[idx] = w - eps
            down = torch.nn.functional.cross_entropy(head(z), y).item()
            head.weight[idx] = w
            numeric[idx] = (up - down) / (2 * eps)
    rel = (analytic - numeric).norm() / numeric.norm()
    assert rel.item() < 1e-4
