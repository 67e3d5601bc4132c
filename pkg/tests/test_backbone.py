import numpy as np
import pytest
import torch

from camreid.backbone import (
    ClassifierHead, ReIDNet, global_avg_pool, global_max_pool, load_reid, reinit_classifier, save_reid,
    split_parts,
)
from camreid.data import AugmentPolicy, SynthConfig, augment, generate_synthetic
from camreid.reid import ReIDModel
from camreid.utils import to_tensor


@pytest.fixture(scope="module")
def net():
    torch.manual_seed(0)
    return ReIDNet(num_classes=5).eval()


def _probe(n=3, seed=0):
    return torch.rand(n, 3, 64, 32, generator=torch.Generator().manual_seed(seed))


def test_pool_examples():
    f = torch.tensor([[1.0, 2.0], [3.0, 4.0]]).view(1, 1, 2, 2)
    assert global_max_pool(f).tolist() == [[4.0]]
    assert global_avg_pool(f).tolist() == [[2.5]]
    const = torch.full((2, 3, 4, 4), 0.75)
    assert torch.equal(global_max_pool(const), torch.full((2, 3), 0.75))
    assert torch.equal(global_avg_pool(const), torch.full((2, 3), 0.75))


def test_gmp_dominates_gap_on_nonnegative_maps():
    g = torch.Generator().manual_seed(1)
    for _ in range(50):
        f = torch.rand(4, 8, 6, 4, generator=g) * 3
        assert (global_max_pool(f) >= global_avg_pool(f)).all()


def test_split_parts_partition():
    f = torch.randn(2, 5, 8, 4)
    up, low = split_parts(f)
    assert up.shape == (2, 5, 4, 4) and low.shape == (2, 5, 4, 4)
    assert torch.equal(torch.cat([up, low], dim=2), f)
    with pytest.raises(ValueError):
        split_parts(torch.zeros(1, 1, 7, 4))


def test_upper_part_keeps_global_max_in_row_zero():
    f = torch.rand(1, 3, 8, 4)
    f[0, :, 0, 2] = 10.0
    assert torch.equal(global_max_pool(split_parts(f)[0]), global_max_pool(f))


def test_encoder_shape_and_errors(net):
    with torch.no_grad():
        fmap = net.encode(_probe())
    assert fmap.shape == (3, 128, 8, 4)
    with pytest.raises(ValueError):
        net.encode(torch.zeros(1, 3, 32, 32))


def test_inference_deterministic(net):
    x = _probe()
    with torch.no_grad():
        a, b = net(x), net(x)
    for k in a:
        assert torch.equal(a[k], b[k])
    assert net.descriptor(x).shape == (3, 128)


def test_single_pixel_perturbation_changes_output(net):
    x = _probe(1)
    y = x.clone()
    y[0, :, 30, 15] += 0.5
    with torch.no_grad():
        assert not torch.equal(net.encode(x), net.encode(y))


def test_classify_examples():
    head = reinit_classifier([[1.0, 0.0], [0.0, 1.0]])
    assert head.weight.tolist() == [[1.0, 0.0], [0.0, 1.0]]
    e1 = torch.tensor([[2.0, 0.5]], dtype=torch.float64)
    assert head(e1).argmax().item() == 0
    assert torch.equal(head(torch.zeros(1, 2, dtype=torch.float64)), torch.zeros(1, 2, dtype=torch.float64))
    assert ClassifierHead(4, 7)(torch.ones(3, 4)).shape == (3, 7)
    with pytest.raises(ValueError):
        head(torch.ones(1, 3, dtype=torch.float64))
    with pytest.raises(ValueError):
        reinit_classifier(np.zeros((0, 4)))


def test_reinit_exact_and_self_logit():
    means = np.random.default_rng(0).normal(size=(6, 128))
    head = reinit_classifier(means)
    assert head.num_classes == 6
    assert np.abs(head.weight.detach().numpy() - means).max() == 0
    logits = head(torch.as_tensor(means)).detach().numpy()
    assert np.allclose(np.diag(logits), (means ** 2).sum(1), rtol=1e-12)


def test_replace_classifier_updates_config(net):
    n = ReIDNet(num_classes=3)
    n.replace_classifier(reinit_classifier(np.ones((9, 128), np.float32)))
    assert n.config["num_classes"] == 9
    assert n(_probe(2))["logits"].shape == (2, 9)


def test_checkpoint_roundtrip(net, tmp_path):
    save_reid(net, tmp_path / "a.safetensors")
    back, cfg = load_reid(tmp_path / "a.safetensors")
    assert cfg["num_classes"] == 5
    x = _probe()
    with torch.no_grad():
        assert torch.equal(net.descriptor(x), back.descriptor(x))
    save_reid(back, tmp_path / "b.safetensors")
    assert (tmp_path / "a.safetensors").read_bytes() == (tmp_path / "b.safetensors").read_bytes()


@pytest.mark.slow
def test_trained_descriptor_separates_identities():
    src, _ = generate_synthetic(SynthConfig(num_identities=8, num_test_identities=0, seed=3))
    model = ReIDModel(epochs=25, P=8, K=4, milestones=(), random_state=0).fit(src)
    rng = np.random.default_rng(0)
    pol = AugmentPolicy(crop=True, flip=True, crop_pad=2)
    views, ids = [], []
    for pid in range(8):
        s = next(s for s in src.samples if s.identity == pid)
        views += [augment(s, pol, rng).pixels for _ in range(2)]
        ids += [pid, pid]
    with torch.no_grad():
        d = model.net_.descriptor(to_tensor(np.stack(views))).numpy()
    dist = np.linalg.norm(d[:, None] - d[None], axis=-1)
    ids = np.array(ids)
    same = dist[ids[:, None] == ids[None]][dist[ids[:, None] == ids[None]] > 0]
    diff = dist[ids[:, None] != ids[None]]
    assert np.median(same) < np.median(diff)
    wins = [dist[2 * p, 2 * p + 1] < dist[2 * p][ids != p].min() for p in range(8)]
    assert sum(wins) >= 6
