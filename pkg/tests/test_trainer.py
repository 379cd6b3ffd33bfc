import numpy as np
import pytest
import torch

from asd.augment import identity_augment
from asd.losses import MixMatchConfig, per_sample_losses, to_tensor
from asd.models import ModelSpec, build_model, parameter_checksum
from asd.poisoning import TrainingSet
from asd.pools import DataPools, SplitConfig, StageSchedule, init_pools
from asd.trainer import (
    clone_virtual_model,
    latest_checkpoint,
    load_checkpoint,
    new_train_state,
    run_asd,
    save_checkpoint,
    select_layers,
    semi_supervised_epoch,
    virtual_supervised_epoch,
)

TINY = ModelSpec("small-cnn", num_classes=3, input_shape=(3, 8, 8), width=4)


def toy_data(n=48, c=3, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % c
    images = rng.random((n, 8, 8, 3), dtype=np.float32) * 0.3
    for k in range(c):
        images[labels == k, :, :, k] += 0.6  # colour encodes the class
    return TrainingSet(np.clip(images, 0, 1), labels, c)


def test_build_model_shapes_and_determinism():
    spec = ModelSpec("small-cnn", 10, (3, 32, 32), 32)
    m = build_model(spec, seed=3)
    m.eval()
    logits = m(torch.rand(2, 3, 32, 32))
    assert logits.shape == (2, 10)
    assert torch.allclose(torch.softmax(logits, -1).sum(-1), torch.ones(2))
    assert parameter_checksum(m) == parameter_checksum(build_model(spec, seed=3))
    assert parameter_checksum(m) != parameter_checksum(build_model(spec, seed=4))
    assert 200_000 < sum(p.numel() for p in m.parameters()) < 400_000


def test_resnet18_like_builds():
    m = build_model(ModelSpec("resnet18-like", 10, (3, 32, 32), 8))
    m.eval()
    assert m(torch.rand(1, 3, 32, 32)).shape == (1, 10)


def test_unsupported_architecture():
    with pytest.raises(ValueError, match="unsupported"):
        ModelSpec("vgg")


def test_layer_partitions():
    cnn = build_model(TINY)
    assert select_layers(cnn, "last3") == ("block3", "block4", "linear")
    assert select_layers(cnn, "half") == ("block3", "block4", "linear")
    res = build_model(ModelSpec("resnet18-like", 3, (3, 8, 8), 4))
    assert select_layers(res, "last3") == ("layer3", "layer4", "linear")
    assert select_layers(res, "half") == ("layer3", "layer4", "linear")
    assert select_layers(cnn, "block1, linear") == ("block1", "linear")
    with pytest.raises(ValueError, match="no layers"):
        select_layers(cnn, " , ")
    with pytest.raises(ValueError, match="unknown"):
        select_layers(cnn, "fc9")


def test_clone_is_exact_and_isolated():
    data = toy_data()
    model = build_model(TINY, seed=1)
    before = parameter_checksum(model)
    virtual = clone_virtual_model(model, "last3")
    a = per_sample_losses(model, data.images, data.labels).values
    b = per_sample_losses(virtual, data.images, data.labels).values
    assert np.array_equal(a, b)

    frozen = {n: p.detach().clone() for n, p in virtual.named_parameters() if not p.requires_grad}
    virtual_supervised_epoch(virtual, data.images, data.labels, lr=0.05, batch_size=16)
    assert parameter_checksum(model) == before
    for n, p in virtual.named_parameters():
        if n in frozen:
            assert torch.equal(p, frozen[n])
    assert parameter_checksum(virtual) != before


def test_virtual_epoch_zero_lr_is_noop():
    data = toy_data()
    model = build_model(TINY, seed=2)
    virtual = clone_virtual_model(model)
    virtual_supervised_epoch(virtual, data.images, data.labels, lr=0.0)
    assert parameter_checksum(virtual) == parameter_checksum(model)
    assert np.array_equal(per_sample_losses(virtual, data.images, data.labels).values,
                          per_sample_losses(model, data.images, data.labels).values)


@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_virtual_epoch_descends_on_separable_data(optimizer):
    data = toy_data(n=96)
    model = build_model(TINY, seed=0)
    before = per_sample_losses(model, data.images, data.labels, "ce").values.mean()
    virtual = clone_virtual_model(model)
    lr = 0.05 if optimizer == "sgd" else 0.01
    virtual_supervised_epoch(virtual, data.images, data.labels, lr=lr, optimizer=optimizer, batch_size=16)
    after = per_sample_losses(virtual, data.images, data.labels, "ce").values.mean()
    assert after < before


def test_semi_supervised_epoch_is_label_blind_on_polluted_pool():
    data = toy_data()
    pools = DataPools.from_clean(np.arange(0, 48, 4), 48, np.arange(0, 12, 4))
    corrupted = data.labels.copy()
    corrupted[pools.polluted] = (corrupted[pools.polluted] + 1) % 3

    def run(labels):
        state = new_train_state(TINY, seed=5)
        trace = semi_supervised_epoch(state, data.images, labels, pools, MixMatchConfig(), batch_size=8)
        return parameter_checksum(state.model), trace

    (p1, t1), (p2, t2) = run(data.labels), run(corrupted)
    assert p1 == p2 and t1 == t2
    assert all(np.isfinite(v).all() for v in t1)
    assert len(t1) == 6  # ceil(48 / 8)


def test_semi_supervised_epoch_degenerates_to_supervised():
    data = toy_data()
    pools = init_pools(48, np.arange(48))
    state = new_train_state(TINY, seed=0)
    trace = semi_supervised_epoch(state, data.images, data.labels, pools,
                                  MixMatchConfig(lambda_u=0.0), batch_size=16)
    assert all(u == 0.0 and s == t for s, u, t in trace)


def test_semi_supervised_epoch_needs_clean_pool():
    data = toy_data()
    state = new_train_state(TINY)
    with pytest.raises(ValueError, match="clean pool is empty"):
        semi_supervised_epoch(state, data.images, data.labels, init_pools(48, []), MixMatchConfig())


def test_run_asd_degenerate_schedule():
    data = toy_data()
    seen = []
    model, hist = run_asd(data, np.arange(48), StageSchedule(1, 1, 1),
                          SplitConfig(seeds_per_class=100), MixMatchConfig(), TINY,
                          batch_size=16, on_epoch=lambda r: seen.append(r) or r.epoch)
    assert hist == [0] and len(seen[0].pools.clean) == 48


def test_run_asd_stages_and_meta_split_leaves_model_alone(monkeypatch):
    data = toy_data()
    cfg = SplitConfig(seeds_per_class=2, quota_step=2, quota_interval=1, virtual_lr=0.05)
    seeds = np.array([0, 1, 2, 3, 4, 5])
    import asd.trainer as tr

    calls = []
    real = tr.meta_split_losses

    def spy(model, *a, **k):
        before = parameter_checksum(model)
        out = real(model, *a, **k)
        calls.append(parameter_checksum(model) == before)
        return out

    monkeypatch.setattr(tr, "meta_split_losses", spy)
    _, hist = run_asd(data, seeds, StageSchedule(2, 3, 5), cfg, MixMatchConfig(), TINY, batch_size=16,
                      on_epoch=lambda r: (r.stage, r.loss_after is not None))
    assert hist == [("class-aware", False)] * 2 + [("class-agnostic", False)] + [("meta-split", True)] * 2
    assert calls == [True, True]


def test_checkpoint_resume_is_bit_compatible(tmp_path):
    data = toy_data()
    seeds = np.arange(6)
    sched = StageSchedule(1, 2, 3)
    cfg = SplitConfig(seeds_per_class=2, quota_step=1, quota_interval=1)
    rec = lambda r: (r.epoch, tuple(r.pools.clean.tolist()), r.trace)

    full_model, full = run_asd(data, seeds, sched, cfg, MixMatchConfig(), TINY, batch_size=16, on_epoch=rec)

    short = StageSchedule(1, 2, 2)
    run_asd(data, seeds, short, cfg, MixMatchConfig(), TINY, batch_size=16, on_epoch=rec,
            checkpoint_dir=tmp_path)
    ckpt = latest_checkpoint(tmp_path)
    assert ckpt.name == "epoch_0002.pt"
    state = load_checkpoint(ckpt)
    resumed_model, tail = run_asd(data, seeds, sched, cfg, MixMatchConfig(), TINY, batch_size=16,
                                  on_epoch=rec, state=state)
    assert tail == full[2:]
    assert parameter_checksum(resumed_model) == parameter_checksum(full_model)


def test_small_cnn_total_loss_gradient_matches_finite_differences(monkeypatch):
    torch.manual_seed(0)
    model = build_model(TINY, seed=7).double()
    model.eval()  # fixed batch-norm statistics keep the loss a smooth function of the weights
    data = toy_data(n=6)
    x = to_tensor(data.images).double()
    y = torch.as_tensor(data.labels)
    cfg = MixMatchConfig()

    import asd.losses as L
    from asd.losses import guess_labels, mixmatch_batch_loss

    # guessed labels are targets, not differentiated through; hold them fixed for the perturbed losses too
    frozen = guess_labels(model, [x[3:]] * cfg.augmentations, cfg.temperature)
    monkeypatch.setattr(L, "guess_labels", lambda *a, **k: frozen)

    def loss():
        return mixmatch_batch_loss(model, x[:3], y[:3], x[3:], cfg, np.random.default_rng(0),
                                   augment=identity_augment).total

    model.zero_grad()
    loss().backward()
    params = [p for p in model.parameters()]
    rng = np.random.default_rng(1)
    for p in params:
        flat = p.data.view(-1)
        for j in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
            orig = flat[j].item()
            h = 1e-6
            flat[j] = orig + h
            up = loss().item()
            flat[j] = orig - h
            down = loss().item()
            flat[j] = orig
            fd = (up - down) / (2 * h)
            g = p.grad.view(-1)[j].item()
            assert abs(fd - g) <= 1e-3 * max(abs(fd), abs(g), 1e-4)
