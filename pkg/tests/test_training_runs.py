from dataclasses import replace

import numpy as np
import pytest

from mspcaps.attack import attack_dataset, AttackConfig, robustness_sweep
from mspcaps.configuration import RunConfig
from mspcaps.data import AugmentPolicy, Dataset, load_dataset
from mspcaps.graph import LAST_CHECKPOINT, run_training
from mspcaps.model import ModelConfig, build_model
from mspcaps.optim import AdamW, Schedule
from mspcaps.train import evaluate, load_checkpoint, train_epoch, training_steps

pytestmark = pytest.mark.slow

EPSILONS = [0.0, 0.05, 0.1, 0.2, 0.3]
SLACK = 0.05


def quadrant_data(n, split, seed):
    """Four classes told apart by which quadrant of a 16x16 image is bright."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 4
    images = 0.2 * rng.uniform(size=(n, 3, 16, 16))
    for i, label in enumerate(labels):
        r, c = divmod(int(label), 2)
        images[i, :, 8 * r : 8 * r + 8, 8 * c : 8 * c + 8] += 0.7
    return Dataset(images.astype(np.float32), labels, split, "quadrants", AugmentPolicy())


@pytest.fixture(scope="module")
def quadrants():
    """A small model trained for eight epochs on the quadrant task, with its epoch losses."""
    train, test = quadrant_data(64, "train", 0), quadrant_data(32, "test", 1)
    config = ModelConfig.preset(
        "tiny",
        channels=(8, 8, 8),
        caps_dims=(4, 4, 8),
        d_mid=8,
        d_out=8,
        patch_size=2,
        num_classes=4,
        dropout_rate=0.0,
        resolution=16,
    )
    model = build_model(config, seed=0)
    optimizer = AdamW(model.named_parameters(), lr=5e-3)
    steps = training_steps(len(train), 16)
    schedule = Schedule(base_lr=5e-3, total_epochs=8, steps_per_epoch=steps, warmup_epochs=1)
    rng = np.random.default_rng(0)
    losses = []
    for epoch in range(8):
        metrics = train_epoch(
            model, train, optimizer, schedule, rng, epoch=epoch, global_step=epoch * steps, batch_size=16
        )
        losses.append(metrics.loss)
    return model, test, losses


def test_loss_decreases_over_the_first_epochs(quadrants):
    _, _, losses = quadrants
    assert losses[2] < losses[0]
    assert losses[-1] < losses[0]


def test_accuracy_degrades_with_the_attack_budget(quadrants):
    model, test, _ = quadrants
    clean = evaluate(model, test).accuracy
    for kind in ("fgsm", "bim"):
        curve = robustness_sweep(model, test, EPSILONS, kind, steps=5, batch_size=16)
        accuracies = [accuracy for _, accuracy in curve.points]
        assert accuracies[0] == clean
        assert all(later <= earlier + SLACK for earlier, later in zip(accuracies, accuracies[1:]))
        assert all(accuracy <= clean + SLACK for accuracy in accuracies)


def test_bim_is_at_least_as_strong_as_fgsm(quadrants):
    model, test, _ = quadrants
    for eps in EPSILONS[1:]:
        fgsm_data = attack_dataset(model, test, "fgsm", AttackConfig.for_kind("fgsm", eps), batch_size=16)
        bim_data = attack_dataset(model, test, "bim", AttackConfig.for_kind("bim", eps, steps=5), batch_size=16)
        assert evaluate(model, bim_data).accuracy <= evaluate(model, fgsm_data).accuracy + SLACK


# Runs on the real datasets under MSPCAPS_DATA_DIR


@pytest.fixture(scope="module")
def mnist_run(data_dir, tmp_path_factory):
    run = RunConfig(
        dataset="mnist",
        data_dir=str(data_dir),
        epochs=5,
        timing=False,
        out_dir=str(tmp_path_factory.mktemp("mnist")),
    ).resolve()
    output = run_training(run)
    checkpoint = load_checkpoint(f"{run.out_dir}/{LAST_CHECKPOINT}")
    model = build_model(checkpoint.config)
    checkpoint.restore(model)
    return output, model


def test_mnist_five_epochs_reach_97_percent(mnist_run):
    output, _ = mnist_run
    assert output["final"]["accuracy"] >= 0.97


def test_mnist_model_robustness_surface(mnist_run, data_dir):
    _, model = mnist_run
    test = load_dataset("mnist", data_dir, "test", limit=1000)
    clean = evaluate(model, test).accuracy
    curve = robustness_sweep(model, test, attack_kind="fgsm")
    accuracies = [accuracy for _, accuracy in curve.points]
    assert accuracies[0] == clean
    assert all(later <= earlier + 0.01 for earlier, later in zip(accuracies, accuracies[1:]))
    assert dict(curve.points)[0.1] < dict(curve.points)[0.01]

    bim = robustness_sweep(model, test, [0.05, 0.1], "bim")
    fgsm = dict(curve.points)
    assert all(accuracy <= fgsm[eps] + 0.01 for eps, accuracy in bim.points)


def test_mnist_loss_decreases_over_three_epochs(data_dir, tmp_path):
    run = RunConfig(
        dataset="mnist",
        data_dir=str(data_dir),
        epochs=3,
        limit_train=5000,
        timing=False,
        out_dir=str(tmp_path / "run"),
    ).resolve()
    history = run_training(run)["history"]
    losses = [row.loss for row in history if row.split == "train"]
    assert losses[2] < losses[0]


def test_tiny_model_overfits_32_mnist_images(data_dir):
    images = load_dataset("mnist", data_dir, "train", limit=32)
    fixed = replace(images, policy=replace(images.policy, rotation_deg=None))
    model = build_model(ModelConfig.preset("tiny", in_channels=1, dropout_rate=0.0))
    optimizer = AdamW(model.named_parameters(), lr=1e-3)
    schedule = Schedule(base_lr=1e-3, total_epochs=200, steps_per_epoch=1, warmup_epochs=0)
    rng = np.random.default_rng(0)
    accuracies = []
    for step in range(200):
        metrics = train_epoch(model, fixed, optimizer, schedule, rng, epoch=step, global_step=step, batch_size=32)
        accuracies.append(metrics.accuracy)
        if metrics.accuracy == 1.0:
            break
    assert max(accuracies) == 1.0


def test_cifar_subset_reaches_55_percent(data_dir, tmp_path):
    run = RunConfig(
        dataset="cifar10",
        data_dir=str(data_dir),
        epochs=20,
        limit_train=10000,
        timing=False,
        out_dir=str(tmp_path / "run"),
    ).resolve()
    assert run_training(run)["final"]["accuracy"] >= 0.55
