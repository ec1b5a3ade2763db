import numpy as np
import pytest
import torch

from sandwich.data import DatasetDescriptor, TrialTensor, write_dataset
from sandwich.synth import make_beetl_mini

torch.set_num_threads(1)


def make_trials(n_trials=6, n_channels=3, n_samples=40, n_labels=2, n_subjects=2,
                dataset_id="toy", seed=0):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((n_trials, n_channels, n_samples)).astype(np.float32)
    labels = np.arange(n_trials) % n_labels
    subjects = np.repeat(np.arange(n_subjects), int(np.ceil(n_trials / n_subjects)))[:n_trials]
    desc = DatasetDescriptor(
        dataset_id=dataset_id,
        channel_names=tuple(f"E{i}" for i in range(n_channels)),
        sampling_rate_hz=100.0,
        label_space=tuple((i, f"L{i}") for i in range(n_labels)),
        subject_ids=tuple(f"s{i}" for i in range(n_subjects)),
    )
    return desc, TrialTensor(data, labels, subjects, dataset_id)


@pytest.fixture
def toy():
    return make_trials()


@pytest.fixture(scope="session")
def beetl_mini_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("beetl_mini")
    for desc, trials in make_beetl_mini(42):
        write_dataset(desc, trials, root / desc.dataset_id)
    return root


# -- miniature federation fixtures --------------------------------------------

from sandwich.backbones import (  # noqa: E402
    SandwichModel, build_head_spec, build_inception_branch, build_inception_trunk,
    build_shallow_branch, build_shallow_trunk,
)
from sandwich.federation import NodeData  # noqa: E402

MINI_LABELS = {
    "a_src": ("LH", "RH", "Feet"),
    "b_src": ("LH", "RH"),
    "c_src": ("LH", "RH", "Feet", "Tongue"),
    "t_tgt": ("Rest", "LH", "RH", "Feet"),
}


def labelled_dataset(dataset_id, labels, n_channels=2, n_samples=40, n_subjects=2,
                     per_subject=20, seed=0):
    rng = np.random.default_rng(seed)
    n = n_subjects * per_subject
    y = np.tile(np.arange(per_subject) % len(labels), n_subjects)
    x = rng.standard_normal((n, n_channels, n_samples)).astype(np.float32)
    # a weak class-dependent offset keeps the toy task learnable
    x += 0.5 * y[:, None, None].astype(np.float32)
    desc = DatasetDescriptor(dataset_id, tuple(f"E{i}" for i in range(n_channels)), 100.0,
                             tuple(enumerate(labels)), tuple(f"s{i}" for i in range(n_subjects)))
    return desc, TrialTensor(x, y, np.repeat(np.arange(n_subjects), per_subject), dataset_id)


def mini_datas(ids, n_channels=2, n_samples=40, val_per_subject=4, seed=0):
    out = {}
    for k, d in enumerate(sorted(ids)):
        desc, t = labelled_dataset(d, MINI_LABELS[d], n_channels, n_samples, seed=seed + k)
        if d.endswith("tgt"):
            is_val = np.zeros(t.n_trials, bool)
            for s in np.unique(t.subject_index):
                is_val[np.flatnonzero(t.subject_index == s)[-val_per_subject:]] = True
            out[d] = NodeData(desc, t.take(np.flatnonzero(~is_val)), t.take(np.flatnonzero(is_val)),
                              "target")
        else:
            out[d] = NodeData(desc, t, None, "source")
    return out


def mini_model(datas, head="unified", transfer="none", backbone="shallow_conv", dropout=0.0,
               shared_branch=False, seed=42):
    n_samples = next(iter(datas.values())).train.n_samples
    if backbone == "shallow_conv":
        branches = {d: build_shallow_branch(v.train.n_channels, filters=2, temporal_kernel=5, pool=8,
                                            pool_stride=4, reduced=2, dropout=dropout)
                    for d, v in datas.items()}
        trunk = build_shallow_trunk(transfer, width=2, n_common=2, projection_width=3, deepset_hidden=2)
    else:
        branches = {d: build_inception_branch(v.train.n_channels, filters_per_path=2, kernel=5,
                                              dilations=(2, 1), spatial_filters=4, pool=2,
                                              dropout=dropout)
                    for d, v in datas.items()}
        trunk = build_inception_trunk(transfer, width=4, kernel=3, dilations=(2, 1),
                                      block_kernels=(3, 3), dropout=dropout, projection_width=3,
                                      deepset_hidden=2)
    spaces = {d: v.descriptor.n_classes for d, v in datas.items()}
    return SandwichModel(branches, trunk, build_head_spec(head, spaces), n_samples,
                         shared_branch=shared_branch, seed=seed)


# -- acceptance summary ---------------------------------------------------------

ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
