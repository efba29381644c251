"""Shared fixtures: the default capture dataset is built once per session."""

from dataclasses import dataclass
from pathlib import Path
from time import perf_counter

import pytest

from headlab.dataset import DatasetConfig, DatasetManifest, generate_dataset
from headlab.engine import NoiseSchedule, make_schedule
from headlab.scene import ObjectSpec, default_catalog


@dataclass(frozen=True)
class BuiltDataset:
    root: Path
    manifest: DatasetManifest
    catalog: dict[str, ObjectSpec]
    build_seconds: float


@pytest.fixture(scope="session")
def catalog() -> dict[str, ObjectSpec]:
    return default_catalog()


@pytest.fixture(scope="session")
def schedule() -> NoiseSchedule:
    return make_schedule(50)


@pytest.fixture(scope="session")
def dataset(tmp_path_factory, catalog) -> BuiltDataset:
    """The full default dataset: 60 prompts x 12 seeds = 720 samples."""
    root = tmp_path_factory.mktemp("data") / "full"
    start = perf_counter()
    manifest = generate_dataset(DatasetConfig(), catalog, root)
    return BuiltDataset(root=root, manifest=manifest, catalog=catalog,
                        build_seconds=perf_counter() - start)


TINY_CONFIG = DatasetConfig(
    subjects=("cat", "dog", "fox", "owl"),
    objects=("bench", "kite", "drum"),
    seeds_per_prompt=4,
    critical_steps=(0, 2, 4, 8, 16),
    split_fractions=(0.5, 0.25, 0.25),
)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, catalog) -> BuiltDataset:
    """A 48-sample dataset for plumbing tests that do not need statistics."""
    root = tmp_path_factory.mktemp("data") / "tiny"
    start = perf_counter()
    manifest = generate_dataset(TINY_CONFIG, catalog, root)
    return BuiltDataset(root=root, manifest=manifest, catalog=catalog,
                        build_seconds=perf_counter() - start)
