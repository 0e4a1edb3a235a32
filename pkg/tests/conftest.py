import os
import shutil

import pytest

from ehrstream.ingest import IngestConfig, ingest
from ehrstream.descriptor import parse_descriptor
from ehrstream.synth import SynthConfig, generate

FIXTURE_DIR = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture
def mini_dataset(tmp_path):
    """The committed two-table fixture copied into a scratch directory."""
    for name in ("mini.yaml", "admissions.csv", "diagnoses.csv"):
        shutil.copy(os.path.join(FIXTURE_DIR, name), tmp_path / name)
    return str(tmp_path / "mini.yaml")


@pytest.fixture
def mini_descriptor(mini_dataset):
    with open(mini_dataset, "r", encoding="utf-8") as f:
        return parse_descriptor(f.read())


def ingest_config(out_dir, **kwargs) -> IngestConfig:
    kwargs.setdefault("mem_budget_bytes", 256 * 1024 * 1024)
    return IngestConfig(out_dir=str(out_dir), **kwargs)


@pytest.fixture
def mini_cache(mini_dataset, tmp_path):
    """Ingested cache of the mini fixture."""
    cache_dir = tmp_path / "cache"
    with open(mini_dataset, "r", encoding="utf-8") as f:
        descriptor = parse_descriptor(f.read())
    ingest(
        descriptor,
        ingest_config(cache_dir),
        base_dir=os.path.dirname(mini_dataset),
    )
    return str(cache_dir)


@pytest.fixture(scope="session")
def synth_small(tmp_path_factory):
    """Session-scoped 120-patient synthetic dataset."""
    root = tmp_path_factory.mktemp("synth-small")
    cfg = SynthConfig(n_patients=120, death_rate=0.15, seed=7)
    return generate(cfg, str(root))


@pytest.fixture(scope="session")
def synth_small_cache(synth_small, tmp_path_factory):
    cache_dir = tmp_path_factory.mktemp("synth-small-cache") / "cache"
    base = os.path.dirname(synth_small)
    with open(synth_small, "r", encoding="utf-8") as f:
        descriptor = parse_descriptor(f.read())
    ingest(descriptor, ingest_config(cache_dir), base_dir=base)
    return str(cache_dir)
