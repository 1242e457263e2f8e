import pytest

from bagreid.manifest import MANIFEST_FILENAME, load_manifest
from bagreid.synth import DomainNoise, SynthConfig, generate_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Six identities, two views per domain, no capture loss; shared across tests."""
    root = tmp_path_factory.mktemp("tiny_ds")
    config = SynthConfig(
        n_identities=6,
        bhs_views=2,
        checkpoint_views=2,
        image_size=96,
        domain_noise=DomainNoise(
            checkpoint_blur=0.5, color_shift=0.4, occlusion_prob=0.2, missing_view_prob=0.0
        ),
        distractor_similarity=0.2,
        seed=11,
    )
    manifest = generate_dataset(config, root)
    return root, manifest, config


@pytest.fixture(scope="session")
def tiny_manifest(tiny_dataset):
    root, _, _ = tiny_dataset
    return load_manifest(root / MANIFEST_FILENAME)
