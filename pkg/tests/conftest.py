import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vrf.synth import SynthSpec, generate_dataset
from vrf.tensor_io import load_manifest
from vrf.zsf_index import build_zsf

settings.register_profile(
    "suite", max_examples=50, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")

# Small planted dataset shared by module tests; the acceptance suite
# builds the full default-sized one itself.
SMALL_SPEC = SynthSpec(
    n_train=1500, n_id_test=600, n_ood_test=600,
    dim=16, num_classes=5, seed=99, zsf_fraction=0.3,
)


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth-small")
    return load_manifest(generate_dataset(SMALL_SPEC, out))


@pytest.fixture(scope="session")
def small_index(small_manifest):
    train = small_manifest.load_split("train")
    return build_zsf(train.labels, train.logits_zs, train.logits_ft,
                     train.features_ft, p_percent=0.5)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
