import pytest

from pconet import data, tensor


@pytest.fixture(params=tensor.available_backends())
def backend(request):
    """Run the test once per available kernel backend."""
    previous = tensor.get_backend()
    tensor.set_backend(request.param)
    yield request.param
    tensor.set_backend(previous)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """The bundled 8-image synthetic dataset: 4 bright-blob infected,
    4 dark-field not infected."""
    root = tmp_path_factory.mktemp("synth")
    data.make_synthetic_dataset(root, per_class=4, seed=42)
    return root


@pytest.fixture()
def synth_items(synth_root):
    items = data.scan_dataset(synth_root)
    for it in items:
        it.load()
    return items
