import json
import sys

import pytest

from pavement_assess.pipeline import PipelineConfig
from pavement_assess.synthetic import make_dataset, write_dataset


def write_workspace(root, n=4, size=8, seed=0, epochs=3, pci_epochs=5):
    """Synthetic dataset plus a quick-to-train config; returns the config path."""
    samples = make_dataset(n, size, size, seed=seed)
    write_dataset(samples, root / "annotations.jsonl", root / "images")
    config = PipelineConfig(seed=seed).to_dict()
    config["data"] = {"annotations": "annotations.jsonl", "images_dir": "images", "features_dir": None}
    config["model"].update(d_model=16, ffn_hidden=16, pooled_h=2, pooled_w=2)
    config["train"].update(epochs=epochs, pci_epochs=pci_epochs)
    path = root / "config.json"
    path.write_text(json.dumps(config, indent=2), encoding="utf-8")
    return path


@pytest.fixture
def workspace(tmp_path):
    return write_workspace(tmp_path)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in module.report_lines():
        terminalreporter.write_line(line)
