import json

import numpy as np
import pytest
import torch
from PIL import Image


class PairModel(torch.nn.Module):
    """Toy encoder emitting (features, logits) like a fine-tuned checkpoint."""

    def __init__(self, dim=8, num_classes=3):
        super().__init__()
        self.conv = torch.nn.Conv2d(3, dim, 3, stride=2)
        self.head = torch.nn.Linear(dim, num_classes)

    def forward(self, x):
        h = self.conv(x).mean(dim=(2, 3))
        return h, self.head(h)


class FeatureModel(torch.nn.Module):
    """Toy encoder emitting features only; logits come from a class matrix."""

    def __init__(self, dim=8):
        super().__init__()
        self.conv = torch.nn.Conv2d(3, dim, 3, stride=2)

    def forward(self, x):
        return self.conv(x).mean(dim=(2, 3))


@pytest.fixture(scope="session")
def toy_assets(tmp_path_factory):
    """Image folder + scripted checkpoints + class embeddings + job JSON."""
    root = tmp_path_factory.mktemp("extractor-assets")
    rng = np.random.default_rng(2024)

    data_dir = root / "images"
    for cls in ("cat", "dog", "eel"):
        cls_dir = data_dir / cls
        cls_dir.mkdir(parents=True)
        for i in range(4):
            arr = rng.integers(0, 256, size=(12, 12, 3), dtype=np.uint8)
            Image.fromarray(arr).save(cls_dir / f"img_{i}.png")

    torch.manual_seed(7)
    zs_path = root / "zs.pt"
    ft_path = root / "ft.pt"
    torch.jit.save(torch.jit.script(FeatureModel()), zs_path)
    torch.jit.save(torch.jit.script(PairModel()), ft_path)

    emb_path = root / "zs_head.npy"
    np.save(emb_path, rng.standard_normal((3, 8)).astype(np.float32))

    out_dir = root / "out"
    job_doc = {
        "zs_checkpoint": "zs.pt",
        "ft_checkpoint": "ft.pt",
        "zs_class_embeddings": "zs_head.npy",
        "dataset_dir": "images",
        "split_name": "test",
        "split_role": "id-test",
        "output_dir": "out",
        "batch_size": 5,
        "image_size": 16,
    }
    job_path = root / "job.json"
    job_path.write_text(json.dumps(job_doc, indent=2))
    return {"root": root, "data_dir": data_dir, "zs": zs_path, "ft": ft_path,
            "embeddings": emb_path, "out_dir": out_dir, "job_path": job_path,
            "job_doc": job_doc}
