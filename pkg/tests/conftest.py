import json

import pytest

from tt2vfin.ingest import write_csv
from tt2vfin.synthetic import latent_pair, sine_series

TINY_MODEL = {"k": 3, "d_model": 8, "n_heads": 2, "n_layers": 1, "d_ff": 12, "window": 8}


@pytest.fixture
def data_dir(tmp_path):
    d = tmp_path / "data"
    d.mkdir()
    a, b = latent_pair(400, seed=0)
    write_csv(a, d / "AAA.csv")
    write_csv(b, d / "BBB.csv")
    write_csv(sine_series(400), d / "SINE.csv")
    return d


@pytest.fixture
def make_config(tmp_path, data_dir):
    def make(name="run.json", **fields):
        doc = {"data": {"AAA": "data/AAA.csv", "BBB": "data/BBB.csv"},
               "model": TINY_MODEL, "train": {"max_epochs": 3, "patience": 3},
               "out": str(tmp_path / "out")}
        doc.update(fields)
        path = tmp_path / name
        path.write_text(json.dumps(doc))
        return path
    return make
