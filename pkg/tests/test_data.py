import configparser

import numpy as np
import pytest

from lmconv.config import ConfigError, load_config, parse_config
from lmconv.data import DatasetSpec, bars, binarize, requantize, split, stripes
from lmconv.errors import InvalidArgument
from lmconv.formats import save_idx, write_pgm


def test_stripes_have_period_two(rng):
    x = stripes(50, 6, 5, rng)
    assert x.shape == (50, 1, 6, 5)
    assert np.array_equal(x[:, :, :-2], x[:, :, 2:])
    assert (x == x[:, :, :, :1]).all()
    assert len({tuple(img.ravel()) for img in x}) == 4


def test_bars_are_full_length(rng):
    x = bars(40, 5, 5, rng)[:, 0]
    for img in x:
        rows_const = (img == img[:, :1]).all()
        cols_const = (img == img[:1, :]).all()
        assert rows_const or cols_const


def test_binarize_is_bernoulli_of_intensity():
    rng = np.random.default_rng(0)
    img = np.full((20000,), 64)
    assert abs(binarize(img, rng).mean() - 64 / 255) < 0.01
    assert not binarize(np.zeros(10), rng).any()
    assert binarize(np.full(10, 255), rng).all()


def test_requantize_and_split():
    assert requantize(np.array([255, 128, 7]), 8, 5).tolist() == [31, 16, 0]
    data = np.arange(10)
    a1, b1 = split(data, 0.7, 3)
    a2, b2 = split(data, 0.7, 3)
    assert np.array_equal(a1, a2) and len(a1) == 7
    assert sorted(np.concatenate([a1, b1]).tolist()) == list(range(10))


def test_idx_source_binarized(tmp_path, rng):
    imgs = rng.integers(0, 256, (20, 6, 6)).astype(np.uint8)
    save_idx(imgs, tmp_path / "imgs.idx")
    train, test = DatasetSpec(f"idx:{tmp_path / 'imgs.idx'}", binarize=True, train_fraction=0.75).load()
    assert train.shape == (15, 1, 6, 6) and test.shape == (5, 1, 6, 6)
    assert set(np.unique(train)) <= {0, 1}


def test_dir_source(tmp_path, rng):
    for i in range(4):
        write_pgm(rng.integers(0, 256, (3, 3)), tmp_path / f"{i}.pgm")
    train, test = DatasetSpec(f"dir:{tmp_path}", bits=5, train_fraction=0.5).load()
    assert len(train) == 2 and train.max() < 32


def test_missing_sources():
    with pytest.raises(InvalidArgument, match="does not exist"):
        DatasetSpec("idx:/no/such/file").load()
    with pytest.raises(InvalidArgument):
        DatasetSpec("synthetic:clouds").load()
    with pytest.raises(InvalidArgument):
        DatasetSpec("ftp:x").load()


def test_config_parsing(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("[data]\nsource = synthetic:stripes\nheight = 4\nwidth = 4\nbinarize = yes\n"
                 "[model]\nhidden = 8\ndepth = 2\ndilations = 1, 2\n"
                 "[train]\norders = s0..s3\nlr = 1e-3\n")
    run = load_config(p)
    assert run.data.height == 4 and run.data.binarize is True
    assert run.model == {"hidden": 8, "depth": 2, "dilations": (1, 2)}
    assert run.train == {"orders": "s0..s3", "lr": 1e-3}


@pytest.mark.parametrize("text,field", [
    ("[model]\nhidden = 3\n", "data"),
    ("[data]\nbits = 8\n", "data.source"),
    ("[data]\nsource = x\nheight = tall\n", "data.height"),
    ("[data]\nsource = x\n[model]\nwidth = 3\n", "model.width"),
    ("[data]\nsource = x\n[train]\nlr = fast\n", "train.lr"),
])
def test_config_errors_name_the_field(text, field):
    cp = configparser.ConfigParser()
    cp.read_string(text)
    with pytest.raises(ConfigError) as exc:
        parse_config(cp)
    assert exc.value.field == field


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")
