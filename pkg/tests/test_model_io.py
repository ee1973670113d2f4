import struct
import zlib

import numpy as np
import pytest

from factories import random_spec

from bnnvpr.arch import desk_spec, preset
from bnnvpr.data import (
    DatasetError,
    list_images,
    load_dataset,
    load_image,
    parse_ground_truth,
    save_image,
)
from bnnvpr.metrics import size_breakdown
from bnnvpr.model_io import (
    ChecksumError,
    ModelFileError,
    UnsupportedVersionError,
    accounting,
    dumps,
    load,
    load_checkpoint,
    loads,
    read_descriptors,
    save,
    save_checkpoint,
    write_descriptors,
)
from bnnvpr.network import forward, random_frozen
from bnnvpr.train import TrainConfig, train
from bnnvpr.vpr import normalize


def test_round_trip_random_models():
    rng = np.random.default_rng(0)
    for trial in range(200):
        net = random_frozen(random_spec(rng), seed=trial)
        data = dumps(net)
        back = loads(data)
        assert back == net
        assert dumps(back) == data


def test_round_trip_preserves_forward(tmp_path):
    net = random_frozen(desk_spec(), seed=5)
    path = tmp_path / "m.bnvp"
    assert save(net, path) == path.stat().st_size
    img = np.random.default_rng(5).uniform(0, 1, (32, 32, 3))
    assert forward(load(path), img).tobytes() == forward(net, img).tobytes()


def test_every_byte_flip_in_payload_is_detected():
    net = random_frozen(random_spec(np.random.default_rng(1)), seed=1)
    data = bytearray(dumps(net))
    for pos in range(12, len(data)):
        corrupt = bytearray(data)
        corrupt[pos] ^= 0xFF
        with pytest.raises(ModelFileError):
            loads(bytes(corrupt))


def test_checksum_error_type():
    data = bytearray(dumps(random_frozen(desk_spec(), seed=0)))
    data[40] ^= 1
    with pytest.raises(ChecksumError):
        loads(bytes(data))


def test_bad_magic_version_and_truncation():
    data = dumps(random_frozen(desk_spec(), seed=0))
    with pytest.raises(ModelFileError):
        loads(b"XXXX" + data[4:])
    with pytest.raises(UnsupportedVersionError):
        loads(data[:4] + struct.pack("<H", 2) + data[6:])
    with pytest.raises(ModelFileError):
        loads(data[:-10])
    with pytest.raises(ModelFileError):
        loads(b"")


def test_consistent_but_malformed_payload():
    # a payload with a valid checksum that does not decode is still rejected
    payload = b"\x05\x00abc"
    header = struct.pack("<4sHHI", b"BNVP", 1, 0, len(payload))
    with pytest.raises(ModelFileError):
        loads(header + payload + struct.pack("<I", zlib.crc32(payload)))


def test_file_size_matches_size_model():
    net = random_frozen(preset("floppynet"), seed=0)
    acct = accounting(net)
    assert acct.total == len(dumps(net))
    expected = size_breakdown(preset("floppynet")).total_bytes
    # packed rows round each layer up to whole 64-bit words
    assert 0 <= acct.counted_bytes - expected < 8 * 3
    assert acct.bn_stats_bytes == acct.bn_affine_bytes
    assert acct.framing_bytes < 512


def test_descriptor_file_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    descs = [normalize(rng.normal(size=10), "pool5", f"img{i}") for i in range(4)]
    write_descriptors(tmp_path / "d.bin", descs)
    back = read_descriptors(tmp_path / "d.bin")
    assert [d.image_id for d in back] == [d.image_id for d in descs]
    for a, b in zip(descs, back):
        # the file stores f32, and every f32 value comes back exactly
        np.testing.assert_array_equal(b.values, a.values.astype(np.float32))
    raw = (tmp_path / "d.bin").read_bytes()
    write_descriptors(tmp_path / "e.bin", back)
    assert (tmp_path / "e.bin").read_bytes() == raw
    assert len(raw) == 4 * (4 + 4 * 10)
    assert struct.unpack_from("<I", raw)[0] == 10


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    images = rng.uniform(0, 1, (8, 32, 32, 3)).astype(np.float32)
    model = train(images, np.arange(8) % 2, desk_spec(), TrainConfig(epochs=1, num_classes=2, batch_size=4))
    save_checkpoint(model, tmp_path / "c.npz")
    back = load_checkpoint(tmp_path / "c.npz")
    assert back.spec == model.spec and back.config == model.config and back.history == model.history
    for k, v in model.state.items():
        np.testing.assert_array_equal(back.state[k], v)


# --------------------------------------------------------------------------
# dataset ingestion


def _write_images(folder, names, shape=(20, 24, 3), seed=0):
    folder.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for n in names:
        save_image(folder / n, rng.uniform(0, 1, shape))


def test_list_images_bytewise_order(tmp_path):
    _write_images(tmp_path, ["b.png", "B.png", "a.png", "A10.png", "A2.png"])
    (tmp_path / "notes.txt").write_text("x")
    assert [p.name for p in list_images(tmp_path)] == ["A10.png", "A2.png", "B.png", "a.png", "b.png"]


def test_load_image_resizes_and_scales(tmp_path):
    _write_images(tmp_path, ["x.png"])
    img = load_image(tmp_path / "x.png", (32, 16))
    assert img.shape == (32, 16, 3) and img.dtype == np.float32
    assert 0.0 <= img.min() and img.max() <= 1.0


def test_netpbm_images(tmp_path):
    _write_images(tmp_path, ["x.ppm"])
    (tmp_path / "g.pgm").write_bytes(b"P5\n2 1\n255\n\x00\xff")
    assert load_image(tmp_path / "x.ppm").shape == (20, 24, 3)
    np.testing.assert_array_equal(load_image(tmp_path / "g.pgm")[0, :, 0], [0.0, 1.0])


def test_undecodable_image_named_in_error(tmp_path):
    (tmp_path / "broken.png").write_bytes(b"not an image")
    with pytest.raises(DatasetError, match="broken.png"):
        load_image(tmp_path / "broken.png")


def test_ground_truth_formats():
    gt = parse_ground_truth("tolerance,2\n")
    assert gt.mode == "frame_tolerance" and gt.tolerance == 2
    gt = parse_ground_truth("query,ref\nq1,r1\nq1,r2\n# note\nq2,r3\n")
    assert gt.pairs == {"q1": frozenset({"r1", "r2"}), "q2": frozenset({"r3"})}


@pytest.mark.parametrize("text,line", [("q1,r1\nq2\n", 2), ("tolerance,x\n", 1), ("q1,r1\n\nq2,r2,r3\n", 3)])
def test_ground_truth_malformed_line(text, line):
    with pytest.raises(DatasetError, match=f"line {line}"):
        parse_ground_truth(text)


def test_load_dataset(tmp_path):
    _write_images(tmp_path / "ref", ["0002.png", "0001.png"])
    _write_images(tmp_path / "query", ["0001.png", "0002.png"], seed=1)
    (tmp_path / "gt.csv").write_text("tolerance,0\n")
    ds = load_dataset(tmp_path / "ref", tmp_path / "query", tmp_path / "gt.csv", (16, 16, 3))
    assert [r for r, _ in ds.references] == ["0001", "0002"]
    assert ds.queries[0][1].shape == (16, 16, 3)
    (tmp_path / "gt2.csv").write_text("0001,0001\n")
    with pytest.raises(KeyError):
        load_dataset(tmp_path / "ref", tmp_path / "query", tmp_path / "gt2.csv", (16, 16, 3))
