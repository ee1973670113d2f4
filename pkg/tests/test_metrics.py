import pytest

from bnnvpr.arch import LayerKind, NetworkSpec, parse_layers, preset
from bnnvpr.metrics import (
    BINARY_MACS_PER_CYCLE,
    EffReport,
    efficiency_csv,
    mac_breakdown,
    memory_efficiency,
    projected_speedup,
    s_p100,
    size_breakdown,
)
from bnnvpr.vpr import MatchReport, MatchResult

# name, precision, S_P100, size (KiB), eta_m as listed in the efficiency table
EFFICIENCY_ROWS = [
    ("HybridNet", "Full", 33.57, 16957, 505.12),
    ("Baseline", "Full", 62.0, 14648, 236.3),
    ("VGG-16", "Full", 66.13, 57487, 869.3),
    ("BinaryNet", "1-bit", 56.4, 466, 8.26),
    ("ShallowNet", "1-bit", 55.5, 154, 2.77),
    ("FloppyNet", "1-bit", 58.2, 154, 2.65),
    ("FloppyNet-2", "2-bit", 58.22, 306, 5.26),
    ("FloppyNet-4", "4-bit", 61.02, 608, 9.96),
    ("FloppyNet-8", "8-bit", 61.52, 1213, 19.72),
]
RANKING = [
    "FloppyNet", "ShallowNet", "FloppyNet-2", "BinaryNet", "FloppyNet-4",
    "FloppyNet-8", "Baseline", "HybridNet", "VGG-16",
]


def report(n_correct, total):
    return MatchReport(tuple(MatchResult(f"q{i}", "r", 0.0, i < n_correct) for i in range(total)))


def test_s_p100_examples():
    assert s_p100(report(150, 200)) == 75.0
    assert s_p100(report(7, 7)) == 100.0
    with pytest.raises(ValueError):
        s_p100(report(0, 0))


def test_s_p100_pooling_equals_mean_for_equal_sets():
    sets = [report(c, 200) for c in (120, 77, 200, 3, 150)]
    mean = sum(s_p100(r) for r in sets) / len(sets)
    assert s_p100(sets) == pytest.approx(mean)


@pytest.mark.parametrize("name,prec,score,size,eta", EFFICIENCY_ROWS)
def test_eta_m_rounds_to_listed_value(name, prec, score, size, eta):
    decimals = len(repr(eta).split(".")[1])
    assert round(memory_efficiency(score, size), decimals) == eta


def test_eta_m_ranking():
    rows = [EffReport(n, p, s, k) for n, p, s, k, _ in EFFICIENCY_ROWS]
    assert [r.name for r in sorted(rows, key=lambda r: r.eta_m)] == RANKING


def test_eta_m_requires_positive_score():
    with pytest.raises(ValueError):
        memory_efficiency(0.0, 154)


def test_efficiency_csv_columns():
    text = efficiency_csv([EffReport("FloppyNet", "1-bit", 58.2, 154)])
    assert text.splitlines()[0] == "name,precision,s_p100,size_kib,eta_m"


# --------------------------------------------------------------------------
# size accounting; byte counts below are products of the layer hyperparameters


def test_floppynet_size_table():
    t = size_breakdown(preset("floppynet"), 1)
    assert [round(r.cum_binarizable / 1e6, 2) for r in t.rows if r.layer.startswith("conv")] == [0.03, 0.65, 1.24]
    assert [r.cum_non_binarizable for r in t.rows if r.layer.startswith("conv")] == [0, 192, 704]
    assert t.total_bytes == (34848 + 614400 + 589824) // 8 + 4 * 704
    assert abs(t.total_kib - 154) <= 1
    assert t.at("conv1").size_kib == pytest.approx(4.25, abs=0.01)
    assert t.at("conv2").size_kib == pytest.approx(80, abs=0.01)


@pytest.mark.parametrize("k,kib", [(2, 306), (4, 608), (8, 1213)])
def test_kbit_sizes(k, kib):
    for spec in (preset("floppynet"), preset(f"floppynet_{k}")):
        t = size_breakdown(spec, k if spec.name == "floppynet" else None)
        assert t.total_bytes == -(-k * 1239072 // 8) + 4 * 704
        assert abs(t.total_kib - kib) <= 2


def test_binarynet_and_baseline_sizes():
    binary = size_breakdown(preset("binarynet"))
    full = size_breakdown(preset("baseline"))
    assert abs(binary.at("pool5").size_kib - 466) <= 1
    assert full.at("pool5").size_mib == pytest.approx(14.3, rel=0.01)
    assert full.at("fc7").size_mib == pytest.approx(222.37, rel=0.01)
    assert binary.at("fc7").size_kib == pytest.approx(7156, abs=1)
    for layer in ("conv2", "conv3", "conv4", "conv5", "pool5", "fc6", "fc7"):
        ratio = 100 * binary.at(layer).size_bytes / full.at(layer).size_bytes
        assert 3.0 <= ratio <= 3.3, layer
    assert 100 * binary.at("conv1").size_bytes / full.at("conv1").size_bytes == pytest.approx(3.12, abs=0.01)


def test_floppynet_ratios_against_other_networks():
    floppy = size_breakdown(preset("floppynet")).at("pool5").size_bytes
    assert 100 * floppy / size_breakdown(preset("binarynet")).at("pool5").size_bytes == pytest.approx(33.05, abs=0.01)
    assert 100 * floppy / size_breakdown(preset("baseline")).at("pool5").size_bytes == pytest.approx(1.05, abs=0.01)


def test_size_outputs():
    t = size_breakdown(preset("floppynet"))
    assert t.to_csv().splitlines()[0].startswith("layer,setup,feature_size")
    assert '"network": "floppynet"' in t.to_json()


# --------------------------------------------------------------------------
# MAC accounting


def test_floppynet_macs():
    m = mac_breakdown(preset("floppynet"), (227, 227, 3))
    conv1 = 55 * 55 * 96 * 11 * 11 * 3
    conv2 = 27 * 27 * 256 * 5 * 5 * 96
    conv5 = 13 * 13 * 256 * 3 * 3 * 256
    bn = 27 * 27 * 96 + 13 * 13 * 256
    assert m.binary == conv2 + conv5
    assert m.full_precision == conv1 + bn
    assert m.total == pytest.approx(653e6, rel=0.01)
    assert m.binary == pytest.approx(547.6e6, rel=0.01)
    assert m.full_precision == pytest.approx(105.5e6, rel=0.01)
    assert m.summary() == "total=653.1M binary=547.6M full_precision=105.5M"


def test_single_layer_macs():
    spec = NetworkSpec("one", (13, 13, 256), parse_layers("C(3,1,256)", weight_bits=32, first_padding="same"), "conv1")
    assert mac_breakdown(spec).total == 13 * 13 * 256 * 3 * 3 * 256


def test_macs_scale_with_output_area():
    spec = NetworkSpec("c", (64, 64, 3), parse_layers("C(3,1,8) C(3,1,8)", weight_bits=32, first_padding="same"), "conv2")
    full = mac_breakdown(spec)
    half = mac_breakdown(spec, (32, 32, 3))
    conv = lambda m: sum(r.macs for r in m.rows)  # noqa: E731
    assert conv(full) == 4 * conv(half)


def test_fc_macs():
    m = mac_breakdown(preset("baseline"))
    rows = {r.layer: r for r in m.rows}
    assert rows["fc6"].macs == 9216 * 4096 and rows["fc7"].macs == 4096 * 4096
    assert not rows["fc6"].binary


def test_binary_counting_rule():
    binary = {r.layer for r in mac_breakdown(preset("binarynet")).rows if r.binary}
    assert binary == {"conv2", "conv3", "conv4", "conv5", "fc6", "fc7"}
    assert not any(r.binary for r in mac_breakdown(preset("floppynet_2")).rows)
    kinds = {l.name: l.kind for l in preset("binarynet").layers}
    assert all(kinds[n] is not LayerKind.POOL for n in binary)


def test_speedup():
    assert projected_speedup(711, 547, 105.5, 5.3) == pytest.approx(3.4, abs=0.05)
    assert projected_speedup(400, 0, 100) == 4.0
    assert BINARY_MACS_PER_CYCLE == pytest.approx(5.33, abs=0.01)
    with pytest.raises(ValueError):
        projected_speedup(100, 10, 10, 0)
