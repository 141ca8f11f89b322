import numpy as np
import pytest

from focusnet.autodiff import Tensor, make_rng
from focusnet.exceptions import ConfigError, ContractError, ShapeError
from focusnet.model import ArchConfig, build, conv_param_count, forward, param_count

# Hand-summed from the layer shapes of the tiny config (1 input channel,
# widths 4,8, bottleneck 16, SE ratio 8 so hidden widths 1,1,2).
TINY_LEDGER = {
    "attention/enc/0": 40 + 8 + 148 + 8,
    "attention/down/0": 148 + 8,
    "attention/enc/1": 296 + 16 + 584 + 16,
    "attention/down/1": 584 + 16,
    "attention/bottleneck": 1168 + 32 + 2320 + 32,
    "attention/up/0": 16 * 8 * 4 + 8 + 16,
    "attention/dec/0": 1160 + 16 + 584 + 16,
    "attention/up/1": 8 * 4 * 4 + 4 + 8,
    "attention/dec/1": 292 + 8 + 148 + 8,
    "segmentation/enc/0/res1": 2 + 40 + 8 + 148 + 8,
    "segmentation/enc/0/se1": 5 + 8,
    "segmentation/enc/0/res2": 8 + 148 + 8 + 148,
    "segmentation/enc/0/se2": 5 + 8,
    "segmentation/enc/0/down": 148 + 8,
    "segmentation/enc/1/res1": 8 + 296 + 16 + 584 + 40,
    "segmentation/enc/1/se1": 9 + 16,
    "segmentation/enc/1/res2": 16 + 584 + 16 + 584,
    "segmentation/enc/1/se2": 9 + 16,
    "segmentation/enc/1/down": 584 + 16,
    "segmentation/bottleneck/res": 16 + 1168 + 32 + 2320 + 144,
    "segmentation/bottleneck/se": 34 + 48,
    "segmentation/dec/0/up": 520 + 16,
    "segmentation/dec/0/res": 32 + 1160 + 16 + 584 + 136,
    "segmentation/dec/0/se": 9 + 16,
    "segmentation/dec/1/up": 132 + 8,
    "segmentation/dec/1/res": 16 + 292 + 8 + 148 + 36,
    "segmentation/dec/1/se": 5 + 8,
    "segmentation/head": 4 + 1,
}


@pytest.fixture(scope="module")
def tiny():
    cfg = ArchConfig.tiny(in_channels=1, input_size=32)
    return cfg, build(cfg, 0)


def test_single_conv_count():
    assert conv_param_count(3, 4, 3) == 112


def test_tiny_ledger_matches_hand_sum(tiny):
    cfg, params = tiny
    total, ledger = param_count(cfg)
    assert dict(ledger) == TINY_LEDGER
    assert total == sum(TINY_LEDGER.values()) == 18735
    assert params.num_parameters() == total


def test_ledger_names_cover_built_tensors(tiny):
    cfg, params = tiny
    _, ledger = param_count(cfg)
    per_prefix = dict.fromkeys(dict(ledger), 0)
    for name, t in params.tensors().items():
        owner = [p for p in per_prefix if name.startswith(p + "/")]
        assert len(owner) == 1, name
        per_prefix[owner[0]] += t.size
    assert per_prefix == dict(ledger)


def test_doubling_widths_roughly_quadruples():
    small = ArchConfig.tiny(input_size=32)
    big = ArchConfig.tiny(input_size=32, encoder_widths=(8, 16), bottleneck_width=32, decoder_widths=(16, 8))
    t1, l1 = param_count(small)
    t2, l2 = param_count(big)
    for (name, a), (name2, b) in zip(l1, l2):
        assert name == name2
        if "/se" in name:
            continue  # hidden width is floored at 1, not a conv
        assert a < b <= 4 * a, name
    assert 3.5 < t2 / t1 <= 4.0


def test_full_count_is_consistent():
    cfg = ArchConfig.standard()
    total, _ = param_count(cfg)
    assert total == build(cfg, 0).num_parameters()


def test_build_is_deterministic(tiny):
    cfg, params = tiny
    again = build(cfg, 0)
    other = build(cfg, 1)
    a, b, c = params.tensors(), again.tensors(), other.tensors()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


def test_build_init_rules(tiny):
    _, params = tiny
    for name, t in params.tensors().items():
        leaf = name.rsplit("/", 1)[1]
        if leaf in ("b", "beta"):
            assert not t.data.any(), name
        elif leaf == "gamma":
            assert np.all(t.data == 1), name


def test_config_errors():
    with pytest.raises(ConfigError, match="100"):
        ArchConfig.standard(input_size=100).validate()
    with pytest.raises(ConfigError, match="mirror"):
        ArchConfig(decoder_widths=(256, 128, 64, 64)).validate()
    with pytest.raises(ConfigError):
        ArchConfig(in_channels=2).validate()
    with pytest.raises(ConfigError):
        build(ArchConfig(dropout_rate=1.0))


def test_config_text_round_trip():
    cfg = ArchConfig.tiny(in_channels=3, input_size=48, dropout_rate=0.1)
    assert ArchConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ConfigError):
        ArchConfig.from_text("width = 3\n")


def test_standard_schedule():
    cfg = ArchConfig.standard()
    assert cfg.encoder_widths == (32, 64, 128, 256)
    assert cfg.bottleneck_width == 512
    assert cfg.decoder_widths[:3] == (256, 128, 64)
    assert cfg.decoder_widths[3] == 32


def test_forward_shapes_and_ranges(tiny):
    cfg, params = tiny
    x = Tensor(make_rng(5).normal(size=(2, 1, 32, 32)))
    prob, trace = forward(params, x, "eval")
    assert prob.shape == (2, 1, 32, 32)
    assert np.all((prob.data > 0) & (prob.data < 1))
    assert len(trace.gates) == len(trace.decoder) == len(trace.gated) == cfg.depth
    for d, g, f, a in zip(trace.decoder, trace.gates, trace.features, trace.gated):
        assert d.shape == g.shape == f.shape == a.shape
        assert np.all((g.data > 0) & (g.data < 1))
        assert np.all(np.abs(a.data) <= np.abs(f.data))
    assert [d.shape[1] for d in trace.decoder] == list(cfg.encoder_widths)
    assert [d.shape[2] for d in trace.decoder] == [32, 16]


def test_decoder_taps_are_pre_activation(tiny):
    _, params = tiny
    _, trace = forward(params, Tensor(make_rng(6).normal(size=(1, 1, 32, 32))), "eval")
    assert any((d.data < 0).any() for d in trace.decoder)


def test_eval_forward_is_deterministic(tiny):
    _, params = tiny
    x = Tensor(make_rng(7).normal(size=(1, 1, 32, 32)))
    assert np.array_equal(forward(params, x)[0].data, forward(params, x)[0].data)


def test_gate_ablation_wiring(tiny):
    _, params = tiny
    x = Tensor(make_rng(8).normal(size=(1, 1, 32, 32)))
    ones = forward(params, x, gating="ones")[0].data
    skipped = forward(params, x, gating="skip")[0].data
    gated = forward(params, x)[0].data
    assert np.array_equal(ones, skipped)
    assert not np.array_equal(ones, gated)


def test_train_mode_forward(tiny):
    cfg, _ = tiny
    params = build(cfg, 0)
    x = Tensor(make_rng(9).normal(size=(2, 1, 32, 32)))
    a = forward(params, x, "train", make_rng(1))[0].data
    b = forward(build(cfg, 0), x, "train", make_rng(1))[0].data
    assert np.array_equal(a, b)
    with pytest.raises(ContractError):
        forward(params, x, "train")


def test_forward_rejects_wrong_input(tiny):
    _, params = tiny
    with pytest.raises(ShapeError, match="input"):
        forward(params, Tensor(np.zeros((1, 3, 32, 32))))
    with pytest.raises(ShapeError):
        forward(params, Tensor(np.zeros((1, 1, 16, 16))))


def test_state_arrays_round_trip(tiny):
    cfg, params = tiny
    fresh = build(cfg, 3)
    fresh.load_arrays(params.state_arrays())
    x = Tensor(make_rng(10).normal(size=(1, 1, 32, 32)))
    assert np.array_equal(forward(fresh, x)[0].data, forward(params, x)[0].data)
    arrays = params.state_arrays()
    arrays["segmentation/head/w"] = np.zeros((2, 4, 1, 1))
    with pytest.raises(ShapeError):
        fresh.load_arrays(arrays)
