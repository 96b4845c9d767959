import zipfile

import torch
import pytest

from lamps.backbone import (
    CheckpointError,
    EncoderConfig,
    ModelPair,
    PatchEncoder,
    encode,
    ema_update,
    load_checkpoint,
    load_teacher,
    momentum_schedule,
    pool_global,
    save_checkpoint,
)
from lamps.geometry import ConfigError

from gradcheck import relative_gradient_error


@pytest.fixture
def encoder():
    torch.manual_seed(0)
    return PatchEncoder(EncoderConfig.preset("tiny", 8)).eval()


@pytest.mark.parametrize("rows, cols", [(14, 14), (11, 11), (7, 7), (18, 5)])
def test_encode_shape_contract(encoder, rows, cols):
    out = encode(encoder, torch.randn(2, 1, rows * 8, cols * 8), (rows, cols))
    assert out.shape == (2, rows * cols, 32)
    assert torch.isfinite(out).all()


def test_encode_rejects_wrong_size(encoder):
    with pytest.raises(ValueError, match="112x112"):
        encode(encoder, torch.randn(1, 1, 96, 96), (14, 14))
    with pytest.raises(ValueError):
        encoder(torch.randn(1, 1, 20, 24))


def test_encode_is_deterministic_in_eval(encoder):
    x = torch.randn(1, 1, 112, 112)
    assert torch.equal(encoder(x), encoder(x))


def test_token_order_is_row_major():
    # a patch embedding that reads only the pixel sum exposes which cell each token came from
    cfg = EncoderConfig(cell_pixels=2, embed_dim=4, depth=1, heads=1)
    enc = PatchEncoder(cfg)
    x = torch.zeros(1, 1, 4, 6)
    x[0, 0, 2:4, 4:6] = 1.0  # cell (1, 2) -> token 5
    with torch.no_grad():
        raw = enc.patch_embed(x).flatten(2).transpose(1, 2)
    bias = enc.patch_embed.bias
    changed = [(raw[0, i] - bias).abs().sum().item() > 0 for i in range(6)]
    assert changed == [False] * 5 + [True]


def test_encoder_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(embed_dim=30, heads=4)
    with pytest.raises(ConfigError):
        EncoderConfig(depth=0)
    with pytest.raises(ConfigError):
        EncoderConfig.preset("huge", 8)
    paper = EncoderConfig.preset("paper", 32)
    assert paper.embed_dim % paper.heads == 0


def test_pool_global():
    v = torch.tensor([1.0, -2.0])
    assert torch.equal(pool_global(v.expand(5, 2)), v)
    assert torch.equal(pool_global(torch.tensor([[1.0, 3.0], [3.0, 5.0]])), torch.tensor([2.0, 4.0]))
    tokens = torch.randn(7, 3)
    assert torch.allclose(pool_global(tokens), pool_global(tokens[torch.randperm(7)]))
    with pytest.raises(ValueError):
        pool_global(torch.zeros(0, 3))


def test_momentum_schedule_endpoints():
    assert momentum_schedule(0, 100) == pytest.approx(0.996)
    assert momentum_schedule(100, 100) == pytest.approx(1.0)
    assert momentum_schedule(50, 100) == pytest.approx(0.998)
    with pytest.raises(ValueError):
        momentum_schedule(101, 100)


def _scalar_pair(teacher_value, student_value):
    student = torch.nn.Linear(1, 1, bias=False)
    pair = ModelPair(student)
    with torch.no_grad():
        pair.student.weight.fill_(student_value)
        pair.teacher.weight.fill_(teacher_value)
    return pair


def test_ema_update_values():
    pair = _scalar_pair(2.0, 1.0)
    ema_update(pair.student, pair.teacher, 0.9)
    assert pair.teacher.weight.item() == pytest.approx(1.9)
    assert pair.student.weight.item() == 1.0
    ema_update(pair.student, pair.teacher, 1.0)
    assert pair.teacher.weight.item() == pytest.approx(1.9)
    ema_update(pair.student, pair.teacher, 0.0)
    assert pair.teacher.weight.item() == 1.0


def test_ema_rejects_mismatch_and_bad_momentum():
    with pytest.raises(ValueError):
        ema_update(torch.nn.Linear(2, 2), torch.nn.Linear(2, 3), 0.5)
    with pytest.raises(ValueError):
        ema_update(torch.nn.Linear(2, 2), torch.nn.Linear(2, 2), 1.5)


def test_ema_contracts_by_momentum_per_step():
    torch.manual_seed(0)
    pair = ModelPair(PatchEncoder(EncoderConfig.preset("tiny", 8)))
    with torch.no_grad():
        for p in pair.teacher.parameters():
            p.add_(torch.randn_like(p))

    def gap():
        return torch.sqrt(sum(((s - t) ** 2).sum() for s, t in zip(pair.student.parameters(), pair.teacher.parameters())))

    prev = gap().item()
    for _ in range(10):
        pair.update_teacher(0.9)
        now = gap().item()
        assert now == pytest.approx(0.9 * prev, rel=1e-5)
        prev = now


def test_teacher_never_requires_grad():
    pair = ModelPair(PatchEncoder(EncoderConfig.preset("tiny", 8)))
    assert all(not p.requires_grad for p in pair.teacher.parameters())
    assert [p.shape for p in pair.student.parameters()] == [p.shape for p in pair.teacher.parameters()]


def test_tiny_encoder_input_gradient_matches_finite_differences():
    torch.manual_seed(1)
    enc = PatchEncoder(EncoderConfig(cell_pixels=4, embed_dim=8, depth=2, heads=2)).double()
    weights = torch.randn(4, 8, dtype=torch.float64)
    x = torch.randn(1, 1, 8, 8, dtype=torch.float64)
    err = relative_gradient_error(lambda inp: (enc(inp)[0] * weights).sum(), x)
    assert err < 1e-3


def _payload(enc):
    return {
        "encoder_config": vars(enc.config).copy(),
        "student_params": enc.state_dict(),
        "teacher_params": enc.state_dict(),
        "momentum_state": {"base_m": 0.996, "final_m": 1.0, "step": 0, "total_steps": 1},
        "trainer_state": {},
        "rng_seed": 0,
    }


def test_checkpoint_roundtrip_and_version_check(tmp_path, encoder):
    path = save_checkpoint(tmp_path / "a.bin", _payload(encoder))
    teacher = load_teacher(path)
    x = torch.randn(1, 1, 56, 56)
    assert torch.equal(teacher(x), encoder(x))
    archive = load_checkpoint(path)
    archive["format_version"] = 99
    torch.save(archive, tmp_path / "b.bin")
    with pytest.raises(CheckpointError, match="format_version"):
        load_checkpoint(tmp_path / "b.bin")
    with pytest.raises(CheckpointError, match="missing"):
        save_checkpoint(tmp_path / "c.bin", {"student_params": {}})


def test_equal_payloads_give_equal_bytes(tmp_path, encoder):
    a = save_checkpoint(tmp_path / "a.bin", _payload(encoder))
    b = save_checkpoint(tmp_path / "sub" / "other_name.bin", _payload(encoder))
    assert a.read_bytes() == b.read_bytes()
    with zipfile.ZipFile(a) as zf:
        assert zf.testzip() is None
