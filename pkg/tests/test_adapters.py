import pytest
import torch

from talking_latents.adapters import ScriptedEncoder, ScriptedGenerator
from talking_latents.config import Stage2Config
from talking_latents.errors import DataError, DimensionError
from talking_latents.models import PerceptualExtractor
from talking_latents.training import stage2_tune


class ChannelFirstSynth(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.lin = torch.nn.Linear(8, 3 * 4 * 4)

    def forward(self, w):
        return torch.tanh(self.lin(w.reshape(w.shape[0], -1))).reshape(-1, 3, 4, 4)


class ChannelFirstEncoder(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.lin = torch.nn.Linear(3 * 4 * 4, 8)

    def forward(self, x):
        return self.lin(x.reshape(x.shape[0], -1)).reshape(-1, 2, 4)


def test_scripted_pair_layouts(tmp_path):
    torch.jit.script(ChannelFirstSynth()).save(str(tmp_path / "g.pt"))
    torch.jit.script(ChannelFirstEncoder()).save(str(tmp_path / "e.pt"))
    gen = ScriptedGenerator.load(tmp_path / "g.pt", (2, 4), (4, 4, 3))
    enc = ScriptedEncoder.load(tmp_path / "e.pt", (2, 4), (4, 4, 3))
    frames = gen(torch.randn(5, 3, 2, 4, dtype=torch.float64))
    assert frames.shape == (5, 3, 4, 4, 3) and frames.dtype == torch.float64
    assert enc(frames).shape == (5, 3, 2, 4)
    with pytest.raises(DimensionError):
        gen(torch.zeros(1, 4, 2))


def test_scripted_generator_can_be_tuned():
    net = torch.jit.script(ChannelFirstSynth())
    gen = ScriptedGenerator(net, (2, 4), (4, 4, 3))
    enc = ScriptedEncoder(torch.jit.script(ChannelFirstEncoder()), (2, 4), (4, 4, 3))
    target = torch.rand(2, 4, 4, 3, dtype=torch.float64) - 0.5
    _, history = stage2_tune(target, gen, enc, PerceptualExtractor((2, 2, 2, 2)), Stage2Config(lr=1e-2, max_steps=30))
    assert history[-1]["total"] < history[0]["total"]


def test_bad_script_file(tmp_path):
    (tmp_path / "x.pt").write_bytes(b"nope")
    with pytest.raises(DataError):
        ScriptedGenerator.load(tmp_path / "x.pt", (2, 4), (4, 4, 3))
