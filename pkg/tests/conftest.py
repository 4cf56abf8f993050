import pytest
import torch

from hitdvae.model import ModelConfig
from hitdvae.training import build_model

torch.set_num_threads(1)

D = torch.float64


def tiny_config(variant="LigHT", base="LigHT", **kw):
    params = dict(F=9, d_model=8, n_layers=1, d_ff=16, n_heads=1, L_z=2, L_w=3, rnn_hidden=4)
    params.update(kw)
    return ModelConfig(variant=variant, base=base, **params)


ALL_VARIANTS = [
    ("HiT", "HiT"),
    ("LigHT", "LigHT"),
    ("InvS", "HiT"),
    ("InvS", "LigHT"),
    ("InvSNR", "HiT"),
    ("InvSNR", "LigHT"),
]


@pytest.fixture(params=ALL_VARIANTS, ids=lambda v: f"{v[1]}-{v[0]}")
def any_variant_model(request):
    variant, base = request.param
    return build_model(tiny_config(variant, base), seed=3)


def power(B, T, F, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(B, T, F, generator=g, dtype=D) * 5 + 0.05


def normal(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=D)


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: (int(k.split(".")[0]), k)):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
