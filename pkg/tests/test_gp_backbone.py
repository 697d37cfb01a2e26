import math

import pytest
import torch

from helpers import finite_difference_errors, gradient_check_passes
from retouchgan.checkpoint import (export_params, import_external_checkpoint, load_name_map,
                                   stylegan2_name_map)
from retouchgan.errors import CheckpointError, ConfigError, ContractViolation
from retouchgan.gp_backbone import (GPBackbone, GPConfig, ModulatedConv2d, expected_shapes,
                                    gp_unit_forward, slice_index)


def small_cfg(levels=4, **kw):
    return GPConfig(levels=levels, latent_dim=kw.pop("latent_dim", 8), channel_base=4, channel_max=8, **kw)


def identity_injection(level, f_i):
    return f_i


@pytest.mark.parametrize("levels", [4, 5])
def test_resolution_ladder(levels):
    cfg = small_cfg(levels)
    torch.manual_seed(0)
    gp = GPBackbone(cfg)
    image, feats = gp(torch.randn(2, 2 * levels, 8), identity_injection)
    assert image.shape == (2, 3, 2 ** (levels + 1), 2 ** (levels + 1))
    assert sorted(feats) == list(range(1, levels + 1))
    for i, f in feats.items():
        r = 2 ** (levels + 2 - i)
        assert f.shape == (2, cfg.channels(i), r, r)


def test_resolution_ladder_paper_scale_shapes_only():
    cfg = GPConfig(levels=9, latent_dim=512, channel_base=32, channel_max=512)
    with torch.device("meta"):
        gp = GPBackbone(cfg)
        image, feats = gp(torch.empty(1, 18, 512), identity_injection)
    assert image.shape == (1, 3, 1024, 1024)
    assert [feats[i].shape[-1] for i in range(9, 0, -1)] == [4, 8, 16, 32, 64, 128, 256, 512, 1024]
    assert feats[9].shape[1] == 512


def test_config_invariants():
    cfg = GPConfig(levels=5)
    assert cfg.resolution == 64 and cfg.num_slices == 10
    assert [cfg.res(i) for i in range(1, 6)] == [64, 32, 16, 8, 4]
    with pytest.raises(ConfigError):
        GPConfig(levels=2)


def test_top_unit_consumes_constant():
    cfg = small_cfg(5)
    gp = GPBackbone(cfg)
    assert gp.const.shape == (1, cfg.channels(5), 4, 4)
    latent = torch.randn(1, 10, 8)
    f_out, rgb = gp_unit_forward(gp, 5, gp.const, latent[:, 0], latent[:, 1])
    assert f_out.shape == (1, cfg.channels(5), 4, 4) and rgb.shape == (1, 3, 4, 4)


def test_level_one_emits_final_image():
    cfg = small_cfg(5)
    gp = GPBackbone(cfg)
    x = torch.randn(1, cfg.channels(2), 32, 32)
    rgb_prev = torch.randn(1, 3, 32, 32)
    f_out, rgb = gp_unit_forward(gp, 1, x, torch.randn(1, 8), torch.randn(1, 8), rgb_prev)
    assert f_out.shape[-1] == 64 and rgb.shape == (1, 3, 64, 64)


def test_unit_shape_mismatch_names_level():
    gp = GPBackbone(small_cfg(4))
    with pytest.raises(ContractViolation, match="GP level 2"):
        gp_unit_forward(gp, 2, torch.randn(1, 8, 4, 4), torch.randn(1, 8), torch.randn(1, 8))


def test_slices_cover_latent_exactly_once():
    cfg = small_cfg(9)
    rows = [r for lvl in range(1, 10) for r in slice_index(cfg, lvl)]
    assert sorted(rows) == list(range(18))


def test_modulated_conv_hand_evaluation():
    conv = ModulatedConv2d(in_ch=2, out_ch=1, kernel_size=1, style_dim=4, demodulate=True)
    with torch.no_grad():
        conv.weight.copy_(torch.tensor([2.0, 4.0]).view(1, 1, 2, 1, 1))
        conv.modulation.weight.copy_(torch.tensor([[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]]))
        conv.modulation.bias.copy_(torch.tensor([1.0, 0.0]))
    style = torch.tensor([[1.0, 0.0, 2.0, -1.0]])
    x = torch.tensor([1.0, -1.0]).view(1, 2, 1, 1)
    # s = A l / sqrt(4) + b = (1.5, 0.5); w' = W s / sqrt(2) = (3, 2) / sqrt(2);
    # demodulated w'' = (3, 2) / sqrt(13); output = (3 - 2) / sqrt(13)
    out = conv(x, style).item()
    assert out == pytest.approx(1 / math.sqrt(13), abs=1e-6)


def test_modulated_conv_matches_per_sample_weights():
    torch.manual_seed(3)
    conv = ModulatedConv2d(3, 5, 3, style_dim=6, demodulate=True).double()
    x, style = torch.randn(4, 3, 6, 6, dtype=torch.double), torch.randn(4, 6, dtype=torch.double)
    w = conv.modulated_weight(style)
    ref = torch.cat([torch.nn.functional.conv2d(x[n:n + 1], w[n], padding=1) for n in range(4)])
    torch.testing.assert_close(conv(x, style), ref, rtol=1e-10, atol=1e-10)


def test_style_homogeneity_without_demodulation():
    torch.manual_seed(0)
    conv = ModulatedConv2d(3, 4, 3, style_dim=5, demodulate=False).double()
    with torch.no_grad():
        conv.modulation.bias.zero_()
    x, style = torch.randn(1, 3, 5, 5, dtype=torch.double), torch.randn(1, 5, dtype=torch.double)
    for alpha in (0.5, 2.0, -3.0):
        torch.testing.assert_close(conv(x, alpha * style), alpha * conv(x, style))


def test_forward_is_deterministic():
    torch.manual_seed(0)
    gp = GPBackbone(small_cfg(4))
    latent = torch.randn(1, 8, 8)
    a, fa = gp(latent, identity_injection)
    b, fb = gp(latent, identity_injection)
    assert torch.equal(a, b)
    assert all(torch.equal(fa[k], fb[k]) for k in fa)


def test_noise_injection_is_seeded():
    cfg = small_cfg(4, noise_injection=True)
    torch.manual_seed(0)
    gp = GPBackbone(cfg)
    with torch.no_grad():
        for unit in gp.units:
            unit.conv1.noise.weight.fill_(0.5)
    latent = torch.randn(1, 8, 8)
    a, _ = gp(latent, identity_injection)
    b, _ = gp(latent, identity_injection)
    assert torch.equal(a, b)


def test_skip_level_changes_output_not_resolution():
    cfg = small_cfg(4)
    torch.manual_seed(0)
    full = GPBackbone(cfg)
    torch.manual_seed(0)
    skipped = GPBackbone(cfg, skip_levels={2})
    skipped.load_state_dict(full.state_dict(), strict=False)
    latent = torch.randn(1, 8, 8)
    a, _ = full(latent, identity_injection)
    # level 2 receives nothing and is bridged from the level-3 output
    b, feats = skipped(latent, lambda lvl, f: None if lvl == 2 else f)
    assert a.shape == b.shape
    assert not torch.allclose(a, b)
    assert feats[2].shape == (1, cfg.channels(2), 16, 16)


def test_missing_injection_is_config_error():
    gp = GPBackbone(small_cfg(4))
    with pytest.raises(ConfigError, match="level 3"):
        gp(torch.randn(1, 8, 8), {})


def test_cannot_skip_constant_level():
    with pytest.raises(ConfigError):
        GPBackbone(small_cfg(4), skip_levels={4})


def test_unit_gradients_match_finite_differences():
    torch.manual_seed(1)
    cfg = GPConfig(levels=3, latent_dim=4, channel_base=2, channel_max=4)
    gp = GPBackbone(cfg).double()
    unit = gp.unit(2)
    x = torch.randn(1, cfg.channels(3), 4, 4, dtype=torch.double, requires_grad=True)
    l_a = torch.randn(1, 4, dtype=torch.double, requires_grad=True)
    l_b = torch.randn(1, 4, dtype=torch.double, requires_grad=True)
    probe = torch.randn(1, cfg.channels(2), 8, 8, dtype=torch.double)
    probe_rgb = torch.randn(1, 3, 8, 8, dtype=torch.double)

    def loss():
        f, rgb = unit(x, l_a, l_b)
        return (f * probe).sum() + (rgb * probe_rgb).sum()

    errors = finite_difference_errors(loss, [x, l_a, l_b, *unit.parameters()])
    assert gradient_check_passes(errors), max(errors)


# shape table of the published 1024px FFHQ generator (rosinality layout)
def ffhq_config_f_table():
    ch = {4: 512, 8: 512, 16: 512, 32: 512, 64: 512, 128: 256, 256: 128, 512: 64, 1024: 32}

    def styled(prefix, cin, cout):
        return {f"{prefix}.conv.weight": (1, cout, cin, 3, 3), f"{prefix}.conv.modulation.weight": (cin, 512),
                f"{prefix}.conv.modulation.bias": (cin,), f"{prefix}.noise.weight": (1,),
                f"{prefix}.activate.bias": (cout,)}

    def rgb(prefix, cin):
        return {f"{prefix}.conv.weight": (1, 3, cin, 1, 1), f"{prefix}.conv.modulation.weight": (cin, 512),
                f"{prefix}.conv.modulation.bias": (cin,), f"{prefix}.bias": (1, 3, 1, 1)}

    table = {"input.input": (1, 512, 4, 4)}
    table.update(styled("conv1", 512, 512))
    table.update(rgb("to_rgb1", 512))
    res = [8, 16, 32, 64, 128, 256, 512, 1024]
    for k, r in enumerate(res):
        table.update(styled(f"convs.{2 * k}", ch[r // 2], ch[r]))
        table.update(styled(f"convs.{2 * k + 1}", ch[r], ch[r]))
        table.update(rgb(f"to_rgbs.{k}", ch[r]))
        table[f"convs.{2 * k}.conv.blur.kernel"] = (4, 4)
        table[f"to_rgbs.{k}.upsample.kernel"] = (4, 4)
    for i in range(1, 9):
        table[f"style.{i}.weight"] = (512, 512)
        table[f"style.{i}.bias"] = (512,)
    for i in range(17):
        r = 4 * 2 ** ((i + 1) // 2)
        table[f"noises.noise_{i}"] = (1, 1, r, r)
    return table


def test_external_ffhq_layout_loads(tmp_path):
    from safetensors.torch import save_file

    path = tmp_path / "ffhq.safetensors"
    # zero tensors keep the 1024px archive cheap; only names and shapes matter here
    save_file({k: torch.zeros(s) for k, s in ffhq_config_f_table().items()}, str(path))
    cfg = GPConfig(levels=9, latent_dim=512, channel_base=32, channel_max=512)
    params = import_external_checkpoint(path, load_name_map("stylegan2_ffhq_config_f"), expected_shapes(cfg))
    assert set(params) == set(expected_shapes(cfg))


def test_shipped_name_map_matches_generator():
    assert load_name_map("stylegan2_ffhq_config_f") == stylegan2_name_map(9)


def test_export_import_round_trip(tmp_path):
    cfg = small_cfg(4)
    torch.manual_seed(0)
    gp = GPBackbone(cfg)
    path = tmp_path / "gp.safetensors"
    export_params(gp, path, cfg.to_dict())
    identity = {k: k for k in gp.state_dict()}
    params = import_external_checkpoint(path, identity, expected_shapes(cfg))
    for k, v in gp.state_dict().items():
        assert torch.equal(params[k], v)


def test_missing_tensor_is_reported_by_name(tmp_path):
    cfg = small_cfg(4)
    gp = GPBackbone(cfg)
    path = tmp_path / "gp.safetensors"
    export_params(gp, path)
    identity = {k: k for k in gp.state_dict()}
    dropped = "units.1.conv0.conv.weight"
    from safetensors.torch import load_file, save_file
    tensors = load_file(str(path))
    del tensors[dropped]
    save_file(tensors, str(path), metadata={"format_version": "1"})
    with pytest.raises(CheckpointError) as err:
        import_external_checkpoint(path, identity, expected_shapes(cfg))
    assert list(err.value.problems) == [dropped]


def test_mismatched_shape_refused(tmp_path):
    gp = GPBackbone(small_cfg(4))
    path = tmp_path / "gp.safetensors"
    export_params(gp, path)
    bigger = GPConfig(levels=4, latent_dim=8, channel_base=8, channel_max=16)
    identity = {k: k for k in gp.state_dict()}
    with pytest.raises(CheckpointError, match="shape"):
        import_external_checkpoint(path, identity, expected_shapes(bigger))
