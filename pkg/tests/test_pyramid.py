import numpy as np
import pytest
import torch
import torch.nn as nn

from oracles import pst_attention_update, reference_midpoints, segment_bounds
from univid.errors import KernelError, ReferenceSetError
from univid.pyramid import (PSTAttention, PSTConv, PyramidLevel, PyramidSchedule,
                            ReferenceSet, SpatialConvStack, TemporalMixer,
                            build_reference_set, pst_attention, pst_conv, schedule_for)


class _IdentitySpatial(nn.Module):
    def forward(self, z, temb=None):
        return z


def _weights(mod: PSTAttention):
    p = mod.proj
    return (p.w_q.weight.detach().numpy(), p.w_k.weight.detach().numpy(),
            p.w_v.weight.detach().numpy(), p.w_o.weight.detach().numpy())


# ---------------------------------------------------------------------------
# reference sets


def test_reference_set_every_frame_when_step_is_one():
    assert build_reference_set(8, 1, "infer-mid").frames == tuple(range(1, 9))


def test_reference_set_midpoints_step_two():
    assert build_reference_set(8, 2, "infer-mid").frames == (1, 3, 5, 7)


def test_reference_set_single_segment():
    assert build_reference_set(4, 4, "infer-mid").frames == (2,)


@pytest.mark.parametrize("F", range(1, 17))
def test_reference_set_matches_enumeration_oracle(F):
    for r in range(1, F + 1):
        if F % r:
            continue
        got = build_reference_set(F, r, "infer-mid").frames
        assert list(got) == reference_midpoints(F, r)


@pytest.mark.parametrize("seed", range(5))
def test_train_random_picks_inside_each_segment(seed):
    rng = torch.Generator().manual_seed(seed)
    for F, r in [(8, 2), (8, 4), (12, 3), (6, 6)]:
        refs = build_reference_set(F, r, "train-random", rng)
        bounds = segment_bounds(F, r)
        assert len(refs.frames) == F // r
        for idx, (lo, hi) in zip(refs.frames, bounds):
            assert lo <= idx <= hi
        assert list(refs.frames) == sorted(refs.frames)


def test_reference_set_rejects_non_divisible_step():
    with pytest.raises(ReferenceSetError):
        build_reference_set(8, 3, "infer-mid")
    with pytest.raises(ReferenceSetError):
        build_reference_set(1, 4, "infer-mid")


def test_reference_set_rejects_unknown_mode_and_missing_rng():
    with pytest.raises(ReferenceSetError):
        build_reference_set(4, 2, "bogus")
    with pytest.raises(ReferenceSetError):
        build_reference_set(4, 2, "train-random", rng=None)


def test_reference_set_type_invariants():
    with pytest.raises(ReferenceSetError):
        ReferenceSet(frames=())
    with pytest.raises(ReferenceSetError):
        ReferenceSet(frames=(3, 2))


# ---------------------------------------------------------------------------
# pyramid attention


def test_pst_attention_hand_softmax_case():
    # F=2, 1x1 spatial, d=1, identity projections, W_O=1, no residual
    mod = PSTAttention(channels=1, heads=1)
    with torch.no_grad():
        for lin in (mod.proj.w_q, mod.proj.w_k, mod.proj.w_v, mod.proj.w_o):
            lin.weight.copy_(torch.eye(1))
    z = torch.tensor([1.0, 3.0]).view(2, 1, 1, 1)
    out = pst_attention(z, build_reference_set(2, 1), mod, residual=False)
    w = np.exp([1.0, 3.0]) / np.exp([1.0, 3.0]).sum()
    want_frame1 = w[0] * 1.0 + w[1] * 3.0
    assert out[0].item() == pytest.approx(want_frame1, abs=1e-4)
    assert out[0].item() == pytest.approx(2.7616, abs=1e-4)


def test_pst_attention_zero_out_projection_is_identity():
    mod = PSTAttention(channels=4, heads=2)
    gen = torch.Generator().manual_seed(0)
    mod.init_weights(gen)  # leaves w_o zero
    z = torch.randn(1, 1, 4, 3, 3, generator=gen)
    assert torch.equal(mod(z, build_reference_set(1, 1)), z)


def test_pst_attention_identical_frames_give_identical_outputs():
    mod = PSTAttention(channels=4, heads=2)
    gen = torch.Generator().manual_seed(1)
    for lin in (mod.proj.w_q, mod.proj.w_k, mod.proj.w_v, mod.proj.w_o):
        lin.weight.data.normal_(0, 0.5, generator=gen)
    frame = torch.randn(4, 3, 3, generator=gen)
    z = frame.expand(6, 4, 3, 3).clone()
    out = pst_attention(z, build_reference_set(6, 2), mod)
    for f in range(1, 6):
        assert torch.equal(out[f], out[0])


def test_pst_attention_key_order_permutation_invariance():
    mod = PSTAttention(channels=4, heads=2)
    gen = torch.Generator().manual_seed(2)
    for lin in (mod.proj.w_q, mod.proj.w_k, mod.proj.w_v, mod.proj.w_o):
        lin.weight.data.normal_(0, 0.5, generator=gen)
    z = torch.randn(1, 8, 4, 2, 2, generator=gen)
    base = mod.update(z, (1, 3, 5, 7))
    for perm in [(7, 5, 3, 1), (3, 1, 7, 5), (5, 7, 1, 3)]:
        assert torch.allclose(mod.update(z, perm), base, atol=1e-6)


@pytest.mark.parametrize("F,r", [(1, 1), (2, 1), (4, 1), (8, 1), (8, 2), (8, 4)])
def test_pst_attention_matches_dense_oracle(F, r):
    mod = PSTAttention(channels=4, heads=2)
    gen = torch.Generator().manual_seed(3 + F + r)
    for lin in (mod.proj.w_q, mod.proj.w_k, mod.proj.w_v, mod.proj.w_o):
        lin.weight.data.normal_(0, 0.5, generator=gen)
    z = torch.randn(F, 4, 4, 4, generator=gen)
    refs = build_reference_set(F, r, "infer-mid")
    with torch.no_grad():
        got = pst_attention(z, refs, mod, residual=False).numpy()
    want = pst_attention_update(z.numpy(), refs.frames, *_weights(mod), heads=2)
    assert np.max(np.abs(got - want)) < 1e-5


def test_pst_attention_rejects_empty_and_out_of_range_refs():
    mod = PSTAttention(channels=2, heads=1)
    z = torch.zeros(1, 2, 2, 2, 2)
    with pytest.raises(ReferenceSetError):
        mod.update(z, ())
    with pytest.raises(ReferenceSetError):
        mod.update(z, (3,))


# ---------------------------------------------------------------------------
# pyramid convolution


def test_pst_conv_dirac_kernel_reduces_to_2d_only():
    conv = PSTConv(channels=3, kernel_size=5)
    gen = torch.Generator().manual_seed(4)
    conv.spatial.init_weights(gen)
    # make the spatial stage non-trivial
    conv.spatial.conv2.weight.data.normal_(0, 0.3, generator=gen)
    z = torch.randn(1, 4, 3, 5, 5, generator=gen)
    spatial_only = z + conv.spatial(z)
    assert torch.equal(conv(z), spatial_only)


def test_pst_conv_hand_boundary_convolution():
    conv = PSTConv(channels=1, kernel_size=3, spatial=_IdentitySpatial())
    with torch.no_grad():
        conv.temporal.weight.fill_(1.0 / 3.0)
        conv.temporal.bias.zero_()
    z = torch.ones(3, 1, 1, 1)
    staged = conv.temporal(z.unsqueeze(0))[0]
    assert torch.allclose(staged.flatten(), torch.tensor([2 / 3, 1.0, 2 / 3]))
    out = pst_conv(z, conv)
    assert torch.allclose(out.flatten(), torch.tensor([5 / 3, 2.0, 5 / 3]))


def test_pst_conv_single_frame_unit_tap_is_identity_stage():
    conv = PSTConv(channels=1, kernel_size=1, spatial=_IdentitySpatial())
    with torch.no_grad():
        conv.temporal.weight.fill_(1.0)
        conv.temporal.bias.zero_()
    z = torch.randn(1, 1, 1, 1, generator=torch.Generator().manual_seed(5))
    # temporal stage is the identity, so the block is input + spatial(input) = 2x here
    assert torch.allclose(pst_conv(z, conv), 2 * z)


def test_temporal_mixer_dirac_is_bitwise_identity():
    mixer = TemporalMixer(channels=5, kernel_size=3)
    z = torch.randn(2, 6, 5, 3, 3, generator=torch.Generator().manual_seed(6))
    assert torch.equal(mixer(z), z)


@pytest.mark.parametrize("k", [0, 2, 4])
def test_even_or_zero_kernel_rejected(k):
    with pytest.raises(KernelError):
        TemporalMixer(channels=2, kernel_size=k)


def test_spatial_stack_timestep_scale_shift_changes_output():
    stack = SpatialConvStack(channels=4, temb_dim=6)
    gen = torch.Generator().manual_seed(7)
    stack.init_weights(gen)
    stack.conv2.weight.data.normal_(0, 0.3, generator=gen)
    stack.temb_proj.weight.data.normal_(0, 0.5, generator=gen)
    z = torch.randn(1, 2, 4, 4, 4, generator=gen)
    a = stack(z, torch.zeros(1, 6))
    b = stack(z, torch.ones(1, 6))
    assert not torch.equal(a, b)


# ---------------------------------------------------------------------------
# schedules


def test_default_schedule_for_eight_frames_matches_table():
    sched = schedule_for(8)
    want = {1: (4, 1), 2: (2, 3), 4: (1, 3), 8: (1, 5)}
    for f, (r, k) in want.items():
        assert (sched.level(f).step, sched.level(f).kernel) == (r, k)


def test_schedule_dense_middle_and_sparse_outer():
    sched = schedule_for(8)
    assert 8 // sched.level(4).step == 8  # middle covers all frames
    assert 8 // sched.level(1).step == 2  # outer keeps two reference frames


def test_schedule_monotone_toward_middle():
    sched = schedule_for(8)
    n = [8 // sched.level(f).step for f in (1, 2, 4, 8)]
    k = [sched.level(f).kernel for f in (1, 2, 4, 8)]
    assert n == sorted(n) and k == sorted(k)


def test_schedule_for_single_frame_collapses_steps():
    sched = schedule_for(1)
    assert all(sched.level(f).step == 1 for f in (1, 2, 4, 8))


def test_schedule_for_clamps_default_steps_to_divisors():
    sched = schedule_for(6)  # default r=4 does not divide 6 -> clamp to 3
    assert sched.level(1).step == 3
    assert sched.level(2).step == 2


def test_explicit_override_validated_strictly():
    with pytest.raises(ReferenceSetError):
        schedule_for(8, overrides={1: PyramidLevel(step=3, kernel=1)})
    with pytest.raises(KernelError):
        schedule_for(8, overrides={1: PyramidLevel(step=4, kernel=2)})


def test_schedule_rejects_non_monotone_reference_counts():
    entries = {1: PyramidLevel(1, 1), 2: PyramidLevel(2, 3), 4: PyramidLevel(4, 3), 8: PyramidLevel(8, 5)}
    with pytest.raises(ReferenceSetError):
        PyramidSchedule(entries=entries, frames=8)
