"""Finite-difference verification of analytic gradients.

The analytic side is reverse-mode autodiff through the blocks as implemented;
the independent oracle is a central difference (L(p+eps) - L(p-eps)) / (2 eps)
of a fixed random scalar projection of the block output. The reported relative
error treats all checked components as one vector,

    ||g_fd - g_an|| / max(||g_fd||, ||g_an||),

which is robust to individual components whose true gradient is exactly zero
(e.g. a conv bias feeding a per-channel GroupNorm). Per-tensor ratios are kept
as diagnostics.

All parameters are re-randomized to a generic point first: several output
projections are zero at init by design, which would hide entire subgraphs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn

from .conditioning import ConditionBundle
from .errors import UnividError
from .pyramid import PSTAttention, PSTConv, build_reference_set, schedule_for
from .unet import DenoiserUNet

MODULES = ("pstattn", "pstconv", "dualca", "temattn", "unet")
DEFAULT_TOL = {"pstattn": 1e-3, "pstconv": 1e-3, "dualca": 1e-3, "temattn": 1e-3, "unet": 1e-2}
# The four op checks run in float32 at eps 1e-3 (their stated tolerance
# regime); the deep U-Net composes ~30 layers, so its check uses float64 with
# a smaller step, where the central-difference oracle is trustworthy.
DEFAULT_DTYPE = {"pstattn": torch.float32, "pstconv": torch.float32, "dualca": torch.float32,
                 "temattn": torch.float32, "unet": torch.float64}
DEFAULT_EPS = {"pstattn": 1e-3, "pstconv": 1e-3, "dualca": 1e-3, "temattn": 1e-3, "unet": 1e-5}
FINITE_SENTINEL = 9.9e8


@dataclass
class GradCheckReport:
    module: str
    eps: float
    tol: float
    dtype: str
    n_checked: int
    max_rel_err: float
    worst_param: str
    per_param: dict[str, float]

    @property
    def passed(self) -> bool:
        return math.isfinite(self.max_rel_err) and self.max_rel_err < self.tol

    def lines(self) -> list[str]:
        status = "PASS" if self.passed else "FAIL"
        out = [
            f"gradcheck module={self.module} eps={self.eps:.1e} dtype={self.dtype} "
            f"checked={self.n_checked} elements",
            f"  relative error {self.max_rel_err:.3e} (tolerance {self.tol:.1e}): {status}",
            f"  worst tensor: {self.worst_param} ({self.per_param[self.worst_param]:.3e})",
        ]
        return out


def _randomize(module: nn.Module, gen: torch.Generator, std: float = 0.2,
               branch_std: float | None = None):
    """Move every parameter to a generic point.

    branch_std, when set, applies a smaller scale to the residual-branch
    output layers (w_o projections, second convs, temporal taps) so that deep
    stacks of randomized residual blocks keep O(1) activations and stay inside
    the linear regime probed by the finite-difference step.
    """
    branch_markers = ("w_o", "conv2", ".temporal.", "temb_proj", "head.")
    for name, p in module.named_parameters():
        if "norm" in name and name.endswith("weight"):
            p.data.normal_(1.0, 0.1, generator=gen)
        elif branch_std is not None and any(m in name for m in branch_markers):
            p.data.normal_(0.0, branch_std, generator=gen)
        else:
            p.data.normal_(0.0, std, generator=gen)


def _projection_loss(out_shape, gen: torch.Generator, dtype) -> Callable[[torch.Tensor], torch.Tensor]:
    w = torch.randn(out_shape, generator=gen, dtype=dtype)
    return lambda out: torch.sum(out * w)


def _build_pstattn(gen, dtype):
    mod = PSTAttention(channels=4, heads=2).to(dtype)
    _randomize(mod, gen)
    z = torch.randn((1, 4, 4, 4, 4), generator=gen, dtype=dtype)
    refs = build_reference_set(4, 2, "infer-mid")
    proj = _projection_loss((1, 4, 4, 4, 4), gen, dtype)
    return mod, lambda: proj(mod.update(z, refs))


def _build_pstconv(gen, dtype):
    mod = PSTConv(channels=4, kernel_size=3).to(dtype)
    _randomize(mod, gen)
    z = torch.randn((1, 4, 4, 4, 4), generator=gen, dtype=dtype)
    proj = _projection_loss((1, 4, 4, 4, 4), gen, dtype)
    return mod, lambda: proj(mod.update(z))


def _build_dualca(gen, dtype):
    from .conditioning import DualCrossAttention

    mod = DualCrossAttention(channels=4, cond_width=4, heads=2).to(dtype)
    _randomize(mod, gen)
    z = torch.randn((1, 2, 4, 2, 2), generator=gen, dtype=dtype)
    text = torch.randn((3, 4), generator=gen, dtype=dtype)
    image = torch.randn((4, 4), generator=gen, dtype=dtype)
    cond = ConditionBundle.create(text, image, 0.8, 0.6)
    proj = _projection_loss((1, 2, 4, 2, 2), gen, dtype)
    return mod, lambda: proj(mod.update(z, cond))


def _build_temattn(gen, dtype):
    from .conditioning import TemporalAttention

    mod = TemporalAttention(channels=4, heads=2).to(dtype)
    _randomize(mod, gen)
    z = torch.randn((1, 4, 4, 2, 2), generator=gen, dtype=dtype)
    proj = _projection_loss((1, 4, 4, 2, 2), gen, dtype)
    return mod, lambda: proj(mod.update(z))


def _build_unet(gen, dtype):
    mod = DenoiserUNet(in_channels=3, channels=(8, 8, 8, 8), heads=2, cond_width=8,
                       temb_dim=8, pyramid=schedule_for(4)).to(dtype)
    _randomize(mod, gen, std=0.1, branch_std=0.02)
    z = torch.randn((1, 4, 3, 8, 8), generator=gen, dtype=dtype)
    text = torch.randn((3, 8), generator=gen, dtype=dtype)
    image = torch.randn((4, 8), generator=gen, dtype=dtype)
    cond = ConditionBundle.create(text, image, 1.0, 1.0)
    proj = _projection_loss((1, 4, 3, 8, 8), gen, dtype)
    return mod, lambda: proj(mod(z, 3, cond))


_BUILDERS = {
    "pstattn": _build_pstattn,
    "pstconv": _build_pstconv,
    "dualca": _build_dualca,
    "temattn": _build_temattn,
    "unet": _build_unet,
}


def check_module(module: str, eps: float | None = None, tol: float | None = None, seed: int = 0,
                 dtype: torch.dtype | None = None, max_elems: int | None = None) -> GradCheckReport:
    """Run the finite-difference comparison for one registered block.

    max_elems caps how many parameter components are probed (sampled uniformly
    with the same seed); None probes all of them. The U-Net registers with
    max_elems defaulting to 120 for runtime reasons.
    """
    if module not in MODULES:
        raise UnividError(f"unknown gradcheck module {module!r}; expected one of {MODULES}")
    eps = DEFAULT_EPS[module] if eps is None else eps
    tol = DEFAULT_TOL[module] if tol is None else tol
    dtype = DEFAULT_DTYPE[module] if dtype is None else dtype
    if module == "unet" and max_elems is None:
        max_elems = 120

    gen = torch.Generator().manual_seed(seed)
    mod, loss_fn = _BUILDERS[module](gen, dtype)
    params = [(name, p) for name, p in mod.named_parameters()]

    loss = loss_fn()
    loss.backward()
    analytic = {name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                for name, p in params}

    flat_index = [(ti, j) for ti, (_, p) in enumerate(params) for j in range(p.numel())]
    if max_elems is not None and max_elems < len(flat_index):
        pick = torch.randperm(len(flat_index), generator=gen)[:max_elems]
        flat_index = [flat_index[int(i)] for i in pick]

    checked: dict[str, tuple[list[float], list[float]]] = {}
    with torch.no_grad():
        for ti, j in flat_index:
            name, p = params[ti]
            flat = p.data.view(-1)
            orig = flat[j].item()
            flat[j] = orig + eps
            lp = float(loss_fn())
            flat[j] = orig - eps
            lm = float(loss_fn())
            flat[j] = orig
            fd = (lp - lm) / (2.0 * eps)
            if not math.isfinite(fd):
                fd = FINITE_SENTINEL
            an = float(analytic[name].view(-1)[j])
            checked.setdefault(name, ([], []))[0].append(fd)
            checked[name][1].append(an)

    per_param: dict[str, float] = {}
    all_fd: list[float] = []
    all_an: list[float] = []
    for name, (fds, ans) in checked.items():
        f = torch.tensor(fds, dtype=torch.float64)
        a = torch.tensor(ans, dtype=torch.float64)
        all_fd.extend(fds)
        all_an.extend(ans)
        denom = max(float(f.norm()), float(a.norm()), 1e-12)
        rel = float((f - a).norm()) / denom
        per_param[name] = min(rel, FINITE_SENTINEL) if math.isfinite(rel) else FINITE_SENTINEL

    f = torch.tensor(all_fd, dtype=torch.float64)
    a = torch.tensor(all_an, dtype=torch.float64)
    rel = float((f - a).norm()) / max(float(f.norm()), float(a.norm()), 1e-12)
    if not math.isfinite(rel):
        rel = FINITE_SENTINEL
    worst = max(per_param, key=per_param.get)
    return GradCheckReport(
        module=module, eps=eps, tol=tol, dtype=str(dtype).replace("torch.", ""),
        n_checked=len(flat_index), max_rel_err=min(rel, FINITE_SENTINEL), worst_param=worst,
        per_param=per_param,
    )
