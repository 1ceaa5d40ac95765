"""Central finite-difference checks of autograd gradients on toy-sized components."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch

from .attention import MultiHeadAttention, cross_attend_target, self_attend_vehicles
from .backbone import BackboneConfig, NestedUNet, heatmap_activation
from .encoder import FinalFusion, NumericalCategoricalEncoder
from .errors import InvalidArgument
from .losses import FocalParams, bce_loss, focal_loss, kldiv_loss, mse_loss

STEP = 1e-4
TOL = 1e-3
ATOL = 1e-7  # denominator floor: structurally zero gradients leave only roundoff
COMPONENTS = ("nce", "attention", "fusion", "backbone", "losses")


@dataclass
class GradResult:
    component: str
    name: str
    rel_error: float
    passed: bool


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """||a - n|| / max(||a||, ||n||, ATOL)."""
    denom = max(float(analytic.norm()), float(numeric.norm()), ATOL)
    return float((analytic - numeric).norm()) / denom


def check_gradients(component: str, fn: Callable[[], torch.Tensor],
                    tensors: Sequence[Tuple[str, torch.Tensor]], step: float = STEP,
                    tol: float = TOL, max_entries: Optional[int] = None,
                    corrupt: float = 1.0, generator: Optional[torch.Generator] = None
                    ) -> List[GradResult]:
    """Compare autograd gradients of scalar ``fn()`` against central differences.

    ``corrupt`` scales the analytic gradient (harness self-test).
    ``max_entries`` limits the perturbed entries per tensor to a random subset.
    """
    for _, t in tensors:
        t.grad = None
    fn().backward()
    results = []
    for name, t in tensors:
        analytic = (t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)) * corrupt
        flat = t.data.view(-1)
        idx = torch.arange(flat.numel())
        if max_entries is not None and flat.numel() > max_entries:
            idx = torch.randperm(flat.numel(), generator=generator)[:max_entries]
        numeric = torch.zeros(len(idx), dtype=t.dtype)
        with torch.no_grad():
            for n, i in enumerate(idx.tolist()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(fn())
                flat[i] = orig - step
                down = float(fn())
                flat[i] = orig
                numeric[n] = (up - down) / (2 * step)
        err = relative_error(analytic.view(-1)[idx], numeric)
        results.append(GradResult(component, name, err, err <= tol))
    return results


def _named(module: torch.nn.Module, prefix: str = ""):
    return [(prefix + n, p) for n, p in module.named_parameters()]


def _nce_case(gen):
    enc = NumericalCategoricalEncoder(3, [4, 3], embed_dim=4, cat_dim=2, n_dynamic=2,
                                      time_dim=4).double()
    enc.train()
    numeric = torch.randn(5, 3, dtype=torch.float64, generator=gen)
    cats = torch.randint(0, 3, (5, 2), generator=gen)
    times = torch.rand(5, dtype=torch.float64, generator=gen) * 100
    series = torch.randn(5, 4, 2, dtype=torch.float64, generator=gen)
    lengths = torch.tensor([4, 3, 0, 2, 4])
    readout = torch.randn(5, 4, dtype=torch.float64, generator=gen)
    fn = lambda: (enc(numeric, cats, times, series, lengths) * readout).sum()
    return fn, _named(enc, "nce.")


def _attention_case(gen):
    self_attn = MultiHeadAttention(8, 2).double()
    cross = MultiHeadAttention(8, 2).double()
    Z = torch.randn(1, 3, 8, dtype=torch.float64, generator=gen, requires_grad=True)
    zt = torch.randn(1, 8, dtype=torch.float64, generator=gen, requires_grad=True)
    readout = torch.randn(1, 8, dtype=torch.float64, generator=gen)

    def fn():
        z_cross, _ = cross_attend_target(zt, self_attend_vehicles(Z, self_attn), cross)
        return (z_cross * readout).sum()
    return fn, [("Z", Z), ("z_target", zt)] + _named(self_attn, "self.") + _named(cross, "cross.")


def _fusion_case(gen):
    fusion = FinalFusion(4, time_dim=4).double()
    zc = torch.randn(3, 4, dtype=torch.float64, generator=gen)
    zg = torch.randn(3, 4, dtype=torch.float64, generator=gen)
    hz = torch.tensor([1, 3, 6])
    readout = torch.randn(3, 4, dtype=torch.float64, generator=gen)
    return (lambda: (fusion(zc, zg, hz) * readout).sum()), _named(fusion, "fusion.")


def _backbone_case(gen):
    net = NestedUNet(BackboneConfig(in_channels=3, base_width=4, depth=2, cond_heads=2),
                     cond_dim=4).double()
    net.eval()
    for m in net.modules():  # non-trivial frozen statistics
        if isinstance(m, torch.nn.BatchNorm2d):
            m.running_mean.uniform_(-0.1, 0.1, generator=gen)
            m.running_var.uniform_(0.5, 1.5, generator=gen)
    image = torch.randn(2, 3, 16, 16, dtype=torch.float64, generator=gen)
    z = torch.randn(2, 4, dtype=torch.float64, generator=gen, requires_grad=True)
    fn = lambda: net(image, z).mean()
    cond = [(n, p) for n, p in _named(net, "backbone.")
            if ".cond." in n and (".v." in n or ".out." in n or "norm_kv" in n)]
    return fn, [("z_final", z)] + cond


def _loss_cases(gen):
    logits = torch.randn(2, 8, 8, dtype=torch.float64, generator=gen, requires_grad=True)
    target = torch.rand(2, 8, 8, dtype=torch.float64, generator=gen)
    target[:, :2] = 0.0
    fp = FocalParams(0.25, 2.0)
    return {
        "bce": lambda: bce_loss(heatmap_activation(logits, "bce"), target),
        "mse": lambda: mse_loss(heatmap_activation(logits, "mse"), target),
        "focal": lambda: focal_loss(heatmap_activation(logits, "focal"), target, fp),
        "kldiv": lambda: kldiv_loss(heatmap_activation(logits, "kldiv"), target),
    }, logits


def gradcheck(component: str = "all", seed: int = 0, corrupt: float = 1.0) -> List[GradResult]:
    """Run the finite-difference harness for one component or ``all``."""
    if component != "all" and component not in COMPONENTS:
        raise InvalidArgument(f"unknown component {component!r}; choose from {COMPONENTS}")
    wanted = COMPONENTS if component == "all" else (component,)
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    results: List[GradResult] = []
    for comp in wanted:
        if comp == "losses":
            fns, logits = _loss_cases(gen)
            for kind, fn in fns.items():
                results += check_gradients(f"loss:{kind}", fn, [("logits", logits)],
                                           corrupt=corrupt)
            continue
        case = {"nce": _nce_case, "attention": _attention_case, "fusion": _fusion_case,
                "backbone": _backbone_case}[comp]
        fn, tensors = case(gen)
        results += check_gradients(comp, fn, tensors, corrupt=corrupt,
                                   max_entries=40 if comp == "backbone" else None,
                                   generator=gen)
    return results


def format_report(results: Sequence[GradResult]) -> str:
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.component:<12} {r.name:<48} {r.rel_error:.2e}"
             for r in results]
    worst: Dict[str, float] = {}
    for r in results:
        worst[r.component] = max(worst.get(r.component, 0.0), r.rel_error)
    lines.append("")
    lines += [f"{c:<12} max rel. error {e:.2e}" for c, e in worst.items()]
    return "\n".join(lines)
