"""Central-difference gradient oracles shared by the test modules."""

import copy

import torch


def fd_rel_error(fn, tensor, coords, eps):
    """Norm-wise relative error between autograd and central differences."""
    tensor.grad = None
    fn().backward()
    analytic = tensor.grad.reshape(-1)[coords].clone()
    flat = tensor.data.view(-1)
    numeric = torch.empty_like(analytic)
    with torch.no_grad():
        for n, i in enumerate(coords):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = fn().item()
            flat[i] = orig - eps
            down = fn().item()
            flat[i] = orig
            numeric[n] = (up - down) / (2 * eps)
    return ((analytic - numeric).norm() / max(analytic.norm(), numeric.norm(), 1e-12)).item()


def fd_oracle_rel_error(module, probe, coords_by_name, eps=1e-6):
    """float32 autograd gradients against float64 central differences.

    ``probe(m)`` returns the scalar loss of module ``m``; the oracle runs on a
    float64 copy so the differences are free of float32 rounding noise.
    """
    module.zero_grad(set_to_none=True)
    probe(module).backward()
    ref = copy.deepcopy(module).double()
    ref_params = dict(ref.named_parameters())
    errors = {}
    for name, p in module.named_parameters():
        coords = coords_by_name(name, p)
        analytic = p.grad.reshape(-1)[coords].double()
        flat = ref_params[name].data.view(-1)
        numeric = torch.empty_like(analytic)
        with torch.no_grad():
            for n, i in enumerate(coords):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = probe(ref).item()
                flat[i] = orig - eps
                down = probe(ref).item()
                flat[i] = orig
                numeric[n] = (up - down) / (2 * eps)
        errors[name] = ((analytic - numeric).norm() / max(analytic.norm(), numeric.norm(), 1e-12)).item()
    return errors
